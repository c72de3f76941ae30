//! On-disk formats: model and fingerprint containers, dataset directories,
//! training logs and text reports.
//!
//! Binary containers share one layout: an 8-byte magic, a little-endian
//! `u32` format version, a little-endian `u64` header length, a JSON header,
//! then raw little-endian IEEE-754 `f32` payload in header order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use exitprint_core::data::{Dataset, DatasetSplits};
use exitprint_core::fingerprint::{FingerprintConfig, FingerprintSample, FingerprintSet};
use exitprint_core::layer::LayerSpec;
use exitprint_core::train::{EpochLog, EpochObserver};
use exitprint_core::verify::{EECCurve, VerificationReport};
use exitprint_core::{BackboneModel, ExitPolicy, MultiExitModel, Shape};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"EXPMODEL";
const FINGERPRINT_MAGIC: &[u8; 8] = b"EXPFPSET";

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_container<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header).map_err(|e| Error::format("container header", e))?;
    let mut out = Vec::with_capacity(20 + h.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_container<'a, H: Deserialize<'a>>(
    what: &'static str,
    magic: &[u8; 8],
    bytes: &'a [u8],
) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(what, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen || !(body.len() - hlen).is_multiple_of(4) {
        return Err(Error::format(what, "truncated"));
    }
    let header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(what, e))?;
    let payload = body[hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    input_shape: Shape,
    n_y: usize,
    layers: Vec<LayerSpec>,
    attach_indices: Vec<usize>,
    layer_costs: Vec<u64>,
    policy: Option<ExitPolicy>,
    tensors: Vec<TensorEntry>,
}

/// A model plus the exit policy it was calibrated with, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: MultiExitModel,
    pub policy: Option<ExitPolicy>,
}

fn param_slots(model: &MultiExitModel) -> Vec<(String, &[f32])> {
    let mut out = Vec::new();
    for (i, l) in model.backbone.layers.iter().enumerate() {
        if l.spec.has_params() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice()));
            out.push((format!("layer{i}.bias"), l.bias.as_slice()));
        }
    }
    for (k, ic) in model.ics.iter().enumerate() {
        out.push((format!("ic{k}.weight"), ic.fc.weight.as_slice()));
        out.push((format!("ic{k}.bias"), ic.fc.bias.as_slice()));
    }
    out
}

/// A backbone wrapped as a model without internal classifiers.
pub fn backbone_only(backbone: BackboneModel) -> MultiExitModel {
    let mut m = MultiExitModel {
        backbone,
        ics: Vec::new(),
        layer_costs: Vec::new(),
    };
    m.reset_costs();
    m
}

pub fn encode_model(model: &MultiExitModel, policy: Option<&ExitPolicy>) -> Result<Vec<u8>> {
    let slots = param_slots(model);
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        n_y: model.n_y(),
        layers: model.backbone.specs(),
        attach_indices: model.attach_indices(),
        layer_costs: model.layer_costs.clone(),
        policy: policy.copied(),
        tensors: slots
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let payload: Vec<f32> = slots.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    encode_container(MODEL_MAGIC, &header, &payload)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let (h, payload): (ModelHeader, Vec<f32>) = decode_container("model container", MODEL_MAGIC, bytes)?;
    let backbone = BackboneModel::new(&h.layers, h.input_shape, h.n_y)?;
    let mut model = if h.attach_indices.is_empty() {
        backbone_only(backbone)
    } else {
        MultiExitModel::with_zero_heads(backbone, &h.attach_indices)?
    };
    if h.layer_costs.len() != model.layer_costs.len() {
        return Err(Error::format(
            "model container",
            format!("{} layer costs for {} slots", h.layer_costs.len(), model.layer_costs.len()),
        ));
    }
    model.layer_costs = h.layer_costs;
    let expected: Vec<TensorEntry> = param_slots(&model)
        .iter()
        .map(|(name, v)| TensorEntry {
            name: name.clone(),
            len: v.len(),
        })
        .collect();
    if expected != h.tensors {
        return Err(Error::format("model container", "tensor table does not match architecture"));
    }
    if payload.len() != expected.iter().map(|t| t.len).sum::<usize>() {
        return Err(Error::format("model container", "payload length does not match tensor table"));
    }
    let mut src = payload.into_iter();
    let mut fill = |dst: &mut Vec<f32>| dst.iter_mut().for_each(|v| *v = src.next().expect("length checked"));
    for l in &mut model.backbone.layers {
        if l.spec.has_params() {
            fill(&mut l.weight);
            fill(&mut l.bias);
        }
    }
    for ic in &mut model.ics {
        fill(&mut ic.fc.weight);
        fill(&mut ic.fc.bias);
    }
    Ok(ModelFile {
        model,
        policy: h.policy,
    })
}

pub fn save_model(path: &Path, model: &MultiExitModel, policy: Option<&ExitPolicy>) -> Result<()> {
    write_atomic(path, &encode_model(model, policy)?)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode_model(&read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleMeta {
    l2_distance: f64,
    final_loss: f64,
    exit_index_on_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FingerprintHeader {
    format_version: u32,
    target_model_id: String,
    config: FingerprintConfig,
    seed: u64,
    created: Option<u64>,
    input_len: usize,
    samples: Vec<SampleMeta>,
}

/// Payload is `x` then `x_prime` for each sample in order.
pub fn encode_fingerprints(set: &FingerprintSet) -> Result<Vec<u8>> {
    let input_len = set.samples.first().map_or(0, |s| s.x.len());
    if set
        .samples
        .iter()
        .any(|s| s.x.len() != input_len || s.x_prime.len() != input_len)
    {
        return Err(Error::format("fingerprint set", "samples differ in length"));
    }
    let header = FingerprintHeader {
        format_version: FORMAT_VERSION,
        target_model_id: set.target_model_id.clone(),
        config: set.config.clone(),
        seed: set.seed,
        created: set.created,
        input_len,
        samples: set
            .samples
            .iter()
            .map(|s| SampleMeta {
                l2_distance: s.l2_distance,
                final_loss: s.final_loss,
                exit_index_on_target: s.exit_index_on_target,
            })
            .collect(),
    };
    let payload: Vec<f32> = set
        .samples
        .iter()
        .flat_map(|s| s.x.iter().chain(&s.x_prime).copied())
        .collect();
    encode_container(FINGERPRINT_MAGIC, &header, &payload)
}

pub fn decode_fingerprints(bytes: &[u8]) -> Result<FingerprintSet> {
    let (h, payload): (FingerprintHeader, Vec<f32>) =
        decode_container("fingerprint set", FINGERPRINT_MAGIC, bytes)?;
    if payload.len() != 2 * h.input_len * h.samples.len() {
        return Err(Error::format("fingerprint set", "payload length does not match header"));
    }
    let samples = h
        .samples
        .into_iter()
        .zip(payload.chunks_exact(2 * h.input_len.max(1)))
        .map(|(m, chunk)| FingerprintSample {
            x: chunk[..h.input_len].to_vec(),
            x_prime: chunk[h.input_len..].to_vec(),
            l2_distance: m.l2_distance,
            final_loss: m.final_loss,
            exit_index_on_target: m.exit_index_on_target,
        })
        .collect();
    Ok(FingerprintSet {
        samples,
        target_model_id: h.target_model_id,
        config: h.config,
        seed: h.seed,
        created: h.created,
    })
}

pub fn fingerprint_manifest(set: &FingerprintSet, n_exits: usize) -> String {
    let hist = set.exit_histogram(n_exits);
    let mut s = String::new();
    writeln!(s, "target_model_id: {}", set.target_model_id).unwrap();
    writeln!(s, "N: {}", set.len()).unwrap();
    writeln!(s, "mean_l2: {:.6}", set.mean_l2()).unwrap();
    let cells: Vec<String> = (1..=n_exits).map(|i| format!("{i}:{}", hist[i])).collect();
    writeln!(s, "exit_histogram: {}", cells.join(" ")).unwrap();
    s
}

/// Saves the container and a `.manifest.txt` next to it.
pub fn save_fingerprints(path: &Path, set: &FingerprintSet, n_exits: usize) -> Result<()> {
    write_atomic(path, &encode_fingerprints(set)?)?;
    write_atomic(&sibling(path, "manifest.txt"), fingerprint_manifest(set, n_exits).as_bytes())
}

pub fn load_fingerprints(path: &Path) -> Result<FingerprintSet> {
    decode_fingerprints(&read(path)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    n_y: usize,
    channels: usize,
    height: usize,
    width: usize,
    splits: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitCounts {
    train: usize,
    val: usize,
    test: usize,
}

/// Writes `dataset.toml` plus `<split>.f32` (images, CHW order) and
/// `<split>.labels` (one integer per line) for each split.
pub fn save_dataset(dir: &Path, data: &DatasetSplits) -> Result<()> {
    let shape = data.train.input_shape;
    let manifest = DatasetManifest {
        name: data.name.clone(),
        n_y: data.train.n_y,
        channels: shape.c,
        height: shape.h,
        width: shape.w,
        splits: SplitCounts {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        },
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("dataset manifest", e))?;
    write_atomic(&dir.join("dataset.toml"), text.as_bytes())?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let bytes: Vec<u8> = split.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&dir.join(format!("{name}.f32")), &bytes)?;
        let labels: String = split.labels.iter().map(|l| format!("{l}\n")).collect();
        write_atomic(&dir.join(format!("{name}.labels")), labels.as_bytes())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let path = dir.join("dataset.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format("dataset manifest", e))?;
    let shape = Shape::new(m.channels, m.height, m.width);
    let split = |name: &str, count: usize| -> Result<Dataset> {
        let raw = read(&dir.join(format!("{name}.f32")))?;
        if raw.len() != count * shape.numel() * 4 {
            return Err(Error::format(
                "dataset",
                format!("{name}.f32 holds {} bytes, expected {}", raw.len(), count * shape.numel() * 4),
            ));
        }
        let images = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let lpath = dir.join(format!("{name}.labels"));
        let labels = fs::read_to_string(&lpath)
            .map_err(|e| Error::io(&lpath, e))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::format("dataset labels", e)))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != count {
            return Err(Error::format(
                "dataset labels",
                format!("{name}.labels holds {} labels, expected {count}", labels.len()),
            ));
        }
        Ok(Dataset::new(shape, m.n_y, images, labels)?)
    };
    Ok(DatasetSplits {
        name: m.name.clone(),
        train: split("train", m.splits.train)?,
        val: split("val", m.splits.val)?,
        test: split("test", m.splits.test)?,
    })
}

/// Collects one log line per epoch: epoch, train loss, val accuracy and
/// seconds since the log was created.
#[derive(Debug)]
pub struct TrainLog {
    start: Instant,
    lines: Vec<String>,
}

impl Default for TrainLog {
    fn default() -> Self {
        Self {
            start: Instant::now(),
            lines: Vec::new(),
        }
    }
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tval_accuracy\twall_time_s";

    pub fn render(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

impl EpochObserver for TrainLog {
    fn epoch(&mut self, log: &EpochLog) {
        self.lines.push(format!(
            "{}\t{:.6}\t{:.4}\t{:.3}",
            log.epoch + 1,
            log.train_loss,
            log.val_accuracy,
            self.start.elapsed().as_secs_f64()
        ));
    }
}

pub fn render_verification(r: &VerificationReport) -> String {
    let mut s = String::new();
    writeln!(s, "model_id: {}", r.model_id).unwrap();
    writeln!(s, "backend: {}", r.backend).unwrap();
    writeln!(s, "T_N: {:.6}", r.t_n).unwrap();
    writeln!(s, "T_f: {:.6}", r.t_f).unwrap();
    writeln!(s, "verdict: {}", r.verdict).unwrap();
    writeln!(s, "N: {}", r.n).unwrap();
    writeln!(s, "t_max: {}", r.t_max).unwrap();
    writeln!(s, "benign_auc: {:.6}", r.benign_auc).unwrap();
    s
}

/// Two whitespace-separated columns: normalized time and fraction exited.
pub fn render_curve(curve: &EECCurve) -> String {
    let mut s = String::from("# normalized_time fraction\n");
    for (t, f) in &curve.points {
        writeln!(s, "{t:.6} {f:.6}").unwrap();
    }
    s
}

pub fn save_verification(dir: &Path, r: &VerificationReport) -> Result<()> {
    let stem = file_safe(&r.model_id);
    write_atomic(&dir.join(format!("{stem}.txt")), render_verification(r).as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.curve")), render_curve(&r.curve).as_bytes())
}

/// Maps a model id to a file name component.
pub fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.@+".contains(c) { c } else { '_' })
        .collect()
}
