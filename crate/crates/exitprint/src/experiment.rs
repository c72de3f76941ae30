//! End-to-end experiment: train, calibrate, fingerprint, attack, verify,
//! aggregate.
//!
//! Every intermediate artifact is written under the experiment directory
//! and reused on rerun, so later stages can be repeated without retraining.
//! Reports carry no timestamps; under the cost-model backend a rerun
//! reproduces them byte for byte.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use exitprint_core::arch::ArchSpec;
use exitprint_core::attacks::{apply_pipeline, ExitRule, Suspect};
use exitprint_core::calibrate::{calibrate_from_table, relative_accuracy_drop, ExitTable};
use exitprint_core::data::{Dataset, DatasetSplits};
use exitprint_core::fingerprint::{baseline_ae_fingerprint, generate_fingerprint_set, AdversarialSample};
use exitprint_core::model::Threshold;
use exitprint_core::rng::derive_seed;
use exitprint_core::train::{exit_accuracies, to_trained_multiexit, train_backbone, TrainConfig};
use exitprint_core::verify::{
    ablation_rows, baseline_verify, benign_eec_auc, eec_curve, roc_auc, select_t_f, verified_rate,
    verify_ip, AblationRow, EECCurve, Meter, TimingBackend, Verdict, VerificationReport,
};
use exitprint_core::{ExitPolicy, MultiExitModel, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result, StageExt};
use crate::format::{self, file_safe, write_atomic, TrainLog};
use crate::timing;

pub const TARGET_ID: &str = "target";

pub fn independent_id(k: usize) -> String {
    format!("independent-{k:02}")
}

/// Training seed of a population member: the target, `independent-NN`, or
/// any other id hashed into the master seed.
pub fn model_seed(master: u64, id: &str) -> u64 {
    if id == TARGET_ID {
        return derive_seed(master, "target", 0);
    }
    match id.strip_prefix("independent-").and_then(|k| k.parse::<u64>().ok()) {
        Some(k) => derive_seed(master, "independent", k),
        None => derive_seed(master, id, 0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cohort {
    Target,
    Independent,
    Attacked,
}

/// One model verified under one RAD level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model_id: String,
    pub cohort: Cohort,
    /// Attack kind of the pipeline that produced the model.
    pub group: Option<String>,
    pub stolen_cohort: bool,
    pub epoch: Option<usize>,
    pub t_c: Option<f64>,
    /// Test accuracy under the model's exit policy.
    pub accuracy: f64,
    /// Accuracy drop relative to the target's final-exit test accuracy.
    pub rad_vs_target: f64,
    pub flagged: bool,
    pub fingerprint_last_exit: f64,
    pub baseline_match: f64,
    pub baseline_verdict: Verdict,
    pub verification: VerificationReport,
}

impl ModelResult {
    pub fn t_n(&self) -> f64 {
        self.verification.t_n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub group: String,
    pub models: usize,
    pub flagged: usize,
    pub detected: usize,
    pub rate: Option<f64>,
    pub mean_t_n: f64,
    pub max_t_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub model_id: String,
    pub epoch: usize,
    pub t_n: f64,
    pub verdict: Verdict,
    pub baseline_match: f64,
    pub baseline_verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub t_f: f64,
    pub target_t_c: Option<f64>,
    pub fingerprint_t_n: f64,
    pub fingerprint_last_exit: f64,
    pub target_benign_auc: f64,
    pub mean_independent_benign_auc: f64,
    pub independent_rate: f64,
    pub stolen_rate: Option<f64>,
    pub roc_auc: Option<f64>,
    /// Detection rate over unflagged attacked models, PGD-AT excluded.
    pub robustness_rate: Option<f64>,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub rad: f64,
    pub summary: LevelSummary,
    pub target: ModelResult,
    pub independents: Vec<ModelResult>,
    pub attacked: Vec<ModelResult>,
    pub robustness: Vec<RobustnessRow>,
    pub adv_training: Vec<ContrastRow>,
    pub ablation: Vec<AblationRow>,
    /// Target EEC curves for disjoint benign groups of the test split.
    pub benign_groups: Vec<EECCurve>,
}

impl LevelReport {
    /// Attacked models counted in the uniqueness table.
    pub fn stolen(&self) -> impl Iterator<Item = &ModelResult> {
        self.attacked.iter().filter(|m| m.stolen_cohort && !m.flagged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub name: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub crate_version: String,
    pub backend: TimingBackend,
    pub target_seed: u64,
    pub independent_seeds: Vec<u64>,
    pub fingerprint_seed: u64,
    pub baseline_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSummary {
    pub n: usize,
    pub mean_l2: f64,
    pub exit_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub target_exit_accuracies: Vec<f64>,
    pub fingerprint: FingerprintSummary,
    pub levels: Vec<LevelReport>,
}

/// Paths inside an experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{}.emx", file_safe(id)))
    }

    pub fn train_log(&self, id: &str) -> PathBuf {
        self.root.join("logs").join(format!("{}.log", file_safe(id)))
    }

    pub fn fingerprints(&self) -> PathBuf {
        self.root.join("fingerprints").join("target.fps")
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("fingerprints").join("baseline.json")
    }

    pub fn attacked_model(&self, label: &str) -> PathBuf {
        self.root.join("attacked").join(format!("{}.emx", file_safe(label)))
    }

    pub fn attack_manifest(&self, pipeline: usize) -> PathBuf {
        self.root.join("attacked").join(format!("pipeline-{pipeline:02}.json"))
    }

    pub fn level_dir(&self, rad: f64) -> PathBuf {
        self.root.join("reports").join(rad_tag(rad))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

pub fn rad_tag(rad: f64) -> String {
    format!("rad-{:02}", (rad * 100.0).round() as i64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttackManifestEntry {
    label: String,
    exit_rule: Option<ExitRule>,
    epoch: Option<usize>,
}

/// Trains a backbone and its heads for one population member, or loads it
/// when already on disk.
pub fn train_or_load(
    layout: &Layout,
    id: &str,
    arch: &ArchSpec,
    data: &DatasetSplits,
    backbone_cfg: &TrainConfig,
    ic_cfg: &TrainConfig,
    seed: u64,
) -> Result<MultiExitModel> {
    let path = layout.model(id);
    if path.exists() {
        return Ok(format::load_model(&path)?.model);
    }
    let mut log = TrainLog::default();
    let (backbone, _) = train_backbone(arch, data, &backbone_cfg.clone().with_seed(seed), &mut log)?;
    write_atomic(&layout.train_log(id), log.render().as_bytes())?;
    let ic = ic_cfg.clone().with_seed(derive_seed(seed, "ic", 0));
    let model = to_trained_multiexit(backbone, &arch.attach_indices, data, &ic)?;
    format::save_model(&path, &model, None)?;
    Ok(model)
}

/// Disjoint groups of `size` consecutive test samples.
pub fn benign_groups(test: &Dataset, size: usize) -> Vec<Vec<Tensor<f32>>> {
    (0..test.len() / size)
        .map(|g| (g * size..(g + 1) * size).map(|i| test.tensor(i)).collect())
        .collect()
}

fn policy_for(rule: Option<ExitRule>, table: &ExitTable, rad: f64) -> Result<ExitPolicy> {
    Ok(match rule {
        None => calibrate_from_table(table, rad),
        Some(ExitRule::Rad(r)) => calibrate_from_table(table, r),
        Some(ExitRule::Fixed(Threshold::Confidence(t))) => ExitPolicy::confidence(t)?,
        Some(ExitRule::Fixed(Threshold::NeverEarly)) => ExitPolicy::never_early(),
    })
}

fn last_exit_fraction(model: &MultiExitModel, xs: &[Tensor<f32>], policy: &ExitPolicy) -> Result<f64> {
    let n = model.n_exits();
    let mut last = 0usize;
    for x in xs {
        if model.early_exit_infer(x, policy)?.exit_index == n {
            last += 1;
        }
    }
    Ok(last as f64 / xs.len().max(1) as f64)
}

struct Unit<'a> {
    id: String,
    cohort: Cohort,
    group: Option<String>,
    stolen: bool,
    epoch: Option<usize>,
    exit_rule: Option<ExitRule>,
    model: &'a MultiExitModel,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a DatasetSplits,
    fingerprints: Vec<Tensor<f32>>,
    benign: Vec<Tensor<f32>>,
    baseline: &'a [AdversarialSample],
    target_full_accuracy: f64,
    meter: Box<dyn Meter>,
}

/// Evaluates one model under every RAD level; verdicts are filled in once
/// `T_f` is known.
fn evaluate_unit(ctx: &mut Context, unit: &Unit) -> Result<Vec<ModelResult>> {
    let val = ExitTable::build(unit.model, &ctx.data.val)?;
    let test = ExitTable::build(unit.model, &ctx.data.test)?;
    let mut out = Vec::new();
    for &rad in &ctx.cfg.rad_levels {
        let policy = policy_for(unit.exit_rule, &val, rad)?;
        let accuracy = test.accuracy(&policy);
        let rad_vs_target = relative_accuracy_drop(ctx.target_full_accuracy, accuracy);
        let cal = benign_eec_auc(unit.model, &ctx.benign, &policy, ctx.meter.as_mut())?;
        let verification = verify_ip(
            unit.model,
            &unit.id,
            &ctx.fingerprints,
            &policy,
            ctx.meter.as_mut(),
            0.0,
            Some(&cal),
        )?;
        let base = baseline_verify(unit.model, &unit.id, ctx.baseline, &policy, ctx.cfg.baseline_threshold)?;
        out.push(ModelResult {
            model_id: unit.id.clone(),
            cohort: unit.cohort,
            group: unit.group.clone(),
            stolen_cohort: unit.stolen,
            epoch: unit.epoch,
            t_c: policy.t_c(),
            accuracy,
            rad_vs_target,
            flagged: unit.cohort == Cohort::Attacked && rad_vs_target > ctx.cfg.max_attack_rad,
            fingerprint_last_exit: last_exit_fraction(unit.model, &ctx.fingerprints, &policy)?,
            baseline_match: base.match_rate,
            baseline_verdict: base.verdict,
            verification,
        });
    }
    Ok(out)
}

fn set_t_f(r: &mut ModelResult, t_f: f64) {
    r.verification.t_f = t_f;
    r.verification.verdict = Verdict::from_scores(r.verification.t_n, t_f);
}

/// Options that do not affect results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub verbose: bool,
}

fn note(opts: RunOptions, msg: impl AsRef<str>) {
    if opts.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

/// Runs the whole experiment in `dir`, reusing artifacts already there.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<ExperimentReport> {
    cfg.validate().stage("config")?;
    let layout = Layout::new(dir);
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes()).stage("config")?;
    let data = cfg.dataset.load().stage("dataset")?;
    let arch = cfg.arch.build(&data).stage("dataset")?;

    let target_seed = model_seed(cfg.seed, TARGET_ID);
    let independent_seeds: Vec<u64> = (0..cfg.population)
        .map(|k| model_seed(cfg.seed, &independent_id(k)))
        .collect();
    note(opts, "train: target");
    let target = train_or_load(&layout, TARGET_ID, &arch, &data, &cfg.backbone, &cfg.ic, target_seed).stage("train")?;
    let mut independents = Vec::new();
    for (k, &seed) in independent_seeds.iter().enumerate() {
        note(opts, format!("train: {}", independent_id(k)));
        independents.push(
            train_or_load(&layout, &independent_id(k), &arch, &data, &cfg.backbone, &cfg.ic, seed).stage("train")?,
        );
    }

    let craft_policy = {
        let table = ExitTable::build(&target, &data.val).stage("calibrate")?;
        calibrate_from_table(&table, cfg.rad_levels[0])
    };
    format::save_model(&layout.model(TARGET_ID), &target, Some(&craft_policy)).stage("calibrate")?;

    let fingerprint_seed = derive_seed(cfg.seed, "fingerprint", 0);
    let fp_path = layout.fingerprints();
    let set = if fp_path.exists() {
        format::load_fingerprints(&fp_path).stage("fingerprint")?
    } else {
        note(opts, "fingerprint: crafting");
        let set = generate_fingerprint_set(&target, &data.val, &cfg.fingerprint, &craft_policy, fingerprint_seed, TARGET_ID)
            .stage("fingerprint")?;
        format::save_fingerprints(&fp_path, &set, target.n_exits()).stage("fingerprint")?;
        set
    };
    let baseline_seed = derive_seed(cfg.seed, "baseline", 0);
    let baseline = load_or_craft_baseline(&layout, &target, &data, cfg, baseline_seed, opts).stage("fingerprint")?;

    let suspects = attack_or_load(&layout, &target, &data, cfg, opts).stage("attack")?;
    check_cohorts(&independents, &suspects).stage("attack")?;

    note(opts, "verify");
    let groups = benign_groups(&data.test, cfg.benign_samples);
    if groups.is_empty() {
        return Err(Error::Config(format!(
            "test split of {} samples is smaller than one benign group of {}",
            data.test.len(),
            cfg.benign_samples
        )))
        .stage("verify");
    }
    let target_full_accuracy = ExitTable::build(&target, &data.test).stage("verify")?.full_accuracy();
    let mut ctx = Context {
        cfg,
        data: &data,
        fingerprints: set.inputs(target.input_shape()),
        benign: groups[0].clone(),
        baseline: &baseline,
        target_full_accuracy,
        meter: timing::meter(cfg.backend),
    };
    let mut units = vec![Unit {
        id: TARGET_ID.into(),
        cohort: Cohort::Target,
        group: None,
        stolen: false,
        epoch: None,
        exit_rule: None,
        model: &target,
    }];
    for (k, m) in independents.iter().enumerate() {
        units.push(Unit {
            id: independent_id(k),
            cohort: Cohort::Independent,
            group: None,
            stolen: false,
            epoch: None,
            exit_rule: None,
            model: m,
        });
    }
    for (s, group, stolen) in &suspects {
        units.push(Unit {
            id: s.label.clone(),
            cohort: Cohort::Attacked,
            group: Some(group.clone()),
            stolen: *stolen,
            epoch: s.epoch,
            exit_rule: s.exit_rule,
            model: &s.model,
        });
    }
    let mut per_unit = Vec::with_capacity(units.len());
    for u in &units {
        per_unit.push(evaluate_unit(&mut ctx, u).stage("verify")?);
    }

    let mut levels = Vec::new();
    for (li, &rad) in cfg.rad_levels.iter().enumerate() {
        let mut target_r = per_unit[0][li].clone();
        let mut indep: Vec<ModelResult> = per_unit[1..=cfg.population].iter().map(|v| v[li].clone()).collect();
        let mut attacked: Vec<ModelResult> = per_unit[1 + cfg.population..].iter().map(|v| v[li].clone()).collect();
        let indep_scores: Vec<f64> = indep.iter().map(ModelResult::t_n).collect();
        let t_f = select_t_f(target_r.t_n(), &indep_scores).stage("verify")?;
        set_t_f(&mut target_r, t_f);
        indep.iter_mut().for_each(|r| set_t_f(r, t_f));
        attacked.iter_mut().for_each(|r| set_t_f(r, t_f));

        let target_policy = policy_for(None, &ExitTable::build(&target, &data.val).stage("verify")?, rad)
            .stage("verify")?;
        let benign_curves = groups
            .iter()
            .map(|g| {
                let raw = ctx.meter.measure(&target, g, &target_policy)?;
                eec_curve(&raw, target_r.verification.t_max)
            })
            .collect::<exitprint_core::Result<Vec<_>>>()
            .stage("verify")?;
        levels.push(aggregate(rad, cfg, target_r, indep, attacked, benign_curves).stage("aggregate")?);
    }

    let report = ExperimentReport {
        provenance: Provenance {
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            master_seed: cfg.seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            backend: cfg.backend,
            target_seed,
            independent_seeds,
            fingerprint_seed,
            baseline_seed,
        },
        target_exit_accuracies: exit_accuracies(&target, &data.test),
        fingerprint: FingerprintSummary {
            n: set.len(),
            mean_l2: set.mean_l2(),
            exit_histogram: set.exit_histogram(target.n_exits()),
        },
        levels,
    };
    write_report(&layout, &report).stage("report")?;
    Ok(report)
}

fn load_or_craft_baseline(
    layout: &Layout,
    target: &MultiExitModel,
    data: &DatasetSplits,
    cfg: &ExperimentConfig,
    seed: u64,
    opts: RunOptions,
) -> Result<Vec<AdversarialSample>> {
    let path = layout.baseline();
    if path.exists() {
        return serde_json::from_slice(&format::read(&path)?).map_err(|e| Error::format("baseline set", e));
    }
    note(opts, "fingerprint: baseline adversarial examples");
    let set = baseline_ae_fingerprint(target, &data.val, &cfg.baseline, seed)?;
    let bytes = serde_json::to_vec(&set).map_err(|e| Error::format("baseline set", e))?;
    write_atomic(&path, &bytes)?;
    Ok(set)
}

/// Runs (or reloads) every attack pipeline. Returns each suspect with its
/// group and cohort flag.
fn attack_or_load(
    layout: &Layout,
    target: &MultiExitModel,
    data: &DatasetSplits,
    cfg: &ExperimentConfig,
    opts: RunOptions,
) -> Result<Vec<(Suspect, String, bool)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (p, pipeline) in cfg.attacks.iter().enumerate() {
        let manifest = layout.attack_manifest(p);
        let suspects = if manifest.exists() {
            let entries: Vec<AttackManifestEntry> = serde_json::from_slice(&format::read(&manifest)?)
                .map_err(|e| Error::format("attack manifest", e))?;
            entries
                .into_iter()
                .map(|e| {
                    Ok(Suspect {
                        model: format::load_model(&layout.attacked_model(&e.label))?.model,
                        label: e.label,
                        exit_rule: e.exit_rule,
                        epoch: e.epoch,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            note(opts, format!("attack: pipeline {p} ({})", pipeline.group()));
            let suspects = apply_pipeline(target, &pipeline.steps, data, &cfg.ic)?;
            let mut entries = Vec::new();
            for s in &suspects {
                format::save_model(&layout.attacked_model(&s.label), &s.model, None)?;
                entries.push(AttackManifestEntry {
                    label: s.label.clone(),
                    exit_rule: s.exit_rule,
                    epoch: s.epoch,
                });
            }
            let bytes = serde_json::to_vec_pretty(&entries).map_err(|e| Error::format("attack manifest", e))?;
            write_atomic(&manifest, &bytes)?;
            suspects
        };
        for s in suspects {
            if !seen.insert(s.label.clone()) {
                return Err(Error::Config(format!(
                    "attack label {} produced twice; give the pipelines distinct seeds",
                    s.label
                )));
            }
            out.push((s, pipeline.group(), pipeline.stolen));
        }
    }
    Ok(out)
}

fn check_cohorts(independents: &[MultiExitModel], suspects: &[(Suspect, String, bool)]) -> Result<()> {
    let ids: BTreeSet<String> = (0..independents.len()).map(independent_id).collect();
    for (s, _, _) in suspects {
        if ids.contains(&s.label) || s.label == TARGET_ID {
            return Err(Error::Config(format!("model id {} appears in two cohorts", s.label)));
        }
    }
    Ok(())
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn rate(detected: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| detected as f64 / total as f64)
}

pub const ADV_TRAIN_GROUP: &str = "adv-train";

/// Builds the summary tables of one level from per-model results.
pub fn aggregate(
    rad: f64,
    cfg: &ExperimentConfig,
    target: ModelResult,
    independents: Vec<ModelResult>,
    attacked: Vec<ModelResult>,
    benign_groups: Vec<EECCurve>,
) -> Result<LevelReport> {
    let t_f = target.verification.t_f;
    let indep_scores: Vec<f64> = independents.iter().map(ModelResult::t_n).collect();
    let indep_verdicts: Vec<Verdict> = independents.iter().map(|r| r.verification.verdict).collect();
    let stolen: Vec<&ModelResult> = attacked.iter().filter(|m| m.stolen_cohort && !m.flagged).collect();
    let stolen_scores: Vec<f64> = stolen.iter().map(|m| m.t_n()).collect();
    let stolen_verdicts: Vec<Verdict> = stolen.iter().map(|m| m.verification.verdict).collect();

    let mut groups: Vec<String> = Vec::new();
    for m in &attacked {
        let g = m.group.clone().unwrap_or_default();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let robustness: Vec<RobustnessRow> = groups
        .iter()
        .map(|g| {
            let rows: Vec<&ModelResult> = attacked.iter().filter(|m| m.group.as_deref() == Some(g)).collect();
            let usable: Vec<&&ModelResult> = rows.iter().filter(|m| !m.flagged).collect();
            let detected = usable.iter().filter(|m| m.verification.verdict == Verdict::Stolen).count();
            RobustnessRow {
                group: g.clone(),
                models: rows.len(),
                flagged: rows.len() - usable.len(),
                detected,
                rate: rate(detected, usable.len()),
                mean_t_n: mean(rows.iter().map(|m| m.t_n())),
                max_t_n: rows.iter().map(|m| m.t_n()).fold(0.0, f64::max),
            }
        })
        .collect();
    let (det, tot) = robustness
        .iter()
        .filter(|r| r.group != ADV_TRAIN_GROUP)
        .fold((0, 0), |(d, t), r| (d + r.detected, t + r.models - r.flagged));
    let mut adv_training: Vec<ContrastRow> = attacked
        .iter()
        .filter(|m| m.group.as_deref() == Some(ADV_TRAIN_GROUP))
        .map(|m| ContrastRow {
            model_id: m.model_id.clone(),
            epoch: m.epoch.unwrap_or(0),
            t_n: m.t_n(),
            verdict: m.verification.verdict,
            baseline_match: m.baseline_match,
            baseline_verdict: m.baseline_verdict,
        })
        .collect();
    adv_training.sort_by_key(|r| r.epoch);

    let summary = LevelSummary {
        t_f,
        target_t_c: target.t_c,
        fingerprint_t_n: target.t_n(),
        fingerprint_last_exit: target.fingerprint_last_exit,
        target_benign_auc: target.verification.benign_auc,
        mean_independent_benign_auc: mean(independents.iter().map(|m| m.verification.benign_auc)),
        independent_rate: verified_rate(&indep_verdicts)?,
        stolen_rate: if stolen_verdicts.is_empty() {
            None
        } else {
            Some(verified_rate(&stolen_verdicts)?)
        },
        roc_auc: if stolen_scores.is_empty() {
            None
        } else {
            Some(roc_auc(&stolen_scores, &indep_scores)?)
        },
        robustness_rate: rate(det, tot),
        flagged: attacked.iter().filter(|m| m.flagged).count(),
    };
    let ablation = ablation_or_empty(&indep_scores, &stolen_scores, &cfg.ablation_t_f)?;
    Ok(LevelReport {
        rad,
        summary,
        target,
        independents,
        attacked,
        robustness,
        adv_training,
        ablation,
        benign_groups,
    })
}

/// The ablation table, empty when the stolen cohort is.
fn ablation_or_empty(independent: &[f64], stolen: &[f64], candidates: &[f64]) -> Result<Vec<AblationRow>> {
    if stolen.is_empty() {
        return Ok(Vec::new());
    }
    Ok(ablation_rows(independent, stolen, candidates)?)
}

/// Recomputes the ablation table of every level for other candidates.
pub fn threshold_ablation(report: &ExperimentReport, candidates: &[f64]) -> Result<Vec<(f64, Vec<AblationRow>)>> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate T_f values".into()));
    }
    report
        .levels
        .iter()
        .map(|l| {
            let indep: Vec<f64> = l.independents.iter().map(ModelResult::t_n).collect();
            let stolen: Vec<f64> = l.stolen().map(ModelResult::t_n).collect();
            Ok((l.rad, ablation_or_empty(&indep, &stolen, candidates)?))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("T_f\tindependent_rate\tstolen_rate\n");
    for r in rows {
        writeln!(s, "{:.4}\t{:.4}\t{:.4}", r.t_f, r.independent_rate, r.stolen_rate).unwrap();
    }
    s
}

/// Human-readable summary of every table.
pub fn render_summary(report: &ExperimentReport) -> String {
    let p = &report.provenance;
    let mut s = String::new();
    writeln!(s, "experiment: {}", p.name).unwrap();
    writeln!(s, "config_hash: {}", p.config_hash).unwrap();
    writeln!(s, "master_seed: {}", p.master_seed).unwrap();
    writeln!(s, "version: {}", p.crate_version).unwrap();
    writeln!(s, "backend: {}", p.backend).unwrap();
    let accs: Vec<String> = report.target_exit_accuracies.iter().map(|a| format!("{a:.4}")).collect();
    writeln!(s, "target exit accuracies: {}", accs.join(" ")).unwrap();
    let f = &report.fingerprint;
    writeln!(s, "fingerprints: N={} mean_l2={:.4} exit_histogram={:?}", f.n, f.mean_l2, &f.exit_histogram[1..]).unwrap();
    for l in &report.levels {
        let m = &l.summary;
        writeln!(s, "\n== RAD {:.2} ==", l.rad).unwrap();
        writeln!(s, "target T_c: {}", opt(m.target_t_c)).unwrap();
        writeln!(s, "T_f: {:.4}", m.t_f).unwrap();
        writeln!(s, "fingerprint T_N: {:.4}  last-exit fraction: {:.4}", m.fingerprint_t_n, m.fingerprint_last_exit)
            .unwrap();
        writeln!(
            s,
            "benign EEC AUC: target {:.4}  independents (mean) {:.4}",
            m.target_benign_auc, m.mean_independent_benign_auc
        )
        .unwrap();
        writeln!(s, "IP verified rate: independent {:.4}  stolen {}", m.independent_rate, opt(m.stolen_rate)).unwrap();
        writeln!(s, "ROC AUC: {}", opt(m.roc_auc)).unwrap();
        writeln!(s, "robustness rate (excluding PGD-AT): {}  flagged: {}", opt(m.robustness_rate), m.flagged).unwrap();
        writeln!(s, "\nmodel\tcohort\tT_c\taccuracy\tRAD\tflagged\tT_N\tverdict\tbaseline_match").unwrap();
        for r in std::iter::once(&l.target).chain(&l.independents).chain(&l.attacked) {
            writeln!(
                s,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{:.4}\t{}\t{:.4}",
                r.model_id,
                serde_json::to_value(r.cohort).unwrap().as_str().unwrap_or(""),
                opt(r.t_c),
                r.accuracy,
                r.rad_vs_target,
                r.flagged,
                r.t_n(),
                r.verification.verdict,
                r.baseline_match
            )
            .unwrap();
        }
        writeln!(s, "\ngroup\tmodels\tflagged\tdetected\trate\tmean_T_N\tmax_T_N").unwrap();
        for r in &l.robustness {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
                r.group,
                r.models,
                r.flagged,
                r.detected,
                opt(r.rate),
                r.mean_t_n,
                r.max_t_n
            )
            .unwrap();
        }
        if !l.adv_training.is_empty() {
            writeln!(s, "\nepoch\tT_N\tverdict\tbaseline_match\tbaseline_verdict").unwrap();
            for r in &l.adv_training {
                writeln!(s, "{}\t{:.4}\t{}\t{:.4}\t{}", r.epoch, r.t_n, r.verdict, r.baseline_match, r.baseline_verdict)
                    .unwrap();
            }
        }
        writeln!(s, "\nthreshold ablation").unwrap();
        s.push_str(&render_ablation(&l.ablation));
    }
    s
}

fn two_columns(header: &str, rows: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut s = format!("# {header}\n");
    for (a, b) in rows {
        writeln!(s, "{a:.6} {b:.6}").unwrap();
    }
    s
}

/// Writes plain two-column data files for each figure analog into `dir`.
pub fn emit_plots_data(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    for l in &report.levels {
        let tag = rad_tag(l.rad);
        put(
            format!("eec-{tag}-fingerprint.dat"),
            two_columns("normalized_time fraction", l.target.verification.curve.points.iter().copied()),
        )?;
        for (g, c) in l.benign_groups.iter().enumerate() {
            put(
                format!("eec-{tag}-benign-{g:02}.dat"),
                two_columns("normalized_time fraction", c.points.iter().copied()),
            )?;
        }
        put(
            format!("uniqueness-{tag}-independent.dat"),
            two_columns("index T_N", l.independents.iter().enumerate().map(|(i, m)| (i as f64, m.t_n()))),
        )?;
        put(
            format!("uniqueness-{tag}-stolen.dat"),
            two_columns("index T_N", l.stolen().enumerate().map(|(i, m)| (i as f64, m.t_n()))),
        )?;
        for r in &l.robustness {
            let rows = l
                .attacked
                .iter()
                .filter(|m| m.group.as_deref() == Some(r.group.as_str()))
                .enumerate()
                .map(|(i, m)| (m.epoch.map_or(i as f64, |e| e as f64), m.t_n()));
            put(format!("robustness-{tag}-{}.dat", r.group), two_columns("index_or_epoch T_N", rows))?;
        }
        put(
            format!("adv-train-{tag}-t_n.dat"),
            two_columns("epoch T_N", l.adv_training.iter().map(|r| (r.epoch as f64, r.t_n))),
        )?;
        put(
            format!("adv-train-{tag}-baseline.dat"),
            two_columns("epoch match_rate", l.adv_training.iter().map(|r| (r.epoch as f64, r.baseline_match))),
        )?;
        put(
            format!("ablation-{tag}-independent.dat"),
            two_columns("T_f rate", l.ablation.iter().map(|r| (r.t_f, r.independent_rate))),
        )?;
        put(
            format!("ablation-{tag}-stolen.dat"),
            two_columns("T_f rate", l.ablation.iter().map(|r| (r.t_f, r.stolen_rate))),
        )?;
    }
    Ok(written)
}

/// Writes `report.json`, `summary.txt`, per-model reports and plot data.
pub fn write_report(layout: &Layout, report: &ExperimentReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::format("report", e))?;
    write_atomic(&layout.report_json(), &json)?;
    write_atomic(&layout.summary(), render_summary(report).as_bytes())?;
    for l in &report.levels {
        let dir = layout.level_dir(l.rad);
        for r in std::iter::once(&l.target).chain(&l.independents).chain(&l.attacked) {
            format::save_verification(&dir, &r.verification)?;
        }
        write_atomic(&dir.join("ablation.txt"), render_ablation(&l.ablation).as_bytes())?;
    }
    emit_plots_data(report, &layout.plots())?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    serde_json::from_slice(&format::read(path)?).map_err(|e| Error::format("report", e))
}

/// Recomputes a level's summary from its per-model results.
pub fn recompute(level: &LevelReport, cfg: &ExperimentConfig) -> Result<LevelReport> {
    aggregate(
        level.rad,
        cfg,
        level.target.clone(),
        level.independents.clone(),
        level.attacked.clone(),
        level.benign_groups.clone(),
    )
}
