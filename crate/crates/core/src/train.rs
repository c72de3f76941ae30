//! Backbone and internal-classifier training.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::attacks::{pgd_perturb, PgdConfig};
use crate::data::{Augmentation, Dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::layer::LayerGrads;
use crate::loss::{argmax, cross_entropy_with_grad};
use crate::model::{BackboneModel, MultiExitModel};
use crate::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::rng;
use crate::tape::{self, Grads, Want};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl TrainConfig {
    /// Adam at 0.001 for 12 epochs, decayed by 0.1 at epoch 8, with flips
    /// and 2-pixel crops.
    pub fn backbone_default(seed: u64) -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(0.001),
            schedule: LrSchedule {
                milestones: alloc::vec![8],
                gamma: 0.1,
            },
            seed,
            augmentation: Augmentation {
                horizontal_flip: true,
                random_crop: 2,
            },
        }
    }

    /// Adam at 0.001 for 200 epochs, decayed by 0.1 at epoch 120. The heads
    /// are linear on frozen features, so this runs to near convergence.
    pub fn ic_default(seed: u64) -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(0.001),
            schedule: LrSchedule {
                milestones: alloc::vec![120],
                gamma: 0.1,
            },
            seed,
            augmentation: Augmentation::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Receives a record after every epoch.
pub trait EpochObserver {
    fn epoch(&mut self, log: &EpochLog);
}

impl EpochObserver for () {
    fn epoch(&mut self, _: &EpochLog) {}
}

impl<F: FnMut(&EpochLog)> EpochObserver for F {
    fn epoch(&mut self, log: &EpochLog) {
        self(log)
    }
}

pub fn backbone_accuracy(backbone: &BackboneModel, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let mut h = data.image(i).to_vec();
            for layer in &backbone.layers {
                h = layer.forward(&h);
            }
            argmax(&h) == data.labels[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

/// Trains a freshly initialized backbone for `arch`.
pub fn train_backbone(
    arch: &ArchSpec,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<(BackboneModel, TrainReport)> {
    cfg.validate()?;
    if arch.input_shape != data.train.input_shape || arch.n_y != data.train.n_y {
        return Err(Error::InvalidArchitecture(format!(
            "architecture expects {} / {} classes, data has {} / {}",
            arch.input_shape, arch.n_y, data.train.input_shape, data.train.n_y
        )));
    }
    let mut backbone = BackboneModel::new(&arch.layers, arch.input_shape, arch.n_y)?;
    backbone.init(&mut rng::stream(cfg.seed, "backbone-init", 0));
    let report = fit_backbone(&mut backbone, &data.train, &data.val, cfg, None, observer)?;
    Ok((backbone, report))
}

/// Minibatch cross-entropy training of the final classifier, optionally on
/// PGD-perturbed inputs.
pub fn fit_backbone(
    backbone: &mut BackboneModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    adversary: Option<&PgdConfig>,
    observer: &mut dyn EpochObserver,
) -> Result<TrainReport> {
    fit_backbone_with_hook(backbone, train, val, cfg, adversary, observer, &mut |_, _| Ok(()))
}

/// [`fit_backbone`] calling `hook(epochs_done, backbone)` after every epoch.
pub fn fit_backbone_with_hook(
    backbone: &mut BackboneModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    adversary: Option<&PgdConfig>,
    observer: &mut dyn EpochObserver,
    hook: &mut dyn FnMut(usize, &BackboneModel) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut grads = Grads::zeros_like(backbone, &[]);
    let shape = train.input_shape;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate() * cfg.schedule.factor(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut aug_rng = rng::stream(cfg.seed, "augment", epoch as u64);
        let mut total = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let label = train.labels[i];
                let mut x = cfg.augmentation.apply(train.image(i), shape, &mut aug_rng);
                if let Some(pgd) = adversary {
                    x = pgd_perturb(backbone, &x, label, pgd, &mut aug_rng);
                }
                let t = tape::forward(backbone, &[], &x);
                let logits = &t.exit_logits[0];
                if argmax(logits) == label {
                    correct += 1;
                }
                let (loss, g) = cross_entropy_with_grad(logits, label);
                total += loss as f64;
                tape::backward(backbone, &[], &t, &[Some(g)], Want::BACKBONE, Some(&mut grads));
            }
            grads.scale(1.0 / batch.len() as f32);
            let g = grads.backbone_tensors();
            opt.step(&mut tape::backbone_params_mut(backbone), &g, lr);
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite training loss".into(),
            });
        }
        let val_accuracy = backbone_accuracy(backbone, val);
        let log = EpochLog {
            epoch,
            train_loss,
            val_accuracy,
        };
        observer.epoch(&log);
        report.epochs.push(log);
        report.train_accuracy = correct as f64 / train.len() as f64;
        report.val_accuracy = val_accuracy;
        hook(epoch + 1, backbone)?;
    }
    Ok(report)
}

/// Pooled head inputs of every sample, per head.
fn pooled_features(model: &MultiExitModel, data: &Dataset) -> Vec<Vec<Vec<f32>>> {
    let mut out: Vec<Vec<Vec<f32>>> = model.ics.iter().map(|_| Vec::with_capacity(data.len())).collect();
    for i in 0..data.len() {
        let mut h = data.image(i).to_vec();
        let mut next = 0;
        for (li, layer) in model.backbone.layers.iter().enumerate() {
            if next == model.ics.len() {
                break;
            }
            h = layer.forward(&h);
            while next < model.ics.len() && model.ics[next].attach_index == li {
                out[next].push(model.ics[next].pooled(&h));
                next += 1;
            }
        }
    }
    out
}

/// Per-exit accuracy (every exit evaluated, no early stopping).
pub fn exit_accuracies(model: &MultiExitModel, data: &Dataset) -> Vec<f64> {
    let mut correct = alloc::vec![0usize; model.n_exits()];
    for i in 0..data.len() {
        let logits = model
            .exit_logits(&Tensor::from_vec(data.input_shape, data.image(i).to_vec()))
            .expect("dataset shape matches model");
        for (c, z) in correct.iter_mut().zip(&logits) {
            if argmax(z) == data.labels[i] {
                *c += 1;
            }
        }
    }
    correct
        .into_iter()
        .map(|c| c as f64 / data.len().max(1) as f64)
        .collect()
}

/// Trains the internal classifiers with the backbone frozen.
///
/// The backbone is run once per sample; heads are then fit on the cached
/// pooled features, so augmentation does not apply here.
pub fn train_ics(
    model: &MultiExitModel,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<MultiExitModel> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = model.clone();
    let feats = pooled_features(&model, &data.train);
    let val_feats = pooled_features(&model, &data.val);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut grads: Vec<LayerGrads<f32>> = model.ics.iter().map(|ic| LayerGrads::zeros_like(&ic.fc)).collect();
    let n = data.train.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate() * cfg.schedule.factor(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "ic-shuffle", epoch as u64));
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(LayerGrads::clear);
            for &i in batch {
                let label = data.train.labels[i];
                for (h, ic) in model.ics.iter().enumerate() {
                    let (z, cache) = ic.fc.forward_cached(&feats[h][i]);
                    let (loss, g) = cross_entropy_with_grad(&z, label);
                    total += loss as f64;
                    ic.fc.backward(&cache, &g, false, Some(&mut grads[h]));
                }
            }
            let s = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.weight.iter_mut().for_each(|v| *v *= s);
                g.bias.iter_mut().for_each(|v| *v *= s);
            }
            let gt: Vec<&[f32]> = grads
                .iter()
                .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
                .collect();
            opt.step(&mut tape::head_params_mut(&mut model.ics), &gt, lr);
        }
        let train_loss = total / (n * model.ics.len().max(1)) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite IC training loss".into(),
            });
        }
        let mean_ic_acc = head_accuracy(&model, &val_feats, &data.val.labels);
        observer.epoch(&EpochLog {
            epoch,
            train_loss,
            val_accuracy: mean_ic_acc,
        });
    }
    Ok(model)
}

/// Mean accuracy of the heads on cached pooled features.
fn head_accuracy(model: &MultiExitModel, feats: &[Vec<Vec<f32>>], labels: &[usize]) -> f64 {
    if labels.is_empty() || model.ics.is_empty() {
        return 0.0;
    }
    let correct: usize = model
        .ics
        .iter()
        .zip(feats)
        .map(|(ic, f)| {
            f.iter()
                .zip(labels)
                .filter(|(x, &l)| argmax(&ic.fc.forward(x)) == l)
                .count()
        })
        .sum();
    correct as f64 / (labels.len() * model.ics.len()) as f64
}

/// Transforms a backbone into a multi-exit model with trained heads.
pub fn to_trained_multiexit(
    backbone: BackboneModel,
    attach: &[usize],
    data: &DatasetSplits,
    ic_cfg: &TrainConfig,
) -> Result<MultiExitModel> {
    let model = MultiExitModel::build(backbone, attach, &mut rng::stream(ic_cfg.seed, "ic-init", 0))?;
    train_ics(&model, data, ic_cfg, &mut ())
}

/// Trains one multi-exit model per seed with otherwise identical settings.
pub fn train_independent_population(
    arch: &ArchSpec,
    data: &DatasetSplits,
    base_cfg: &TrainConfig,
    ic_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<MultiExitModel>> {
    let unique: BTreeSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(Error::InvalidConfig("population seeds must be pairwise distinct".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let (backbone, _) = train_backbone(arch, data, &base_cfg.clone().with_seed(seed), &mut ())?;
            let ic = ic_cfg.clone().with_seed(rng::derive_seed(seed, "ic", 0));
            to_trained_multiexit(backbone, &arch.attach_indices, data, &ic)
        })
        .collect()
}
