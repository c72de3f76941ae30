//! Model modifications an adversary may apply to a stolen multi-exit model.
//!
//! Every operation works on a private copy; the input model is never
//! modified.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{accuracy, calibrate_threshold, relative_accuracy_drop};
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::loss::cross_entropy_with_grad;
use crate::model::{BackboneModel, ExitPolicy, InternalClassifier, MultiExitModel, Threshold};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::rng;
use crate::tape::{self, Want};
use crate::train::{fit_backbone_with_hook, train_ics, TrainConfig};

/// L-infinity projected gradient ascent on the final-exit cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
}

impl Default for PgdConfig {
    /// 10 iterations at epsilon 8/256, step epsilon/4, random start.
    fn default() -> Self {
        let epsilon = 8.0 / 256.0;
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            iterations: 10,
            random_start: true,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("PGD epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }
}

/// Untargeted PGD example for `x` with true `label`, clamped to [0, 1].
pub fn pgd_perturb<R: Rng + ?Sized>(
    backbone: &BackboneModel,
    x: &[f32],
    label: usize,
    cfg: &PgdConfig,
    rng: &mut R,
) -> Vec<f32> {
    let eps = cfg.epsilon as f32;
    let step = cfg.step_size as f32;
    let project = |v: f32, x0: f32| v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    let mut adv: Vec<f32> = if cfg.random_start {
        x.iter()
            .map(|&v| project(v + eps * (2.0 * rng.gen::<f32>() - 1.0), v))
            .collect()
    } else {
        x.to_vec()
    };
    for _ in 0..cfg.iterations {
        let t = tape::forward(backbone, &[], &adv);
        let (_, g) = cross_entropy_with_grad(&t.exit_logits[0], label);
        let dx = tape::backward(backbone, &[], &t, &[Some(g)], Want::INPUT, None)
            .expect("input gradient requested");
        for ((a, &d), &x0) in adv.iter_mut().zip(&dx).zip(x) {
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = project(*a + step * s, x0);
        }
    }
    adv
}

/// How a suspect model chooses its exit threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitRule {
    Fixed(Threshold),
    /// Recalibrate on the suspect at this relative accuracy drop.
    Rad(f64),
}

fn default_ic_epochs() -> usize {
    3
}

fn default_finetune_lr() -> f64 {
    0.001
}

fn default_snapshot_every() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Attack {
    /// Fresh heads at the same attach points, trained with the IC budget.
    IcRetrain {
        #[serde(default)]
        epochs: Option<usize>,
    },
    /// Removes exits (1-based indices of internal exits) and adds heads
    /// after the given backbone layers.
    IcEdit {
        #[serde(default)]
        add: Vec<usize>,
        #[serde(default)]
        remove: Vec<usize>,
        #[serde(default = "default_ic_epochs")]
        ic_epochs: usize,
    },
    ExitCriteria {
        rule: ExitRule,
    },
    Prune {
        rate: f64,
    },
    Quantize {
        bits: u32,
    },
    Finetune {
        epochs: usize,
        #[serde(default = "default_snapshot_every")]
        snapshot_every: usize,
        #[serde(default = "default_finetune_lr")]
        learning_rate: f64,
        #[serde(default = "default_ic_epochs")]
        ic_epochs: usize,
        #[serde(default)]
        train_subset: Option<usize>,
    },
    AdvTrain {
        epochs: usize,
        #[serde(default = "default_snapshot_every")]
        snapshot_every: usize,
        #[serde(default)]
        pgd: PgdConfig,
        #[serde(default = "default_finetune_lr")]
        learning_rate: f64,
        #[serde(default = "default_ic_epochs")]
        ic_epochs: usize,
        #[serde(default)]
        train_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub attack: Attack,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(attack: Attack, seed: u64) -> Self {
        Self { attack, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.attack {
            Attack::Prune { rate } if !(*rate > 0.0 && *rate < 1.0) => {
                Err(Error::InvalidConfig(format!("pruning rate {rate} outside (0, 1)")))
            }
            Attack::Quantize { bits } if !(2..=16).contains(bits) => {
                Err(Error::InvalidConfig(format!("bit width {bits} outside [2, 16]")))
            }
            Attack::AdvTrain { pgd, epochs, .. } => {
                if pgd.epsilon <= 0.0 || pgd.epsilon >= 1.0 {
                    return Err(Error::InvalidConfig("PGD epsilon must be in (0, 1)".into()));
                }
                check_epochs(*epochs)
            }
            Attack::Finetune { epochs, .. } => check_epochs(*epochs),
            Attack::ExitCriteria {
                rule: ExitRule::Fixed(Threshold::Confidence(t)),
            } => ExitPolicy::confidence(*t).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Whether the attack leaves backbone parameters bit-identical.
    pub fn preserves_backbone(&self) -> bool {
        matches!(
            self.attack,
            Attack::IcRetrain { .. } | Attack::IcEdit { .. } | Attack::ExitCriteria { .. }
        )
    }

    /// Short identifier embedding kind, parameters and seed.
    pub fn label(&self) -> String {
        let body = match &self.attack {
            Attack::IcRetrain { .. } => String::from("ic-retrain"),
            Attack::IcEdit { add, remove, .. } => format!(
                "ic-edit-add{}-rm{}",
                join(add),
                join(remove)
            ),
            Attack::ExitCriteria { rule } => match rule {
                ExitRule::Fixed(Threshold::Confidence(t)) => format!("exit-tc{t:.3}"),
                ExitRule::Fixed(Threshold::NeverEarly) => String::from("exit-never"),
                ExitRule::Rad(r) => format!("exit-rad{r:.2}"),
            },
            Attack::Prune { rate } => format!("prune-r{rate:.2}"),
            Attack::Quantize { bits } => format!("quant-b{bits}"),
            Attack::Finetune { epochs, .. } => format!("finetune-e{epochs}"),
            Attack::AdvTrain { epochs, pgd, .. } => {
                format!("advtrain-e{epochs}-eps{:.4}", pgd.epsilon)
            }
        };
        format!("{body}-s{}", self.seed)
    }
}

fn check_epochs(epochs: usize) -> Result<()> {
    if epochs == 0 {
        Err(Error::InvalidConfig("epochs must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        return String::from("none");
    }
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    parts.join("_")
}

/// Replaces every head with a fresh one and trains them on `data`.
pub fn retrain_ics_attack(model: &MultiExitModel, data: &DatasetSplits, cfg: &TrainConfig) -> Result<MultiExitModel> {
    let fresh = MultiExitModel::build(
        model.backbone.clone(),
        &model.attach_indices(),
        &mut rng::stream(cfg.seed, "ic-reinit", 0),
    )?;
    let mut out = train_ics(&fresh, data, cfg, &mut ())?;
    out.layer_costs = fresh.layer_costs;
    Ok(out)
}

/// Removes internal exits (1-based) and adds heads after backbone layers.
/// Only the new heads are trained.
pub fn edit_ics(
    model: &MultiExitModel,
    add_positions: &[usize],
    remove_exits: &[usize],
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<MultiExitModel> {
    if add_positions.is_empty() && remove_exits.is_empty() {
        return Ok(model.clone());
    }
    let n_ics = model.ics.len();
    let remove: BTreeSet<usize> = remove_exits.iter().copied().collect();
    if remove.len() != remove_exits.len() {
        return Err(Error::InvalidAttach("duplicate exit in removal list".into()));
    }
    if let Some(&bad) = remove.iter().find(|&&e| e == 0 || e > n_ics) {
        return Err(Error::InvalidAttach(format!(
            "exit {bad} is not an internal exit (1..={n_ics})"
        )));
    }
    let kept: Vec<InternalClassifier> = model
        .ics
        .iter()
        .enumerate()
        .filter(|(i, _)| !remove.contains(&(i + 1)))
        .map(|(_, ic)| ic.clone())
        .collect();
    let mut positions: BTreeSet<usize> = kept.iter().map(|ic| ic.attach_index).collect();
    for &p in add_positions {
        if !positions.insert(p) {
            return Err(Error::InvalidAttach(format!("an exit already reads layer {p}")));
        }
    }
    if positions.is_empty() {
        return Err(Error::InvalidAttach("edit would leave no internal exit (n < 2)".into()));
    }
    let mut added = if add_positions.is_empty() {
        Vec::new()
    } else {
        let mut sorted = add_positions.to_vec();
        sorted.sort_unstable();
        let fresh = MultiExitModel::build(
            model.backbone.clone(),
            &sorted,
            &mut rng::stream(cfg.seed, "ic-add", 0),
        )?;
        train_ics(&fresh, data, cfg, &mut ())?.ics
    };
    let mut ics = kept;
    ics.append(&mut added);
    ics.sort_by_key(|ic| ic.attach_index);
    let mut out = MultiExitModel {
        backbone: model.backbone.clone(),
        ics,
        layer_costs: Vec::new(),
    };
    out.reset_costs();
    Ok(out)
}

/// Policy change only; also reports the relative accuracy drop it induces
/// on `val`.
pub fn set_exit_criteria(
    model: &MultiExitModel,
    threshold: Threshold,
    val: &crate::data::Dataset,
) -> Result<(ExitPolicy, f64)> {
    let policy = match threshold {
        Threshold::Confidence(t) => ExitPolicy::confidence(t)?,
        Threshold::NeverEarly => ExitPolicy::never_early(),
    };
    let full = accuracy(model, val, &ExitPolicy::never_early())?;
    let acc = accuracy(model, val, &policy)?;
    Ok((policy, relative_accuracy_drop(full, acc)))
}

/// Global unstructured magnitude pruning of backbone weight tensors
/// (biases excluded). Exactly `floor(rate * #weights)` entries are zeroed.
pub fn prune(model: &MultiExitModel, rate: f64) -> Result<MultiExitModel> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(format!("pruning rate {rate} outside (0, 1)")));
    }
    let mut out = model.clone();
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    for (li, layer) in out.backbone.layers.iter().enumerate() {
        for (wi, w) in layer.weight.iter().enumerate() {
            entries.push((w.abs(), li, wi));
        }
    }
    let k = num_traits::Float::floor(rate * entries.len() as f64) as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, li, wi) in &entries[..k] {
        out.backbone.layers[li].weight[wi] = 0.0;
    }
    Ok(out)
}

/// Per-tensor affine quantize-dequantize of backbone weights and biases.
pub fn quantize(model: &MultiExitModel, bits: u32) -> Result<MultiExitModel> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidConfig(format!("bit width {bits} outside [2, 16]")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let mut out = model.clone();
    for layer in &mut out.backbone.layers {
        quantize_tensor(&mut layer.weight, levels);
        quantize_tensor(&mut layer.bias, levels);
    }
    Ok(out)
}

fn quantize_tensor(t: &mut [f32], levels: f64) {
    let Some(lo) = t.iter().copied().reduce(f32::min) else { return };
    let hi = t.iter().copied().fold(lo, f32::max);
    if hi <= lo {
        return;
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    for v in t.iter_mut() {
        let q = num_traits::Float::round((*v as f64 - lo) / range * levels);
        // q == levels maps back to exactly `hi`, so a second pass sees the
        // same range and reproduces every value
        *v = (lo + range * q / levels) as f32;
    }
}


fn limited(data: &DatasetSplits, subset: Option<usize>) -> DatasetSplits {
    match subset {
        Some(n) if n < data.train.len() => DatasetSplits {
            name: data.name.clone(),
            train: data.train.head(n),
            val: data.val.clone(),
            test: data.test.clone(),
        },
        _ => data.clone(),
    }
}

/// A modified backbone captured after `epoch` epochs, with retrained heads.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub model: MultiExitModel,
}

fn backbone_snapshots(
    model: &MultiExitModel,
    data: &DatasetSplits,
    train_cfg: &TrainConfig,
    snapshot_every: usize,
    ic_cfg: &TrainConfig,
    adversary: Option<&PgdConfig>,
) -> Result<Vec<Snapshot>> {
    let every = snapshot_every.max(1);
    let mut backbone = model.backbone.clone();
    let mut snaps = Vec::new();
    let mut hook = |done: usize, b: &BackboneModel| -> Result<()> {
        if !done.is_multiple_of(every) && done != train_cfg.epochs {
            return Ok(());
        }
        let ic = ic_cfg.clone().with_seed(rng::derive_seed(ic_cfg.seed, "snapshot", done as u64));
        let current = MultiExitModel {
            backbone: b.clone(),
            ics: model.ics.clone(),
            layer_costs: model.layer_costs.clone(),
        };
        snaps.push(Snapshot {
            epoch: done,
            model: retrain_ics_attack(&current, data, &ic)?,
        });
        Ok(())
    };
    fit_backbone_with_hook(&mut backbone, &data.train, &data.val, train_cfg, adversary, &mut (), &mut hook)?;
    Ok(snaps)
}

fn finetune_cfg(epochs: usize, learning_rate: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(learning_rate),
        schedule: LrSchedule::constant(),
        seed,
        augmentation: crate::data::Augmentation {
            horizontal_flip: true,
            random_crop: 2,
        },
    }
}

/// Finetunes the backbone with Adam at a low rate, re-attaching and
/// training fresh heads at every snapshot.
pub fn finetune_snapshots(
    model: &MultiExitModel,
    data: &DatasetSplits,
    epochs: usize,
    snapshot_every: usize,
    learning_rate: f64,
    ic_cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Snapshot>> {
    check_epochs(epochs)?;
    let cfg = finetune_cfg(epochs, learning_rate, seed);
    backbone_snapshots(model, data, &cfg, snapshot_every, ic_cfg, None)
}

/// [`finetune_snapshots`] keeping only the final model.
pub fn finetune(model: &MultiExitModel, data: &DatasetSplits, epochs: usize, seed: u64) -> Result<MultiExitModel> {
    let ic = ic_budget(&TrainConfig::ic_default(seed), 3, seed);
    let mut snaps = finetune_snapshots(model, data, epochs, epochs, 0.001, &ic, seed)?;
    Ok(snaps.pop().expect("at least one epoch").model)
}

/// PGD adversarial training of the backbone followed by head retraining at
/// every snapshot.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    model: &MultiExitModel,
    data: &DatasetSplits,
    epochs: usize,
    snapshot_every: usize,
    pgd: &PgdConfig,
    learning_rate: f64,
    ic_cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Snapshot>> {
    check_epochs(epochs)?;
    pgd.validate()?;
    let cfg = finetune_cfg(epochs, learning_rate, seed);
    backbone_snapshots(model, data, &cfg, snapshot_every, ic_cfg, Some(pgd))
}

/// `base` with a shortened epoch budget, seeded for one attack.
pub fn ic_budget(base: &TrainConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: epochs.max(1),
        seed: rng::derive_seed(seed, "post-attack-ic", 0),
        ..base.clone()
    }
}

/// A modified model produced by an attack pipeline.
#[derive(Debug, Clone)]
pub struct Suspect {
    pub label: String,
    pub model: MultiExitModel,
    pub exit_rule: Option<ExitRule>,
    pub epoch: Option<usize>,
}

/// Applies `steps` in order. Snapshotting attacks fan out, and later steps
/// apply to every snapshot.
pub fn apply_pipeline(
    model: &MultiExitModel,
    steps: &[AttackConfig],
    data: &DatasetSplits,
    ic_cfg: &TrainConfig,
) -> Result<Vec<Suspect>> {
    let mut current = alloc::vec![Suspect {
        label: String::new(),
        model: model.clone(),
        exit_rule: None,
        epoch: None,
    }];
    for step in steps {
        step.validate()?;
        let mut next = Vec::new();
        for s in current {
            let label = if s.label.is_empty() {
                step.label()
            } else {
                format!("{}+{}", s.label, step.label())
            };
            let one = |model: MultiExitModel| Suspect {
                label: label.clone(),
                model,
                exit_rule: s.exit_rule,
                epoch: s.epoch,
            };
            match &step.attack {
                Attack::IcRetrain { epochs } => {
                    let cfg = TrainConfig {
                        epochs: epochs.unwrap_or(ic_cfg.epochs),
                        ..ic_cfg.clone().with_seed(step.seed)
                    };
                    next.push(one(retrain_ics_attack(&s.model, data, &cfg)?));
                }
                Attack::IcEdit { add, remove, ic_epochs } => {
                    let cfg = ic_budget(ic_cfg, *ic_epochs, step.seed);
                    next.push(one(edit_ics(&s.model, add, remove, data, &cfg)?));
                }
                Attack::ExitCriteria { rule } => next.push(Suspect {
                    exit_rule: Some(*rule),
                    ..one(s.model.clone())
                }),
                Attack::Prune { rate } => next.push(one(prune(&s.model, *rate)?)),
                Attack::Quantize { bits } => next.push(one(quantize(&s.model, *bits)?)),
                Attack::Finetune {
                    epochs,
                    snapshot_every,
                    learning_rate,
                    ic_epochs,
                    train_subset,
                } => {
                    let d = limited(data, *train_subset);
                    for snap in finetune_snapshots(
                        &s.model,
                        &d,
                        *epochs,
                        *snapshot_every,
                        *learning_rate,
                        &ic_budget(ic_cfg, *ic_epochs, step.seed),
                        step.seed,
                    )? {
                        next.push(Suspect {
                            label: format!("{label}@{}", snap.epoch),
                            model: snap.model,
                            exit_rule: s.exit_rule,
                            epoch: Some(snap.epoch),
                        });
                    }
                }
                Attack::AdvTrain {
                    epochs,
                    snapshot_every,
                    pgd,
                    learning_rate,
                    ic_epochs,
                    train_subset,
                } => {
                    let d = limited(data, *train_subset);
                    for snap in adversarial_train(
                        &s.model,
                        &d,
                        *epochs,
                        *snapshot_every,
                        pgd,
                        *learning_rate,
                        &ic_budget(ic_cfg, *ic_epochs, step.seed),
                        step.seed,
                    )? {
                        next.push(Suspect {
                            label: format!("{label}@{}", snap.epoch),
                            model: snap.model,
                            exit_rule: s.exit_rule,
                            epoch: Some(snap.epoch),
                        });
                    }
                }
            }
        }
        current = next;
    }
    Ok(current)
}

/// Resolves a suspect's exit policy: a fixed threshold, or recalibration on
/// the suspect itself at the given relative accuracy drop.
pub fn resolve_policy(
    model: &MultiExitModel,
    rule: ExitRule,
    val: &crate::data::Dataset,
) -> Result<ExitPolicy> {
    match rule {
        ExitRule::Fixed(Threshold::Confidence(t)) => ExitPolicy::confidence(t),
        ExitRule::Fixed(Threshold::NeverEarly) => Ok(ExitPolicy::never_early()),
        ExitRule::Rad(r) => calibrate_threshold(model, val, r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::small_convnet;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> MultiExitModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = small_convnet(Shape::new(3, 8, 8), 4, [4, 4, 4, 4, 4, 4]);
        let mut b = BackboneModel::new(&arch.layers, arch.input_shape, 4).unwrap();
        b.init(&mut rng);
        MultiExitModel::build(b, &arch.attach_indices, &mut rng).unwrap()
    }

    #[test]
    fn prune_zeroes_exact_fraction_and_is_idempotent() {
        let m = model();
        let total: usize = m.backbone.layers.iter().map(|l| l.weight.len()).sum();
        for rate in [0.1, 0.2, 0.3, 0.4] {
            let p = prune(&m, rate).unwrap();
            let zeros: usize = p
                .backbone
                .layers
                .iter()
                .map(|l| l.weight.iter().filter(|&&w| w == 0.0).count())
                .sum();
            assert!((zeros as f64 - rate * total as f64).abs() <= 1.0);
            let twice = prune(&p, rate).unwrap();
            assert_eq!(twice, p);
            assert_eq!(p.heads_checksum(), m.heads_checksum());
        }
        assert!(prune(&m, 0.0).is_err());
        assert!(prune(&m, 1.0).is_err());
    }

    #[test]
    fn quantize_bound_and_idempotence() {
        let m = model();
        let q = quantize(&m, 8).unwrap();
        for (a, b) in m.backbone.layers.iter().zip(&q.backbone.layers) {
            if a.weight.is_empty() {
                continue;
            }
            let lo = a.weight.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = a.weight.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let bound = (hi - lo) / 255.0 / 2.0;
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert!(((*x as f64) - (*y as f64)).abs() <= bound * (1.0 + 1e-6) + 1e-7);
            }
        }
        assert_eq!(quantize(&q, 8).unwrap(), q);
        assert!(quantize(&m, 1).is_err());
    }

    #[test]
    fn pgd_stays_in_ball() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..m.input_shape().numel()).map(|_| rng.gen()).collect();
        let cfg = PgdConfig::default();
        let adv = pgd_perturb(&m.backbone, &x, 1, &cfg, &mut rng);
        for (a, b) in adv.iter().zip(&x) {
            assert!((a - b).abs() as f64 <= 8.0 / 256.0 + 1e-7);
            assert!((0.0..=1.0).contains(a));
        }
        let zero = PgdConfig {
            epsilon: 0.0,
            step_size: 0.0,
            ..cfg
        };
        assert_eq!(pgd_perturb(&m.backbone, &x, 1, &zero, &mut rng), x);
    }

    #[test]
    fn attack_config_validation() {
        assert!(AttackConfig::new(Attack::Prune { rate: 1.2 }, 0).validate().is_err());
        assert!(AttackConfig::new(Attack::Quantize { bits: 1 }, 0).validate().is_err());
        assert!(AttackConfig::new(
            Attack::ExitCriteria {
                rule: ExitRule::Fixed(Threshold::Confidence(1.5))
            },
            0
        )
        .validate()
        .is_err());
        assert!(AttackConfig::new(
            Attack::Finetune {
                epochs: 0,
                snapshot_every: 2,
                learning_rate: 0.001,
                ic_epochs: 3,
                train_subset: None
            },
            0
        )
        .validate()
        .is_err());
    }

    #[test]
    fn labels_embed_parameters() {
        let c = AttackConfig::new(Attack::Prune { rate: 0.2 }, 7);
        assert_eq!(c.label(), "prune-r0.20-s7");
    }
}
