//! Exit-suppressing fingerprint samples and a targeted adversarial-example
//! baseline.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_with_grad, kl_to_uniform_with_grad};
use crate::model::{ExitPolicy, MultiExitModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::real::Real;
use crate::rng;
use crate::tape::Want;
use crate::tensor::{l2_distance, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintConfig {
    pub c: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub n: usize,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            steps: 1000,
            learning_rate: 0.01,
            n: 100,
        }
    }
}

impl FingerprintConfig {
    /// Defaults, with 2000 steps for models of 20 or more exits.
    pub fn for_model<T: Real>(model: &MultiExitModel<T>) -> Self {
        let steps = if model.n_exits() >= 20 { 2000 } else { 1000 };
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig("c must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("N must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSample {
    pub x: Vec<f32>,
    pub x_prime: Vec<f32>,
    pub l2_distance: f64,
    pub final_loss: f64,
    pub exit_index_on_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSet {
    pub samples: Vec<FingerprintSample>,
    pub target_model_id: String,
    pub config: FingerprintConfig,
    pub seed: u64,
    /// Seconds since the Unix epoch, when the caller records one.
    pub created: Option<u64>,
}

impl FingerprintSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self, shape: crate::tensor::Shape) -> Vec<Tensor<f32>> {
        self.samples
            .iter()
            .map(|s| Tensor::from_vec(shape, s.x_prime.clone()))
            .collect()
    }

    pub fn mean_l2(&self) -> f64 {
        self.samples.iter().map(|s| s.l2_distance).sum::<f64>() / self.samples.len().max(1) as f64
    }

    /// Count of samples per 1-based exit index (slot 0 unused).
    pub fn exit_histogram(&self, n_exits: usize) -> Vec<usize> {
        let mut h = vec![0; n_exits + 1];
        for s in &self.samples {
            if s.exit_index_on_target <= n_exits {
                h[s.exit_index_on_target] += 1;
            }
        }
        h
    }

    pub fn fraction_at_last_exit(&self, n_exits: usize) -> f64 {
        self.exit_histogram(n_exits)[n_exits] as f64 / self.samples.len().max(1) as f64
    }
}

/// The uniform distribution over `n_y` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformReference {
    pub u: Vec<f64>,
}

impl UniformReference {
    pub fn new(n_y: usize) -> Self {
        Self {
            u: vec![1.0 / n_y as f64; n_y],
        }
    }
}

/// Per-exit weights of the fingerprint loss: +1 on internal exits, -1 on
/// the final one.
fn exit_sign<T: Real>(i: usize, n: usize) -> T {
    if i + 1 == n {
        -T::one()
    } else {
        T::one()
    }
}

/// `sum_{i<n} KL(f_i(x), u) - KL(f_n(x), u)`.
pub fn fingerprint_loss<T: Real>(model: &MultiExitModel<T>, x: &Tensor<T>) -> Result<T> {
    let logits = model.exit_logits(x)?;
    let n = logits.len();
    Ok(logits
        .iter()
        .enumerate()
        .map(|(i, z)| exit_sign::<T>(i, n) * kl_to_uniform_with_grad(z).0)
        .sum())
}

/// Value and input gradient of [`fingerprint_loss`].
pub fn fingerprint_loss_grad<T: Real>(model: &MultiExitModel<T>, x: &Tensor<T>) -> Result<(T, Vec<T>)> {
    model.backbone.check_input(x)?;
    let tape = model.forward_tape(&x.data);
    let n = tape.exit_logits.len();
    let mut value = T::zero();
    let mut exit_grads = Vec::with_capacity(n);
    for (i, z) in tape.exit_logits.iter().enumerate() {
        let s = exit_sign::<T>(i, n);
        let (v, mut g) = kl_to_uniform_with_grad(z);
        value += s * v;
        g.iter_mut().for_each(|gv| *gv *= s);
        exit_grads.push(Some(g));
    }
    let dx = model
        .backward_tape(&tape, &exit_grads, Want::INPUT, None)
        .expect("input gradient requested");
    Ok((value, dx))
}

/// Minimizes `||x - x'||_2 + c * L_f(x')` with Adam from `x' = x`, clamping
/// to [0, 1] after every step and returning the best iterate. `policy` only
/// labels the result with the exit it takes on the target.
pub fn craft_fingerprint(
    model: &MultiExitModel,
    x: &Tensor<f32>,
    cfg: &FingerprintConfig,
    policy: &ExitPolicy,
) -> Result<FingerprintSample> {
    cfg.validate()?;
    model.backbone.check_input(x)?;
    let c = cfg.c as f32;
    let objective = |xp: &[f32]| -> Result<(f32, Vec<f32>)> {
        let (lf, mut g) = fingerprint_loss_grad(model, &Tensor::from_vec(x.shape, xp.to_vec()))?;
        let dist = l2_distance(&x.data, xp) as f32;
        g.iter_mut().for_each(|v| *v *= c);
        if dist > 0.0 {
            for ((gv, &a), &b) in g.iter_mut().zip(xp).zip(&x.data) {
                *gv += (a - b) / dist;
            }
        }
        Ok((dist + c * lf, g))
    };
    let mut xp = x.data.clone();
    let mut best = (f32::INFINITY, xp.clone());
    let mut opt = Optimizer::<f32>::new(OptimizerConfig::adam(cfg.learning_rate));
    for step in 0..=cfg.steps {
        let (loss, grad) = objective(&xp)?;
        if !loss.is_finite() {
            return Err(Error::CraftingFailed { sample: 0, step });
        }
        if loss < best.0 {
            best = (loss, xp.clone());
        }
        if step == cfg.steps {
            break;
        }
        opt.step(&mut [xp.as_mut_slice()], &[grad.as_slice()], cfg.learning_rate);
        xp.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let (final_loss, x_prime) = best;
    let trace = model.early_exit_infer(&Tensor::from_vec(x.shape, x_prime.clone()), policy)?;
    Ok(FingerprintSample {
        l2_distance: l2_distance(&x.data, &x_prime),
        x: x.data.clone(),
        x_prime,
        final_loss: final_loss as f64,
        exit_index_on_target: trace.exit_index,
    })
}

/// Indices of `n` samples the model's final exit classifies correctly,
/// chosen deterministically by `seed`.
pub fn select_seeds(model: &MultiExitModel, benign: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut correct = Vec::new();
    for i in 0..benign.len() {
        if model.backbone.predict(&benign.tensor(i))? == benign.labels[i] {
            correct.push(i);
        }
    }
    if correct.len() < n {
        return Err(Error::InvalidConfig(alloc::format!(
            "need {n} correctly classified seeds, only {} available",
            correct.len()
        )));
    }
    correct.shuffle(&mut rng::stream(seed, "fingerprint-seeds", 0));
    correct.truncate(n);
    Ok(correct)
}

pub fn generate_fingerprint_set(
    model: &MultiExitModel,
    benign: &Dataset,
    cfg: &FingerprintConfig,
    policy: &ExitPolicy,
    seed: u64,
    target_model_id: &str,
) -> Result<FingerprintSet> {
    cfg.validate()?;
    let picks = select_seeds(model, benign, cfg.n, seed)?;
    let samples = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            craft_fingerprint(model, &benign.tensor(i), cfg, policy).map_err(|e| match e {
                Error::CraftingFailed { step, .. } => Error::CraftingFailed { sample: k, step },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FingerprintSet {
        samples,
        target_model_id: target_model_id.into(),
        config: cfg.clone(),
        seed,
        created: None,
    })
}

/// Targeted final-exit attack used as the label-matching baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Optional L-infinity bound around the seed.
    pub epsilon: Option<f64>,
    /// Stop once the target class reaches this final-exit confidence.
    pub stop_confidence: Option<f64>,
    pub n: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.01,
            epsilon: None,
            stop_confidence: Some(0.93),
            n: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSample {
    pub x_adv: Vec<f32>,
    pub target_label: usize,
}

fn craft_targeted(model: &MultiExitModel, x: &[f32], target: usize, cfg: &BaselineConfig) -> Result<Vec<f32>> {
    let mut xa = x.to_vec();
    let mut opt = Optimizer::<f32>::new(OptimizerConfig::adam(cfg.learning_rate));
    let eps = cfg.epsilon.map(|e| e as f32);
    for step in 0..cfg.steps {
        let tape = crate::tape::forward(&model.backbone, &[], &xa);
        let z = &tape.exit_logits[0];
        let (loss, g) = cross_entropy_with_grad(z, target);
        if !loss.is_finite() {
            return Err(Error::CraftingFailed { sample: 0, step });
        }
        if let Some(stop) = cfg.stop_confidence {
            if (-loss).exp_libm() as f64 >= stop {
                break;
            }
        }
        let dx = crate::tape::backward(&model.backbone, &[], &tape, &[Some(g)], Want::INPUT, None)
            .expect("input gradient requested");
        opt.step(&mut [xa.as_mut_slice()], &[dx.as_slice()], cfg.learning_rate);
        for (a, &x0) in xa.iter_mut().zip(x) {
            if let Some(e) = eps {
                *a = a.clamp(x0 - e, x0 + e);
            }
            *a = a.clamp(0.0, 1.0);
        }
    }
    Ok(xa)
}

/// Crafts targeted examples toward a random wrong label for the first
/// `cfg.n` of `benign`'s samples chosen by `seed`.
pub fn baseline_ae_fingerprint(
    model: &MultiExitModel,
    benign: &Dataset,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<Vec<AdversarialSample>> {
    if model.n_y() < 2 {
        return Err(Error::InvalidConfig("targeted attack needs at least 2 classes".into()));
    }
    let picks = select_seeds(model, benign, cfg.n, rng::derive_seed(seed, "baseline", 0))?;
    let mut r = rng::stream(seed, "baseline-targets", 0);
    picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let label = benign.labels[i];
            let target = (label + r.gen_range(1..model.n_y())) % model.n_y();
            craft_targeted(model, benign.image(i), target, cfg)
                .map(|x_adv| AdversarialSample {
                    x_adv,
                    target_label: target,
                })
                .map_err(|e| match e {
                    Error::CraftingFailed { step, .. } => Error::CraftingFailed { sample: k, step },
                    other => other,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::small_convnet;
    use crate::model::BackboneModel;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> MultiExitModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = small_convnet(Shape::new(3, 8, 8), 4, [4, 4, 4, 4, 4, 4]);
        let mut b = BackboneModel::new(&arch.layers, arch.input_shape, 4).unwrap();
        b.init(&mut rng);
        MultiExitModel::build(b, &arch.attach_indices, &mut rng).unwrap()
    }

    fn input(seed: u64, shape: Shape) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen()).collect())
    }

    #[test]
    fn uniform_heads_give_zero_loss() {
        let m = tiny(1);
        let z = MultiExitModel::with_zero_heads(m.backbone.clone(), &m.attach_indices()).unwrap();
        let mut zb = z.clone();
        for l in &mut zb.backbone.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        let x = input(2, m.input_shape());
        assert!(fingerprint_loss(&zb, &x).unwrap().abs() < 1e-7);
    }

    #[test]
    fn zero_steps_returns_seed() {
        let m = tiny(3);
        let x = input(4, m.input_shape());
        let cfg = FingerprintConfig {
            steps: 0,
            ..Default::default()
        };
        let s = craft_fingerprint(&m, &x, &cfg, &ExitPolicy::never_early()).unwrap();
        assert_eq!(s.x_prime, x.data);
        assert_eq!(s.l2_distance, 0.0);
        assert_eq!(s.exit_index_on_target, m.n_exits());
    }

    #[test]
    fn crafting_never_worsens_objective() {
        let m = tiny(5);
        let x = input(6, m.input_shape());
        let cfg = FingerprintConfig {
            steps: 30,
            ..Default::default()
        };
        let s = craft_fingerprint(&m, &x, &cfg, &ExitPolicy::confidence(0.5).unwrap()).unwrap();
        let initial = cfg.c * fingerprint_loss(&m, &x).unwrap() as f64;
        assert!(s.final_loss <= initial + 1e-6);
        assert!(s.x_prime.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((s.l2_distance - l2_distance(&s.x, &s.x_prime)).abs() < 1e-6);
    }

    #[test]
    fn uniform_reference_sums_to_one() {
        let u = UniformReference::new(10);
        assert!((u.u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(u.u.iter().all(|&v| v == u.u[0]));
    }

    #[test]
    fn step_budget_follows_exit_count() {
        let m = tiny(7);
        assert_eq!(FingerprintConfig::for_model(&m).steps, 1000);
        assert!(FingerprintConfig {
            c: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
