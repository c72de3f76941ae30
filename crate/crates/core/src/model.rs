//! Multi-exit models: backbone, internal classifiers, early-exit inference.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerSpec};
use crate::loss::{argmax, softmax};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// A plain feed-forward classifier whose last layer emits `n_y` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel<T = f32> {
    pub layers: Vec<Layer<T>>,
    pub input_shape: Shape,
    pub n_y: usize,
}

impl<T: Real> BackboneModel<T> {
    /// Validates the layer chain; parameters start at zero.
    pub fn new(specs: &[LayerSpec], input_shape: Shape, n_y: usize) -> Result<Self> {
        if n_y == 0 {
            return Err(Error::InvalidArchitecture("n_y must be positive".into()));
        }
        if specs.len() < 2 {
            return Err(Error::InvalidArchitecture("backbone needs at least two layers".into()));
        }
        let mut shape = input_shape;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = Layer::new(*spec, shape)?;
            shape = layer.output_shape;
            layers.push(layer);
        }
        if shape != Shape::flat(n_y) {
            return Err(Error::InvalidArchitecture(format!(
                "final layer outputs {shape}, expected {n_y} logits"
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            n_y,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn last_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape,
                actual: x.shape,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = x.data.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn cast<U: Real>(&self) -> BackboneModel<U> {
        BackboneModel {
            layers: self.layers.iter().map(Layer::cast).collect(),
            input_shape: self.input_shape,
            n_y: self.n_y,
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for layer in &self.layers {
            h.write_params(&layer.weight);
            h.write_params(&layer.bias);
        }
        h.finish()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Classification head reading the output of backbone layer `attach_index`:
/// global average pooling (for spatial features) then one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalClassifier<T = f32> {
    pub attach_index: usize,
    pub pool: Option<Layer<T>>,
    pub fc: Layer<T>,
}

impl<T: Real> InternalClassifier<T> {
    /// Head with zero weights, which outputs exactly uniform confidences.
    pub fn zeroed(attach_index: usize, feature_shape: Shape, n_y: usize) -> Result<Self> {
        let pool = if feature_shape.is_spatial() {
            Some(Layer::new(LayerSpec::GlobalAvgPool, feature_shape)?)
        } else {
            None
        };
        let pooled = pool.as_ref().map_or(feature_shape, |p| p.output_shape);
        let fc = Layer::new(
            LayerSpec::Linear {
                in_features: pooled.numel(),
                out_features: n_y,
            },
            pooled,
        )?;
        Ok(Self {
            attach_index,
            pool,
            fc,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.fc.init(rng);
    }

    /// Pooled features fed to the linear layer.
    pub fn pooled(&self, features: &[T]) -> Vec<T> {
        match &self.pool {
            Some(p) => p.forward(features),
            None => features.to_vec(),
        }
    }

    pub fn forward(&self, features: &[T]) -> Vec<T> {
        self.fc.forward(&self.pooled(features))
    }

    pub fn mac_cost(&self) -> u64 {
        self.pool.as_ref().map_or(0, Layer::mac_cost) + self.fc.mac_cost()
    }

    pub fn cast<U: Real>(&self) -> InternalClassifier<U> {
        InternalClassifier {
            attach_index: self.attach_index,
            pool: self.pool.as_ref().map(Layer::cast),
            fc: self.fc.cast(),
        }
    }
}

/// Softmax output of one exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    pub probs: Vec<f64>,
}

impl ConfidenceVector {
    pub fn from_logits<T: Real>(logits: &[T]) -> Self {
        let z: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
        Self { probs: softmax(&z) }
    }

    pub fn max(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Confidence threshold `T_c`, or early exit disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Confidence(f64),
    NeverEarly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub threshold: Threshold,
    /// Relative accuracy drop this threshold was calibrated for.
    pub rad_target: Option<f64>,
}

impl ExitPolicy {
    pub fn confidence(t_c: f64) -> Result<Self> {
        if !(t_c > 0.0 && t_c <= 1.0) {
            return Err(Error::InvalidThreshold(format!("T_c must be in (0, 1], got {t_c}")));
        }
        Ok(Self {
            threshold: Threshold::Confidence(t_c),
            rad_target: None,
        })
    }

    pub const fn never_early() -> Self {
        Self {
            threshold: Threshold::NeverEarly,
            rad_target: None,
        }
    }

    pub fn with_rad_target(mut self, rad: f64) -> Self {
        self.rad_target = Some(rad);
        self
    }

    /// Whether an internal exit with confidence peak `max_conf` fires.
    #[inline]
    pub fn accepts(&self, max_conf: f64) -> bool {
        match self.threshold {
            Threshold::Confidence(t) => max_conf >= t,
            Threshold::NeverEarly => false,
        }
    }

    pub fn t_c(&self) -> Option<f64> {
        match self.threshold {
            Threshold::Confidence(t) => Some(t),
            Threshold::NeverEarly => None,
        }
    }
}

/// Outcome of one early-exit inference. `exit_index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitTrace {
    pub exit_index: usize,
    pub predicted_label: usize,
    pub confidences: Vec<ConfidenceVector>,
    pub cost: u64,
}

/// Backbone plus internal classifiers sorted by attach point. The final
/// backbone layer is exit `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitModel<T = f32> {
    pub backbone: BackboneModel<T>,
    pub ics: Vec<InternalClassifier<T>>,
    /// One entry per backbone layer followed by one per IC head.
    pub layer_costs: Vec<u64>,
}

impl<T: Real> MultiExitModel<T> {
    /// Attaches freshly initialized heads after the given backbone layers.
    pub fn build<R: Rng + ?Sized>(
        backbone: BackboneModel<T>,
        attach_indices: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::with_zero_heads(backbone, attach_indices)?;
        for ic in &mut model.ics {
            ic.init(rng);
        }
        Ok(model)
    }

    /// Like [`MultiExitModel::build`] but every head has zero weights.
    pub fn with_zero_heads(backbone: BackboneModel<T>, attach_indices: &[usize]) -> Result<Self> {
        validate_attach(&backbone, attach_indices)?;
        let ics = attach_indices
            .iter()
            .map(|&a| {
                InternalClassifier::zeroed(a, backbone.layers[a].output_shape, backbone.n_y)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            backbone,
            ics,
            layer_costs: Vec::new(),
        };
        model.reset_costs();
        Ok(model)
    }

    /// Recomputes `layer_costs` as multiply-accumulate counts.
    pub fn reset_costs(&mut self) {
        self.layer_costs = self
            .backbone
            .layers
            .iter()
            .map(Layer::mac_cost)
            .chain(self.ics.iter().map(InternalClassifier::mac_cost))
            .collect();
    }

    /// Every layer and head costs `cost`.
    pub fn with_uniform_costs(mut self, cost: u64) -> Self {
        self.layer_costs = core::iter::repeat_n(cost, self.backbone.layers.len() + self.ics.len())
            .collect();
        self
    }

    pub fn n_exits(&self) -> usize {
        self.ics.len() + 1
    }

    pub fn attach_indices(&self) -> Vec<usize> {
        self.ics.iter().map(|ic| ic.attach_index).collect()
    }

    pub fn input_shape(&self) -> Shape {
        self.backbone.input_shape
    }

    pub fn n_y(&self) -> usize {
        self.backbone.n_y
    }

    fn head_cost(&self, i: usize) -> u64 {
        self.layer_costs[self.backbone.layers.len() + i]
    }

    /// Cumulative cost of stopping at each exit (index 0 is exit 1).
    pub fn exit_costs(&self) -> Vec<u64> {
        let nl = self.backbone.layers.len();
        let mut out = Vec::with_capacity(self.n_exits());
        let mut heads = 0u64;
        for (i, ic) in self.ics.iter().enumerate() {
            heads += self.head_cost(i);
            let body: u64 = self.layer_costs[..=ic.attach_index].iter().sum();
            out.push(body + heads);
        }
        out.push(self.layer_costs[..nl].iter().sum::<u64>() + heads);
        out
    }

    pub fn total_cost(&self) -> u64 {
        self.layer_costs.iter().sum()
    }

    /// Raw logits of every exit, in exit order.
    pub fn exit_logits(&self, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        self.backbone.check_input(x)?;
        let mut out = Vec::with_capacity(self.n_exits());
        let mut h = x.data.clone();
        let mut next = 0;
        for (li, layer) in self.backbone.layers.iter().enumerate() {
            h = layer.forward(&h);
            while next < self.ics.len() && self.ics[next].attach_index == li {
                out.push(self.ics[next].forward(&h));
                next += 1;
            }
        }
        out.push(h);
        Ok(out)
    }

    /// Confidence vectors `f_1(x) .. f_n(x)`.
    pub fn forward_all_exits(&self, x: &Tensor<T>) -> Result<Vec<ConfidenceVector>> {
        Ok(self
            .exit_logits(x)?
            .iter()
            .map(|z| ConfidenceVector::from_logits(z))
            .collect())
    }

    /// Runs inference, stopping at the first exit `i` with
    /// `max f_i(x) >= T_c`. The final exit always accepts.
    pub fn early_exit_infer(&self, x: &Tensor<T>, policy: &ExitPolicy) -> Result<ExitTrace> {
        self.backbone.check_input(x)?;
        let mut confidences = Vec::new();
        let mut cost = 0u64;
        let mut h = x.data.clone();
        let mut next = 0;
        for (li, layer) in self.backbone.layers.iter().enumerate() {
            h = layer.forward(&h);
            cost += self.layer_costs[li];
            while next < self.ics.len() && self.ics[next].attach_index == li {
                let conf = ConfidenceVector::from_logits(&self.ics[next].forward(&h));
                cost += self.head_cost(next);
                let fire = policy.accepts(conf.max());
                let label = conf.argmax();
                confidences.push(conf);
                next += 1;
                if fire {
                    return Ok(ExitTrace {
                        exit_index: next,
                        predicted_label: label,
                        confidences,
                        cost,
                    });
                }
            }
        }
        let conf = ConfidenceVector::from_logits(&h);
        let label = conf.argmax();
        confidences.push(conf);
        Ok(ExitTrace {
            exit_index: self.n_exits(),
            predicted_label: label,
            confidences,
            cost,
        })
    }

    pub fn cast<U: Real>(&self) -> MultiExitModel<U> {
        MultiExitModel {
            backbone: self.backbone.cast(),
            ics: self.ics.iter().map(InternalClassifier::cast).collect(),
            layer_costs: self.layer_costs.clone(),
        }
    }

    pub fn backbone_checksum(&self) -> u64 {
        self.backbone.checksum()
    }

    pub fn heads_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for ic in &self.ics {
            h.write_u64(ic.attach_index as u64);
            h.write_params(&ic.fc.weight);
            h.write_params(&ic.fc.bias);
        }
        h.finish()
    }

    /// Checksum over every parameter and the exit layout.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.backbone_checksum());
        h.write_u64(self.heads_checksum());
        h.finish()
    }
}

fn validate_attach<T: Real>(backbone: &BackboneModel<T>, attach: &[usize]) -> Result<()> {
    if attach.is_empty() {
        return Err(Error::InvalidAttach(
            "at least one internal classifier is required (n >= 2)".into(),
        ));
    }
    let last = backbone.last_index();
    for (i, &a) in attach.iter().enumerate() {
        if a == 0 || a >= last {
            return Err(Error::InvalidAttach(format!(
                "attach index {a} outside (0, {last})"
            )));
        }
        if i > 0 && attach[i - 1] >= a {
            return Err(Error::InvalidAttach(format!(
                "attach indices must be strictly increasing: {:?}",
                attach
            )));
        }
    }
    Ok(())
}

/// Builds a multi-exit model from a backbone (the shallow-deep transform).
pub fn build_multiexit<T: Real, R: Rng + ?Sized>(
    backbone: BackboneModel<T>,
    attach_indices: &[usize],
    rng: &mut R,
) -> Result<MultiExitModel<T>> {
    MultiExitModel::build(backbone, attach_indices, rng)
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_params<T: Real>(&mut self, params: &[T]) {
        self.write_u64(params.len() as u64);
        for p in params {
            self.write_u64(p.f64().to_bits());
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::small_convnet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_backbone() -> BackboneModel<f64> {
        // six layers: conv relu conv relu gap linear
        let specs = [
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_features: 2, out_features: 3 },
        ];
        let mut b = BackboneModel::new(&specs, Shape::new(1, 4, 4), 3).unwrap();
        b.init(&mut ChaCha8Rng::seed_from_u64(1));
        b
    }

    #[test]
    fn build_counts_exits() {
        let m = MultiExitModel::with_zero_heads(tiny_backbone(), &[2, 4]).unwrap();
        assert_eq!(m.n_exits(), 3);
        assert_eq!(m.layer_costs.len(), 6 + 2);
    }

    #[test]
    fn build_rejects_bad_attach() {
        let b = tiny_backbone();
        assert!(matches!(
            MultiExitModel::with_zero_heads(b.clone(), &[]),
            Err(Error::InvalidAttach(_))
        ));
        assert!(MultiExitModel::with_zero_heads(b.clone(), &[4, 2]).is_err());
        assert!(MultiExitModel::with_zero_heads(b.clone(), &[2, 2]).is_err());
        assert!(MultiExitModel::with_zero_heads(b.clone(), &[0]).is_err());
        assert!(MultiExitModel::with_zero_heads(b, &[5]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let m = MultiExitModel::with_zero_heads(tiny_backbone(), &[1, 3]).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 4, 4), (0..16).map(|i| i as f64 / 16.0).collect());
        let f = m.forward_all_exits(&x).unwrap();
        for conf in &f[..2] {
            assert!(conf.probs.iter().all(|&p| p == conf.probs[0]));
            assert!((conf.probs[0] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = MultiExitModel::with_zero_heads(tiny_backbone(), &[1]).unwrap();
        let x = Tensor::<f64>::zeros(Shape::new(1, 5, 4));
        assert!(matches!(m.forward_all_exits(&x), Err(Error::ShapeMismatch { .. })));
        assert!(m.early_exit_infer(&x, &ExitPolicy::never_early()).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(ExitPolicy::confidence(0.0).is_err());
        assert!(ExitPolicy::confidence(1.5).is_err());
        assert!(ExitPolicy::confidence(f64::NAN).is_err());
        assert!(ExitPolicy::confidence(1.0).is_ok());
    }

    #[test]
    fn exit_costs_are_monotone_and_total() {
        let arch = small_convnet(Shape::new(3, 32, 32), 10, [8, 12, 16, 16, 32, 32]);
        let b = BackboneModel::<f32>::new(&arch.layers, arch.input_shape, 10).unwrap();
        let m = MultiExitModel::with_zero_heads(b, &arch.attach_indices).unwrap();
        let costs = m.exit_costs();
        assert_eq!(costs.len(), 6);
        assert!(costs.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*costs.last().unwrap(), m.total_cost());
    }

    #[test]
    fn uniform_costs_override() {
        let m = MultiExitModel::with_zero_heads(tiny_backbone(), &[1, 3])
            .unwrap()
            .with_uniform_costs(1);
        assert_eq!(m.exit_costs(), alloc::vec![3, 6, 8]);
    }
}
