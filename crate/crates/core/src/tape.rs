//! Reverse-mode differentiation through a backbone and its exit heads.

use alloc::vec::Vec;

use crate::layer::{Layer, LayerCache, LayerGrads};
use crate::model::{BackboneModel, InternalClassifier, MultiExitModel};
use crate::real::Real;

/// Forward activations needed to back-propagate one sample.
pub struct Tape<T> {
    layer_caches: Vec<LayerCache<T>>,
    head_caches: Vec<(Option<LayerCache<T>>, LayerCache<T>)>,
    /// Logits of every exit, internal heads first, final layer last.
    pub exit_logits: Vec<Vec<T>>,
}

/// Parameter gradients laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub backbone: Vec<LayerGrads<T>>,
    pub heads: Vec<LayerGrads<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(backbone: &BackboneModel<T>, ics: &[InternalClassifier<T>]) -> Self {
        Self {
            backbone: backbone.layers.iter().map(LayerGrads::zeros_like).collect(),
            heads: ics.iter().map(|ic| LayerGrads::zeros_like(&ic.fc)).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.backbone.iter_mut().for_each(LayerGrads::clear);
        self.heads.iter_mut().for_each(LayerGrads::clear);
    }

    pub fn scale(&mut self, s: T) {
        for g in self.backbone.iter_mut().chain(self.heads.iter_mut()) {
            g.weight.iter_mut().for_each(|v| *v *= s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Gradient tensors of the backbone, in [`backbone_params_mut`] order.
    pub fn backbone_tensors(&self) -> Vec<&[T]> {
        tensors(&self.backbone)
    }

    pub fn head_tensors(&self) -> Vec<&[T]> {
        tensors(&self.heads)
    }
}

fn tensors<T>(grads: &[LayerGrads<T>]) -> Vec<&[T]> {
    grads
        .iter()
        .filter(|g| !g.weight.is_empty())
        .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
        .collect()
}

/// Mutable parameter tensors of the backbone (weight, bias per layer).
pub fn backbone_params_mut<T>(backbone: &mut BackboneModel<T>) -> Vec<&mut [T]> {
    params_mut(backbone.layers.iter_mut())
}

pub fn head_params_mut<T>(ics: &mut [InternalClassifier<T>]) -> Vec<&mut [T]> {
    params_mut(ics.iter_mut().map(|ic| &mut ic.fc))
}

fn params_mut<'a, T: 'a>(layers: impl Iterator<Item = &'a mut Layer<T>>) -> Vec<&'a mut [T]> {
    layers
        .filter(|l| !l.weight.is_empty())
        .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
        .collect()
}

/// What the backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub input: bool,
    pub backbone: bool,
    pub heads: bool,
}

impl Want {
    pub const INPUT: Want = Want {
        input: true,
        backbone: false,
        heads: false,
    };
    pub const BACKBONE: Want = Want {
        input: false,
        backbone: true,
        heads: false,
    };
    pub const HEADS: Want = Want {
        input: false,
        backbone: false,
        heads: true,
    };
}

pub fn forward<T: Real>(
    backbone: &BackboneModel<T>,
    ics: &[InternalClassifier<T>],
    x: &[T],
) -> Tape<T> {
    let mut layer_caches = Vec::with_capacity(backbone.layers.len());
    let mut head_caches = Vec::with_capacity(ics.len());
    let mut exit_logits = Vec::with_capacity(ics.len() + 1);
    let mut h = x.to_vec();
    let mut next = 0;
    for (li, layer) in backbone.layers.iter().enumerate() {
        let (y, cache) = layer.forward_cached(&h);
        layer_caches.push(cache);
        h = y;
        while next < ics.len() && ics[next].attach_index == li {
            let ic = &ics[next];
            let (pooled, pool_cache) = match &ic.pool {
                Some(p) => {
                    let (v, c) = p.forward_cached(&h);
                    (v, Some(c))
                }
                None => (h.clone(), None),
            };
            let (logits, fc_cache) = ic.fc.forward_cached(&pooled);
            head_caches.push((pool_cache, fc_cache));
            exit_logits.push(logits);
            next += 1;
        }
    }
    exit_logits.push(h);
    Tape {
        layer_caches,
        head_caches,
        exit_logits,
    }
}

/// Back-propagates per-exit logit gradients (`None` for exits that do not
/// contribute). Returns the input gradient when `want.input`.
pub fn backward<T: Real>(
    backbone: &BackboneModel<T>,
    ics: &[InternalClassifier<T>],
    tape: &Tape<T>,
    exit_grads: &[Option<Vec<T>>],
    want: Want,
    mut grads: Option<&mut Grads<T>>,
) -> Option<Vec<T>> {
    debug_assert_eq!(exit_grads.len(), ics.len() + 1);
    let through_backbone = want.input || want.backbone;
    let mut dh: Option<Vec<T>> = if through_backbone {
        exit_grads[ics.len()].clone()
    } else {
        None
    };
    let mut head = ics.len();
    for li in (0..backbone.layers.len()).rev() {
        while head > 0 && ics[head - 1].attach_index == li {
            head -= 1;
            let Some(g) = &exit_grads[head] else { continue };
            let ic = &ics[head];
            let (pool_cache, fc_cache) = &tape.head_caches[head];
            let head_grads = if want.heads {
                grads.as_deref_mut().map(|gr| &mut gr.heads[head])
            } else {
                None
            };
            let dpooled = ic.fc.backward(fc_cache, g, through_backbone, head_grads);
            if !through_backbone {
                continue;
            }
            let dpooled = dpooled.expect("requested input gradient");
            let dfeat = match (&ic.pool, pool_cache) {
                (Some(p), Some(c)) => p.backward(c, &dpooled, true, None).expect("requested"),
                _ => dpooled,
            };
            match &mut dh {
                Some(acc) => acc.iter_mut().zip(&dfeat).for_each(|(a, &d)| *a += d),
                None => dh = Some(dfeat),
            }
        }
        if !through_backbone {
            continue;
        }
        let Some(dy) = dh.take() else { continue };
        let need_dx = li > 0 || want.input;
        let layer_grads = if want.backbone {
            grads.as_deref_mut().map(|gr| &mut gr.backbone[li])
        } else {
            None
        };
        dh = backbone.layers[li].backward(&tape.layer_caches[li], &dy, need_dx, layer_grads);
    }
    if want.input {
        dh
    } else {
        None
    }
}

impl<T: Real> MultiExitModel<T> {
    pub fn forward_tape(&self, x: &[T]) -> Tape<T> {
        forward(&self.backbone, &self.ics, x)
    }

    pub fn backward_tape(
        &self,
        tape: &Tape<T>,
        exit_grads: &[Option<Vec<T>>],
        want: Want,
        grads: Option<&mut Grads<T>>,
    ) -> Option<Vec<T>> {
        backward(&self.backbone, &self.ics, tape, exit_grads, want, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::small_convnet;
    use crate::tensor::{Shape, Tensor};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(m: &MultiExitModel<f64>, x: &[f64], w: &[Vec<f64>]) -> f64 {
        let t = Tensor::from_vec(m.input_shape(), x.to_vec());
        m.exit_logits(&t)
            .unwrap()
            .iter()
            .zip(w)
            .map(|(z, wv)| z.iter().zip(wv).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn input_gradient_through_all_exits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = small_convnet(Shape::new(2, 8, 8), 3, [2, 3, 3, 3, 4, 4]);
        let mut b = BackboneModel::<f64>::new(&arch.layers, arch.input_shape, 3).unwrap();
        b.init(&mut rng);
        let m = MultiExitModel::build(b, &arch.attach_indices, &mut rng).unwrap();
        let x: Vec<f64> = (0..arch.input_shape.numel()).map(|_| rng.gen()).collect();
        let w: Vec<Vec<f64>> = (0..m.n_exits()).map(|_| (0..3).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let tape = m.forward_tape(&x);
        let eg: Vec<Option<Vec<f64>>> = w.iter().cloned().map(Some).collect();
        let dx = m.backward_tape(&tape, &eg, Want::INPUT, None).unwrap();
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let n = (objective(&m, &xp, &w) - objective(&m, &xm, &w)) / 2e-6;
            assert!((dx[i] - n).abs() < 1e-7, "{i}: {} vs {n}", dx[i]);
        }
    }

    #[test]
    fn head_only_backward_leaves_backbone_grads_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = small_convnet(Shape::new(1, 8, 8), 2, [2, 2, 2, 2, 2, 2]);
        let mut b = BackboneModel::<f64>::new(&arch.layers, arch.input_shape, 2).unwrap();
        b.init(&mut rng);
        let m = MultiExitModel::build(b, &arch.attach_indices, &mut rng).unwrap();
        let x = vec![0.5; 64];
        let tape = m.forward_tape(&x);
        let eg: Vec<Option<Vec<f64>>> = (0..m.n_exits()).map(|_| Some(vec![1.0, -1.0])).collect();
        let mut g = Grads::zeros_like(&m.backbone, &m.ics);
        assert!(m.backward_tape(&tape, &eg, Want::HEADS, Some(&mut g)).is_none());
        assert!(g.backbone.iter().all(|l| l.weight.iter().all(|&v| v == 0.0)));
        assert!(g.heads.iter().any(|l| l.bias.iter().any(|&v| v != 0.0)));
    }
}
