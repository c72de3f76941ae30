//! Differentiable layers over single samples.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Shape;

/// Architecture descriptor of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// 2x2 max pooling with stride 2 (floor).
    MaxPool2,
    GlobalAvgPool,
    /// Fully connected; flattens its input.
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.c != in_channels {
                    return Err(Error::InvalidArchitecture(format!(
                        "conv expects {in_channels} input channels, got {}",
                        input.c
                    )));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::InvalidArchitecture("degenerate conv".into()));
                }
                let h = input.h + 2 * padding;
                let w = input.w + 2 * padding;
                if h < kernel || w < kernel {
                    return Err(Error::InvalidArchitecture(format!(
                        "conv kernel {kernel} larger than padded input {input}"
                    )));
                }
                Ok(Shape::new(
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ))
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::MaxPool2 => {
                if input.h < 2 || input.w < 2 {
                    return Err(Error::InvalidArchitecture(format!(
                        "max pool needs at least 2x2 input, got {input}"
                    )));
                }
                Ok(Shape::new(input.c, input.h / 2, input.w / 2))
            }
            LayerSpec::GlobalAvgPool => Ok(Shape::flat(input.c)),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.numel() != in_features {
                    return Err(Error::InvalidArchitecture(format!(
                        "linear expects {in_features} inputs, got {}",
                        input.numel()
                    )));
                }
                Ok(Shape::flat(out_features))
            }
        }
    }

    /// Multiply-accumulate count for one forward pass.
    pub fn mac_cost(&self, input: Shape) -> u64 {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let out = self.output_shape(input).map(|s| s.h * s.w).unwrap_or(0);
                (out * out_channels * in_channels * kernel * kernel) as u64
            }
            LayerSpec::Relu | LayerSpec::MaxPool2 => 0,
            LayerSpec::GlobalAvgPool => input.numel() as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
        }
    }

    /// `(weight_len, bias_len)`.
    pub fn param_lens(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel, out_channels),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features, out_features),
            _ => (0, 0),
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_lens().0 > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv { col: Vec<T> },
    Relu { active: Vec<bool> },
    MaxPool { argmax: Vec<u32> },
    Gap,
    Linear { input: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerGrads<T> {
    pub fn zeros_like(layer: &Layer<T>) -> Self {
        Self {
            weight: vec![T::zero(); layer.weight.len()],
            bias: vec![T::zero(); layer.bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.weight.iter_mut().for_each(|g| *g = T::zero());
        self.bias.iter_mut().for_each(|g| *g = T::zero());
    }
}

impl<T: Real> Layer<T> {
    /// Layer with zeroed parameters.
    pub fn new(spec: LayerSpec, input_shape: Shape) -> Result<Self> {
        let output_shape = spec.output_shape(input_shape)?;
        let (wl, bl) = spec.param_lens();
        Ok(Self {
            spec,
            input_shape,
            output_shape,
            weight: vec![T::zero(); wl],
            bias: vec![T::zero(); bl],
        })
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => return,
        };
        let std = num_traits::Float::sqrt(2.0 / fan_in as f64);
        for w in &mut self.weight {
            *w = T::of(std * standard_normal(rng));
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn mac_cost(&self) -> u64 {
        self.spec.mac_cost(self.input_shape)
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            input_shape: self.input_shape,
            output_shape: self.output_shape,
            weight: self.weight.iter().map(|v| U::of(v.f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.forward_impl(x, None)
    }

    pub fn forward_cached(&self, x: &[T]) -> (Vec<T>, LayerCache<T>) {
        let mut cache = None;
        let y = self.forward_impl(x, Some(&mut cache));
        (y, cache.expect("forward_impl fills the cache"))
    }

    fn forward_impl(&self, x: &[T], cache: Option<&mut Option<LayerCache<T>>>) -> Vec<T> {
        debug_assert_eq!(x.len(), self.input_shape.numel());
        let inp = self.input_shape;
        let out = self.output_shape;
        match self.spec {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let col = im2col(x, inp, out, kernel, stride, padding);
                let p = out.h * out.w;
                let k = inp.c * kernel * kernel;
                let mut y = vec![T::zero(); out.numel()];
                for (co, row) in y.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = self.bias[co]);
                    let wrow = &self.weight[co * k..(co + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        axpy(row, wv, &col[kk * p..(kk + 1) * p]);
                    }
                }
                if let Some(c) = cache {
                    *c = Some(LayerCache::Conv { col });
                }
                y
            }
            LayerSpec::Relu => {
                let y: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                if let Some(c) = cache {
                    *c = Some(LayerCache::Relu {
                        active: x.iter().map(|&v| v > T::zero()).collect(),
                    });
                }
                y
            }
            LayerSpec::MaxPool2 => {
                let mut y = vec![T::zero(); out.numel()];
                let mut argmax = vec![0u32; out.numel()];
                for ch in 0..out.c {
                    let base = ch * inp.h * inp.w;
                    for oy in 0..out.h {
                        for ox in 0..out.w {
                            let mut best = base + (2 * oy) * inp.w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * inp.w + 2 * ox + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            let o = (ch * out.h + oy) * out.w + ox;
                            y[o] = x[best];
                            argmax[o] = best as u32;
                        }
                    }
                }
                if let Some(c) = cache {
                    *c = Some(LayerCache::MaxPool { argmax });
                }
                y
            }
            LayerSpec::GlobalAvgPool => {
                let hw = inp.h * inp.w;
                let inv = T::of(1.0 / hw as f64);
                let y = x.chunks_exact(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
                if let Some(c) = cache {
                    *c = Some(LayerCache::Gap);
                }
                y
            }
            LayerSpec::Linear { in_features, .. } => {
                let y = self
                    .weight
                    .chunks_exact(in_features)
                    .zip(&self.bias)
                    .map(|(row, &b)| b + dot(row, x))
                    .collect();
                if let Some(c) = cache {
                    *c = Some(LayerCache::Linear { input: x.to_vec() });
                }
                y
            }
        }
    }

    /// Back-propagates `dy`. Parameter gradients are accumulated into
    /// `grads`; the input gradient is returned only when `need_dx`.
    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        dy: &[T],
        need_dx: bool,
        grads: Option<&mut LayerGrads<T>>,
    ) -> Option<Vec<T>> {
        let inp = self.input_shape;
        let out = self.output_shape;
        match (self.spec, cache) {
            (
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerCache::Conv { col },
            ) => {
                let p = out.h * out.w;
                let k = inp.c * kernel * kernel;
                if let Some(g) = grads {
                    for (co, dyrow) in dy.chunks_exact(p).enumerate() {
                        g.bias[co] += dyrow.iter().copied().sum::<T>();
                        let gw = &mut g.weight[co * k..(co + 1) * k];
                        for (kk, gv) in gw.iter_mut().enumerate() {
                            *gv += dot(dyrow, &col[kk * p..(kk + 1) * p]);
                        }
                    }
                }
                if !need_dx {
                    return None;
                }
                let mut dcol = vec![T::zero(); k * p];
                for (co, dyrow) in dy.chunks_exact(p).enumerate() {
                    let wrow = &self.weight[co * k..(co + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        axpy(&mut dcol[kk * p..(kk + 1) * p], wv, dyrow);
                    }
                }
                Some(col2im(&dcol, inp, out, kernel, stride, padding))
            }
            (LayerSpec::Relu, LayerCache::Relu { active }) => need_dx.then(|| {
                dy.iter()
                    .zip(active)
                    .map(|(&g, &a)| if a { g } else { T::zero() })
                    .collect()
            }),
            (LayerSpec::MaxPool2, LayerCache::MaxPool { argmax }) => need_dx.then(|| {
                let mut dx = vec![T::zero(); inp.numel()];
                for (&g, &i) in dy.iter().zip(argmax) {
                    dx[i as usize] += g;
                }
                dx
            }),
            (LayerSpec::GlobalAvgPool, LayerCache::Gap) => need_dx.then(|| {
                let hw = inp.h * inp.w;
                let inv = T::of(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(inp.numel());
                for &g in dy {
                    dx.extend(core::iter::repeat_n(g * inv, hw));
                }
                dx
            }),
            (LayerSpec::Linear { in_features, .. }, LayerCache::Linear { input }) => {
                if let Some(g) = grads {
                    for (o, &gy) in dy.iter().enumerate() {
                        g.bias[o] += gy;
                        axpy(&mut g.weight[o * in_features..(o + 1) * in_features], gy, input);
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); in_features];
                    for (row, &gy) in self.weight.chunks_exact(in_features).zip(dy) {
                        axpy(&mut dx, gy, row);
                    }
                    dx
                })
            }
            _ => panic!("layer cache does not match layer kind"),
        }
    }
}

fn im2col<T: Real>(x: &[T], inp: Shape, out: Shape, k: usize, s: usize, pad: usize) -> Vec<T> {
    let p = out.h * out.w;
    let mut col = vec![T::zero(); inp.c * k * k * p];
    for ci in 0..inp.c {
        let plane = &x[ci * inp.h * inp.w..(ci + 1) * inp.h * inp.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..out.h {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= inp.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * inp.w..(iy as usize + 1) * inp.w];
                    let dst = &mut row[oy * out.w..(oy + 1) * out.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < inp.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], inp: Shape, out: Shape, k: usize, s: usize, pad: usize) -> Vec<T> {
    let p = out.h * out.w;
    let mut x = vec![T::zero(); inp.numel()];
    for ci in 0..inp.c {
        let plane = &mut x[ci * inp.h * inp.w..(ci + 1) * inp.h * inp.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..out.h {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= inp.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * inp.w..(iy as usize + 1) * inp.w];
                    for (ox, &v) in row[oy * out.w..(oy + 1) * out.w].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < inp.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Box-Muller standard normal draw.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_input_grad(layer: &Layer<f64>, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let fp: f64 = layer.forward(&xp).iter().zip(dy).map(|(a, b)| a * b).sum();
                let fm: f64 = layer.forward(&xm).iter().zip(dy).map(|(a, b)| a * b).sum();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn check_layer(spec: LayerSpec, inp: Shape) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = Layer::<f64>::new(spec, inp).unwrap();
        layer.init(&mut rng);
        for b in &mut layer.bias {
            *b = rng.gen::<f64>() - 0.5;
        }
        let x: Vec<f64> = (0..inp.numel()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let dy: Vec<f64> = (0..layer.output_shape.numel()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (_, cache) = layer.forward_cached(&x);
        let mut grads = LayerGrads::zeros_like(&layer);
        let dx = layer.backward(&cache, &dy, true, Some(&mut grads)).unwrap();
        let num = numeric_input_grad(&layer, &x, &dy);
        for (a, n) in dx.iter().zip(&num) {
            assert!((a - n).abs() < 1e-6, "input grad {a} vs {n} for {spec:?}");
        }
        // weight gradient by perturbing each weight
        let h = 1e-6;
        for i in 0..layer.weight.len() {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.weight[i] += h;
            lm.weight[i] -= h;
            let fp: f64 = lp.forward(&x).iter().zip(&dy).map(|(a, b)| a * b).sum();
            let fm: f64 = lm.forward(&x).iter().zip(&dy).map(|(a, b)| a * b).sum();
            let n = (fp - fm) / (2.0 * h);
            assert!((grads.weight[i] - n).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_layer(
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
            Shape::new(2, 5, 5),
        );
        check_layer(
            LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 2, padding: 1 },
            Shape::new(2, 6, 6),
        );
    }

    #[test]
    fn linear_gap_pool_gradients() {
        check_layer(LayerSpec::Linear { in_features: 12, out_features: 4 }, Shape::new(3, 2, 2));
        check_layer(LayerSpec::GlobalAvgPool, Shape::new(3, 4, 4));
        check_layer(LayerSpec::MaxPool2, Shape::new(2, 4, 5));
    }

    #[test]
    fn output_shapes() {
        let conv = LayerSpec::Conv2d { in_channels: 3, out_channels: 8, kernel: 3, stride: 2, padding: 1 };
        assert_eq!(conv.output_shape(Shape::new(3, 32, 32)).unwrap(), Shape::new(8, 16, 16));
        assert_eq!(conv.mac_cost(Shape::new(3, 32, 32)), 16 * 16 * 8 * 27);
        assert!(conv.output_shape(Shape::new(4, 32, 32)).is_err());
        assert_eq!(LayerSpec::MaxPool2.output_shape(Shape::new(4, 5, 5)).unwrap(), Shape::new(4, 2, 2));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
