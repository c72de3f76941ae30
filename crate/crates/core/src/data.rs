//! In-memory labeled image sets, augmentation and a synthetic generator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::standard_normal;
use crate::rng;
use crate::tensor::{Shape, Tensor};

/// Images stored contiguously in channel-major float32, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_shape: Shape,
    pub n_y: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(input_shape: Shape, n_y: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * input_shape.numel() {
            return Err(Error::LengthMismatch {
                left: images.len(),
                right: labels.len() * input_shape.numel(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_y) {
            return Err(Error::InvalidConfig(alloc::format!(
                "label {bad} out of range for {n_y} classes"
            )));
        }
        Ok(Self {
            input_shape,
            n_y,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.input_shape.numel();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn tensor(&self, i: usize) -> Tensor<f32> {
        Tensor::from_vec(self.input_shape, self.image(i).to_vec())
    }

    pub fn tensors(&self) -> Vec<Tensor<f32>> {
        (0..self.len()).map(|i| self.tensor(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.input_shape.numel());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            input_shape: self.input_shape,
            n_y: self.n_y,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub horizontal_flip: bool,
    /// Zero-padded random crop of this many pixels (0 disables).
    pub random_crop: usize,
}

impl Augmentation {
    pub fn apply<R: Rng + ?Sized>(&self, img: &[f32], shape: Shape, rng: &mut R) -> Vec<f32> {
        let flip = self.horizontal_flip && rng.gen::<bool>();
        let (dy, dx) = if self.random_crop > 0 {
            let p = self.random_crop as isize;
            (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        if !flip && dy == 0 && dx == 0 {
            return img.to_vec();
        }
        let (h, w) = (shape.h as isize, shape.w as isize);
        let mut out = vec![0.0f32; img.len()];
        for c in 0..shape.c {
            let plane = &img[c * shape.h * shape.w..(c + 1) * shape.h * shape.w];
            let dst = &mut out[c * shape.h * shape.w..(c + 1) * shape.h * shape.w];
            for y in 0..h {
                let sy = y + dy;
                if sy < 0 || sy >= h {
                    continue;
                }
                for x in 0..w {
                    let mut sx = x + dx;
                    if flip {
                        sx = w - 1 - sx;
                    }
                    if sx >= 0 && sx < w {
                        dst[(y * w + x) as usize] = plane[(sy * w + sx) as usize];
                    }
                }
            }
        }
        out
    }
}

/// How classes are encoded in a synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Class `k` is colour tint `k % colors` with grating orientation
    /// `k / colors`.
    Gratings,
    /// Class `2p + o` is colour pair `p` stacked in order `o`; the grating
    /// is nuisance texture.
    Bands,
}

/// Parameters of the synthetic image family.
///
/// See [`Layout`] for the class structure. In the band layout the colour
/// content identifies the pair but only the spatial arrangement identifies
/// the order; band proportions give a shortcut that is right with
/// probability `layout_cue`. Global colour jitter and pixel noise are added
/// to every image, and each sample draws its signal strength uniformly from
/// `[min_strength, max_strength]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub layout: Layout,
    pub n_y: usize,
    pub colors: usize,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_strength: f64,
    pub max_strength: f64,
    pub color_amplitude: f64,
    pub grating_amplitude: f64,
    pub color_jitter: f64,
    pub noise: f64,
    /// Probability that the first colour of a pair fills the larger band, a
    /// shortcut visible to shallow features.
    pub layout_cue: f64,
    /// Grating period range in pixels.
    pub min_period: f64,
    pub max_period: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            layout: Layout::Gratings,
            n_y: 10,
            colors: 5,
            size: 32,
            train: 3000,
            val: 600,
            test: 600,
            min_strength: 0.25,
            max_strength: 1.0,
            color_amplitude: 0.3,
            grating_amplitude: 0.25,
            color_jitter: 0.08,
            noise: 0.12,
            layout_cue: 0.8,
            min_period: 5.0,
            max_period: 7.0,
        }
    }
}

impl SyntheticSpec {
    pub fn input_shape(&self) -> Shape {
        Shape::new(3, self.size, self.size)
    }

    fn palette(&self) -> Vec<[f64; 3]> {
        let mut r = rng::stream(self.seed, "synthetic-palette", 0);
        (0..self.colors)
            .map(|k| {
                // evenly spread hues on the colour wheel, centred on grey
                let hue = core::f64::consts::TAU * k as f64 / self.colors as f64
                    + 0.2 * (r.gen::<f64>() - 0.5);
                [libm::cos(hue), libm::cos(hue + 2.094), libm::cos(hue + 4.189)]
            })
            .collect()
    }

    /// Colour index pairs; pair `p` joins colours `p` and `p + 2` (mod
    /// `colors`), falling back to `p + 1` for small palettes.
    fn pair(&self, p: usize) -> (usize, usize) {
        let step = if self.colors > 4 { 2 } else { 1 };
        (p % self.colors, (p + step) % self.colors)
    }

    fn sample<R: Rng + ?Sized>(&self, label: usize, palette: &[[f64; 3]], rng: &mut R) -> Vec<f32> {
        match self.layout {
            Layout::Gratings => self.sample_gratings(label, palette, rng),
            Layout::Bands => self.sample_bands(label, palette, rng),
        }
    }

    fn sample_gratings<R: Rng + ?Sized>(&self, label: usize, palette: &[[f64; 3]], rng: &mut R) -> Vec<f32> {
        let n = self.size;
        let groups = self.n_y.div_ceil(self.colors);
        let strength = self.min_strength + (self.max_strength - self.min_strength) * rng.gen::<f64>();
        let tint = palette[label % self.colors];
        let angle = core::f64::consts::PI * (label / self.colors) as f64 / groups as f64
            + 0.15 * (rng.gen::<f64>() - 0.5);
        let freq = core::f64::consts::TAU
            / (self.min_period + (self.max_period - self.min_period) * rng.gen::<f64>());
        let phase = core::f64::consts::TAU * rng.gen::<f64>();
        let jitter: [f64; 3] = core::array::from_fn(|_| self.color_jitter * standard_normal(rng));
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let mut img = vec![0.0f32; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let u = (x as f64 - n as f64 / 2.0) * c + (y as f64 - n as f64 / 2.0) * s;
                let g = libm::sin(freq * u + phase);
                for ch in 0..3 {
                    let v = 0.5
                        + jitter[ch]
                        + strength * (self.color_amplitude * tint[ch] + self.grating_amplitude * g)
                        + self.noise * standard_normal(rng);
                    img[(ch * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    }

    fn sample_bands<R: Rng + ?Sized>(&self, label: usize, palette: &[[f64; 3]], rng: &mut R) -> Vec<f32> {
        let n = self.size;
        let strength = self.min_strength + (self.max_strength - self.min_strength) * rng.gen::<f64>();
        let (a, b) = self.pair(label / 2);
        let (top, bottom) = if label.is_multiple_of(2) { (palette[a], palette[b]) } else { (palette[b], palette[a]) };
        // the first colour of the pair takes the larger band with
        // probability `layout_cue`
        let a_larger = rng.gen::<f64>() < self.layout_cue;
        let top_larger = a_larger == label.is_multiple_of(2);
        let offset = 1.0 + (n as f64 / 6.0) * rng.gen::<f64>();
        let split = n as f64 / 2.0 + if top_larger { offset } else { -offset };
        let angle = core::f64::consts::PI * rng.gen::<f64>();
        let freq = core::f64::consts::TAU
            / (self.min_period + (self.max_period - self.min_period) * rng.gen::<f64>());
        let phase = core::f64::consts::TAU * rng.gen::<f64>();
        let jitter: [f64; 3] = core::array::from_fn(|_| self.color_jitter * standard_normal(rng));
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let mut img = vec![0.0f32; 3 * n * n];
        for y in 0..n {
            // soft one-pixel edge between the bands
            let w = (y as f64 + 0.5 - split + 0.5).clamp(0.0, 1.0);
            for x in 0..n {
                let u = (x as f64 - n as f64 / 2.0) * c + (y as f64 - n as f64 / 2.0) * s;
                let g = libm::sin(freq * u + phase);
                for ch in 0..3 {
                    let tint = (1.0 - w) * top[ch] + w * bottom[ch];
                    let v = 0.5
                        + jitter[ch]
                        + strength * self.color_amplitude * tint
                        + self.grating_amplitude * g
                        + self.noise * standard_normal(rng);
                    img[(ch * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    }

    fn split(&self, name: &str, count: usize, palette: &[[f64; 3]]) -> Dataset {
        let mut r = rng::stream(self.seed, name, 0);
        let mut labels: Vec<usize> = (0..count).map(|i| i % self.n_y).collect();
        labels.shuffle(&mut r);
        let mut images = Vec::with_capacity(count * 3 * self.size * self.size);
        for &l in &labels {
            images.extend(self.sample(l, palette, &mut r));
        }
        Dataset {
            input_shape: self.input_shape(),
            n_y: self.n_y,
            images,
            labels,
        }
    }

    /// Generates disjoint train/val/test splits (independent streams).
    pub fn generate(&self) -> Result<DatasetSplits> {
        if self.n_y < 2 || self.colors < 2 || self.size < 8 {
            return Err(Error::InvalidConfig(
                "synthetic set needs n_y >= 2, colors >= 2 and size >= 8".into(),
            ));
        }
        if self.layout == Layout::Bands && self.n_y > 2 * self.colors {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} colours support at most {} classes",
                self.colors,
                2 * self.colors
            )));
        }
        let palette = self.palette();
        Ok(DatasetSplits {
            name: alloc::format!("synthetic-{}", self.seed),
            train: self.split("synthetic-train", self.train, &palette),
            val: self.split("synthetic-val", self.val, &palette),
            test: self.split("synthetic-test", self.test, &palette),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let spec = SyntheticSpec {
            train: 20,
            val: 10,
            test: 10,
            ..Default::default()
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 20);
        assert!(a.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.train.labels.iter().all(|&l| l < 10));
        assert_ne!(a.train.images[..100], a.val.images[..100]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let shape = Shape::new(1, 2, 3);
        let img = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let aug = Augmentation {
            horizontal_flip: true,
            random_crop: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        loop {
            let once = aug.apply(&img, shape, &mut rng);
            if once != img {
                assert_eq!(once, [3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
                break;
            }
        }
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new(Shape::new(1, 1, 1), 2, vec![0.0], vec![2]).is_err());
        assert!(Dataset::new(Shape::new(1, 1, 1), 2, vec![0.0, 1.0], vec![1]).is_err());
    }
}
