//! Training-free augmentation by mixing a batch with the outputs of freshly
//! drawn random autoencoders.
//!
//! Each autoencoder is `x ↦ dec(scale ⊙ IN(enc(x)) + shift)` where `IN` is
//! per-sample standardization and `scale`, `shift` come from two random linear
//! maps applied to a Gaussian noise vector. The mixture of the original batch
//! and all autoencoder outputs is normalized by the sum of the mixing weights
//! and squashed by a sigmoid.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, softmax_row, standardize_row, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::StageKind;

const IN_EPS: f64 = 1e-5;
const ADAIN_STD: f64 = 0.1;
const MIN_WEIGHT_SUM: f64 = 0.1;
const KERNEL_SIZES: [usize; 4] = [5, 9, 13, 17];
/// Hidden width of the dense encoders for flat inputs.
const MIN_DENSE_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandMixConfig {
    pub n_aug: usize,
    pub r_con: f64,
}

impl Default for RandMixConfig {
    fn default() -> Self {
        Self { n_aug: 4, r_con: 0.8 }
    }
}

impl RandMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.n_aug) {
            return Err(Error::Config(format!("n_aug must be in 1..=16, got {}", self.n_aug)));
        }
        if !(0.0..=1.0).contains(&self.r_con) {
            return Err(Error::Config(format!("r_con must be in [0,1], got {}", self.r_con)));
        }
        Ok(())
    }
}

/// Shape of one input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGeometry {
    Flat { dim: usize },
    /// Single-channel square image flattened row-major.
    Image { side: usize },
}

impl InputGeometry {
    pub fn dim(&self) -> usize {
        match *self {
            InputGeometry::Flat { dim } => dim,
            InputGeometry::Image { side } => side * side,
        }
    }
}

/// One encoder or decoder map.
#[derive(Clone, Debug, PartialEq)]
pub enum Map {
    Identity,
    /// `x · W` with `W: [in × out]`.
    Dense(Tensor),
    /// Stride-1 convolution with zero "same" padding over a `side × side` image.
    Conv { side: usize, kernel: Tensor },
    /// Stride-1 transposed convolution, cropped back to `side × side`.
    ConvTranspose { side: usize, kernel: Tensor },
}

impl Map {
    fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            Map::Dense(w) => w.cols(),
            _ => in_dim,
        }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        match self {
            Map::Identity => row.to_vec(),
            Map::Dense(w) => {
                let mut out = vec![0.0; w.cols()];
                for (k, &v) in row.iter().enumerate() {
                    for (o, &wv) in out.iter_mut().zip(w.row(k)) {
                        *o += v * wv;
                    }
                }
                out
            }
            Map::Conv { side, kernel } => {
                let (s, ks) = (*side as isize, kernel.rows() as isize);
                let half = ks / 2;
                let mut out = vec![0.0; row.len()];
                for i in 0..s {
                    for j in 0..s {
                        let mut acc = 0.0;
                        for a in 0..ks {
                            for b in 0..ks {
                                let (y, x) = (i + a - half, j + b - half);
                                if (0..s).contains(&y) && (0..s).contains(&x) {
                                    acc += row[(y * s + x) as usize] * kernel.at(a as usize, b as usize);
                                }
                            }
                        }
                        out[(i * s + j) as usize] = acc;
                    }
                }
                out
            }
            Map::ConvTranspose { side, kernel } => {
                let (s, ks) = (*side as isize, kernel.rows() as isize);
                let half = ks / 2;
                let mut out = vec![0.0; row.len()];
                for i in 0..s {
                    for j in 0..s {
                        let v = row[(i * s + j) as usize];
                        if v == 0.0 {
                            continue;
                        }
                        for a in 0..ks {
                            for b in 0..ks {
                                let (y, x) = (i + a - half, j + b - half);
                                if (0..s).contains(&y) && (0..s).contains(&x) {
                                    out[(y * s + x) as usize] += v * kernel.at(a as usize, b as usize);
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Noise injection for the normalized code: `scale = 1 + W₁n`, `shift = W₂n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaIn {
    pub w1: Tensor,
    pub w2: Tensor,
    pub noise: Vec<f64>,
}

impl AdaIn {
    /// Noise maps that leave the normalized code untouched.
    pub fn neutral(width: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![width, width]),
            w2: Tensor::zeros(vec![width, width]),
            noise: vec![0.0; width],
        }
    }

    fn project(w: &Tensor, n: &[f64]) -> Vec<f64> {
        (0..w.rows()).map(|i| w.row(i).iter().zip(n).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn scale(&self) -> Vec<f64> {
        Self::project(&self.w1, &self.noise).into_iter().map(|v| 1.0 + v).collect()
    }

    pub fn shift(&self) -> Vec<f64> {
        Self::project(&self.w2, &self.noise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandAutoencoder {
    pub encoder: Map,
    pub decoder: Map,
    pub adain: AdaIn,
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("nonzero dims")
}

impl RandAutoencoder {
    /// Draws a fresh autoencoder; `index` picks the kernel size for images.
    pub fn draw(geometry: InputGeometry, index: usize, rng: &mut impl Rng) -> Self {
        let (encoder, decoder, width) = match geometry {
            InputGeometry::Flat { dim } => {
                let h = dim.max(MIN_DENSE_WIDTH);
                let enc = normal_tensor(rng, dim, h, 1.0 / (dim as f64).sqrt());
                let dec = normal_tensor(rng, h, dim, 1.0 / (h as f64).sqrt());
                (Map::Dense(enc), Map::Dense(dec), h)
            }
            InputGeometry::Image { side } => {
                let k = KERNEL_SIZES[index % KERNEL_SIZES.len()].min(2 * side - 1);
                let std = 1.0 / k as f64;
                let enc = Map::Conv { side, kernel: normal_tensor(rng, k, k, std) };
                let dec = Map::ConvTranspose { side, kernel: normal_tensor(rng, k, k, std) };
                (enc, dec, side * side)
            }
        };
        let adain = AdaIn {
            w1: normal_tensor(rng, width, width, ADAIN_STD),
            w2: normal_tensor(rng, width, width, ADAIN_STD),
            noise: (0..width).map(|_| StandardNormal.sample(rng)).collect(),
        };
        Self { encoder, decoder, adain }
    }

    /// Applies the autoencoder to every row of `x`.
    pub fn autoencode(&self, x: &Tensor) -> Result<Tensor> {
        let d_in = x.cols();
        let width = self.encoder.out_dim(d_in);
        if self.adain.noise.len() != width {
            return Err(Error::shape("autoencode", format!("noise width {} vs code {width}", self.adain.noise.len())));
        }
        if self.decoder.out_dim(width) != d_in {
            return Err(Error::shape("autoencode", "decoder does not restore the input width"));
        }
        let (scale, shift) = (self.adain.scale(), self.adain.shift());
        let mut out = Vec::with_capacity(x.len());
        let mut normed = vec![0.0; width];
        for row in x.row_iter() {
            let code = self.encoder.apply(row);
            standardize_row(&code, IN_EPS, &mut normed);
            let noisy: Vec<f64> = normed.iter().zip(&scale).zip(&shift).map(|((v, s), b)| s * v + b).collect();
            out.extend(self.decoder.apply(&noisy));
        }
        Tensor::matrix(x.rows(), d_in, out)
    }
}

/// Mixing weights `w₀..w_N` with `|Σw| ≥ 0.1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights(Vec<f64>);

impl MixWeights {
    /// Draws standard-normal weights, resampling all of them while the sum is
    /// too close to zero.
    pub fn draw(n_aug: usize, rng: &mut impl Rng) -> Self {
        loop {
            let w: Vec<f64> = (0..=n_aug).map(|_| StandardNormal.sample(rng)).collect();
            if let Some(mw) = Self::new(w) {
                return mw;
            }
        }
    }

    pub fn new(w: Vec<f64>) -> Option<Self> {
        (!w.is_empty() && w.iter().sum::<f64>().abs() >= MIN_WEIGHT_SUM).then_some(Self(w))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `σ((w₀x + Σ wᵢRᵢ(x)) / Σw)`.
pub fn mix(aes: &[RandAutoencoder], w: &MixWeights, x: &Tensor) -> Result<Tensor> {
    if w.0.len() != aes.len() + 1 {
        return Err(Error::shape("mix", format!("{} weights for {} autoencoders", w.0.len(), aes.len())));
    }
    let total: f64 = w.0.iter().sum();
    let mut acc: Vec<f64> = x.data().iter().map(|v| w.0[0] * v).collect();
    for (ae, &wi) in aes.iter().zip(&w.0[1..]) {
        let r = ae.autoencode(x)?;
        for (a, v) in acc.iter_mut().zip(r.data()) {
            *a += wi * v;
        }
    }
    // Keep saturated values inside the open interval.
    let (lo, hi) = (f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    Tensor::new(x.shape().to_vec(), acc.into_iter().map(|v| sigmoid(v / total).clamp(lo, hi)).collect())
}

/// Selection mask: max softmax confidence of the model reaches `r_con`.
pub fn gate(model: &Model, x: &Tensor, r_con: f64) -> Result<Vec<bool>> {
    let logits = model.logits(x)?;
    let mut p = vec![0.0; logits.cols()];
    Ok(logits
        .row_iter()
        .map(|row| {
            softmax_row(row, &mut p);
            p.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= r_con
        })
        .collect())
}

/// Augmented copies of (a subset of) a batch.
#[derive(Clone, Debug, Default)]
pub struct Augmented {
    pub inputs: Option<Tensor>,
    pub labels: Vec<usize>,
    /// Row of the original batch each augmented sample came from.
    pub origin: Vec<usize>,
}

impl Augmented {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Augments a batch: every row on the source stage, gate-passing rows on
/// target stages. Fresh autoencoders and weights are drawn on every call.
pub fn augment_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &RandMixConfig,
    kind: StageKind,
    geometry: InputGeometry,
    rng: &mut impl Rng,
) -> Result<Augmented> {
    if labels.len() != x.rows() {
        return Err(Error::shape("augment_batch", format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let aes: Vec<RandAutoencoder> = (0..cfg.n_aug).map(|i| RandAutoencoder::draw(geometry, i, rng)).collect();
    let w = MixWeights::draw(cfg.n_aug, rng);
    let origin: Vec<usize> = match kind {
        StageKind::Source => (0..x.rows()).collect(),
        StageKind::Target => {
            gate(model, x, cfg.r_con)?.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
        }
    };
    if origin.is_empty() {
        return Ok(Augmented::default());
    }
    let selected = x.select_rows(&origin)?;
    let inputs = mix(&aes, &w, &selected)?;
    Ok(Augmented { inputs: Some(inputs), labels: origin.iter().map(|&i| labels[i]).collect(), origin })
}
