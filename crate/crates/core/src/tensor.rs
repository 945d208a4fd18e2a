//! Dense real vectors with shape metadata, order statistics and a seeded
//! Gaussian source.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat `f64` buffer with shape metadata. Holds latents `z_t` and noise
/// estimates alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatent")]
pub struct Latent {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Deserialize)]
struct RawLatent {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl TryFrom<RawLatent> for Latent {
    type Error = Error;

    fn try_from(raw: RawLatent) -> Result<Self> {
        Latent::new(raw.data, raw.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

impl Latent {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape(shape));
        }
        Ok(Self { data, shape })
    }

    /// A rank-1 latent over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let shape = vec![data.len()];
        Self { data, shape }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![0.0; n], shape.to_vec())
    }

    pub fn zeros_like(other: &Latent) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            shape: other.shape.clone(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn elementwise(&self, op: BinaryOp, other: &Latent) -> Result<Latent> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| op.apply(a, b)))
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Latent) -> Result<Latent> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn scale(&self, factor: f64) -> Latent {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Callers must have checked shapes.
    pub(crate) fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        debug_assert_eq!(self.shape, other.shape);
        Latent {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn abs(&self) -> Latent {
        self.map(f64::abs)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// 1-based nearest rank `⌈λ·n⌉`, clamped to `[1, n]`.
///
/// Products that land within a few ulps of an integer are treated as that
/// integer, so `0.7 * 10` ranks as 7 rather than 8.
pub fn nearest_rank(lambda: f64, n: usize) -> usize {
    let raw = lambda * n as f64;
    let nearest = raw.round();
    let rank = if (raw - nearest).abs() <= 4.0 * f64::EPSILON * nearest.abs().max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// The `λ`-percentile of `values` under the nearest-rank convention: the
/// `⌈λ·n⌉`-th smallest entry of the flattened input, with no interpolation.
pub fn percentile_threshold(values: &[f64], lambda: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("percentile of an empty input".into()));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!(
            "percentile lambda must lie in (0, 1), got {lambda}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("percentile input contains NaN".into()));
    }
    let rank = nearest_rank(lambda, values.len());
    let mut scratch = values.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

/// Seeded generator backed by ChaCha8, a counter-based stream cipher with a
/// published specification; normals are drawn with `rand_distr`'s ziggurat.
///
/// The same seed yields the same stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

/// I.i.d. standard normal entries.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize]) -> Result<Latent> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.standard_normal()).collect();
    Latent::new(data, shape.to_vec())
}
