//! Variance-preserving diffusion over Gaussian mixtures with closed-form noise
//! estimates, and a deterministic sampler driven by the guidance engine.
//!
//! Diffusion time `τ` runs from `T` (noise) down to `0` (data). The forward
//! process is `z_τ = α_τ x + ω_τ ε` with `α_τ² + ω_τ² = 1`, so mixture
//! component `N(μ_k, Σ_k)` becomes `N(α_τ μ_k, α_τ² Σ_k + ω_τ² I)` and the
//! exact noise estimate is `ε* = −ω_τ ∇ log p_τ(z)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{self, GammaLog, GuidanceConfig, GuidanceState};
use crate::tensor::{gaussian_sample, Latent, Rng};

/// Floor applied to `α` so `x̂ = (z − ω ε̄)/α` stays well conditioned at `τ = T`.
pub const MIN_ALPHA: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `α_τ`, `ω_τ` for `τ = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct Schedule {
    alphas: Vec<f64>,
    omegas: Vec<f64>,
    spec: ScheduleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `α_τ = cos(πτ / 2T)`, floored at [`MIN_ALPHA`].
    Cosine { steps: usize },
    /// Explicit `α_0..=α_T`, each in `(0, 1]`.
    Custom { alphas: Vec<f64> },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Cosine { steps: 50 }
    }
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        let alphas = match &spec {
            ScheduleSpec::Cosine { steps } => {
                if *steps == 0 {
                    return Err(Error::out_of_range("steps", "must be at least 1"));
                }
                let t_max = *steps as f64;
                (0..=*steps)
                    .map(|t| (PI * t as f64 / (2.0 * t_max)).cos().max(MIN_ALPHA))
                    .collect::<Vec<_>>()
            }
            ScheduleSpec::Custom { alphas } => {
                if alphas.len() < 2 {
                    return Err(Error::out_of_range("alphas", "need at least two entries"));
                }
                if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
                    return Err(Error::out_of_range(
                        "alphas",
                        format!("entries must lie in (0, 1], got {bad}"),
                    ));
                }
                if alphas.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::out_of_range("alphas", "must be non-increasing"));
                }
                alphas.clone()
            }
        };
        let omegas = alphas
            .iter()
            .map(|a| (1.0 - a * a).max(0.0).sqrt())
            .collect();
        Ok(Schedule {
            alphas,
            omegas,
            spec,
        })
    }
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> Self {
        s.spec
    }
}

impl Schedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        Schedule::try_from(ScheduleSpec::Cosine { steps })
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        Schedule::try_from(ScheduleSpec::Custom { alphas })
    }

    /// Number of sampler steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omegas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    /// `σ² I`.
    Isotropic(f64),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub labels: Vec<String>,
}

/// Weighted Gaussian components, each carrying the concept tags it expresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct MixtureModel {
    components: Vec<Component>,
    dim: usize,
}

impl TryFrom<MixtureSpec> for MixtureModel {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        let comps = spec
            .components
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let d = c.mean.len();
                let covariance = match c.covariance {
                    CovarianceSpec::Isotropic(v) => DMatrix::identity(d, d) * v,
                    CovarianceSpec::Full(rows) => {
                        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                            return Err(Error::InvalidModel(format!(
                                "component {k}: covariance must be {d}x{d}"
                            )));
                        }
                        DMatrix::from_fn(d, d, |i, j| rows[i][j])
                    }
                };
                Ok(Component {
                    weight: c.weight,
                    mean: DVector::from_vec(c.mean),
                    covariance,
                    labels: c.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(comps)
    }
}

impl From<MixtureModel> for MixtureSpec {
    fn from(m: MixtureModel) -> Self {
        MixtureSpec {
            components: m
                .components
                .into_iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    covariance: CovarianceSpec::Full(
                        c.covariance
                            .row_iter()
                            .map(|r| r.iter().copied().collect())
                            .collect(),
                    ),
                    labels: c.labels,
                })
                .collect(),
        }
    }
}

impl MixtureModel {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidModel("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "component {k}: weight must be positive, got {}",
                    c.weight
                )));
            }
            if c.mean.len() != dim || c.covariance.shape() != (dim, dim) {
                return Err(Error::InvalidModel(format!(
                    "component {k}: expected dimension {dim}"
                )));
            }
            if c.mean
                .iter()
                .chain(c.covariance.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::InvalidModel(format!(
                    "component {k}: non-finite entry"
                )));
            }
            let scale = c.covariance.amax().max(1.0);
            if (&c.covariance - c.covariance.transpose()).amax() > 1e-12 * scale {
                return Err(Error::NotPositiveDefinite { component: k });
            }
            if Cholesky::new(c.covariance.clone()).is_none() {
                return Err(Error::NotPositiveDefinite { component: k });
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components, dim })
    }

    /// Isotropic components `N(μ_k, σ_k² I)` from `(weight, mean, variance, labels)`.
    pub fn isotropic(parts: &[(f64, Vec<f64>, f64, &[&str])]) -> Result<Self> {
        Self::new(
            parts
                .iter()
                .map(|(w, m, v, labels)| Component {
                    weight: *w,
                    mean: DVector::from_vec(m.clone()),
                    covariance: DMatrix::identity(m.len(), m.len()) * *v,
                    labels: labels.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.components
            .iter()
            .any(|c| c.labels.iter().any(|l| l == tag))
    }

    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .components
            .iter()
            .flat_map(|c| c.labels.iter().cloned())
            .collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Component indices selected by `condition`; all of them for `None`.
    pub fn select(&self, condition: Option<&str>) -> Result<Vec<usize>> {
        match condition {
            None => Ok((0..self.components.len()).collect()),
            Some(tag) => {
                let idx: Vec<usize> = self
                    .components
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.labels.iter().any(|l| l == tag))
                    .map(|(k, _)| k)
                    .collect();
                if idx.is_empty() {
                    Err(Error::UnknownCondition(tag.to_string()))
                } else {
                    Ok(idx)
                }
            }
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        self.components
            .iter()
            .fold(DMatrix::zeros(self.dim, self.dim), |acc, c| {
                let diff = &c.mean - &mu;
                acc + (&c.covariance + &diff * diff.transpose()) * c.weight
            })
    }

    /// Direct ancestral draw from the data distribution.
    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let l = Cholesky::new(c.covariance.clone())
            .expect("validated")
            .unpack();
        let eps = DVector::from_fn(self.dim, |_, _| rng.standard_normal());
        &c.mean + l * eps
    }

    /// The mixture pushed through the forward process to time `t`.
    pub fn pushed(&self, schedule: &Schedule, t: usize) -> Result<PushedMixture> {
        schedule.check_time(t)?;
        PushedMixture::new(self, schedule.alpha(t), schedule.omega(t))
    }
}

#[derive(Debug, Clone)]
struct PushedComponent {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

/// `Σ w_k N(α μ_k, α² Σ_k + ω² I)` at a fixed time.
#[derive(Debug, Clone)]
pub struct PushedMixture {
    components: Vec<PushedComponent>,
    omega: f64,
    dim: usize,
}

/// Per-component log weighted density and score at one point.
struct ComponentTerms {
    log_joint: Vec<f64>,
    scores: Vec<DVector<f64>>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl PushedMixture {
    fn new(model: &MixtureModel, alpha: f64, omega: f64) -> Result<Self> {
        let d = model.dim;
        let components = model
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let cov =
                    &c.covariance * (alpha * alpha) + DMatrix::identity(d, d) * (omega * omega);
                let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite { component: k })?;
                let log_det = 2.0
                    * chol
                        .l_dirty()
                        .diagonal()
                        .iter()
                        .map(|v| v.ln())
                        .sum::<f64>();
                Ok(PushedComponent {
                    log_weight: c.weight.ln(),
                    mean: &c.mean * alpha,
                    chol,
                    log_det,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            components,
            omega,
            dim: d,
        })
    }

    fn terms(&self, z: &[f64]) -> Result<ComponentTerms> {
        if z.len() != self.dim {
            return Err(Error::ShapeMismatch {
                left: vec![z.len()],
                right: vec![self.dim],
            });
        }
        let z = DVector::from_column_slice(z);
        let mut log_joint = Vec::with_capacity(self.components.len());
        let mut scores = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let diff = &z - &c.mean;
            let solved = c.chol.solve(&diff);
            let quad = diff.dot(&solved);
            log_joint.push(c.log_weight - 0.5 * (self.dim as f64 * LN_2PI + c.log_det + quad));
            scores.push(-solved);
        }
        Ok(ComponentTerms { log_joint, scores })
    }

    /// `∇ log p(z | S)` for the component subset `S`.
    fn score(&self, z: &[f64], subset: &[usize]) -> Result<DVector<f64>> {
        let terms = self.terms(z)?;
        let norm = log_sum_exp(subset.iter().map(|&k| terms.log_joint[k]));
        let mut out = DVector::zeros(self.dim);
        for &k in subset {
            out += &terms.scores[k] * (terms.log_joint[k] - norm).exp();
        }
        Ok(out)
    }

    /// `ε* = −ω ∇ log p(z | S)`.
    pub fn noise_estimate(&self, z: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
        let score = self.score(z, subset)?;
        Ok(score.iter().map(|s| -self.omega * s).collect())
    }

    /// `P(S | z)` under the full mixture.
    pub fn posterior(&self, z: &[f64], subset: &[usize]) -> Result<f64> {
        let terms = self.terms(z)?;
        let all = log_sum_exp(terms.log_joint.iter().copied());
        let sel = log_sum_exp(subset.iter().map(|&k| terms.log_joint[k]));
        Ok((sel - all).exp())
    }

    /// `∇ log P(S | z)` from posterior responsibilities:
    /// `Σ_{k∈S} r_k (s_k − s̄) / P(S | z)` with `s̄ = Σ_k r_k s_k`.
    pub fn classifier_gradient(&self, z: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
        if subset.len() == self.components.len() {
            return Ok(vec![0.0; self.dim]);
        }
        let terms = self.terms(z)?;
        let all = log_sum_exp(terms.log_joint.iter().copied());
        let resp: Vec<f64> = terms.log_joint.iter().map(|l| (l - all).exp()).collect();
        let mean_score = terms
            .scores
            .iter()
            .zip(&resp)
            .fold(DVector::zeros(self.dim), |acc, (s, r)| acc + s * *r);
        let log_post = log_sum_exp(subset.iter().map(|&k| terms.log_joint[k] - all));
        let mut grad = DVector::zeros(self.dim);
        for &k in subset {
            let share = (terms.log_joint[k] - all - log_post).exp();
            grad += (&terms.scores[k] - &mean_score) * share;
        }
        Ok(grad.iter().copied().collect())
    }
}

/// `ε*(z_t | condition)` for a mixture pushed to time `t`.
pub fn exact_noise_estimate(
    model: &MixtureModel,
    schedule: &Schedule,
    z: &Latent,
    t: usize,
    condition: Option<&str>,
) -> Result<Latent> {
    let subset = model.select(condition)?;
    let eps = model
        .pushed(schedule, t)?
        .noise_estimate(z.data(), &subset)?;
    Latent::new(eps, z.shape().to_vec())
}

/// `∇_z log p(condition | z_t)` computed from mixture responsibilities.
pub fn implicit_classifier_gradient(
    model: &MixtureModel,
    schedule: &Schedule,
    z: &Latent,
    t: usize,
    condition: &str,
) -> Result<Latent> {
    let subset = model.select(Some(condition))?;
    let grad = model
        .pushed(schedule, t)?
        .classifier_gradient(z.data(), &subset)?;
    Latent::new(grad, z.shape().to_vec())
}

/// Conditional noise estimator `(z_t, t, condition) → ε`.
pub trait NoiseEstimator: Send + Sync {
    fn shape(&self) -> &[usize];

    fn estimate(&self, z: &Latent, t: usize, condition: Option<&str>) -> Result<Latent>;

    /// Fails with [`Error::UnknownCondition`] if `condition` cannot be resolved.
    fn check_condition(&self, condition: &str) -> Result<()>;

    /// Posterior of `condition` at `z` under the time-`t` marginal.
    fn posterior(&self, z: &Latent, t: usize, condition: &str) -> Result<f64>;
}

/// Exact estimator for one mixture, with per-time factorizations cached.
#[derive(Debug, Clone)]
pub struct MixtureEstimator {
    model: MixtureModel,
    pushed: Vec<PushedMixture>,
    shape: Vec<usize>,
}

impl MixtureEstimator {
    pub fn new(model: MixtureModel, schedule: &Schedule) -> Result<Self> {
        let pushed = (0..=schedule.steps())
            .map(|t| model.pushed(schedule, t))
            .collect::<Result<Vec<_>>>()?;
        let shape = vec![model.dim()];
        Ok(Self {
            model,
            pushed,
            shape,
        })
    }

    pub fn model(&self) -> &MixtureModel {
        &self.model
    }

    fn at(&self, t: usize) -> Result<&PushedMixture> {
        self.pushed.get(t).ok_or(Error::StepOutOfRange {
            t,
            steps: self.pushed.len() - 1,
        })
    }

    fn estimate_slice(&self, z: &[f64], t: usize, condition: Option<&str>) -> Result<Vec<f64>> {
        let subset = self.model.select(condition)?;
        self.at(t)?.noise_estimate(z, &subset)
    }
}

impl NoiseEstimator for MixtureEstimator {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn estimate(&self, z: &Latent, t: usize, condition: Option<&str>) -> Result<Latent> {
        Latent::new(
            self.estimate_slice(z.data(), t, condition)?,
            z.shape().to_vec(),
        )
    }

    fn check_condition(&self, condition: &str) -> Result<()> {
        self.model.select(Some(condition)).map(|_| ())
    }

    fn posterior(&self, z: &Latent, t: usize, condition: &str) -> Result<f64> {
        let subset = self.model.select(Some(condition))?;
        self.at(t)?.posterior(z.data(), &subset)
    }
}

/// Independent mixtures on consecutive coordinate blocks.
///
/// The joint density is the product of the block densities, which is itself a
/// mixture (see [`ProductModel::to_mixture`]). Each block's estimate depends
/// only on that block's coordinates, so edits confined to one block leave the
/// others bit-for-bit untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProductSpec", into = "ProductSpec")]
pub struct ProductModel {
    blocks: Vec<MixtureModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductSpec {
    pub blocks: Vec<MixtureModel>,
}

impl TryFrom<ProductSpec> for ProductModel {
    type Error = Error;

    fn try_from(spec: ProductSpec) -> Result<Self> {
        ProductModel::new(spec.blocks)
    }
}

impl From<ProductModel> for ProductSpec {
    fn from(m: ProductModel) -> Self {
        ProductSpec { blocks: m.blocks }
    }
}

impl ProductModel {
    pub fn new(blocks: Vec<MixtureModel>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidModel(
                "product needs at least one block".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &blocks {
            for tag in b.tags() {
                if !seen.insert(tag.clone()) {
                    return Err(Error::InvalidModel(format!(
                        "tag `{tag}` appears in more than one block"
                    )));
                }
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[MixtureModel] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(MixtureModel::dim).sum()
    }

    /// Coordinate range of each block.
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = start..start + b.dim();
                start = r.end;
                r
            })
            .collect()
    }

    fn block_of(&self, tag: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.has_tag(tag))
            .ok_or_else(|| Error::UnknownCondition(tag.to_string()))
    }

    /// The equivalent flat mixture: one component per combination of block
    /// components, with block-diagonal covariance.
    pub fn to_mixture(&self) -> Result<MixtureModel> {
        let mut combos: Vec<Component> = vec![Component {
            weight: 1.0,
            mean: DVector::zeros(0),
            covariance: DMatrix::zeros(0, 0),
            labels: Vec::new(),
        }];
        for block in &self.blocks {
            let mut next = Vec::with_capacity(combos.len() * block.components.len());
            for left in &combos {
                for right in &block.components {
                    let (dl, dr) = (left.mean.len(), right.mean.len());
                    let mut cov = DMatrix::zeros(dl + dr, dl + dr);
                    cov.view_mut((0, 0), (dl, dl)).copy_from(&left.covariance);
                    cov.view_mut((dl, dl), (dr, dr))
                        .copy_from(&right.covariance);
                    let mean = DVector::from_iterator(
                        dl + dr,
                        left.mean.iter().chain(right.mean.iter()).copied(),
                    );
                    let mut labels = left.labels.clone();
                    labels.extend(right.labels.iter().cloned());
                    next.push(Component {
                        weight: left.weight * right.weight,
                        mean,
                        covariance: cov,
                        labels,
                    });
                }
            }
            combos = next;
        }
        MixtureModel::new(combos)
    }
}

#[derive(Debug, Clone)]
pub struct ProductEstimator {
    model: ProductModel,
    blocks: Vec<MixtureEstimator>,
    ranges: Vec<std::ops::Range<usize>>,
    shape: Vec<usize>,
}

impl ProductEstimator {
    pub fn new(model: ProductModel, schedule: &Schedule) -> Result<Self> {
        let blocks = model
            .blocks
            .iter()
            .map(|b| MixtureEstimator::new(b.clone(), schedule))
            .collect::<Result<Vec<_>>>()?;
        let ranges = model.block_ranges();
        let shape = vec![model.dim()];
        Ok(Self {
            model,
            blocks,
            ranges,
            shape,
        })
    }
}

impl NoiseEstimator for ProductEstimator {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn estimate(&self, z: &Latent, t: usize, condition: Option<&str>) -> Result<Latent> {
        if z.len() != self.model.dim() {
            return Err(Error::ShapeMismatch {
                left: z.shape().to_vec(),
                right: self.shape.clone(),
            });
        }
        let target = condition.map(|c| self.model.block_of(c)).transpose()?;
        let mut out = Vec::with_capacity(z.len());
        for (b, (est, range)) in self.blocks.iter().zip(&self.ranges).enumerate() {
            let cond = if target == Some(b) { condition } else { None };
            out.extend(est.estimate_slice(&z.data()[range.clone()], t, cond)?);
        }
        Latent::new(out, z.shape().to_vec())
    }

    fn check_condition(&self, condition: &str) -> Result<()> {
        self.model.block_of(condition).map(|_| ())
    }

    fn posterior(&self, z: &Latent, t: usize, condition: &str) -> Result<f64> {
        let b = self.model.block_of(condition)?;
        let est = &self.blocks[b];
        let subset = est.model.select(Some(condition))?;
        est.at(t)?
            .posterior(&z.data()[self.ranges[b].clone()], &subset)
    }
}

/// Data model accepted in configuration documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Mixture(MixtureModel),
    Product(ProductModel),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Mixture(m) => m.dim(),
            Model::Product(p) => p.dim(),
        }
    }

    pub fn estimator(&self, schedule: &Schedule) -> Result<Box<dyn NoiseEstimator>> {
        Ok(match self {
            Model::Mixture(m) => Box::new(MixtureEstimator::new(m.clone(), schedule)?),
            Model::Product(p) => Box::new(ProductEstimator::new(p.clone(), schedule)?),
        })
    }

    /// One draw from the data distribution.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Model::Mixture(m) => m.sample(rng).iter().copied().collect(),
            Model::Product(p) => p
                .blocks
                .iter()
                .flat_map(|b| b.sample(rng).iter().copied().collect::<Vec<_>>())
                .collect(),
        }
    }

    pub fn tags(&self) -> Vec<String> {
        match self {
            Model::Mixture(m) => m.tags(),
            Model::Product(p) => p.blocks.iter().flat_map(|b| b.tags()).collect(),
        }
    }
}

/// Deterministic update from `τ = t` to `t − 1`:
/// `x̂ = (z − ω_t ε̄)/α_t`, `z' = α_{t−1} x̂ + ω_{t−1} ε̄`.
pub fn sampler_step(z: &Latent, eps_bar: &Latent, t: usize, schedule: &Schedule) -> Result<Latent> {
    z.check_same_shape(eps_bar)?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    let (a, w) = (schedule.alpha(t), schedule.omega(t));
    if a == 0.0 {
        return Err(Error::ZeroAlpha(t));
    }
    let (a_prev, w_prev) = (schedule.alpha(t - 1), schedule.omega(t - 1));
    Ok(z.zip_map(eps_bar, |zi, ei| {
        let x_hat = (zi - w * ei) / a;
        a_prev * x_hat + w_prev * ei
    }))
}

/// One trajectory: its current latent and guidance state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub seed: u64,
    pub z: Latent,
    pub state: GuidanceState,
}

/// Source of the semantic guidance term for a step.
pub enum GuidanceSource<'a> {
    /// Compute from concept-conditioned estimates.
    Live,
    /// Reuse a recorded log; no concept estimates are evaluated.
    Replay(&'a GammaLog),
}

impl Particle {
    /// Draws `z_T ~ N(0, I)` from `seed`.
    pub fn new(seed: u64, shape: &[usize]) -> Result<Self> {
        let z = gaussian_sample(&mut Rng::new(seed), shape)?;
        Ok(Self {
            seed,
            z,
            state: GuidanceState::new(shape)?,
        })
    }

    /// Sampler steps taken so far.
    pub fn step(&self) -> usize {
        self.state.step()
    }

    /// Advances one sampler step and returns the `ε̄` used.
    pub fn advance(
        &mut self,
        estimator: &dyn NoiseEstimator,
        schedule: &Schedule,
        config: &GuidanceConfig,
        source: GuidanceSource<'_>,
    ) -> Result<Latent> {
        let steps = schedule.steps();
        let k = self.state.step();
        if k >= steps {
            return Err(Error::StepOutOfRange { t: k + 1, steps });
        }
        let tau = steps - k;
        let eps_u = estimator.estimate(&self.z, tau, None)?;
        let eps_p = match config.prompt_condition() {
            Some(p) => estimator.estimate(&self.z, tau, Some(p))?,
            None => eps_u.clone(),
        };
        let eps_bar = match source {
            GuidanceSource::Live => {
                let edits = config
                    .concepts()
                    .iter()
                    .map(|c| estimator.estimate(&self.z, tau, Some(c.condition())))
                    .collect::<Result<Vec<_>>>()?;
                guidance::sega_step(&mut self.state, &eps_u, &eps_p, &edits, config)?
            }
            GuidanceSource::Replay(log) => {
                guidance::replay_step(&mut self.state, &eps_u, &eps_p, log, config)?
            }
        };
        self.z = sampler_step(&self.z, &eps_bar, tau, schedule)?;
        Ok(eps_bar)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_trajectory: bool,
    pub record_eps: bool,
    pub record_masks: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// `z_T, …, z_0` when recorded.
    pub trajectory: Vec<Latent>,
    /// `ε̄` per step when recorded.
    pub eps_bars: Vec<Latent>,
    pub final_sample: Latent,
    pub state: GuidanceState,
}

fn check_conditions(estimator: &dyn NoiseEstimator, config: &GuidanceConfig) -> Result<()> {
    if let Some(p) = config.prompt_condition() {
        estimator.check_condition(p)?;
    }
    for c in config.concepts() {
        estimator.check_condition(c.condition())?;
    }
    Ok(())
}

fn run_with(
    estimator: &dyn NoiseEstimator,
    schedule: &Schedule,
    config: &GuidanceConfig,
    seed: u64,
    options: RunOptions,
    log: Option<&GammaLog>,
) -> Result<RunOutput> {
    check_conditions(estimator, config)?;
    if let Some(log) = log {
        if log.len() != schedule.steps() {
            return Err(Error::Replay(format!(
                "log has {} steps, schedule has {}",
                log.len(),
                schedule.steps()
            )));
        }
        if let Some(Some(entry)) = log.entries().iter().find(|e| e.is_some()) {
            if entry.shape() != estimator.shape() {
                return Err(Error::ShapeMismatch {
                    left: entry.shape().to_vec(),
                    right: estimator.shape().to_vec(),
                });
            }
        }
    }
    let mut particle = Particle::new(seed, estimator.shape())?;
    if options.record_masks {
        particle.state = particle.state.recording_masks();
    }
    let mut trajectory = Vec::new();
    let mut eps_bars = Vec::new();
    if options.record_trajectory {
        trajectory.push(particle.z.clone());
    }
    for _ in 0..schedule.steps() {
        let source = match log {
            Some(l) => GuidanceSource::Replay(l),
            None => GuidanceSource::Live,
        };
        let eps = particle.advance(estimator, schedule, config, source)?;
        if options.record_eps {
            eps_bars.push(eps);
        }
        if options.record_trajectory {
            trajectory.push(particle.z.clone());
        }
    }
    Ok(RunOutput {
        trajectory,
        eps_bars,
        final_sample: particle.z,
        state: particle.state,
    })
}

/// Samples `z_T` from `seed` and runs `T` guided steps.
pub fn run_guided(
    estimator: &dyn NoiseEstimator,
    schedule: &Schedule,
    config: &GuidanceConfig,
    seed: u64,
    options: RunOptions,
) -> Result<RunOutput> {
    run_with(estimator, schedule, config, seed, options, None)
}

/// Like [`run_guided`] but takes the guidance term of every step from `log`.
pub fn run_replayed(
    estimator: &dyn NoiseEstimator,
    schedule: &Schedule,
    config: &GuidanceConfig,
    seed: u64,
    log: &GammaLog,
    options: RunOptions,
) -> Result<RunOutput> {
    run_with(estimator, schedule, config, seed, options, Some(log))
}
