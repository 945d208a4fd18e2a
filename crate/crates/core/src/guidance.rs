//! Semantic guidance: edit directions, percentile masks, multi-concept
//! combination, warmup gating and momentum on top of classifier-free guidance.
//!
//! A step at counter `t` (0 at the noise end) proceeds as:
//!
//! 1. `ψ_i` from the unconditional and concept-conditioned estimates, sign by direction;
//! 2. `γ_i = μ(ψ_i; s_e, λ) ⊙ ψ_i`, with the mask taken over `|ψ_i|` before scaling;
//! 3. the applied term `Σ g_i γ_i` over concepts with `t ≥ δ_i`, plus `s_m ν` once
//!    `t ≥ max δ_i`;
//! 4. `ν ← β_m ν + (1 − β_m) Σ g_i γ_i` over *all* concepts, so momentum
//!    accumulates through warmup;
//! 5. `ε̄ = ε_u + s_g (ε_p − ε_u) + applied`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{percentile_threshold, Latent};

pub const MAX_GUIDANCE_SCALE: f64 = 20.0;
pub const MAX_EDIT_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Positive,
    Negative,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Positive => Direction::Negative,
            Direction::Negative => Direction::Positive,
        }
    }
}

/// Wire form of a [`ConceptEdit`]; no range checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEditSpec {
    pub condition: String,
    pub edit_scale: f64,
    pub threshold: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// One editing concept and its hyperparameters. Ranges are enforced on
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConceptEditSpec", into = "ConceptEditSpec")]
pub struct ConceptEdit {
    condition: String,
    edit_scale: f64,
    threshold: f64,
    warmup: usize,
    direction: Direction,
    weight: f64,
}

impl TryFrom<ConceptEditSpec> for ConceptEdit {
    type Error = Error;

    fn try_from(spec: ConceptEditSpec) -> Result<Self> {
        if spec.condition.is_empty() {
            return Err(Error::out_of_range("condition", "must be a non-empty tag"));
        }
        if !(0.0..=MAX_EDIT_SCALE).contains(&spec.edit_scale) {
            return Err(Error::out_of_range(
                "edit_scale",
                format!("must lie in [0, {MAX_EDIT_SCALE}], got {}", spec.edit_scale),
            ));
        }
        if !(spec.threshold > 0.0 && spec.threshold < 1.0) {
            return Err(Error::out_of_range(
                "threshold",
                format!("must lie in (0, 1), got {}", spec.threshold),
            ));
        }
        if !spec.weight.is_finite() {
            return Err(Error::out_of_range("weight", "must be finite"));
        }
        Ok(Self {
            condition: spec.condition,
            edit_scale: spec.edit_scale,
            threshold: spec.threshold,
            warmup: spec.warmup,
            direction: spec.direction,
            weight: spec.weight,
        })
    }
}

impl From<ConceptEdit> for ConceptEditSpec {
    fn from(c: ConceptEdit) -> Self {
        Self {
            condition: c.condition,
            edit_scale: c.edit_scale,
            threshold: c.threshold,
            warmup: c.warmup,
            direction: c.direction,
            weight: c.weight,
        }
    }
}

impl ConceptEdit {
    /// Positive direction, no warmup, unit weight.
    pub fn new(condition: impl Into<String>, edit_scale: f64, threshold: f64) -> Result<Self> {
        ConceptEdit::try_from(ConceptEditSpec {
            condition: condition.into(),
            edit_scale,
            threshold,
            warmup: 0,
            direction: Direction::Positive,
            weight: 1.0,
        })
    }

    pub fn with_warmup(mut self, warmup: usize) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_weight(self, weight: f64) -> Result<Self> {
        ConceptEdit::try_from(ConceptEditSpec {
            weight,
            ..self.into()
        })
    }

    pub fn condition(&self) -> &str {
        &self.condition
    }

    pub fn edit_scale(&self) -> f64 {
        self.edit_scale
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// `g_i` for step `t`: zero while the concept is warming up.
    pub fn is_active(&self, t: usize) -> bool {
        t >= self.warmup
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfigSpec {
    #[serde(default)]
    pub prompt_condition: Option<String>,
    #[serde(default = "default_guidance_scale")]
    pub guidance_scale: f64,
    #[serde(default)]
    pub momentum_scale: f64,
    #[serde(default)]
    pub momentum_beta: f64,
    #[serde(default)]
    pub concepts: Vec<ConceptEditSpec>,
}

fn default_guidance_scale() -> f64 {
    1.0
}

/// Global guidance parameters plus the ordered concept list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GuidanceConfigSpec", into = "GuidanceConfigSpec")]
pub struct GuidanceConfig {
    prompt_condition: Option<String>,
    guidance_scale: f64,
    momentum_scale: f64,
    momentum_beta: f64,
    concepts: Vec<ConceptEdit>,
}

impl TryFrom<GuidanceConfigSpec> for GuidanceConfig {
    type Error = Error;

    fn try_from(spec: GuidanceConfigSpec) -> Result<Self> {
        if !(0.0..=MAX_GUIDANCE_SCALE).contains(&spec.guidance_scale) {
            return Err(Error::out_of_range(
                "guidance_scale",
                format!(
                    "must lie in [0, {MAX_GUIDANCE_SCALE}], got {}",
                    spec.guidance_scale
                ),
            ));
        }
        if !(0.0..=1.0).contains(&spec.momentum_scale) {
            return Err(Error::out_of_range(
                "momentum_scale",
                format!("must lie in [0, 1], got {}", spec.momentum_scale),
            ));
        }
        if !(0.0..1.0).contains(&spec.momentum_beta) {
            return Err(Error::out_of_range(
                "momentum_beta",
                format!("must lie in [0, 1), got {}", spec.momentum_beta),
            ));
        }
        let concepts = spec
            .concepts
            .into_iter()
            .enumerate()
            .map(|(i, c)| ConceptEdit::try_from(c).map_err(|e| e.within(&format!("concepts[{i}]"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt_condition: spec.prompt_condition,
            guidance_scale: spec.guidance_scale,
            momentum_scale: spec.momentum_scale,
            momentum_beta: spec.momentum_beta,
            concepts,
        })
    }
}

impl From<GuidanceConfig> for GuidanceConfigSpec {
    fn from(c: GuidanceConfig) -> Self {
        Self {
            prompt_condition: c.prompt_condition,
            guidance_scale: c.guidance_scale,
            momentum_scale: c.momentum_scale,
            momentum_beta: c.momentum_beta,
            concepts: c.concepts.into_iter().map(Into::into).collect(),
        }
    }
}

impl GuidanceConfig {
    pub fn new(prompt_condition: Option<String>, guidance_scale: f64) -> Result<Self> {
        GuidanceConfig::try_from(GuidanceConfigSpec {
            prompt_condition,
            guidance_scale,
            momentum_scale: 0.0,
            momentum_beta: 0.0,
            concepts: Vec::new(),
        })
    }

    pub fn with_momentum(self, momentum_scale: f64, momentum_beta: f64) -> Result<Self> {
        GuidanceConfig::try_from(GuidanceConfigSpec {
            momentum_scale,
            momentum_beta,
            ..self.into()
        })
    }

    pub fn with_concepts(mut self, concepts: Vec<ConceptEdit>) -> Self {
        self.concepts = concepts;
        self
    }

    pub fn prompt_condition(&self) -> Option<&str> {
        self.prompt_condition.as_deref()
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    pub fn momentum_scale(&self) -> f64 {
        self.momentum_scale
    }

    pub fn momentum_beta(&self) -> f64 {
        self.momentum_beta
    }

    pub fn concepts(&self) -> &[ConceptEdit] {
        &self.concepts
    }

    /// Momentum is applied once every concept has left warmup.
    pub fn momentum_applies(&self, t: usize) -> bool {
        self.momentum_scale != 0.0
            && !self.concepts.is_empty()
            && self.concepts.iter().all(|c| c.is_active(t))
    }
}

/// Per-step applied guidance terms; `None` where nothing was added to the
/// CFG prediction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GammaLog(Vec<Option<Latent>>);

impl GammaLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[Option<Latent>] {
        &self.0
    }

    pub fn push(&mut self, entry: Option<Latent>) {
        self.0.push(entry);
    }

    /// `ε̄` for `step` given the live CFG prediction and the recorded term.
    pub fn apply_recorded(&self, step: usize, cfg: &Latent) -> Result<Latent> {
        let entry = self.0.get(step).ok_or_else(|| {
            Error::Replay(format!(
                "no entry for step {step}; log has {} steps",
                self.0.len()
            ))
        })?;
        assemble(cfg, entry.as_ref())
    }
}

/// Per-concept masks of one step.
pub type StepMasks = Vec<Vec<bool>>;

/// Mutable per-run state: momentum, step counter and optional recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceState {
    nu: Latent,
    step: usize,
    gamma_log: Option<GammaLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_log: Option<Vec<StepMasks>>,
    #[serde(default)]
    last_mask_fraction: Vec<f64>,
}

impl GuidanceState {
    /// Zero momentum at step 0, recording the applied guidance each step.
    pub fn new(shape: &[usize]) -> Result<Self> {
        Ok(Self {
            nu: Latent::zeros(shape)?,
            step: 0,
            gamma_log: Some(GammaLog::new()),
            mask_log: None,
            last_mask_fraction: Vec::new(),
        })
    }

    pub fn without_gamma_log(mut self) -> Self {
        self.gamma_log = None;
        self
    }

    pub fn recording_masks(mut self) -> Self {
        self.mask_log = Some(Vec::new());
        self
    }

    pub fn momentum(&self) -> &Latent {
        &self.nu
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn gamma_log(&self) -> Option<&GammaLog> {
        self.gamma_log.as_ref()
    }

    pub fn mask_log(&self) -> Option<&[StepMasks]> {
        self.mask_log.as_deref()
    }

    /// Fraction of nonzero mask entries per concept at the most recent step.
    pub fn last_mask_fraction(&self) -> &[f64] {
        &self.last_mask_fraction
    }
}

/// `ε_u + s_g (ε_p − ε_u)`.
pub fn cfg_term(eps_uncond: &Latent, eps_prompt: &Latent, guidance_scale: f64) -> Result<Latent> {
    eps_uncond.check_same_shape(eps_prompt)?;
    Ok(eps_uncond.zip_map(eps_prompt, |u, p| u + guidance_scale * (p - u)))
}

/// Edit direction `ε_e − ε_u`, negated for negative guidance.
pub fn psi(eps_uncond: &Latent, eps_edit: &Latent, direction: Direction) -> Result<Latent> {
    eps_uncond.check_same_shape(eps_edit)?;
    Ok(match direction {
        Direction::Positive => eps_edit.zip_map(eps_uncond, |e, u| e - u),
        Direction::Negative => eps_edit.zip_map(eps_uncond, |e, u| -(e - u)),
    })
}

/// Entries with `|ψ_i| ≥ η_λ(|ψ|)`, ties included.
pub fn threshold_mask(psi_vec: &Latent, lambda: f64) -> Result<Vec<bool>> {
    let magnitudes: Vec<f64> = psi_vec.data().iter().map(|v| v.abs()).collect();
    let eta = percentile_threshold(&magnitudes, lambda)?;
    Ok(magnitudes.iter().map(|&m| m >= eta).collect())
}

/// `s_e` on the upper tail of `|ψ|`, zero elsewhere.
pub fn mu_mask(psi_vec: &Latent, edit_scale: f64, lambda: f64) -> Result<Latent> {
    let mask = threshold_mask(psi_vec, lambda)?;
    let data = mask
        .iter()
        .map(|&m| if m { edit_scale } else { 0.0 })
        .collect();
    Latent::new(data, psi_vec.shape().to_vec())
}

/// `μ(ψ; s_e, λ) ⊙ ψ`.
pub fn gamma(psi_vec: &Latent, edit_scale: f64, lambda: f64) -> Result<Latent> {
    let mu = mu_mask(psi_vec, edit_scale, lambda)?;
    mu.mul(psi_vec)
}

fn check_gammas(gammas: &[Latent], edits: &[ConceptEdit]) -> Result<()> {
    if gammas.len() != edits.len() {
        return Err(Error::LengthMismatch {
            what: "concept terms",
            expected: edits.len(),
            got: gammas.len(),
        });
    }
    if let Some(first) = gammas.first() {
        for g in &gammas[1..] {
            first.check_same_shape(g)?;
        }
    }
    Ok(())
}

fn weighted_sum<'a>(terms: impl Iterator<Item = (&'a Latent, f64)>, shape_of: &Latent) -> Latent {
    let mut acc = Latent::zeros_like(shape_of);
    for (term, weight) in terms {
        for (a, &v) in acc.data_mut().iter_mut().zip(term.data()) {
            *a += weight * v;
        }
    }
    acc
}

/// `Σ g_i γ_i` with `g_i` forced to zero for concepts still in warmup at `t`.
///
/// With no concepts there is no shape to infer, so an empty list yields an
/// error; [`sega_step`] handles that case before getting here.
pub fn combine_concepts(gammas: &[Latent], edits: &[ConceptEdit], t: usize) -> Result<Latent> {
    check_gammas(gammas, edits)?;
    let first = gammas.first().ok_or(Error::LengthMismatch {
        what: "concept terms",
        expected: 1,
        got: 0,
    })?;
    Ok(weighted_sum(
        gammas
            .iter()
            .zip(edits)
            .filter(|(_, e)| e.is_active(t))
            .map(|(g, e)| (g, e.weight())),
        first,
    ))
}

/// `β_m ν + (1 − β_m) γ̂`.
pub fn momentum_update(nu: &Latent, gamma_hat: &Latent, beta: f64) -> Result<Latent> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::out_of_range(
            "momentum_beta",
            format!("must lie in [0, 1), got {beta}"),
        ));
    }
    nu.check_same_shape(gamma_hat)?;
    Ok(nu.zip_map(gamma_hat, |n, g| beta * n + (1.0 - beta) * g))
}

/// Adds the guidance term to the CFG prediction. `None` returns the CFG
/// prediction untouched.
pub fn assemble(cfg: &Latent, applied: Option<&Latent>) -> Result<Latent> {
    match applied {
        Some(term) => cfg.add(term),
        None => Ok(cfg.clone()),
    }
}

/// Everything a single step derives from its inputs, before state mutation.
#[derive(Debug, Clone)]
pub struct StepTerms {
    /// Per-concept `γ_i`.
    pub gammas: Vec<Latent>,
    /// Per-concept masks.
    pub masks: Vec<Vec<bool>>,
    /// Ungated `Σ g_i γ_i`; feeds momentum.
    pub momentum_input: Option<Latent>,
    /// Term added to the CFG prediction, `None` when nothing applies.
    pub applied: Option<Latent>,
}

/// Computes the guidance terms of step `t` against momentum `nu` without
/// mutating anything.
pub fn step_terms(
    nu: &Latent,
    t: usize,
    eps_uncond: &Latent,
    eps_edits: &[Latent],
    config: &GuidanceConfig,
) -> Result<StepTerms> {
    let concepts = config.concepts();
    if eps_edits.len() != concepts.len() {
        return Err(Error::LengthMismatch {
            what: "edit estimates",
            expected: concepts.len(),
            got: eps_edits.len(),
        });
    }
    nu.check_same_shape(eps_uncond)?;

    let mut gammas = Vec::with_capacity(concepts.len());
    let mut masks = Vec::with_capacity(concepts.len());
    for (eps_edit, concept) in eps_edits.iter().zip(concepts) {
        let direction = psi(eps_uncond, eps_edit, concept.direction())?;
        let mask = threshold_mask(&direction, concept.threshold())?;
        let s = concept.edit_scale();
        let data = direction
            .data()
            .iter()
            .zip(&mask)
            .map(|(&p, &m)| if m { s } else { 0.0 } * p)
            .collect();
        gammas.push(Latent::new(data, direction.shape().to_vec())?);
        masks.push(mask);
    }

    if concepts.is_empty() {
        return Ok(StepTerms {
            gammas,
            masks,
            momentum_input: None,
            applied: None,
        });
    }

    let momentum_input = weighted_sum(
        gammas.iter().zip(concepts).map(|(g, c)| (g, c.weight())),
        eps_uncond,
    );

    let any_active = concepts.iter().any(|c| c.is_active(t));
    let with_momentum = config.momentum_applies(t);
    let applied = if any_active || with_momentum {
        let gated = combine_concepts(&gammas, concepts, t)?;
        Some(if with_momentum {
            let s_m = config.momentum_scale();
            gated.zip_map(nu, |g, n| g + s_m * n)
        } else {
            gated
        })
    } else {
        None
    };

    Ok(StepTerms {
        gammas,
        masks,
        momentum_input: Some(momentum_input),
        applied,
    })
}

/// One guided step: returns `ε̄` and advances `state` by exactly one step.
pub fn sega_step(
    state: &mut GuidanceState,
    eps_uncond: &Latent,
    eps_prompt: &Latent,
    eps_edits: &[Latent],
    config: &GuidanceConfig,
) -> Result<Latent> {
    let cfg = cfg_term(eps_uncond, eps_prompt, config.guidance_scale())?;
    for e in eps_edits {
        eps_uncond.check_same_shape(e)?;
    }
    let terms = step_terms(&state.nu, state.step, eps_uncond, eps_edits, config)?;
    let out = assemble(&cfg, terms.applied.as_ref())?;

    if let Some(input) = &terms.momentum_input {
        state.nu = momentum_update(&state.nu, input, config.momentum_beta())?;
    }
    state.last_mask_fraction = terms
        .masks
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64)
        .collect();
    if let Some(log) = &mut state.gamma_log {
        log.push(terms.applied);
    }
    if let Some(masks) = &mut state.mask_log {
        masks.push(terms.masks);
    }
    state.step += 1;
    Ok(out)
}

/// Replays a recorded guidance term in place of live concept estimates.
pub fn replay_step(
    state: &mut GuidanceState,
    eps_uncond: &Latent,
    eps_prompt: &Latent,
    log: &GammaLog,
    config: &GuidanceConfig,
) -> Result<Latent> {
    let cfg = cfg_term(eps_uncond, eps_prompt, config.guidance_scale())?;
    let out = log.apply_recorded(state.step, &cfg)?;
    if let Some(own) = &mut state.gamma_log {
        own.push(log.entries()[state.step].clone());
    }
    state.step += 1;
    Ok(out)
}
