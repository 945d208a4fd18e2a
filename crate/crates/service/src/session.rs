//! A steering session: a particle ensemble advanced under a mutable guidance
//! config. Everything here is synchronous; the HTTP layer serializes access.

use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use sega_core::config::ExperimentConfig;
use sega_core::diagnostics::{distribution_report, mask_report_for};
use sega_core::diffusion::{GuidanceSource, NoiseEstimator, Particle};
use sega_core::guidance::{ConceptEditSpec, GuidanceConfig, GuidanceConfigSpec};
use sega_core::Error as CoreError;

use crate::error::ApiError;

pub const MAX_PARTICLES: usize = 10_000;
/// Particle positions are included in snapshots up to this dimension.
pub const MAX_POSITION_DIM: usize = 8;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub config: Value,
    pub particles: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvanceRequest {
    pub steps: usize,
}

/// Object form of an edits body: the concept list plus optional globals.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditsObject {
    concepts: Vec<ConceptEditSpec>,
    #[serde(default)]
    guidance_scale: Option<f64>,
    #[serde(default)]
    momentum_scale: Option<f64>,
    #[serde(default)]
    momentum_beta: Option<f64>,
}

fn join_path(prefix: &str, path: &str) -> String {
    match (prefix, path) {
        ("", ".") => "body".to_string(),
        (p, ".") => p.to_string(),
        ("", q) => q.to_string(),
        (p, q) if q.starts_with('[') => format!("{p}{q}"),
        (p, q) => format!("{p}.{q}"),
    }
}

/// Parses a JSON body; errors name the offending field under `prefix`.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8], prefix: &str) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = join_path(prefix, &e.path().to_string());
        ApiError::bad_request(path, e.into_inner().to_string())
    })
}

fn parse_value<T: DeserializeOwned>(value: Value, prefix: &str) -> Result<T, ApiError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = join_path(prefix, &e.path().to_string());
        ApiError::bad_request(path, e.into_inner().to_string())
    })
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub struct Session {
    id: String,
    seed: u64,
    config: ExperimentConfig,
    estimator: Box<dyn NoiseEstimator>,
    particles: Vec<Particle>,
    actions: Vec<Value>,
    created_at: u64,
    updated_at: u64,
}

impl Session {
    /// Validates `request` and draws every particle's `z_T`; particle `i`
    /// uses seed `seed + i`.
    pub fn create(id: String, request: CreateRequest) -> Result<Self, ApiError> {
        if !(1..=MAX_PARTICLES).contains(&request.particles) {
            return Err(ApiError::bad_request(
                "particles",
                format!(
                    "must lie in [1, {MAX_PARTICLES}], got {}",
                    request.particles
                ),
            ));
        }
        let mut config =
            ExperimentConfig::from_value(request.config.clone()).map_err(|e| match e {
                CoreError::Config { path, message } => ApiError::bad_request(
                    join_path("config", if path.is_empty() { "." } else { &path }),
                    message,
                ),
                other => ApiError::bad_request("config", other.to_string()),
            })?;
        // Sessions ignore sweep-only settings.
        config.grid.clear();
        config.assertions.clear();
        let estimator = config
            .model
            .estimator(&config.schedule)
            .map_err(|e| ApiError::bad_request("config.model", e.to_string()))?;
        let shape = estimator.shape().to_vec();
        let particles = (0..request.particles)
            .into_par_iter()
            .map(|i| {
                let mut p = Particle::new(request.seed.wrapping_add(i as u64), &shape)?;
                p.state = if i == 0 {
                    p.state.recording_masks()
                } else {
                    p.state.without_gamma_log()
                };
                Ok(p)
            })
            .collect::<Result<Vec<_>, CoreError>>()
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let now = now_millis();
        Ok(Self {
            actions: vec![json!({
                "kind": "create",
                "config": request.config,
                "particles": request.particles,
                "seed": request.seed,
            })],
            id,
            seed: request.seed,
            config,
            estimator,
            particles,
            created_at: now,
            updated_at: now,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Sampler steps taken.
    pub fn t(&self) -> usize {
        self.particles[0].step()
    }

    pub fn steps(&self) -> usize {
        self.config.schedule.steps()
    }

    pub fn guidance(&self) -> &GuidanceConfig {
        &self.config.guidance
    }

    /// Replaces the concept list (and optionally global scales) for later
    /// steps. Momentum is kept. Accepts a bare array of concept edits or an
    /// object `{concepts, guidance_scale?, momentum_scale?, momentum_beta?}`.
    pub fn update_edits(&mut self, body: &[u8]) -> Result<&GuidanceConfig, ApiError> {
        let value: Value = parse_body(body, "")?;
        let mut spec = GuidanceConfigSpec::from(self.config.guidance.clone());
        let prefix = match &value {
            Value::Array(_) => {
                spec.concepts = parse_value(value.clone(), "edits")?;
                "edits"
            }
            Value::Object(_) => {
                let obj: EditsObject = parse_value(value.clone(), "")?;
                spec.concepts = obj.concepts;
                spec.guidance_scale = obj.guidance_scale.unwrap_or(spec.guidance_scale);
                spec.momentum_scale = obj.momentum_scale.unwrap_or(spec.momentum_scale);
                spec.momentum_beta = obj.momentum_beta.unwrap_or(spec.momentum_beta);
                "concepts"
            }
            _ => {
                return Err(ApiError::bad_request(
                    "body",
                    "expected an array of concept edits or an object with `concepts`",
                ))
            }
        };
        let rename = |field: String| match field.strip_prefix("concepts") {
            Some(rest) => format!("{prefix}{rest}"),
            None => field,
        };
        let guidance = GuidanceConfig::try_from(spec).map_err(|e| match e {
            CoreError::OutOfRange { field, message } => {
                ApiError::unprocessable(rename(field), message)
            }
            other => ApiError::unprocessable(prefix, other.to_string()),
        })?;
        for (i, c) in guidance.concepts().iter().enumerate() {
            self.estimator.check_condition(c.condition()).map_err(|e| {
                ApiError::unprocessable(format!("{prefix}[{i}].condition"), e.to_string())
            })?;
        }
        self.actions
            .push(json!({"kind": "edits", "t": self.t(), "body": value}));
        self.config.guidance = guidance;
        self.updated_at = now_millis();
        Ok(&self.config.guidance)
    }

    /// Runs `steps` guided sampler steps on every particle.
    pub fn advance(&mut self, steps: usize) -> Result<(), ApiError> {
        let (t, total) = (self.t(), self.steps());
        if steps == 0 {
            return Err(ApiError::bad_request("steps", "must be at least 1"));
        }
        if t == total {
            return Err(ApiError::conflict(
                "steps",
                format!("session already at t = T = {total}"),
            ));
        }
        if t + steps > total {
            return Err(ApiError::conflict(
                "steps",
                format!("advancing {steps} step(s) from t = {t} would pass T = {total}"),
            ));
        }
        let estimator = &*self.estimator;
        let schedule = &self.config.schedule;
        let guidance = &self.config.guidance;
        self.particles
            .par_iter_mut()
            .try_for_each(|p| {
                (0..steps).try_for_each(|_| {
                    p.advance(estimator, schedule, guidance, GuidanceSource::Live)
                        .map(drop)
                })
            })
            .map_err(|e| ApiError::internal(e.to_string()))?;
        self.actions
            .push(json!({"kind": "advance", "t": t, "steps": steps}));
        self.updated_at = now_millis();
        Ok(())
    }

    fn stats(&self) -> Value {
        let tau = self.steps() - self.t();
        let n = self.particles.len() as f64;
        let mut posterior = Map::new();
        for tag in self.config.model.tags() {
            let values: Vec<f64> = self
                .particles
                .par_iter()
                .map(|p| {
                    self.estimator
                        .posterior(&p.z, tau, &tag)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            posterior.insert(tag, json!(values.iter().sum::<f64>() / n));
        }
        let concepts = self.particles[0].state.last_mask_fraction().len();
        let mask_fraction: Vec<f64> = (0..concepts)
            .map(|c| {
                self.particles
                    .iter()
                    .map(|p| p.state.last_mask_fraction().get(c).copied().unwrap_or(0.0))
                    .sum::<f64>()
                    / n
            })
            .collect();
        let dim = self.estimator.shape().iter().product::<usize>();
        let mean: Vec<f64> = (0..dim)
            .map(|i| self.particles.iter().map(|p| p.z.data()[i]).sum::<f64>() / n)
            .collect();
        let pooled: Vec<f64> = self
            .particles
            .iter()
            .flat_map(|p| p.z.data().iter().copied())
            .collect();
        json!({
            "posterior": posterior,
            "mask_fraction": mask_fraction,
            "mean": mean,
            "distribution": distribution_report(&pooled, None).ok(),
            "mask_report": mask_report_for(&self.particles[0].state).ok(),
        })
    }

    /// Read-only view of the whole session.
    pub fn snapshot(&self) -> Value {
        let dim = self.estimator.shape().iter().product::<usize>();
        let positions = (dim <= MAX_POSITION_DIM).then(|| {
            self.particles
                .iter()
                .map(|p| p.z.data().to_vec())
                .collect::<Vec<_>>()
        });
        let lead = &self.particles[0].state;
        json!({
            "id": self.id,
            "seed": self.seed,
            "particle_count": self.particles.len(),
            "dim": dim,
            "t": self.t(),
            "steps": self.steps(),
            "tau": self.steps() - self.t(),
            "config": self.config.to_value(),
            "positions": positions,
            "gamma_log": lead.gamma_log(),
            "momentum": lead.momentum().data(),
            "stats": self.stats(),
            "actions": self.actions,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        })
    }

    /// Short listing entry.
    pub fn summary(&self) -> Value {
        json!({
            "id": self.id,
            "t": self.t(),
            "steps": self.steps(),
            "particle_count": self.particles.len(),
        })
    }
}
