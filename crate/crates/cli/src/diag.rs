//! Distributions of noise estimates and edit directions at a fixed time.

use serde::Serialize;

use sega_core::config::ExperimentConfig;
use sega_core::diagnostics::{distribution_report, DistributionReport};
use sega_core::guidance::psi;
use sega_core::{Error as CoreError, Latent, Rng};

use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct NamedReport {
    pub name: String,
    pub report: DistributionReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub t: usize,
    pub samples: usize,
    pub reports: Vec<NamedReport>,
}

/// Draws one `z_t` per seed from the forward process and pools every
/// coordinate of the unconditional, prompt-conditioned and per-concept
/// estimates, plus each concept's edit direction. Uses the diag time from the
/// config, or `T`.
pub fn diagnose(config: &ExperimentConfig) -> Result<Diagnostics> {
    let schedule = &config.schedule;
    let t = config.diag.as_ref().map_or(schedule.steps(), |d| d.t);
    let estimator = config.model.estimator(schedule)?;
    let guidance = &config.guidance;
    let concepts = guidance.concepts();
    let seeds = config.seed_list();

    let mut uncond = Vec::new();
    let mut prompt = Vec::new();
    let mut edits = vec![Vec::new(); concepts.len()];
    let mut directions = vec![Vec::new(); concepts.len()];
    for &seed in &seeds {
        let mut rng = Rng::new(seed);
        let x = config.model.sample(&mut rng);
        let z = Latent::from_vec(
            x.iter()
                .map(|xi| schedule.alpha(t) * xi + schedule.omega(t) * rng.standard_normal())
                .collect(),
        );
        let eps_u = estimator.estimate(&z, t, None)?;
        let eps_p = match guidance.prompt_condition() {
            Some(p) => estimator.estimate(&z, t, Some(p))?,
            None => eps_u.clone(),
        };
        for (i, c) in concepts.iter().enumerate() {
            let eps_e = estimator.estimate(&z, t, Some(c.condition()))?;
            directions[i].extend_from_slice(psi(&eps_u, &eps_e, c.direction())?.data());
            edits[i].extend_from_slice(eps_e.data());
        }
        uncond.extend_from_slice(eps_u.data());
        prompt.extend_from_slice(eps_p.data());
    }

    let mut named = vec![
        ("unconditional".to_string(), uncond),
        ("prompt".to_string(), prompt),
    ];
    for (i, (e, d)) in edits.into_iter().zip(directions).enumerate() {
        named.push((format!("edit_{i}"), e));
        named.push((format!("direction_{i}"), d));
    }
    let reports = named
        .into_iter()
        .map(|(name, values)| {
            let report = distribution_report(&values, None).map_err(|e| match e {
                CoreError::Domain(m) => CoreError::Domain(format!("{name}: {m}")),
                other => other,
            })?;
            Ok(NamedReport { name, report })
        })
        .collect::<Result<_>>()?;
    Ok(Diagnostics {
        t,
        samples: seeds.len(),
        reports,
    })
}
