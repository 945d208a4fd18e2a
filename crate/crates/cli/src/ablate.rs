//! Two-axis ablation matrices.

use serde::Serialize;
use serde_json::Value;

use sega_core::config::ExperimentConfig;

use crate::experiment::Experiment;
use crate::{Error, Result};

/// Per-cell seed means over a two-axis grid; rows follow the first axis.
#[derive(Debug, Clone, Serialize)]
pub struct Matrix {
    pub row_axis: String,
    pub col_axis: String,
    pub rows: Vec<Value>,
    pub cols: Vec<Value>,
    pub target_posterior: Vec<Vec<Option<f64>>>,
    pub displacement: Vec<Vec<f64>>,
}

/// Matrix output needs exactly two axes; `long` accepts any grid.
pub fn check_axes(config: &ExperimentConfig, long: bool) -> Result<()> {
    let n = config.grid.len();
    if long || n == 2 {
        return Ok(());
    }
    Err(Error::Usage(format!(
        "ablate needs exactly 2 grid axes for matrix output, got {n}; pass --long for long-form output"
    )))
}

pub fn matrix(config: &ExperimentConfig, experiment: &Experiment) -> Result<Matrix> {
    check_axes(config, false)?;
    let mut axes = config.grid.iter();
    let (row_axis, rows) = axes.next().expect("two axes");
    let (col_axis, cols) = axes.next().expect("two axes");
    let cell = |r: usize, c: usize| &experiment.points[r * cols.len() + c].summary;
    Ok(Matrix {
        row_axis: row_axis.clone(),
        col_axis: col_axis.clone(),
        rows: rows.clone(),
        cols: cols.clone(),
        target_posterior: (0..rows.len())
            .map(|r| {
                (0..cols.len())
                    .map(|c| cell(r, c).mean_target_posterior)
                    .collect()
            })
            .collect(),
        displacement: (0..rows.len())
            .map(|r| {
                (0..cols.len())
                    .map(|c| cell(r, c).mean_displacement)
                    .collect()
            })
            .collect(),
    })
}
