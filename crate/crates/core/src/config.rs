//! Experiment configuration documents.
//!
//! One JSON schema (`schema/experiment-config.schema.json`) serves both the
//! command-line harness and the steering service. Parse errors carry the JSON
//! path of the offending field.

use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{Model, Schedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceConfigSpec};

/// Upper bound on seeds in one document.
pub const MAX_SEEDS: u64 = 1_000_000;

const ROOT_KEYS: &[&str] = &[
    "model", "schedule", "guidance", "seeds", "target", "outputs", "diag",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::List(vec![0])
    }
}

impl SeedSpec {
    /// `"3,5,8"` or the half-open range `"0..200"`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = |m: String| Error::Config {
            path: "seeds".into(),
            message: m,
        };
        let spec = if let Some((a, b)) = text.split_once("..") {
            let start: u64 = a
                .trim()
                .parse()
                .map_err(|e| bad(format!("range start `{a}`: {e}")))?;
            let end: u64 = b
                .trim()
                .parse()
                .map_err(|e| bad(format!("range end `{b}`: {e}")))?;
            if end <= start {
                return Err(bad(format!("empty range {start}..{end}")));
            }
            SeedSpec::Range {
                start,
                count: end - start,
            }
        } else {
            let seeds = text
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|e| bad(format!("seed `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            SeedSpec::List(seeds)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Error::Config {
            path: "seeds".into(),
            message: m.into(),
        };
        match self {
            SeedSpec::List(v) if v.is_empty() => Err(bad("seed list is empty")),
            SeedSpec::List(v) if v.len() as u64 > MAX_SEEDS => Err(bad("too many seeds")),
            SeedSpec::Range { count: 0, .. } => Err(bad("seed range is empty")),
            SeedSpec::Range { count, .. } if *count > MAX_SEEDS => Err(bad("too many seeds")),
            SeedSpec::Range { start, count } if start.checked_add(*count).is_none() => {
                Err(bad("seed range overflows u64"))
            }
            _ => Ok(()),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.clone(),
            SeedSpec::Range { start, count } => (*start..*start + *count).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv]
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagSpec {
    /// Diffusion time at which estimates are collected, in `[1, T]`.
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TargetPosterior,
    Displacement,
}

/// A check evaluated on the run summary; a failing check makes the run fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Spearman correlation of `metric` against grid axis `axis`, computed
    /// separately for every combination of the other axes.
    Spearman {
        axis: String,
        metric: Metric,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Key(String),
    Index(usize),
}

/// Dotted path into a config document, e.g. `concepts[0].edit_scale`.
///
/// Paths whose first key is not a top-level field resolve under `guidance`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridPath {
    raw: String,
    segments: Vec<Segment>,
}

impl fmt::Display for GridPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl GridPath {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config {
            path: text.to_string(),
            message: m,
        };
        let mut segments = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        let is_key = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
        loop {
            let start = i;
            while i < bytes.len() && is_key(bytes[i]) {
                i += 1;
            }
            if start == i {
                return Err(bad(format!("expected a field name at offset {start}")));
            }
            segments.push(Segment::Key(text[start..i].to_string()));
            while i < bytes.len() && bytes[i] == b'[' {
                let open = i + 1;
                let close = text[open..]
                    .find(']')
                    .map(|p| open + p)
                    .ok_or_else(|| bad("unterminated `[`".into()))?;
                let idx: usize = text[open..close]
                    .parse()
                    .map_err(|_| bad(format!("bad index `{}`", &text[open..close])))?;
                segments.push(Segment::Index(idx));
                i = close + 1;
            }
            match bytes.get(i) {
                None => break,
                Some(b'.') => i += 1,
                Some(&c) => return Err(bad(format!("unexpected `{}` at offset {i}", c as char))),
            }
        }
        if let Some(Segment::Key(first)) = segments.first() {
            if !ROOT_KEYS.contains(&first.as_str()) {
                segments.insert(0, Segment::Key("guidance".into()));
            }
        }
        Ok(Self {
            raw: text.to_string(),
            segments,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Replaces the existing value at this path.
    pub fn set(&self, doc: &mut Value, new: Value) -> Result<()> {
        let missing = || Error::Config {
            path: self.raw.clone(),
            message: "path does not name a config field".into(),
        };
        let mut cur = doc;
        for seg in &self.segments {
            cur = match seg {
                Segment::Key(k) => cur.as_object_mut().and_then(|o| o.get_mut(k)),
                Segment::Index(i) => cur.as_array_mut().and_then(|a| a.get_mut(*i)),
            }
            .ok_or_else(missing)?;
        }
        *cur = new;
        Ok(())
    }
}

/// Parses one `--grid KEY=V1,V2,...` argument. Values are read as JSON when
/// possible (`0.5`, `true`) and as strings otherwise (`negative`).
pub fn parse_grid_arg(text: &str) -> Result<(String, Vec<Value>)> {
    let (key, values) = text.split_once('=').ok_or_else(|| Error::Config {
        path: text.to_string(),
        message: "expected KEY=V1,V2,...".into(),
    })?;
    GridPath::parse(key)?;
    let values: Vec<Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if values.is_empty() {
        return Err(Error::Config {
            path: key.to_string(),
            message: "grid axis has no values".into(),
        });
    }
    Ok((key.to_string(), values))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperimentConfig {
    model: Model,
    #[serde(default)]
    schedule: ScheduleSpec,
    guidance: GuidanceConfigSpec,
    #[serde(default)]
    seeds: SeedSpec,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    grid: IndexMap<String, Vec<Value>>,
    #[serde(default)]
    outputs: OutputSpec,
    #[serde(default)]
    diag: Option<DiagSpec>,
    #[serde(default)]
    assertions: Vec<Assertion>,
}

/// A full experiment: data model, schedule, guidance, seeds and optional
/// parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawExperimentConfig")]
pub struct ExperimentConfig {
    pub model: Model,
    pub schedule: Schedule,
    pub guidance: GuidanceConfig,
    pub seeds: SeedSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(skip_serializing_if = "IndexMap::is_empty")]
    pub grid: IndexMap<String, Vec<Value>>,
    pub outputs: OutputSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diag: Option<DiagSpec>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub assertions: Vec<Assertion>,
}

impl TryFrom<RawExperimentConfig> for ExperimentConfig {
    type Error = Error;

    fn try_from(raw: RawExperimentConfig) -> Result<Self> {
        let to_config = |e: Error| match e {
            Error::OutOfRange { field, message } => Error::Config {
                path: field,
                message,
            },
            other => other,
        };
        let schedule =
            Schedule::try_from(raw.schedule).map_err(|e| to_config(e.within("schedule")))?;
        let guidance =
            GuidanceConfig::try_from(raw.guidance).map_err(|e| to_config(e.within("guidance")))?;
        let cfg = ExperimentConfig {
            model: raw.model,
            schedule,
            guidance,
            seeds: raw.seeds,
            target: raw.target,
            grid: raw.grid,
            outputs: raw.outputs,
            diag: raw.diag,
            assertions: raw.assertions,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Errors name the JSON path and,
    /// for syntax errors, the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        Self::from_deserializer(de)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        Self::from_deserializer(value)
    }

    fn from_deserializer<'de, D>(de: D) -> Result<Self>
    where
        D: serde::Deserializer<'de>,
        D::Error: fmt::Display,
    {
        let raw: RawExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { String::new() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        ExperimentConfig::try_from(raw)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Tag whose posterior measures concept expression: `target`, else the
    /// first concept's condition, else the prompt condition, else the first
    /// tag the model defines.
    pub fn target_tag(&self) -> Option<String> {
        self.target
            .clone()
            .or_else(|| {
                self.guidance
                    .concepts()
                    .first()
                    .map(|c| c.condition().to_string())
            })
            .or_else(|| self.guidance.prompt_condition().map(str::to_string))
            .or_else(|| self.model.tags().into_iter().next())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.seeds()
    }

    /// Checks everything serde cannot: tag resolution, grid paths, diag time.
    pub fn validate(&self) -> Result<()> {
        self.seeds.validate()?;
        let tags = self.model.tags();
        let known = |t: &str| tags.iter().any(|x| x == t);
        if let Some(p) = self.guidance.prompt_condition() {
            if !known(p) {
                return Err(config_err(
                    "guidance.prompt_condition",
                    format!("unknown condition tag `{p}`"),
                ));
            }
        }
        for (i, c) in self.guidance.concepts().iter().enumerate() {
            if !known(c.condition()) {
                return Err(config_err(
                    &format!("guidance.concepts[{i}].condition"),
                    format!("unknown condition tag `{}`", c.condition()),
                ));
            }
        }
        if let Some(t) = &self.target {
            if !known(t) {
                return Err(config_err("target", format!("unknown condition tag `{t}`")));
            }
        }
        if let Some(d) = &self.diag {
            if d.t == 0 || d.t > self.schedule.steps() {
                return Err(config_err(
                    "diag.t",
                    format!("must lie in [1, {}], got {}", self.schedule.steps(), d.t),
                ));
            }
        }
        for (key, values) in &self.grid {
            GridPath::parse(key)?;
            if values.is_empty() {
                return Err(config_err(
                    &format!("grid.{key}"),
                    "grid axis has no values",
                ));
            }
        }
        for (i, a) in self.assertions.iter().enumerate() {
            let Assertion::Spearman { axis, .. } = a;
            if !self.grid.contains_key(axis) {
                return Err(config_err(
                    &format!("assertions[{i}].axis"),
                    format!("`{axis}` is not a grid axis"),
                ));
            }
        }
        if !self.grid.is_empty() {
            // Every axis value must produce a valid document.
            let base = self.base_value();
            for (key, values) in &self.grid {
                let path = GridPath::parse(key)?;
                for v in values {
                    let mut doc = base.clone();
                    path.set(&mut doc, v.clone())?;
                    Self::from_value(doc).map_err(|e| match e {
                        Error::Config { path: p, message } => {
                            config_err(&format!("grid.{key}"), format!("value {v}: {p}: {message}"))
                        }
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// The document without grid or assertions.
    fn base_value(&self) -> Value {
        let mut v = self.to_value();
        if let Some(o) = v.as_object_mut() {
            o.remove("grid");
            o.remove("assertions");
        }
        v
    }

    /// Number of grid points (1 without a grid).
    pub fn grid_size(&self) -> usize {
        self.grid.values().map(Vec::len).product()
    }

    /// Cartesian product of the grid, first axis outermost.
    pub fn grid_points(&self) -> Result<Vec<GridPoint>> {
        let axes: Vec<(GridPath, &Vec<Value>)> = self
            .grid
            .iter()
            .map(|(k, v)| Ok((GridPath::parse(k)?, v)))
            .collect::<Result<_>>()?;
        let base = self.base_value();
        let total = self.grid_size();
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0; axes.len()];
            for (a, (_, values)) in axes.iter().enumerate().rev() {
                idx[a] = rem % values.len();
                rem /= values.len();
            }
            let mut doc = base.clone();
            let mut assignments = Vec::with_capacity(axes.len());
            for (a, (path, values)) in axes.iter().enumerate() {
                let v = values[idx[a]].clone();
                path.set(&mut doc, v.clone())?;
                assignments.push((path.to_string(), v));
            }
            points.push(GridPoint {
                index: flat,
                assignments,
                config: Self::from_value(doc)?,
            });
        }
        Ok(points)
    }
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub index: usize,
    pub assignments: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}
