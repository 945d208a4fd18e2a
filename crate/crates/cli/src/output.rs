//! Result files. Series and matrices go to CSV, nested reports to JSON;
//! `Format::Json` additionally writes the whole result as one document.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use sega_core::config::Format;

use crate::ablate::Matrix;
use crate::diag::Diagnostics;
use crate::experiment::{Assignment, Experiment};
use crate::{Error, Result};

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn group_label(group: &[Assignment]) -> String {
    group
        .iter()
        .map(|a| format!("{}={}", a.axis, cell(&a.value)))
        .collect::<Vec<_>>()
        .join(";")
}

pub struct OutputDir {
    dir: PathBuf,
    formats: Vec<Format>,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: impl Into<PathBuf>, formats: &[Format]) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self {
            dir,
            formats: formats.to_vec(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Files written so far, in order.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn wants(&self, format: Format) -> bool {
        self.formats.contains(&format)
    }

    fn csv(&mut self, name: &str, rows: Vec<Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let err = |source| Error::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_path(&path)
            .map_err(err)?;
        for row in rows {
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|source| {
            Error::Json {
                path: path.clone(),
                source,
            }
        })?;
        self.written.push(path);
        Ok(())
    }

    fn with_report<F>(&mut self, name: &str, write: F) -> Result<()>
    where
        F: FnOnce(BufWriter<File>) -> Result<(), csv::Error>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        write(BufWriter::new(file)).map_err(|source| Error::Csv {
            path: path.clone(),
            source,
        })?;
        self.written.push(path);
        Ok(())
    }

    fn summary_rows(exp: &Experiment) -> Vec<Vec<String>> {
        let mut header = vec!["point".to_string()];
        header.extend(exp.axes.iter().cloned());
        header.extend(
            [
                "target",
                "seeds",
                "mean_target_posterior",
                "std_target_posterior",
                "mean_displacement",
                "std_displacement",
            ]
            .map(String::from),
        );
        let mut rows = vec![header];
        for p in &exp.points {
            let s = &p.summary;
            let mut row = vec![s.point.to_string()];
            row.extend(s.assignments.iter().map(|a| cell(&a.value)));
            row.extend([
                s.target.clone().unwrap_or_default(),
                s.seeds.to_string(),
                opt(s.mean_target_posterior),
                opt(s.std_target_posterior),
                s.mean_displacement.to_string(),
                s.std_displacement.to_string(),
            ]);
            rows.push(row);
        }
        rows
    }

    /// Per-run, per-point, per-step tables plus mask and distribution reports.
    pub fn write_run(&mut self, exp: &Experiment) -> Result<()> {
        if self.wants(Format::Csv) {
            let mut header = vec!["point".to_string()];
            header.extend(exp.axes.iter().cloned());
            header.extend(["seed", "target_posterior", "displacement"].map(String::from));
            let mut rows = vec![header];
            for p in &exp.points {
                for r in &p.runs {
                    let mut row = vec![r.point.to_string()];
                    row.extend(p.summary.assignments.iter().map(|a| cell(&a.value)));
                    row.extend([
                        r.seed.to_string(),
                        opt(r.target_posterior),
                        r.displacement.to_string(),
                    ]);
                    rows.push(row);
                }
            }
            self.csv("runs.csv", rows)?;

            let dim = exp
                .points
                .iter()
                .flat_map(|p| p.runs.iter().map(|r| r.final_sample.len()))
                .max()
                .unwrap_or(0);
            let mut header = vec!["point".to_string(), "seed".to_string()];
            header.extend((0..dim).map(|i| format!("x{i}")));
            let mut rows = vec![header];
            for p in &exp.points {
                for r in &p.runs {
                    let mut row = vec![r.point.to_string(), r.seed.to_string()];
                    row.extend(r.final_sample.iter().map(f64::to_string));
                    rows.push(row);
                }
            }
            self.csv("samples.csv", rows)?;

            self.csv("summary.csv", Self::summary_rows(exp))?;

            let concepts = exp
                .points
                .iter()
                .flat_map(|p| p.steps.iter().map(|s| s.mask_fraction.len()))
                .max()
                .unwrap_or(0);
            let mut header: Vec<String> =
                ["point", "step", "t", "mean_target_posterior", "mean_norm"]
                    .map(String::from)
                    .into();
            header.extend((0..concepts).map(|i| format!("mask_fraction_{i}")));
            let mut rows = vec![header];
            for p in &exp.points {
                for s in &p.steps {
                    let mut row = vec![
                        p.summary.point.to_string(),
                        s.step.to_string(),
                        s.t.to_string(),
                        opt(s.mean_target_posterior),
                        s.mean_norm.to_string(),
                    ];
                    row.extend(s.mask_fraction.iter().map(f64::to_string));
                    rows.push(row);
                }
            }
            self.csv("trajectory.csv", rows)?;

            if !exp.assertions.is_empty() {
                let mut rows = vec![[
                    "assertion",
                    "axis",
                    "metric",
                    "group",
                    "rho",
                    "min",
                    "max",
                    "passed",
                ]
                .map(String::from)
                .to_vec()];
                for a in &exp.assertions {
                    rows.push(vec![
                        a.assertion.to_string(),
                        a.axis.clone(),
                        cell(&serde_json::to_value(a.metric).expect("metric serializes")),
                        group_label(&a.group),
                        a.rho.to_string(),
                        opt(a.min),
                        opt(a.max),
                        a.passed.to_string(),
                    ]);
                }
                self.csv("assertions.csv", rows)?;
            }

            for p in &exp.points {
                if let Some(report) = &p.mask_report {
                    self.with_report(&format!("mask_report_{}.csv", p.summary.point), |w| {
                        report.write_csv(w)
                    })?;
                }
            }
        }

        let masks: Vec<Value> = exp
            .points
            .iter()
            .filter_map(|p| {
                p.mask_report.as_ref().map(
                    |r| json!({"point": p.summary.point, "seed": exp.seeds.first(), "report": r}),
                )
            })
            .collect();
        if !masks.is_empty() {
            self.json("mask_report.json", &masks)?;
        }
        let distributions: Vec<Value> = exp
            .points
            .iter()
            .filter_map(|p| {
                p.final_distribution
                    .as_ref()
                    .map(|r| json!({"point": p.summary.point, "report": r}))
            })
            .collect();
        if !distributions.is_empty() {
            self.json("distribution_report.json", &distributions)?;
        }
        if self.wants(Format::Json) {
            self.json("results.json", exp)?;
        }
        Ok(())
    }

    /// Matrix CSVs (or only the long table when `matrix` is `None`).
    pub fn write_ablation(&mut self, exp: &Experiment, matrix: Option<&Matrix>) -> Result<()> {
        if self.wants(Format::Csv) {
            self.csv("summary.csv", Self::summary_rows(exp))?;
            if let Some(m) = matrix {
                let header = |m: &Matrix| {
                    let mut h = vec![format!("{}\\{}", m.row_axis, m.col_axis)];
                    h.extend(m.cols.iter().map(cell));
                    h
                };
                let mut rows = vec![header(m)];
                for (r, v) in m.rows.iter().enumerate() {
                    let mut row = vec![cell(v)];
                    row.extend(m.target_posterior[r].iter().map(|x| opt(*x)));
                    rows.push(row);
                }
                self.csv("ablation_target_posterior.csv", rows)?;
                let mut rows = vec![header(m)];
                for (r, v) in m.rows.iter().enumerate() {
                    let mut row = vec![cell(v)];
                    row.extend(m.displacement[r].iter().map(f64::to_string));
                    rows.push(row);
                }
                self.csv("ablation_displacement.csv", rows)?;
            }
        }
        if self.wants(Format::Json) {
            let summaries: Vec<_> = exp.points.iter().map(|p| &p.summary).collect();
            self.json(
                "ablation.json",
                &json!({"matrix": matrix, "points": summaries, "assertions": exp.assertions}),
            )?;
        }
        Ok(())
    }

    pub fn write_diag(&mut self, diag: &Diagnostics) -> Result<()> {
        self.json("distribution_report.json", diag)?;
        if self.wants(Format::Csv) {
            let mut rows = vec![[
                "name",
                "count",
                "mean",
                "variance",
                "skewness",
                "excess_kurtosis",
                "bandwidth",
            ]
            .map(String::from)
            .to_vec()];
            for n in &diag.reports {
                let r = &n.report;
                rows.push(vec![
                    n.name.clone(),
                    r.count.to_string(),
                    r.mean.to_string(),
                    r.variance.to_string(),
                    r.skewness.to_string(),
                    r.excess_kurtosis.to_string(),
                    r.kde.bandwidth.to_string(),
                ]);
            }
            self.csv("diag_summary.csv", rows)?;
            for n in &diag.reports {
                self.with_report(&format!("kde_{}.csv", n.name), |w| {
                    n.report.write_kde_csv(w)
                })?;
                self.with_report(&format!("histogram_{}.csv", n.name), |w| {
                    n.report.write_histogram_csv(w)
                })?;
            }
        }
        Ok(())
    }
}
