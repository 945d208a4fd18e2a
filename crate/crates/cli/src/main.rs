use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sega_core::config::{ExperimentConfig, Format};
use sega_forge::experiment::{self, Experiment};
use sega_forge::output::OutputDir;
use sega_forge::{ablate, diag, Error, Result};

/// Seeded semantic-guidance experiments on an analytic diffusion model.
#[derive(Parser)]
#[command(name = "sega-forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid point for every seed and write per-run tables.
    Run(Common),
    /// Run a two-axis grid and write metric matrices.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Accept any number of axes and write only the long-form table.
        #[arg(long)]
        long: bool,
    },
    /// Distributions of noise estimates at the config's diag time.
    Diag(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Grid axis, e.g. `concepts[0].edit_scale=0,5,10`; repeatable.
    #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
    grid: Vec<String>,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory [default: config `outputs.dir`, else `sega-out`].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format [default: config `outputs.formats`].
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Seed list (`1,2,3`) or range (`0..200`); overrides the config.
    #[arg(long, env = "SEGA_FORGE_SEED")]
    seeds: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let config = experiment::load(&self.config).map_err(|e| match e {
            Error::Core(inner) => Error::Usage(format!("{}: {inner}", self.config.display())),
            other => other,
        })?;
        experiment::apply_overrides(config, &self.grid, self.seeds.as_deref())
    }

    fn output(&self, config: &ExperimentConfig) -> Result<OutputDir> {
        let dir = self
            .out
            .clone()
            .or_else(|| config.outputs.dir.clone())
            .unwrap_or_else(|| PathBuf::from("sega-out"));
        let formats = match self.format {
            Some(FormatArg::Csv) => vec![Format::Csv],
            Some(FormatArg::Json) => vec![Format::Json],
            None => config.outputs.formats.clone(),
        };
        OutputDir::create(dir, &formats)
    }
}

fn report(exp: &Experiment) -> bool {
    for a in &exp.assertions {
        let group: Vec<String> = a
            .group
            .iter()
            .map(|g| format!("{}={}", g.axis, g.value))
            .collect();
        eprintln!(
            "[assert] {} spearman({}) rho={:.4} [{}] {}",
            if a.passed { "PASS" } else { "FAIL" },
            a.axis,
            a.rho,
            group.join(", "),
            match (a.min, a.max) {
                (Some(lo), Some(hi)) => format!("expected in [{lo}, {hi}]"),
                (Some(lo), None) => format!("expected >= {lo}"),
                (None, Some(hi)) => format!("expected <= {hi}"),
                (None, None) => String::new(),
            }
        );
    }
    exp.passed()
}

fn announce(config: &ExperimentConfig) {
    eprintln!(
        "[sega-forge] {} grid point(s) x {} seed(s), T = {}",
        config.grid_size(),
        config.seed_list().len(),
        config.schedule.steps()
    );
}

fn main_inner(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(common) => {
            let config = common.load()?;
            announce(&config);
            let exp = experiment::execute(&config, common.jobs)?;
            let mut out = common.output(&config)?;
            out.write_run(&exp)?;
            eprintln!(
                "[sega-forge] wrote {} file(s) to {}",
                out.written().len(),
                out.dir().display()
            );
            Ok(report(&exp))
        }
        Command::Ablate { common, long } => {
            let config = common.load()?;
            ablate::check_axes(&config, long)?;
            announce(&config);
            let exp = experiment::execute(&config, common.jobs)?;
            let matrix = if config.grid.len() == 2 {
                Some(ablate::matrix(&config, &exp)?)
            } else {
                None
            };
            let mut out = common.output(&config)?;
            out.write_ablation(&exp, matrix.as_ref())?;
            eprintln!(
                "[sega-forge] wrote {} file(s) to {}",
                out.written().len(),
                out.dir().display()
            );
            Ok(report(&exp))
        }
        Command::Diag(common) => {
            let config = common.load()?;
            let d = diag::diagnose(&config)?;
            let mut out = common.output(&config)?;
            out.write_diag(&d)?;
            for n in &d.reports {
                let r = &n.report;
                eprintln!(
                    "[diag] t={} {:<14} mean={:+.4} var={:.4} skew={:+.4} kurt={:+.4}",
                    d.t, n.name, r.mean, r.variance, r.skewness, r.excess_kurtosis
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
