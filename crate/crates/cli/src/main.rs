use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ostlab::pipeline::{
    demo_config, optimize, run_rtn_baseline, thread_pool, write_outputs, RunConfig,
};
use ostlab::qsur::{fit_gaussian, qsur, QsurReport, QsurVariant, DEFAULT_ALPHA};
use ostlab::tensor_core::ostt::{read_tensor, write_tensor};
use ostlab::transforms::{best_orthogonal, random_hadamard, womi_init};
use ostlab::{OstError, Result, Rng};

#[derive(Parser)]
#[command(
    name = "ostlab",
    version,
    about = "Orthogonal and scaling transforms for quantization on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// QSUR of the rows of an OSTT matrix, as JSON.
    Qsur {
        tensor: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::PrincipalAxes)]
        variant: Variant,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Write the JSON here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Rotate the rows of an OSTT matrix and report QSUR before and after.
    Transform {
        tensor: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Transformed tensor destination.
        #[arg(long, short)]
        output: PathBuf,
        /// Also write the rotation matrix.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Seed for the random signs of `hadamard`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Variant::PrincipalAxes)]
        variant: Variant,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Learn transforms from a TOML or JSON run config.
    Optimize {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Round-to-nearest run without transforms.
    Baseline {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Default end-to-end run: baseline and optimized, summary on stdout.
    Demo {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Where to write report.json, loss.csv and params/.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    PrincipalAxes,
    ExactBox,
}

impl From<Variant> for QsurVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::PrincipalAxes => QsurVariant::PrincipalAxes,
            Variant::ExactBox => QsurVariant::ExactBox,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Eigenbasis followed by a Hadamard.
    Best,
    /// Randomized Hadamard.
    Hadamard,
    /// Weight-outlier-minimizing rotation, treating rows as weight rows.
    Womi,
}

#[derive(Serialize)]
struct TransformReport {
    kind: &'static str,
    input: PathBuf,
    output: PathBuf,
    before: QsurReport,
    after: QsurReport,
}

const DEFAULT_OUTPUT_DIR: &str = "ostlab-out";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = thread_pool().and_then(|pool| pool.install(|| run(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ostlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Qsur {
            tensor,
            variant,
            alpha,
            output,
        } => {
            let x = read_tensor(&tensor)?;
            let report = qsur(&fit_gaussian(&x, alpha)?, variant.into())?;
            emit(&to_json(&report)?, output.as_deref())
        }
        Command::Transform {
            tensor,
            kind,
            output,
            matrix,
            seed,
            variant,
            alpha,
        } => {
            let x = read_tensor(&tensor)?;
            let stats = fit_gaussian(&x, alpha)?;
            let (name, r) = match kind {
                Kind::Best => ("best", best_orthogonal(&stats)?),
                Kind::Hadamard => ("hadamard", random_hadamard(x.cols(), &mut Rng::new(seed))?),
                Kind::Womi => ("womi", womi_init(&x)?),
            };
            let y = x.matmul(&r);
            write_tensor(&output, &y)?;
            if let Some(p) = &matrix {
                write_tensor(p, &r)?;
            }
            let report = TransformReport {
                kind: name,
                input: tensor,
                output,
                before: qsur(&stats, variant.into())?,
                after: qsur(&fit_gaussian(&y, alpha)?, variant.into())?,
            };
            emit(&to_json(&report)?, None)
        }
        Command::Optimize { config, output_dir } => {
            let cfg = RunConfig::from_path(&config)?;
            let dir = out_dir(output_dir, &cfg);
            let (params, report) = optimize(&cfg)?;
            write_outputs(&dir, Some(&params), &report)?;
            print!("{}", report.summary_table());
            Ok(())
        }
        Command::Baseline { config, output_dir } => {
            let cfg = RunConfig::from_path(&config)?;
            let dir = out_dir(output_dir, &cfg);
            let report = run_rtn_baseline(&cfg)?;
            write_outputs(&dir, None, &report)?;
            print!("{}", report.summary_table());
            Ok(())
        }
        Command::Demo { seed, output_dir } => {
            let cfg = demo_config(seed);
            let (params, report) = optimize(&cfg)?;
            if let Some(dir) = output_dir {
                write_outputs(&dir, Some(&params), &report)?;
            }
            print!("{}", report.summary_table());
            Ok(())
        }
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| OstError::numerical(format!("cannot serialize report: {e}")))
}

fn emit(body: &str, dest: Option<&Path>) -> Result<()> {
    match dest {
        Some(p) => std::fs::write(p, body).map_err(|e| OstError::io(p, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}
