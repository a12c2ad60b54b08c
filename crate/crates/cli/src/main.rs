//! `flat`: calibrate, score, plan, compress and verify toy decoder models.

mod commands;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flat_core::iprs::RankMode;
use flat_core::FlatError;

use crate::source::{SyntheticSpec, UsageError};

#[derive(Parser, Debug)]
#[command(name = "flat", version, about = "Low-rank compression of toy decoder transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate, allocate ranks and write a compressed checkpoint.
    Compress(CompressArgs),
    /// Compute per-decoder importance scores from calibration data.
    Importance(ImportanceArgs),
    /// Turn importance scores into a per-layer rank plan.
    Plan(PlanArgs),
    /// Run a verification suite.
    Verify(VerifyArgs),
    /// Write a seeded random model (and optionally calibration batches).
    RandomModel(RandomModelArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Seed for synthetic inputs that do not carry their own.
    #[arg(long, env = "FLAT_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads for the parallel loops (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Run every loop single-threaded.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct CalibSource {
    /// Calibration container written by `random-model --calib-out`.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Generated calibration data: `seed=S,batches=M,tokens=N`.
    #[arg(long, value_name = "SPEC")]
    calib_synthetic: Option<SyntheticSpec>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Iprs,
    Uniform,
}

impl From<ModeArg> for RankMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Iprs => RankMode::Iprs,
            ModeArg::Uniform => RankMode::Uniform,
        }
    }
}

#[derive(Args, Debug)]
struct CompressArgs {
    /// Dense checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibSource,
    /// Fraction of parameters to remove, in [0, 1).
    #[arg(long, default_value_t = 0.2)]
    sparsity: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Iprs)]
    mode: ModeArg,
    /// Also compress the query/key projections.
    #[arg(long)]
    qk: bool,
    /// Output directory for the checkpoint and the JSON artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Use this plan instead of deriving one from the scores.
    #[arg(long, conflicts_with_all = ["sparsity", "mode", "importance_on_compressed"])]
    plan: Option<PathBuf>,
    /// Held-out batch container for the report (default: one synthetic
    /// batch of 32 tokens from seed + 1).
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Store tensors as f32 (lossy).
    #[arg(long)]
    f32: bool,
    /// Re-score on the first-pass compressed model and re-plan.
    #[arg(long)]
    importance_on_compressed: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    calib: CalibSource,
    #[arg(long, default_value = "scores.json")]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Output of `flat importance`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    sparsity: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Iprs)]
    mode: ModeArg,
    #[arg(long, default_value = "plan.json")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    /// Truncation-error identities on random activations.
    Theorems,
    /// Greedy rank allocation against the grid oracle.
    Alloc,
    /// End-to-end reconstruction error.
    E2e,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Write the full JSON result here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Randomized trials for the theorems and alloc suites.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Dense model for the e2e suite (default: a seeded toy model).
    #[arg(long, requires = "compressed")]
    model: Option<PathBuf>,
    /// Compressed model for the e2e suite.
    #[arg(long, requires = "model")]
    compressed: Option<PathBuf>,
    /// Tokens in the e2e evaluation batch.
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct RandomModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    d_head: usize,
    /// Query heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Key/value heads; must divide `--heads`.
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_int: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Comma-separated residual-branch scale per layer.
    #[arg(long, value_delimiter = ',')]
    branch_scales: Option<Vec<f64>>,
    /// Also write synthetic calibration batches here (seed + 1).
    #[arg(long)]
    calib_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    calib_batches: usize,
    #[arg(long, default_value_t = 32)]
    calib_tokens: usize,
    #[arg(long)]
    f32: bool,
    #[arg(long, env = "FLAT_SEED", default_value_t = 0)]
    seed: u64,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<FlatError>() {
            return match e {
                _ if e.is_numerical() => EXIT_NUMERICAL,
                FlatError::InvalidSparsity(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress(a) => commands::compress(a),
        Command::Importance(a) => commands::importance(a),
        Command::Plan(a) => commands::plan(a),
        Command::Verify(a) => commands::verify(a),
        Command::RandomModel(a) => commands::random_model(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let numerical = anyhow::Error::from(
            FlatError::Singular {
                what: "block".into(),
                damping: 1e-8,
            }
            .in_layer(2),
        );
        assert_eq!(exit_code(&numerical), EXIT_NUMERICAL);
        assert_eq!(exit_code(&FlatError::NotPsd { what: "c_v".into(), eigenvalue: -1.0, largest: 2.0 }.into()), EXIT_NUMERICAL);
        assert_eq!(exit_code(&FlatError::InvalidSparsity(1.0).into()), EXIT_USAGE);
        assert_eq!(exit_code(&source::usage("bad flags")), EXIT_USAGE);
        let data = anyhow::Error::from(FlatError::format("manifest.json", "bad")).context("loading");
        assert_eq!(exit_code(&data), EXIT_DATA);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_DATA);
    }
}
