use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pirtune_cli::{analyze, CliError, Pipeline, RunConfig, Stage};
use pirtune_core::nets::PresetName;

#[derive(Parser)]
#[command(name = "pirtune", version, about = "Tune a GAN toward simulated positive-interaction rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural corpus (and the oracle classifier for filter objectives).
    MakeData(Common),
    /// Adversarial pretraining.
    Pretrain(Common),
    /// Label generator samples with simulated interaction rates.
    SimulatePir(Common),
    /// Fit the PIR estimator to the simulated dataset.
    TrainEstimator(Common),
    /// Tune the generator against the frozen estimator.
    Tune(Common),
    /// Compare pre- and post-tuning samples.
    Evaluate(Common),
    /// Second round: relabel, merge, continue the estimator, tune again.
    Iterate(Common),
    /// Cross-run regressions over every evaluated run under --out.
    Analyze {
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Chain make-data through evaluate (or up to --stage).
    RunAll(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Last stage to run (run-all only).
    #[arg(long)]
    stage: Option<String>,
    /// Seed override, repeatable: --seed-override tuning=7
    #[arg(long = "seed-override", value_name = "NAME=VALUE")]
    seed_overrides: Vec<String>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Output root; the run directory is <out>/runs/<config-hash>/.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.seed_overrides {
            config.seeds.apply_override(o)?;
        }
        if let Some(p) = self.preset {
            config.preset = match p {
                PresetArg::Desk => PresetName::Desk,
                PresetArg::Paper => PresetName::Paper,
            };
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

/// Maps `PIRTUNE_THREADS` onto the matrix kernel's thread pool size. Must run
/// before the first matrix product.
fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("PIRTUNE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Config(format!("PIRTUNE_THREADS must be a positive integer, got `{v}`")))?;
        std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    }
    Ok(())
}

fn stage_command(common: &Common, stage: Stage) -> Result<(), CliError> {
    if common.stage.is_some() {
        return Err(CliError::Config("--stage is only accepted by run-all".into()));
    }
    let mut pipeline = Pipeline::open(&common.config()?)?;
    pipeline.run(stage)?;
    println!("{}", pipeline.root().join(stage.dir()).display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let stage = match &cli.command {
        Command::MakeData(c) => (c, Stage::MakeData),
        Command::Pretrain(c) => (c, Stage::Pretrain),
        Command::SimulatePir(c) => (c, Stage::SimulatePir),
        Command::TrainEstimator(c) => (c, Stage::TrainEstimator),
        Command::Tune(c) => (c, Stage::Tune),
        Command::Evaluate(c) => (c, Stage::Evaluate),
        Command::Iterate(c) => (c, Stage::Iterate),
        Command::Analyze { out } => {
            println!("{}", analyze(out)?.display());
            return Ok(());
        }
        Command::RunAll(c) => {
            let last = match &c.stage {
                Some(s) => s.parse()?,
                None => Stage::Evaluate,
            };
            let mut pipeline = Pipeline::open(&c.config()?)?;
            pipeline.run_all(last, |s| eprintln!("[pirtune] {s}"))?;
            println!("{}", pipeline.root().display());
            return Ok(());
        }
    };
    stage_command(stage.0, stage.1)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
