use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scbm::estimate::{estimate_all, model_identifiability, DHat, Mode};
use scbm::gaussinfo::{ib_constraint_report, residual_map};
use scbm::harness::{
    generate, run_experiment, write_json, write_outputs, Experiment, ExperimentConfig, ExperimentReport, Manifest,
    Sweep,
};
use scbm::synth::{Dataset, Scbm};
use scbm::{Result, ScbmError};

#[derive(Parser)]
#[command(
    name = "scbm",
    version,
    about = "Structural causal bottleneck models: synthesis, estimation, experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Use the full-size network presets and training budgets.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Linear,
    Nonlinear,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a model and dataset.
    Gen(Common),
    /// Estimate all edges of a stored model's data and score them.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Directory holding model.json and data.csv (as written by gen).
        #[arg(long)]
        input: PathBuf,
    },
    Identifiability(Common),
    Misspec(Common),
    Transfer(Common),
    RankCollapse(Common),
    /// Check the bottleneck independence constraints of a linear model.
    IbCheck {
        #[command(flatten)]
        common: Common,
        /// Directory holding model.json; a model is sampled from the config
        /// when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load_config(common: &Common, experiment: Experiment) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ScbmError::io(path, e))?;
            let mut value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| ScbmError::Config(format!("{}: {e}", path.display())))?;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("experiment").or_insert_with(|| json!(experiment.name()));
            }
            serde_json::from_value(value).map_err(|e| ScbmError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::new(experiment, Mode::Linear),
    };
    if cfg.experiment != experiment {
        return Err(ScbmError::Config(format!(
            "config is for the {} experiment but the command runs {}",
            cfg.experiment.name(),
            experiment.name()
        )));
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(m) = common.mode {
        cfg.mode = match m {
            ModeArg::Linear => Mode::Linear,
            ModeArg::Nonlinear => Mode::Nonlinear,
        };
    }
    cfg.paper_scale |= common.paper_scale;
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("scbm-out").join(command))
}

fn print_summary(report: &ExperimentReport) {
    for a in &report.aggregates {
        let shown = match report.experiment {
            Experiment::Identifiability => a.edge == "mean",
            Experiment::RankCollapse => a.metric == "rank",
            Experiment::Transfer => a.metric != "regression_dim",
            Experiment::Misspecification => true,
        };
        if shown {
            println!(
                "{}={:<8} {:<16} {:<18} mean {:.6}  std {:.6}  ±{:.6}  (n={})",
                a.sweep_param, a.value, a.edge, a.metric, a.mean, a.std, a.half_width, a.count
            );
        }
    }
    for note in &report.notes {
        println!("note: {note}");
    }
}

fn run_named(command: &str, common: &Common, experiment: Experiment) -> Result<()> {
    let cfg = load_config(common, experiment)?;
    let report = run_experiment(&cfg)?;
    let dir = out_dir(&cfg, command);
    write_outputs(&dir, command, &cfg, &report)?;
    print_summary(&report);
    println!("wrote {}", dir.display());
    Ok(())
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.seeds
        .first()
        .copied()
        .ok_or_else(|| ScbmError::Config("seeds must not be empty".into()))
}

fn load_model(dir: &Path) -> Result<Scbm> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| ScbmError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn gen(common: &Common) -> Result<()> {
    let cfg = load_config(common, Experiment::Identifiability)?;
    let seed = first_seed(&cfg)?;
    let (model, data) = generate(&cfg, seed)?;
    let dir = out_dir(&cfg, "gen");
    write_json(&dir.join("model.json"), &model)?;
    data.save(&dir.join("data.csv"))?;
    Manifest::new("gen", &cfg, vec![seed], vec!["model.json".into(), "data.csv".into()]).write(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn estimate(common: &Common, input: &Path) -> Result<()> {
    let cfg = load_config(common, Experiment::Identifiability)?;
    let seed = first_seed(&cfg)?;
    let model = load_model(input)?;
    let data = Dataset::load(&input.join("data.csv"))?;
    let d_hat = match &cfg.d_hat {
        Some(Sweep::One(d)) => DHat::uniform(*d),
        Some(Sweep::Many(_)) => return Err(ScbmError::Config("estimate takes a single d_hat".into())),
        None => {
            let mut d = DHat::uniform(1);
            for (e, f) in model.edge_functions() {
                d.overrides.insert(e, f.d_z());
            }
            d
        }
    };
    let ecfg = cfg.estimator();
    let est = estimate_all(&data, model.dag(), &d_hat, &ecfg, seed)?;
    let score = model_identifiability(&model, &est, &data, &ecfg, seed)?;
    let dir = out_dir(&cfg, "estimate");
    write_json(&dir.join("estimate.json"), &est)?;
    write_json(&dir.join("scores.json"), &score)?;
    Manifest::new(
        "estimate",
        &cfg,
        vec![seed],
        vec!["estimate.json".into(), "scores.json".into()],
    )
    .write(&dir)?;
    for s in &score.per_edge {
        println!("edge {}: r2 {:.6}", s.edge, s.score);
    }
    println!("mean r2 {:.6}", score.mean);
    Ok(())
}

/// Returns whether any node was flagged.
fn ib_check(common: &Common, input: Option<&Path>) -> Result<bool> {
    let cfg = load_config(common, Experiment::Identifiability)?;
    let seed = first_seed(&cfg)?;
    let model = match input {
        Some(dir) => load_model(dir)?,
        None => generate(&cfg, seed)?.0,
    };
    let report = ib_constraint_report(&model)?;
    let dir = out_dir(&cfg, "ib-check");
    let doc = json!({
        "nodes": residual_map(&report),
        "flags": report.flags,
        "details": report,
    });
    write_json(&dir.join("ib_report.json"), &doc)?;
    Manifest::new("ib-check", &cfg, vec![seed], vec!["ib_report.json".into()]).write(&dir)?;
    for n in &report.nodes {
        println!("node {}: residual {:.3e}", n.node, n.residual);
    }
    for f in &report.flags {
        println!("flag: {f}");
    }
    Ok(!report.flags.is_empty())
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Gen(c) => gen(c)?,
        Command::Estimate { common, input } => estimate(common, input)?,
        Command::Identifiability(c) => run_named("identifiability", c, Experiment::Identifiability)?,
        Command::Misspec(c) => run_named("misspec", c, Experiment::Misspecification)?,
        Command::Transfer(c) => run_named("transfer", c, Experiment::Transfer)?,
        Command::RankCollapse(c) => run_named("rank-collapse", c, Experiment::RankCollapse)?,
        Command::IbCheck { common, input } => {
            if ib_check(common, input.as_deref())? {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(execute(std::env::args_os()))
}
