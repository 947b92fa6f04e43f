use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use sfprompt_core::costmodel::{presets, CostParams, SweepAxis};
use sfprompt_core::experiment::{self, ExperimentConfig};
use sfprompt_core::Error;

#[derive(Parser)]
#[command(
    name = "sfprompt",
    version,
    about = "Split-federated prompt tuning simulator and cost model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write rounds.csv, summary.csv, costs.csv and model.ckpt
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep the analytic FL / SFL / SFPrompt costs along one axis
    CompareCosts {
        #[command(flatten)]
        common: Common,
        /// vit-base or vit-large; ignored when --config is given
        #[arg(long, default_value = "vit-base")]
        preset: String,
        /// local_epochs | model_size | prune | rounds
        #[arg(long, default_value = "rounds")]
        axis: String,
        /// Comma-separated sweep points
        #[arg(long, value_delimiter = ',', conflicts_with = "range")]
        values: Vec<f64>,
        /// start:stop:step, stop inclusive
        #[arg(long)]
        range: Option<String>,
        /// Count the prompt in SFPrompt traffic
        #[arg(long)]
        include_prompt: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Load and validate a config, then print it with defaults filled in
    ValidateConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured synthetic train and test sets as CSV
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> sfprompt_core::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => experiment::load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn parse_range(spec: &str) -> sfprompt_core::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidConfig {
        field: "range".into(),
        reason: format!("expected start:stop:step, got `{spec}`"),
    };
    let [start, stop, step] = parts.as_slice() else {
        return Err(bad());
    };
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let (start, stop, step) = (parse(start)?, parse(stop)?, parse(step)?);
    if step.is_nan() || step <= 0.0 || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn sweep_params(
    common: &Common,
    preset: &str,
    include_prompt: bool,
) -> sfprompt_core::Result<CostParams> {
    let mut params = match &common.config {
        Some(_) => load(common)?.cost_params()?,
        None => presets::by_name(preset).ok_or_else(|| Error::InvalidConfig {
            field: "preset".into(),
            reason: format!("unknown preset `{preset}` (vit-base | vit-large)"),
        })?,
    };
    params.include_prompt |= include_prompt;
    Ok(params)
}

fn execute(command: Command) -> sfprompt_core::Result<()> {
    match command {
        Command::Run { common, out } => {
            let config = load(&common)?;
            let (outcome, files) = experiment::run(&config, &out)?;
            println!(
                "final accuracy {:.4} (initial {:.4}) after {} rounds; wrote {}",
                outcome.final_accuracy,
                outcome.initial_accuracy,
                outcome.reports.len(),
                files
                    .rounds_csv
                    .parent()
                    .unwrap_or(Path::new("."))
                    .display()
            );
        }
        Command::CompareCosts {
            common,
            preset,
            axis,
            values,
            range,
            include_prompt,
            out,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let values = match range {
                Some(r) => parse_range(&r)?,
                None => values,
            };
            let params = sweep_params(&common, &preset, include_prompt)?;
            let path = out.join(format!("sweep_{}.csv", axis_name(axis)));
            let rows = experiment::compare_costs(&params, axis, &values, &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::ValidateConfig { common } => {
            let config = load(&common)?;
            info!("config is valid");
            println!("{}", experiment::dump_config(&config)?);
        }
        Command::GenData { common, out } => {
            let config = load(&common)?;
            let (train, test) = experiment::gen_data(&config, &out)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
    }
    Ok(())
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::LocalEpochs => "local_epochs",
        SweepAxis::ModelSize => "model_size",
        SweepAxis::Prune => "prune",
        SweepAxis::Rounds => "rounds",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.root() {
                Error::InvalidConfig { .. } | Error::ConfigParse { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
