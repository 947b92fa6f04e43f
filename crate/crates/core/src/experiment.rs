//! Experiment configuration, metrics files and the top-level entry points
//! behind the command-line verbs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::costmodel::fmt_f64;
use crate::costmodel::{self, CostParams, CostTriple, Method, SweepAxis};
use crate::data::{gen_train_test, write_csv};
use crate::error::{Error, Result};
use crate::model::{build_model, split_model, ModelConfig, SplitSpec};
use crate::server::{run_training, AggregationMode, RoundReport, TrainingOutcome};
use crate::simnet::{LinkConfig, BYTES_PER_ELEMENT};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    #[default]
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    /// Dirichlet concentration; ignored for IID.
    pub concentration: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Dirichlet,
            concentration: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub class_separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_test: 1000,
            class_separation: 5.0,
        }
    }
}

/// Simulated compute speeds in parameter·samples per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeConfig {
    pub client_power: f64,
    pub server_power: f64,
    /// Share of one training pass spent in the forward direction.
    pub forward_fraction: f64,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        Self {
            client_power: 1.0e8,
            server_power: 1.0e10,
            forward_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub n_prompts: usize,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: u32,
    pub local_epochs: usize,
    /// Fraction of each local dataset removed before split training.
    pub prune_fraction: f64,
    pub prune_once: bool,
    pub prune_with_prompt: bool,
    pub aggregation: AggregationMode,
    pub lr_global: f64,
    pub lr_local: f64,
    pub batch_size: usize,
    pub partition: PartitionConfig,
    pub data: DataConfig,
    pub link: LinkConfig,
    pub compute: ComputeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            split: SplitSpec { cut1: 1, cut2: 3 },
            n_prompts: 4,
            n_clients: 50,
            clients_per_round: 5,
            rounds: 30,
            local_epochs: 10,
            prune_fraction: 0.5,
            prune_once: false,
            prune_with_prompt: false,
            aggregation: AggregationMode::Weighted,
            lr_global: 0.1,
            lr_local: 1e-4,
            batch_size: 128,
            partition: PartitionConfig::default(),
            data: DataConfig::default(),
            link: LinkConfig::default(),
            compute: ComputeConfig::default(),
        }
    }
}

fn finite_nonneg(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be finite and >= 0, got {v}"),
        ))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be finite and > 0, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate(self.model.n_layers)?;
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::invalid(
                "prune_fraction",
                format!("must lie in [0, 1), got {}", self.prune_fraction),
            ));
        }
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients", "must be positive"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(Error::invalid(
                "clients_per_round",
                format!(
                    "must lie in 1..={}, got {}",
                    self.n_clients, self.clients_per_round
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        finite_nonneg("lr_global", self.lr_global)?;
        finite_nonneg("lr_local", self.lr_local)?;
        if self.partition.kind == PartitionKind::Dirichlet {
            positive("partition.concentration", self.partition.concentration)?;
        }
        if self.data.n_train < self.n_clients {
            return Err(Error::invalid(
                "data.n_train",
                format!(
                    "{} samples cannot cover {} clients",
                    self.data.n_train, self.n_clients
                ),
            ));
        }
        if self.data.n_test == 0 {
            return Err(Error::invalid("data.n_test", "must be positive"));
        }
        finite_nonneg("data.class_separation", self.data.class_separation)?;
        self.link.validate()?;
        positive("compute.client_power", self.compute.client_power)?;
        positive("compute.server_power", self.compute.server_power)?;
        if !(0.0..=1.0).contains(&self.compute.forward_fraction) {
            return Err(Error::invalid(
                "compute.forward_fraction",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Analytic cost parameters matching this simulation, in bytes and
    /// parameter·samples per second.
    pub fn cost_params(&self) -> Result<CostParams> {
        self.validate()?;
        let params = build_model(&self.model, 0)?;
        let part = split_model(&self.model, &params, self.split)?;
        let (alpha, tau) = part.fractions();
        let d = self.model.d_model;
        Ok(CostParams {
            model_size: (self.model.param_count() as u64 * BYTES_PER_ELEMENT) as f64,
            dataset_size: self.data.n_train as f64 / self.n_clients as f64,
            clients: self.clients_per_round,
            local_epochs: self.local_epochs,
            head_fraction: alpha,
            body_fraction: tau,
            prune_fraction: self.prune_fraction,
            cut_layer_size: ((self.n_prompts + self.model.seq_len) * d) as f64
                * BYTES_PER_ELEMENT as f64,
            forward_fraction: self.compute.forward_fraction,
            client_power: self.compute.client_power * BYTES_PER_ELEMENT as f64,
            server_power: self.compute.server_power * BYTES_PER_ELEMENT as f64,
            rate: self.link.uplink_rate,
            prompt_size: (self.n_prompts * d) as f64 * BYTES_PER_ELEMENT as f64,
            include_prompt: true,
        })
    }
}

fn log_defaults(user: &Value, defaults: &Value, path: &str) {
    let (Value::Object(u), Value::Object(d)) = (user, defaults) else {
        return;
    };
    for (key, dv) in d {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match u.get(key) {
            None => info!("config: default {full} = {dv}"),
            Some(uv) => log_defaults(uv, dv, &full),
        }
    }
}

/// Parses a JSON config; missing fields take defaults, each one logged.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let value: Value = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let config: ExperimentConfig = serde_json::from_value(value.clone()).map_err(|e| {
        let (line, column) = locate(text, &e);
        Error::ConfigParse {
            line,
            column,
            message: e.to_string(),
        }
    })?;
    let defaults = serde_json::to_value(ExperimentConfig::default())?;
    log_defaults(&value, &defaults, "");
    config.validate()?;
    Ok(config)
}

// Errors from `from_value` carry no position; re-deserialize from text to get one.
fn locate(text: &str, fallback: &serde_json::Error) -> (usize, usize) {
    match serde_json::from_str::<ExperimentConfig>(text) {
        Err(e) if e.line() > 0 => (e.line(), e.column()),
        _ => (fallback.line(), fallback.column()),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_config(&text)
}

pub fn dump_config(config: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(config)?)
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

pub const ROUNDS_HEADER: [&str; 9] = [
    "round",
    "selected",
    "pruned_sizes",
    "mean_local_loss",
    "test_accuracy",
    "bytes_up",
    "bytes_down",
    "header_bytes",
    "latency_s",
];

pub fn write_rounds_csv<W: Write>(reports: &[RoundReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ROUNDS_HEADER)?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            join(&r.selected),
            join(&r.pruned_sizes),
            fmt_f64(r.mean_local_loss),
            fmt_f64(r.test_accuracy),
            r.bytes_up.to_string(),
            r.bytes_down.to_string(),
            r.header_bytes.to_string(),
            fmt_f64(r.latency_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(outcome: &TrainingOutcome, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rounds",
        "initial_accuracy",
        "final_accuracy",
        "total_bytes_up",
        "total_bytes_down",
        "total_header_bytes",
        "total_latency_s",
    ])?;
    let r = &outcome.reports;
    w.write_record([
        r.len().to_string(),
        fmt_f64(outcome.initial_accuracy),
        fmt_f64(outcome.final_accuracy),
        r.iter().map(|x| x.bytes_up).sum::<u64>().to_string(),
        r.iter().map(|x| x.bytes_down).sum::<u64>().to_string(),
        r.iter().map(|x| x.header_bytes).sum::<u64>().to_string(),
        fmt_f64(r.iter().map(|x| x.latency_s).sum::<f64>()),
    ])?;
    w.flush()?;
    Ok(())
}

/// `method, compute, comm, latency` for one parameter set.
pub fn write_costs_csv<W: Write>(rows: &[(Method, CostTriple)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "compute", "comm", "latency"])?;
    for (m, c) in rows {
        w.write_record([
            m.label().to_string(),
            fmt_f64(c.compute_per_client),
            fmt_f64(c.comm_total),
            fmt_f64(c.latency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cost_rows(params: &CostParams) -> Result<Vec<(Method, CostTriple)>> {
    Ok(vec![
        (Method::Fl, costmodel::fl_costs(params)?),
        (Method::Sfl, costmodel::sfl_costs(params)?),
        (Method::SfPrompt, costmodel::sfprompt_costs(params)?),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub rounds_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub costs_csv: PathBuf,
    pub checkpoint: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::from(e).context(format!("creating {}", path.display())))
}

/// Trains, then writes rounds.csv, summary.csv, costs.csv and model.ckpt into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<(TrainingOutcome, RunArtifacts)> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let outcome = run_training(config)?;
    let artifacts = RunArtifacts {
        rounds_csv: out_dir.join("rounds.csv"),
        summary_csv: out_dir.join("summary.csv"),
        costs_csv: out_dir.join("costs.csv"),
        checkpoint: out_dir.join("model.ckpt"),
    };
    write_rounds_csv(&outcome.reports, create(&artifacts.rounds_csv)?)?;
    write_summary_csv(&outcome, create(&artifacts.summary_csv)?)?;
    write_costs_csv(
        &cost_rows(&config.cost_params()?)?,
        create(&artifacts.costs_csv)?,
    )?;
    checkpoint::write(
        &artifacts.checkpoint,
        &config.model,
        &outcome.final_params()?,
        &outcome.prompt,
    )?;
    Ok((outcome, artifacts))
}

/// Sweeps `axis` over `values` and writes the table to `out`.
pub fn compare_costs(
    params: &CostParams,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
) -> Result<usize> {
    let rows = costmodel::cost_sweep(params, axis, values)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    costmodel::write_sweep_csv(&rows, create(out)?)?;
    Ok(rows.len())
}

/// Writes the config's train and test sets as train.csv and test.csv.
pub fn gen_data(config: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (train, test) = gen_train_test(
        config.data.n_train,
        config.data.n_test,
        &config.model,
        config.data.class_separation,
        config.seed,
    )?;
    let (a, b) = (out_dir.join("train.csv"), out_dir.join("test.csv"));
    write_csv(&train, create(&a)?)?;
    write_csv(&test, create(&b)?)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(
            (c.n_clients, c.clients_per_round, c.local_epochs),
            (50, 5, 10)
        );
        assert_eq!((c.lr_global, c.lr_local, c.batch_size), (0.1, 1e-4, 128));
        assert_eq!(c.partition.kind, PartitionKind::Dirichlet);
        assert_eq!(c.partition.concentration, 0.1);
        assert_eq!(parse_config("  {}\n").unwrap(), c);
    }

    #[test]
    fn bad_prune_fraction_names_field() {
        match parse_config(r#"{"prune_fraction": 1.5}"#) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "prune_fraction"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse_config("{\n  \"rounds\": 3,\n  \"seed\": ,\n}") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("{\n\n  \"bogus\": 1\n}") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dump_round_trips() {
        let mut c = ExperimentConfig {
            rounds: 4,
            aggregation: AggregationMode::Uniform,
            lr_local: 0.3,
            ..Default::default()
        };
        c.partition.kind = PartitionKind::Iid;
        let back = parse_config(&dump_config(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn cost_params_are_valid() {
        let p = ExperimentConfig::default().cost_params().unwrap();
        p.validate().unwrap();
        assert_eq!(
            p.model_size,
            (ModelConfig::default().param_count() * 8) as f64
        );
        assert_eq!(p.cut_layer_size, (12 * 16 * 8) as f64);
    }

    #[test]
    fn zero_rounds_csv_is_header_only() {
        let mut buf = Vec::new();
        write_rounds_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}
