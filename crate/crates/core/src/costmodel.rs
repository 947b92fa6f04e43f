//! Closed-form per-round costs of FL, SFL and SFPrompt.
//!
//! The calculator is unit-agnostic: sizes, rates and powers must be given in
//! consistent units by the caller (for example MB, MB/s and MB·sample/s).
//!
//! `prune_fraction` is the fraction of local samples *removed* before split
//! training. The formulas scale traffic by the *retained* fraction
//! `1 − prune_fraction`, available as [`CostParams::retained`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// |W|
    pub model_size: f64,
    /// |D|, samples per client
    pub dataset_size: f64,
    /// K
    pub clients: usize,
    /// U
    pub local_epochs: usize,
    /// α = |W_h| / |W|
    pub head_fraction: f64,
    /// τ = |W_b| / |W|
    pub body_fraction: f64,
    /// γ, fraction of samples pruned away
    pub prune_fraction: f64,
    /// q, cut-layer size per sample
    pub cut_layer_size: f64,
    /// β, forward share of one training pass
    pub forward_fraction: f64,
    /// P_C
    pub client_power: f64,
    /// P_S
    pub server_power: f64,
    /// R
    pub rate: f64,
    /// p, prompt size
    pub prompt_size: f64,
    /// Adds the prompt's download and upload (`2·p·K`) to SFPrompt traffic.
    #[serde(default)]
    pub include_prompt: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        presets::vit_base()
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cost.model_size", self.model_size),
            ("cost.client_power", self.client_power),
            ("cost.server_power", self.server_power),
            ("cost.rate", self.rate),
        ];
        for (field, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(field, "must be finite and > 0"));
            }
        }
        let nonneg = [
            ("cost.dataset_size", self.dataset_size),
            ("cost.cut_layer_size", self.cut_layer_size),
            ("cost.prompt_size", self.prompt_size),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(field, "must be finite and >= 0"));
            }
        }
        let unit = [
            ("cost.head_fraction", self.head_fraction),
            ("cost.body_fraction", self.body_fraction),
            ("cost.prune_fraction", self.prune_fraction),
            ("cost.forward_fraction", self.forward_fraction),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    field,
                    format!("must lie in [0, 1], got {v}"),
                ));
            }
        }
        if self.head_fraction + self.body_fraction >= 1.0 {
            return Err(Error::invalid(
                "cost.body_fraction",
                "head_fraction + body_fraction must be < 1 (the tail holds the classifier)",
            ));
        }
        if self.clients == 0 {
            return Err(Error::invalid("cost.clients", "must be positive"));
        }
        Ok(())
    }

    pub fn retained(&self) -> f64 {
        1.0 - self.prune_fraction
    }

    pub fn with_retained(mut self, retained: f64) -> Self {
        self.prune_fraction = 1.0 - retained;
        self
    }

    fn tail_fraction(&self) -> f64 {
        1.0 - self.head_fraction - self.body_fraction
    }

    fn prompt_traffic(&self) -> f64 {
        if self.include_prompt {
            2.0 * self.prompt_size * self.clients as f64
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTriple {
    pub compute_per_client: f64,
    pub comm_total: f64,
    pub latency: f64,
}

impl CostTriple {
    fn scaled(self, by: f64) -> Self {
        Self {
            compute_per_client: self.compute_per_client * by,
            comm_total: self.comm_total * by,
            latency: self.latency * by,
        }
    }
}

pub fn fl_costs(p: &CostParams) -> Result<CostTriple> {
    p.validate()?;
    let (w, d, k, u) = (
        p.model_size,
        p.dataset_size,
        p.clients as f64,
        p.local_epochs as f64,
    );
    let comm = 2.0 * w * k;
    Ok(CostTriple {
        compute_per_client: d * w,
        comm_total: comm,
        latency: comm / p.rate + d * w * u / p.client_power,
    })
}

pub fn sfl_costs(p: &CostParams) -> Result<CostTriple> {
    p.validate()?;
    let (w, d, k, u) = (
        p.model_size,
        p.dataset_size,
        p.clients as f64,
        p.local_epochs as f64,
    );
    let (tau, q) = (p.body_fraction, p.cut_layer_size);
    let comm = (4.0 * q * d + 2.0 * p.tail_fraction() * w) * k;
    Ok(CostTriple {
        compute_per_client: (1.0 - tau) * d * w,
        comm_total: comm,
        latency: comm / p.rate
            + (1.0 - tau) * d * w * u / p.client_power
            + tau * d * w * k * u / p.server_power,
    })
}

/// SFL where smashed data and gradients cross the cut once per local epoch,
/// so the `4q|D|` traffic term is multiplied by U. Equal to [`sfl_costs`] at U = 1.
pub fn sfl_costs_per_epoch_exchange(p: &CostParams) -> Result<CostTriple> {
    let base = sfl_costs(p)?;
    let (w, d, k, u) = (
        p.model_size,
        p.dataset_size,
        p.clients as f64,
        p.local_epochs as f64,
    );
    let comm = (4.0 * p.cut_layer_size * d * u + 2.0 * p.tail_fraction() * w) * k;
    Ok(CostTriple {
        comm_total: comm,
        latency: base.latency - base.comm_total / p.rate + comm / p.rate,
        ..base
    })
}

pub fn sfprompt_costs(p: &CostParams) -> Result<CostTriple> {
    p.validate()?;
    let (w, d, k, u) = (
        p.model_size,
        p.dataset_size,
        p.clients as f64,
        p.local_epochs as f64,
    );
    let (alpha, tau, beta, q) = (
        p.head_fraction,
        p.body_fraction,
        p.forward_fraction,
        p.cut_layer_size,
    );
    let g = p.retained();
    let t = p.tail_fraction();
    let extra = p.prompt_traffic();
    let comm = (4.0 * q * g * d + 2.0 * t * w) * k + extra;

    let transfer = ((2.0 * q * g * d + 2.0 * t * w) * k + extra) / p.rate;
    let head_forward = alpha * beta * g * d * w / p.client_power;
    let client_pipeline = (1.0 - tau) * (1.0 - beta) * g * d * w * u / p.client_power;
    let server_pipeline = tau * g * d * w * k / p.server_power
        + t * (1.0 - beta) * g * d * w / p.client_power
        + 2.0 * q * g * d / p.rate;
    Ok(CostTriple {
        compute_per_client: (1.0 - tau) * g * d * w,
        comm_total: comm,
        latency: transfer + head_forward + client_pipeline.max(server_pipeline),
    })
}

/// Model size at which FL and SFPrompt per-round traffic are equal:
/// `2·q·retained·|D| / (α + τ)`, plus `p / (α + τ)` when prompt traffic is counted.
pub fn crossover_model_size(p: &CostParams) -> Result<f64> {
    let sum = p.head_fraction + p.body_fraction;
    if !(sum > 0.0) {
        return Err(Error::invalid(
            "cost.head_fraction",
            "head_fraction + body_fraction must be > 0 for a crossover to exist",
        ));
    }
    p.validate()?;
    let prompt = if p.include_prompt { p.prompt_size } else { 0.0 };
    Ok((2.0 * p.cut_layer_size * p.retained() * p.dataset_size + prompt) / sum)
}

/// Local epoch count at which per-epoch-exchange SFL traffic equals FL's:
/// `2(α + τ)|W| / (4q|D|)`. `None` when SFL never carries smashed traffic.
pub fn sfl_epoch_crossover(p: &CostParams) -> Result<Option<f64>> {
    p.validate()?;
    let per_epoch = 4.0 * p.cut_layer_size * p.dataset_size;
    Ok((per_epoch > 0.0)
        .then(|| 2.0 * (p.head_fraction + p.body_fraction) * p.model_size / per_epoch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FL")]
    Fl,
    #[serde(rename = "SFL")]
    Sfl,
    #[serde(rename = "SFPrompt")]
    SfPrompt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fl, Method::Sfl, Method::SfPrompt];

    pub fn label(self) -> &'static str {
        match self {
            Method::Fl => "FL",
            Method::Sfl => "SFL",
            Method::SfPrompt => "SFPrompt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LocalEpochs,
    ModelSize,
    Prune,
    Rounds,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local_epochs" | "epochs" => Ok(SweepAxis::LocalEpochs),
            "model_size" => Ok(SweepAxis::ModelSize),
            "prune" | "prune_fraction" => Ok(SweepAxis::Prune),
            "rounds" => Ok(SweepAxis::Rounds),
            other => Err(Error::invalid(
                "axis",
                format!(
                    "unknown sweep axis `{other}` (local_epochs | model_size | prune | rounds)"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub axis_value: f64,
    pub costs: CostTriple,
}

/// Evaluates all three methods at every point of `values` along `axis`.
///
/// On the local-epochs axis SFL exchanges smashed data every epoch (see
/// [`sfl_costs_per_epoch_exchange`]). On the rounds axis each triple is the
/// per-round cost multiplied by the round count.
pub fn cost_sweep(params: &CostParams, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("values", "sweep range is empty"));
    }
    let mut rows = Vec::with_capacity(values.len() * 3);
    for &v in values {
        let mut p = *params;
        let mut rounds = 1.0;
        match axis {
            SweepAxis::LocalEpochs => {
                if !(v >= 0.0) || v.fract() != 0.0 {
                    return Err(Error::invalid(
                        "values",
                        format!("local epochs must be whole, got {v}"),
                    ));
                }
                p.local_epochs = v as usize;
            }
            SweepAxis::ModelSize => p.model_size = v,
            SweepAxis::Prune => p.prune_fraction = v,
            SweepAxis::Rounds => {
                if !(v >= 0.0) {
                    return Err(Error::invalid(
                        "values",
                        format!("rounds must be >= 0, got {v}"),
                    ));
                }
                rounds = v;
            }
        }
        let sfl = if axis == SweepAxis::LocalEpochs {
            sfl_costs_per_epoch_exchange(&p)?
        } else {
            sfl_costs(&p)?
        };
        for (method, costs) in [
            (Method::Fl, fl_costs(&p)?),
            (Method::Sfl, sfl),
            (Method::SfPrompt, sfprompt_costs(&p)?),
        ] {
            rows.push(SweepRow {
                method,
                axis_value: v,
                costs: costs.scaled(rounds),
            });
        }
    }
    Ok(rows)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `method, axis_value, compute, comm, latency`
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "axis_value", "compute", "comm", "latency"])?;
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            fmt_f64(r.axis_value),
            fmt_f64(r.costs.compute_per_client),
            fmt_f64(r.costs.comm_total),
            fmt_f64(r.costs.latency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parameter presets in MB (sizes), MB/s (rate) and MB·sample/s (compute power).
pub mod presets {
    use super::CostParams;

    fn vit(model_mb: f64, head_fraction: f64, body_fraction: f64, cut_mb: f64) -> CostParams {
        CostParams {
            model_size: model_mb,
            dataset_size: 1000.0,
            clients: 5,
            local_epochs: 10,
            head_fraction,
            body_fraction,
            prune_fraction: 0.5,
            cut_layer_size: cut_mb,
            forward_fraction: 1.0 / 3.0,
            client_power: 1.0e3,
            server_power: 1.0e5,
            rate: 12.5,
            prompt_size: 0.05,
            include_prompt: false,
        }
    }

    /// ViT-Base, 391 MB, 197 tokens × 768 width at the cut.
    pub fn vit_base() -> CostParams {
        vit(391.0, 0.09, 0.9, 197.0 * 768.0 * 4.0 / 1.0e6)
    }

    /// ViT-Large, 1243 MB, 197 tokens × 1024 width at the cut.
    pub fn vit_large() -> CostParams {
        vit(1243.0, 0.045, 0.95, 197.0 * 1024.0 * 4.0 / 1.0e6)
    }

    pub fn by_name(name: &str) -> Option<CostParams> {
        match name {
            "vit-base" | "vit_base" => Some(vit_base()),
            "vit-large" | "vit_large" => Some(vit_large()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CostParams {
        CostParams {
            model_size: 100.0,
            dataset_size: 1000.0,
            clients: 5,
            local_epochs: 2,
            head_fraction: 0.1,
            body_fraction: 0.8,
            prune_fraction: 0.0,
            cut_layer_size: 0.1,
            forward_fraction: 0.3,
            client_power: 10.0,
            server_power: 1000.0,
            rate: 50.0,
            prompt_size: 0.0,
            include_prompt: false,
        }
    }

    #[test]
    fn fl_preset_rows() {
        let mut p = presets::vit_base();
        assert_eq!(fl_costs(&p).unwrap().comm_total, 3910.0);
        p.model_size = 1243.0;
        assert_eq!(fl_costs(&p).unwrap().comm_total, 12430.0);
        assert_eq!(fl_costs(&presets::vit_large()).unwrap().comm_total, 12430.0);
    }

    #[test]
    fn fl_latency_without_epochs_is_transfer_only() {
        let mut p = params();
        p.local_epochs = 0;
        let c = fl_costs(&p).unwrap();
        assert_eq!(c.latency, 2.0 * 100.0 * 5.0 / 50.0);
    }

    #[test]
    fn sfl_substitutions() {
        let c = sfl_costs(&params()).unwrap();
        assert!((c.comm_total - 2100.0).abs() < 1e-9);
        let mut p = params();
        p.body_fraction = 0.9;
        p.head_fraction = 0.0;
        p.dataset_size = 100.0;
        p.model_size = 10.0;
        assert!((sfl_costs(&p).unwrap().compute_per_client - 100.0).abs() < 1e-9);
        p.body_fraction = 1.0;
        assert!(sfl_costs(&p).is_err());
    }

    #[test]
    fn sfl_latency_matches_hand_evaluation() {
        let p = params();
        // 2100/50 + 0.2*1000*100*2/10 + 0.8*1000*100*5*2/1000
        let expected = 42.0 + 4000.0 + 800.0;
        assert!((sfl_costs(&p).unwrap().latency - expected).abs() < 1e-9);
    }

    #[test]
    fn sfprompt_reduces_to_sfl_at_full_retention() {
        let p = params().with_retained(1.0);
        assert_eq!(
            sfprompt_costs(&p).unwrap().comm_total,
            sfl_costs(&p).unwrap().comm_total
        );
        let half = params().with_retained(0.5);
        let full = sfprompt_costs(&p).unwrap().comm_total;
        let tail = 2.0 * (1.0 - 0.1 - 0.8) * 100.0 * 5.0;
        assert!(
            (sfprompt_costs(&half).unwrap().comm_total - (tail + (full - tail) / 2.0)).abs() < 1e-9
        );
    }

    #[test]
    fn sfprompt_never_exceeds_sfl() {
        for i in 0..=20 {
            let p = params().with_retained(i as f64 / 20.0);
            assert!(
                sfprompt_costs(&p).unwrap().comm_total <= sfl_costs(&p).unwrap().comm_total + 1e-12
            );
        }
    }

    #[test]
    fn sfprompt_latency_swaps_with_powers() {
        // hand evaluation of the latency row for three parameter sets, then with P_C and P_S swapped
        let cases = [
            (params().with_retained(0.5), 10.0, 1000.0),
            (params().with_retained(1.0), 100.0, 200.0),
            (params().with_retained(0.2), 5.0, 5.0e4),
        ];
        for (base, pc, ps) in cases {
            for (pc, ps) in [(pc, ps), (ps, pc)] {
                let mut p = base;
                p.client_power = pc;
                p.server_power = ps;
                let (w, d, k, u) = (100.0, 1000.0, 5.0, 2.0);
                let (a, t, b, q, g) = (0.1, 0.8, 0.3, 0.1, p.retained());
                let expected = (2.0 * q * g * d + 2.0 * (1.0 - a - t) * w) * k / 50.0
                    + a * b * g * d * w / pc
                    + f64::max(
                        (1.0 - t) * (1.0 - b) * g * d * w * u / pc,
                        t * g * d * w * k / ps
                            + (1.0 - a - t) * (1.0 - b) * g * d * w / pc
                            + 2.0 * q * g * d / 50.0,
                    );
                let got = sfprompt_costs(&p).unwrap().latency;
                assert!(
                    (got - expected).abs() <= 1e-9 * expected,
                    "{got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn crossover_examples() {
        let mut p = params().with_retained(0.0);
        assert_eq!(crossover_model_size(&p).unwrap(), 0.0);
        p = params();
        p.cut_layer_size = 1.0;
        p.dataset_size = 100.0;
        p.head_fraction = 0.25;
        p.body_fraction = 0.25;
        assert!((crossover_model_size(&p).unwrap() - 400.0).abs() < 1e-12);
        p.head_fraction = 0.0;
        p.body_fraction = 0.0;
        assert!(crossover_model_size(&p).is_err());
    }

    #[test]
    fn crossover_sign_flip() {
        let p = params().with_retained(0.4);
        let w_star = crossover_model_size(&p).unwrap();
        for (delta, sign) in [(-1e-3, -1.0), (1e-3, 1.0)] {
            let mut q = p;
            q.model_size = w_star * (1.0 + delta);
            let diff = fl_costs(&q).unwrap().comm_total - sfprompt_costs(&q).unwrap().comm_total;
            assert_eq!(diff.signum(), sign);
        }
    }

    #[test]
    fn prompt_toggle_shifts_crossover() {
        let mut p = params().with_retained(0.5);
        p.prompt_size = 3.0;
        p.include_prompt = true;
        let mut q = p;
        q.model_size = crossover_model_size(&p).unwrap();
        let fl = fl_costs(&q).unwrap().comm_total;
        let sfp = sfprompt_costs(&q).unwrap().comm_total;
        assert!((fl - sfp).abs() <= 1e-9 * fl);
    }

    #[test]
    fn comm_linear_in_clients() {
        let p1 = params();
        let mut p3 = p1;
        p3.clients = 15;
        for f in [fl_costs, sfl_costs, sfprompt_costs] {
            let (a, b) = (f(&p1).unwrap().comm_total, f(&p3).unwrap().comm_total);
            assert!((b - 3.0 * a).abs() < 1e-9 * b);
        }
    }

    #[test]
    fn sweep_rows_and_rounds() {
        let p = params();
        let rows = cost_sweep(&p, SweepAxis::Rounds, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rows.len(), 12);
        let fl: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == Method::Fl)
            .map(|r| r.costs.comm_total)
            .collect();
        for (i, c) in fl.iter().enumerate() {
            assert_eq!(*c, 2.0 * 100.0 * 5.0 * (i + 1) as f64);
        }
        assert_eq!(cost_sweep(&p, SweepAxis::Prune, &[0.5]).unwrap().len(), 3);
        assert!(cost_sweep(&p, SweepAxis::ModelSize, &[]).is_err());
    }

    #[test]
    fn epoch_sweep_has_sfl_crossing() {
        // per-epoch smashed traffic (4q|D| ≈ 242 MB) well under 2(α+τ)|W| ≈ 774 MB
        let p = CostParams {
            dataset_size: 100.0,
            ..presets::vit_base()
        };
        let u_star = sfl_epoch_crossover(&p).unwrap().unwrap();
        let values: Vec<f64> = (1..=40).map(f64::from).collect();
        let rows = cost_sweep(&p, SweepAxis::LocalEpochs, &values).unwrap();
        let diffs: Vec<f64> = values
            .iter()
            .map(|&u| {
                let get = |m| {
                    rows.iter()
                        .find(|r| r.method == m && r.axis_value == u)
                        .unwrap()
                        .costs
                        .comm_total
                };
                get(Method::Sfl) - get(Method::Fl)
            })
            .collect();
        assert!(diffs[0] < 0.0, "SFL should start below FL for one epoch");
        let changes = diffs
            .windows(2)
            .filter(|w| w[0].signum() != w[1].signum())
            .count();
        assert_eq!(changes, 1);
        assert!(u_star > 1.0 && u_star < 40.0);
    }

    #[test]
    fn sweep_csv_header() {
        let rows = cost_sweep(&params(), SweepAxis::ModelSize, &[10.0]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,axis_value,compute,comm,latency"
        );
        assert!(lines
            .next()
            .unwrap()
            .starts_with("FL,1.0000000000000000e1,"));
    }

    #[test]
    fn validation_errors_name_fields() {
        let mut p = params();
        p.prune_fraction = 1.5;
        match fl_costs(&p) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "cost.prune_fraction"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
