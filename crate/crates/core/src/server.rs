//! Server side: client selection, the frozen body service, aggregation, and
//! the round loop that drives clients through the simulated network.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::client::{model_bytes, ClientState, GradMsg, SmashedMsg, Upload};
use crate::data::{gen_train_test, partition_dirichlet, partition_iid, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, PartitionKind};
use crate::model::{
    body_forward, build_model, split_forward, Forward, ModelConfig, ModelPartition, PromptParams,
    Segment,
};
use crate::seed::{stream_rng, tags};
use crate::simnet::{Actor, MessageKind, Network, BYTES_PER_ELEMENT};
use crate::tensor::{ParamSet, Tensor};

/// `k` distinct ids from `0..n`, ascending; uniform and deterministic per `(seed, round)`.
pub fn select_clients(n: usize, k: usize, round: u32, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::invalid(
            "clients_per_round",
            format!("must lie in 1..={n}, got {k}"),
        ));
    }
    let mut rng = stream_rng(seed, &[tags::SELECTION, round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `n_k / N` weights.
    #[default]
    Weighted,
    /// `1 / K` weights.
    Uniform,
}

/// Weighted mean of the uploaded tails and prompts.
///
/// Uploads are combined in client-id order as `v₀ + Σ wₖ (vₖ − v₀)`, so the
/// result does not depend on input order and identical uploads come back
/// bit-exact.
pub fn aggregate(uploads: &[Upload], mode: AggregationMode) -> Result<(ParamSet, PromptParams)> {
    let Some(first) = uploads.first() else {
        return Err(Error::Protocol(
            "aggregate needs at least one upload".into(),
        ));
    };
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if let Some(w) = order.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol(format!(
            "duplicate upload from client {}",
            w[0].client_id
        )));
    }
    for u in &order {
        if u.prompt.n_prompts() != first.prompt.n_prompts()
            || u.prompt.d_model() != first.prompt.d_model()
        {
            return Err(Error::InvalidShape(format!(
                "client {} prompt shape differs from client {}",
                u.client_id, first.client_id
            )));
        }
        if u.tail.len() != first.tail.len() {
            return Err(Error::InvalidShape(format!(
                "client {} uploaded {} tail tensors, expected {}",
                u.client_id,
                u.tail.len(),
                first.tail.len()
            )));
        }
        for ((na, pa), (nb, pb)) in u.tail.iter().zip(first.tail.iter()) {
            if na != nb || pa.value.shape() != pb.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "aggregate",
                    expected: pb.value.shape().to_vec(),
                    found: pa.value.shape().to_vec(),
                });
            }
        }
    }
    let weights: Vec<f64> = match mode {
        AggregationMode::Uniform => vec![1.0 / order.len() as f64; order.len()],
        AggregationMode::Weighted => {
            let total: usize = order.iter().map(|u| u.n_samples).sum();
            if total == 0 {
                return Err(Error::EmptyDataset);
            }
            order
                .iter()
                .map(|u| u.n_samples as f64 / total as f64)
                .collect()
        }
    };
    let combine = |base: &[f64], pick: &dyn Fn(&Upload) -> &[f64]| -> Vec<f64> {
        let mut out = base.to_vec();
        for (u, &w) in order.iter().zip(&weights).skip(1) {
            for ((o, &v), &b) in out.iter_mut().zip(pick(u)).zip(base) {
                *o += w * (v - b);
            }
        }
        out
    };

    let reference = order[0];
    let mut tail = ParamSet::new();
    for (name, p) in reference.tail.iter() {
        let mixed = combine(p.value.data(), &|u: &Upload| {
            u.tail.tensor(name).expect("checked above").data()
        });
        tail.insert(
            name,
            Tensor::new(p.value.shape().to_vec(), mixed)?,
            p.frozen,
        )?;
    }
    let prompt_values = combine(reference.prompt.values(), &|u: &Upload| u.prompt.values());
    let prompt = PromptParams::new(
        reference.prompt.n_prompts(),
        reference.prompt.d_model(),
        prompt_values,
    )?;
    Ok((tail, prompt))
}

/// The frozen body plus the cut-layer tapes of batches in flight.
#[derive(Debug)]
pub struct ServerState {
    config: ModelConfig,
    body: Segment,
    in_flight: BTreeMap<(usize, usize), Forward>,
}

impl ServerState {
    pub fn new(config: ModelConfig, body: Segment) -> Self {
        Self {
            config,
            body,
            in_flight: BTreeMap::new(),
        }
    }

    pub fn body(&self) -> &Segment {
        &self.body
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }

    /// Body forward on the client's smashed data; the tape is kept under
    /// `(client, batch)` for the matching backward.
    pub fn server_forward(&mut self, msg: &SmashedMsg) -> Result<SmashedMsg> {
        let key = (msg.client_id, msg.batch_id);
        if self.in_flight.contains_key(&key) {
            return Err(Error::Protocol(format!(
                "client {} batch {} already in flight",
                msg.client_id, msg.batch_id
            )));
        }
        let fwd = body_forward(&self.config, &self.body, &msg.activations)?;
        let out = SmashedMsg::new(msg.client_id, msg.round, msg.batch_id, fwd.value().clone());
        self.in_flight.insert(key, fwd);
        Ok(out)
    }

    /// Backprop through the frozen body; consumes the stored tape.
    pub fn server_backward(&mut self, msg: &GradMsg) -> Result<GradMsg> {
        let key = (msg.client_id, msg.batch_id);
        let mut fwd = self.in_flight.remove(&key).ok_or_else(|| {
            Error::Protocol(format!(
                "no batch {} in flight for client {}",
                msg.batch_id, msg.client_id
            ))
        })?;
        let grads = fwd.backward(&msg.gradients)?;
        if let Some(name) = grads.params.keys().next() {
            return Err(Error::FrozenGradient(name.clone()));
        }
        let input = grads
            .input
            .ok_or_else(|| Error::Protocol("body tape produced no input gradient".into()))?;
        Ok(GradMsg::new(msg.client_id, msg.round, msg.batch_id, input))
    }
}

const EVAL_BATCH: usize = 256;

/// Argmax accuracy of head → body → tail with `prompt`; ties go to the lowest class.
pub fn evaluate(partition: &ModelPartition, prompt: &PromptParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset.context("evaluate"));
    }
    let c = partition.config.n_classes;
    let all: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = test.batch(chunk)?;
        let logits = split_forward(partition, prompt, &x)?;
        for (row, &label) in logits.data().chunks(c).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub selected: Vec<usize>,
    pub pruned_sizes: Vec<usize>,
    /// Mean over selected clients of their last local-loss epoch; NaN when U = 0.
    pub mean_local_loss: f64,
    pub test_accuracy: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub header_bytes: u64,
    pub latency_s: f64,
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub partition: ModelPartition,
    pub prompt: PromptParams,
    pub reports: Vec<RoundReport>,
    pub initial_params: ParamSet,
    pub initial_prompt: PromptParams,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub network: Network,
}

impl TrainingOutcome {
    /// Full parameter set `[head, body, tail]` of the final model.
    pub fn final_params(&self) -> Result<ParamSet> {
        self.partition.recompose()
    }
}

/// Everything a run needs besides the config: datasets and the initial model.
#[derive(Debug, Clone)]
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    pub client_indices: Vec<Vec<usize>>,
    pub params: ParamSet,
    pub prompt: PromptParams,
}

impl Setup {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = gen_train_test(
            config.data.n_train,
            config.data.n_test,
            &config.model,
            config.data.class_separation,
            config.seed,
        )?;
        let plan = match config.partition.kind {
            PartitionKind::Iid => partition_iid(&train, config.n_clients, config.seed)?,
            PartitionKind::Dirichlet => partition_dirichlet(
                &train,
                config.n_clients,
                config.partition.concentration,
                config.seed,
            )?,
        };
        let params = build_model(&config.model, config.seed)?;
        let prompt = PromptParams::init(config.n_prompts, config.model.d_model, config.seed);
        Ok(Self {
            train,
            test,
            client_indices: plan.clients,
            params,
            prompt,
        })
    }
}

pub fn run_training(config: &ExperimentConfig) -> Result<TrainingOutcome> {
    let setup = Setup::from_config(config)?;
    run_with_setup(config, setup)
}

fn in_round<T>(r: Result<T>, round: u32, client: usize) -> Result<T> {
    r.map_err(|e| e.context(format!("round {round}, client {client}")))
}

/// Round loop over a prepared setup.
pub fn run_with_setup(config: &ExperimentConfig, setup: Setup) -> Result<TrainingOutcome> {
    config.validate()?;
    let mc = config.model;
    let Setup {
        train,
        test,
        client_indices,
        params,
        prompt,
    } = setup;
    if client_indices.len() != config.n_clients {
        return Err(Error::invalid(
            "n_clients",
            format!(
                "partition has {} clients, config {}",
                client_indices.len(),
                config.n_clients
            ),
        ));
    }
    let mut partition = crate::model::split_model(&mc, &params, config.split)?;
    let mut global_prompt = prompt.clone();
    let initial_accuracy = evaluate(&partition, &global_prompt, &test)?;
    info!("initial accuracy {initial_accuracy:.4}");

    let mut clients = Vec::with_capacity(config.n_clients);
    for (id, idx) in client_indices.iter().enumerate() {
        let data = train.subset(idx)?;
        clients.push(ClientState::new(
            id,
            mc,
            partition.head.clone(),
            data,
            config.seed,
        )?);
    }
    let mut server = ServerState::new(mc, partition.body.clone());
    let mut net = Network::new(config.link)?;
    let cp = config.compute;
    let head_n = partition.head.scalar_count() as f64;
    let body_n = partition.body.scalar_count() as f64;
    let tail_n = partition.tail.scalar_count() as f64;
    let beta = cp.forward_fraction;

    let mut reports = Vec::with_capacity(config.rounds as usize);
    let mut last_accuracy = initial_accuracy;
    for round in 1..=config.rounds {
        net.begin_round(round)?;
        if round == 1 {
            let head_bytes = partition.head.scalar_count() as u64 * BYTES_PER_ELEMENT;
            for id in 0..config.n_clients {
                net.record_transfer(id, MessageKind::HeadBroadcast, head_bytes, config.n_clients)?;
            }
        }
        let selected = select_clients(
            config.n_clients,
            config.clients_per_round,
            round,
            config.seed,
        )?;
        let k = selected.len();
        let down = model_bytes(&partition.tail.params, &global_prompt);
        for &id in &selected {
            net.record_transfer(id, MessageKind::ModelDown, down, k)?;
            in_round(
                clients[id].begin_round(round, partition.tail.clone(), global_prompt.clone()),
                round,
                id,
            )?;
        }

        let mut uploads = Vec::with_capacity(k);
        let mut pruned_sizes = Vec::with_capacity(k);
        let mut last_losses = Vec::with_capacity(k);
        for &id in &selected {
            let client = &mut clients[id];
            let actor = Actor::Client(id);
            let n_k = client.n_samples() as f64;

            // Phase 1: prune, then local-loss epochs on the full local set.
            let kept = if config.prune_once && round > 1 && client.pruned_indices().is_some() {
                in_round(client.reuse_pruned(), round, id)?
            } else {
                let kept = in_round(
                    client.prune(config.prune_fraction, config.prune_with_prompt),
                    round,
                    id,
                )?;
                net.record_compute(actor, beta * n_k * (head_n + tail_n), cp.client_power)?;
                kept
            };
            pruned_sizes.push(kept);
            let losses = in_round(
                client.local_loss_update(config.local_epochs, config.lr_local, config.batch_size),
                round,
                id,
            )?;
            net.record_compute(
                actor,
                config.local_epochs as f64 * n_k * (head_n + tail_n),
                cp.client_power,
            )?;
            if let Some(&l) = losses.last() {
                last_losses.push(l);
            }

            // Phase 2: one epoch of split training over the pruned set.
            let batches = in_round(client.split_batches(config.batch_size), round, id)?;
            for (batch_id, indices) in batches.iter().enumerate() {
                let b = indices.len() as f64;
                let smashed = in_round(client.forward_update(batch_id, indices), round, id)?;
                net.record_compute(actor, beta * b * head_n, cp.client_power)?;
                net.record_transfer(id, MessageKind::Smashed, smashed.byte_size, k)?;

                let body_out = in_round(server.server_forward(&smashed), round, id)?;
                net.record_compute(Actor::Server, beta * b * body_n, cp.server_power)?;
                net.record_transfer(id, MessageKind::BodyOutput, body_out.byte_size, k)?;

                let tail_grad = in_round(
                    client.backward_update(&body_out, config.lr_global),
                    round,
                    id,
                )?;
                net.record_compute(actor, b * tail_n, cp.client_power)?;
                net.record_transfer(id, MessageKind::TailGrad, tail_grad.byte_size, k)?;

                let body_grad = in_round(server.server_backward(&tail_grad), round, id)?;
                net.record_compute(Actor::Server, (1.0 - beta) * b * body_n, cp.server_power)?;
                net.record_transfer(id, MessageKind::BodyGrad, body_grad.byte_size, k)?;

                in_round(
                    client.prompt_update(&body_grad, config.lr_global),
                    round,
                    id,
                )?;
                net.record_compute(actor, (1.0 - beta) * b * head_n, cp.client_power)?;
            }

            let upload = in_round(client.upload(), round, id)?;
            net.record_transfer(id, MessageKind::Upload, upload.byte_size, k)?;
            uploads.push(upload);
        }

        // Phase 3
        let (tail, prompt) = aggregate(&uploads, config.aggregation)?;
        partition.tail.params = tail;
        global_prompt = prompt;

        let summary = net.close_round()?;
        last_accuracy = evaluate(&partition, &global_prompt, &test)?;
        let mean_local_loss = if last_losses.is_empty() {
            f64::NAN
        } else {
            last_losses.iter().sum::<f64>() / last_losses.len() as f64
        };
        debug!("round {round}: selected {selected:?}, loss {mean_local_loss:.4}, accuracy {last_accuracy:.4}");
        reports.push(RoundReport {
            round,
            selected,
            pruned_sizes,
            mean_local_loss,
            test_accuracy: last_accuracy,
            bytes_up: summary.bytes_up,
            bytes_down: summary.bytes_down,
            header_bytes: summary.header_bytes,
            latency_s: summary.latency_s,
        });
    }
    info!(
        "final accuracy {last_accuracy:.4} after {} rounds",
        config.rounds
    );
    Ok(TrainingOutcome {
        partition,
        prompt: global_prompt,
        reports,
        initial_params: params,
        initial_prompt: prompt,
        initial_accuracy,
        final_accuracy: last_accuracy,
        network: net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upload(id: usize, v: f64, n: usize) -> Upload {
        let mut tail = ParamSet::new();
        tail.insert("w", Tensor::scalar(v), false).unwrap();
        Upload {
            client_id: id,
            tail,
            prompt: PromptParams::new(1, 1, vec![v]).unwrap(),
            n_samples: n,
            byte_size: 16,
        }
    }

    fn value(set: &ParamSet) -> f64 {
        set.tensor("w").unwrap().data()[0]
    }

    #[test]
    fn aggregate_examples() {
        let (t, p) = aggregate(
            &[upload(0, 1.0, 5), upload(1, 3.0, 5)],
            AggregationMode::Uniform,
        )
        .unwrap();
        assert_eq!(value(&t), 2.0);
        assert_eq!(p.values()[0], 2.0);
        let (t, _) = aggregate(
            &[upload(0, 1.0, 1), upload(1, 3.0, 3)],
            AggregationMode::Weighted,
        )
        .unwrap();
        assert_eq!(value(&t), 2.5);
        for mode in [AggregationMode::Uniform, AggregationMode::Weighted] {
            let (t, _) = aggregate(&[upload(4, 0.3, 7)], mode).unwrap();
            assert_eq!(value(&t).to_bits(), 0.3f64.to_bits());
        }
    }

    #[test]
    fn aggregate_is_idempotent_and_order_free() {
        let same: Vec<Upload> = (0..7).map(|i| upload(i, 0.1, i + 1)).collect();
        let (t, _) = aggregate(&same, AggregationMode::Weighted).unwrap();
        assert_eq!(value(&t).to_bits(), 0.1f64.to_bits());
        let mixed: Vec<Upload> = (0..5)
            .map(|i| upload(i, 0.1 * i as f64 + 0.37, 2 * i + 1))
            .collect();
        let mut rev = mixed.clone();
        rev.reverse();
        let a = aggregate(&mixed, AggregationMode::Weighted).unwrap();
        let b = aggregate(&rev, AggregationMode::Weighted).unwrap();
        assert!(a.0.bits_eq(&b.0) && a.1.bits_eq(&b.1));
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate(&[], AggregationMode::Uniform).is_err());
        assert!(aggregate(
            &[upload(0, 1.0, 1), upload(0, 2.0, 1)],
            AggregationMode::Uniform
        )
        .is_err());
        let mut odd = upload(1, 1.0, 1);
        odd.tail = ParamSet::new();
        odd.tail.insert("w", Tensor::zeros(&[2]), false).unwrap();
        assert!(aggregate(&[upload(0, 1.0, 1), odd], AggregationMode::Uniform).is_err());
    }

    #[test]
    fn selection_properties() {
        assert_eq!(select_clients(5, 5, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(
            select_clients(50, 5, 3, 1).unwrap(),
            select_clients(50, 5, 3, 1).unwrap()
        );
        assert!(select_clients(4, 5, 1, 1).is_err());
        let mut counts = [0usize; 50];
        for round in 1..=1000 {
            let ids = select_clients(50, 5, round, 11).unwrap();
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            for id in ids {
                counts[id] += 1;
            }
        }
        assert!(
            counts.iter().all(|&c| (60..=140).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
