//! Client side of one global round: prune, local-loss update, then the
//! forward / backward / prompt exchange per batch, then upload.
//!
//! Clients never touch the network themselves. Every outbound value comes
//! back as a message carrying its payload size; the orchestrator routes it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::{el2n_scores, prune_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    connected_loss, head_forward, tail_loss, Forward, ModelConfig, PromptParams, Segment,
    PROMPT_PARAM,
};
use crate::seed::{stream_rng, tags};
use crate::simnet::BYTES_PER_ELEMENT;
use crate::tensor::{sgd_step, ParamSet, Tensor};

/// Cut-layer activations, client → server (`S`) or server → client (`S'`).
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedMsg {
    pub client_id: usize,
    pub round: u32,
    pub batch_id: usize,
    pub activations: Tensor,
    pub byte_size: u64,
}

impl SmashedMsg {
    pub fn new(client_id: usize, round: u32, batch_id: usize, activations: Tensor) -> Self {
        let byte_size = activations.len() as u64 * BYTES_PER_ELEMENT;
        Self {
            client_id,
            round,
            batch_id,
            activations,
            byte_size,
        }
    }
}

/// Gradient of the loss with respect to a cut-layer tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMsg {
    pub client_id: usize,
    pub round: u32,
    pub batch_id: usize,
    pub gradients: Tensor,
    pub byte_size: u64,
}

impl GradMsg {
    pub fn new(client_id: usize, round: u32, batch_id: usize, gradients: Tensor) -> Self {
        let byte_size = gradients.len() as u64 * BYTES_PER_ELEMENT;
        Self {
            client_id,
            round,
            batch_id,
            gradients,
            byte_size,
        }
    }
}

/// Trainable client state sent back for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub tail: ParamSet,
    pub prompt: PromptParams,
    /// Full local dataset size, not the pruned size.
    pub n_samples: usize,
    pub byte_size: u64,
}

/// Payload bytes of a tail + prompt transfer.
pub fn model_bytes(tail: &ParamSet, prompt: &PromptParams) -> u64 {
    (tail.scalar_count() + prompt.len()) as u64 * BYTES_PER_ELEMENT
}

#[derive(Debug)]
struct InFlight {
    batch_id: usize,
    labels: Vec<usize>,
    head: Forward,
    smashed_shape: Vec<usize>,
    tail_done: bool,
}

#[derive(Debug)]
enum Phase {
    Idle,
    Received,
    Pruned,
    Training,
    InFlight(Box<InFlight>),
}

impl Phase {
    fn name(&self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Received => "received",
            Phase::Pruned => "pruned",
            Phase::Training => "training",
            Phase::InFlight(f) if f.tail_done => "awaiting server gradient",
            Phase::InFlight(_) => "awaiting body output",
        }
    }
}

#[derive(Debug)]
pub struct ClientState {
    id: usize,
    config: ModelConfig,
    head: Segment,
    tail: Option<Segment>,
    prompt: PromptParams,
    dataset: Dataset,
    pruned: Option<Vec<usize>>,
    round: u32,
    phase: Phase,
    seed: u64,
    last_tail_grads: Option<BTreeMap<String, Tensor>>,
    last_prompt_grad: Option<Tensor>,
}

impl ClientState {
    pub fn new(
        id: usize,
        config: ModelConfig,
        head: Segment,
        dataset: Dataset,
        seed: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset.context(format!("client {id}")));
        }
        let d_model = config.d_model;
        Ok(Self {
            id,
            config,
            head,
            tail: None,
            prompt: PromptParams::empty(d_model),
            dataset,
            pruned: None,
            round: 0,
            phase: Phase::Idle,
            seed,
            last_tail_grads: None,
            last_prompt_grad: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn head(&self) -> &Segment {
        &self.head
    }

    pub fn tail(&self) -> Option<&Segment> {
        self.tail.as_ref()
    }

    pub fn prompt(&self) -> &PromptParams {
        &self.prompt
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// `n_k`
    pub fn n_samples(&self) -> usize {
        self.dataset.len()
    }

    /// Indices into the local dataset kept by the latest pruning pass.
    pub fn pruned_indices(&self) -> Option<&[usize]> {
        self.pruned.as_deref()
    }

    pub fn pruned_len(&self) -> usize {
        self.pruned.as_ref().map_or(0, Vec::len)
    }

    pub fn has_pending(&self) -> bool {
        matches!(self.phase, Phase::InFlight(_))
    }

    pub fn last_tail_grads(&self) -> Option<&BTreeMap<String, Tensor>> {
        self.last_tail_grads.as_ref()
    }

    pub fn last_prompt_grad(&self) -> Option<&Tensor> {
        self.last_prompt_grad.as_ref()
    }

    fn order_error(&self, op: &str) -> Error {
        Error::Protocol(format!(
            "client {}: `{op}` not allowed while {}",
            self.id,
            self.phase.name()
        ))
    }

    fn tail_ref(&self) -> Result<&Segment> {
        self.tail
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} holds no tail", self.id)))
    }

    /// Receives the global tail and prompt for `round`.
    pub fn begin_round(&mut self, round: u32, tail: Segment, prompt: PromptParams) -> Result<()> {
        if !matches!(self.phase, Phase::Idle) {
            return Err(self.order_error("begin_round"));
        }
        if round <= self.round {
            return Err(Error::Protocol(format!(
                "client {}: round {round} does not follow round {}",
                self.id, self.round
            )));
        }
        if prompt.d_model() != self.config.d_model {
            return Err(Error::InvalidShape(format!(
                "prompt width {} does not match d_model {}",
                prompt.d_model(),
                self.config.d_model
            )));
        }
        self.tail = Some(tail);
        self.prompt = prompt;
        self.round = round;
        self.phase = Phase::Received;
        Ok(())
    }

    /// Scores the local dataset on the connected head → tail path and keeps
    /// the `1 − gamma` highest-scoring samples. Returns the kept count.
    pub fn prune(&mut self, gamma: f64, with_prompt: bool) -> Result<usize> {
        if !matches!(self.phase, Phase::Received) {
            return Err(self.order_error("prune"));
        }
        let tail = self.tail_ref()?;
        let empty = PromptParams::empty(self.config.d_model);
        let prompt = if with_prompt { &self.prompt } else { &empty };
        let scores = el2n_scores(&self.config, &self.head, tail, prompt, &self.dataset)?;
        let kept = prune_indices(scores.as_slice(), gamma)?;
        let n = kept.len();
        self.pruned = Some(kept);
        self.phase = Phase::Pruned;
        Ok(n)
    }

    /// Keeps the selection from an earlier round. Fails if none exists.
    pub fn reuse_pruned(&mut self) -> Result<usize> {
        if !matches!(self.phase, Phase::Received) {
            return Err(self.order_error("reuse_pruned"));
        }
        let n =
            self.pruned.as_ref().map(Vec::len).ok_or_else(|| {
                Error::Protocol(format!("client {} has no earlier pruning", self.id))
            })?;
        self.phase = Phase::Pruned;
        Ok(n)
    }

    fn shuffled(&self, n: usize, stream: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(
            self.seed,
            &[tags::CLIENT, self.id as u64, self.round as u64, stream],
        );
        order.shuffle(&mut rng);
        order
    }

    /// `epochs` passes of minibatch SGD over the full local dataset on the
    /// connected head → tail path. Returns the mean loss of each epoch.
    pub fn local_loss_update(
        &mut self,
        epochs: usize,
        lr: f64,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        if !matches!(self.phase, Phase::Pruned) {
            return Err(self.order_error("local_loss_update"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        let mut tail = self.tail.take().expect("tail present after begin_round");
        let result = self.local_epochs(&mut tail, epochs, lr, batch_size);
        self.tail = Some(tail);
        let losses = result?;
        self.phase = Phase::Training;
        Ok(losses)
    }

    fn local_epochs(
        &mut self,
        tail: &mut Segment,
        epochs: usize,
        lr: f64,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        let n = self.dataset.len();
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let order = self.shuffled(n, 1 + epoch as u64);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size.min(n)) {
                let (x, labels) = self.dataset.batch(chunk)?;
                let mut fwd =
                    connected_loss(&self.config, &self.head, tail, &self.prompt, &x, &labels)?;
                let loss = fwd.value().data()[0];
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "local loss of client {}",
                        self.id
                    )));
                }
                total += loss * chunk.len() as f64;
                let mut grads = fwd.backward(&Tensor::scalar(1.0))?.params;
                if let Some(g) = grads.remove(PROMPT_PARAM) {
                    step_prompt(&mut self.prompt, &g, lr);
                }
                sgd_step(&mut tail.params, &grads, lr)?;
            }
            losses.push(total / n as f64);
        }
        Ok(losses)
    }

    /// Minibatches over the pruned set for one split-training epoch.
    pub fn split_batches(&self, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        let kept = self
            .pruned
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} has not pruned", self.id)))?;
        let order = self.shuffled(kept.len(), 0);
        Ok(order
            .chunks(batch_size.min(kept.len()).max(1))
            .map(|c| c.iter().map(|&i| kept[i]).collect())
            .collect())
    }

    /// Head forward (with prompt) on local samples `indices`; the tape is
    /// kept for the prompt update.
    pub fn forward_update(&mut self, batch_id: usize, indices: &[usize]) -> Result<SmashedMsg> {
        if !matches!(self.phase, Phase::Training) {
            return Err(self.order_error("forward_update"));
        }
        if indices.is_empty() {
            return Err(Error::EmptyDataset.context(format!("client {} batch {batch_id}", self.id)));
        }
        let (x, labels) = self.dataset.batch(indices)?;
        let head = head_forward(&self.config, &self.head, &self.prompt, &x)?;
        let activations = head.value().clone();
        self.phase = Phase::InFlight(Box::new(InFlight {
            batch_id,
            labels,
            smashed_shape: activations.shape().to_vec(),
            head,
            tail_done: false,
        }));
        Ok(SmashedMsg::new(self.id, self.round, batch_id, activations))
    }

    /// Tail forward on the body output, loss, tail backward and an immediate
    /// tail step at `lr`. Returns the gradient at the body output.
    pub fn backward_update(&mut self, body_out: &SmashedMsg, lr: f64) -> Result<GradMsg> {
        let expected_id = match &self.phase {
            Phase::InFlight(f) if !f.tail_done => f.batch_id,
            _ => return Err(self.order_error("backward_update")),
        };
        self.check_addressed(
            body_out.client_id,
            body_out.round,
            body_out.batch_id,
            expected_id,
        )?;
        let Phase::InFlight(flight) = &self.phase else {
            unreachable!()
        };
        if body_out.activations.shape() != flight.smashed_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "backward_update",
                expected: flight.smashed_shape.clone(),
                found: body_out.activations.shape().to_vec(),
            });
        }
        let tail = self.tail.as_mut().expect("tail present while in flight");
        let mut fwd = tail_loss(&self.config, tail, &body_out.activations, &flight.labels)?;
        let grads = fwd.backward(&Tensor::scalar(1.0))?;
        let input = grads
            .input
            .ok_or_else(|| Error::Protocol("tail tape produced no input gradient".into()))?;
        sgd_step(&mut tail.params, &grads.params, lr)?;
        self.last_tail_grads = Some(grads.params);
        if let Phase::InFlight(flight) = &mut self.phase {
            flight.tail_done = true;
        }
        Ok(GradMsg::new(self.id, self.round, expected_id, input))
    }

    /// Backpropagates the server's gradient through the frozen head into the
    /// prompt rows and steps the prompt at `lr`. Completes the batch.
    pub fn prompt_update(&mut self, grad: &GradMsg, lr: f64) -> Result<()> {
        let expected_id = match &self.phase {
            Phase::InFlight(f) if f.tail_done => f.batch_id,
            _ => return Err(self.order_error("prompt_update")),
        };
        self.check_addressed(grad.client_id, grad.round, grad.batch_id, expected_id)?;
        let Phase::InFlight(mut flight) = std::mem::replace(&mut self.phase, Phase::Training)
        else {
            unreachable!()
        };
        if grad.gradients.shape() != flight.smashed_shape.as_slice() {
            let err = Error::ShapeMismatch {
                op: "prompt_update",
                expected: flight.smashed_shape.clone(),
                found: grad.gradients.shape().to_vec(),
            };
            self.phase = Phase::InFlight(flight);
            return Err(err);
        }
        if self.prompt.is_empty() {
            self.last_prompt_grad = None;
            return Ok(());
        }
        let mut grads = flight.head.backward(&grad.gradients)?.params;
        let g = grads
            .remove(PROMPT_PARAM)
            .ok_or_else(|| Error::MissingGradient(PROMPT_PARAM.into()))?;
        if let Some(name) = grads.keys().next() {
            return Err(Error::FrozenGradient(name.clone()));
        }
        step_prompt(&mut self.prompt, &g, lr);
        self.last_prompt_grad = Some(g);
        Ok(())
    }

    fn check_addressed(
        &self,
        client: usize,
        round: u32,
        batch: usize,
        expected: usize,
    ) -> Result<()> {
        if client != self.id || round != self.round || batch != expected {
            return Err(Error::Protocol(format!(
                "client {} round {} batch {expected} received message for client {client} round {round} batch {batch}",
                self.id, self.round
            )));
        }
        Ok(())
    }

    /// Hands back tail, prompt and `n_k`; the client returns to idle.
    pub fn upload(&mut self) -> Result<Upload> {
        if !matches!(self.phase, Phase::Training) {
            return Err(self.order_error("upload"));
        }
        let tail = self.tail.take().expect("tail present while training");
        let prompt = std::mem::replace(&mut self.prompt, PromptParams::empty(self.config.d_model));
        self.phase = Phase::Idle;
        Ok(Upload {
            client_id: self.id,
            byte_size: model_bytes(&tail.params, &prompt),
            tail: tail.params,
            prompt,
            n_samples: self.dataset.len(),
        })
    }
}

fn step_prompt(prompt: &mut PromptParams, grad: &Tensor, lr: f64) {
    for (p, g) in prompt.values_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{build_model, split_model, SplitSpec};

    fn cfg() -> ModelConfig {
        ModelConfig {
            seq_len: 8,
            d_model: 16,
            n_layers: 3,
            n_classes: 4,
            input_dim: 8,
        }
    }

    fn client(n: usize, n_prompts: usize) -> (ClientState, Segment, PromptParams) {
        let c = cfg();
        let params = build_model(&c, 3).unwrap();
        let part = split_model(&c, &params, SplitSpec { cut1: 1, cut2: 2 }).unwrap();
        let data = gen_synthetic(n, &c, 5.0, 3).unwrap();
        let state = ClientState::new(0, c, part.head.clone(), data, 3).unwrap();
        (state, part.tail, PromptParams::init(n_prompts, 16, 3))
    }

    fn ready(n: usize, n_prompts: usize) -> ClientState {
        let (mut s, tail, prompt) = client(n, n_prompts);
        s.begin_round(1, tail, prompt).unwrap();
        s.prune(0.5, false).unwrap();
        s.local_loss_update(0, 0.1, 4).unwrap();
        s
    }

    #[test]
    fn smashed_shape_and_bytes() {
        let mut s = ready(8, 4);
        let msg = s.forward_update(0, &[0, 1]).unwrap();
        assert_eq!(msg.activations.shape(), &[2, 12, 16]);
        assert_eq!(msg.byte_size, 3072);
    }

    #[test]
    fn forward_twice_is_rejected() {
        let mut s = ready(8, 4);
        s.forward_update(0, &[0, 1]).unwrap();
        assert!(matches!(
            s.forward_update(1, &[2, 3]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn phases_are_ordered() {
        let (mut s, tail, prompt) = client(8, 2);
        assert!(s.prune(0.5, false).is_err());
        assert!(s.upload().is_err());
        s.begin_round(1, tail.clone(), prompt.clone()).unwrap();
        assert!(s.local_loss_update(1, 0.1, 4).is_err());
        assert!(s.forward_update(0, &[0]).is_err());
        s.prune(0.5, false).unwrap();
        assert!(s.forward_update(0, &[0]).is_err());
        s.local_loss_update(0, 0.1, 4).unwrap();
        let dummy = SmashedMsg::new(0, 1, 0, Tensor::zeros(&[1, 10, 16]));
        assert!(s.backward_update(&dummy, 0.1).is_err());
        let up = s.upload().unwrap();
        assert_eq!(up.n_samples, 8);
        assert!(s.begin_round(1, tail, prompt).is_err());
    }

    #[test]
    fn local_update_no_epochs_or_zero_lr_is_identity() {
        for (epochs, lr) in [(0, 0.1), (3, 0.0)] {
            let (mut s, tail, prompt) = client(8, 2);
            s.begin_round(1, tail.clone(), prompt.clone()).unwrap();
            s.prune(0.0, false).unwrap();
            s.local_loss_update(epochs, lr, 4).unwrap();
            assert!(s.tail().unwrap().params.bits_eq(&tail.params));
            assert!(s.prompt().bits_eq(&prompt));
        }
    }

    #[test]
    fn local_update_reduces_loss_and_keeps_head() {
        let (mut s, tail, prompt) = client(64, 2);
        let head = s.head().params.clone();
        s.begin_round(1, tail, prompt).unwrap();
        s.prune(0.5, false).unwrap();
        let losses = s.local_loss_update(10, 1e-2, 16).unwrap();
        assert!(losses[9] < losses[0], "{losses:?}");
        assert!(s.head().params.bits_eq(&head));
    }

    #[test]
    fn backward_is_deterministic_and_shape_preserving() {
        let run = || {
            let mut s = ready(8, 4);
            let msg = s.forward_update(0, &[0, 1, 2]).unwrap();
            let reply = SmashedMsg::new(0, 1, 0, msg.activations.clone());
            s.backward_update(&reply, 0.1).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.gradients.bits_eq(&b.gradients));
        assert_eq!(a.gradients.shape(), &[3, 12, 16]);
    }

    #[test]
    fn zero_server_gradient_keeps_prompt() {
        let mut s = ready(8, 4);
        let before = s.prompt().clone();
        let msg = s.forward_update(0, &[0, 1]).unwrap();
        let g = s
            .backward_update(&SmashedMsg::new(0, 1, 0, msg.activations.clone()), 0.1)
            .unwrap();
        let zero = GradMsg::new(0, 1, 0, Tensor::zeros(g.gradients.shape()));
        s.prompt_update(&zero, 0.1).unwrap();
        assert!(s.prompt().bits_eq(&before));
        assert!(!s.has_pending());
    }

    #[test]
    fn no_prompts_is_noop() {
        let mut s = ready(8, 0);
        let msg = s.forward_update(0, &[0, 1]).unwrap();
        assert_eq!(msg.activations.shape(), &[2, 8, 16]);
        let g = s
            .backward_update(&SmashedMsg::new(0, 1, 0, msg.activations.clone()), 0.1)
            .unwrap();
        s.prompt_update(&g, 0.1).unwrap();
        assert!(s.prompt().is_empty());
    }

    #[test]
    fn misaddressed_or_misshaped_messages_fail() {
        let mut s = ready(8, 2);
        let msg = s.forward_update(3, &[0, 1]).unwrap();
        let wrong = SmashedMsg::new(0, 1, 4, msg.activations.clone());
        assert!(matches!(
            s.backward_update(&wrong, 0.1),
            Err(Error::Protocol(_))
        ));
        let bad = SmashedMsg::new(0, 1, 3, Tensor::zeros(&[2, 9, 16]));
        assert!(matches!(
            s.backward_update(&bad, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
        let g = s
            .backward_update(&SmashedMsg::new(0, 1, 3, msg.activations.clone()), 0.1)
            .unwrap();
        let bad = GradMsg::new(0, 1, 3, Tensor::zeros(&[1, 10, 16]));
        assert!(s.prompt_update(&bad, 0.1).is_err());
        assert!(s.has_pending());
        s.prompt_update(&g, 0.1).unwrap();
    }

    #[test]
    fn upload_byte_size_and_content() {
        let mut s = ready(8, 3);
        let tail = s.tail().unwrap().params.clone();
        let prompt = s.prompt().clone();
        let up = s.upload().unwrap();
        assert!(up.tail.bits_eq(&tail));
        assert!(up.prompt.bits_eq(&prompt));
        assert_eq!(up.byte_size, (tail.scalar_count() as u64 + 48) * 8);
        assert_eq!(up.n_samples, 8);
    }

    #[test]
    fn split_batches_cover_pruned_set() {
        let s = ready(10, 2);
        let batches = s.split_batches(2).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, s.pruned_indices().unwrap());
        assert_eq!(batches.len(), 3);
        assert_eq!(s.split_batches(128).unwrap().len(), 1);
    }

    #[test]
    fn empty_dataset_rejected() {
        let c = cfg();
        let params = build_model(&c, 1).unwrap();
        let part = split_model(&c, &params, SplitSpec { cut1: 1, cut2: 2 }).unwrap();
        let empty = Dataset::new(Vec::new(), 4);
        if let Ok(d) = empty {
            assert!(ClientState::new(0, c, part.head, d, 0).is_err());
        }
    }
}
