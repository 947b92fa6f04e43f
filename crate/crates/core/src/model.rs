//! Small pre-LN transformer classifier and its head / body / tail partition.
//!
//! Every block keeps the width at `d_model`, so the head output can be fed
//! straight into the tail for client-side training without the server body.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream_rng, tags};
use crate::tensor::{Gradients, ParamSet, Tape, Tensor, Var};

/// MLP hidden width relative to `d_model`.
pub const MLP_RATIO: usize = 4;

/// Name under which the prompt is bound on a tape.
pub const PROMPT_PARAM: &str = "prompt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub input_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 8,
            d_model: 16,
            n_layers: 4,
            n_classes: 10,
            input_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.seq_len", self.seq_len),
            ("model.d_model", self.d_model),
            ("model.n_classes", self.n_classes),
            ("model.input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.n_layers < 2 {
            return Err(Error::invalid(
                "model.n_layers",
                "need at least 2 blocks so head and body are both non-empty",
            ));
        }
        Ok(())
    }

    pub fn d_hidden(&self) -> usize {
        MLP_RATIO * self.d_model
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.d_model, self.d_hidden());
        let mut out = vec![
            ("embed.w".to_string(), vec![self.input_dim, d]),
            ("embed.b".to_string(), vec![d]),
            ("embed.pos".to_string(), vec![self.seq_len, d]),
        ];
        for i in 0..self.n_layers {
            out.extend(block_layout(i, d, h));
        }
        out.push(("classifier.w".to_string(), vec![d, self.n_classes]));
        out.push(("classifier.b".to_string(), vec![self.n_classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn block_layout(i: usize, d: usize, h: usize) -> Vec<(String, Vec<usize>)> {
    let p = |s: &str| format!("block{i}.{s}");
    vec![
        (p("ln1.g"), vec![d]),
        (p("ln1.b"), vec![d]),
        (p("attn.wq"), vec![d, d]),
        (p("attn.bq"), vec![d]),
        (p("attn.wk"), vec![d, d]),
        (p("attn.bk"), vec![d]),
        (p("attn.wv"), vec![d, d]),
        (p("attn.bv"), vec![d]),
        (p("attn.wo"), vec![d, d]),
        (p("attn.bo"), vec![d]),
        (p("ln2.g"), vec![d]),
        (p("ln2.b"), vec![d]),
        (p("mlp.w1"), vec![d, h]),
        (p("mlp.b1"), vec![h]),
        (p("mlp.w2"), vec![h, d]),
        (p("mlp.b2"), vec![d]),
    ]
}

/// Block index encoded in a parameter name, if any.
fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("block")?.split('.').next()?.parse().ok()
}

/// Deterministic initialization: fan-in scaled Gaussian weights, zero biases,
/// unit layer-norm gains.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = stream_rng(seed, &[tags::MODEL]);
    let mut params = ParamSet::new();
    for (name, shape) in config.layout() {
        let len: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or_default();
        let data: Vec<f64> = if leaf == "g" {
            vec![1.0; len]
        } else if leaf == "pos" {
            gaussian(&mut rng, len, 0.1)
        } else if leaf.starts_with('w') {
            gaussian(&mut rng, len, (1.0 / shape[0] as f64).sqrt())
        } else {
            vec![0.0; len]
        };
        params.insert(name, Tensor::new(shape, data)?, false)?;
    }
    Ok(params)
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Learnable prompt vectors prepended to the embedded token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    n_prompts: usize,
    d_model: usize,
    values: Vec<f64>,
}

impl PromptParams {
    pub fn new(n_prompts: usize, d_model: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_prompts * d_model {
            return Err(Error::InvalidShape(format!(
                "prompt [{n_prompts}, {d_model}] needs {} values, got {}",
                n_prompts * d_model,
                values.len()
            )));
        }
        Ok(Self {
            n_prompts,
            d_model,
            values,
        })
    }

    pub fn empty(d_model: usize) -> Self {
        Self {
            n_prompts: 0,
            d_model,
            values: Vec::new(),
        }
    }

    pub fn init(n_prompts: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[tags::PROMPT]);
        Self {
            n_prompts,
            d_model,
            values: gaussian(&mut rng, n_prompts * d_model, 0.5),
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `[n_prompts, d_model]`, or `None` when there are no prompts.
    pub fn tensor(&self) -> Option<Tensor> {
        (self.n_prompts > 0).then(|| {
            Tensor::new(vec![self.n_prompts, self.d_model], self.values.clone())
                .expect("prompt shape checked at construction")
        })
    }

    pub fn bits_eq(&self, other: &PromptParams) -> bool {
        self.n_prompts == other.n_prompts
            && self.d_model == other.d_model
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub cut1: usize,
    pub cut2: usize,
}

impl SplitSpec {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.cut1 == 0 || self.cut1 >= self.cut2 || self.cut2 > n_layers {
            return Err(Error::invalid(
                "split",
                format!(
                    "need 0 < cut1 < cut2 <= n_layers, got cut1={}, cut2={}, n_layers={n_layers}",
                    self.cut1, self.cut2
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Head,
    Body,
    Tail,
}

/// One contiguous slice of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    kind: SegmentKind,
    blocks: Range<usize>,
    pub params: ParamSet,
}

impl Segment {
    pub fn new(kind: SegmentKind, blocks: Range<usize>, params: ParamSet) -> Result<Self> {
        if kind == SegmentKind::Body && blocks.is_empty() {
            return Err(Error::invalid(
                "split",
                "body must contain at least one block",
            ));
        }
        if kind == SegmentKind::Head && blocks.is_empty() {
            return Err(Error::invalid(
                "split",
                "head must contain at least one block",
            ));
        }
        Ok(Self {
            kind,
            blocks,
            params,
        })
    }

    pub fn kind(&self) -> SegmentKind {
        self.kind
    }

    pub fn blocks(&self) -> Range<usize> {
        self.blocks.clone()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPartition {
    pub config: ModelConfig,
    pub spec: SplitSpec,
    pub head: Segment,
    pub body: Segment,
    pub tail: Segment,
}

impl ModelPartition {
    /// The full parameter set in declaration order.
    pub fn recompose(&self) -> Result<ParamSet> {
        let mut out = self.head.params.clone();
        out.extend(self.body.params.clone())?;
        out.extend(self.tail.params.clone())?;
        Ok(out)
    }

    /// `(α, τ)`: head and body shares of the total parameter count.
    pub fn fractions(&self) -> (f64, f64) {
        let total =
            (self.head.scalar_count() + self.body.scalar_count() + self.tail.scalar_count()) as f64;
        (
            self.head.scalar_count() as f64 / total,
            self.body.scalar_count() as f64 / total,
        )
    }
}

/// Splits the full model; head and body come back frozen, tail trainable.
pub fn split_model(
    config: &ModelConfig,
    model: &ParamSet,
    spec: SplitSpec,
) -> Result<ModelPartition> {
    config.validate()?;
    spec.validate(config.n_layers)?;
    for (name, shape) in config.layout() {
        let t = model.tensor(&name)?;
        t.expect_shape("split_model", &shape)?;
    }
    if model.len() != config.layout().len() {
        return Err(Error::InvalidShape(format!(
            "model has {} parameters, config expects {}",
            model.len(),
            config.layout().len()
        )));
    }
    let in_head = |n: &str| n.starts_with("embed.") || block_of(n).is_some_and(|b| b < spec.cut1);
    let in_body = |n: &str| block_of(n).is_some_and(|b| b >= spec.cut1 && b < spec.cut2);
    let in_tail =
        |n: &str| n.starts_with("classifier.") || block_of(n).is_some_and(|b| b >= spec.cut2);

    let mut head = model.select(in_head);
    let mut body = model.select(in_body);
    let mut tail = model.select(in_tail);
    head.set_frozen(true);
    body.set_frozen(true);
    tail.set_frozen(false);
    Ok(ModelPartition {
        config: *config,
        spec,
        head: Segment::new(SegmentKind::Head, 0..spec.cut1, head)?,
        body: Segment::new(SegmentKind::Body, spec.cut1..spec.cut2, body)?,
        tail: Segment::new(SegmentKind::Tail, spec.cut2..config.n_layers, tail)?,
    })
}

/// A recorded forward pass; `backward` may be called once.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub output: Var,
}

impl Forward {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn backward(&mut self, output_grad: &Tensor) -> Result<Gradients> {
        self.tape.backward(self.output, output_grad)
    }
}

fn check_batch(config: &ModelConfig, batch: &Tensor) -> Result<usize> {
    match *batch.shape() {
        [b, t, i] if t == config.seq_len && i == config.input_dim => Ok(b),
        _ => Err(Error::ShapeMismatch {
            op: "head_forward",
            expected: vec![
                batch.shape().first().copied().unwrap_or(1),
                config.seq_len,
                config.input_dim,
            ],
            found: batch.shape().to_vec(),
        }),
    }
}

fn check_sequence(config: &ModelConfig, x: &Tensor, op: &'static str) -> Result<()> {
    match *x.shape() {
        [_, _, d] if d == config.d_model => Ok(()),
        _ => Err(Error::ShapeMismatch {
            op,
            expected: vec![
                x.shape().first().copied().unwrap_or(1),
                x.shape().get(1).copied().unwrap_or(1),
                config.d_model,
            ],
            found: x.shape().to_vec(),
        }),
    }
}

fn embed_into(tape: &mut Tape, head: &ParamSet, prompt: &PromptParams, batch: Var) -> Result<Var> {
    let w = tape.bind(head, "embed.w")?;
    let b = tape.bind(head, "embed.b")?;
    let pos = tape.bind(head, "embed.pos")?;
    let h = tape.linear(batch, w, Some(b))?;
    let h = tape.add_rows(h, pos)?;
    match prompt.tensor() {
        Some(p) => {
            let p = tape.param(PROMPT_PARAM, p, false);
            tape.prepend(h, p)
        }
        None => Ok(h),
    }
}

fn block_into(tape: &mut Tape, params: &ParamSet, i: usize, x: Var) -> Result<Var> {
    let bind = |tape: &mut Tape, s: &str| tape.bind(params, &format!("block{i}.{s}"));
    let (g1, b1) = (bind(tape, "ln1.g")?, bind(tape, "ln1.b")?);
    let n1 = tape.layer_norm(x, g1, b1)?;
    let (wq, bq) = (bind(tape, "attn.wq")?, bind(tape, "attn.bq")?);
    let (wk, bk) = (bind(tape, "attn.wk")?, bind(tape, "attn.bk")?);
    let (wv, bv) = (bind(tape, "attn.wv")?, bind(tape, "attn.bv")?);
    let (wo, bo) = (bind(tape, "attn.wo")?, bind(tape, "attn.bo")?);
    let q = tape.linear(n1, wq, Some(bq))?;
    let k = tape.linear(n1, wk, Some(bk))?;
    let v = tape.linear(n1, wv, Some(bv))?;
    let a = tape.attention(q, k, v)?;
    let a = tape.linear(a, wo, Some(bo))?;
    let h = tape.add(x, a)?;
    let (g2, b2) = (bind(tape, "ln2.g")?, bind(tape, "ln2.b")?);
    let n2 = tape.layer_norm(h, g2, b2)?;
    let (w1, c1) = (bind(tape, "mlp.w1")?, bind(tape, "mlp.b1")?);
    let (w2, c2) = (bind(tape, "mlp.w2")?, bind(tape, "mlp.b2")?);
    let m = tape.linear(n2, w1, Some(c1))?;
    let m = tape.gelu(m)?;
    let m = tape.linear(m, w2, Some(c2))?;
    tape.add(h, m)
}

fn blocks_into(
    tape: &mut Tape,
    params: &ParamSet,
    blocks: Range<usize>,
    mut x: Var,
) -> Result<Var> {
    for i in blocks {
        x = block_into(tape, params, i, x)?;
    }
    Ok(x)
}

fn classify_into(tape: &mut Tape, tail: &ParamSet, x: Var) -> Result<Var> {
    let pooled = tape.mean_pool(x)?;
    let w = tape.bind(tail, "classifier.w")?;
    let b = tape.bind(tail, "classifier.b")?;
    tape.linear(pooled, w, Some(b))
}

/// Embedding, prompt prepend and head blocks. Output is `[B, n_prompts + seq_len, d_model]`.
pub fn head_forward(
    config: &ModelConfig,
    head: &Segment,
    prompt: &PromptParams,
    batch: &Tensor,
) -> Result<Forward> {
    check_batch(config, batch)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let h = embed_into(&mut tape, &head.params, prompt, x)?;
    let output = blocks_into(&mut tape, &head.params, head.blocks(), h)?;
    Ok(Forward { tape, output })
}

/// Shape-preserving pass through the body blocks.
pub fn body_forward(config: &ModelConfig, body: &Segment, smashed: &Tensor) -> Result<Forward> {
    if body.blocks.is_empty() {
        return Err(Error::invalid(
            "split",
            "body must contain at least one block",
        ));
    }
    check_sequence(config, smashed, "body_forward")?;
    let mut tape = Tape::new();
    let x = tape.input(smashed.clone())?;
    let output = blocks_into(&mut tape, &body.params, body.blocks(), x)?;
    Ok(Forward { tape, output })
}

/// Tail blocks, mean-pool over every token (prompts included), classifier.
pub fn tail_forward(config: &ModelConfig, tail: &Segment, smashed: &Tensor) -> Result<Forward> {
    check_sequence(config, smashed, "tail_forward")?;
    let mut tape = Tape::new();
    let x = tape.input(smashed.clone())?;
    let h = blocks_into(&mut tape, &tail.params, tail.blocks(), x)?;
    let output = classify_into(&mut tape, &tail.params, h)?;
    Ok(Forward { tape, output })
}

/// Tail forward followed by batch-mean cross-entropy; `output` is the scalar loss.
pub fn tail_loss(
    config: &ModelConfig,
    tail: &Segment,
    smashed: &Tensor,
    labels: &[usize],
) -> Result<Forward> {
    let mut fwd = tail_forward(config, tail, smashed)?;
    fwd.output = fwd.tape.cross_entropy(fwd.output, labels)?;
    Ok(fwd)
}

/// Head output fed directly into the tail, skipping the body.
pub fn connect_head_tail(
    config: &ModelConfig,
    head: &Segment,
    tail: &Segment,
    prompt: &PromptParams,
    batch: &Tensor,
) -> Result<Forward> {
    check_batch(config, batch)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let h = embed_into(&mut tape, &head.params, prompt, x)?;
    let h = blocks_into(&mut tape, &head.params, head.blocks(), h)?;
    let h = blocks_into(&mut tape, &tail.params, tail.blocks(), h)?;
    let output = classify_into(&mut tape, &tail.params, h)?;
    Ok(Forward { tape, output })
}

/// Connected-path forward plus batch-mean cross-entropy.
pub fn connected_loss(
    config: &ModelConfig,
    head: &Segment,
    tail: &Segment,
    prompt: &PromptParams,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Forward> {
    let mut fwd = connect_head_tail(config, head, tail, prompt, batch)?;
    fwd.output = fwd.tape.cross_entropy(fwd.output, labels)?;
    Ok(fwd)
}

/// Logits of the unsplit model over a full parameter set.
pub fn model_forward(
    config: &ModelConfig,
    params: &ParamSet,
    prompt: &PromptParams,
    batch: &Tensor,
) -> Result<Forward> {
    config.validate()?;
    check_batch(config, batch)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let h = embed_into(&mut tape, params, prompt, x)?;
    let h = blocks_into(&mut tape, params, 0..config.n_layers, h)?;
    let output = classify_into(&mut tape, params, h)?;
    Ok(Forward { tape, output })
}

/// Logits through head → body → tail as three separate passes.
pub fn split_forward(
    partition: &ModelPartition,
    prompt: &PromptParams,
    batch: &Tensor,
) -> Result<Tensor> {
    let cfg = &partition.config;
    let smashed = head_forward(cfg, &partition.head, prompt, batch)?;
    let smashed = body_forward(cfg, &partition.body, smashed.value())?;
    let logits = tail_forward(cfg, &partition.tail, smashed.value())?;
    Ok(logits.value().clone())
}
