//! Synthetic datasets, client partitioning, EL2N scoring and pruning.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{connect_head_tail, ModelConfig, PromptParams, Segment};
use crate::seed::{stream_rng, tags};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[seq_len, input_dim]`
    pub features: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    n_classes: usize,
    seq_len: usize,
    input_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, n_classes: usize) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let shape = first.features.shape().to_vec();
        let [seq_len, input_dim] = shape[..] else {
            return Err(Error::InvalidShape(format!(
                "sample features must be [seq_len, input_dim], got {shape:?}"
            )));
        };
        for s in &samples {
            s.features.expect_shape("dataset", &shape)?;
            if s.label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: n_classes,
                });
            }
        }
        Ok(Self {
            samples,
            n_classes,
            seq_len,
            input_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or_else(|| {
                    Error::InvalidShape(format!("sample index {i} out of range {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.n_classes)
    }

    /// Stacks the selected samples into `[B, seq_len, input_dim]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.seq_len * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::InvalidShape(format!("sample index {i} out of range {}", self.len()))
            })?;
            data.extend_from_slice(s.features.data());
            labels.push(s.label);
        }
        let x = Tensor::new(vec![indices.len(), self.seq_len, self.input_dim], data)?;
        Ok((x, labels))
    }

    pub fn bits_eq(&self, other: &Dataset) -> bool {
        self.n_classes == other.n_classes
            && self.len() == other.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.label == b.label && a.features.bits_eq(&b.features))
    }
}

/// Class-conditional Gaussian token clusters.
///
/// Each class `c` has a mean `class_separation · u[c, t]` per token position,
/// with `u[c, t]` a random unit vector; samples add unit-variance noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    means: Vec<Vec<f64>>,
    n_classes: usize,
    seq_len: usize,
    input_dim: usize,
}

impl SyntheticTask {
    pub fn new(config: &ModelConfig, class_separation: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(class_separation >= 0.0) || !class_separation.is_finite() {
            return Err(Error::invalid(
                "data.class_separation",
                "must be finite and >= 0",
            ));
        }
        let mut rng = stream_rng(seed, &[tags::TRAIN_DATA, 0]);
        let (t, d) = (config.seq_len, config.input_dim);
        let means = (0..config.n_classes)
            .map(|_| {
                let mut m = Vec::with_capacity(t * d);
                for _ in 0..t {
                    let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = u
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                        .max(f64::MIN_POSITIVE);
                    m.extend(u.iter().map(|v| class_separation * v / norm));
                }
                m
            })
            .collect();
        Ok(Self {
            means,
            n_classes: config.n_classes,
            seq_len: t,
            input_dim: d,
        })
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// Draws `n` samples with labels balanced to within one, in shuffled order.
    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
        if n < self.n_classes {
            return Err(Error::invalid(
                "data.n_samples",
                format!("need at least {} samples, got {n}", self.n_classes),
            ));
        }
        let mut rng = stream_rng(seed, &[stream, 1]);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.n_classes).collect();
        labels.shuffle(&mut rng);
        let samples = labels
            .into_iter()
            .map(|label| {
                let data = self.means[label]
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Ok(Sample {
                    features: Tensor::new(vec![self.seq_len, self.input_dim], data)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.n_classes)
    }
}

pub fn gen_synthetic(
    n_samples: usize,
    config: &ModelConfig,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticTask::new(config, class_separation, seed)?.sample(n_samples, seed, tags::TRAIN_DATA)
}

/// Train and held-out test sets drawn from the same class means.
pub fn gen_train_test(
    n_train: usize,
    n_test: usize,
    config: &ModelConfig,
    class_separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let task = SyntheticTask::new(config, class_separation, seed)?;
    Ok((
        task.sample(n_train, seed, tags::TRAIN_DATA)?,
        task.sample(n_test, seed, tags::TEST_DATA)?,
    ))
}

/// Per-client sample indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Checks that the plan is a partition of `0..n`: disjoint, covering, no empty client.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Protocol(format!("client {k} has no samples")));
            }
            for &i in idx {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Protocol(format!(
                        "sample {i} is out of range or assigned twice"
                    )));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Protocol(format!("sample {i} is not assigned")));
        }
        Ok(())
    }
}

fn check_clients(n_clients: usize, n_samples: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::invalid("n_clients", "must be positive"));
    }
    if n_clients > n_samples {
        return Err(Error::invalid(
            "n_clients",
            format!("{n_clients} clients but only {n_samples} samples"),
        ));
    }
    Ok(())
}

/// Shuffle, then near-equal contiguous chunks (sizes differ by at most one).
pub fn partition_iid(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    let n = dataset.len();
    check_clients(n_clients, n)?;
    let mut rng = stream_rng(seed, &[tags::PARTITION, 0]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (base, extra) = (n / n_clients, n % n_clients);
    let mut clients = Vec::with_capacity(n_clients);
    let mut start = 0;
    for k in 0..n_clients {
        let len = base + usize::from(k < extra);
        let mut chunk = order[start..start + len].to_vec();
        chunk.sort_unstable();
        clients.push(chunk);
        start += len;
    }
    Ok(PartitionPlan { clients })
}

/// Label-skewed split: per class, a Dirichlet(concentration) draw over clients
/// allocates that class's samples by largest-remainder rounding.
pub fn partition_dirichlet(
    dataset: &Dataset,
    n_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    let n = dataset.len();
    check_clients(n_clients, n)?;
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::invalid(
            "partition.concentration",
            "must be finite and > 0",
        ));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::invalid("partition.concentration", e.to_string()))?;
    let mut rng = stream_rng(seed, &[tags::PARTITION, 1]);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];

    for class in 0..dataset.n_classes() {
        let mut members: Vec<usize> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        // draw even for empty classes so the stream does not depend on class counts
        let mut weights: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        members.shuffle(&mut rng);
        if members.is_empty() {
            continue;
        }
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            weights.fill(0.0);
            weights[rng.random_range(0..n_clients)] = 1.0;
        }
        let counts = largest_remainder(&weights, members.len());
        let mut start = 0;
        for (k, c) in counts.into_iter().enumerate() {
            clients[k].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }

    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        clients[donor].sort_unstable();
        let moved = clients[donor]
            .pop()
            .expect("donor holds at least two samples");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionPlan { clients })
}

/// Integer allocation of `total` proportional to `weights` (which sum to 1).
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    // floor() of a quota can overshoot only through rounding in `w * total`
    while counts.iter().sum::<usize>() > total {
        let k = (0..counts.len())
            .max_by_key(|&k| counts[k])
            .expect("non-empty");
        counts[k] -= 1;
    }
    counts
}

/// EL2N score of one prediction: `‖probs − onehot(label)‖₂`.
pub fn el2n_score(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let e = p - if j == label { 1.0 } else { 0.0 };
            e * e
        })
        .sum::<f64>()
        .sqrt())
}

/// Per-sample EL2N importance, aligned with dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct El2nScores(pub Vec<f64>);

impl El2nScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

const SCORE_BATCH: usize = 256;

/// Scores every sample on the connected head→tail path. Pass
/// `PromptParams::empty` to score without prompt tokens.
pub fn el2n_scores(
    config: &ModelConfig,
    head: &Segment,
    tail: &Segment,
    prompt: &PromptParams,
    dataset: &Dataset,
) -> Result<El2nScores> {
    let c = config.n_classes;
    if dataset.n_classes() != c {
        return Err(Error::invalid(
            "data.n_classes",
            format!("dataset has {} classes, model has {c}", dataset.n_classes()),
        ));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(SCORE_BATCH) {
        let (x, labels) = dataset.batch(chunk)?;
        let logits = connect_head_tail(config, head, tail, prompt, &x)?;
        for (row, &label) in logits.value().data().chunks(c).zip(&labels) {
            scores.push(el2n_score(&softmax(row), label)?);
        }
    }
    Ok(El2nScores(scores))
}

/// `⌈(1 − γ)·n⌉`, treating values within 1e-9 of an integer as that integer.
pub fn kept_count(n: usize, gamma: f64) -> usize {
    let exact = (1.0 - gamma) * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).clamp(1.min(n), n)
}

/// Indices of the kept samples, ascending. Highest scores win; equal scores
/// prefer the lower index.
pub fn prune_indices(scores: &[f64], gamma: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(
            "prune_fraction",
            format!("must lie in [0, 1), got {gamma}"),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("EL2N score".into()));
    }
    let keep = kept_count(scores.len(), gamma);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

pub fn prune(dataset: &Dataset, scores: &El2nScores, gamma: f64) -> Result<Dataset> {
    if scores.len() != dataset.len() {
        return Err(Error::InvalidShape(format!(
            "{} scores for {} samples",
            scores.len(),
            dataset.len()
        )));
    }
    dataset.subset(&prune_indices(scores.as_slice(), gamma)?)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with one row per (sample, token): `sample_id, token_index, feature_0.., label`.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["sample_id".to_string(), "token_index".to_string()];
    header.extend((0..dataset.input_dim).map(|j| format!("feature_{j}")));
    header.push("label".to_string());
    w.write_record(&header)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        for (t, row) in s.features.data().chunks(dataset.input_dim).enumerate() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(row.iter().map(|v| fmt_f64(*v)));
            rec.push(s.label.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R, n_classes: usize) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let width = headers.len();
    if width < 4
        || &headers[0] != "sample_id"
        || &headers[1] != "token_index"
        || &headers[width - 1] != "label"
    {
        return Err(Error::Format(
            "expected columns sample_id, token_index, feature_0.., label".into(),
        ));
    }
    let input_dim = width - 3;
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::new();
    let parse_err = |line: u64, what: &str| Error::Format(format!("line {line}: bad {what}"));
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: usize = rec[0].parse().map_err(|_| parse_err(line, "sample_id"))?;
        let token: usize = rec[1].parse().map_err(|_| parse_err(line, "token_index"))?;
        let label: usize = rec[width - 1]
            .parse()
            .map_err(|_| parse_err(line, "label"))?;
        if id == samples.len() && token == 0 {
            samples.push((Vec::new(), label));
        }
        if id + 1 != samples.len() {
            return Err(parse_err(line, "sample_id ordering"));
        }
        let (feats, l) = &mut samples[id];
        if *l != label || feats.len() != token * input_dim {
            return Err(parse_err(line, "row ordering"));
        }
        for j in 0..input_dim {
            feats.push(rec[2 + j].parse().map_err(|_| parse_err(line, "feature"))?);
        }
    }
    let seq_len = samples.first().map_or(0, |(f, _)| f.len() / input_dim);
    let samples = samples
        .into_iter()
        .map(|(f, label)| {
            Ok(Sample {
                features: Tensor::new(vec![seq_len, input_dim], f)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, n_classes)
}
