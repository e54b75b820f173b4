//! Training objectives: sampled-softmax next-item NLL, the skip-informed
//! InfoNCE loss and their weighted sum.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{contrastive_targets, ContrastiveTarget, Session, TargetPlan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Weight of the next-item term.
    pub beta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Which vector plays the context role in the contrastive score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// The predicted embedding at the position (session-aware).
    Predicted,
    /// The static embedding of the track at the position.
    Embedding,
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextMode::Predicted => "predicted",
            ContextMode::Embedding => "embedding",
        })
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(ContextMode::Predicted),
            "embedding" => Ok(ContextMode::Embedding),
            other => Err(Error::Config(format!("unknown context mode {other:?}"))),
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]`.
pub fn sampled_softmax_nll(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Config(format!(
            "target index {target} outside {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled softmax logits".into()));
    }
    Ok(log_sum_exp(logits.iter().copied()) - logits[target])
}

/// Loss and its gradient with respect to the logits.
pub fn sampled_softmax_nll_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let loss = sampled_softmax_nll(logits, target)?;
    let lse = loss + logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&v| (v - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Where an instance's context vector comes from; used to route gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    /// Flat index into the predicted-embedding matrix.
    Predicted(usize),
    /// Track index into the embedding table.
    Embedding(u32),
}

/// One contrastive classification problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveInstance {
    pub context: Array1<f64>,
    pub positive: Array1<f64>,
    pub negatives: Vec<Array1<f64>>,
    pub source: ContextSource,
    pub positive_track: u32,
    pub negative_tracks: Vec<u32>,
}

fn cosine(x: ArrayView1<f64>, c: ArrayView1<f64>) -> Option<(f64, f64, f64)> {
    let nx = x.dot(&x).sqrt();
    let nc = c.dot(&c).sqrt();
    if nx == 0.0 || nc == 0.0 {
        return None;
    }
    Some((x.dot(&c) / (nx * nc), nx, nc))
}

/// Gradient of one InfoNCE instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_context: Array1<f64>,
    pub d_positive: Array1<f64>,
    pub d_negatives: Vec<Array1<f64>>,
}

/// Cross-entropy of the positive among `{positive} ∪ negatives` with
/// temperature-scaled cosine scores. `None` when a vector has zero norm.
pub fn info_nce(instance: &ContrastiveInstance, temperature: f64) -> Option<f64> {
    let c = instance.context.view();
    let mut scores = Vec::with_capacity(1 + instance.negatives.len());
    scores.push(cosine(instance.positive.view(), c)?.0 / temperature);
    for n in &instance.negatives {
        scores.push(cosine(n.view(), c)?.0 / temperature);
    }
    Some(log_sum_exp(scores.iter().copied()) - scores[0])
}

pub fn info_nce_grad<'a>(
    context: ArrayView1<'a, f64>,
    positive: ArrayView1<'a, f64>,
    negatives: &[ArrayView1<'a, f64>],
    temperature: f64,
) -> Option<InfoNceGrad> {
    let mut parts = Vec::with_capacity(1 + negatives.len());
    parts.push((positive, cosine(positive, context)?));
    for &n in negatives {
        parts.push((n, cosine(n, context)?));
    }
    let scores: Vec<f64> = parts.iter().map(|(_, (cos, _, _))| cos / temperature).collect();
    let lse = log_sum_exp(scores.iter().copied());
    let loss = lse - scores[0];

    let mut d_context = Array1::zeros(context.len());
    let mut d_vectors = Vec::with_capacity(parts.len());
    for (j, ((x, (cos, nx, nc)), score)) in parts.iter().zip(&scores).enumerate() {
        let weight = (score - lse).exp() - if j == 0 { 1.0 } else { 0.0 };
        let dcos = weight / temperature;
        // d cos / dc = x / (|x||c|) - cos c / |c|^2, symmetric for x.
        d_context.scaled_add(dcos / (nx * nc), x);
        d_context.scaled_add(-dcos * cos / (nc * nc), &context);
        let mut dx = context.to_owned() * (dcos / (nx * nc));
        dx.scaled_add(-dcos * cos / (nx * nx), x);
        d_vectors.push(dx);
    }
    let d_positive = d_vectors.remove(0);
    Some(InfoNceGrad {
        loss,
        d_context,
        d_positive,
        d_negatives: d_vectors,
    })
}

/// Instances for one row, given its contrastive targets.
///
/// `predicted` holds the row's predicted embeddings (`n x d`) and
/// `flat_offset` is the row's first index in the packed batch.
pub fn instances_from_targets(
    targets: &[ContrastiveTarget],
    predicted: ArrayView2<f64>,
    flat_offset: usize,
    item_emb: ArrayView2<f64>,
    mode: ContextMode,
) -> Vec<ContrastiveInstance> {
    targets
        .iter()
        .map(|t| {
            let (context, source) = match mode {
                ContextMode::Predicted => (
                    predicted.row(t.position).to_owned(),
                    ContextSource::Predicted(flat_offset + t.position),
                ),
                ContextMode::Embedding => (
                    item_emb.row(t.anchor as usize).to_owned(),
                    ContextSource::Embedding(t.anchor),
                ),
            };
            ContrastiveInstance {
                context,
                positive: item_emb.row(t.positive as usize).to_owned(),
                negatives: t
                    .negatives
                    .iter()
                    .map(|&n| item_emb.row(n as usize).to_owned())
                    .collect(),
                source,
                positive_track: t.positive,
                negative_tracks: t.negatives.clone(),
            }
        })
        .collect()
}

/// One instance per position with a later positive, provided the session
/// has negatives. Negatives span the whole session.
pub fn build_contrastive_instances(
    session: &Session,
    plan: &TargetPlan,
    predicted: ArrayView2<f64>,
    item_emb: ArrayView2<f64>,
    mode: ContextMode,
) -> Vec<ContrastiveInstance> {
    let targets = contrastive_targets(session, plan);
    instances_from_targets(&targets, predicted, 0, item_emb, mode)
}

/// `alpha * l_nce + beta * l_nll`; an absent contrastive term contributes
/// nothing.
pub fn aggregate_loss(l_nce: Option<f64>, l_nll: f64, weights: &LossWeights) -> f64 {
    match l_nce {
        Some(nce) if weights.alpha != 0.0 => weights.alpha * nce + weights.beta * l_nll,
        _ => weights.beta * l_nll,
    }
}
