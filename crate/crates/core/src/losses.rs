//! Weighted asymmetric multi-label loss and edge co-occurrence loss.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tensor};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Number of joint activation patterns of an AU pair.
pub const EDGE_CLASSES: usize = 4;

/// Per-AU occurrence rates and the inverse-rate loss weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceStats {
    pub rates: Vec<f64>,
    pub weights: Vec<f64>,
}

impl OccurrenceStats {
    pub fn from_rates(rates: Vec<f64>) -> Result<Self> {
        let weights = compute_weights(&rates)?;
        Ok(Self { rates, weights })
    }

    pub fn n_aus(&self) -> usize {
        self.rates.len()
    }
}

/// `w_i = N (1/r_i) / sum_j (1/r_j)`; the weights sum to N.
pub fn compute_weights(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::Config("no occurrence rates given".into()));
    }
    let bad: Vec<usize> = rates
        .iter()
        .enumerate()
        .filter(|(_, &r)| !(r > 0.0 && r <= 1.0))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(format!(
            "occurrence rates must lie in (0, 1]; offending labels {bad:?}"
        )));
    }
    let n = rates.len() as f64;
    let total: f64 = rates.iter().map(|r| 1.0 / r).sum();
    Ok(rates.iter().map(|r| n * (1.0 / r) / total).collect())
}

/// `-(1/N) sum_i w_i [y_i log p_i + (1 - y_i) p_i log(1 - p_i)]`.
pub fn weighted_asymmetric_loss(
    g: &mut Graph<'_>,
    p: Var,
    labels: &[u8],
    stats: &OccurrenceStats,
) -> Result<Var> {
    let n = labels.len();
    if g.shape(p) != [n] || stats.weights.len() != n {
        return Err(Error::shape("weighted_asymmetric_loss", g.shape(p), &[n, stats.weights.len()]));
    }
    if let Some(bad) = g.value(p).data().iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract(format!(
            "probability {bad} outside [0, 1]"
        )));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(pc)?;
    let neg = g.scale(pc, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_q = g.log(one_minus)?;

    let yv = g.constant(Tensor::vector(y));
    let ny = g.constant(Tensor::vector(not_y));
    let w = g.constant(Tensor::vector(stats.weights.clone()));
    let pos = g.mul(yv, log_p)?;
    let neg_term = g.mul(pc, log_q)?;
    let neg_term = g.mul(ny, neg_term)?;
    let inner = g.add(pos, neg_term)?;
    let weighted = g.mul(w, inner)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Joint pattern of `(y_i, y_j)`: 0 = (0,0), 1 = (0,1), 2 = (1,0), 3 = (1,1).
pub fn edge_label(y_i: u8, y_j: u8) -> usize {
    2 * (y_i as usize) + y_j as usize
}

/// Labels for every ordered pair in lexicographic order.
pub fn edge_labels(labels: &[u8]) -> Vec<usize> {
    crate::mefl::edge_pairs(labels.len())
        .into_iter()
        .map(|(i, j)| edge_label(labels[i], labels[j]))
        .collect()
}

/// Shared linear map from an edge feature to four co-occurrence logits.
#[derive(Debug, Clone, Copy)]
pub struct EdgeHead {
    pub fc: Linear,
}

impl EdgeHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, rng, "edge_head", channels, EDGE_CLASSES, true)?,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            fc: Linear::lookup(store, "edge_head", true)?,
        })
    }
}

/// Logits for one edge vector (C) or a stack of them (E × C).
pub fn edge_head(g: &mut Graph<'_>, e: Var, head: &EdgeHead) -> Result<Var> {
    head.fc.forward(g, e)
}

/// Mean categorical cross-entropy over edges; `logits` is E × 4.
pub fn edge_cooccurrence_loss(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != EDGE_CLASSES {
        return Err(Error::shape("edge_cooccurrence_loss", &shape, &[labels.len(), EDGE_CLASSES]));
    }
    if shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "{} edge logits but {} edge labels",
            shape[0],
            labels.len()
        )));
    }
    if labels.iter().any(|&c| c >= EDGE_CLASSES) {
        return Err(Error::Contract("edge label outside 0..4".into()));
    }
    let mut onehot = Tensor::zeros(&shape);
    for (r, &c) in labels.iter().enumerate() {
        onehot.data_mut()[r * EDGE_CLASSES + c] = 1.0;
    }
    let log_probs = g.log_softmax_rows(logits)?;
    let target = g.constant(onehot);
    let picked = g.mul(target, log_probs)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// `L_WA + lambda * L_E`.
pub fn combined_loss(g: &mut Graph<'_>, lwa: Var, le: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let scaled = g.scale(le, lambda);
    g.add(lwa, scaled)
}
