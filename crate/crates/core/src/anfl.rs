//! Relationship-aware node feature learning.
//!
//! Per-AU projections of the face representation are pooled into node
//! features, a K-nearest-neighbour graph is built from their dot-product
//! similarity, one residual GCN layer updates the nodes, and a cosine
//! classifier against learned anchors turns them into probabilities.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{lookup, normal_init, uniform_init, Linear};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Added to each norm in the cosine classifier.
pub const NORM_EPS: f64 = 1e-8;

/// Full-face representation `X`: D spatial positions by C channels.
#[derive(Debug, Clone, Copy)]
pub struct FaceRepresentation {
    pub x: Var,
    pub positions: usize,
    pub channels: usize,
}

impl FaceRepresentation {
    pub fn new(g: &Graph<'_>, x: Var) -> Result<Self> {
        let t = g.value(x);
        match *t.shape() {
            [d, c] if d >= 1 && c >= 1 => {
                if !t.is_finite() {
                    return Err(Error::Numeric("face representation".into()));
                }
                Ok(Self {
                    x,
                    positions: d,
                    channels: c,
                })
            }
            _ => Err(Error::shape("face representation", t.shape(), &[])),
        }
    }
}

/// One D×C map `U_i` per AU.
#[derive(Debug, Clone)]
pub struct AuFeatureMaps {
    pub u: Vec<Var>,
}

/// Node features, one row per AU (N×C).
#[derive(Debug, Clone, Copy)]
pub struct NodeFeatureSet {
    pub v: Var,
}

/// Directed K-nearest-neighbour adjacency without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    k: usize,
    a: Vec<u8>,
}

impl Adjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.a[i * self.n + j] == 1
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.a[i * self.n..(i + 1) * self.n]
            .iter()
            .map(|&x| x as usize)
            .sum()
    }

    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.a.iter().map(|&x| x as f64).collect();
        Tensor::new(vec![self.n, self.n], data).expect("square")
    }

    /// An adjacency from an explicit 0/1 matrix, bypassing the K-row check.
    pub fn from_matrix(n: usize, a: Vec<u8>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::shape("adjacency", &[n, n], &[a.len()]));
        }
        let k = if n == 0 { 0 } else { a[..n].iter().map(|&x| x as usize).sum() };
        Ok(Self { n, k, a })
    }
}

/// Per-AU fully connected maps C→C with bias.
#[derive(Debug, Clone)]
pub struct Afg {
    pub fcs: Vec<Linear>,
}

impl Afg {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, n_aus: usize, channels: usize) -> Result<Self> {
        let fcs = (0..n_aus)
            .map(|i| Linear::new(store, rng, &format!("afg.{i}"), channels, channels, true))
            .collect::<Result<_>>()?;
        Ok(Self { fcs })
    }

    pub fn lookup(store: &ParamStore, n_aus: usize) -> Result<Self> {
        let fcs = (0..n_aus)
            .map(|i| Linear::lookup(store, &format!("afg.{i}"), true))
            .collect::<Result<_>>()?;
        Ok(Self { fcs })
    }
}

/// Message and update maps of the single FGG GCN layer; activation is ReLU.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayerParams {
    pub w_msg: ParamId,
    pub w_upd: ParamId,
}

impl GcnLayerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            w_msg: store.add(format!("{prefix}.w_msg"), uniform_init(rng, &[channels, channels], channels))?,
            w_upd: store.add(format!("{prefix}.w_upd"), uniform_init(rng, &[channels, channels], channels))?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_msg: lookup(store, &format!("{prefix}.w_msg"))?,
            w_upd: lookup(store, &format!("{prefix}.w_upd"))?,
        })
    }
}

/// Trainable anchor vectors `s_i`, one row per AU.
#[derive(Debug, Clone, Copy)]
pub struct ScClassifier {
    pub anchors: ParamId,
}

impl ScClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, n_aus: usize, channels: usize) -> Result<Self> {
        let anchors = store.add(format!("{name}.anchors"), normal_init(rng, &[n_aus, channels], 0.1))?;
        Ok(Self { anchors })
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            anchors: lookup(store, &format!("{name}.anchors"))?,
        })
    }
}

/// Projects `X` through each AU's map and pools the result.
pub fn afg_forward(
    g: &mut Graph<'_>,
    x: &FaceRepresentation,
    afg: &Afg,
    n_aus: usize,
) -> Result<(AuFeatureMaps, NodeFeatureSet)> {
    if afg.fcs.len() != n_aus {
        return Err(Error::Config(format!(
            "expected {n_aus} AU-specific maps, got {}",
            afg.fcs.len()
        )));
    }
    let mut maps = Vec::with_capacity(n_aus);
    let mut pooled = Vec::with_capacity(n_aus);
    for fc in &afg.fcs {
        let u = fc.forward(g, x.x)?;
        pooled.push(g.global_average_pool(u)?);
        maps.push(u);
    }
    let v = g.stack(&pooled)?;
    Ok((AuFeatureMaps { u: maps }, NodeFeatureSet { v }))
}

/// For every node, connects the `k` other nodes with the largest raw dot
/// product. Ties go to the smaller index.
pub fn build_topology(v: &Tensor, k: usize) -> Result<Adjacency> {
    let &[n, c] = v.shape() else {
        return Err(Error::shape("build_topology", v.shape(), &[]));
    };
    if n < 2 || k < 1 || k > n - 1 {
        return Err(Error::Config(format!(
            "K must lie in [1, N-1] for N = {n}, got {k}"
        )));
    }
    let data = v.data();
    let dot = |i: usize, j: usize| -> f64 {
        data[i * c..(i + 1) * c]
            .iter()
            .zip(&data[j * c..(j + 1) * c])
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut a = vec![0u8; n * n];
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (dot(i, j), j)).collect();
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(_, j) in candidates.iter().take(k) {
            a[i * n + j] = 1;
        }
    }
    Ok(Adjacency { n, k, a })
}

/// `v_i' = ReLU(v_i + (sum_j a_ij v_j W_msg) W_upd)`, with the adjacency
/// held constant.
pub fn fgg_gcn_layer(
    g: &mut Graph<'_>,
    nodes: NodeFeatureSet,
    adjacency: &Adjacency,
    p: &GcnLayerParams,
) -> Result<NodeFeatureSet> {
    let a = g.constant(adjacency.to_tensor());
    let w_msg = g.param(p.w_msg);
    let w_upd = g.param(p.w_upd);
    let msg = g.matmul(nodes.v, w_msg)?;
    let agg = g.matmul(a, msg)?;
    let upd = g.matmul(agg, w_upd)?;
    let sum = g.add(nodes.v, upd)?;
    Ok(NodeFeatureSet { v: g.relu(sum) })
}

/// Cosine similarity between `ReLU(v_i)` and `ReLU(s_i)` per row; an all-zero
/// row yields 0.
pub fn sc_predict(g: &mut Graph<'_>, nodes: NodeFeatureSet, anchors: Var) -> Result<Var> {
    if g.shape(nodes.v) != g.shape(anchors) {
        return Err(Error::shape("sc_predict", g.shape(nodes.v), g.shape(anchors)));
    }
    let rv = g.relu(nodes.v);
    let rs = g.relu(anchors);
    let prod = g.mul(rv, rs)?;
    let dot = g.sum_cols(prod)?;
    let nv = g.norm_rows(rv)?;
    let ns = g.norm_rows(rs)?;
    let nv = g.add_scalar(nv, NORM_EPS);
    let ns = g.add_scalar(ns, NORM_EPS);
    let denom = g.mul(nv, ns)?;
    let inv = g.powf(denom, -1.0);
    g.mul(dot, inv)
}

impl ScClassifier {
    pub fn predict(&self, g: &mut Graph<'_>, nodes: NodeFeatureSet) -> Result<Var> {
        let s = g.param(self.anchors);
        sc_predict(g, nodes, s)
    }
}

#[derive(Debug, Clone)]
pub struct AnflParams {
    pub afg: Afg,
    pub gcn: GcnLayerParams,
    pub sc: ScClassifier,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct AnflOutput {
    pub probabilities: Var,
    pub maps: AuFeatureMaps,
    /// Pooled AFG features (before the GCN update).
    pub nodes: NodeFeatureSet,
    pub updated: NodeFeatureSet,
    pub adjacency: Adjacency,
}

/// AFG, topology, GCN update and cosine classifier in sequence.
pub fn anfl_forward(g: &mut Graph<'_>, x: &FaceRepresentation, p: &AnflParams) -> Result<AnflOutput> {
    let n = p.afg.fcs.len();
    let (maps, nodes) = afg_forward(g, x, &p.afg, n)?;
    let adjacency = build_topology(g.value(nodes.v), p.k)?;
    let updated = fgg_gcn_layer(g, nodes, &adjacency, &p.gcn)?;
    let probabilities = p.sc.predict(g, updated)?;
    Ok(AnflOutput {
        probabilities,
        maps,
        nodes,
        updated,
        adjacency,
    })
}
