//! Multi-dimensional edge feature learning.
//!
//! FAM attends each AU map against the full face; ARM then attends the two
//! FAM outputs of a pair against each other, and pooling yields one edge
//! vector per direction.

use rand::Rng;

use crate::anfl::{AuFeatureMaps, FaceRepresentation};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{lookup, uniform_init};
use crate::tensor::{ParamId, ParamStore};

/// Single-head attention projections. The logit scale is `1/sqrt(d_k)` with
/// `d_k` the key projection width.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: usize) -> Result<Self> {
        let mut mk = |n: &str| store.add(format!("{prefix}.{n}"), uniform_init(rng, &[channels, channels], channels));
        Ok(Self {
            w_q: mk("w_q")?,
            w_k: mk("w_k")?,
            w_v: mk("w_v")?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: lookup(store, &format!("{prefix}.w_q"))?,
            w_k: lookup(store, &format!("{prefix}.w_k"))?,
            w_v: lookup(store, &format!("{prefix}.w_v"))?,
        })
    }
}

/// Directed edge features for every ordered pair `(i, j)`, `i != j`, stored
/// as rows of an `N(N-1) × C` matrix in lexicographic pair order.
#[derive(Debug, Clone, Copy)]
pub struct EdgeFeatureSet {
    pub e: Var,
    pub n: usize,
}

impl EdgeFeatureSet {
    pub fn count(&self) -> usize {
        self.n * (self.n - 1)
    }

    /// Row index of edge `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        edge_index(self.n, i, j)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        edge_pairs(self.n)
    }
}

pub fn edge_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// All ordered pairs `(i, j)`, `i != j`, in lexicographic order.
pub fn edge_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// `softmax(A W_q (B W_k)^T / sqrt(d_k)) B W_v`, also returning the
/// attention weights (queries × keys).
pub fn cross_attention_with_weights(
    g: &mut Graph<'_>,
    query_src: Var,
    kv_src: Var,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    let (sq, sk) = (g.shape(query_src), g.shape(kv_src));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape("cross_attention", sq, sk));
    }
    let (w_q, w_k, w_v) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let d_k = g.shape(w_k)[1] as f64;
    let q = g.matmul(query_src, w_q)?;
    let k = g.matmul(kv_src, w_k)?;
    let v = g.matmul(kv_src, w_v)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / d_k.sqrt());
    let weights = g.softmax_rows(logits)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn cross_attention(g: &mut Graph<'_>, query_src: Var, kv_src: Var, p: &AttentionParams) -> Result<Var> {
    cross_attention_with_weights(g, query_src, kv_src, p).map(|(out, _)| out)
}

/// FAM for a pair: each AU map queries the face representation.
pub fn fam(
    g: &mut Graph<'_>,
    u_i: Var,
    u_j: Var,
    x: &FaceRepresentation,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    Ok((cross_attention(g, u_i, x.x, p)?, cross_attention(g, u_j, x.x, p)?))
}

/// ARM for a pair of FAM outputs, pooled into `(e_ij, e_ji)`.
///
/// `e_ij` comes from attention with `f_j` as query over `f_i`; `e_ji` the reverse.
pub fn arm(g: &mut Graph<'_>, f_i: Var, f_j: Var, p: &AttentionParams) -> Result<(Var, Var)> {
    let (e_ij, e_ji, _) = arm_traced(g, f_i, f_j, p)?;
    Ok((e_ij, e_ji))
}

fn arm_traced(g: &mut Graph<'_>, f_i: Var, f_j: Var, p: &AttentionParams) -> Result<(Var, Var, [Var; 2])> {
    let (r_ij, w_ij) = cross_attention_with_weights(g, f_j, f_i, p)?;
    let (r_ji, w_ji) = cross_attention_with_weights(g, f_i, f_j, p)?;
    let e_ij = g.global_average_pool(r_ij)?;
    let e_ji = g.global_average_pool(r_ji)?;
    Ok((e_ij, e_ji, [w_ij, w_ji]))
}

#[derive(Debug, Clone, Copy)]
pub struct MeflParams {
    pub fam: AttentionParams,
    pub arm: AttentionParams,
}

impl MeflParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: usize) -> Result<Self> {
        Ok(Self {
            fam: AttentionParams::new(store, rng, "mefl.fam", channels)?,
            arm: AttentionParams::new(store, rng, "mefl.arm", channels)?,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            fam: AttentionParams::lookup(store, "mefl.fam")?,
            arm: AttentionParams::lookup(store, "mefl.arm")?,
        })
    }
}

/// Edge features for all `N(N-1)` ordered pairs, regardless of any FGG
/// adjacency.
pub fn mefl_forward(
    g: &mut Graph<'_>,
    maps: &AuFeatureMaps,
    x: &FaceRepresentation,
    p: &MeflParams,
) -> Result<EdgeFeatureSet> {
    mefl_forward_traced(g, maps, x, p, None)
}

/// As [`mefl_forward`], optionally collecting every attention weight matrix
/// (FAM first, then ARM).
pub fn mefl_forward_traced(
    g: &mut Graph<'_>,
    maps: &AuFeatureMaps,
    x: &FaceRepresentation,
    p: &MeflParams,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<EdgeFeatureSet> {
    let n = maps.u.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 AUs, got {n}")));
    }
    // FAM output depends only on one AU, so compute it once per AU.
    let mut attended = Vec::with_capacity(n);
    for &u in &maps.u {
        let (f, w) = cross_attention_with_weights(g, u, x.x, &p.fam)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(w);
        }
        attended.push(f);
    }
    let mut slots: Vec<Option<Var>> = vec![None; n * (n - 1)];
    for i in 0..n {
        for j in i + 1..n {
            let (e_ij, e_ji, weights) = arm_traced(g, attended[i], attended[j], &p.arm)?;
            if let Some(t) = trace.as_deref_mut() {
                t.extend(weights);
            }
            slots[edge_index(n, i, j)] = Some(e_ij);
            slots[edge_index(n, j, i)] = Some(e_ji);
        }
    }
    let rows: Vec<Var> = slots.into_iter().map(|s| s.expect("all pairs filled")).collect();
    let e = g.stack(&rows)?;
    Ok(EdgeFeatureSet { e, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn identity_attention(store: &mut ParamStore, c: usize) -> AttentionParams {
        AttentionParams {
            w_q: store.add("q", Tensor::identity(c)).unwrap(),
            w_k: store.add("k", Tensor::identity(c)).unwrap(),
            w_v: store.add("v", Tensor::identity(c)).unwrap(),
        }
    }

    #[test]
    fn edge_indexing_is_lexicographic() {
        let pairs = edge_pairs(3);
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!(edge_index(3, i, j), k);
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 1);
        let mut g = Graph::with_params(&store);
        let a = g.constant(rows(&[&[0.0], &[0.0]]));
        let b = g.constant(rows(&[&[1.0], &[3.0]]));
        let out = cross_attention(&mut g, a, b, &p).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 2.0]);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::new(&mut store, &mut rng, "att", 3).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.constant(rows(&[&[0.3, -1.0, 2.0]]));
        let b = g.constant(rows(&[&[1.0, 0.5, -0.5]]));
        let out = cross_attention(&mut g, a, b, &p).unwrap();
        let wv = g.param(p.w_v);
        let bv = g.matmul(b, wv).unwrap();
        assert_eq!(g.value(out).data(), g.value(bv).data());
    }

    #[test]
    fn zero_query_key_maps_give_uniform_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::new(&mut store, &mut rng, "att", 2).unwrap();
        store.set(p.w_q, Tensor::zeros(&[2, 2])).unwrap();
        store.set(p.w_k, Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.constant(rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let b = g.constant(rows(&[&[1.0, -1.0], &[0.0, 2.0], &[4.0, 1.0]]));
        let (out, w) = cross_attention_with_weights(&mut g, a, b, &p).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let wv = g.param(p.w_v);
        let bv = g.matmul(b, wv).unwrap();
        let mean = g.global_average_pool(bv).unwrap();
        let mean = g.value(mean).data().to_vec();
        for r in 0..3 {
            for (x, m) in g.value(out).row(r).iter().zip(&mean) {
                assert!((x - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 2);
        let mut g = Graph::with_params(&store);
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(cross_attention(&mut g, a, b, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn fam_same_query_same_output_and_single_key() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = AttentionParams::new(&mut store, &mut rng, "fam", 2).unwrap();
        let mut g = Graph::with_params(&store);
        let u = g.constant(rows(&[&[0.5, 1.0], &[-1.0, 0.2]]));
        let xv = g.constant(rows(&[&[1.0, 0.0], &[0.3, 0.7]]));
        let x = FaceRepresentation::new(&g, xv).unwrap();
        let (fi, fj) = fam(&mut g, u, u, &x, &p).unwrap();
        assert_eq!(g.value(fi).data(), g.value(fj).data());

        let x1 = g.constant(rows(&[&[0.4, -0.6]]));
        let x1 = FaceRepresentation::new(&g, x1).unwrap();
        let ui = g.constant(rows(&[&[3.0, 1.0]]));
        let uj = g.constant(rows(&[&[-2.0, 5.0]]));
        let (fi, fj) = fam(&mut g, ui, uj, &x1, &p).unwrap();
        let wv = g.param(p.w_v);
        let xw = g.matmul(x1.x, wv).unwrap();
        assert_eq!(g.value(fi).data(), g.value(xw).data());
        assert_eq!(g.value(fj).data(), g.value(xw).data());
    }

    #[test]
    fn arm_symmetric_inputs_and_single_position() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = AttentionParams::new(&mut store, &mut rng, "arm", 3).unwrap();
        let mut g = Graph::with_params(&store);
        let f = g.constant(rows(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]]));
        let (e_ij, e_ji) = arm(&mut g, f, f, &p).unwrap();
        assert_eq!(g.value(e_ij).data(), g.value(e_ji).data());
        assert_eq!(g.shape(e_ij), &[3]);

        let fi = g.constant(rows(&[&[1.0, 2.0, 3.0]]));
        let fj = g.constant(rows(&[&[-1.0, 0.0, 2.0]]));
        let (e_ij, e_ji) = arm(&mut g, fi, fj, &p).unwrap();
        let wv = g.param(p.w_v);
        let fiw = g.matmul(fi, wv).unwrap();
        let fjw = g.matmul(fj, wv).unwrap();
        assert_eq!(g.value(e_ij).data(), g.value(fiw).data());
        assert_eq!(g.value(e_ji).data(), g.value(fjw).data());
    }

    #[test]
    fn mefl_edge_counts_and_identical_maps() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = MeflParams::new(&mut store, &mut rng, 3).unwrap();
        for n in [2usize, 4] {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(rows(&[&[0.5, -0.2, 1.0], &[0.1, 0.9, -0.4]]));
            let x = FaceRepresentation::new(&g, xv).unwrap();
            let u = g.constant(rows(&[&[1.0, 0.0, 0.5], &[0.2, 0.3, -1.0]]));
            let maps = AuFeatureMaps { u: vec![u; n] };
            let edges = mefl_forward(&mut g, &maps, &x, &p).unwrap();
            assert_eq!(g.shape(edges.e), &[n * (n - 1), 3]);
            let t = g.value(edges.e);
            for r in 1..edges.count() {
                assert_eq!(t.row(r), t.row(0));
            }
        }
    }
}
