//! Edge-gated residual graph convolution over the dense directed relation graph.
//!
//! One layer updates edges and nodes:
//!
//! ```text
//! e'_ij = e_ij + ReLU(e_ij W3 + v_i W4 + v_j W5)
//! eta_ij = sigmoid(e'_ij) / (sum_{j' != i} sigmoid(e'_ij') + eps)
//! v'_i  = v_i + ReLU(v_i W1 + sum_{j != i} eta_ij * (v_j W2))
//! ```

use rand::Rng;

use crate::anfl::{NodeFeatureSet, ScClassifier};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mefl::{edge_pairs, EdgeFeatureSet};
use crate::nn::{lookup, uniform_init};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const GATE_EPS: f64 = 1e-6;

/// Node/edge features at layer `layer_index` of the classifier.
#[derive(Debug, Clone, Copy)]
pub struct RelationGraph {
    pub nodes: NodeFeatureSet,
    pub edges: EdgeFeatureSet,
    pub layer_index: usize,
}

/// `w[0]` node self, `w[1]` neighbour, `w[2]` edge self, `w[3]` source
/// node, `w[4]` target node; all C×C.
#[derive(Debug, Clone, Copy)]
pub struct GatedGcnLayerParams {
    pub w: [ParamId; 5],
}

impl GatedGcnLayerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(5);
        for k in 1..=5 {
            ids.push(store.add(
                format!("{prefix}.w{k}"),
                uniform_init(rng, &[channels, channels], channels),
            )?);
        }
        Ok(Self {
            w: ids.try_into().expect("five maps"),
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let ids = (1..=5)
            .map(|k| lookup(store, &format!("{prefix}.w{k}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            w: ids.try_into().expect("five maps"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GatedGcnParams {
    pub layers: Vec<GatedGcnLayerParams>,
    pub classifier: ScClassifier,
}

impl GatedGcnParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        n_layers: usize,
        n_aus: usize,
        channels: usize,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| GatedGcnLayerParams::new(store, rng, &format!("gcn.{l}"), channels))
            .collect::<Result<_>>()?;
        let classifier = ScClassifier::new(store, rng, "sc2", n_aus, channels)?;
        Ok(Self { layers, classifier })
    }

    pub fn lookup(store: &ParamStore, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| GatedGcnLayerParams::lookup(store, &format!("gcn.{l}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            classifier: ScClassifier::lookup(store, "sc2")?,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Constant index data shared by every layer of one graph.
struct EdgeIndex {
    src: Vec<usize>,
    dst: Vec<usize>,
    /// N × E, one where the edge leaves node i.
    outgoing: Tensor,
}

impl EdgeIndex {
    fn new(n: usize) -> Self {
        let pairs = edge_pairs(n);
        let e = pairs.len();
        let mut outgoing = Tensor::zeros(&[n, e]);
        for (k, &(i, _)) in pairs.iter().enumerate() {
            outgoing.data_mut()[i * e + k] = 1.0;
        }
        Self {
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
            outgoing,
        }
    }
}

/// Applies one gated layer; `num_layers` is the model depth L.
pub fn gated_layer(
    g: &mut Graph<'_>,
    graph: &RelationGraph,
    p: &GatedGcnLayerParams,
    num_layers: usize,
) -> Result<RelationGraph> {
    gated_layer_with_gates(g, graph, p, num_layers).map(|(out, _)| out)
}

/// As [`gated_layer`], also returning the gate matrix η (E × C).
pub fn gated_layer_with_gates(
    g: &mut Graph<'_>,
    graph: &RelationGraph,
    p: &GatedGcnLayerParams,
    num_layers: usize,
) -> Result<(RelationGraph, Var)> {
    if graph.layer_index >= num_layers {
        return Err(Error::Contract(format!(
            "layer {} requested but the model has {num_layers} layers",
            graph.layer_index
        )));
    }
    let n = graph.edges.n;
    let idx = EdgeIndex::new(n);
    let v = graph.nodes.v;
    let e = graph.edges.e;
    let [w1, w2, w3, w4, w5] = p.w.map(|id| g.param(id));

    // edge update
    let e_self = g.matmul(e, w3)?;
    let v_src = g.matmul(v, w4)?;
    let v_src = g.index_rows(v_src, &idx.src)?;
    let v_dst = g.matmul(v, w5)?;
    let v_dst = g.index_rows(v_dst, &idx.dst)?;
    let pre = g.add(e_self, v_src)?;
    let pre = g.add(pre, v_dst)?;
    let act = g.relu(pre);
    let e_new = g.add(e, act)?;

    // gates, normalised over each node's outgoing edges
    let sig = g.sigmoid(e_new);
    let outgoing = g.constant(idx.outgoing);
    let totals = g.matmul(outgoing, sig)?;
    let totals = g.index_rows(totals, &idx.src)?;
    let totals = g.add_scalar(totals, GATE_EPS);
    let inv = g.powf(totals, -1.0);
    let eta = g.mul(sig, inv)?;

    // node update
    let neigh = g.matmul(v, w2)?;
    let neigh = g.index_rows(neigh, &idx.dst)?;
    let msg = g.mul(eta, neigh)?;
    let agg = g.matmul(outgoing, msg)?;
    let own = g.matmul(v, w1)?;
    let pre_v = g.add(own, agg)?;
    let act_v = g.relu(pre_v);
    let v_new = g.add(v, act_v)?;

    Ok((
        RelationGraph {
            nodes: NodeFeatureSet { v: v_new },
            edges: EdgeFeatureSet { e: e_new, n },
            layer_index: graph.layer_index + 1,
        },
        eta,
    ))
}

/// Cosine-classifies the final node features.
pub fn classify(g: &mut Graph<'_>, graph: &RelationGraph, cls: &ScClassifier, num_layers: usize) -> Result<Var> {
    if graph.layer_index != num_layers {
        return Err(Error::Contract(format!(
            "classify expects layer {num_layers}, graph is at layer {}",
            graph.layer_index
        )));
    }
    cls.predict(g, graph.nodes)
}

/// Runs all L layers from `G^0` and classifies; also returns `G^L`.
pub fn gcn_forward(
    g: &mut Graph<'_>,
    v0: NodeFeatureSet,
    e0: EdgeFeatureSet,
    p: &GatedGcnParams,
) -> Result<(Var, RelationGraph)> {
    let depth = p.num_layers();
    if depth == 0 {
        return Err(Error::Config("the gated GCN needs at least one layer".into()));
    }
    let mut graph = RelationGraph {
        nodes: v0,
        edges: e0,
        layer_index: 0,
    };
    for layer in &p.layers {
        graph = gated_layer(g, &graph, layer, depth)?;
    }
    let probs = classify(g, &graph, &p.classifier, depth)?;
    Ok((probs, graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anfl::sc_predict;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, c: usize, layers: usize, seed: u64) -> (ParamStore, GatedGcnParams, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = GatedGcnParams::new(&mut store, &mut rng, layers, n, c).unwrap();
        let v = uniform_init(&mut rng, &[n, c], 1);
        let e = uniform_init(&mut rng, &[n * (n - 1), c], 1);
        (store, params, v, e)
    }

    fn zero_layers(store: &mut ParamStore, params: &GatedGcnParams, c: usize) {
        for l in &params.layers {
            for &w in &l.w {
                store.set(w, Tensor::zeros(&[c, c])).unwrap();
            }
        }
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let (mut store, params, v, e) = setup(4, 3, 2, 1);
        zero_layers(&mut store, &params, 3);
        let mut g = Graph::with_params(&store);
        let v0 = g.constant(v.clone());
        let e0 = g.constant(e.clone());
        let graph = RelationGraph {
            nodes: NodeFeatureSet { v: v0 },
            edges: EdgeFeatureSet { e: e0, n: 4 },
            layer_index: 0,
        };
        let (out, eta) = gated_layer_with_gates(&mut g, &graph, &params.layers[0], 2).unwrap();
        assert_eq!(g.value(out.nodes.v), &v);
        assert_eq!(g.value(out.edges.e).data(), e.data());
        // every gate of node i divides sigmoid(e_ij) by a near-equal total
        let eta = g.value(eta);
        assert!(eta.data().iter().all(|&x| x > 0.0 && x < 1.0));

        let (probs, last) = gcn_forward(&mut g, NodeFeatureSet { v: v0 }, EdgeFeatureSet { e: e0, n: 4 }, &params).unwrap();
        assert_eq!(g.value(last.nodes.v), &v);
        let anchors = g.param(params.classifier.anchors);
        let direct = sc_predict(&mut g, NodeFeatureSet { v: v0 }, anchors).unwrap();
        assert_eq!(g.value(probs).data(), g.value(direct).data());
    }

    #[test]
    fn single_neighbour_gate_is_near_one() {
        let (store, params, v, e) = setup(2, 1, 1, 2);
        let mut g = Graph::with_params(&store);
        let v0 = g.constant(v);
        let e0 = g.constant(e);
        let graph = RelationGraph {
            nodes: NodeFeatureSet { v: v0 },
            edges: EdgeFeatureSet { e: e0, n: 2 },
            layer_index: 0,
        };
        let (out, eta) = gated_layer_with_gates(&mut g, &graph, &params.layers[0], 1).unwrap();
        for &x in g.value(eta).data() {
            assert!((x - 1.0).abs() < 1e-5, "{x}");
        }
        assert_eq!(g.shape(out.nodes.v), &[2, 1]);
        assert_eq!(g.shape(out.edges.e), &[2, 1]);
        assert_eq!(out.layer_index, 1);
    }

    #[test]
    fn exhausted_layers_and_wrong_layer_classify() {
        let (store, params, v, e) = setup(3, 2, 1, 3);
        let mut g = Graph::with_params(&store);
        let v0 = g.constant(v);
        let e0 = g.constant(e);
        let graph = RelationGraph {
            nodes: NodeFeatureSet { v: v0 },
            edges: EdgeFeatureSet { e: e0, n: 3 },
            layer_index: 1,
        };
        assert!(matches!(
            gated_layer(&mut g, &graph, &params.layers[0], 1),
            Err(Error::Contract(_))
        ));
        let early = RelationGraph { layer_index: 0, ..graph };
        assert!(matches!(
            classify(&mut g, &early, &params.classifier, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_nodes_classify_to_zero() {
        let (store, params, _, e) = setup(3, 2, 2, 4);
        let mut g = Graph::with_params(&store);
        let v0 = g.constant(Tensor::zeros(&[3, 2]));
        let e0 = g.constant(e);
        let graph = RelationGraph {
            nodes: NodeFeatureSet { v: v0 },
            edges: EdgeFeatureSet { e: e0, n: 3 },
            layer_index: 2,
        };
        let p = classify(&mut g, &graph, &params.classifier, 2).unwrap();
        assert_eq!(g.value(p).data(), &[0.0; 3]);
    }

    #[test]
    fn gates_bounded_and_row_sums_at_most_one() {
        for seed in 0..20 {
            let (store, params, v, e) = setup(4, 3, 1, 100 + seed);
            let mut g = Graph::with_params(&store);
            let v0 = g.constant(v);
            let e0 = g.constant(e);
            let graph = RelationGraph {
                nodes: NodeFeatureSet { v: v0 },
                edges: EdgeFeatureSet { e: e0, n: 4 },
                layer_index: 0,
            };
            let (_, eta) = gated_layer_with_gates(&mut g, &graph, &params.layers[0], 1).unwrap();
            let eta = g.value(eta);
            assert!(eta.data().iter().all(|&x| x > 0.0 && x < 1.0));
            for i in 0..4 {
                for ch in 0..3 {
                    let s: f64 = (0..3).map(|k| eta.row(i * 3 + k)[ch]).sum();
                    assert!(s <= 1.0);
                }
            }
        }
    }
}
