//! Finite-difference checks of every composite forward + loss on tiny
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anfl::{anfl_forward, Afg, AnflParams, FaceRepresentation, GcnLayerParams, NodeFeatureSet, ScClassifier};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gated_gcn::{gcn_forward, GatedGcnParams};
use crate::gradcheck::{grad_check, GradCheckOptions, WorstCoordinate};
use crate::losses::{combined_loss, edge_cooccurrence_loss, edge_head, edge_labels, weighted_asymmetric_loss, EdgeHead, OccurrenceStats};
use crate::mefl::{mefl_forward, EdgeFeatureSet, MeflParams};
use crate::nn::uniform_init;
use crate::tensor::{ParamStore, Tensor};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Instance sizes: AUs, positions, channels.
pub const N: usize = 3;
pub const D: usize = 4;
pub const C: usize = 5;

/// Smallest analytic gradient magnitude, relative to `max(1, |loss|)`, that
/// central differences at the default step resolve to within tolerance.
/// Roundoff in the loss is about 1e-16 |loss|, divided by the step.
pub const RESOLVABLE: f64 = 1e-5;

/// Draws tried per component before checking the last one regardless.
pub const MAX_DRAWS: u64 = 256;

type Objective = Box<dyn Fn(&mut Graph<'_>) -> Result<Var>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub max_relative_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    /// Instances discarded because some gradient was below resolution.
    pub redraws: u64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= TOLERANCE
    }
}

fn random_labels(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut y: Vec<u8> = (0..N).map(|_| rng.random_range(0..2)).collect();
    // Keep both classes present so both loss branches are exercised.
    y[0] = 1;
    y[N - 1] = 0;
    y
}

fn stats() -> OccurrenceStats {
    OccurrenceStats::from_rates(vec![0.5, 0.25, 0.4]).expect("valid rates")
}

fn input(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<crate::tensor::ParamId> {
    store.add(name, uniform_init(rng, shape, 1))
}

/// Redraws weights from U[-1, 1], biases from U[1, 2] and classifier
/// anchors from U[0.2, 1]. Fan-in scaled weights make attention nearly
/// uniform, and negative pre-activations leave ReLU channels dead; both
/// leave gradients below what central differences can resolve.
fn redraw(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.tensor(id).shape().to_vec();
        let n = store.tensor(id).len();
        let name = &store.get(id).name;
        let t = if name.ends_with(".anchors") {
            Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..1.0)).collect())?
        } else if name.ends_with(".bias") {
            Tensor::new(shape, (0..n).map(|_| rng.random_range(1.0..2.0)).collect())?
        } else {
            uniform_init(rng, &shape, 1)
        };
        store.set(id, t)?;
    }
    Ok(())
}

/// Smallest analytic gradient magnitude over every coordinate, scaled by
/// `max(1, |loss|)`.
fn resolution(store: &ParamStore, f: &Objective) -> Result<f64> {
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    let loss = g.value(out).data()[0];
    let grads = g.backward(out)?;
    let mut smallest = f64::INFINITY;
    for id in store.ids() {
        let n = store.tensor(id).len();
        match grads.param(id) {
            Some(v) => v.iter().for_each(|x| smallest = smallest.min(x.abs())),
            None if n > 0 => smallest = 0.0,
            None => {}
        }
    }
    Ok(smallest / loss.abs().max(1.0))
}

/// Draws instances from `build` until every gradient is resolvable, then
/// runs the finite-difference check on that instance.
fn conditioned<B>(component: &'static str, seed: u64, opts: GradCheckOptions, build: B) -> Result<ComponentCheck>
where
    B: Fn(&mut ChaCha8Rng) -> Result<(ParamStore, Objective)>,
{
    let mut redraws = 0;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(redraws);
        let (mut store, f) = build(&mut rng)?;
        if redraws + 1 < MAX_DRAWS && resolution(&store, &f)? < RESOLVABLE {
            redraws += 1;
            continue;
        }
        let r = grad_check(&mut store, opts, f)?;
        return Ok(ComponentCheck {
            component,
            max_relative_error: r.max_relative_error,
            worst: r.worst,
            checked: r.checked,
            redraws,
        });
    }
}

/// AFG, FGG, SC and the weighted asymmetric loss, differentiated down to `X`.
pub fn check_anfl(seed: u64, opts: GradCheckOptions) -> Result<ComponentCheck> {
    conditioned("anfl+l_wa", seed, opts, |rng| {
        let mut store = ParamStore::new();
        let x = input(&mut store, rng, "x", &[D, C])?;
        let params = AnflParams {
            afg: Afg::new(&mut store, rng, N, C)?,
            gcn: GcnLayerParams::new(&mut store, rng, "fgg", C)?,
            sc: ScClassifier::new(&mut store, rng, "sc1", N, C)?,
            k: 1,
        };
        redraw(&mut store, rng)?;
        let labels = random_labels(rng);
        let stats = stats();
        let f: Objective = Box::new(move |g: &mut Graph<'_>| {
            let xv = g.param(x);
            let face = FaceRepresentation::new(g, xv)?;
            let out = anfl_forward(g, &face, &params)?;
            weighted_asymmetric_loss(g, out.probabilities, &labels, &stats)
        });
        Ok((store, f))
    })
}

/// FAM + ARM edge features reduced to a scalar by a fixed random projection.
pub fn check_mefl(seed: u64, opts: GradCheckOptions) -> Result<ComponentCheck> {
    conditioned("mefl", seed, opts, |rng| {
        let mut store = ParamStore::new();
        let x = input(&mut store, rng, "x", &[D, C])?;
        let afg = Afg::new(&mut store, rng, N, C)?;
        let mefl = MeflParams::new(&mut store, rng, C)?;
        redraw(&mut store, rng)?;
        let probe = uniform_init(rng, &[N * (N - 1), C], 1);
        let f: Objective = Box::new(move |g: &mut Graph<'_>| {
            let xv = g.param(x);
            let face = FaceRepresentation::new(g, xv)?;
            let (maps, _) = crate::anfl::afg_forward(g, &face, &afg, N)?;
            let edges = mefl_forward(g, &maps, &face, &mefl)?;
            let w = g.constant(probe.clone());
            let weighted = g.mul(edges.e, w)?;
            Ok(g.sum(weighted))
        });
        Ok((store, f))
    })
}

/// Gated GCN, stage-2 classifier, edge head and `L_WA + lambda L_E`,
/// differentiated down to the initial node and edge features.
pub fn check_gated_gcn(seed: u64, lambda: f64, opts: GradCheckOptions) -> Result<ComponentCheck> {
    conditioned("gated_gcn+l_wa+l_e", seed, opts, |rng| {
        let mut store = ParamStore::new();
        let v0 = input(&mut store, rng, "v0", &[N, C])?;
        let e0 = input(&mut store, rng, "e0", &[N * (N - 1), C])?;
        let gcn = GatedGcnParams::new(&mut store, rng, 2, N, C)?;
        let head = EdgeHead::new(&mut store, rng, C)?;
        redraw(&mut store, rng)?;
        let labels = random_labels(rng);
        let pair_labels = edge_labels(&labels);
        let stats = stats();
        let f: Objective = Box::new(move |g: &mut Graph<'_>| {
            let nodes = NodeFeatureSet { v: g.param(v0) };
            let edges = EdgeFeatureSet { e: g.param(e0), n: N };
            let (probs, last) = gcn_forward(g, nodes, edges, &gcn)?;
            let lwa = weighted_asymmetric_loss(g, probs, &labels, &stats)?;
            let logits = edge_head(g, last.edges.e, &head)?;
            let le = edge_cooccurrence_loss(g, logits, &pair_labels)?;
            combined_loss(g, lwa, le, lambda)
        });
        Ok((store, f))
    })
}

/// All components, in pipeline order.
pub fn run_suite(seed: u64, lambda: f64, opts: GradCheckOptions) -> Result<Vec<ComponentCheck>> {
    Ok(vec![
        check_anfl(seed, opts)?,
        check_mefl(seed.wrapping_add(1), opts)?,
        check_gated_gcn(seed.wrapping_add(2), lambda, opts)?,
    ])
}
