//! The full network: stub backbone, ANFL (stage 1) and MEFL + gated GCN
//! (stage 2), plus a pooled linear head for the backbone-only variant.

use rand::Rng;

use crate::anfl::{afg_forward, build_topology, fgg_gcn_layer, Afg, FaceRepresentation, GcnLayerParams, ScClassifier};
use crate::autodiff::{Graph, Var};
use crate::config::{TrainConfig, Variant};
use crate::data::InputKind;
use crate::error::{Error, Result};
use crate::gated_gcn::{gcn_forward, GatedGcnParams};
use crate::losses::{edge_head, EdgeHead};
use crate::mefl::{mefl_forward, MeflParams};
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Shapes and switches needed to build or reload a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub n_aus: usize,
    pub channels: usize,
    pub spatial: usize,
    pub input_cols: usize,
    pub backbone_hidden: usize,
    pub k_neighbors: usize,
    pub gcn_layers: usize,
    pub kind: InputKind,
    pub variant: Variant,
}

impl Architecture {
    pub fn new(cfg: &TrainConfig, kind: InputKind, input_shape: [usize; 2]) -> Result<Self> {
        cfg.validate()?;
        if input_shape[0] != cfg.spatial {
            return Err(Error::Config(format!(
                "corpus inputs have {} positions but spatial = {}",
                input_shape[0], cfg.spatial
            )));
        }
        if kind == InputKind::FaceRepresentation && input_shape[1] != cfg.channels {
            return Err(Error::Config(format!(
                "precomputed representations have {} channels but channels = {}",
                input_shape[1], cfg.channels
            )));
        }
        Ok(Self {
            n_aus: cfg.n_aus,
            channels: cfg.channels,
            spatial: cfg.spatial,
            input_cols: input_shape[1],
            backbone_hidden: cfg.backbone_hidden,
            k_neighbors: cfg.k_neighbors,
            gcn_layers: cfg.gcn_layers,
            kind,
            variant: cfg.variant,
        })
    }
}

/// Two position-wise linear layers with a ReLU between them.
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Backbone {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, arch: &Architecture) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, "backbone.fc1", arch.input_cols, arch.backbone_hidden, true)?,
            fc2: Linear::new(store, rng, "backbone.fc2", arch.backbone_hidden, arch.channels, true)?,
        })
    }

    fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            fc1: Linear::lookup(store, "backbone.fc1", true)?,
            fc2: Linear::lookup(store, "backbone.fc2", true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Params {
    pub mefl: MeflParams,
    pub gcn: GatedGcnParams,
    pub edge_head: EdgeHead,
}

/// Stage-2 outputs for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Output {
    pub probabilities: Var,
    /// E × 4 co-occurrence logits from the final edge features.
    pub edge_logits: Var,
}

#[derive(Debug, Clone)]
pub struct AuModel {
    pub arch: Architecture,
    pub store: ParamStore,
    backbone: Option<Backbone>,
    afg: Option<Afg>,
    fgg: Option<GcnLayerParams>,
    sc1: Option<ScClassifier>,
    pool_head: Option<Linear>,
    stage2: Option<Stage2Params>,
}

const FGG_PREFIX: &str = "fgg";
const SC1_NAME: &str = "sc1";
const POOL_HEAD: &str = "pool_head";

impl AuModel {
    /// Fresh stage-1 parameters.
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.variant.validate()?;
        let mut store = ParamStore::new();
        let backbone = match arch.kind {
            InputKind::Raw => Some(Backbone::new(&mut store, rng, &arch)?),
            InputKind::FaceRepresentation => None,
        };
        let (mut afg, mut fgg, mut sc1, mut pool_head) = (None, None, None, None);
        if arch.variant.afg {
            afg = Some(Afg::new(&mut store, rng, arch.n_aus, arch.channels)?);
            if arch.variant.fgg {
                fgg = Some(GcnLayerParams::new(&mut store, rng, FGG_PREFIX, arch.channels)?);
            }
            sc1 = Some(ScClassifier::new(&mut store, rng, SC1_NAME, arch.n_aus, arch.channels)?);
        } else {
            pool_head = Some(Linear::new(&mut store, rng, POOL_HEAD, arch.channels, arch.n_aus, true)?);
        }
        Ok(Self {
            arch,
            store,
            backbone,
            afg,
            fgg,
            sc1,
            pool_head,
            stage2: None,
        })
    }

    /// Rebinds handles to parameters already present in `store`.
    pub fn from_store(arch: Architecture, store: ParamStore, with_stage2: bool) -> Result<Self> {
        arch.variant.validate()?;
        let backbone = match arch.kind {
            InputKind::Raw => Some(Backbone::lookup(&store)?),
            InputKind::FaceRepresentation => None,
        };
        let v = arch.variant;
        let afg = v.afg.then(|| Afg::lookup(&store, arch.n_aus)).transpose()?;
        let fgg = (v.afg && v.fgg)
            .then(|| GcnLayerParams::lookup(&store, FGG_PREFIX))
            .transpose()?;
        let sc1 = v.afg.then(|| ScClassifier::lookup(&store, SC1_NAME)).transpose()?;
        let pool_head = (!v.afg)
            .then(|| Linear::lookup(&store, POOL_HEAD, true))
            .transpose()?;
        let stage2 = if with_stage2 {
            Some(Stage2Params {
                mefl: MeflParams::lookup(&store)?,
                gcn: GatedGcnParams::lookup(&store, arch.gcn_layers)?,
                edge_head: EdgeHead::lookup(&store)?,
            })
        } else {
            None
        };
        let model = Self {
            arch,
            store,
            backbone,
            afg,
            fgg,
            sc1,
            pool_head,
            stage2,
        };
        let expected = model.expected_param_count();
        if model.store.len() != expected {
            return Err(Error::Format(format!(
                "parameter set has {} entries, architecture expects {expected}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    fn expected_param_count(&self) -> usize {
        let linear = |l: &Linear| 1 + usize::from(l.bias.is_some());
        let mut n = 0;
        if let Some(b) = &self.backbone {
            n += linear(&b.fc1) + linear(&b.fc2);
        }
        if let Some(a) = &self.afg {
            n += a.fcs.iter().map(linear).sum::<usize>();
        }
        n += 2 * usize::from(self.fgg.is_some()) + usize::from(self.sc1.is_some());
        n += self.pool_head.as_ref().map_or(0, linear);
        if let Some(s) = &self.stage2 {
            n += 6 + 5 * s.gcn.num_layers() + 1 + linear(&s.edge_head.fc);
        }
        n
    }

    /// Adds MEFL, gated GCN, the stage-2 classifier and the edge head.
    pub fn add_stage2<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        if self.stage2.is_some() {
            return Err(Error::Contract("stage-2 parameters already present".into()));
        }
        if !self.arch.variant.mefl {
            return Err(Error::Config("variant has no MEFL stage".into()));
        }
        let c = self.arch.channels;
        let mefl = MeflParams::new(&mut self.store, rng, c)?;
        let gcn = GatedGcnParams::new(&mut self.store, rng, self.arch.gcn_layers, self.arch.n_aus, c)?;
        let edge_head = EdgeHead::new(&mut self.store, rng, c)?;
        self.stage2 = Some(Stage2Params { mefl, gcn, edge_head });
        Ok(())
    }

    pub fn has_stage2(&self) -> bool {
        self.stage2.is_some()
    }

    /// Parameters that take part in the stage-2 graph: everything except
    /// the FGG layer and the stage-1 classifier.
    pub fn stage2_trainable(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with("fgg.") && !p.name.starts_with("sc1."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Backbone output `X` for one input, D × C.
    pub fn face(&self, g: &mut Graph<'_>, input: &Tensor) -> Result<FaceRepresentation> {
        let expect = [self.arch.spatial, self.arch.input_cols];
        if input.shape() != expect {
            return Err(Error::shape("model input", input.shape(), &expect));
        }
        let x = g.constant(input.clone());
        let x = match &self.backbone {
            Some(b) => b.forward(g, x)?,
            None => x,
        };
        FaceRepresentation::new(g, x)
    }

    /// Stage-1 probabilities: AFG, optional FGG and the stage-1 classifier,
    /// or the pooled head when AFG is disabled.
    pub fn forward_stage1(&self, g: &mut Graph<'_>, input: &Tensor) -> Result<Var> {
        let x = self.face(g, input)?;
        if let Some(head) = &self.pool_head {
            let pooled = g.global_average_pool(x.x)?;
            let logits = head.forward(g, pooled)?;
            return Ok(g.sigmoid(logits));
        }
        let afg = self.afg.as_ref().expect("afg present when pool head absent");
        let sc1 = self.sc1.as_ref().expect("sc1 present with afg");
        let (_, mut nodes) = afg_forward(g, &x, afg, self.arch.n_aus)?;
        if let Some(fgg) = &self.fgg {
            let adjacency = build_topology(g.value(nodes.v), self.arch.k_neighbors)?;
            nodes = fgg_gcn_layer(g, nodes, &adjacency, fgg)?;
        }
        sc1.predict(g, nodes)
    }

    /// Stage-2 path: AFG, MEFL, gated GCN and the stage-2 classifier.
    pub fn forward_stage2(&self, g: &mut Graph<'_>, input: &Tensor) -> Result<Stage2Output> {
        let s2 = self
            .stage2
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no stage-2 parameters".into()))?;
        let afg = self.afg.as_ref().expect("stage 2 requires afg");
        let x = self.face(g, input)?;
        let (maps, nodes) = afg_forward(g, &x, afg, self.arch.n_aus)?;
        let edges = mefl_forward(g, &maps, &x, &s2.mefl)?;
        let (probabilities, last) = gcn_forward(g, nodes, edges, &s2.gcn)?;
        let edge_logits = edge_head(g, last.edges.e, &s2.edge_head)?;
        Ok(Stage2Output {
            probabilities,
            edge_logits,
        })
    }

    /// Probabilities from the deepest available path.
    pub fn forward(&self, g: &mut Graph<'_>, input: &Tensor) -> Result<Var> {
        if self.has_stage2() {
            Ok(self.forward_stage2(g, input)?.probabilities)
        } else {
            self.forward_stage1(g, input)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n_aus: 3,
            channels: 5,
            spatial: 4,
            backbone_hidden: 6,
            k_neighbors: 1,
            ..TrainConfig::default()
        }
    }

    fn input(seed: u64) -> Tensor {
        crate::nn::uniform_init(&mut ChaCha8Rng::seed_from_u64(seed), &[4, 7], 1)
    }

    #[test]
    fn stage_paths_produce_probabilities() {
        let arch = Architecture::new(&small_cfg(), InputKind::Raw, [4, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = AuModel::new(arch, &mut rng).unwrap();
        assert!(m.store.names().all(|n| !n.starts_with("mefl") && !n.starts_with("gcn")));
        let mut g = Graph::with_params(&m.store);
        let p = m.forward(&mut g, &input(1)).unwrap();
        assert_eq!(g.shape(p), &[3]);
        drop(g);

        m.add_stage2(&mut rng).unwrap();
        let mut g = Graph::with_params(&m.store);
        let out = m.forward_stage2(&mut g, &input(1)).unwrap();
        assert_eq!(g.shape(out.edge_logits), &[6, 4]);
        assert!(g.value(out.probabilities).data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn reload_from_store_matches() {
        let arch = Architecture::new(&small_cfg(), InputKind::Raw, [4, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = AuModel::new(arch, &mut rng).unwrap();
        m.add_stage2(&mut rng).unwrap();
        let back = AuModel::from_store(arch, m.store.clone(), true).unwrap();
        let run = |model: &AuModel| {
            let mut g = Graph::with_params(&model.store);
            let p = model.forward(&mut g, &input(3)).unwrap();
            g.value(p).clone()
        };
        assert_eq!(run(&m), run(&back));
        assert!(AuModel::from_store(arch, m.store.clone(), false).is_err());
    }

    #[test]
    fn stage2_excludes_fgg_and_sc1() {
        let arch = Architecture::new(&small_cfg(), InputKind::Raw, [4, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = AuModel::new(arch, &mut rng).unwrap();
        m.add_stage2(&mut rng).unwrap();
        let names: Vec<&str> = m.stage2_trainable().into_iter().map(|id| m.store.get(id).name.as_str()).collect();
        assert!(names.iter().all(|n| !n.starts_with("fgg") && !n.starts_with("sc1")));
        assert!(names.contains(&"sc2.anchors") && names.contains(&"backbone.fc1.weight"));
    }

    #[test]
    fn backbone_only_variant_uses_pooled_head() {
        let mut cfg = small_cfg();
        cfg.variant = Variant {
            afg: false,
            fgg: false,
            mefl: false,
        };
        let arch = Architecture::new(&cfg, InputKind::Raw, [4, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = AuModel::new(arch, &mut rng).unwrap();
        assert!(m.store.id("pool_head.weight").is_some());
        assert!(m.add_stage2(&mut rng).is_err());
        let mut g = Graph::with_params(&m.store);
        let p = m.forward(&mut g, &input(0)).unwrap();
        assert_eq!(g.shape(p), &[3]);
    }

    #[test]
    fn precomputed_input_skips_backbone() {
        let arch = Architecture::new(&small_cfg(), InputKind::FaceRepresentation, [4, 5]).unwrap();
        let m = AuModel::new(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.store.id("backbone.fc1.weight").is_none());
        assert!(Architecture::new(&small_cfg(), InputKind::FaceRepresentation, [4, 7]).is_err());
    }
}
