//! Two-stage training, checkpoints and the inference path.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::codec::{read_params, write_params, Reader, Writer};
use crate::config::TrainConfig;
use crate::data::{compute_occurrence, Corpus, InputKind};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, edge_cooccurrence_loss, edge_labels, weighted_asymmetric_loss, OccurrenceStats};
use crate::metrics::EvalReport;
use crate::model::{Architecture, AuModel};
use crate::optim::{cosine_lr, AdamW};
use crate::tensor::{ParamId, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AURCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            n => Err(Error::Format(format!("invalid stage marker {n}"))),
        }
    }
}

/// A trained model with everything needed to rebuild and continue it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub arch: Architecture,
    pub occurrence: OccurrenceStats,
    pub model: AuModel,
}

impl Checkpoint {
    /// Byte layout (little-endian):
    ///
    /// ```text
    /// magic "AURCKPT\0" | version u32 | stage u8 | input kind u8 | input cols u32
    /// | config text (u32 len + UTF-8 key = value lines)
    /// | n u32 | occurrence rates f64 × n
    /// | parameter count u64 | per parameter: name, ndim u32, dims u64, f64 data
    /// | CRC32 of everything above
    /// ```
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(self.stage.number());
        w.u8(self.arch.kind as u8);
        w.u32(self.arch.input_cols as u32);
        w.str(&self.config.to_text());
        w.u32(self.occurrence.rates.len() as u32);
        w.f64s(&self.occurrence.rates);
        write_params(&mut w, &self.model.store);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut head = Reader::new(bytes, "checkpoint");
        head.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut r = Reader::checked(bytes, "checkpoint")?;
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let stage = Stage::from_number(r.u8()?)?;
        let kind = match r.u8()? {
            0 => InputKind::Raw,
            1 => InputKind::FaceRepresentation,
            k => return Err(Error::Format(format!("unknown input kind {k}"))),
        };
        let input_cols = r.u32()? as usize;
        let config = TrainConfig::from_text(&r.str()?)?;
        let n = r.u32()? as usize;
        let occurrence = OccurrenceStats::from_rates(r.f64s(n)?)?;
        let store = read_params(&mut r)?;
        r.expect_end()?;
        let arch = Architecture::new(&config, kind, [config.spatial, input_cols])?;
        let with_stage2 = stage == Stage::Two && arch.variant.mefl;
        let model = AuModel::from_store(arch, store, with_stage2)?;
        Ok(Self {
            stage,
            config,
            arch,
            occurrence,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub l_wa: f64,
    pub l_e: f64,
    pub mean_f1: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Which forward path a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path2 {
    Anfl,
    Relation,
}

struct StageRun<'a> {
    data: &'a Corpus,
    cfg: &'a TrainConfig,
    stats: &'a OccurrenceStats,
    stage: Stage,
    path: Path2,
    lambda: f64,
    epochs: usize,
    lr0: f64,
    trainable: Vec<ParamId>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STAGE1: u64 = 1;
const INIT_STAGE2: u64 = 2;
const SHUFFLE_STAGE1: u64 = 11;
const SHUFFLE_STAGE2: u64 = 12;

/// Per-sample losses: (total, weighted asymmetric, edge).
fn sample_loss(
    g: &mut Graph<'_>,
    model: &AuModel,
    input: &Tensor,
    labels: &[u8],
    run: &StageRun<'_>,
) -> Result<(Var, Var, Option<Var>)> {
    match run.path {
        Path2::Anfl => {
            let p = model.forward_stage1(g, input)?;
            let lwa = weighted_asymmetric_loss(g, p, labels, run.stats)?;
            Ok((lwa, lwa, None))
        }
        Path2::Relation => {
            let out = model.forward_stage2(g, input)?;
            let lwa = weighted_asymmetric_loss(g, out.probabilities, labels, run.stats)?;
            let le = edge_cooccurrence_loss(g, out.edge_logits, &edge_labels(labels))?;
            Ok((combined_loss(g, lwa, le, run.lambda)?, lwa, Some(le)))
        }
    }
}

fn predict_path(model: &AuModel, input: &Tensor, path: Path2) -> Result<Vec<f64>> {
    let mut g = Graph::with_params(&model.store);
    let p = match path {
        Path2::Anfl => model.forward_stage1(&mut g, input)?,
        Path2::Relation => model.forward_stage2(&mut g, input)?.probabilities,
    };
    Ok(g.value(p).data().to_vec())
}

fn train_f1(model: &AuModel, data: &Corpus, path: Path2, threshold: f64) -> Result<Option<f64>> {
    let probs = data
        .records
        .iter()
        .map(|r| predict_path(model, &r.input, path))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(&probs, &data.labels(), threshold)?.macro_f1)
}

fn run_stage(model: &mut AuModel, run: &StageRun<'_>) -> Result<Vec<EpochRecord>> {
    let n = run.data.len();
    let batch = run.cfg.batch_size;
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * run.epochs;
    let mut opt = AdamW::new(
        &model.store,
        run.trainable.clone(),
        run.cfg.beta1,
        run.cfg.beta2,
        run.cfg.adam_eps,
        run.cfg.weight_decay,
    );
    let stream = match run.stage {
        Stage::One => SHUFFLE_STAGE1,
        Stage::Two => SHUFFLE_STAGE2,
    };
    let mut shuffle_rng = rng_for(run.cfg.seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(run.epochs);
    let mut step = 0;
    for epoch in 0..run.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_total, mut sum_wa, mut sum_e) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch) {
            let lr = cosine_lr(step, total_steps, run.lr0);
            let mut g = Graph::with_params(&model.store);
            let mut totals = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &run.data.records[i];
                let (total, lwa, le) = sample_loss(&mut g, model, &rec.input, &rec.labels, run)?;
                sum_wa += g.value(lwa).item();
                sum_e += le.map_or(0.0, |v| g.value(v).item());
                totals.push(total);
            }
            let mut acc = totals[0];
            for &t in &totals[1..] {
                acc = g.add(acc, t)?;
            }
            let loss = g.scale(acc, 1.0 / chunk.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at stage {} epoch {} step {step}",
                    run.stage.number(),
                    epoch + 1
                )));
            }
            sum_total += value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            opt.step(&mut model.store, lr)?;
            step += 1;
        }
        let mean_f1 = train_f1(model, run.data, run.path, run.cfg.threshold)?;
        log.push(EpochRecord {
            epoch: epoch + 1,
            stage: run.stage.number(),
            loss: sum_total / n as f64,
            l_wa: sum_wa / n as f64,
            l_e: sum_e / n as f64,
            mean_f1,
        });
    }
    Ok(log)
}

fn check_corpus(data: &Corpus, cfg: &TrainConfig) -> Result<()> {
    if data.n_aus != cfg.n_aus {
        return Err(Error::Config(format!(
            "corpus has {} AUs but n_aus = {}",
            data.n_aus, cfg.n_aus
        )));
    }
    Ok(())
}

/// Trains backbone and ANFL on the weighted asymmetric loss.
pub fn train_stage1(data: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(data, cfg)?;
    let stats = compute_occurrence(data)?;
    let arch = Architecture::new(cfg, data.kind, data.input_shape)?;
    let mut model = AuModel::new(arch, &mut rng_for(cfg.seed, INIT_STAGE1))?;
    let run = StageRun {
        data,
        cfg,
        stats: &stats,
        stage: Stage::One,
        path: Path2::Anfl,
        lambda: 0.0,
        epochs: cfg.stage1_epochs,
        lr0: cfg.stage1_lr,
        trainable: model.all_params(),
    };
    let log = run_stage(&mut model, &run)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::One,
            config: cfg.clone(),
            arch,
            occurrence: stats,
            model,
        },
        log,
    })
}

/// Adds MEFL, the gated GCN and the edge head to a stage-1 model and
/// trains all of them, backbone and AFG included, on `L_WA + lambda L_E`.
/// Variants without MEFL keep optimizing the stage-1 path instead.
pub fn train_stage2(data: &Corpus, stage1: Option<&Checkpoint>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let stage1 = stage1.ok_or_else(|| Error::Contract("stage 2 requires a stage-1 checkpoint".into()))?;
    if stage1.stage != Stage::One {
        return Err(Error::Contract("stage 2 must start from a stage-1 checkpoint".into()));
    }
    cfg.validate()?;
    check_corpus(data, cfg)?;
    let arch = Architecture::new(cfg, data.kind, data.input_shape)?;
    if arch != stage1.arch {
        return Err(Error::Config(
            "architecture in config differs from the stage-1 checkpoint".into(),
        ));
    }
    let stats = compute_occurrence(data)?;
    let mut model = stage1.model.clone();
    let (path, trainable) = if arch.variant.mefl {
        model.add_stage2(&mut rng_for(cfg.seed, INIT_STAGE2))?;
        (Path2::Relation, model.stage2_trainable())
    } else {
        (Path2::Anfl, model.all_params())
    };
    let run = StageRun {
        data,
        cfg,
        stats: &stats,
        stage: Stage::Two,
        path,
        lambda: cfg.lambda,
        epochs: cfg.stage2_epochs,
        lr0: cfg.stage2_lr,
        trainable,
    };
    let log = run_stage(&mut model, &run)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Two,
            config: cfg.clone(),
            arch,
            occurrence: stats,
            model,
        },
        log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// batch × N.
    pub probabilities: Tensor,
    pub warnings: Vec<String>,
}

/// Backbone, AFG, MEFL, gated GCN and the stage-2 classifier; a model
/// without stage-2 parameters falls back to its stage-1 path and says so.
pub fn infer(model: &AuModel, inputs: &[&Tensor]) -> Result<Inference> {
    let n = model.arch.n_aus;
    let mut warnings = Vec::new();
    let path = if model.has_stage2() {
        Path2::Relation
    } else {
        warnings.push("no stage-2 parameters; using the stage-1 (ANFL) path".to_string());
        Path2::Anfl
    };
    let mut data = Vec::with_capacity(inputs.len() * n);
    for x in inputs {
        data.extend(predict_path(model, x, path)?);
    }
    Ok(Inference {
        probabilities: Tensor::new(vec![inputs.len(), n], data)?,
        warnings,
    })
}
