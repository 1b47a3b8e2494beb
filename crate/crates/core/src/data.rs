//! Synthetic corpora with planted label co-occurrence, the corpus container,
//! occurrence statistics and train/eval splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::losses::OccurrenceStats;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 8] = b"AURCORP\0";
pub const CORPUS_VERSION: u32 = 1;

/// What a record's `input` holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Raw per-position features for the stub backbone.
    Raw = 0,
    /// A precomputed D × C face representation.
    FaceRepresentation = 1,
}

impl InputKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Raw),
            1 => Ok(Self::FaceRepresentation),
            t => Err(Error::Format(format!("unknown input kind {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub input: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<SampleRecord>,
    pub n_aus: usize,
    pub kind: InputKind,
    /// Rows × columns of every input.
    pub input_shape: [usize; 2],
    /// Empirical occurrence rate per AU, recomputed whenever records change.
    pub rates: Vec<f64>,
    /// N × N latent correlation used by the generator, if synthetic.
    pub planted: Option<Vec<f64>>,
}

impl Corpus {
    /// Validates records and derives the occurrence rates.
    pub fn new(
        records: Vec<SampleRecord>,
        n_aus: usize,
        kind: InputKind,
        input_shape: [usize; 2],
        planted: Option<Vec<f64>>,
    ) -> Result<Self> {
        for r in &records {
            if r.labels.len() != n_aus {
                return Err(Error::Format(format!(
                    "record `{}` has {} labels, expected {n_aus}",
                    r.id,
                    r.labels.len()
                )));
            }
            if r.labels.iter().any(|&l| l > 1) {
                return Err(Error::Format(format!("record `{}` has a non-binary label", r.id)));
            }
            if r.input.shape() != input_shape {
                return Err(Error::shape("corpus record", r.input.shape(), &input_shape));
            }
            if !r.input.is_finite() {
                return Err(Error::Format(format!("record `{}` has non-finite input", r.id)));
            }
        }
        if let Some(p) = &planted {
            if p.len() != n_aus * n_aus {
                return Err(Error::Format("planted matrix is not N × N".into()));
            }
        }
        let rates = occurrence_rates(&records, n_aus);
        Ok(Self {
            records,
            n_aus,
            kind,
            input_shape,
            rates,
            planted,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.records[i].clone()).collect(),
            self.n_aus,
            self.kind,
            self.input_shape,
            self.planted.clone(),
        )
    }
}

fn occurrence_rates(records: &[SampleRecord], n_aus: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_aus];
    for r in records {
        for (c, &l) in counts.iter_mut().zip(&r.labels) {
            *c += l as usize;
        }
    }
    let n = records.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// `r_i` = fraction of samples with AU i active, plus the derived weights.
pub fn compute_occurrence(corpus: &Corpus) -> Result<OccurrenceStats> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot compute occurrence of an empty corpus".into()));
    }
    let rates = occurrence_rates(&corpus.records, corpus.n_aus);
    let missing: Vec<usize> = rates
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("labels never active in corpus: {missing:?}")));
    }
    OccurrenceStats::from_rates(rates)
}

/// Joint label sampler and feature layout for [`generate_synthetic`].
///
/// Labels come from a Gaussian copula: a latent vector with unit variances
/// and pairwise correlations `couplings` is thresholded per AU so that
/// `P(y_i = 1) = base_rates[i]` exactly. Positive couplings make AUs
/// co-occur, negative ones make them exclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub base_rates: Vec<f64>,
    pub couplings: Vec<(usize, usize, f64)>,
    /// Rows per input.
    pub spatial: usize,
    /// Feature columns per AU block and per interaction block.
    pub block: usize,
    /// Class-mean magnitude of each AU's own block.
    pub signal: Vec<f64>,
    /// Class-mean magnitude of each interaction block.
    pub pair_signal: f64,
    pub noise: f64,
    /// Seeds the class-mean patterns; corpora sharing it share feature geometry.
    pub pattern_seed: u64,
}

impl SyntheticSpec {
    pub fn independent(base_rates: Vec<f64>) -> Self {
        Self {
            signal: vec![1.0; base_rates.len()],
            base_rates,
            couplings: Vec::new(),
            spatial: 8,
            block: 4,
            pair_signal: 1.0,
            noise: 1.0,
            pattern_seed: 0,
        }
    }

    /// AUs grouped into strongly coupled neighbouring pairs.
    pub fn coupled(n_aus: usize) -> Self {
        let rates = [0.3, 0.35, 0.25, 0.4, 0.2, 0.3];
        let mut spec = Self::independent((0..n_aus).map(|i| rates[i % rates.len()]).collect());
        for i in (0..n_aus.saturating_sub(1)).step_by(2) {
            spec.couplings.push((i, i + 1, 0.9));
        }
        spec
    }

    /// As [`coupled`](Self::coupled), but the second AU of each pair carries
    /// only a weak signal of its own under heavy noise, so it is best
    /// recognised through its partner.
    pub fn relational(n_aus: usize) -> Self {
        let mut spec = Self::coupled(n_aus);
        for (i, s) in spec.signal.iter_mut().enumerate() {
            if i % 2 == 1 {
                *s = 0.1;
            }
        }
        spec.noise = 3.0;
        spec
    }

    /// Number of feature columns: one block per AU and per coupled pair.
    pub fn feature_dim(&self) -> usize {
        (self.base_rates.len() + self.couplings.len()) * self.block
    }

    /// Latent correlation matrix, N × N.
    pub fn correlation(&self) -> Result<Vec<f64>> {
        let n = self.base_rates.len();
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            r[i * n + i] = 1.0;
        }
        for &(i, j, c) in &self.couplings {
            if i >= n || j >= n || i == j {
                return Err(Error::Config(format!("invalid coupling pair ({i}, {j})")));
            }
            if !(c > -1.0 && c < 1.0) {
                return Err(Error::Config(format!("coupling {c} outside (-1, 1)")));
            }
            r[i * n + j] = c;
            r[j * n + i] = c;
        }
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        let n = self.base_rates.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 AUs, got {n}")));
        }
        let bad: Vec<usize> = self
            .base_rates
            .iter()
            .enumerate()
            .filter(|(_, &r)| !(r > 0.0 && r < 1.0))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!("base rates must lie in (0, 1); offending AUs {bad:?}")));
        }
        if self.spatial == 0 || self.block == 0 {
            return Err(Error::Config("spatial and block must be positive".into()));
        }
        if self.signal.len() != n {
            return Err(Error::Config(format!("{} signal strengths for {n} AUs", self.signal.len())));
        }
        if !(self.noise >= 0.0 && self.pair_signal.is_finite() && self.signal.iter().all(|s| s.is_finite())) {
            return Err(Error::Config("noise must be non-negative and signals finite".into()));
        }
        Ok(())
    }
}

/// Lower-triangular factor of a symmetric positive-definite matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn sign_pattern(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| if rand::Rng::random::<bool>(rng) { 1.0 } else { -1.0 })
        .collect()
}

/// Draws `n_samples` records. Each AU owns a disjoint block of columns whose
/// mean at every position is `+pattern` when active and `-pattern`
/// otherwise; each coupled pair owns a further block whose mean flips only
/// when both are active.
pub fn generate_synthetic(n_samples: usize, spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let n = spec.base_rates.len();
    let corr = spec.correlation()?;
    let chol = cholesky(&corr, n)
        .ok_or_else(|| Error::Config("coupling matrix is not positive definite".into()))?;
    let std_normal = Normal::standard();
    let cut: Vec<f64> = spec.base_rates.iter().map(|&r| std_normal.inverse_cdf(r)).collect();

    let (d, b) = (spec.spatial, spec.block);
    let mut pattern_rng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);
    let au_patterns: Vec<Vec<f64>> = (0..n).map(|_| sign_pattern(&mut pattern_rng, b)).collect();
    let pair_patterns: Vec<Vec<f64>> = spec
        .couplings
        .iter()
        .map(|_| sign_pattern(&mut pattern_rng, b))
        .collect();

    let width = spec.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let labels: Vec<u8> = (0..n)
            .map(|i| {
                let z: f64 = (0..=i).map(|k| chol[i * n + k] * eps[k]).sum();
                u8::from(z < cut[i])
            })
            .collect();

        let mut x = Tensor::zeros(&[d, width]);
        let data = x.data_mut();
        let blocks = labels
            .iter()
            .zip(&au_patterns)
            .zip(&spec.signal)
            .map(|((&y, p), &amp)| (y == 1, p, amp))
            .chain(
                spec.couplings
                    .iter()
                    .zip(&pair_patterns)
                    .map(|(&(i, j, _), p)| (labels[i] == 1 && labels[j] == 1, p, spec.pair_signal)),
            );
        for (blk, (on, pattern, amp)) in blocks.enumerate() {
            let sign = if on { 1.0 } else { -1.0 };
            for row in 0..d {
                for k in 0..b {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data[row * width + blk * b + k] =
                        sign * amp * pattern[k] + spec.noise * noise;
                }
            }
        }
        records.push(SampleRecord {
            id: format!("s{s:06}"),
            input: x,
            labels,
        });
    }
    Corpus::new(records, n, InputKind::Raw, [d, width], Some(corr))
}

/// Deterministic shuffled split; `fraction` of the records go to train.
pub fn split(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * corpus.len() as f64).round() as usize;
    let train = corpus.subset(&idx[..n_train])?;
    compute_occurrence(&train)?;
    let eval = corpus.subset(&idx[n_train..])?;
    Ok((train, eval))
}

/// Empirical counts of the four joint patterns for every ordered AU pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceMatrix {
    pub n: usize,
    /// `counts[i * n + j][c]` with `c = 2 y_i + y_j`.
    pub counts: Vec<[u64; 4]>,
}

impl CooccurrenceMatrix {
    pub fn get(&self, i: usize, j: usize) -> [u64; 4] {
        self.counts[i * self.n + j]
    }
}

pub fn cooccurrence(corpus: &Corpus) -> CooccurrenceMatrix {
    let n = corpus.n_aus;
    let mut counts = vec![[0u64; 4]; n * n];
    for r in &corpus.records {
        for i in 0..n {
            for j in 0..n {
                counts[i * n + j][2 * r.labels[i] as usize + r.labels[j] as usize] += 1;
            }
        }
    }
    CooccurrenceMatrix { n, counts }
}

/// Byte layout (little-endian):
///
/// ```text
/// magic "AURCORP\0" | version u32 | kind u8 | n_samples u64 | n_aus u32
/// | rows u32 | cols u32 | has_planted u8 | [planted f64 × N²]
/// | per record: id (u32 len + UTF-8) | rows·cols f64 | ceil(N/8) label bytes, LSB first
/// | CRC32 of everything above
/// ```
pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CORPUS_MAGIC);
    w.u32(CORPUS_VERSION);
    w.u8(corpus.kind as u8);
    w.u64(corpus.len() as u64);
    w.u32(corpus.n_aus as u32);
    w.u32(corpus.input_shape[0] as u32);
    w.u32(corpus.input_shape[1] as u32);
    match &corpus.planted {
        Some(p) => {
            w.u8(1);
            w.f64s(p);
        }
        None => w.u8(0),
    }
    for r in &corpus.records {
        w.str(&r.id);
        w.f64s(r.input.data());
        w.bytes(&pack_bits(&r.labels));
    }
    w.finish()
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    // Parse the header before the checksum so a short file reports truncation.
    let mut head = Reader::new(bytes, "corpus");
    head.header(CORPUS_MAGIC, CORPUS_VERSION)?;
    let mut r = Reader::checked(bytes, "corpus")?;
    r.header(CORPUS_MAGIC, CORPUS_VERSION)?;
    let kind = InputKind::from_tag(r.u8()?)?;
    let n_samples = r.usize()?;
    let n_aus = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let planted = match r.u8()? {
        0 => None,
        1 => Some(r.f64s(n_aus * n_aus)?),
        t => return Err(Error::Format(format!("bad planted flag {t}"))),
    };
    let mut records = Vec::with_capacity(n_samples.min(1 << 20));
    for _ in 0..n_samples {
        let id = r.str()?;
        let input = Tensor::new(vec![rows, cols], r.f64s(rows * cols)?)?;
        let labels = unpack_bits(r.take(n_aus.div_ceil(8))?, n_aus);
        records.push(SampleRecord { id, input, labels });
    }
    r.expect_end()?;
    Corpus::new(records, n_aus, kind, [rows, cols], planted)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, encode_corpus(corpus))?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    decode_corpus(&std::fs::read(path)?)
}

fn pack_bits(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; labels.len().div_ceil(8)];
    for (i, &l) in labels.iter().enumerate() {
        out[i / 8] |= (l & 1) << (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}
