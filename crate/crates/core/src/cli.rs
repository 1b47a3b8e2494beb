//! Command-line front end.
//!
//! Every command resolves its configuration (defaults, then `--config`, then
//! each `--set key=value`), creates its run directory and writes
//! `config.txt` there before doing anything else.
//!
//! Run directory layout:
//!
//! ```text
//! <runs-root>/<YYYYMMDDTHHMMSSZ>_seed<seed>/
//!     config.txt        effective configuration, key = value
//!     corpus.bin        gen-data
//!     stage1.ckpt       train
//!     stage2.ckpt       train
//!     metrics.jsonl     train, one JSON object per epoch
//!     report.csv        train, eval
//!     report.json       train, eval
//!     predictions.csv   infer
//!     gradcheck.txt     gradcheck
//!     ablation.txt      ablate
//!     ablation.json     ablate
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (including a failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, ErrorKind as IoErrorKind};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{self, Setting, ALL_SETTINGS};
use crate::config::TrainConfig;
use crate::data::{generate_synthetic, load_corpus, save_corpus, split, Corpus, SyntheticSpec};
use crate::error::{Error, ErrorKind, Result};
use crate::gradcheck::GradCheckOptions;
use crate::gradcheck_suite::{run_suite, TOLERANCE};
use crate::metrics::evaluate;
use crate::trainer::{infer, train_stage1, train_stage2, Checkpoint, EpochRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "aurelgraph", version, about = "Facial action unit recognition with learned AU relation graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Exact run directory; must not already contain a config.txt.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Parent of auto-named run directories.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Neighbouring AUs form strongly coupled pairs.
    Coupled,
    /// Coupled pairs whose second AU has little signal of its own.
    Relational,
    /// Same rates as `coupled`, no coupling.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-label corpus with planted AU couplings.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "coupled")]
        preset: Preset,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Corpus path; defaults to corpus.bin in the run directory.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train stage 1, stage 2 or both, then evaluate the final model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Stage-1 checkpoint to start from when `--stage 2`.
        #[arg(long, value_name = "FILE")]
        stage1_checkpoint: Option<PathBuf>,
        /// Corpus for the final report; defaults to the training corpus.
        #[arg(long, value_name = "FILE")]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-AU precision, recall, F1 and AUC.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Binarisation threshold; shorthand for `--set threshold=T`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write per-sample AU probabilities for a corpus.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Finite-difference check of every composite forward and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Multiply analytic gradients by this factor (negative control).
        #[arg(long, hide = true)]
        corrupt_analytic: Option<f64>,
    },
    /// Train and evaluate a matrix of pipeline variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Held-out corpus; without it `--data` is split.
        #[arg(long, value_name = "FILE")]
        eval_data: Option<PathBuf>,
        /// Fraction of `--data` used for training when splitting.
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        /// Comma-separated setting names; all by default.
        #[arg(long, value_delimiter = ',')]
        settings: Vec<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData { common, preset, samples, out } => gen_data(&common, preset, samples, out),
        Command::Train { common, data, stage, stage1_checkpoint, eval_data } => {
            train(&common, &data, stage, stage1_checkpoint.as_deref(), eval_data.as_deref())
        }
        Command::Eval { common, checkpoint, data, threshold } => eval(&common, &checkpoint, &data, threshold),
        Command::Infer { common, checkpoint, data } => infer_cmd(&common, &checkpoint, &data),
        Command::Gradcheck { common, corrupt_analytic } => gradcheck(&common, corrupt_analytic),
        Command::Ablate { common, data, eval_data, train_fraction, settings } => {
            ablate(&common, &data, eval_data.as_deref(), train_fraction, &settings)
        }
    }
}

fn resolve(common: &Common) -> Result<TrainConfig> {
    TrainConfig::resolve(common.config.as_deref(), &common.set)
}

/// Layers the config file and overrides over a checkpoint's config.
fn resolve_over(base: &TrainConfig, common: &Common) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    cfg.apply_overrides(&common.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir_name(seed: u64) -> String {
    format!("{}_seed{seed}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

/// Creates the run directory and writes `config.txt` into it.
fn open_run(common: &Common, cfg: &TrainConfig) -> Result<PathBuf> {
    let dir = match &common.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            if dir.join("config.txt").exists() {
                return Err(Error::Config(format!("{} already holds a run", dir.display())));
            }
            dir.clone()
        }
        None => {
            fs::create_dir_all(&common.runs_root)?;
            let base = run_dir_name(cfg.seed);
            let mut attempt = 1;
            loop {
                let name = if attempt == 1 { base.clone() } else { format!("{base}-{attempt}") };
                let dir = common.runs_root.join(name);
                match fs::create_dir(&dir) {
                    Ok(()) => break dir,
                    Err(e) if e.kind() == IoErrorKind::AlreadyExists => attempt += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
    };
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    eprintln!("run directory: {}", dir.display());
    Ok(dir)
}

fn gen_data(common: &Common, preset: Preset, samples: usize, out: Option<PathBuf>) -> Result<i32> {
    let cfg = resolve(common)?;
    let mut spec = match preset {
        Preset::Coupled => SyntheticSpec::coupled(cfg.n_aus),
        Preset::Relational => SyntheticSpec::relational(cfg.n_aus),
        Preset::Independent => SyntheticSpec::independent(SyntheticSpec::coupled(cfg.n_aus).base_rates),
    };
    spec.spatial = cfg.spatial;
    let dir = open_run(common, &cfg)?;
    let corpus = generate_synthetic(samples, &spec, cfg.seed)?;
    let path = out.unwrap_or_else(|| dir.join("corpus.bin"));
    save_corpus(&corpus, &path)?;
    let rates: Vec<String> = corpus.rates.iter().map(|r| format!("{r:.3}")).collect();
    println!(
        "wrote {} samples, {} AUs, input {}x{} to {} (rates {})",
        corpus.len(),
        corpus.n_aus,
        corpus.input_shape[0],
        corpus.input_shape[1],
        path.display(),
        rates.join(" ")
    );
    Ok(EXIT_OK)
}

fn write_log(path: &Path, log: &[EpochRecord]) -> io::Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    fs::write(path, text)
}

fn print_epochs(log: &[EpochRecord]) {
    for r in log {
        let f1 = r.mean_f1.map_or_else(|| "undefined".into(), |f| format!("{f:.4}"));
        println!(
            "stage {} epoch {:>3}  loss {:.6}  l_wa {:.6}  l_e {:.6}  train F1 {f1}",
            r.stage, r.epoch, r.loss, r.l_wa, r.l_e
        );
    }
}

fn train(
    common: &Common,
    data: &Path,
    stage: StageArg,
    stage1_checkpoint: Option<&Path>,
    eval_data: Option<&Path>,
) -> Result<i32> {
    let cfg = resolve(common)?;
    if stage == StageArg::Two && stage1_checkpoint.is_none() {
        return Err(Error::Config("--stage 2 needs --stage1-checkpoint".into()));
    }
    let dir = open_run(common, &cfg)?;
    let corpus = load_corpus(data)?;
    let held_out = eval_data.map(load_corpus).transpose()?;

    let mut log = Vec::new();
    let stage1 = match stage {
        StageArg::Two => Checkpoint::load(stage1_checkpoint.expect("checked above"))?,
        StageArg::One | StageArg::Both => {
            let out = train_stage1(&corpus, &cfg)?;
            out.checkpoint.save(&dir.join("stage1.ckpt"))?;
            log.extend(out.log);
            out.checkpoint
        }
    };
    let last = if stage == StageArg::One {
        stage1
    } else {
        let out = train_stage2(&corpus, Some(&stage1), &cfg)?;
        out.checkpoint.save(&dir.join("stage2.ckpt"))?;
        log.extend(out.log);
        out.checkpoint
    };
    write_log(&dir.join("metrics.jsonl"), &log)?;
    print_epochs(&log);

    let report = evaluate(&last.model, held_out.as_ref().unwrap_or(&corpus), cfg.threshold)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.json"), report.to_json())?;
    print!("{}", report.to_csv());
    Ok(EXIT_OK)
}

fn eval(common: &Common, checkpoint: &Path, data: &Path, threshold: Option<f64>) -> Result<i32> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = resolve_over(&ckpt.config, common)?;
    if let Some(t) = threshold {
        cfg.set("threshold", &t.to_string())?;
        cfg.validate()?;
    }
    let dir = open_run(common, &cfg)?;
    let corpus = load_corpus(data)?;
    let report = evaluate(&ckpt.model, &corpus, cfg.threshold)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.json"), report.to_json())?;
    print!("{}", report.to_csv());
    Ok(EXIT_OK)
}

fn infer_cmd(common: &Common, checkpoint: &Path, data: &Path) -> Result<i32> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = resolve_over(&ckpt.config, common)?;
    let dir = open_run(common, &cfg)?;
    let corpus = load_corpus(data)?;
    let inputs: Vec<_> = corpus.records.iter().map(|r| &r.input).collect();
    let out = infer(&ckpt.model, &inputs)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let n = ckpt.arch.n_aus;
    let mut csv = String::from("id");
    for i in 0..n {
        let _ = write!(csv, ",au{i}");
    }
    csv.push('\n');
    let probs = out.probabilities.data();
    for (k, r) in corpus.records.iter().enumerate() {
        csv.push_str(&r.id);
        for p in &probs[k * n..(k + 1) * n] {
            let _ = write!(csv, ",{p:?}");
        }
        csv.push('\n');
    }
    let path = dir.join("predictions.csv");
    fs::write(&path, csv)?;
    println!("wrote {} predictions to {}", corpus.len(), path.display());
    Ok(EXIT_OK)
}

fn gradcheck(common: &Common, corrupt_analytic: Option<f64>) -> Result<i32> {
    let cfg = resolve(common)?;
    let dir = open_run(common, &cfg)?;
    let opts = GradCheckOptions {
        corrupt_analytic,
        ..GradCheckOptions::default()
    };
    let checks = run_suite(cfg.seed, cfg.lambda, opts)?;
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(
            text,
            "{:<20} max_rel_err {:.3e}  coords {:>3}  redraws {:>3}  {}",
            c.component,
            c.max_relative_error,
            c.checked,
            c.redraws,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    fs::write(dir.join("gradcheck.txt"), &text)?;
    print!("{text}");
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.component).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check above {TOLERANCE:e} for: {}", failed.join(", "));
        Ok(EXIT_NUMERIC)
    }
}

fn ablate(
    common: &Common,
    data: &Path,
    eval_data: Option<&Path>,
    train_fraction: f64,
    names: &[String],
) -> Result<i32> {
    let cfg = resolve(common)?;
    let settings: Vec<Setting> = if names.is_empty() {
        ALL_SETTINGS.to_vec()
    } else {
        names
            .iter()
            .map(|n| {
                Setting::by_name(n.trim()).ok_or_else(|| {
                    let known: Vec<&str> = ALL_SETTINGS.iter().map(|s| s.name).collect();
                    Error::Config(format!("unknown setting `{n}`; known: {}", known.join(", ")))
                })
            })
            .collect::<Result<_>>()?
    };
    let dir = open_run(common, &cfg)?;
    let corpus = load_corpus(data)?;
    let (train, held_out): (Corpus, Corpus) = match eval_data {
        Some(path) => (corpus, load_corpus(path)?),
        None => split(&corpus, train_fraction, cfg.seed)?,
    };
    let rows = ablation::run_ablation(&settings, &train, &held_out, &cfg)?;
    let table = ablation::format_table(&rows);
    fs::write(dir.join("ablation.txt"), &table)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("ablation.json"), json)?;
    print!("{table}");
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["aurelgraph", "--help"]), EXIT_OK);
        assert_eq!(run(["aurelgraph", "train", "--help"]), EXIT_OK);
        assert_eq!(run(["aurelgraph", "--version"]), EXIT_OK);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["aurelgraph"]), EXIT_USAGE);
        assert_eq!(run(["aurelgraph", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["aurelgraph", "train"]), EXIT_USAGE);
    }

    #[test]
    fn unknown_key_is_rejected_before_any_output() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let code = run([
            "aurelgraph".as_ref(),
            "gradcheck".as_ref(),
            "--set".as_ref(),
            "no_such_key=1".as_ref(),
            "--run-dir".as_ref(),
            dir.as_os_str(),
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert!(!dir.exists());
    }

    #[test]
    fn stage_two_without_checkpoint_is_a_usage_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let code = run([
            "aurelgraph".as_ref(),
            "train".as_ref(),
            "--data".as_ref(),
            tmp.path().join("missing.bin").as_os_str(),
            "--stage".as_ref(),
            "2".as_ref(),
            "--run-dir".as_ref(),
            dir.as_os_str(),
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn missing_corpus_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        let code = run([
            "aurelgraph".as_ref(),
            "train".as_ref(),
            "--data".as_ref(),
            tmp.path().join("missing.bin").as_os_str(),
            "--run-dir".as_ref(),
            tmp.path().join("run").as_os_str(),
        ]);
        assert_eq!(code, EXIT_DATA);
        // The effective config is written before the corpus is read.
        assert!(tmp.path().join("run/config.txt").exists());
    }

    #[test]
    fn run_dir_name_carries_the_seed() {
        let name = run_dir_name(17);
        assert!(name.ends_with("_seed17"), "{name}");
        assert_eq!(name.len(), "20260101T000000Z_seed17".len());
    }
}
