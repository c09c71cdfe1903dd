//! `pneumonet` subcommands. [`run`] returns the process exit code so the
//! whole surface is testable in-process.
//!
//! Exit codes: 0 success, 2 usage or data error, 3 corrupt checkpoint, 4 io.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    decode_image, preprocess, read_manifest, split_dataset, synth_dataset, AugmentConfig, Manifest, SampleRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, confusion_from_predictions, roc_auc, ConfusionMatrix, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::ontology::{diagnose, parse_ontology, FusionConfig, DEFAULT_ONTOLOGY};
use crate::report::{history_csv, write_evaluation, write_history, HISTORY_HEADER};
use crate::rng::SeededRng;
use crate::train::{evaluate, Decision, TrainConfig, Trainer};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "pneumonet", version, about = "Separable-CNN pneumonia screening with ontology-based decision fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the matching key of the
/// `--config` file.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// `key = value` run configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialisation, shuffling, dropout and augmentation
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Decision threshold: classification cut-off for evaluate/metrics
    /// (predict positive when p >= threshold), fusion cut-off for diagnose
    /// (detect when p > threshold)
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sample manifest (`path,label,age_months,key=value;...`)
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Ontology file (defaults to the bundled pneumonia ontology)
    #[arg(long, global = true)]
    pub ontology: Option<PathBuf>,
    /// Model checkpoint
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split the manifest, train, and write the checkpoint, history.csv and curves.svg
    Train {
        #[command(flatten)]
        common: Common,
        /// Override max_epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a manifest; writes metrics.csv, roc.csv and predictions.csv
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Classify one image and fuse the result with ontology reasoning
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// PGM/PPM image to classify
        image: PathBuf,
        /// Patient age in months
        #[arg(long)]
        age: Option<u32>,
        /// Clinical metadata entry, `key=value` (repeatable)
        #[arg(long = "meta", value_name = "KEY=VALUE")]
        meta: Vec<String>,
    },
    /// Confusion matrix and metrics from a `p,label` predictions file
    Metrics {
        #[command(flatten)]
        common: Common,
        /// CSV with one `p,label` pair per line
        predictions: PathBuf,
    },
    /// Generate a synthetic two-class image set with its manifest
    Synth {
        #[command(flatten)]
        common: Common,
        /// Images per class
        #[arg(long)]
        n: usize,
    },
}

/// Flat `key = value` run configuration. Relative paths in a file resolve
/// against the file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub threshold: f64,
    pub fusion: FusionConfig,
    pub split: [f64; 3],
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            manifest: None,
            ontology: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            threshold: 0.5,
            fusion: FusionConfig::default(),
            split: [0.8, 0.1, 0.1],
            train: TrainConfig {
                augment: Some(AugmentConfig::default()),
                ..TrainConfig::default()
            },
            model: ModelConfig::default(),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{p}` for {key}")))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut augment = true;
        let mut aug = AugmentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, value) = l.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: "expected `key = value`".into(),
            })?;
            let (key, v) = (key.trim(), value.trim());
            let bad = || Error::Parse {
                line,
                msg: format!("bad value `{v}` for {key}"),
            };
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            let path = || base.join(v);
            let t = &mut c.train;
            match key {
                "seed" => c.seed = num!(),
                "manifest" => c.manifest = Some(path()),
                "ontology" => c.ontology = Some(path()),
                "checkpoint" => c.checkpoint = Some(path()),
                "out" => c.out = path(),
                "threshold" => c.threshold = num!(),
                "fusion_threshold" => c.fusion.threshold = num!(),
                "target" => c.fusion.target = v.to_string(),
                "split" => {
                    let parts: Vec<f64> = list(key, v)?;
                    c.split = parts.try_into().map_err(|_| bad())?;
                }
                "learning_rate" => t.adam.learning_rate = num!(),
                "beta1" => t.adam.beta1 = num!(),
                "beta2" => t.adam.beta2 = num!(),
                "adam_epsilon" => t.adam.epsilon = num!(),
                "batch_size" => t.batch_size = num!(),
                "max_epochs" => t.max_epochs = num!(),
                "plateau_factor" => t.plateau.factor = num!(),
                "plateau_patience" => t.plateau.patience = num!(),
                "plateau_min_delta" => t.plateau.min_delta = num!(),
                "min_lr" => t.plateau.min_lr = num!(),
                "early_stop_patience" => t.early_stop.patience = num!(),
                "early_stop_min_delta" => t.early_stop.min_delta = num!(),
                "augment" => augment = num!(),
                "rotation_max_degrees" => aug.rotation_max_degrees = num!(),
                "horizontal_flip_prob" => aug.horizontal_flip_prob = num!(),
                "image_size" => {
                    let s: usize = num!();
                    c.model.input = [3, s, s];
                }
                "kernel" => c.model.kernel = num!(),
                "block1_filters" => c.model.block1_filters = num!(),
                "block1_convs" => c.model.block1_convs = num!(),
                "separable_filters" => c.model.separable_filters = list(key, v)?,
                "dense_units" => c.model.dense_units = list(key, v)?,
                "dropout_rates" => c.model.dropout_rates = list(key, v)?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        c.train.augment = augment.then_some(aug);
        Ok(c)
    }

    /// Defaults, then the `--config` file, then individual flags.
    pub fn resolve(common: &Common) -> Result<RunConfig> {
        let mut c = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::parse(&text, path.parent().unwrap_or(Path::new("")))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            c.seed = s;
        }
        if let Some(t) = common.threshold {
            c.threshold = t;
        }
        for (flag, slot) in [
            (&common.manifest, &mut c.manifest),
            (&common.ontology, &mut c.ontology),
            (&common.checkpoint, &mut c.checkpoint),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(o) = &common.out {
            c.out = o.clone();
        }
        c.train.seed = c.seed;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if !self.threshold.is_finite() || !self.fusion.threshold.is_finite() {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        Ok(())
    }
}

fn require_file(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::Usage(format!("no {what} given (flag or config key)")))?;
    if !path.is_file() {
        return Err(Error::Data(format!("{what} `{}` does not exist", path.display())));
    }
    Ok(path.clone())
}

/// Every image a manifest refers to must exist before any work starts.
fn check_images(m: &Manifest) -> Result<()> {
    for r in &m.records {
        let path = m.resolve(r);
        if !path.is_file() {
            return Err(Error::Data(format!("image `{}` listed in `{}` does not exist", path.display(), m.source.display())));
        }
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_model(path: Option<&PathBuf>) -> Result<Model> {
    let path = require_file(path, "checkpoint")?;
    let mut f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    load_checkpoint(&mut f)
}

/// Manifest copy whose image paths are resolved, so it stays valid wherever
/// it is written.
fn resolved(m: &Manifest, part: &Manifest) -> Manifest {
    Manifest {
        records: part
            .records
            .iter()
            .map(|r| SampleRecord {
                image_path: m.resolve(r).to_string_lossy().into_owned(),
                ..r.clone()
            })
            .collect(),
        source: PathBuf::new(),
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    cfg.validate()?;
    let manifest_path = require_file(cfg.manifest.as_ref(), "manifest")?;
    let manifest = read_manifest(&manifest_path)?;
    check_images(&manifest)?;
    create_out(&cfg.out)?;
    let [train_m, val_m, test_m] = split_dataset(&manifest, cfg.split, cfg.seed)?;
    for (name, part) in [("train.csv", &train_m), ("val.csv", &val_m), ("test.csv", &test_m)] {
        write_file(&cfg.out.join(name), resolved(&manifest, part).to_text().as_bytes())?;
    }
    let [_, h, w] = cfg.model.input;
    let train_set = train_m.load_dataset(h, w)?;
    let val_set = val_m.load_dataset(h, w)?;

    let model = Model::build(&cfg.model, &mut SeededRng::derive(cfg.seed, u64::MAX))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut logs = Vec::new();
    let _ = writeln!(out, "{HISTORY_HEADER}");
    while trainer.epochs_done() < cfg.train.max_epochs {
        let (log, decision) = trainer.run_epoch(&train_set, &val_set)?;
        let csv = history_csv(std::slice::from_ref(&log));
        let _ = write!(out, "{}", csv.lines().nth(1).unwrap_or_default());
        let _ = writeln!(out);
        let _ = out.flush();
        logs.push(log);
        if decision == Decision::Halt {
            break;
        }
    }
    let model = trainer.into_model();
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
    let mut buf = Vec::new();
    save_checkpoint(&model, &mut buf).map_err(|e| Error::io(&ckpt, e))?;
    write_file(&ckpt, &buf)?;
    write_history(&cfg.out, &logs, None)
}

pub struct EvaluationSummary {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub auc: Option<f64>,
}

fn print_metrics(out: &mut dyn std::io::Write, cm: &ConfusionMatrix, m: &MetricsReport) {
    let _ = writeln!(out, "tn,fp,fn,tp: {},{},{},{}", cm.tn, cm.fp, cm.fn_, cm.tp);
    for (name, v, undefined) in [
        ("accuracy", m.accuracy, false),
        ("precision", m.precision, m.precision_undefined),
        ("recall", m.recall, m.recall_undefined),
        ("f1", m.f1, m.f1_undefined),
    ] {
        let note = if undefined { " (undefined, reported as 0)" } else { "" };
        let _ = writeln!(out, "{name}: {v:.4}{note}");
    }
}

/// Confusion matrix, metrics and (when both classes are present) ROC from
/// scored pairs; writes metrics.csv / roc.csv when `dir` is given.
fn score(pairs: &[(f64, u8)], threshold: f64, dir: Option<&Path>, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> Result<EvaluationSummary> {
    let cm = confusion_from_predictions(pairs, threshold)?;
    let m = compute_metrics(&cm)?;
    let roc = match roc_auc(pairs) {
        Ok(r) => Some(r),
        Err(e) => {
            let _ = writeln!(err, "warning: ROC omitted: {e}");
            None
        }
    };
    if let Some(dir) = dir {
        create_out(dir)?;
        write_evaluation(dir, &cm, &m, roc.as_ref())?;
    }
    print_metrics(out, &cm, &m);
    if let Some(r) = &roc {
        let _ = writeln!(out, "auc: {:.4}", r.auc);
    }
    Ok(EvaluationSummary {
        confusion: cm,
        metrics: m,
        auc: roc.map(|r| r.auc),
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> Result<EvaluationSummary> {
    let manifest_path = require_file(cfg.manifest.as_ref(), "manifest")?;
    let model = load_model(cfg.checkpoint.as_ref())?;
    let manifest = read_manifest(&manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::Data(format!("manifest `{}` has no records", manifest_path.display())));
    }
    check_images(&manifest)?;
    let [_, h, w] = model.config().input;
    let data = manifest.load_dataset(h, w)?;
    let eval = evaluate(&model, &data, cfg.train.batch_size)?;
    let pairs: Vec<(f64, u8)> = eval.probabilities.iter().copied().zip(data.labels.iter().copied()).collect();
    create_out(&cfg.out)?;
    let mut preds = String::from("p,label\n");
    for (p, y) in &pairs {
        preds.push_str(&format!("{p:.6},{y}\n"));
    }
    write_file(&cfg.out.join("predictions.csv"), preds.as_bytes())?;
    score(&pairs, cfg.threshold, Some(&cfg.out), out, err)
}

pub fn parse_predictions(text: &str) -> Result<Vec<(f64, u8)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') || (i == 0 && l.eq_ignore_ascii_case("p,label")) {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (p, y) = l.split_once(',').ok_or_else(|| err("expected `p,label`"))?;
        let p: f64 = p.trim().parse().map_err(|_| err("bad probability"))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(err("probability outside [0, 1]"));
        }
        let y = match y.trim() {
            "0" => 0,
            "1" => 1,
            _ => return Err(err("label must be 0 or 1")),
        };
        pairs.push((p, y));
    }
    if pairs.is_empty() {
        return Err(Error::Data("predictions file is empty".into()));
    }
    Ok(pairs)
}

pub fn cmd_metrics(cfg: &RunConfig, predictions: &Path, write_files: bool, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> Result<EvaluationSummary> {
    let path = require_file(Some(&predictions.to_path_buf()), "predictions file")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let pairs = parse_predictions(&text)?;
    score(&pairs, cfg.threshold, write_files.then_some(cfg.out.as_path()), out, err)
}

fn parse_meta(entries: &[String]) -> Result<Vec<(String, String)>> {
    entries
        .iter()
        .map(|e| match e.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(Error::Usage(format!("--meta expects key=value, got `{e}`"))),
        })
        .collect()
}

pub fn cmd_diagnose(cfg: &RunConfig, image: &Path, age: Option<u32>, meta: &[String], out: &mut dyn std::io::Write) -> Result<crate::ontology::Diagnosis> {
    let metadata = parse_meta(meta)?;
    let image = require_file(Some(&image.to_path_buf()), "image")?;
    let ontology = match &cfg.ontology {
        Some(p) => {
            let p = require_file(Some(p), "ontology")?;
            parse_ontology(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
        }
        None => parse_ontology(DEFAULT_ONTOLOGY)?,
    };
    let model = load_model(cfg.checkpoint.as_ref())?;
    let bytes = std::fs::read(&image).map_err(|e| Error::io(&image, e))?;
    let pixels = decode_image(&bytes)?;
    let [_, h, w] = model.config().input;
    let p = model.predict_proba(&preprocess(&pixels, h, w)?)?;
    let rec = SampleRecord {
        image_path: image.to_string_lossy().into_owned(),
        label: 0,
        age_months: age,
        metadata,
    };
    let findings = ontology.annotate_case(p, &rec);
    let d = diagnose(&ontology, p, &rec, &cfg.fusion)?;
    let join = |it: &mut dyn Iterator<Item = &String>| it.map(String::as_str).collect::<Vec<_>>().join(", ");
    let _ = writeln!(out, "image: {}", image.display());
    let _ = writeln!(out, "p_cnn: {:.4}", d.p_cnn);
    let _ = writeln!(out, "findings: {}", join(&mut findings.iter()));
    let _ = writeln!(out, "inferred: {}", join(&mut d.inferred.iter()));
    let _ = writeln!(out, "trace: {}", join(&mut d.trace.iter()));
    let _ = writeln!(out, "verdict: {}", d.verdict);
    Ok(d)
}

pub fn cmd_synth(n: usize, seed: u64, dir: &Path, out: &mut dyn std::io::Write) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let m = synth_dataset(n, seed, dir)?;
    let _ = writeln!(out, "wrote {} images and {}", m.len(), m.source.display());
    Ok(m)
}

fn dispatch(cli: Cli, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Train { common, epochs } => {
            let mut cfg = RunConfig::resolve(&common)?;
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            cmd_train(&cfg, out)
        }
        Command::Evaluate { common } => cmd_evaluate(&RunConfig::resolve(&common)?, out, err).map(drop),
        Command::Diagnose { common, image, age, meta } => {
            let mut cfg = RunConfig::resolve(&common)?;
            if let Some(t) = common.threshold {
                cfg.fusion.threshold = t;
            }
            cmd_diagnose(&cfg, &image, age, &meta, out).map(drop)
        }
        Command::Metrics { common, predictions } => {
            let cfg = RunConfig::resolve(&common)?;
            cmd_metrics(&cfg, &predictions, common.out.is_some(), out, err).map(drop)
        }
        Command::Synth { common, n } => {
            let cfg = RunConfig::resolve(&common)?;
            cmd_synth(n, cfg.seed, &cfg.out, out).map(drop)
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
