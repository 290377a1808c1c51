//! Command implementations behind the `graphcap` binary.
//!
//! Every command reads a [`RunConfig`], which comes from an optional
//! `key = value` file with command-line flags layered on top.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{compute_stats, load_split, DatasetRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{build_graph, evaluate_model, GraphSource};
use crate::gradcheck::{finite_difference_check, CheckOptions, GradientReport};
use crate::metrics::MetricReport;
use crate::model::{samples_from_records, CaptionModel, DecodeConfig, DecodeMode, GraphInput, ModelConfig, Sample, Variant};
use crate::scene_graph::{reify, LabelSpace};
use crate::toy;
use crate::train::{train, TrainConfig};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Gold,
    Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub predicates: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub variant: Variant,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub attn_dim: Option<usize>,
    pub gat_layers: usize,
    pub gat_dropout: f64,
    pub decoder_dropout: f64,
    pub train_cfg: TrainConfig,
    pub max_len: usize,
    pub mode: DecodeMode,
    pub threshold: f64,
    pub thresholds: Vec<f64>,
    pub max_nodes: Option<usize>,
    pub source: Option<SourceKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            val: None,
            test: None,
            input: None,
            objects: None,
            predicates: None,
            vocab: None,
            stats: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            variant: Variant::Att,
            embed_dim: None,
            hidden_dim: None,
            attn_dim: None,
            gat_layers: 2,
            gat_dropout: 0.25,
            decoder_dropout: 0.5,
            train_cfg: TrainConfig::default(),
            max_len: 20,
            mode: DecodeMode::Greedy,
            threshold: 0.4,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            max_nodes: None,
            source: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one option by its config-file key. Relative paths are joined to
    /// `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || -> PathBuf {
            let p = PathBuf::from(value.trim());
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        match key {
            "train" => self.train = Some(path()),
            "val" => self.val = Some(path()),
            "test" => self.test = Some(path()),
            "input" => self.input = Some(path()),
            "objects" => self.objects = Some(path()),
            "predicates" => self.predicates = Some(path()),
            "vocab" => self.vocab = Some(path()),
            "stats" => self.stats = Some(path()),
            "checkpoint" => self.checkpoint = Some(path()),
            "out" => self.out = path(),
            "variant" => self.variant = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "embed_dim" => self.embed_dim = Some(parse_num(key, value)?),
            "hidden_dim" => self.hidden_dim = Some(parse_num(key, value)?),
            "attn_dim" => self.attn_dim = Some(parse_num(key, value)?),
            "gat_layers" => self.gat_layers = parse_num(key, value)?,
            "gat_dropout" => self.gat_dropout = parse_num(key, value)?,
            "decoder_dropout" => self.decoder_dropout = parse_num(key, value)?,
            "lr" => self.train_cfg.lr = parse_num(key, value)?,
            "epochs" => self.train_cfg.epochs = parse_num(key, value)?,
            "batch" => self.train_cfg.batch_size = parse_num(key, value)?,
            "seed" => self.train_cfg.seed = parse_num(key, value)?,
            "max_steps" => self.train_cfg.max_steps = Some(parse_num(key, value)?),
            "clip" => self.train_cfg.clip_norm = Some(parse_num(key, value)?),
            "max_len" => self.max_len = parse_num(key, value)?,
            "mode" => {
                self.mode = match value.trim() {
                    "greedy" => DecodeMode::Greedy,
                    "sample" => DecodeMode::Sample {
                        temperature: match self.mode {
                            DecodeMode::Sample { temperature } => temperature,
                            DecodeMode::Greedy => 1.0,
                        },
                    },
                    other => return Err(Error::Config(format!("unknown decode mode {other:?}"))),
                }
            }
            "temp" => {
                let t: f64 = parse_num(key, value)?;
                self.mode = DecodeMode::Sample { temperature: t };
            }
            "threshold" => self.threshold = parse_num(key, value)?,
            "thresholds" => {
                self.thresholds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "max_nodes" => self.max_nodes = Some(parse_num(key, value)?),
            "source" => {
                self.source = Some(match value.trim() {
                    "gold" => SourceKind::Gold,
                    "detection" => SourceKind::Detection,
                    other => return Err(Error::Config(format!("unknown graph source {other:?}"))),
                })
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, base)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim(), base)
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn labels(&self) -> Result<LabelSpace> {
        match (&self.objects, &self.predicates) {
            (Some(o), Some(p)) => LabelSpace::load(o, p),
            _ => Err(Error::Config("both `objects` and `predicates` label files are required".into())),
        }
    }

    fn require<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::Config(format!("missing required path `{what}`")))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.out.join("vocab.txt"))
    }

    pub fn stats_path(&self) -> PathBuf {
        self.stats.clone().unwrap_or_else(|| self.out.join("stats.txt"))
    }

    /// Explicit cap, else the training maximum recorded by `prepare`, else none.
    pub fn resolve_max_nodes(&self) -> Result<usize> {
        if let Some(m) = self.max_nodes {
            return Ok(m);
        }
        let path = self.stats_path();
        if !path.exists() {
            return Ok(usize::MAX);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("train.max_object_nodes=") {
                return parse_num("train.max_object_nodes", v).map(|m: usize| m.max(2));
            }
        }
        Ok(usize::MAX)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            max_len: self.max_len,
            mode: self.mode,
        }
    }

    pub fn model_config(&self, vocab_size: usize, node_labels: usize) -> ModelConfig {
        let mut m = ModelConfig::full_scale(self.variant, vocab_size, node_labels);
        m.embed_dim = self.embed_dim.unwrap_or(m.embed_dim);
        m.hidden_dim = self.hidden_dim.unwrap_or(m.hidden_dim);
        m.attn_dim = self.attn_dim.unwrap_or(m.embed_dim);
        m.gat_layers = self.gat_layers;
        m.gat_dropout = self.gat_dropout;
        m.decoder_dropout = self.decoder_dropout;
        m
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareSummary {
    pub vocab_size: usize,
    pub train_pairs: usize,
    pub max_object_nodes: usize,
}

/// Builds the vocabulary from the training captions and writes dataset stats.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let labels = cfg.labels()?;
    let train_recs = load_split(cfg.require(&cfg.train, "train")?, &labels)?;
    let captions: Vec<&str> = train_recs.iter().flat_map(|r| r.captions.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&captions)?;
    create_out(&cfg.out)?;
    vocab.save(&cfg.vocab_path())?;
    let train_stats = compute_stats(&train_recs);
    let mut stats = train_stats.to_kv("train");
    for (name, p) in [("val", &cfg.val), ("test", &cfg.test)] {
        if let Some(p) = p {
            stats.push_str(&compute_stats(&load_split(p, &labels)?).to_kv(name));
        }
    }
    let _ = writeln!(stats, "vocab.size={}", vocab.len());
    write(&cfg.stats_path(), &stats)?;
    Ok(PrepareSummary {
        vocab_size: vocab.len(),
        train_pairs: train_stats.pairs,
        max_object_nodes: train_stats.max_object_nodes,
    })
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.vocab_path();
    if !path.exists() {
        return Err(Error::Data(format!(
            "vocabulary {} not found (run `prepare` first)",
            path.display()
        )));
    }
    Vocabulary::load(&path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub variant: Variant,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub best: Option<(usize, f64)>,
    pub final_checkpoint: PathBuf,
}

/// Trains the configured variant and writes `final.gcap`, `best.gcap` (when
/// a validation split is given) and `train_log.tsv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.train_cfg.validate()?;
    let labels = cfg.labels()?;
    let vocab = load_vocab(cfg)?;
    let records = load_split(cfg.require(&cfg.train, "train")?, &labels)?;
    let samples = samples_from_records(&records, &vocab, &labels)?;
    let val = match &cfg.val {
        Some(p) => Some(load_split(p, &labels)?),
        None => None,
    };
    if cfg.train_cfg.lr == 0.0 {
        eprintln!("warning: learning rate is 0; parameters will not change");
    }
    let max_nodes = cfg.resolve_max_nodes()?;
    let mut model = CaptionModel::new(cfg.model_config(vocab.len(), labels.joint_size()), cfg.train_cfg.seed)?;
    create_out(&cfg.out)?;
    let final_path = cfg.out.join("final.gcap");
    let best_path = cfg.out.join("best.gcap");
    let log_path = cfg.out.join("train_log.tsv");
    let mut log = String::from("epoch\tsteps\tmean_loss\tval_meteor\n");
    write(&log_path, &log)?;
    let decode = DecodeConfig {
        max_len: cfg.max_len,
        mode: DecodeMode::Greedy,
    };
    let mut validate = |m: &CaptionModel| -> Result<f64> {
        let recs = val.as_deref().unwrap_or(&[]);
        Ok(evaluate_model(m, recs, &vocab, &labels, GraphSource::Gold, max_nodes, &decode)?
            .report
            .meteor)
    };
    let validate: Option<&mut dyn FnMut(&CaptionModel) -> Result<f64>> =
        if val.is_some() { Some(&mut validate) } else { None };
    let mut best_score = f64::NEG_INFINITY;
    eprintln!("training {} on {} pairs", cfg.variant, samples.len());
    let outcome = train(&mut model, &samples, &cfg.train_cfg, validate, |ep, m, adam| {
        let meteor = ep.val_meteor.map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
        let _ = writeln!(log, "{}\t{}\t{:?}\t{}", ep.epoch, ep.steps, ep.mean_loss, meteor);
        write(&log_path, &log)?;
        save_checkpoint(m, Some(adam), &final_path)?;
        if let Some(v) = ep.val_meteor {
            if v > best_score {
                best_score = v;
                save_checkpoint(m, None, &best_path)?;
            }
        }
        eprintln!("epoch {} loss {:.5} meteor {}", ep.epoch, ep.mean_loss, meteor);
        Ok(())
    })?;
    save_checkpoint(&model, Some(&outcome.adam), &final_path)?;
    Ok(TrainSummary {
        variant: cfg.variant,
        epochs: outcome.epochs.len(),
        steps: outcome.steps,
        final_loss: outcome.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        best: outcome.best.map(|(e, s, _)| (e, s)),
        final_checkpoint: final_path,
    })
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("final.gcap"))
}

fn source_for(cfg: &RunConfig, record: &DatasetRecord) -> GraphSource {
    let kind = cfg.source.unwrap_or(if record.is_detection() {
        SourceKind::Detection
    } else {
        SourceKind::Gold
    });
    match kind {
        SourceKind::Gold => GraphSource::Gold,
        SourceKind::Detection => GraphSource::Detection {
            threshold: cfg.threshold,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub captions: Vec<(u64, String)>,
    pub rejected: Vec<(u64, String)>,
}

/// Writes `captions.tsv` for accepted records and `rejected.tsv` for the rest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let labels = cfg.labels()?;
    let vocab = load_vocab(cfg)?;
    let model = load_checkpoint(&checkpoint_path(cfg))?.model;
    let input = cfg
        .input
        .as_deref()
        .or(cfg.test.as_deref())
        .ok_or_else(|| Error::Config("missing required path `input`".into()))?;
    let records = load_split(input, &labels)?;
    let max_nodes = cfg.resolve_max_nodes()?;
    let decode = cfg.decode_config();
    let mut out = GenerateSummary {
        captions: Vec::new(),
        rejected: Vec::new(),
    };
    for r in &records {
        match build_graph(r, source_for(cfg, r), max_nodes, &labels)? {
            Ok(g) => {
                let input = GraphInput::new(reify(&g)?, &labels)?;
                let ids = model.decode(&input, &decode, cfg.train_cfg.seed ^ r.image_id)?;
                out.captions.push((r.image_id, vocab.decode(&ids).join(" ")));
            }
            Err(reason) => out.rejected.push((r.image_id, reason)),
        }
    }
    create_out(&cfg.out)?;
    let mut caps = String::new();
    for (id, c) in &out.captions {
        let _ = writeln!(caps, "{id}\t{c}");
    }
    write(&cfg.out.join("captions.tsv"), &caps)?;
    let mut rej = String::new();
    for (id, why) in &out.rejected {
        let _ = writeln!(rej, "{id}\t{why}");
    }
    write(&cfg.out.join("rejected.tsv"), &rej)?;
    Ok(out)
}

/// Scores a split and writes `report.txt` and `metrics.txt`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let labels = cfg.labels()?;
    let vocab = load_vocab(cfg)?;
    let ck = checkpoint_path(cfg);
    let model = load_checkpoint(&ck)?.model;
    let records = load_split(cfg.require(&cfg.test, "test")?, &labels)?;
    let source = match cfg.source.unwrap_or(SourceKind::Gold) {
        SourceKind::Gold => GraphSource::Gold,
        SourceKind::Detection => GraphSource::Detection {
            threshold: cfg.threshold,
        },
    };
    let outcome = evaluate_model(
        &model,
        &records,
        &vocab,
        &labels,
        source,
        cfg.resolve_max_nodes()?,
        &DecodeConfig {
            max_len: cfg.max_len,
            mode: DecodeMode::Greedy,
        },
    )?;
    create_out(&cfg.out)?;
    let table = format!(
        "graphs: {source}\n{}\n{}\n",
        MetricReport::table_header(),
        outcome.report.table_row(model.config.variant.display_name())
    );
    write(&cfg.out.join("report.txt"), &table)?;
    write(&cfg.out.join("metrics.txt"), &outcome.report.to_kv())?;
    Ok(outcome.report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub threshold: f64,
    pub meteor: f64,
    pub samples: usize,
    pub rejected: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub selected: f64,
}

impl SweepResult {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("threshold\tmeteor\tsamples\trejected\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{:?}\t{}\t{}", e.threshold, e.meteor, e.samples, e.rejected);
        }
        let _ = writeln!(s, "selected\t{}", self.selected);
        s
    }
}

/// Highest METEOR wins; ties go to the lower threshold.
pub fn select_threshold(entries: &[SweepEntry]) -> Option<f64> {
    let mut sorted: Vec<&SweepEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let mut best: Option<&SweepEntry> = None;
    for e in sorted {
        if best.map_or(true, |b| e.meteor > b.meteor) {
            best = Some(e);
        }
    }
    best.map(|e| e.threshold)
}

/// Evaluates one trained model on the validation split at each threshold.
pub fn cmd_sweep_threshold(cfg: &RunConfig) -> Result<SweepResult> {
    let labels = cfg.labels()?;
    let vocab = load_vocab(cfg)?;
    let model = load_checkpoint(&checkpoint_path(cfg))?.model;
    let records = load_split(cfg.require(&cfg.val, "val")?, &labels)?;
    let result = sweep(&model, &records, &vocab, &labels, &cfg.thresholds, cfg.resolve_max_nodes()?, cfg.max_len)?;
    create_out(&cfg.out)?;
    write(&cfg.out.join("sweep.tsv"), &result.to_tsv())?;
    Ok(result)
}

/// The sweep itself, without file handling.
pub fn sweep(
    model: &CaptionModel,
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    labels: &LabelSpace,
    thresholds: &[f64],
    max_nodes: usize,
    max_len: usize,
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(Error::Config("no thresholds to sweep".into()));
    }
    for (i, t) in thresholds.iter().enumerate() {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        if thresholds[..i].contains(t) {
            return Err(Error::Config(format!("threshold {t} listed twice")));
        }
    }
    let decode = DecodeConfig {
        max_len,
        mode: DecodeMode::Greedy,
    };
    let mut entries = Vec::new();
    for &t in thresholds {
        let source = GraphSource::Detection { threshold: t };
        let mut accepted = 0;
        for r in records {
            if build_graph(r, source, max_nodes, labels)?.is_ok() {
                accepted += 1;
            }
        }
        if accepted == 0 {
            eprintln!("warning: every record rejected at threshold {t}; scoring it as 0");
            entries.push(SweepEntry {
                threshold: t,
                meteor: 0.0,
                samples: 0,
                rejected: records.len(),
            });
            continue;
        }
        let out = evaluate_model(model, records, vocab, labels, source, max_nodes, &decode)?;
        entries.push(SweepEntry {
            threshold: t,
            meteor: out.report.meteor,
            samples: out.report.samples,
            rejected: out.report.rejected,
        });
    }
    if entries.iter().all(|e| e.samples == 0) {
        return Err(Error::Data("every threshold rejected every record".into()));
    }
    let selected = select_threshold(&entries).expect("non-empty");
    Ok(SweepResult { entries, selected })
}

/// Setup of the tiny-model gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSetup {
    pub variant: Variant,
    /// `(D, H, A)`.
    pub dims: (usize, usize, usize),
    pub seed: u64,
    /// Keep dropout active with masks fixed by the tape seed; otherwise both
    /// dropout rates are zero.
    pub dropout: bool,
    pub fault_injection: bool,
}

impl GradcheckSetup {
    pub fn new(variant: Variant) -> Self {
        GradcheckSetup {
            variant,
            dims: (8, 16, 8),
            seed: 0,
            dropout: true,
            fault_injection: false,
        }
    }
}

/// Finite-difference check of a tiny model at its initialization, on a batch
/// of three four-node graphs in training mode. Dropout masks are fixed by the
/// tape seed. Three graphs rather than two: batch norm over two rows maps
/// every feature to about ±1, which leaves the pooled inputs with
/// eps-sized gradients.
pub fn gradcheck_variant(setup: &GradcheckSetup) -> Result<GradientReport> {
    let vocab_size = 20;
    let labels = toy::labels();
    let (d, h, a) = setup.dims;
    let mut mc = ModelConfig::small(setup.variant, vocab_size, labels.joint_size(), d, h);
    mc.attn_dim = a;
    if !setup.dropout {
        mc.gat_dropout = 0.0;
        mc.decoder_dropout = 0.0;
    }
    let model = CaptionModel::new(mc, setup.seed)?;
    let samples = toy::gradcheck_samples(vocab_size)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let tape_seed = setup.seed.wrapping_add(1);
    let mut fwd = model.forward_batch(&refs, true, tape_seed)?;
    fwd.tape.inject_backward_fault(setup.fault_injection);
    let grads = fwd.tape.backward(fwd.loss)?;
    let opts = CheckOptions {
        seed: setup.seed,
        ..CheckOptions::default()
    };
    finite_difference_check(&model.params, &grads, &opts, |p| {
        let f = model.forward_batch_with(p, &refs, true, tape_seed)?;
        Ok(f.tape.value(f.loss).item())
    })
}

/// Runs [`gradcheck_variant`] for the configured variant and writes
/// `gradcheck.tsv`; a failing check is a numeric error naming the worst tensor.
pub fn cmd_gradcheck(cfg: &RunConfig, fault_injection: bool) -> Result<GradientReport> {
    let setup = GradcheckSetup {
        dims: (
            cfg.embed_dim.unwrap_or(8),
            cfg.hidden_dim.unwrap_or(16),
            cfg.attn_dim.unwrap_or(8),
        ),
        seed: cfg.train_cfg.seed,
        fault_injection,
        ..GradcheckSetup::new(cfg.variant)
    };
    let report = gradcheck_variant(&setup)?;
    create_out(&cfg.out)?;
    let mut s = String::from("parameter\tmax_rel_error\tcoords\n");
    for p in &report.params {
        let _ = writeln!(s, "{}\t{:e}\t{}", p.name, p.max_rel_error, p.coords_checked);
    }
    write(&cfg.out.join("gradcheck.tsv"), &s)?;
    if !report.passes(GRADCHECK_TOLERANCE) {
        let worst = report.worst().expect("at least one parameter");
        return Err(Error::Numeric(format!(
            "gradient check failed for {}: worst parameter {} with relative error {:e}",
            cfg.variant, worst.name, worst.max_rel_error
        )));
    }
    Ok(report)
}

#[derive(Parser, Debug)]
#[command(name = "graphcap", version, about = "Scene-graph captioning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the vocabulary and dataset statistics.
    Prepare(Flags),
    /// Train a model variant.
    Train(Flags),
    /// Caption every record of an input split.
    Generate(Flags),
    /// Score a split with BLEU and METEOR.
    Evaluate(Flags),
    /// Pick the detection confidence threshold on the validation split.
    Sweep(Flags),
    /// Compare analytic and numeric gradients of a tiny model.
    Gradcheck(Flags),
}

#[derive(Args, Debug, Default)]
pub struct Flags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub val: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub objects: Option<String>,
    #[arg(long)]
    pub predicates: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub threshold: Option<String>,
    /// Comma-separated list.
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long = "max-len")]
    pub max_len: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub temp: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// gold or detection.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

impl Flags {
    /// Config file first, then every flag that was given.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cwd = Path::new("");
        let pairs = [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("input", &self.input),
            ("objects", &self.objects),
            ("predicates", &self.predicates),
            ("vocab", &self.vocab),
            ("variant", &self.variant),
            ("threshold", &self.threshold),
            ("thresholds", &self.thresholds),
            ("seed", &self.seed),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("max_len", &self.max_len),
            ("mode", &self.mode),
            ("temp", &self.temp),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
            ("source", &self.source),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v, cwd)?;
            }
        }
        Ok(cfg)
    }
}

/// Runs a parsed command and returns the text to print.
pub fn execute(command: &Command) -> Result<String> {
    match command {
        Command::Prepare(f) => {
            let s = cmd_prepare(&f.resolve()?)?;
            Ok(format!(
                "vocabulary: {} tokens\ntraining pairs: {}\nmax object nodes: {}",
                s.vocab_size, s.train_pairs, s.max_object_nodes
            ))
        }
        Command::Train(f) => {
            let s = cmd_train(&f.resolve()?)?;
            let mut out = format!(
                "{}: {} epochs, {} steps, final loss {:.5}\ncheckpoint: {}",
                s.variant,
                s.epochs,
                s.steps,
                s.final_loss,
                s.final_checkpoint.display()
            );
            if let Some((e, m)) = s.best {
                let _ = write!(out, "\nbest validation METEOR {:.2} at epoch {e}", m * 100.0);
            }
            Ok(out)
        }
        Command::Generate(f) => {
            let s = cmd_generate(&f.resolve()?)?;
            Ok(format!("{} captions, {} rejected", s.captions.len(), s.rejected.len()))
        }
        Command::Evaluate(f) => {
            let r = cmd_evaluate(&f.resolve()?)?;
            Ok(format!("{}\n{}", MetricReport::table_header(), r.table_row("model")))
        }
        Command::Sweep(f) => Ok(cmd_sweep_threshold(&f.resolve()?)?.to_tsv().trim_end().to_string()),
        Command::Gradcheck(f) => {
            let cfg = f.resolve()?;
            let r = cmd_gradcheck(&cfg, f.inject_fault)?;
            let mut out = String::new();
            for p in &r.params {
                let _ = writeln!(out, "{:<20} {:.3e}", p.name, p.max_rel_error);
            }
            let _ = write!(out, "{}: max relative error {:.3e}", cfg.variant, r.max_rel_error);
            Ok(out)
        }
    }
}

/// Parses `args`, runs the command, prints the outcome and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_and_overrides() {
        let text = "# toy run\nvariant = enc\nlr = 0.001\nthresholds = 0.2, 0.4\ntrain = data/train.jsonl\n";
        let mut cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.variant, Variant::Enc);
        assert_eq!(cfg.train_cfg.lr, 1e-3);
        assert_eq!(cfg.thresholds, vec![0.2, 0.4]);
        assert_eq!(cfg.train.as_deref(), Some(Path::new("/base/data/train.jsonl")));
        cfg.set("variant", "base", Path::new("")).unwrap();
        assert_eq!(cfg.variant, Variant::Base);
        assert!(matches!(RunConfig::parse("bogus = 1", Path::new("")), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr = fast", Path::new("")), Err(Error::Config(_))));
    }

    #[test]
    fn selection_prefers_lower_threshold_on_ties() {
        let e = |t, m| SweepEntry {
            threshold: t,
            meteor: m,
            samples: 1,
            rejected: 0,
        };
        assert_eq!(select_threshold(&[e(0.6, 0.3), e(0.2, 0.3), e(0.4, 0.1)]), Some(0.2));
        assert_eq!(select_threshold(&[e(0.8, 0.0)]), Some(0.8));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["graphcap", "frobnicate"]), 1);
        assert_eq!(run(["graphcap", "train", "--variant", "huge"]), 1);
    }
}
