//! Experiment driver: one subcommand per pipeline stage.
//!
//! ```text
//! peftlab synth-corpus        seeded multi-language corpus files
//! peftlab pretrain-backbone   train the base model, freeze it forever
//! peftlab train-adapter       one language adapter on the frozen base
//! peftlab train-fusion        attention mixture over adapters
//! peftlab evaluate            greedy-decode a split, score it
//! peftlab analyze-attention   per-layer adapter contribution CSV
//! peftlab compare             evaluation summaries side by side
//! ```
//!
//! Every command resolves its configuration (file + flags + environment),
//! creates one run directory under the run root, and writes there and only
//! there: `resolved-config.toml`, `events.jsonl`, and the command's
//! artifacts. Outputs contain no timestamps, so a repeated invocation with
//! the same inputs produces byte-identical files.
//!
//! Exit codes: 0 success, 2 bad usage or configuration, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use peftlab::attnlab::{collect_traces, summarize, summary_to_csv};
use peftlab::backbone::{Backbone, BackbonePlugin, PassThrough};
use peftlab::checkpoint::{
    load_adapter_checkpoint, load_backbone_checkpoint, load_fusion_checkpoint,
    save_adapter_checkpoint, save_backbone_checkpoint, save_fusion_checkpoint, Checkpoint,
};
use peftlab::config::{Overrides, RunConfig, Split, RUN_ROOT_ENV};
use peftlab::corpus::{
    build_vocab, decode, encode, load_corpus, partition_by_language, synth_corpus, tokenize,
    Encoded, Sample, Vocabulary, EOS, SEP,
};
use peftlab::error::{Error, Result};
use peftlab::fusion::{FusedModel, FusionStack, MaskMode};
use peftlab::metrics::{
    rouge_l, smooth_bleu4, split_subtokens, token_prf, MetricReport, SampleScore,
};
use peftlab::peft::{AdapterKind, AdapterStack};
use peftlab::train::{
    events_to_jsonl, pretrain_backbone, train_adapterfusion, train_advfusion,
    train_language_adapter, TrainOutcome,
};

#[derive(Parser)]
#[command(
    name = "peftlab",
    version,
    about = "Parameter-efficient fine-tuning laboratory on a miniature frozen decoder"
)]
struct Cli {
    /// Run-config TOML file; built-in defaults apply when omitted.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root directory receiving run directories (overrides PEFTLAB_RUN_ROOT
    /// and the config file).
    #[arg(long, global = true, value_name = "DIR")]
    run_root: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic multi-language corpus (train/valid/test).
    SynthCorpus {
        /// Output directory (default: <run-root>/corpus).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },

    /// Train the base model on the training split and checkpoint it.
    PretrainBackbone {
        #[command(flatten)]
        train: TrainArgs,
    },

    /// Train one language adapter on a frozen backbone.
    TrainAdapter {
        #[command(flatten)]
        train: TrainArgs,

        /// Backbone checkpoint to build on.
        #[arg(long, value_name = "FILE")]
        backbone: PathBuf,

        /// Language tag; must appear in the training split.
        #[arg(long)]
        language: String,

        #[arg(long, value_enum)]
        method: Method,
    },

    /// Train an attention mixture over existing adapter checkpoints.
    TrainFusion {
        #[command(flatten)]
        train: TrainArgs,

        /// Directory holding the adapter checkpoints (*.ckpt) to fuse.
        #[arg(long, value_name = "DIR")]
        adapters: PathBuf,

        #[arg(long, value_enum)]
        mode: FusionModeArg,

        /// Low-resource target language (required for advfusion).
        #[arg(long, required_if_eq("mode", "advfusion"))]
        target: Option<String>,

        /// How a masked adapter is kept out of the mixture.
        #[arg(long, value_enum, default_value_t = MaskModeArg::Exclude)]
        mask_mode: MaskModeArg,

        /// Start phase two with fresh optimizer moments.
        #[arg(long)]
        reset_moments: bool,
    },

    /// Greedy-decode a split with a checkpointed model and score it.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,

        /// Comma-separated subset of: bleu4, rougeL, prf.
        #[arg(long, default_value = "bleu4,rougeL,prf")]
        metrics: String,

        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,

        /// Cap on generated tokens per sample.
        #[arg(long, default_value_t = 32)]
        max_new: usize,

        /// Row label for `compare` (default: checkpoint file stem).
        #[arg(long)]
        label: Option<String>,

        /// Run-directory name (default: eval-<label>).
        #[arg(long)]
        name: Option<String>,
    },

    /// Export per-layer adapter contributions of a fusion checkpoint.
    AnalyzeAttention {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,

        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,

        /// CSV destination (default: attention.csv in the run directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,

        /// Run-directory name (default: derived from the checkpoint path).
        #[arg(long)]
        name: Option<String>,
    },

    /// Tabulate evaluation summaries side by side.
    Compare {
        /// Evaluation run directories (each holding a summary.json).
        #[arg(required = true, value_name = "DIR")]
        runs: Vec<PathBuf>,

        /// Show per-language scores for this tag instead of aggregates.
        #[arg(long)]
        language: Option<String>,

        /// CSV destination (default: comparison.csv in the run directory).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Training-schedule overrides shared by the training subcommands.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Run-directory name override.
    #[arg(long)]
    name: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Bottleneck,
    Compacter,
    Lora,
}

impl Method {
    fn kind(self) -> AdapterKind {
        match self {
            Method::Bottleneck => AdapterKind::Bottleneck,
            Method::Compacter => AdapterKind::Compacter,
            Method::Lora => AdapterKind::Lora,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FusionModeArg {
    /// Plain attention mixture over all adapters.
    Fusion,
    /// Two-phase adversarial schedule around a target adapter.
    Advfusion,
}

impl FusionModeArg {
    fn as_str(self) -> &'static str {
        match self {
            FusionModeArg::Fusion => "fusion",
            FusionModeArg::Advfusion => "advfusion",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskModeArg {
    Exclude,
    ZeroWeights,
}

impl MaskModeArg {
    fn mode(self) -> MaskMode {
        match self {
            MaskModeArg::Exclude => MaskMode::Exclude,
            MaskModeArg::ZeroWeights => MaskMode::ZeroWeights,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let env_root = std::env::var(RUN_ROOT_ENV).ok();
    let root = cfg.resolve_run_root(cli.run_root.as_deref(), env_root.as_deref());

    match cli.cmd {
        Cmd::SynthCorpus { out } => cmd_synth_corpus(&cfg, &root, out),
        Cmd::PretrainBackbone { train } => {
            cfg.apply(&train.overrides());
            cmd_pretrain_backbone(&cfg, &root, train.name)
        }
        Cmd::TrainAdapter {
            train,
            backbone,
            language,
            method,
        } => {
            cfg.apply(&train.overrides());
            cmd_train_adapter(&cfg, &root, train.name, &backbone, &language, method)
        }
        Cmd::TrainFusion {
            train,
            adapters,
            mode,
            target,
            mask_mode,
            reset_moments,
        } => {
            cfg.apply(&train.overrides());
            cmd_train_fusion(
                &cfg,
                &root,
                train.name,
                &adapters,
                mode,
                target.as_deref(),
                mask_mode.mode(),
                reset_moments,
            )
        }
        Cmd::Evaluate {
            checkpoint,
            metrics,
            split,
            max_new,
            label,
            name,
        } => cmd_evaluate(
            &cfg,
            &root,
            &checkpoint,
            &metrics,
            split.split(),
            max_new,
            label,
            name,
        ),
        Cmd::AnalyzeAttention {
            checkpoint,
            split,
            out,
            name,
        } => cmd_analyze_attention(&cfg, &root, &checkpoint, split.split(), out, name),
        Cmd::Compare {
            runs,
            language,
            out,
        } => cmd_compare(&cfg, &root, &runs, language.as_deref(), out),
    }
}

// ── run-directory plumbing ─────────────────────────────────────────────────

struct Run {
    dir: PathBuf,
}

/// Create the run directory and drop the resolved-config echo into it.
fn start_run(cfg: &RunConfig, root: &Path, name: &str) -> Result<Run> {
    let dir = root.join(name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("resolved-config.toml"), cfg.to_toml_string()?)?;
    Ok(Run { dir })
}

impl Run {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn write_events(&self, jsonl: &str) -> Result<()> {
        fs::write(self.path("events.jsonl"), jsonl)?;
        Ok(())
    }

    /// Single-event log for commands that do not train.
    fn write_event(&self, value: serde_json::Value) -> Result<()> {
        self.write_events(&format!("{value}\n"))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what}: no such file: {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let path = cfg.data.require(split)?;
    let report = load_corpus(path)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report.samples)
}

fn encode_all(samples: &[Sample], vocab: &Vocabulary, max_seq_len: usize) -> Result<Vec<Encoded>> {
    samples
        .iter()
        .map(|s| encode(s, vocab, max_seq_len))
        .collect()
}

fn print_epochs(outcome: &TrainOutcome) {
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {}/{}: loss {loss:.6}", i + 1, outcome.epoch_losses.len());
    }
}

// ── synth-corpus ───────────────────────────────────────────────────────────

fn cmd_synth_corpus(cfg: &RunConfig, root: &Path, out: Option<PathBuf>) -> Result<()> {
    let spec = cfg.synth.as_ref().ok_or_else(|| {
        Error::Config("config has no [synth] section; nothing to synthesize".to_string())
    })?;
    let out = out.unwrap_or_else(|| root.join("corpus"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("resolved-config.toml"), cfg.to_toml_string()?)?;

    let report = synth_corpus(spec, &out)?;
    let run = Run { dir: out };
    run.write_event(serde_json::json!({
        "event": "synth_corpus",
        "languages": spec.languages,
        "overlap": spec.overlap,
        "seed": spec.seed,
        "sample_counts": report.sample_counts,
    }))?;

    for (lang, n) in &report.sample_counts {
        println!("{lang}: {n} samples");
    }
    println!("wrote {}", report.train.display());
    println!("wrote {}", report.valid.display());
    println!("wrote {}", report.test.display());
    Ok(())
}

// ── pretrain-backbone ──────────────────────────────────────────────────────

fn cmd_pretrain_backbone(cfg: &RunConfig, root: &Path, name: Option<String>) -> Result<()> {
    let samples = load_split(cfg, Split::Train)?;
    let vocab = build_vocab(&samples, cfg.backbone.max_vocab)?;
    let encoded = encode_all(&samples, &vocab, cfg.backbone.max_seq_len)?;

    let run = start_run(cfg, root, name.as_deref().unwrap_or("backbone"))?;
    let bb = Backbone::new(
        cfg.backbone.to_backbone_config(vocab.len()),
        cfg.backbone.seed,
    )?;
    println!(
        "pretraining: {} samples, vocab {}, {} parameters",
        encoded.len(),
        vocab.len(),
        bb.param_count()
    );

    let plan = cfg.training.plan();
    let outcome = pretrain_backbone(&bb, &encoded, &plan)?;
    print_epochs(&outcome);
    run.write_events(&events_to_jsonl(&outcome.events)?)?;

    let mut extra = BTreeMap::new();
    extra.insert("final_loss".to_string(), outcome.final_loss.to_string());
    extra.insert("init_seed".to_string(), cfg.backbone.seed.to_string());
    extra.insert("train_seed".to_string(), plan.seed.to_string());
    extra.insert("train_samples".to_string(), encoded.len().to_string());
    let ckpt = run.path("backbone.ckpt");
    save_backbone_checkpoint(&ckpt, &bb, &vocab, extra)?;
    println!(
        "saved {} (final loss {:.6})",
        ckpt.display(),
        outcome.final_loss
    );
    Ok(())
}

// ── train-adapter ──────────────────────────────────────────────────────────

fn cmd_train_adapter(
    cfg: &RunConfig,
    root: &Path,
    name: Option<String>,
    backbone_path: &Path,
    language: &str,
    method: Method,
) -> Result<()> {
    require_file(backbone_path, "--backbone")?;
    let samples = load_split(cfg, Split::Train)?;
    let mut by_lang = partition_by_language(&samples);
    let mine = by_lang.remove(language).ok_or_else(|| {
        let have: Vec<&String> = by_lang.keys().collect();
        Error::Config(format!(
            "language `{language}` not in the training split (have {have:?})"
        ))
    })?;

    let (bb, vocab, _) = load_backbone_checkpoint(backbone_path)?;
    let encoded = encode_all(&mine, &vocab, bb.config.max_seq_len)?;
    let spec = cfg.peft.to_spec(method.kind(), language);
    let stack = AdapterStack::new(spec, &bb.config, cfg.training.seed)?;

    let default_name = format!("adapter-{}-{language}", stack.spec.kind.as_str());
    let run = start_run(cfg, root, name.as_deref().unwrap_or(&default_name))?;
    println!(
        "training {} adapter for `{language}`: {} samples, {} trainable parameters",
        stack.spec.kind.as_str(),
        encoded.len(),
        stack.param_count()
    );

    let plan = cfg.training.plan();
    let outcome = train_language_adapter(&bb, &stack, &encoded, &plan)?;
    print_epochs(&outcome);
    run.write_events(&events_to_jsonl(&outcome.events)?)?;

    let mut extra = BTreeMap::new();
    extra.insert("language".to_string(), language.to_string());
    extra.insert("method".to_string(), stack.spec.kind.as_str().to_string());
    extra.insert("final_loss".to_string(), outcome.final_loss.to_string());
    extra.insert("seed".to_string(), plan.seed.to_string());
    let ckpt = run.path("adapter.ckpt");
    save_adapter_checkpoint(&ckpt, &bb, &stack, &vocab, extra)?;
    println!(
        "saved {} (final loss {:.6})",
        ckpt.display(),
        outcome.final_loss
    );
    Ok(())
}

// ── train-fusion ───────────────────────────────────────────────────────────

fn list_adapter_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "--adapters: no such directory: {}",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(Error::Config(format!(
            "--adapters: found {} checkpoint(s) in {}, need at least 2 to fuse",
            files.len(),
            dir.display()
        )));
    }
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_fusion(
    cfg: &RunConfig,
    root: &Path,
    name: Option<String>,
    adapters_dir: &Path,
    mode: FusionModeArg,
    target: Option<&str>,
    mask_mode: MaskMode,
    reset_moments: bool,
) -> Result<()> {
    let files = list_adapter_checkpoints(adapters_dir)?;

    let mut loaded = Vec::new();
    for f in &files {
        let (bb, stack, vocab, meta) = load_adapter_checkpoint(f)?;
        let lineage = meta.lineage.get("backbone").cloned().unwrap_or_default();
        loaded.push((bb, stack, vocab, lineage));
    }
    // One frozen backbone for everyone: reject rosters that mix lineages.
    let first_lineage = loaded[0].3.clone();
    for (i, (_, stack, _, lineage)) in loaded.iter().enumerate() {
        if *lineage != first_lineage {
            return Err(Error::Config(format!(
                "adapter `{}` ({}) was trained on a different backbone",
                stack.spec.language,
                files[i].display()
            )));
        }
    }
    loaded.sort_by(|a, b| a.1.spec.language.cmp(&b.1.spec.language));
    let adapters: Vec<AdapterStack> = loaded.iter().map(|(_, s, _, _)| s.frozen()).collect();
    let tags: Vec<String> = adapters.iter().map(|a| a.spec.language.clone()).collect();
    let kind = adapters[0].spec.kind;
    let (bb, _, vocab, _) = loaded.into_iter().next().expect("roster is non-empty");

    let fusion = FusionStack::new(
        bb.config.hidden_dim,
        bb.config.num_layers,
        &tags,
        mask_mode,
        cfg.training.seed,
    )?;
    let model = FusedModel::new(bb, adapters, fusion)?;

    let samples = load_split(cfg, Split::Train)?;
    let mut data: BTreeMap<String, Vec<Encoded>> = BTreeMap::new();
    for (lang, group) in partition_by_language(&samples) {
        if tags.contains(&lang) {
            data.insert(
                lang,
                encode_all(&group, &vocab, model.backbone.config.max_seq_len)?,
            );
        }
    }

    let default_name = format!("{}-{}", mode.as_str(), kind.as_str());
    let run = start_run(cfg, root, name.as_deref().unwrap_or(&default_name))?;
    println!(
        "{} over {:?} ({} adapters, {} trainable parameters)",
        mode.as_str(),
        tags,
        tags.len(),
        model.fusion.param_count()
    );

    let plan = cfg.training.plan();
    let reset = reset_moments || cfg.training.reset_moments;
    let outcome = match mode {
        FusionModeArg::Fusion => train_adapterfusion(&model, &data, &plan)?,
        FusionModeArg::Advfusion => {
            let target = target.expect("clap enforces --target for advfusion");
            train_advfusion(&model, &data, target, &plan, reset)?
        }
    };
    print_epochs(&outcome);
    run.write_events(&events_to_jsonl(&outcome.events)?)?;

    let mut extra = BTreeMap::new();
    extra.insert("mode".to_string(), mode.as_str().to_string());
    extra.insert("adapter_kind".to_string(), kind.as_str().to_string());
    extra.insert("final_loss".to_string(), outcome.final_loss.to_string());
    extra.insert("seed".to_string(), plan.seed.to_string());
    if let Some(t) = target {
        extra.insert("target".to_string(), t.to_string());
    }

    // The adversarial schedule also checkpoints the phase-one state: the
    // mixture as it stood while the target adapter was still masked.
    if let Some(snapshot) = &outcome.phase1_snapshot {
        let target = target.expect("snapshot only exists for advfusion");
        let current: Vec<_> = model
            .fusion
            .parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.detach()))
            .collect();
        model.fusion.restore(snapshot)?;
        model.fusion.set_masked(&[target.to_string()])?;
        let mut p1_extra = extra.clone();
        p1_extra.insert("phase".to_string(), "1".to_string());
        let p1 = run.path("phase1.ckpt");
        save_fusion_checkpoint(&p1, &model, &vocab, p1_extra)?;
        println!("saved {}", p1.display());
        model.fusion.clear_mask();
        model.fusion.restore(&current)?;
    }

    let ckpt = run.path("fusion.ckpt");
    save_fusion_checkpoint(&ckpt, &model, &vocab, extra)?;
    println!(
        "saved {} (final loss {:.6})",
        ckpt.display(),
        outcome.final_loss
    );
    Ok(())
}

// ── evaluate ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Metric {
    Bleu4,
    RougeL,
    Prf,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Bleu4 => "bleu4",
            Metric::RougeL => "rougeL",
            Metric::Prf => "prf",
        }
    }

    fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let m = match part {
                "bleu4" => Metric::Bleu4,
                "rougeL" => Metric::RougeL,
                "prf" => Metric::Prf,
                other => {
                    return Err(Error::Config(format!(
                        "unknown metric `{other}` (have: bleu4, rougeL, prf)"
                    )))
                }
            };
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no metrics requested".to_string()));
        }
        Ok(out)
    }
}

/// A checkpointed model of any kind, reduced to what evaluation needs.
enum EvalModel {
    Plain(Backbone),
    Adapter(Backbone, AdapterStack),
    Fused(Box<FusedModel>),
}

impl EvalModel {
    fn load(path: &Path) -> Result<(EvalModel, Vocabulary, String)> {
        let kind = Checkpoint::load(path)?.meta.kind;
        match kind.as_str() {
            "backbone" => {
                let (bb, vocab, _) = load_backbone_checkpoint(path)?;
                Ok((EvalModel::Plain(bb), vocab, kind))
            }
            "adapter" => {
                let (bb, stack, vocab, _) = load_adapter_checkpoint(path)?;
                Ok((EvalModel::Adapter(bb, stack), vocab, kind))
            }
            "fusion" => {
                let (model, vocab, _) = load_fusion_checkpoint(path)?;
                Ok((EvalModel::Fused(Box::new(model)), vocab, kind))
            }
            other => Err(Error::CheckpointManifest {
                path: path.display().to_string(),
                msg: format!("unknown checkpoint kind `{other}`"),
            }),
        }
    }

    fn max_seq_len(&self) -> usize {
        match self {
            EvalModel::Plain(bb) | EvalModel::Adapter(bb, _) => bb.config.max_seq_len,
            EvalModel::Fused(m) => m.backbone.config.max_seq_len,
        }
    }

    fn generate(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        match self {
            EvalModel::Plain(bb) => bb.generate_greedy(prompt, max_new, EOS, &PassThrough),
            EvalModel::Adapter(bb, stack) => {
                bb.generate_greedy(prompt, max_new, EOS, stack as &dyn BackbonePlugin)
            }
            EvalModel::Fused(m) => m.generate_greedy(prompt, max_new, EOS),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalSummary {
    label: String,
    checkpoint: String,
    split: String,
    samples: usize,
    metrics: BTreeMap<String, MetricBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricBlock {
    aggregate: f64,
    per_language: BTreeMap<String, f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &RunConfig,
    root: &Path,
    checkpoint: &Path,
    metrics: &str,
    split: Split,
    max_new: usize,
    label: Option<String>,
    name: Option<String>,
) -> Result<()> {
    require_file(checkpoint, "--checkpoint")?;
    let wanted = Metric::parse_list(metrics)?;
    let samples = load_split(cfg, split)?;

    let label = label.unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    });
    let run = start_run(
        cfg,
        root,
        name.as_deref().unwrap_or(&format!("eval-{label}")),
    )?;

    let (model, vocab, kind) = EvalModel::load(checkpoint)?;
    println!(
        "evaluating {} ({kind}) on {} split: {} samples",
        checkpoint.display(),
        split.key(),
        samples.len()
    );

    // Greedy-decode every sample once; metrics share the decodes.
    let mut decodes = String::new();
    let mut hyps: Vec<(Vec<String>, Vec<String>)> = Vec::with_capacity(samples.len());
    for s in &samples {
        let enc = encode(s, &vocab, model.max_seq_len())?;
        let sep = enc
            .ids
            .iter()
            .position(|&t| t == SEP)
            .expect("encoded samples always carry a separator");
        let prompt = &enc.ids[..=sep];
        let generated = model.generate(prompt, max_new)?;
        let hyp = decode(&generated, &vocab);
        let reference = tokenize(&s.target);
        decodes.push_str(&serde_json::to_string(&serde_json::json!({
            "id": s.id,
            "language": s.language,
            "hypothesis": hyp.join(" "),
            "reference": reference.join(" "),
        }))?);
        decodes.push('\n');
        hyps.push((hyp, reference));
    }
    fs::write(run.path("decodes.jsonl"), &decodes)?;

    let mut summary = EvalSummary {
        label,
        checkpoint: checkpoint.display().to_string(),
        split: split.key().to_string(),
        samples: samples.len(),
        metrics: BTreeMap::new(),
    };

    for metric in &wanted {
        let mut scored = Vec::with_capacity(samples.len());
        let mut params = BTreeMap::new();
        for (s, (hyp, reference)) in samples.iter().zip(&hyps) {
            let mut components = BTreeMap::new();
            let score = match metric {
                Metric::Bleu4 => smooth_bleu4(hyp, reference),
                Metric::RougeL => rouge_l(hyp, reference),
                Metric::Prf => {
                    let hyp_sub: Vec<String> =
                        hyp.iter().flat_map(|t| split_subtokens(t)).collect();
                    let ref_sub: Vec<String> =
                        reference.iter().flat_map(|t| split_subtokens(t)).collect();
                    let prf = token_prf(&hyp_sub, &ref_sub);
                    components.insert("precision".to_string(), prf.precision);
                    components.insert("recall".to_string(), prf.recall);
                    prf.f1
                }
            };
            scored.push(SampleScore {
                id: s.id.clone(),
                language: s.language.clone(),
                score,
                components,
            });
        }
        match metric {
            Metric::Bleu4 => {
                params.insert("smoothing".to_string(), "add-one for n>=2".to_string());
                params.insert("average".to_string(), "sentence".to_string());
            }
            Metric::RougeL => {
                params.insert("beta".to_string(), "1".to_string());
            }
            Metric::Prf => {
                params.insert("tokens".to_string(), "subtokens".to_string());
            }
        }
        let report = MetricReport::from_samples(metric.name(), params, scored);
        fs::write(
            run.path(&format!("{}.jsonl", metric.name())),
            report.to_jsonl()?,
        )?;

        let mut line = format!("{:<8} {:>10.4}", metric.name(), report.aggregate);
        for (lang, v) in &report.per_language {
            line.push_str(&format!("  {lang} {v:.4}"));
        }
        println!("{line}");

        summary.metrics.insert(
            metric.name().to_string(),
            MetricBlock {
                aggregate: report.aggregate,
                per_language: report.per_language.clone(),
            },
        );
    }

    fs::write(
        run.path("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    run.write_event(serde_json::json!({
        "event": "evaluate",
        "checkpoint": summary.checkpoint,
        "split": summary.split,
        "samples": summary.samples,
        "metrics": wanted.iter().map(|m| m.name()).collect::<Vec<_>>(),
    }))?;
    println!("wrote {}", run.path("summary.json").display());
    Ok(())
}

// ── analyze-attention ──────────────────────────────────────────────────────

fn cmd_analyze_attention(
    cfg: &RunConfig,
    root: &Path,
    checkpoint: &Path,
    split: Split,
    out: Option<PathBuf>,
    name: Option<String>,
) -> Result<()> {
    require_file(checkpoint, "--checkpoint")?;
    let kind = Checkpoint::load(checkpoint)?.meta.kind;
    if kind != "fusion" {
        return Err(Error::Config(format!(
            "--checkpoint: attention analysis needs a fusion checkpoint, got kind `{kind}`"
        )));
    }
    let samples = load_split(cfg, split)?;
    let (model, vocab, _) = load_fusion_checkpoint(checkpoint)?;

    let default_name = match checkpoint.parent().and_then(|p| p.file_name()) {
        Some(parent) => format!("attention-{}", parent.to_string_lossy()),
        None => "attention".to_string(),
    };
    let run = start_run(cfg, root, name.as_deref().unwrap_or(&default_name))?;

    let mut ids = Vec::with_capacity(samples.len());
    for s in &samples {
        ids.push(encode(s, &vocab, model.backbone.config.max_seq_len)?.ids);
    }
    let traces = collect_traces(&model, &ids)?;
    let summary = summarize(&model.fusion.tags, &traces)?;

    let csv_path = out.unwrap_or_else(|| run.path("attention.csv"));
    fs::write(&csv_path, summary_to_csv(&summary))?;

    for layer in &summary.layers {
        let top = layer
            .adapters
            .iter()
            .max_by(|a, b| a.percent.total_cmp(&b.percent))
            .expect("fusion rosters are non-empty");
        let note = if layer.degenerate { " (uniform)" } else { "" };
        println!(
            "layer {}: top {} at {:.1}%{note}",
            layer.layer, top.tag, top.percent
        );
    }
    run.write_event(serde_json::json!({
        "event": "analyze_attention",
        "checkpoint": checkpoint.display().to_string(),
        "split": split.key(),
        "samples": ids.len(),
        "masked": model.fusion.masked_tags(),
        "csv": csv_path.display().to_string(),
    }))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

// ── compare ────────────────────────────────────────────────────────────────

fn cmd_compare(
    cfg: &RunConfig,
    root: &Path,
    runs: &[PathBuf],
    language: Option<&str>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut summaries = Vec::new();
    for dir in runs {
        let path = dir.join("summary.json");
        require_file(&path, "compare input")?;
        let text = fs::read_to_string(&path)?;
        let summary: EvalSummary = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: not an evaluation summary: {e}", path.display()))
        })?;
        summaries.push(summary);
    }

    let mut metric_names: Vec<String> = summaries
        .iter()
        .flat_map(|s| s.metrics.keys().cloned())
        .collect();
    metric_names.sort();
    metric_names.dedup();

    let cell = |s: &EvalSummary, metric: &str| -> Option<f64> {
        let block = s.metrics.get(metric)?;
        match language {
            Some(lang) => block.per_language.get(lang).copied(),
            None => Some(block.aggregate),
        }
    };
    let header: Vec<String> = match language {
        Some(lang) => metric_names.iter().map(|m| format!("{m}[{lang}]")).collect(),
        None => metric_names.clone(),
    };

    let run = start_run(cfg, root, "comparison")?;
    let mut csv = String::from("configuration");
    for h in &header {
        csv.push(',');
        csv.push_str(h);
    }
    csv.push('\n');

    let label_width = summaries
        .iter()
        .map(|s| s.label.len())
        .chain(["configuration".len()])
        .max()
        .unwrap_or(13);
    let mut table = format!("{:<label_width$}", "configuration");
    for h in &header {
        table.push_str(&format!("  {h:>12}"));
    }
    table.push('\n');

    for s in &summaries {
        csv.push_str(&s.label);
        table.push_str(&format!("{:<label_width$}", s.label));
        for m in &metric_names {
            match cell(s, m) {
                Some(v) => {
                    csv.push_str(&format!(",{v:.4}"));
                    table.push_str(&format!("  {v:>12.4}"));
                }
                None => {
                    csv.push(',');
                    table.push_str(&format!("  {:>12}", "-"));
                }
            }
        }
        csv.push('\n');
        table.push('\n');
    }

    let csv_path = out.unwrap_or_else(|| run.path("comparison.csv"));
    fs::write(&csv_path, &csv)?;
    print!("{table}");
    run.write_event(serde_json::json!({
        "event": "compare",
        "rows": summaries.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
        "language": language,
        "csv": csv_path.display().to_string(),
    }))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
