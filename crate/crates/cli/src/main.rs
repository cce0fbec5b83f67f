//! `mdlm` — the end-to-end pipeline driver: build a vocabulary, curate a
//! corpus, train (continual pre-training or instruction SFT), generate,
//! evaluate, and inspect checkpoints.

mod config;
mod data;
mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mdlm_core::checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint};
use mdlm_core::corpus::{assemble_corpus, measure_records};
use mdlm_core::eval::pseudo_perplexity;
use mdlm_core::generator::{
    decode_generated, generate, render_trace_row, GeneratorConfig, RemaskStrategy,
};
use mdlm_core::lora::attach;
use mdlm_core::model::init_parameters;
use mdlm_core::trainer::{
    resume_train, train, OptimizerState, TrainConfig, TrainHooks, TrainPhase, TrainTarget,
};
use mdlm_core::vocab::{build_vocab, TokenSequence, TokenizerMode, Vocabulary};

use config::{FileConfig, TrainOverrides};
use manifest::{manifest_path_for, RunManifest};

#[derive(Parser)]
#[command(
    name = "mdlm",
    version,
    about = "Masked diffusion language modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vocabulary tools.
    Vocab {
        #[command(subcommand)]
        cmd: VocabCmd,
    },
    /// Corpus curation.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Training phases.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Fill a masked continuation after a prompt.
    Generate(GenerateArgs),
    /// Intrinsic evaluation.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Print a checkpoint's header (config + tensor directory) without
    /// loading tensor data.
    Inspect(InspectArgs),
}

#[derive(Subcommand)]
enum VocabCmd {
    /// Build a vocabulary from a raw text corpus.
    Build(VocabBuildArgs),
}

#[derive(Args)]
struct VocabBuildArgs {
    /// Tokenizer granularity: char or word.
    #[arg(long, default_value = "char")]
    mode: String,
    /// Vocabulary cap, reserved specials included.
    #[arg(long, default_value_t = 256)]
    max_size: usize,
    /// Input corpus, UTF-8 text.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Length-filter, merge, shuffle and sample the source pools.
    Prep(CorpusPrepArgs),
}

#[derive(Args)]
struct CorpusPrepArgs {
    /// Active vocabulary (token lengths are measured under it).
    #[arg(long)]
    vocab: PathBuf,
    /// Encyclopedic source file (kept whole after filtering).
    #[arg(long)]
    enc: PathBuf,
    /// Web/news pool file; repeat for multiple pools.
    #[arg(long, required = true)]
    pool: Vec<PathBuf>,
    /// Maximum token length; longer records are filtered out.
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    /// Records to sample from the merged, shuffled pools.
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest (one `source\ttext` line per record).
    #[arg(long)]
    out: PathBuf,
    /// Curation report path.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Continual pre-training: MLM corruption over raw text. Attaches LoRA
    /// adapters when the config has a [lora] section; otherwise trains the
    /// full model (how a fresh desk-scale base gets built).
    Cpt(TrainArgs),
    /// Two-stage instruction fine-tuning: response-only masking,
    /// full-parameter. Merges any adapters on the input checkpoint first.
    Sft(SftArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Vocabulary file (overrides [data].vocab).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Training data (overrides [data].corpus).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Starting checkpoint; fresh initialization when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (default: `<out>.metrics.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resume the run stored in --ckpt (restores optimizer state and step).
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SftArgs {
    /// Fine-tuning stage (1 = general instructions, 2 = specialized).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Optional config file supplying [generate] defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    /// Wrap the prompt in the instruction scaffold.
    #[arg(long)]
    sft: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    rep_pen: Option<f64>,
    /// low_conf or random.
    #[arg(long)]
    remask: Option<String>,
    #[arg(long)]
    stochastic: Option<bool>,
    /// Classifier-free guidance scale (0 skips the unconditional pass).
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-step sequence states, one row per step, masks as `_`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output text file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Masked-LM pseudo-perplexity over a document file.
    Ppl(EvalPplArgs),
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Re-masking rounds per document.
    #[arg(long)]
    rounds: Option<usize>,
    /// Output summary file (JSON line).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to inspect.
    ckpt: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = setup_threads().and_then(|_| run(Cli::parse())) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// `MDLM_THREADS` caps internal parallelism; 0 or unset means auto.
fn setup_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MDLM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("MDLM_THREADS must be a number, got '{v}'"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring thread pool")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vocab {
            cmd: VocabCmd::Build(args),
        } => cmd_vocab_build(args),
        Command::Corpus {
            cmd: CorpusCmd::Prep(args),
        } => cmd_corpus_prep(args),
        Command::Train { cmd } => match cmd {
            TrainCmd::Cpt(args) => cmd_train(args, TrainPhase::Cpt, None),
            TrainCmd::Sft(args) => cmd_train(args.train, TrainPhase::Sft, Some(args.stage)),
        },
        Command::Generate(args) => cmd_generate(args),
        Command::Eval {
            cmd: EvalCmd::Ppl(args),
        } => cmd_eval_ppl(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Vocabulary::parse(&text)?)
}

#[derive(Serialize)]
struct VocabSnapshot {
    mode: String,
    max_size: usize,
}

fn cmd_vocab_build(args: VocabBuildArgs) -> Result<()> {
    let mode: TokenizerMode = args.mode.parse()?;
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut run = RunManifest::new("vocab build");
    run.input(&args.input)?;
    run.config(&VocabSnapshot {
        mode: args.mode.clone(),
        max_size: args.max_size,
    })?;

    let vocab = build_vocab(&text, mode, args.max_size)?;
    std::fs::write(&args.out, vocab.render())?;
    println!(
        "vocabulary: {} tokens ({} specials) -> {}",
        vocab.len(),
        mdlm_core::vocab::NUM_SPECIALS,
        args.out.display()
    );

    run.output(&args.out);
    run.write(&args.manifest.unwrap_or_else(|| manifest_path_for(&args.out)))
}

#[derive(Serialize)]
struct CorpusSnapshot {
    max_len: usize,
    sample: usize,
    seed: u64,
}

fn source_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "source".to_string())
}

fn cmd_corpus_prep(args: CorpusPrepArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let mut run = RunManifest::new("corpus prep");
    run.seed(args.seed);
    run.config(&CorpusSnapshot {
        max_len: args.max_len,
        sample: args.sample,
        seed: args.seed,
    })?;
    run.input(&args.vocab)?;
    run.input(&args.enc)?;

    let enc_lines = data::read_lines(&args.enc)?;
    let enc_records = measure_records(&enc_lines, &source_label(&args.enc), &vocab);
    let mut pools = Vec::with_capacity(args.pool.len());
    for pool_path in &args.pool {
        run.input(pool_path)?;
        let lines = data::read_lines(pool_path)?;
        pools.push(measure_records(&lines, &source_label(pool_path), &vocab));
    }

    let (records, report) =
        assemble_corpus(enc_records, pools, args.sample, args.max_len, args.seed)?;

    let mut out = BufWriter::new(File::create(&args.out)?);
    for rec in &records {
        writeln!(out, "{}\t{}", rec.source, rec.text)?;
    }
    out.flush()?;
    std::fs::write(&args.report, report.render())?;
    println!(
        "curated {} records ({} sampled from pools) -> {}",
        report.total,
        report.sampled_total,
        args.out.display()
    );

    run.output(&args.out).output(&args.report);
    run.write(&args.manifest.unwrap_or_else(|| manifest_path_for(&args.out)))
}

#[derive(Serialize)]
struct TrainSnapshot {
    phase: String,
    stage: Option<u8>,
    model: mdlm_core::model::ModelConfig,
    train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    lora: Option<mdlm_core::lora::LoraConfig>,
    sft_max_len: Option<usize>,
}

fn metrics_path_for(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".to_string());
    name.push_str(".metrics.csv");
    out.with_file_name(name)
}

fn cmd_train(args: TrainArgs, phase: TrainPhase, stage: Option<u8>) -> Result<()> {
    let file_cfg = FileConfig::load(&args.config)?;
    let vocab_path = args
        .vocab
        .clone()
        .or_else(|| file_cfg.data.vocab.as_ref().map(PathBuf::from))
        .context("no vocabulary: pass --vocab or set [data].vocab")?;
    let data_path = args
        .data
        .clone()
        .or_else(|| file_cfg.data.corpus.as_ref().map(PathBuf::from))
        .context("no training data: pass --data or set [data].corpus")?;
    let vocab = load_vocab(&vocab_path)?;

    let mut run = RunManifest::new(match (phase, stage) {
        (TrainPhase::Cpt, _) => "train cpt".to_string(),
        (TrainPhase::Sft, s) => format!("train sft stage {}", s.unwrap_or(1)),
    });
    run.input(&args.config)?;
    run.input(&vocab_path)?;
    run.input(&data_path)?;
    if let Some(ckpt) = &args.ckpt {
        run.input(ckpt)?;
    }

    let model_cfg = file_cfg.model.build(vocab.len());
    let mut train_cfg = file_cfg.train.build(phase);
    args.overrides.apply(&mut train_cfg);

    // Assemble the dataset.
    let sft_max_len = file_cfg.data.sft_max_len.unwrap_or(256);
    let dataset: Vec<TokenSequence> = match phase {
        TrainPhase::Cpt => {
            let records = data::load_text_records(&data_path)?;
            records
                .iter()
                .map(|text| {
                    let mut seq = vocab.encode(text);
                    seq.truncate(model_cfg.max_positions);
                    seq
                })
                .filter(|s| !s.is_empty())
                .collect()
        }
        TrainPhase::Sft => {
            if sft_max_len > model_cfg.max_positions {
                bail!(
                    "sft_max_len {} exceeds model max_positions {}",
                    sft_max_len,
                    model_cfg.max_positions
                );
            }
            let (pairs, malformed) = data::load_sft_pairs(&data_path)?;
            if malformed > 0 {
                log::warn!("{malformed} lines without an instruction\\tresponse tab, dropped");
            }
            let mut rejected = 0usize;
            let dataset: Vec<TokenSequence> = pairs
                .iter()
                .filter_map(
                    |(i, r)| match vocab.format_sft_pair(i, r, sft_max_len) {
                        Ok(seq) => Some(seq),
                        Err(_) => {
                            rejected += 1;
                            None
                        }
                    },
                )
                .collect();
            if rejected > 0 {
                log::warn!("{rejected} pairs rejected: instruction alone exceeds max_len");
            }
            dataset
        }
    };
    if dataset.is_empty() {
        bail!("no usable training examples in {}", data_path.display());
    }

    // Starting point.
    let (target, opt_state, start_step) = match (&args.ckpt, args.resume) {
        (Some(path), true) => {
            let ckpt = load_checkpoint(path)?;
            if let Some(stored) = &ckpt.train_config {
                log::info!("resume: using the training config stored in the checkpoint");
                train_cfg = stored.clone();
            }
            let (target, state, progress) = ckpt.into_parts()?;
            check_vocab_size(target.params().config.vocab_size, vocab.len())?;
            (target, state, progress.global_step)
        }
        (Some(path), false) => {
            let (loaded, _, _) = load_checkpoint(path)?.into_parts()?;
            check_vocab_size(loaded.params().config.vocab_size, vocab.len())?;
            let base = match loaded {
                TrainTarget::Full(p) => p,
                TrainTarget::Lora(a) => {
                    log::info!("merging adapters from {} into the base", path.display());
                    a.merge()
                }
            };
            (wrap_target(base, phase, &file_cfg)?, OptimizerState::new(), 0)
        }
        (None, true) => bail!("--resume needs --ckpt"),
        (None, false) => {
            let base = init_parameters::<f32>(&model_cfg)?;
            (wrap_target(base, phase, &file_cfg)?, OptimizerState::new(), 0)
        }
    };

    // Pin the resolved warmup so the checkpoint records it.
    let total = train_cfg.total_steps(dataset.len());
    train_cfg.warmup_steps = Some(train_cfg.resolved_warmup(total));

    run.seed(train_cfg.seed);
    run.config(&TrainSnapshot {
        phase: match phase {
            TrainPhase::Cpt => "cpt".into(),
            TrainPhase::Sft => "sft".into(),
        },
        stage,
        model: target.params().config.clone(),
        train: train_cfg.clone(),
        lora: target.adapters().map(|a| a.config.clone()),
        sft_max_len: matches!(phase, TrainPhase::Sft).then_some(sft_max_len),
    })?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| metrics_path_for(&args.out));
    let mut metrics_file = BufWriter::new(File::create(&metrics_path)?);
    let ckpt_cfg = train_cfg.clone();
    let out_path = args.out.clone();
    let mut hooks = TrainHooks {
        metrics: Some(&mut metrics_file),
        checkpoint: Some(Box::new(move |t, s, step| {
            let ckpt = Checkpoint::from_target(t, Some(&ckpt_cfg), Some(s), step);
            save_checkpoint(&ckpt, &out_path)
        })),
    };

    let outcome = if args.resume {
        log::info!("resuming at step {start_step}");
        resume_train(
            target,
            opt_state,
            start_step,
            &dataset,
            &train_cfg,
            &vocab.specials,
            &mut hooks,
        )?
    } else {
        train(target, &dataset, &train_cfg, &vocab.specials, &mut hooks)?
    };
    drop(hooks);

    let last = outcome.report.metrics.last();
    println!(
        "trained {} steps, final loss {:.4}, checkpoint -> {}",
        outcome.report.metrics.last().map(|m| m.step).unwrap_or(0),
        last.map(|m| m.loss).unwrap_or(f64::NAN),
        args.out.display()
    );
    if outcome.report.skipped_examples > 0 {
        log::warn!(
            "{} examples skipped (no maskable positions)",
            outcome.report.skipped_examples
        );
    }

    run.output(&args.out).output(&metrics_path);
    run.write(&args.manifest.unwrap_or_else(|| manifest_path_for(&args.out)))
}

fn check_vocab_size(ckpt: usize, vocab: usize) -> Result<()> {
    if ckpt != vocab {
        bail!("checkpoint vocab_size {ckpt} does not match vocabulary size {vocab}");
    }
    Ok(())
}

fn wrap_target(
    base: mdlm_core::model::ModelParameters<f32>,
    phase: TrainPhase,
    file_cfg: &FileConfig,
) -> Result<TrainTarget<f32>> {
    match (&file_cfg.lora, phase) {
        (Some(section), TrainPhase::Cpt) => {
            let (lora_cfg, seed) = section.build();
            Ok(TrainTarget::Lora(attach(base, &lora_cfg, seed)?))
        }
        (Some(_), TrainPhase::Sft) => {
            log::warn!("[lora] section ignored: SFT is full-parameter");
            Ok(TrainTarget::Full(base))
        }
        (None, _) => Ok(TrainTarget::Full(base)),
    }
}

#[derive(Serialize)]
struct GenerateSnapshot {
    prompt: String,
    sft: bool,
    generator: GeneratorConfig,
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut gen_cfg = file_cfg.generate.build()?;
    if let Some(v) = args.steps {
        gen_cfg.steps = v;
    }
    if let Some(v) = args.max_new_tokens {
        gen_cfg.max_new_tokens = v;
    }
    if let Some(v) = args.block_len {
        gen_cfg.block_len = v;
    }
    if let Some(v) = args.temp {
        gen_cfg.temperature = v;
    }
    if let Some(v) = args.rep_pen {
        gen_cfg.rep_penalty = v;
    }
    if let Some(v) = &args.remask {
        gen_cfg.remask = v.parse::<RemaskStrategy>()?;
    }
    if let Some(v) = args.stochastic {
        gen_cfg.stochastic = v;
    }
    if let Some(v) = args.cfg {
        gen_cfg.cfg_scale = v;
    }
    if let Some(v) = args.seed {
        gen_cfg.seed = v;
    }

    let vocab = load_vocab(&args.vocab)?;
    let mut run = RunManifest::new("generate");
    run.seed(gen_cfg.seed);
    run.input(&args.ckpt)?;
    run.input(&args.vocab)?;
    if let Some(cfg) = &args.config {
        run.input(cfg)?;
    }
    run.config(&GenerateSnapshot {
        prompt: args.prompt.clone(),
        sft: args.sft,
        generator: gen_cfg.clone(),
    })?;

    let (target, _, _) = load_checkpoint(&args.ckpt)?.into_parts()?;
    check_vocab_size(target.params().config.vocab_size, vocab.len())?;
    let prompt = if args.sft {
        vocab.format_sft_prompt(&args.prompt)
    } else {
        vocab.encode(&args.prompt)
    };

    let mut trace_file = match &args.trace {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut trace_cb = |seq: &TokenSequence| {
        if let Some(w) = trace_file.as_mut() {
            let _ = writeln!(w, "{}", render_trace_row(&vocab, seq));
        }
    };

    let out_seq = generate(
        target.params(),
        target.adapters(),
        &prompt,
        &gen_cfg,
        &vocab.specials,
        args.trace.is_some().then_some(&mut trace_cb),
    )?;
    if let Some(mut w) = trace_file {
        w.flush()?;
    }

    let text = decode_generated(&vocab, &out_seq, prompt.len());
    println!("{text}");
    std::fs::write(&args.out, format!("{text}\n"))?;

    run.output(&args.out);
    if let Some(t) = &args.trace {
        run.output(t);
    }
    run.write(&args.manifest.unwrap_or_else(|| manifest_path_for(&args.out)))
}

fn cmd_eval_ppl(args: EvalPplArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut eval_cfg = file_cfg.eval.build();
    if let Some(v) = args.mask_prob {
        eval_cfg.mask_prob = v;
    }
    if let Some(v) = args.max_len {
        eval_cfg.max_len = v;
    }
    if let Some(v) = args.seed {
        eval_cfg.seed = v;
    }
    if let Some(v) = args.rounds {
        eval_cfg.num_rounds = v;
    }

    let vocab = load_vocab(&args.vocab)?;
    let mut run = RunManifest::new("eval ppl");
    run.seed(eval_cfg.seed);
    run.input(&args.ckpt)?;
    run.input(&args.vocab)?;
    run.input(&args.corpus)?;
    run.config(&eval_cfg)?;

    let (target, _, _) = load_checkpoint(&args.ckpt)?.into_parts()?;
    check_vocab_size(target.params().config.vocab_size, vocab.len())?;
    let max_pos = target.params().config.max_positions;
    if eval_cfg.max_len > max_pos {
        log::info!("clamping eval max_len to the model's {max_pos} positions");
        eval_cfg.max_len = max_pos;
    }

    let docs: Vec<TokenSequence> = data::load_text_records(&args.corpus)?
        .iter()
        .map(|t| vocab.encode(t))
        .filter(|s| !s.is_empty())
        .collect();
    let report = pseudo_perplexity(
        target.params(),
        target.adapters(),
        &docs,
        &eval_cfg,
        &vocab.specials,
    )?;

    let summary = serde_json::to_string(&report)?;
    println!("{}", report.ppl);
    println!("{summary}");
    std::fs::write(&args.out, format!("{summary}\n"))?;

    run.output(&args.out);
    run.write(&args.manifest.unwrap_or_else(|| manifest_path_for(&args.out)))
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (version, header) = read_header(&args.ckpt)?;
    println!("mdlm checkpoint v{version} ({})", args.ckpt.display());
    println!("{header}");
    if let Some(path) = &args.manifest {
        let mut run = RunManifest::new("inspect");
        run.input(&args.ckpt)?;
        run.write(path)?;
    }
    Ok(())
}
