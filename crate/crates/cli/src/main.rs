//! `xmodal`: corpus synthesis, training, generation and evaluation.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or input error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xmodal::eval::{diversity_score, evaluate_model, EvalOptions};
use xmodal::model::{generate, FrameStream, NoiseSource};
use xmodal::synth::{generate_corpus, load_corpus, CorpusSpec};
use xmodal::tensor_io::{load_tensor_file, save_tensor_file, RawTensor};
use xmodal::train::{
    finite_difference_gradcheck, load_checkpoint, tiny_fixture, train_with, GradcheckOptions, OptimizerKind, Precision, TrainOptions,
};
use xmodal::Error;

use config::{echo_config, FileConfig, ResolvedConfig};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Audio-driven stochastic frame sequence generation")]
struct Cli {
    /// TOML file with [corpus], [model], [train], [eval] and [gradcheck] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice; falls back to the config file, then XMODAL_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired frame/audio corpus.
    SynthData(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Generate frame streams for one test sequence.
    Generate(GenerateArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Diversity score of the streams in a directory.
    Diversity(DiversityArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_test: Option<usize>,
    /// Sequence length T.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    audio_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    sequence_index: usize,
    #[arg(long, default_value_t = 1)]
    num_samples: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    num_sequences: Option<usize>,
    #[arg(long)]
    samples_per_sequence: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    num_coordinates: Option<usize>,
    #[arg(long)]
    relative_floor: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiversityArgs {
    /// Directory of tensor files, each holding one `T x H x W x C` stream.
    #[arg(long)]
    dir: PathBuf,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" | "32" => Ok(Precision::F32),
        "f64" | "64" => Ok(Precision::F64),
        _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
    }
}

/// Command failure carrying its exit code.
pub(crate) struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NumericalFailure { .. } | Error::ContractViolation(_) => EXIT_CHECK_FAILED,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

pub(crate) fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

type CmdResult = Result<u8, Failure>;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Failure::from(Error::Io { path: path.to_path_buf(), source: e }))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn cmd_synth(cfg: &mut ResolvedConfig, args: SynthArgs) -> CmdResult {
    let spec: &mut CorpusSpec = &mut cfg.corpus;
    if let Some(v) = args.num_train {
        spec.num_train = v;
    }
    if let Some(v) = args.num_test {
        spec.num_test = v;
    }
    if let Some(v) = args.seq_len {
        spec.sequence_length = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.audio_dim {
        spec.audio_dim = v;
    }
    spec.validate()?;
    let manifest = generate_corpus(spec, &args.out)?;
    echo_config(&args.out, cfg, "synth-data")?;
    println!(
        "wrote {} train + {} test sequences (T={}, {}x{}, A={}) to {}",
        manifest.splits["train"].num_sequences,
        manifest.splits["test"].num_sequences,
        manifest.sequence_length,
        manifest.height,
        manifest.width,
        manifest.audio_dim,
        args.out.display()
    );
    Ok(0)
}

fn cmd_train(cfg: &mut ResolvedConfig, args: TrainArgs) -> CmdResult {
    let corpus = load_corpus(&args.corpus)?;
    let m = &corpus.manifest;
    cfg.resolve_model(m.height, m.width, m.channels, m.audio_dim)?;
    let t = &mut cfg.train;
    if let Some(v) = args.max_steps {
        t.max_steps = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.optimizer {
        t.optimizer = v;
    }
    if let Some(v) = args.precision {
        t.precision = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    let model = cfg.model.as_mut().expect("resolved above");
    if let Some(b) = args.beta {
        model.beta = b;
    }
    model.validate()?;
    cfg.train.validate()?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    create_dir(&args.out)?;
    echo_config(&args.out, cfg, "train")?;

    let log_every = args.log_every;
    let mut on_step = |r: &xmodal::train::StepRecord| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!("step {:>6}  total {:>10.4}  recon {:>10.4}  kl {:>10.4}", r.step, r.total, r.recon, r.kl);
        }
    };
    let mut on_validation = |r: &xmodal::train::ValidationRecord| {
        eprintln!("validation @ {:>6}  kl {:>10.4}  recon {:>10.4}", r.step, r.kl, r.recon);
    };
    let options = TrainOptions {
        validation: Some(&corpus.test),
        out_dir: Some(&args.out),
        resume,
        on_step: Some(&mut on_step),
        on_validation: Some(&mut on_validation),
    };
    let model = cfg.model.clone().expect("resolved above");
    let outcome = train_with(&model, &cfg.train, &corpus.train, options)?;
    let report = &outcome.report;
    #[derive(Serialize)]
    struct Summary<'a> {
        steps: usize,
        final_total: Option<f64>,
        validation: &'a [xmodal::train::ValidationRecord],
        wall_clock_secs: f64,
        checkpoint: Option<&'a Path>,
    }
    let summary = Summary {
        steps: outcome.checkpoint.step,
        final_total: report.steps.last().map(|s| s.total),
        validation: &report.validation,
        wall_clock_secs: report.wall_clock_secs,
        checkpoint: report.checkpoint.as_deref(),
    };
    write_json(&args.out.join("train_summary.json"), &summary)?;
    println!("trained to step {} in {:.1}s; checkpoint {}", summary.steps, summary.wall_clock_secs, args.out.join("checkpoint.xmck").display());
    Ok(0)
}

fn cmd_generate(cfg: &mut ResolvedConfig, args: GenerateArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let data = corpus.split(&args.split)?;
    let seq = data.get(args.sequence_index)?;
    if args.num_samples == 0 {
        return Err(usage("--num-samples must be at least 1"));
    }
    cfg.model = Some(ckpt.config.clone());
    let mut noise = NoiseSource::with_stream(cfg.seed, args.sequence_index as u64);
    let out = generate(seq.frames.frame(0), &seq.audio, &ckpt.params, &ckpt.config, args.num_samples, &mut noise)?;
    create_dir(&args.out)?;
    echo_config(&args.out, cfg, "generate")?;
    for (k, s) in out.samples.iter().enumerate() {
        let path = args.out.join(format!("sample_{k:03}.xmtf"));
        save_tensor_file(&path, &[RawTensor::new(s.shape().to_vec(), s.data().to_vec())])?;
    }
    let (t, d) = (seq.audio.len(), ckpt.config.latent_dim);
    let latents: Vec<f32> = out.latents.iter().flatten().map(|&v| v as f32).collect();
    save_tensor_file(&args.out.join("latents.xmtf"), &[RawTensor::new(vec![out.samples.len(), t, d], latents)])?;
    let lines: String = out
        .per_step_kl
        .iter()
        .enumerate()
        .map(|(step, kl)| format!("{}\n", serde_json::json!({ "t": step + 1, "kl": kl })))
        .collect();
    let kl_path = args.out.join("per_step_kl.jsonl");
    fs::write(&kl_path, lines).map_err(|e| Failure::from(Error::Io { path: kl_path, source: e }))?;
    println!("wrote {} samples of {} steps to {}", out.samples.len(), t, args.out.display());
    Ok(0)
}

fn cmd_evaluate(cfg: &mut ResolvedConfig, args: EvaluateArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let eval: &mut EvalOptions = &mut cfg.eval;
    if args.num_sequences.is_some() {
        eval.num_sequences = args.num_sequences;
    }
    if let Some(k) = args.samples_per_sequence {
        eval.samples_per_sequence = k;
    }
    cfg.model = Some(ckpt.config.clone());
    let report = evaluate_model(&ckpt.params, &ckpt.config, &corpus.test, &cfg.eval)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        echo_config(dir, cfg, "evaluate")?;
        write_json(&dir.join("eval_report.json"), &report)?;
        let lines: String = report.per_sequence.iter().map(|s| serde_json::to_string(s).expect("serializes") + "\n").collect();
        let path = dir.join("per_sequence.jsonl");
        fs::write(&path, lines).map_err(|e| Failure::from(Error::Io { path, source: e }))?;
    }
    println!(
        "sequences {}  ssim {:.4} ± {:.4}  psnr {:.2} ± {:.2} dB  diversity {:.4}",
        report.num_sequences, report.ssim_mean, report.ssim_std, report.psnr_mean, report.psnr_std, report.diversity
    );
    Ok(0)
}

fn cmd_gradcheck(cfg: &mut ResolvedConfig, args: GradcheckArgs) -> CmdResult {
    let g: &mut GradcheckOptions = &mut cfg.gradcheck;
    if let Some(v) = args.epsilon {
        g.epsilon = v;
    }
    if let Some(v) = args.num_coordinates {
        g.num_coordinates = v;
    }
    if let Some(v) = args.relative_floor {
        g.relative_floor = v;
    }
    let (model, frames, audio) = tiny_fixture(cfg.seed)?;
    cfg.model = Some(model.clone());
    let report = finite_difference_gradcheck(&model, &frames, &audio, &cfg.gradcheck)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        echo_config(dir, cfg, "gradcheck")?;
        write_json(&dir.join("gradcheck_report.json"), &report)?;
    }
    for (group, err) in report.per_group() {
        println!("{group:<14} max relative error {err:.3e}");
    }
    let pass = report.max_relative_error < args.threshold;
    println!(
        "max relative error {:.3e} over {} coordinates: {}",
        report.max_relative_error,
        report.coordinates.len(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_diversity(args: DiversityArgs) -> CmdResult {
    let entries = fs::read_dir(&args.dir).map_err(|e| Failure::from(Error::Io { path: args.dir.clone(), source: e }))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xmtf") && p.file_name().is_some_and(|n| n != "latents.xmtf"))
        .collect();
    paths.sort();
    let mut streams = Vec::new();
    for p in &paths {
        let tensors = load_tensor_file(p)?;
        let [t] = tensors.as_slice() else {
            return Err(usage(format!("{}: expected exactly one tensor", p.display())));
        };
        let &[len, h, w, c] = t.shape.as_slice() else {
            return Err(usage(format!("{}: expected a T x H x W x C tensor", p.display())));
        };
        streams.push(FrameStream::new(len, h, w, c, t.data.clone())?);
    }
    let score = diversity_score(&streams)?;
    println!("{score}");
    Ok(0)
}

fn run(cli: Cli) -> CmdResult {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let env_seed = match std::env::var("XMODAL_SEED") {
        Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| usage(format!("XMODAL_SEED={s:?} is not an unsigned integer")))?),
        Err(_) => None,
    };
    let mut cfg = ResolvedConfig::new(file, cli.seed, env_seed);
    match cli.command {
        Command::SynthData(a) => cmd_synth(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Generate(a) => cmd_generate(&mut cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&mut cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(&mut cfg, a),
        Command::Diversity(a) => cmd_diversity(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
