use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use vlalign::captions::{mask_string, shared_caption};
use vlalign::corpus::{
    join_samples, load_synthetic_manifest, load_triplets, make_toy_corpus, FeatureStore, FidelityMix, Lexicon,
    ToyCorpusConfig,
};
use vlalign::eval::{analysis_csv, misalignment_analysis, toy_tasks, write_plots};
use vlalign::objective::{write_trace_csv, LossConfig};
use vlalign::pipeline::{
    ablation_sweep, build_scorers, run_pipeline, train_model, training_samples, write_toy_corpus, EvalData, EvalTask,
    Paths, RunConfig, RunOptions, StageStatus,
};
use vlalign::scoring::{
    apply_weights, load_weights, save_weights, score_corpus, weigh_samples, ScoreCache, ScoreOptions, ScoreTable,
    WeightingStrategy,
};
use vlalign::{Error, Model, Result};

#[derive(Parser)]
#[command(name = "vlalign", version, about = "Video-language alignment training with weighted synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus with known generation fidelity.
    Toygen(ToygenArgs),
    /// Score synthetic videos against both captions with the frame ensemble.
    Score(ScoreArgs),
    /// Turn scores into per-sample weights.
    Weigh(WeighArgs),
    /// Train the surrogate model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on entailment, retrieval or VQA data.
    Eval(EvalArgs),
    /// Per-misalignment score-difference statistics.
    Analyze(AnalyzeArgs),
    /// Train one model per weighting strategy on shared scores.
    Sweep(SweepArgs),
    /// Run every stage in a directory.
    Pipeline(PipelineArgs),
    /// Caption utilities.
    #[command(subcommand)]
    Captions(CaptionsCommand),
}

#[derive(Args)]
struct ToygenArgs {
    /// Toy corpus config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_triplets: Option<usize>,
    #[arg(long)]
    fidelity: Option<f64>,
    /// Fraction of synthetic videos generated at --mix-fidelity.
    #[arg(long, requires = "mix_fidelity")]
    mix_fraction: Option<f64>,
    #[arg(long, requires = "mix_fraction")]
    mix_fidelity: Option<f64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    synthetics: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Token vectors used by the oracle scorer.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    cache: PathBuf,
    /// Comma-separated: oracle, oracle:<tau>, model:<checkpoint>.
    #[arg(long, value_delimiter = ',', default_value = "oracle")]
    scorers: Vec<String>,
    #[arg(long, default_value_t = 4)]
    n_frames: usize,
    #[arg(long, default_value_t = 49)]
    frame_count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeighArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    synthetics: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: WeightingStrategy,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    synthetics: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Loss and optimizer settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Entailment,
    Retrieval,
    Vqa,
}

impl From<TaskArg> for EvalTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Entailment => EvalTask::Entailment,
            TaskArg::Retrieval => EvalTask::Retrieval,
            TaskArg::Vqa => EvalTask::Vqa,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(value_enum)]
    task: TaskArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one SVG histogram per misalignment type.
    #[arg(long)]
    plots: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Rerun stages even when their outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy, required = true)]
    strategies: Vec<WeightingStrategy>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<WeightingStrategy>,
}

#[derive(Subcommand)]
enum CaptionsCommand {
    /// Print the shared caption of two captions and both token masks.
    Lcs {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<WeightingStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Toygen(a) => toygen(a),
        Command::Score(a) => score(a),
        Command::Weigh(a) => weigh(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => sweep(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Captions(CaptionsCommand::Lcs { a, b }) => {
            let shared = shared_caption(&a, &b);
            println!("shared: {}", shared.text);
            println!("mask_a: {}", mask_string(&shared.mask_pos));
            println!("mask_b: {}", mask_string(&shared.mask_neg));
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn toygen(a: ToygenArgs) -> Result<()> {
    let mut config: ToyCorpusConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ToyCorpusConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.n_triplets {
        config.n_triplets = n;
    }
    if let Some(f) = a.fidelity {
        config.fidelity = f;
    }
    if let (Some(fraction), Some(fidelity)) = (a.mix_fraction, a.mix_fidelity) {
        config.mix = Some(FidelityMix { fraction, fidelity });
    }
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    let corpus = make_toy_corpus(&config)?;
    let paths = Paths::default().resolve(&a.out);
    write_toy_corpus(&corpus, &paths)?;
    toy_tasks(&corpus, config.seed).save(&paths.entailment_data, &paths.retrieval_data, &paths.vqa_data)?;
    println!(
        "wrote {} triplets and {} synthetic videos to {}",
        corpus.triplets.len(),
        corpus.synthetics.len(),
        a.out.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let triplets = load_triplets(&a.triplets)?;
    let synthetics = load_synthetic_manifest(&a.synthetics, &triplets)?;
    let features = Arc::new(FeatureStore::load(&a.features)?);
    let lexicon = a.lexicon.as_deref().map(Lexicon::load).transpose()?.map(Arc::new);
    let scorers = build_scorers(&a.scorers, &features, lexicon.as_ref())?;
    let cache = ScoreCache::open(&a.cache)?;
    let before = cache.len();
    let options = ScoreOptions {
        n_frames: a.n_frames,
        default_frame_count: a.frame_count,
        ..ScoreOptions::default()
    };
    let table = score_corpus(&join_samples(&triplets, &synthetics), &scorers, &cache, &options)?;
    table.save(&a.out)?;
    println!(
        "scored {} synthetic videos; {} new cache records",
        table.rows.len(),
        cache.len() - before
    );
    Ok(())
}

fn weigh(a: WeighArgs) -> Result<()> {
    let triplets = load_triplets(&a.triplets)?;
    let synthetics = load_synthetic_manifest(&a.synthetics, &triplets)?;
    let scores = ScoreTable::load(&a.scores)?;
    let weights = weigh_samples(&join_samples(&triplets, &synthetics), &scores, a.strategy)?;
    save_weights(&a.out, &weights)?;
    let mean = weights.iter().map(|w| w.omega).sum::<f64>() / weights.len().max(1) as f64;
    println!("{} weights, mean omega {mean:.4}", weights.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut loss: LossConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => LossConfig::default(),
    };
    if let Some(s) = a.seed {
        loss.seed = s;
    }
    if let Some(e) = a.epochs {
        loss.epochs = e;
    }
    loss.validate().map_err(|e| Error::Config(e.to_string()))?;
    let triplets = load_triplets(&a.triplets)?;
    let synthetics = load_synthetic_manifest(&a.synthetics, &triplets)?;
    let features = FeatureStore::load(&a.features)?;
    let mut samples = training_samples(&triplets, &synthetics);
    apply_weights(&mut samples, &load_weights(&a.weights)?)?;
    let outcome = train_model(&samples, &features, a.embed_dim, &loss)?;
    outcome.model.save(&a.out)?;
    if let Some(trace) = &a.trace {
        write_trace_csv(trace, &outcome.trace)?;
    }
    if let Some(last) = outcome.trace.last() {
        println!("epoch {}: total loss {:.6}", last.epoch, last.total);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::Io {
        path: a.checkpoint.clone(),
        source: e,
    })?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let model = Model::load(&a.checkpoint)?;
    let features = FeatureStore::load(&a.features)?;
    let report = EvalData::load(a.task.into(), &a.data)?.evaluate(&model, &features, &digest)?;
    report.save(&a.out)?;
    println!("{} {} = {:.6} over {} items", report.task, report.metric, report.value, report.n_items);
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let triplets = load_triplets(&a.triplets)?;
    let scores = ScoreTable::load(&a.scores)?;
    let rows = misalignment_analysis(&scores, &triplets)?;
    let csv = analysis_csv(&rows);
    std::fs::write(&a.out, &csv).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    if let Some(dir) = &a.plots {
        write_plots(dir, &rows)?;
    }
    for r in &rows {
        match r.mean {
            Some(m) => println!("{:<14} n={:<5} mean={m:+.4}", r.misalignment.to_string(), r.count),
            None => println!("{:<14} n=0", r.misalignment.to_string()),
        }
    }
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.loss.epochs = e;
    }
    Ok(config)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let config = run_config(&a.run)?;
    let options = RunOptions {
        force: a.run.force,
        only: None,
    };
    let rows = ablation_sweep(&config, &a.run.dir, &a.strategies, &options)?;
    for r in &rows {
        match (&r.metrics, &r.error) {
            (Some(m), _) => println!("{:<13} auc={:.4} map={:.4} acc={:.4}", r.strategy.to_string(), m.auc, m.map, m.accuracy),
            (None, Some(e)) => println!("{:<13} failed: {e}", r.strategy.to_string()),
            (None, None) => {}
        }
    }
    println!("wrote {}", a.run.dir.join("sweep.csv").display());
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut config = run_config(&a.run)?;
    if let Some(s) = a.strategy {
        config.strategy = s;
    }
    config.validate()?;
    let options = RunOptions {
        force: a.run.force,
        only: None,
    };
    let manifest = run_pipeline(&config, &a.run.dir, &options)?;
    for s in &manifest.stages {
        let status = match s.status {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "skipped",
            StageStatus::Failed => "failed",
        };
        println!("{:<8} {status:<8} {:.2}s", s.stage.as_str(), s.seconds);
    }
    Ok(())
}
