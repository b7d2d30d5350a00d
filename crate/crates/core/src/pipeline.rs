//! Staged runs driven by a single JSON config.
//!
//! Stages run in order: toygen, score, weigh, train, eval, analyze. Each
//! output file gets a `<file>.meta.json` sidecar recording the config digest
//! that produced it. A stage is skipped when its outputs carry the current
//! digest and are at least as new as its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    join_samples, load_synthetic_manifest, load_triplets, make_toy_corpus, write_jsonl, FeatureStore, Lexicon,
    SyntheticVideo, ToyCorpus, ToyCorpusConfig, TrainingSample, Triplet, TEST_SOURCE,
};
use crate::error::{Error, Result};
use crate::eval::{
    analysis_csv, evaluate_entailment, evaluate_retrieval, evaluate_vqa, load_entailment, load_vqa,
    misalignment_analysis, toy_tasks, write_plots, EntailmentExample, EvalReport, RetrievalTask, ToyTasks, VqaItem,
};
use crate::model::{ModelConfig, ModelScorer, Vocab};
use crate::objective::{fit, prepare_samples, write_trace_csv, FitOutcome, LossConfig};
use crate::scoring::{
    apply_weights, load_weights, save_weights, score_corpus, weigh_samples, FrameScorer, OracleScorer, ScoreCache,
    ScoreOptions, ScoreTable, WeightRecord, WeightingStrategy,
};
use crate::Model;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Artifact locations, relative to the run directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub triplets: PathBuf,
    pub synthetics: PathBuf,
    pub features: PathBuf,
    pub lexicon: PathBuf,
    pub ground_truth: PathBuf,
    pub cache: PathBuf,
    pub scores: PathBuf,
    pub weights: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub entailment_data: PathBuf,
    pub retrieval_data: PathBuf,
    pub vqa_data: PathBuf,
    pub reports: PathBuf,
    pub analysis: PathBuf,
    pub plots: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            triplets: "triplets.jsonl".into(),
            synthetics: "synthetics.jsonl".into(),
            features: "features.jsonl".into(),
            lexicon: "lexicon.jsonl".into(),
            ground_truth: "ground_truth.jsonl".into(),
            cache: "score_cache.jsonl".into(),
            scores: "scores.jsonl".into(),
            weights: "weights.jsonl".into(),
            checkpoint: "checkpoint.json".into(),
            trace: "trace.csv".into(),
            entailment_data: "eval/entailment.jsonl".into(),
            retrieval_data: "eval/retrieval.json".into(),
            vqa_data: "eval/vqa.jsonl".into(),
            reports: "reports".into(),
            analysis: "analysis.csv".into(),
            plots: Some("plots".into()),
        }
    }
}

impl Paths {
    /// Join every relative path onto `dir`.
    pub fn resolve(&self, dir: &Path) -> Paths {
        let j = |p: &PathBuf| dir.join(p);
        Paths {
            triplets: j(&self.triplets),
            synthetics: j(&self.synthetics),
            features: j(&self.features),
            lexicon: j(&self.lexicon),
            ground_truth: j(&self.ground_truth),
            cache: j(&self.cache),
            scores: j(&self.scores),
            weights: j(&self.weights),
            checkpoint: j(&self.checkpoint),
            trace: j(&self.trace),
            entailment_data: j(&self.entailment_data),
            retrieval_data: j(&self.retrieval_data),
            vqa_data: j(&self.vqa_data),
            reports: j(&self.reports),
            analysis: j(&self.analysis),
            plots: self.plots.as_ref().map(j),
        }
    }

    pub fn report(&self, task: EvalTask) -> PathBuf {
        self.reports.join(format!("{}.json", task.as_str()))
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and batch order; overrides `loss.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub loss: LossConfig,
    pub strategy: WeightingStrategy,
    pub scorers: Vec<String>,
    /// When absent the toygen stage is skipped and inputs must already exist.
    pub toy: Option<ToyCorpusConfig>,
    pub embed_dim: usize,
    pub n_frames: usize,
    pub frame_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            loss: LossConfig::default(),
            strategy: WeightingStrategy::ClampedDiff,
            scorers: vec!["oracle".into()],
            toy: Some(ToyCorpusConfig::default()),
            embed_dim: 16,
            n_frames: 4,
            frame_count: 49,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        self.effective_loss().validate().map_err(config)?;
        if let Some(toy) = &self.toy {
            toy.validate().map_err(config)?;
        }
        if self.scorers.is_empty() {
            return Err(Error::Config("at least one scorer is required".into()));
        }
        for s in &self.scorers {
            parse_scorer(s)?;
        }
        if self.embed_dim == 0 || self.n_frames == 0 || self.frame_count == 0 {
            return Err(Error::Config("embed_dim, n_frames and frame_count must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            seed: self.seed,
            ..self.loss.clone()
        }
    }

    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            n_frames: self.n_frames,
            default_frame_count: self.frame_count,
            ..ScoreOptions::default()
        }
    }
}

enum ScorerSpec {
    Oracle(f64),
    Model(PathBuf),
}

fn parse_scorer(spec: &str) -> Result<ScorerSpec> {
    let bad = || Error::Config(format!("unknown scorer {spec:?}; expected oracle, oracle:<tau> or model:<checkpoint>"));
    match spec.split_once(':') {
        None if spec == "oracle" => Ok(ScorerSpec::Oracle(OracleScorer::DEFAULT_TAU)),
        Some(("oracle", tau)) => tau
            .parse::<f64>()
            .ok()
            .filter(|t| t.is_finite() && *t > 0.0)
            .map(ScorerSpec::Oracle)
            .ok_or_else(bad),
        Some(("model", path)) if !path.is_empty() => Ok(ScorerSpec::Model(path.into())),
        _ => Err(bad()),
    }
}

/// Instantiate scorers from specs: `oracle`, `oracle:<tau>`, `model:<checkpoint>`.
pub fn build_scorers(
    specs: &[String],
    features: &Arc<FeatureStore>,
    lexicon: Option<&Arc<Lexicon>>,
) -> Result<Vec<Box<dyn FrameScorer>>> {
    if specs.is_empty() {
        return Err(Error::Config("at least one scorer is required".into()));
    }
    specs
        .iter()
        .map(|s| -> Result<Box<dyn FrameScorer>> {
            match parse_scorer(s)? {
                ScorerSpec::Oracle(tau) => {
                    let lexicon = lexicon.ok_or_else(|| Error::Config("the oracle scorer needs a lexicon".into()))?;
                    Ok(Box::new(OracleScorer::with_tau(tau, features.clone(), lexicon.clone())))
                }
                ScorerSpec::Model(path) => {
                    let model = Model::load(&path)?;
                    Ok(Box::new(ModelScorer::new(s.clone(), Arc::new(model), features.clone())))
                }
            }
        })
        .collect()
}

/// Training samples: every joined sample whose triplet is not held out.
pub fn training_samples(triplets: &[Triplet], synthetics: &[SyntheticVideo]) -> Vec<TrainingSample> {
    join_samples(triplets, synthetics)
        .into_iter()
        .filter(|s| s.triplet.source != TEST_SOURCE)
        .collect()
}

/// Build a vocabulary from the samples' captions and fit a fresh model.
pub fn train_model(
    samples: &[TrainingSample],
    features: &FeatureStore,
    embed_dim: usize,
    loss: &LossConfig,
) -> Result<FitOutcome<Model>> {
    let vocab = Vocab::from_captions(
        samples
            .iter()
            .flat_map(|s| [s.triplet.caption_pos.as_str(), s.triplet.caption_neg.as_str()]),
    );
    let feature_dim = features
        .dim()
        .ok_or_else(|| Error::invalid("feature store", "no feature vectors"))?;
    let model = Model::new(
        ModelConfig {
            vocab: vocab.clone(),
            embed_dim,
            feature_dim,
        },
        loss.seed,
    )?;
    let prepared = prepare_samples::<f64>(samples, features, &vocab)?;
    fit(model, &prepared, loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Entailment,
    Retrieval,
    Vqa,
}

impl EvalTask {
    pub const ALL: [EvalTask; 3] = [EvalTask::Entailment, EvalTask::Retrieval, EvalTask::Vqa];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::Entailment => "entailment",
            EvalTask::Retrieval => "retrieval",
            EvalTask::Vqa => "vqa",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            EvalTask::Entailment => "auc",
            EvalTask::Retrieval => "map",
            EvalTask::Vqa => "accuracy",
        }
    }
}

/// Evaluation data of any of the three tasks.
pub enum EvalData {
    Entailment(Vec<EntailmentExample>),
    Retrieval(RetrievalTask),
    Vqa(Vec<VqaItem>),
}

impl EvalData {
    pub fn load(task: EvalTask, path: &Path) -> Result<Self> {
        Ok(match task {
            EvalTask::Entailment => EvalData::Entailment(load_entailment(path)?),
            EvalTask::Retrieval => EvalData::Retrieval(RetrievalTask::load(path)?),
            EvalTask::Vqa => EvalData::Vqa(load_vqa(path)?),
        })
    }

    pub fn task(&self) -> EvalTask {
        match self {
            EvalData::Entailment(_) => EvalTask::Entailment,
            EvalData::Retrieval(_) => EvalTask::Retrieval,
            EvalData::Vqa(_) => EvalTask::Vqa,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EvalData::Entailment(x) => x.len(),
            EvalData::Retrieval(t) => t.classes.len(),
            EvalData::Vqa(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evaluate(&self, model: &Model, features: &FeatureStore, config_digest: &str) -> Result<EvalReport> {
        let value = match self {
            EvalData::Entailment(x) => evaluate_entailment(model, x, features)?,
            EvalData::Retrieval(t) => evaluate_retrieval(model, t, features)?,
            EvalData::Vqa(x) => evaluate_vqa(model, x, features)?,
        };
        let task = self.task();
        Ok(EvalReport {
            task: task.as_str().into(),
            metric: task.metric().into(),
            value,
            n_items: self.len(),
            config_digest: config_digest.into(),
        })
    }
}

/// Held-out metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub map: f64,
    pub accuracy: f64,
}

pub fn evaluate_toy_tasks(model: &Model, tasks: &ToyTasks, features: &FeatureStore) -> Result<Metrics> {
    Ok(Metrics {
        auc: evaluate_entailment(model, &tasks.entailment, features)?,
        map: evaluate_retrieval(model, &tasks.retrieval, features)?,
        accuracy: evaluate_vqa(model, &tasks.vqa, features)?,
    })
}

/// A scored toy corpus held in memory, for experiments that train many
/// models on the same data.
pub struct Experiment {
    pub corpus: ToyCorpus,
    pub tasks: ToyTasks,
    /// Training samples, unweighted.
    pub samples: Vec<TrainingSample>,
    /// Scores of every synthetic video, held-out ones included.
    pub scores: ScoreTable,
}

impl Experiment {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let toy = config
            .toy
            .as_ref()
            .ok_or_else(|| Error::Config("an in-memory experiment needs a toy corpus config".into()))?;
        let corpus = make_toy_corpus(toy)?;
        let tasks = toy_tasks(&corpus, toy.seed);
        let features = Arc::new(corpus.features.clone());
        let lexicon = Arc::new(corpus.lexicon.clone());
        let scorers = build_scorers(&config.scorers, &features, Some(&lexicon))?;
        let all = join_samples(&corpus.triplets, &corpus.synthetics);
        let scores = score_corpus(&all, &scorers, &ScoreCache::in_memory(), &config.score_options())?;
        let samples = training_samples(&corpus.triplets, &corpus.synthetics);
        Ok(Self {
            corpus,
            tasks,
            samples,
            scores,
        })
    }

    pub fn weights(&self, strategy: WeightingStrategy) -> Result<Vec<WeightRecord>> {
        weigh_samples(&self.samples, &self.scores, strategy)
    }

    /// Weigh, train and evaluate under `config.strategy` and `config.seed`.
    pub fn run(&self, config: &RunConfig) -> Result<(FitOutcome<Model>, Metrics)> {
        let mut samples = self.samples.clone();
        apply_weights(&mut samples, &self.weights(config.strategy)?)?;
        let outcome = train_model(&samples, &self.corpus.features, config.embed_dim, &config.effective_loss())?;
        let metrics = evaluate_toy_tasks(&outcome.model, &self.tasks, &self.corpus.features)?;
        Ok((outcome, metrics))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Toygen,
    Score,
    Weigh,
    Train,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Toygen,
        Stage::Score,
        Stage::Weigh,
        Stage::Train,
        Stage::Eval,
        Stage::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Toygen => "toygen",
            Stage::Score => "score",
            Stage::Weigh => "weigh",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Written to `run_manifest.json` after every pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    stage: Stage,
    config_digest: String,
    version: String,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// Config digest recorded next to an artifact, if any.
pub fn artifact_digest(artifact: &Path) -> Option<String> {
    let text = fs::read_to_string(sidecar_path(artifact)).ok()?;
    serde_json::from_str::<Sidecar>(&text).ok().map(|s| s.config_digest)
}

fn failed_marker(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.failed", stage.as_str()))
}

struct Plan {
    stage: Stage,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn plan(config: &RunConfig, p: &Paths) -> Vec<Plan> {
    let toy = config.toy.is_some();
    let eval_tasks = eval_tasks(config, p);
    let mut plans = Vec::new();
    if toy {
        plans.push(Plan {
            stage: Stage::Toygen,
            inputs: vec![],
            outputs: vec![
                p.triplets.clone(),
                p.synthetics.clone(),
                p.features.clone(),
                p.lexicon.clone(),
                p.ground_truth.clone(),
                p.entailment_data.clone(),
                p.retrieval_data.clone(),
                p.vqa_data.clone(),
            ],
        });
    }
    let mut score_inputs = vec![p.triplets.clone(), p.synthetics.clone(), p.features.clone()];
    if config.scorers.iter().any(|s| s.starts_with("oracle")) {
        score_inputs.push(p.lexicon.clone());
    }
    plans.push(Plan {
        stage: Stage::Score,
        inputs: score_inputs,
        outputs: vec![p.scores.clone()],
    });
    plans.push(Plan {
        stage: Stage::Weigh,
        inputs: vec![p.triplets.clone(), p.synthetics.clone(), p.scores.clone()],
        outputs: vec![p.weights.clone()],
    });
    plans.push(Plan {
        stage: Stage::Train,
        inputs: vec![p.triplets.clone(), p.synthetics.clone(), p.features.clone(), p.weights.clone()],
        outputs: vec![p.checkpoint.clone(), p.trace.clone()],
    });
    let mut eval_inputs = vec![p.checkpoint.clone(), p.features.clone()];
    eval_inputs.extend(eval_tasks.iter().map(|&t| eval_data_path(p, t)));
    plans.push(Plan {
        stage: Stage::Eval,
        inputs: eval_inputs,
        outputs: eval_tasks.iter().map(|&t| p.report(t)).collect(),
    });
    let mut analyze_outputs = vec![p.analysis.clone()];
    if let Some(dir) = &p.plots {
        analyze_outputs.push(dir.join("object.svg"));
    }
    plans.push(Plan {
        stage: Stage::Analyze,
        inputs: vec![p.scores.clone(), p.triplets.clone()],
        outputs: analyze_outputs,
    });
    plans
}

fn eval_data_path(p: &Paths, task: EvalTask) -> PathBuf {
    match task {
        EvalTask::Entailment => p.entailment_data.clone(),
        EvalTask::Retrieval => p.retrieval_data.clone(),
        EvalTask::Vqa => p.vqa_data.clone(),
    }
}

/// Tasks evaluated by the pipeline: all three for toy runs, otherwise those
/// whose data files exist (entailment always).
fn eval_tasks(config: &RunConfig, p: &Paths) -> Vec<EvalTask> {
    EvalTask::ALL
        .into_iter()
        .filter(|&t| config.toy.is_some() || t == EvalTask::Entailment || eval_data_path(p, t).exists())
        .collect()
}

fn modified(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// `Ok(true)` when every output exists, carries `digest`, and is no older
/// than any input. A foreign digest is an error.
fn up_to_date(plan: &Plan, digest: &str) -> Result<bool> {
    let mut oldest_output = None::<SystemTime>;
    for out in &plan.outputs {
        let Some(t) = modified(out) else { return Ok(false) };
        match artifact_digest(out) {
            None => return Ok(false),
            Some(found) if found != digest => {
                return Err(Error::DigestMismatch {
                    path: out.clone(),
                    expected: digest.into(),
                    found,
                })
            }
            Some(_) => {}
        }
        oldest_output = Some(oldest_output.map_or(t, |o| o.min(t)));
    }
    let newest_input = plan.inputs.iter().filter_map(|p| modified(p)).max();
    Ok(match (oldest_output, newest_input) {
        (Some(o), Some(i)) => o >= i,
        _ => true,
    })
}

fn write_sidecar(artifact: &Path, stage: Stage, digest: &str) -> Result<()> {
    let path = sidecar_path(artifact);
    let sidecar = Sidecar {
        stage,
        config_digest: digest.into(),
        version: VERSION.into(),
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::invalid("sidecar", e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Options of a pipeline run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Rerun stages even when up to date, overwriting foreign artifacts.
    pub force: bool,
    /// Restrict the run to these stages; `None` runs all of them.
    pub only: Option<Vec<Stage>>,
}

/// Run the pipeline in `dir` and write `run_manifest.json`.
///
/// A failing stage leaves a `<stage>.failed` marker containing the error,
/// keeps whatever it already wrote, and stops the run.
pub fn run_pipeline(config: &RunConfig, dir: &Path, options: &RunOptions) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = config.paths.resolve(dir);
    let digest = config.digest();
    let mut manifest = RunManifest {
        config_digest: digest.clone(),
        version: VERSION.into(),
        stages: Vec::new(),
    };
    let manifest_path = dir.join("run_manifest.json");
    let save_manifest = |m: &RunManifest| -> Result<()> {
        let json = serde_json::to_vec_pretty(m).map_err(|e| Error::invalid("manifest", e.to_string()))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    };

    for plan in plan(config, &paths) {
        if options.only.as_ref().is_some_and(|only| !only.contains(&plan.stage)) {
            continue;
        }
        let started = Instant::now();
        let result = (|| -> Result<StageStatus> {
            if let Some(missing) = plan.inputs.iter().find(|p| !p.exists()) {
                return Err(Error::MissingDependency {
                    stage: plan.stage.as_str().into(),
                    path: missing.clone(),
                });
            }
            if !options.force && up_to_date(&plan, &digest)? {
                return Ok(StageStatus::Skipped);
            }
            run_stage(plan.stage, config, &paths, &digest)?;
            for out in &plan.outputs {
                write_sidecar(out, plan.stage, &digest)?;
            }
            Ok(StageStatus::Ran)
        })();
        let seconds = started.elapsed().as_secs_f64();
        let marker = failed_marker(dir, plan.stage);
        match result {
            Ok(status) => {
                if marker.exists() {
                    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
                }
                manifest.stages.push(StageRecord {
                    stage: plan.stage,
                    status,
                    seconds,
                    error: None,
                });
            }
            Err(e) => {
                fs::write(&marker, format!("{e}\n")).map_err(|io| Error::io(&marker, io))?;
                manifest.stages.push(StageRecord {
                    stage: plan.stage,
                    status: StageStatus::Failed,
                    seconds,
                    error: Some(e.to_string()),
                });
                save_manifest(&manifest)?;
                return Err(e);
            }
        }
    }
    save_manifest(&manifest)?;
    Ok(manifest)
}

fn load_lexicon_if(config: &RunConfig, p: &Paths) -> Result<Option<Arc<Lexicon>>> {
    if p.lexicon.exists() {
        Ok(Some(Arc::new(Lexicon::load(&p.lexicon)?)))
    } else if config.scorers.iter().any(|s| s.starts_with("oracle")) {
        Err(Error::MissingDependency {
            stage: Stage::Score.as_str().into(),
            path: p.lexicon.clone(),
        })
    } else {
        Ok(None)
    }
}

fn run_stage(stage: Stage, config: &RunConfig, p: &Paths, digest: &str) -> Result<()> {
    match stage {
        Stage::Toygen => {
            let toy = config.toy.as_ref().expect("toygen is planned only with a toy config");
            let corpus = make_toy_corpus(toy)?;
            write_toy_corpus(&corpus, p)?;
            toy_tasks(&corpus, toy.seed).save(&p.entailment_data, &p.retrieval_data, &p.vqa_data)
        }
        Stage::Score => {
            let triplets = load_triplets(&p.triplets)?;
            let synthetics = load_synthetic_manifest(&p.synthetics, &triplets)?;
            let features = Arc::new(FeatureStore::load(&p.features)?);
            let lexicon = load_lexicon_if(config, p)?;
            let scorers = build_scorers(&config.scorers, &features, lexicon.as_ref())?;
            let cache = ScoreCache::open(&p.cache)?;
            let samples = join_samples(&triplets, &synthetics);
            score_corpus(&samples, &scorers, &cache, &config.score_options())?.save(&p.scores)
        }
        Stage::Weigh => {
            let triplets = load_triplets(&p.triplets)?;
            let synthetics = load_synthetic_manifest(&p.synthetics, &triplets)?;
            let scores = ScoreTable::load(&p.scores)?;
            let weights = weigh_samples(&join_samples(&triplets, &synthetics), &scores, config.strategy)?;
            save_weights(&p.weights, &weights)
        }
        Stage::Train => {
            let triplets = load_triplets(&p.triplets)?;
            let synthetics = load_synthetic_manifest(&p.synthetics, &triplets)?;
            let features = FeatureStore::load(&p.features)?;
            let weights = load_weights(&p.weights)?;
            let mut samples = training_samples(&triplets, &synthetics);
            apply_weights(&mut samples, &weights)?;
            let outcome = train_model(&samples, &features, config.embed_dim, &config.effective_loss())?;
            outcome.model.save(&p.checkpoint)?;
            write_trace_csv(&p.trace, &outcome.trace)
        }
        Stage::Eval => {
            let model = Model::load(&p.checkpoint)?;
            let features = FeatureStore::load(&p.features)?;
            for task in eval_tasks(config, p) {
                let data = EvalData::load(task, &eval_data_path(p, task))?;
                data.evaluate(&model, &features, digest)?.save(&p.report(task))?;
            }
            Ok(())
        }
        Stage::Analyze => {
            let triplets = load_triplets(&p.triplets)?;
            let scores = ScoreTable::load(&p.scores)?;
            let rows = misalignment_analysis(&scores, &triplets)?;
            write_text(&p.analysis, &analysis_csv(&rows))?;
            if let Some(dir) = &p.plots {
                write_plots(dir, &rows)?;
            }
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the corpus files named in `p`.
pub fn write_toy_corpus(corpus: &ToyCorpus, p: &Paths) -> Result<()> {
    write_jsonl(&p.triplets, &corpus.triplets)?;
    write_jsonl(&p.synthetics, &corpus.synthetics)?;
    corpus.features.save(&p.features)?;
    corpus.lexicon.save(&p.lexicon)?;
    write_jsonl(&p.ground_truth, &corpus.ground_truth)
}

/// One strategy's outcome in an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: WeightingStrategy,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Score once, then weigh, train and evaluate one model per strategy with
/// the config's seed. A failing strategy is recorded in its row and does
/// not stop the others. Writes `sweep.csv` to `dir`.
pub fn ablation_sweep(
    config: &RunConfig,
    dir: &Path,
    strategies: &[WeightingStrategy],
    options: &RunOptions,
) -> Result<Vec<SweepRow>> {
    if strategies.is_empty() {
        return Err(Error::NothingToSweep);
    }
    let shared = RunOptions {
        only: Some(vec![Stage::Toygen, Stage::Score]),
        ..options.clone()
    };
    run_pipeline(config, dir, &shared)?;
    let p = config.paths.resolve(dir);
    let triplets = load_triplets(&p.triplets)?;
    let synthetics = load_synthetic_manifest(&p.synthetics, &triplets)?;
    let features = FeatureStore::load(&p.features)?;
    let scores = ScoreTable::load(&p.scores)?;
    let tasks: Vec<EvalData> = eval_tasks(config, &p)
        .into_iter()
        .map(|t| EvalData::load(t, &eval_data_path(&p, t)))
        .collect::<Result<_>>()?;
    let base = training_samples(&triplets, &synthetics);

    let rows = sweep_rows(strategies, config.seed, |strategy| {
        let weights = weigh_samples(&base, &scores, strategy)?;
        let mut samples = base.clone();
        apply_weights(&mut samples, &weights)?;
        let fitted = train_model(&samples, &features, config.embed_dim, &config.effective_loss())?;
        let mut m = Metrics {
            auc: f64::NAN,
            map: f64::NAN,
            accuracy: f64::NAN,
        };
        for data in &tasks {
            let v = data.evaluate(&fitted.model, &features, "")?.value;
            match data.task() {
                EvalTask::Entailment => m.auc = v,
                EvalTask::Retrieval => m.map = v,
                EvalTask::Vqa => m.accuracy = v,
            }
        }
        Ok(m)
    });
    write_text(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    Ok(rows)
}

fn sweep_rows(
    strategies: &[WeightingStrategy],
    seed: u64,
    mut run: impl FnMut(WeightingStrategy) -> Result<Metrics>,
) -> Vec<SweepRow> {
    strategies
        .iter()
        .map(|&strategy| {
            let (metrics, error) = match run(strategy) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRow {
                strategy,
                seed,
                metrics,
                error,
            }
        })
        .collect()
}

/// Strategy × metric table; failed rows carry the error and blank metrics.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("strategy,seed,auc,map,accuracy,error\n");
    let cell = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    for r in rows {
        let (auc, map, acc) = r
            .metrics
            .as_ref()
            .map(|m| (cell(m.auc), cell(m.map), cell(m.accuracy)))
            .unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        let err = if err.is_empty() { err } else { format!("\"{err}\"") };
        let _ = writeln!(out, "{},{},{auc},{map},{acc},{err}", r.strategy, r.seed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut c = RunConfig::default();
        c.loss.learning_rate = 0.1 + 0.2;
        c.paths.plots = None;
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        c.seed = 1;
        assert_ne!(back.digest(), c.digest());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "loss": {"epochs": 5}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.loss.epochs, 5);
        assert_eq!(c.loss.gamma, 0.2);
        assert_eq!(c.effective_loss().seed, 3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn scorer_specs() {
        assert!(matches!(parse_scorer("oracle"), Ok(ScorerSpec::Oracle(t)) if t == 5.0));
        assert!(matches!(parse_scorer("oracle:2.5"), Ok(ScorerSpec::Oracle(t)) if t == 2.5));
        assert!(matches!(parse_scorer("model:ck.json"), Ok(ScorerSpec::Model(_))));
        for bad in ["", "clip", "oracle:", "oracle:-1", "model:"] {
            let e = parse_scorer(bad).err().unwrap();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let mut c = RunConfig::default();
        c.loss.gamma = -1.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::default();
        c.scorers.clear();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar_path(Path::new("a/w.jsonl")), PathBuf::from("a/w.jsonl.meta.json"));
    }

    #[test]
    fn empty_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let e = ablation_sweep(&RunConfig::default(), dir.path(), &[], &RunOptions::default()).unwrap_err();
        assert_eq!(e.to_string(), "nothing to sweep");
    }

    #[test]
    fn failing_strategy_spares_siblings() {
        use WeightingStrategy::*;
        let rows = sweep_rows(&[Fixed, Product, ClampedDiff], 7, |s| {
            if s == Product {
                Err(Error::NonFinite("loss at epoch 3".into()))
            } else {
                Ok(Metrics {
                    auc: 0.9,
                    map: 0.5,
                    accuracy: 0.4,
                })
            }
        });
        assert_eq!(rows.len(), 3);
        assert!(rows[0].metrics.is_some() && rows[2].metrics.is_some());
        assert_eq!(rows[1].error.as_deref(), Some("non-finite value: loss at epoch 3"));
        assert!(rows.iter().all(|r| r.seed == 7));
    }

    #[test]
    fn sweep_csv_shape() {
        let rows = vec![
            SweepRow {
                strategy: WeightingStrategy::Fixed,
                seed: 0,
                metrics: Some(Metrics {
                    auc: 0.5,
                    map: 0.25,
                    accuracy: f64::NAN,
                }),
                error: None,
            },
            SweepRow {
                strategy: WeightingStrategy::ClampedDiff,
                seed: 0,
                metrics: None,
                error: Some("boom".into()),
            },
        ];
        assert_eq!(
            sweep_csv(&rows),
            "strategy,seed,auc,map,accuracy,error\nfixed,0,0.5,0.25,,\nclamped_diff,0,,,,\"boom\"\n"
        );
    }
}
