//! Frozen alignment oracle, score cache, and synthetic-video weighting.
//!
//! Each synthetic video gets two ensemble scores: `s_pos`, how well it shows
//! the caption it was generated from, and `s_neg`, how well it shows the real
//! video's caption. A [`WeightingStrategy`] maps the pair to a weight in [0, 1].

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captions::tokenize;
use crate::corpus::{read_jsonl, write_jsonl, FeatureStore, Lexicon, TrainingSample};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// A single frame of a referenced video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRef<'a> {
    pub video_ref: &'a str,
    pub index: usize,
}

/// Per-frame yes-probability for "does this frame show the caption?".
///
/// Implementations must return values in [0, 1] and be deterministic for a
/// fixed frame and caption. Adapters for real VQA models implement this trait
/// out of tree.
pub trait FrameScorer: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, frame: FrameRef<'_>, caption: &str) -> Result<f64>;
}

/// Uniformly spaced, endpoint-inclusive frame indices.
pub fn frame_indices(n_frames: usize, frame_count: usize) -> Result<Vec<usize>> {
    if n_frames == 0 || frame_count == 0 {
        return Err(Error::invalid("frame sampling", "n_frames and frame_count must be positive"));
    }
    if n_frames == 1 {
        return Ok(vec![0]);
    }
    let span = (frame_count - 1) as f64;
    let steps = (n_frames - 1) as f64;
    Ok((0..n_frames)
        .map(|k| (k as f64 * span / steps).round() as usize)
        .collect())
}

/// SHA-256 of the tokenized caption, so cosmetic differences share a key.
pub fn caption_key(caption: &str) -> String {
    hex::encode(Sha256::digest(tokenize(caption).normalized().as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_ref: String,
    pub caption_key: String,
    pub scorer_id: String,
    pub frame_index: usize,
    pub score: f64,
}

type CacheKey = (String, String, String, usize);

impl ScoreRecord {
    fn key(&self) -> CacheKey {
        (
            self.video_ref.clone(),
            self.caption_key.clone(),
            self.scorer_id.clone(),
            self.frame_index,
        )
    }
}

/// Append-only log of frame scores with an in-memory index.
///
/// Reads take a shared lock; appends are serialized.
pub struct ScoreCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<CacheKey, f64>>,
    log: Mutex<Option<BufWriter<File>>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: RwLock::new(HashMap::new()),
            log: Mutex::new(None),
        }
    }

    /// Open or create a cache file. Duplicate keys in an existing log keep
    /// the first value.
    pub fn open(path: &Path) -> Result<Self> {
        let mut index = HashMap::new();
        if path.exists() {
            for rec in read_jsonl::<ScoreRecord>(path)? {
                index.entry(rec.key()).or_insert(rec.score);
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            index: RwLock::new(index),
            log: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, video_ref: &str, caption_key: &str, scorer_id: &str, frame_index: usize) -> Option<f64> {
        let key = (
            video_ref.to_string(),
            caption_key.to_string(),
            scorer_id.to_string(),
            frame_index,
        );
        self.index.read().expect("cache index poisoned").get(&key).copied()
    }

    /// Append records not already present; returns how many were new.
    pub fn insert_many(&self, records: &[ScoreRecord]) -> Result<usize> {
        let mut log = self.log.lock().expect("cache log poisoned");
        let mut index = self.index.write().expect("cache index poisoned");
        let mut added = 0;
        for rec in records {
            let key = rec.key();
            if index.contains_key(&key) {
                continue;
            }
            if let Some(out) = log.as_mut() {
                let line = serde_json::to_string(rec).map_err(|e| Error::invalid("score record", e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| self.io_err(e))?;
            }
            index.insert(key, rec.score);
            added += 1;
        }
        if let Some(out) = log.as_mut() {
            out.flush().map_err(|e| self.io_err(e))?;
        }
        Ok(added)
    }

    fn io_err(&self, e: std::io::Error) -> Error {
        Error::io(self.path.clone().unwrap_or_default(), e)
    }
}

fn check_unit(value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::ScoreOutOfRange { value })
    }
}

/// Mean over scorers and sampled frames; cache hits skip the scorer and
/// misses are returned as new records.
fn ensemble_with_cache(
    video_ref: &str,
    caption: &str,
    scorers: &[Box<dyn FrameScorer>],
    frames: &[usize],
    cache: Option<&ScoreCache>,
    fresh: &mut Vec<ScoreRecord>,
) -> Result<f64> {
    if scorers.is_empty() {
        return Err(Error::invalid("ensemble", "no scorers given"));
    }
    let key = caption_key(caption);
    let mut values = Vec::with_capacity(scorers.len() * frames.len());
    for scorer in scorers {
        for &index in frames {
            let cached = cache.and_then(|c| c.get(video_ref, &key, scorer.id(), index)).or_else(|| {
                fresh
                    .iter()
                    .find(|r| r.video_ref == video_ref && r.caption_key == key && r.scorer_id == scorer.id() && r.frame_index == index)
                    .map(|r| r.score)
            });
            let value = match cached {
                Some(v) => v,
                None => {
                    let wrap = |message: String| Error::Scorer {
                        scorer_id: scorer.id().to_string(),
                        video_ref: video_ref.to_string(),
                        frame_index: index,
                        message,
                    };
                    let v = scorer
                        .score(FrameRef { video_ref, index }, caption)
                        .map_err(|e| wrap(e.to_string()))?;
                    let v = check_unit(v).map_err(|e| wrap(e.to_string()))?;
                    fresh.push(ScoreRecord {
                        video_ref: video_ref.to_string(),
                        caption_key: key.clone(),
                        scorer_id: scorer.id().to_string(),
                        frame_index: index,
                        score: v,
                    });
                    v
                }
            };
            values.push(value);
        }
    }
    // Summing in sorted order makes the mean independent of scorer order.
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Frame-ensemble alignment score of a video and caption.
pub fn ensemble_score(
    video_ref: &str,
    caption: &str,
    scorers: &[Box<dyn FrameScorer>],
    n_frames: usize,
    frame_count: usize,
) -> Result<f64> {
    let frames = frame_indices(n_frames, frame_count)?;
    ensemble_with_cache(video_ref, caption, scorers, &frames, None, &mut Vec::new())
}

/// Scores a feature-vector video as `sigmoid(tau * cos(video, caption))`,
/// where the caption embeds as the sum of its tokens' lexicon vectors.
/// Frame index is ignored.
pub struct OracleScorer {
    id: String,
    tau: f64,
    features: Arc<FeatureStore>,
    lexicon: Arc<Lexicon>,
}

impl OracleScorer {
    pub const DEFAULT_TAU: f64 = 5.0;

    pub fn new(features: Arc<FeatureStore>, lexicon: Arc<Lexicon>) -> Self {
        Self::with_tau(Self::DEFAULT_TAU, features, lexicon)
    }

    pub fn with_tau(tau: f64, features: Arc<FeatureStore>, lexicon: Arc<Lexicon>) -> Self {
        let id = if tau == Self::DEFAULT_TAU {
            "oracle".to_string()
        } else {
            format!("oracle:{tau}")
        };
        Self {
            id,
            tau,
            features,
            lexicon,
        }
    }
}

impl FrameScorer for OracleScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, frame: FrameRef<'_>, caption: &str) -> Result<f64> {
        let video = self.features.require(frame.video_ref)?;
        let text = self
            .lexicon
            .embed(&tokenize(caption).tokens)
            .ok_or_else(|| Error::invalid("caption", format!("no known tokens in {caption:?}")))?;
        Ok(sigmoid(self.tau * cosine(video, &text)))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    pub n_frames: usize,
    /// Frame count assumed for videos missing from `frame_counts`.
    pub default_frame_count: usize,
    pub frame_counts: HashMap<String, usize>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            n_frames: 4,
            default_frame_count: 49,
            frame_counts: HashMap::new(),
        }
    }
}

/// Ensemble scores of one synthetic video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub triplet_id: String,
    pub generator_id: String,
    pub video_ref: String,
    /// Score against the caption the video was generated from.
    pub s_pos: f64,
    /// Score against the real video's caption.
    pub s_neg: f64,
}

impl ScoreRow {
    pub fn diff(&self) -> f64 {
        self.s_pos - self.s_neg
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn get(&self, triplet_id: &str, generator_id: &str) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.triplet_id == triplet_id && r.generator_id == generator_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            rows: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.rows)
    }
}

/// Score every synthetic video against both captions.
///
/// Samples are scored in parallel; new frame scores are appended to the
/// cache in sample order once all samples succeed.
pub fn score_corpus(
    samples: &[TrainingSample],
    scorers: &[Box<dyn FrameScorer>],
    cache: &ScoreCache,
    options: &ScoreOptions,
) -> Result<ScoreTable> {
    let results: Vec<Result<(ScoreRow, Vec<ScoreRecord>)>> = samples
        .par_iter()
        .filter(|s| s.synthetic.is_some())
        .map(|s| {
            let syn = s.synthetic.as_ref().expect("filtered");
            let frames = options
                .frame_counts
                .get(&syn.video_ref)
                .copied()
                .unwrap_or(options.default_frame_count);
            let scored = frame_indices(options.n_frames, frames).and_then(|idx| {
                let mut fresh = Vec::new();
                let s_pos = ensemble_with_cache(&syn.video_ref, &s.triplet.caption_neg, scorers, &idx, Some(cache), &mut fresh)?;
                let s_neg = ensemble_with_cache(&syn.video_ref, &s.triplet.caption_pos, scorers, &idx, Some(cache), &mut fresh)?;
                Ok((s_pos, s_neg, fresh))
            });
            let (s_pos, s_neg, fresh) = scored.map_err(|e| Error::Sample {
                sample: s.key(),
                source: Box::new(e),
            })?;
            Ok((
                ScoreRow {
                    triplet_id: s.triplet.id.clone(),
                    generator_id: syn.generator_id.clone(),
                    video_ref: syn.video_ref.clone(),
                    s_pos,
                    s_neg,
                },
                fresh,
            ))
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut fresh = Vec::new();
    for r in results {
        let (row, recs) = r?;
        rows.push(row);
        fresh.extend(recs);
    }
    cache.insert_many(&fresh)?;
    Ok(ScoreTable { rows })
}

/// How a synthetic video's score pair becomes a weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingStrategy {
    /// Every synthetic video counts fully.
    Fixed,
    /// `s_pos`.
    PosOnly,
    /// `s_pos * (1 - s_neg)`.
    Product,
    /// 1 when `s_pos > s_neg`, else 0.
    Indicator,
    /// `max(0, s_pos - s_neg)`.
    ClampedDiff,
}

impl WeightingStrategy {
    pub const ALL: [WeightingStrategy; 5] = [
        WeightingStrategy::Fixed,
        WeightingStrategy::PosOnly,
        WeightingStrategy::Product,
        WeightingStrategy::Indicator,
        WeightingStrategy::ClampedDiff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightingStrategy::Fixed => "fixed",
            WeightingStrategy::PosOnly => "pos_only",
            WeightingStrategy::Product => "product",
            WeightingStrategy::Indicator => "indicator",
            WeightingStrategy::ClampedDiff => "clamped_diff",
        }
    }
}

impl fmt::Display for WeightingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightingStrategy::ALL
            .into_iter()
            .find(|w| w.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown weighting strategy {s:?}")))
    }
}

pub fn compute_weight<T: Scalar>(strategy: WeightingStrategy, s_pos: T, s_neg: T) -> Result<T> {
    for v in [s_pos, s_neg] {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::ScoreOutOfRange { value: v.as_f64() });
        }
    }
    Ok(match strategy {
        WeightingStrategy::Fixed => T::one(),
        WeightingStrategy::PosOnly => s_pos,
        WeightingStrategy::Product => s_pos * (T::one() - s_neg),
        WeightingStrategy::Indicator => {
            if s_pos > s_neg {
                T::one()
            } else {
                T::zero()
            }
        }
        WeightingStrategy::ClampedDiff => (s_pos - s_neg).max(T::zero()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub triplet_id: String,
    pub generator_id: String,
    pub strategy: WeightingStrategy,
    pub s_pos: f64,
    pub s_neg: f64,
    pub omega: f64,
}

/// One weight per synthetic sample.
pub fn weigh_samples(
    samples: &[TrainingSample],
    scores: &ScoreTable,
    strategy: WeightingStrategy,
) -> Result<Vec<WeightRecord>> {
    let index: HashMap<(&str, &str), &ScoreRow> = scores
        .rows
        .iter()
        .map(|r| ((r.triplet_id.as_str(), r.generator_id.as_str()), r))
        .collect();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for s in samples {
        let Some(syn) = &s.synthetic else { continue };
        match index.get(&(s.triplet.id.as_str(), syn.generator_id.as_str())) {
            Some(row) => out.push(WeightRecord {
                triplet_id: s.triplet.id.clone(),
                generator_id: syn.generator_id.clone(),
                strategy,
                s_pos: row.s_pos,
                s_neg: row.s_neg,
                omega: compute_weight(strategy, row.s_pos, row.s_neg)?,
            }),
            None => missing.push(s.key()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    Ok(out)
}

/// Read a weight file, rejecting records whose omega does not match its
/// strategy and scores.
pub fn load_weights(path: &Path) -> Result<Vec<WeightRecord>> {
    let records: Vec<WeightRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        let expected = compute_weight(r.strategy, r.s_pos, r.s_neg)?;
        if expected != r.omega {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("omega {} does not match {} ({expected})", r.omega, r.strategy),
            });
        }
    }
    Ok(records)
}

pub fn save_weights(path: &Path, weights: &[WeightRecord]) -> Result<()> {
    write_jsonl(path, weights)
}

/// Attach weights to synthetic samples; every synthetic sample needs one.
pub fn apply_weights(samples: &mut [TrainingSample], weights: &[WeightRecord]) -> Result<()> {
    let index: HashMap<(&str, &str), f64> = weights
        .iter()
        .map(|w| ((w.triplet_id.as_str(), w.generator_id.as_str()), w.omega))
        .collect();
    let mut missing = Vec::new();
    for s in samples.iter_mut() {
        let found = s
            .synthetic
            .as_ref()
            .map(|syn| index.get(&(s.triplet.id.as_str(), syn.generator_id.as_str())).copied());
        match found {
            Some(Some(w)) => s.weight = Some(w),
            Some(None) => missing.push(s.key()),
            None => s.weight = None,
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingWeights(missing))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::corpus::{join_samples, MisalignmentType, SyntheticVideo, Triplet};

    struct Constant {
        id: String,
        value: f64,
        calls: Arc<AtomicUsize>,
    }

    impl Constant {
        fn boxed(id: &str, value: f64, calls: &Arc<AtomicUsize>) -> Box<dyn FrameScorer> {
            Box::new(Constant {
                id: id.into(),
                value,
                calls: calls.clone(),
            })
        }
    }

    impl FrameScorer for Constant {
        fn id(&self) -> &str {
            &self.id
        }
        fn score(&self, _: FrameRef<'_>, _: &str) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.value)
        }
    }

    struct FailsOn(usize);

    impl FrameScorer for FailsOn {
        fn id(&self) -> &str {
            "flaky"
        }
        fn score(&self, frame: FrameRef<'_>, _: &str) -> Result<f64> {
            if frame.index == self.0 {
                Err(Error::invalid("frame", "decoder exploded"))
            } else {
                Ok(0.5)
            }
        }
    }

    fn samples(n: usize) -> Vec<TrainingSample> {
        let triplets: Vec<Triplet> = (0..n)
            .map(|i| Triplet {
                id: format!("t{i}"),
                video_ref: format!("real/{i}"),
                caption_pos: "a dog runs".into(),
                caption_neg: "a cat runs".into(),
                misalignment: MisalignmentType::Object,
                source: "unit".into(),
            })
            .collect();
        let syn: Vec<SyntheticVideo> = (0..n)
            .map(|i| SyntheticVideo {
                triplet_id: format!("t{i}"),
                generator_id: "g".into(),
                video_ref: format!("syn/{i}"),
            })
            .collect();
        join_samples(&triplets, &syn)
    }

    #[test]
    fn frame_index_rule() {
        assert_eq!(frame_indices(4, 49).unwrap(), [0, 16, 32, 48]);
        assert_eq!(frame_indices(1, 10).unwrap(), [0]);
        assert_eq!(frame_indices(3, 4).unwrap(), [0, 2, 3]);
        assert!(frame_indices(0, 4).is_err());
        assert!(frame_indices(2, 0).is_err());
    }

    #[test]
    fn ensemble_means() {
        let calls = Arc::new(AtomicUsize::new(0));
        let ones = vec![Constant::boxed("a", 1.0, &calls), Constant::boxed("b", 1.0, &calls)];
        assert_eq!(ensemble_score("v", "c", &ones, 4, 49).unwrap(), 1.0);

        let mixed = vec![
            Constant::boxed("a", 0.2, &calls),
            Constant::boxed("b", 0.4, &calls),
            Constant::boxed("c", 0.6, &calls),
        ];
        let m = ensemble_score("v", "c", &mixed, 4, 49).unwrap();
        assert!((m - 0.4).abs() < 1e-12);

        let reversed: Vec<Box<dyn FrameScorer>> = vec![
            Constant::boxed("c", 0.6, &calls),
            Constant::boxed("a", 0.2, &calls),
            Constant::boxed("b", 0.4, &calls),
        ];
        assert_eq!(ensemble_score("v", "c", &reversed, 4, 49).unwrap(), m);
        assert!(ensemble_score("v", "c", &[], 4, 49).is_err());
    }

    #[test]
    fn ensemble_reports_failing_frame() {
        let scorers: Vec<Box<dyn FrameScorer>> = vec![Box::new(FailsOn(16))];
        match ensemble_score("vid", "c", &scorers, 4, 49) {
            Err(Error::Scorer {
                scorer_id,
                frame_index,
                ..
            }) => {
                assert_eq!(scorer_id, "flaky");
                assert_eq!(frame_index, 16);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_scorer_is_rejected() {
        let calls = Arc::new(AtomicUsize::new(0));
        let bad = vec![Constant::boxed("x", 1.5, &calls)];
        assert!(ensemble_score("v", "c", &bad, 1, 1).is_err());
    }

    #[test]
    fn caption_key_ignores_cosmetics() {
        assert_eq!(caption_key("A  dog runs."), caption_key("a dog runs"));
        assert_ne!(caption_key("a dog runs"), caption_key("a cat runs"));
        assert_eq!(caption_key("x").len(), 64);
    }

    #[test]
    fn weight_formulas() {
        use WeightingStrategy::*;
        assert!((compute_weight(ClampedDiff, 0.8, 0.3).unwrap() - 0.5f64).abs() < 1e-12);
        assert_eq!(compute_weight(ClampedDiff, 0.3, 0.8).unwrap(), 0.0f64);
        assert!((compute_weight(Product, 0.8, 0.3).unwrap() - 0.56f64).abs() < 1e-12);
        assert_eq!(compute_weight(Indicator, 0.5, 0.5).unwrap(), 0.0f64);
        assert_eq!(compute_weight(Indicator, 0.6, 0.5).unwrap(), 1.0f64);
        assert_eq!(compute_weight(Fixed, 0.1, 0.9).unwrap(), 1.0f64);
        assert_eq!(compute_weight(PosOnly, 0.7f32, 0.9).unwrap(), 0.7f32);
        assert!(compute_weight(ClampedDiff, 1.2, 0.3).is_err());
        assert!(compute_weight(ClampedDiff, 0.2, f64::NAN).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in WeightingStrategy::ALL {
            assert_eq!(s.as_str().parse::<WeightingStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        assert!("best".parse::<WeightingStrategy>().is_err());
    }

    #[test]
    fn cold_then_warm_cache() {
        let calls = Arc::new(AtomicUsize::new(0));
        let scorers = vec![
            Constant::boxed("a", 0.9, &calls),
            Constant::boxed("b", 0.5, &calls),
            Constant::boxed("c", 0.1, &calls),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let samples = samples(2);

        let cache = ScoreCache::open(&path).unwrap();
        let first = score_corpus(&samples, &scorers, &cache, &ScoreOptions::default()).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 48);
        assert_eq!(cache.len(), 48);
        drop(cache);

        let cache = ScoreCache::open(&path).unwrap();
        let second = score_corpus(&samples, &scorers, &cache, &ScoreOptions::default()).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 48);
        assert_eq!(first, second);
        let lines = fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(lines, 48);
    }

    #[test]
    fn missing_scores_are_reported() {
        let samples = samples(2);
        let table = ScoreTable {
            rows: vec![ScoreRow {
                triplet_id: "t0".into(),
                generator_id: "g".into(),
                video_ref: "syn/0".into(),
                s_pos: 0.5,
                s_neg: 0.5,
            }],
        };
        match weigh_samples(&samples, &table, WeightingStrategy::ClampedDiff) {
            Err(Error::MissingScores(ids)) => assert_eq!(ids, ["t1/g"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_attach_and_validate() {
        let mut samples = samples(2);
        let table = ScoreTable {
            rows: (0..2)
                .map(|i| ScoreRow {
                    triplet_id: format!("t{i}"),
                    generator_id: "g".into(),
                    video_ref: format!("syn/{i}"),
                    s_pos: 0.5,
                    s_neg: 0.5,
                })
                .collect(),
        };
        let w = weigh_samples(&samples, &table, WeightingStrategy::ClampedDiff).unwrap();
        assert!(w.iter().all(|r| r.omega == 0.0));
        let fixed = weigh_samples(&samples, &table, WeightingStrategy::Fixed).unwrap();
        assert!(fixed.iter().all(|r| r.omega == 1.0));

        apply_weights(&mut samples, &fixed).unwrap();
        assert!(samples.iter().all(|s| s.weight == Some(1.0)));
        assert!(matches!(apply_weights(&mut samples, &fixed[..1]), Err(Error::MissingWeights(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.jsonl");
        save_weights(&p, &w).unwrap();
        assert_eq!(load_weights(&p).unwrap(), w);
        let mut forged = w.clone();
        forged[0].omega = 0.7;
        save_weights(&p, &forged).unwrap();
        assert!(load_weights(&p).is_err());
    }

    #[test]
    fn concurrent_cache_use() {
        let cache = Arc::new(ScoreCache::in_memory());
        std::thread::scope(|scope| {
            for t in 0..4 {
                let cache = cache.clone();
                scope.spawn(move || {
                    let recs: Vec<ScoreRecord> = (0..50)
                        .map(|i| ScoreRecord {
                            video_ref: format!("v{}", i % 25),
                            caption_key: "k".into(),
                            scorer_id: "s".into(),
                            frame_index: t % 2,
                            score: 0.5,
                        })
                        .collect();
                    cache.insert_many(&recs).unwrap();
                    assert_eq!(cache.get("v3", "k", "s", t % 2), Some(0.5));
                });
            }
        });
        assert_eq!(cache.len(), 50);
    }
}
