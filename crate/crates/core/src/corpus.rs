//! Triplets, synthetic-video manifests, feature files, and the toy corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::captions::tokenize;
use crate::error::{Error, Result};

/// Kind of edit that turns a positive caption into its negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisalignmentType {
    Object,
    Action,
    Attribute,
    Counting,
    Relation,
    Hallucination,
    EventOrderFlip,
}

impl MisalignmentType {
    pub const ALL: [MisalignmentType; 7] = [
        MisalignmentType::Object,
        MisalignmentType::Action,
        MisalignmentType::Attribute,
        MisalignmentType::Counting,
        MisalignmentType::Relation,
        MisalignmentType::Hallucination,
        MisalignmentType::EventOrderFlip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MisalignmentType::Object => "object",
            MisalignmentType::Action => "action",
            MisalignmentType::Attribute => "attribute",
            MisalignmentType::Counting => "counting",
            MisalignmentType::Relation => "relation",
            MisalignmentType::Hallucination => "hallucination",
            MisalignmentType::EventOrderFlip => "event_order_flip",
        }
    }
}

impl fmt::Display for MisalignmentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MisalignmentType {
    type Err = Error;

    /// Case-insensitive; spaces and hyphens are read as underscores.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        MisalignmentType::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| Error::UnknownMisalignmentName(s.to_string()))
    }
}

/// A real video with its positive caption and an LLM-written negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub video_ref: String,
    pub caption_pos: String,
    pub caption_neg: String,
    pub misalignment: MisalignmentType,
    pub source: String,
}

#[derive(Deserialize)]
struct RawTriplet {
    id: String,
    video_ref: String,
    caption_pos: String,
    caption_neg: String,
    misalignment: String,
    source: String,
}

/// A video generated from a triplet's negative caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub triplet_id: String,
    pub generator_id: String,
    pub video_ref: String,
}

/// One unit of training data: a triplet, optionally paired with a synthetic
/// video and the weight assigned to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub triplet: Triplet,
    pub synthetic: Option<SyntheticVideo>,
    pub weight: Option<f64>,
}

impl TrainingSample {
    /// `triplet_id` or `triplet_id/generator_id`.
    pub fn key(&self) -> String {
        match &self.synthetic {
            Some(s) => format!("{}/{}", self.triplet.id, s.generator_id),
            None => self.triplet.id.clone(),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Parse every non-blank line of a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::invalid("record", e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Load a triplet manifest. Blank lines are ignored.
pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let raw: RawTriplet = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let misalignment = raw
            .misalignment
            .parse()
            .map_err(|_| Error::UnknownMisalignment {
                line,
                value: raw.misalignment.clone(),
            })?;
        if tokenize(&raw.caption_pos).tokens == tokenize(&raw.caption_neg).tokens {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: "caption_pos and caption_neg are identical".into(),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Duplicate {
                what: "triplet id",
                key: raw.id,
                line,
            });
        }
        out.push(Triplet {
            id: raw.id,
            video_ref: raw.video_ref,
            caption_pos: raw.caption_pos,
            caption_neg: raw.caption_neg,
            misalignment,
            source: raw.source,
        });
    }
    Ok(out)
}

/// Load a synthetic-video manifest and check it against loaded triplets.
pub fn load_synthetic_manifest(path: &Path, triplets: &[Triplet]) -> Result<Vec<SyntheticVideo>> {
    let known: HashSet<&str> = triplets.iter().map(|t| t.id.as_str()).collect();
    let mut pairs = HashSet::new();
    let mut dangling: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let record: SyntheticVideo = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !known.contains(record.triplet_id.as_str()) {
            if !dangling.contains(&record.triplet_id) {
                dangling.push(record.triplet_id.clone());
            }
            continue;
        }
        if !pairs.insert((record.triplet_id.clone(), record.generator_id.clone())) {
            return Err(Error::Duplicate {
                what: "synthetic video",
                key: format!("{}/{}", record.triplet_id, record.generator_id),
                line,
            });
        }
        out.push(record);
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingTriplets(dangling));
    }
    Ok(out)
}

/// One sample per synthetic video, plus one synthetic-free sample for each
/// triplet that has none. Triplet order first, then manifest order.
pub fn join_samples(triplets: &[Triplet], synthetics: &[SyntheticVideo]) -> Vec<TrainingSample> {
    let mut by_triplet: HashMap<&str, Vec<&SyntheticVideo>> = HashMap::new();
    for s in synthetics {
        by_triplet.entry(s.triplet_id.as_str()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(triplets.len().max(synthetics.len()));
    for t in triplets {
        match by_triplet.get(t.id.as_str()) {
            Some(list) => out.extend(list.iter().map(|s| TrainingSample {
                triplet: t.clone(),
                synthetic: Some((*s).clone()),
                weight: None,
            })),
            None => out.push(TrainingSample {
                triplet: t.clone(),
                synthetic: None,
                weight: None,
            }),
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    video_ref: String,
    features: Vec<f64>,
}

/// Feature vectors keyed by `video_ref`, all of one length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    refs: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn insert(&mut self, video_ref: impl Into<String>, features: Vec<f64>) -> Result<()> {
        let video_ref = video_ref.into();
        if let Some(d) = self.dim() {
            if d != features.len() {
                return Err(Error::Shape(format!(
                    "{video_ref} has {} features, expected {d}",
                    features.len()
                )));
            }
        }
        if let Some(&i) = self.index.get(&video_ref) {
            self.vectors[i] = features;
        } else {
            self.index.insert(video_ref.clone(), self.refs.len());
            self.refs.push(video_ref);
            self.vectors.push(features);
        }
        Ok(())
    }

    pub fn get(&self, video_ref: &str) -> Option<&[f64]> {
        self.index.get(video_ref).map(|&i| self.vectors[i].as_slice())
    }

    pub fn require(&self, video_ref: &str) -> Result<&[f64]> {
        self.get(video_ref)
            .ok_or_else(|| Error::MissingFeatures(video_ref.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.refs
            .iter()
            .zip(&self.vectors)
            .map(|(r, v)| (r.as_str(), v.as_slice()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = FeatureStore::new();
        for (line, text) in read_lines(path)? {
            let rec: FeatureRecord = serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            if store.index.contains_key(&rec.video_ref) {
                return Err(Error::Duplicate {
                    what: "video_ref",
                    key: rec.video_ref,
                    line,
                });
            }
            store.insert(rec.video_ref, rec.features).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<FeatureRecord> = self
            .iter()
            .map(|(r, v)| FeatureRecord {
                video_ref: r.to_string(),
                features: v.to_vec(),
            })
            .collect();
        write_jsonl(path, &records)
    }
}

#[derive(Serialize, Deserialize)]
struct LexiconRecord {
    token: String,
    vector: Vec<f64>,
}

/// Latent concept vector per token, shared by the toy generator and the
/// oracle scorer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl Lexicon {
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) {
        self.vectors.insert(token.into(), vector);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Sum of the vectors of known tokens; `None` when no token is known.
    pub fn embed(&self, tokens: &[String]) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for v in tokens.iter().filter_map(|t| self.get(t)) {
            match acc.as_mut() {
                Some(a) => a.iter_mut().zip(v).for_each(|(x, y)| *x += y),
                None => acc = Some(v.to_vec()),
            }
        }
        acc
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lex = Lexicon::default();
        for rec in read_jsonl::<LexiconRecord>(path)? {
            lex.insert(rec.token, rec.vector);
        }
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<LexiconRecord> = self
            .vectors
            .iter()
            .map(|(t, v)| LexiconRecord {
                token: t.clone(),
                vector: v.clone(),
            })
            .collect();
        write_jsonl(path, &records)
    }
}

/// A fraction of synthetic videos generated at a fixed, usually low, fidelity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityMix {
    pub fraction: f64,
    pub fidelity: f64,
}

/// Parameters of the planted-structure toy corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub n_triplets: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// ρ: how faithfully a synthetic video realizes its caption.
    pub fidelity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub generators: Vec<String>,
    pub holdout_fraction: f64,
    /// Overrides `fidelity` for part of the synthetic videos.
    pub mix: Option<FidelityMix>,
    /// Per-type fidelity; takes precedence over `mix` and `fidelity`.
    pub type_fidelity: BTreeMap<MisalignmentType, f64>,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_triplets: 500,
            feature_dim: 32,
            vocab_size: 48,
            fidelity: 1.0,
            noise_sigma: 0.1,
            seed: 0,
            generators: vec!["toy".into()],
            holdout_fraction: 0.2,
            mix: None,
            type_fidelity: BTreeMap::new(),
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid("toy corpus config", msg))
            }
        };
        check(self.n_triplets > 0, "n_triplets must be positive")?;
        check(self.feature_dim >= 2, "feature_dim must be at least 2")?;
        check(self.vocab_size >= 4, "vocab_size must be at least 4")?;
        check(unit(self.fidelity), "fidelity must lie in [0, 1]")?;
        check(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be non-negative",
        )?;
        check(!self.generators.is_empty(), "at least one generator is required")?;
        check(
            (0.0..1.0).contains(&self.holdout_fraction),
            "holdout_fraction must lie in [0, 1)",
        )?;
        if let Some(mix) = &self.mix {
            check(unit(mix.fraction) && unit(mix.fidelity), "mix values must lie in [0, 1]")?;
        }
        check(
            self.type_fidelity.values().all(|&f| unit(f)),
            "type fidelities must lie in [0, 1]",
        )
    }
}

/// Fidelity each synthetic video was generated at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub triplet_id: String,
    pub generator_id: String,
    pub fidelity: f64,
}

pub const TRAIN_SOURCE: &str = "toy/train";
pub const TEST_SOURCE: &str = "toy/test";

const SCAFFOLD_WORDS: [&str; 8] = ["a", "the", "is", "with", "in", "on", "of", "and"];
const SCAFFOLD_SALIENCE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub triplets: Vec<Triplet>,
    pub synthetics: Vec<SyntheticVideo>,
    pub features: FeatureStore,
    pub lexicon: Lexicon,
    pub ground_truth: Vec<GroundTruth>,
    /// Tokens a negative caption may substitute in.
    pub content_tokens: Vec<String>,
}

impl ToyCorpus {
    pub fn train_triplets(&self) -> Vec<Triplet> {
        self.triplets.iter().filter(|t| t.source != TEST_SOURCE).cloned().collect()
    }

    pub fn test_triplets(&self) -> Vec<Triplet> {
        self.triplets.iter().filter(|t| t.source == TEST_SOURCE).cloned().collect()
    }
}

/// Build a toy corpus with known generation fidelity.
///
/// Captions are a few low-salience scaffold words around one content word;
/// the negative swaps the content word for another. Each token has a latent
/// unit vector scaled by its salience, and a caption embeds as the sum of its
/// tokens. A real video is its positive caption's embedding plus Gaussian
/// noise; a synthetic video mixes the two captions by fidelity ρ, so ρ = 1
/// depicts the negative caption and ρ = 0 re-renders the real one.
pub fn make_toy_corpus(config: &ToyCorpusConfig) -> Result<ToyCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.feature_dim;

    let n_scaffold = (config.vocab_size / 4).max(1);
    let scaffold: Vec<String> = (0..n_scaffold)
        .map(|i| match SCAFFOLD_WORDS.get(i) {
            Some(w) => w.to_string(),
            None => format!("fn{i}"),
        })
        .collect();
    let content: Vec<String> = (0..config.vocab_size - n_scaffold)
        .map(|i| format!("w{i:02}"))
        .collect();

    let mut lexicon = Lexicon::default();
    for (word, salience) in scaffold
        .iter()
        .map(|w| (w, SCAFFOLD_SALIENCE))
        .chain(content.iter().map(|w| (w, 1.0)))
    {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x *= salience / norm);
        lexicon.insert(word.clone(), v);
    }

    let mut order: Vec<usize> = (0..config.n_triplets).collect();
    order.shuffle(&mut rng);
    let n_test = (config.n_triplets as f64 * config.holdout_fraction).round() as usize;
    let mut is_test = vec![false; config.n_triplets];
    order[..n_test].iter().for_each(|&i| is_test[i] = true);

    let mut triplets = Vec::with_capacity(config.n_triplets);
    let mut features = FeatureStore::new();
    let mut captions = Vec::with_capacity(config.n_triplets);
    for (i, &held_out) in is_test.iter().enumerate() {
        let n_fill = rng.random_range(2..=4);
        let mut pos: Vec<String> = (0..n_fill)
            .map(|_| scaffold[rng.random_range(0..scaffold.len())].clone())
            .collect();
        let slot = rng.random_range(0..=n_fill);
        let word = rng.random_range(0..content.len());
        let mut other = rng.random_range(0..content.len() - 1);
        if other >= word {
            other += 1;
        }
        pos.insert(slot, content[word].clone());
        let mut neg = pos.clone();
        neg[slot] = content[other].clone();
        let misalignment = MisalignmentType::ALL[rng.random_range(0..MisalignmentType::ALL.len())];

        let id = format!("t{i:04}");
        let video_ref = format!("real/{id}");
        let emb_pos = lexicon.embed(&pos).expect("toy tokens are in the lexicon");
        let real: Vec<f64> = emb_pos
            .iter()
            .map(|x| x + config.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        features.insert(video_ref.clone(), real)?;
        triplets.push(Triplet {
            id,
            video_ref,
            caption_pos: pos.join(" "),
            caption_neg: neg.join(" "),
            misalignment,
            source: if held_out { TEST_SOURCE } else { TRAIN_SOURCE }.to_string(),
        });
        captions.push((emb_pos, lexicon.embed(&neg).expect("toy tokens are in the lexicon")));
    }

    let n_syn = triplets.len() * config.generators.len();
    let mut mixed = vec![false; n_syn];
    if let Some(mix) = &config.mix {
        let mut idx: Vec<usize> = (0..n_syn).collect();
        idx.shuffle(&mut rng);
        let k = (n_syn as f64 * mix.fraction).round() as usize;
        idx[..k].iter().for_each(|&i| mixed[i] = true);
    }

    let mut synthetics = Vec::with_capacity(n_syn);
    let mut ground_truth = Vec::with_capacity(n_syn);
    for (ti, t) in triplets.iter().enumerate() {
        let (emb_pos, emb_neg) = &captions[ti];
        for (gi, generator) in config.generators.iter().enumerate() {
            let k = ti * config.generators.len() + gi;
            let rho = match (config.type_fidelity.get(&t.misalignment), &config.mix) {
                (Some(&f), _) => f,
                (None, Some(mix)) if mixed[k] => mix.fidelity,
                _ => config.fidelity,
            };
            let video: Vec<f64> = emb_neg
                .iter()
                .zip(emb_pos)
                .map(|(n, p)| {
                    rho * n + (1.0 - rho) * p + config.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let video_ref = format!("syn/{}/{generator}", t.id);
            features.insert(video_ref.clone(), video)?;
            synthetics.push(SyntheticVideo {
                triplet_id: t.id.clone(),
                generator_id: generator.clone(),
                video_ref,
            });
            ground_truth.push(GroundTruth {
                triplet_id: t.id.clone(),
                generator_id: generator.clone(),
                fidelity: rho,
            });
        }
    }

    Ok(ToyCorpus {
        triplets,
        synthetics,
        features,
        lexicon,
        ground_truth,
        content_tokens: content,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::shared_caption;

    fn triplet(id: &str) -> Triplet {
        Triplet {
            id: id.into(),
            video_ref: format!("v/{id}"),
            caption_pos: "a man is standing".into(),
            caption_neg: "a man is sitting".into(),
            misalignment: MisalignmentType::Action,
            source: "test".into(),
        }
    }

    fn line(id: &str, mis: &str) -> String {
        format!(
            r#"{{"id":"{id}","video_ref":"v/{id}","caption_pos":"a dog runs","caption_neg":"a cat runs","misalignment":"{mis}","source":"unit"}}"#
        )
    }

    fn write(dir: &Path, name: &str, lines: &[String]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn misalignment_parsing() {
        assert_eq!("OBJECT".parse::<MisalignmentType>().unwrap(), MisalignmentType::Object);
        assert_eq!(
            "Event Order Flip".parse::<MisalignmentType>().unwrap(),
            MisalignmentType::EventOrderFlip
        );
        assert!("colour".parse::<MisalignmentType>().is_err());
        assert_eq!(MisalignmentType::ALL.len(), 7);
        for t in MisalignmentType::ALL {
            assert_eq!(t.to_string().parse::<MisalignmentType>().unwrap(), t);
        }
    }

    #[test]
    fn load_triplets_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.jsonl",
            &[line("a", "object"), line("b", "Action"), line("c", "counting")],
        );
        let ts = load_triplets(&p).unwrap();
        let ids: Vec<_> = ts.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(ts[1].misalignment, MisalignmentType::Action);
    }

    #[test]
    fn load_triplets_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.jsonl", &[line("a", "object"), line("b", "colour")]);
        let err = load_triplets(&p).unwrap_err().to_string();
        assert!(err.contains("unknown misalignment at line 2"), "{err}");

        let p = write(dir.path(), "dup.jsonl", &[line("t1", "object"), line("t1", "action")]);
        assert!(matches!(load_triplets(&p), Err(Error::Duplicate { line: 2, .. })));

        let p = write(dir.path(), "junk.jsonl", &[line("a", "object"), "{not json".into()]);
        let err = load_triplets(&p).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }), "{err}");

        let same = r#"{"id":"x","video_ref":"v","caption_pos":"A dog.","caption_neg":"a dog","misalignment":"object","source":"s"}"#;
        let p = write(dir.path(), "same.jsonl", &[same.to_string()]);
        assert!(load_triplets(&p).is_err());
    }

    #[test]
    fn synthetic_manifest_checks_references() {
        let dir = tempfile::tempdir().unwrap();
        let ts = vec![triplet("t1"), triplet("t2")];
        let ok = write(
            dir.path(),
            "ok.jsonl",
            &[
                r#"{"triplet_id":"t1","generator_id":"g","video_ref":"s1"}"#.into(),
                r#"{"triplet_id":"t2","generator_id":"g","video_ref":"s2"}"#.into(),
            ],
        );
        assert_eq!(load_synthetic_manifest(&ok, &ts).unwrap().len(), 2);

        let ghost = write(
            dir.path(),
            "ghost.jsonl",
            &[r#"{"triplet_id":"ghost","generator_id":"g","video_ref":"s"}"#.into()],
        );
        let err = load_synthetic_manifest(&ghost, &ts).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");

        let empty = write(dir.path(), "empty.jsonl", &[]);
        assert!(load_synthetic_manifest(&empty, &ts).unwrap().is_empty());

        let dup = write(
            dir.path(),
            "dup.jsonl",
            &[
                r#"{"triplet_id":"t1","generator_id":"g","video_ref":"a"}"#.into(),
                r#"{"triplet_id":"t1","generator_id":"g","video_ref":"b"}"#.into(),
            ],
        );
        assert!(load_synthetic_manifest(&dup, &ts).is_err());
    }

    #[test]
    fn join_counts() {
        let ts = vec![triplet("t1"), triplet("t2")];
        let syn: Vec<SyntheticVideo> = ["CogVideoX", "LaVie", "VideoCrafter2"]
            .iter()
            .map(|g| SyntheticVideo {
                triplet_id: "t1".into(),
                generator_id: g.to_string(),
                video_ref: format!("s/{g}"),
            })
            .collect();
        let samples = join_samples(&ts, &syn);
        assert_eq!(samples.len(), 4);
        assert!(samples[..3].iter().all(|s| s.triplet.id == "t1" && s.synthetic.is_some()));
        assert!(samples[3].synthetic.is_none() && samples[3].triplet.id == "t2");
        assert!(samples.iter().all(|s| s.weight.is_none()));

        let bare = join_samples(&ts, &[]);
        assert_eq!(bare.len(), 2);
        assert!(bare.iter().all(|s| s.synthetic.is_none()));

        let one = join_samples(&ts[..1], &syn);
        assert_eq!(one.len(), 3);
        assert_eq!(one[2].key(), "t1/VideoCrafter2");
    }

    #[test]
    fn feature_store_rejects_ragged_vectors() {
        let mut fs = FeatureStore::new();
        fs.insert("a", vec![1.0, 2.0]).unwrap();
        assert!(fs.insert("b", vec![1.0]).is_err());
        assert_eq!(fs.require("a").unwrap(), &[1.0, 2.0]);
        assert!(fs.require("zz").is_err());
    }

    #[test]
    fn toy_corpus_is_deterministic() {
        let cfg = ToyCorpusConfig {
            n_triplets: 40,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut blobs = Vec::new();
        for run in 0..2 {
            let c = make_toy_corpus(&cfg).unwrap();
            let t = dir.path().join(format!("t{run}.jsonl"));
            let f = dir.path().join(format!("f{run}.jsonl"));
            write_jsonl(&t, &c.triplets).unwrap();
            c.features.save(&f).unwrap();
            blobs.push((fs::read(&t).unwrap(), fs::read(&f).unwrap()));
        }
        assert_eq!(blobs[0], blobs[1]);
    }

    #[test]
    fn toy_exact_fidelity_without_noise() {
        let cfg = ToyCorpusConfig {
            n_triplets: 20,
            noise_sigma: 0.0,
            fidelity: 1.0,
            ..Default::default()
        };
        let c = make_toy_corpus(&cfg).unwrap();
        for (t, s) in c.triplets.iter().zip(&c.synthetics) {
            let neg = tokenize(&t.caption_neg).tokens;
            assert_eq!(c.features.get(&s.video_ref).unwrap(), c.lexicon.embed(&neg).unwrap());
        }
    }

    #[test]
    fn toy_negatives_differ_in_one_token() {
        let c = make_toy_corpus(&ToyCorpusConfig {
            n_triplets: 100,
            ..Default::default()
        })
        .unwrap();
        for t in &c.triplets {
            let p = tokenize(&t.caption_pos);
            let shared = shared_caption(&t.caption_pos, &t.caption_neg);
            assert_eq!(shared.len(), p.len() - 1);
        }
        let test = c.test_triplets().len();
        assert_eq!(test, 20);
        assert_eq!(c.train_triplets().len(), 80);
    }

    #[test]
    fn toy_fidelity_plan() {
        let mut type_fidelity = BTreeMap::new();
        type_fidelity.insert(MisalignmentType::Hallucination, 0.3);
        let c = make_toy_corpus(&ToyCorpusConfig {
            n_triplets: 200,
            fidelity: 0.9,
            mix: Some(FidelityMix {
                fraction: 0.5,
                fidelity: 0.0,
            }),
            type_fidelity,
            ..Default::default()
        })
        .unwrap();
        for (t, g) in c.triplets.iter().zip(&c.ground_truth) {
            if t.misalignment == MisalignmentType::Hallucination {
                assert_eq!(g.fidelity, 0.3);
            } else {
                assert!(g.fidelity == 0.9 || g.fidelity == 0.0);
            }
        }
        let zeros = c.ground_truth.iter().filter(|g| g.fidelity == 0.0).count();
        assert!(zeros > 50 && zeros <= 100, "{zeros}");
    }

    #[test]
    fn toy_config_validation() {
        let bad = ToyCorpusConfig {
            vocab_size: 3,
            ..Default::default()
        };
        assert!(make_toy_corpus(&bad).is_err());
        let bad = ToyCorpusConfig {
            fidelity: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg = ToyCorpusConfig {
            n_triplets: 5,
            vocab_size: 4,
            feature_dim: 2,
            ..Default::default()
        };
        assert_eq!(make_toy_corpus(&cfg).unwrap().content_tokens.len(), 3);
    }
}
