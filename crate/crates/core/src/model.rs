//! Alignment models: a yes-probability for a (video, caption) pair.
//!
//! [`SurrogateModel`] is a bilinear scorer over a projected video feature
//! vector and a masked mean of token embeddings:
//!
//! ```text
//! f(V, t) = sigmoid( (P v)ᵀ W c(t) + b ),   c(t) = mean of E[tok] over unmasked tokens
//! ```
//!
//! Gradients are computed by hand. A forward pass appends a record to a
//! [`Tape`]; [`parameter_gradients`] replays the tape against the upstream
//! derivative of the loss with respect to each recorded prediction.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::captions::tokenize;
use crate::corpus::FeatureStore;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::scoring::{FrameRef, FrameScorer};

pub const UNK: &str = "<unk>";

/// Token ids; id 0 is reserved for out-of-vocabulary words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut words = words;
        if words.first().map(String::as_str) != Some(UNK) {
            words.insert(0, UNK.to_string());
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Sorted vocabulary of every token in `captions`.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions
            .into_iter()
            .flat_map(|c| tokenize(c).tokens)
            .filter(|w| w != UNK)
            .collect();
        Vocab::from(words.into_iter().collect::<Vec<_>>())
    }

    /// Includes the UNK row.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text).tokens)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// A caption as token ids plus an optional keep-mask.
#[derive(Clone, Copy, Debug)]
pub struct Caption<'a> {
    pub tokens: &'a [usize],
    pub mask: Option<&'a [bool]>,
}

impl<'a> Caption<'a> {
    pub fn new(tokens: &'a [usize]) -> Self {
        Self { tokens, mask: None }
    }

    pub fn masked(tokens: &'a [usize], mask: &'a [bool]) -> Self {
        Self {
            tokens,
            mask: Some(mask),
        }
    }
}

/// Forward records in call order.
#[derive(Debug)]
pub struct Tape<R> {
    records: Vec<R>,
}

impl<R> Default for Tape<R> {
    fn default() -> Self {
        Self { records: Vec::new() }
    }
}

impl<R> Tape<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }
}

/// Trainable alignment function with values in (0, 1).
pub trait AlignmentModel<T: Scalar> {
    /// Whatever the backward pass needs from one prediction.
    type Record;

    fn vocab(&self) -> &Vocab;

    fn forward(&self, video: &[T], caption: Caption<'_>) -> Result<(T, Self::Record)>;

    /// Add `upstream * d prediction / d params` into `grad`.
    fn backward(&self, record: &Self::Record, upstream: T, grad: &mut [T]);

    fn parameters(&self) -> &[T];

    fn parameters_mut(&mut self) -> &mut [T];

    fn predict(&self, video: &[T], caption: Caption<'_>) -> Result<T> {
        self.forward(video, caption).map(|(y, _)| y)
    }

    /// Forward pass that also appends its record to `tape`; returns the
    /// prediction and its position on the tape.
    fn record(&self, tape: &mut Tape<Self::Record>, video: &[T], caption: Caption<'_>) -> Result<(T, usize)> {
        let (y, rec) = self.forward(video, caption)?;
        tape.records.push(rec);
        Ok((y, tape.records.len() - 1))
    }
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss's derivative with respect to each prediction on the tape.
pub fn parameter_gradients<T: Scalar, M: AlignmentModel<T>>(
    model: &M,
    tape: &Tape<M::Record>,
    upstream: &[T],
) -> Result<Vec<T>> {
    if tape.is_empty() {
        return Err(Error::NoForwardPass);
    }
    if tape.len() != upstream.len() {
        return Err(Error::Shape(format!(
            "{} upstream gradients for {} recorded predictions",
            upstream.len(),
            tape.len()
        )));
    }
    let mut grad = vec![T::zero(); model.parameters().len()];
    for (rec, &g) in tape.records.iter().zip(upstream) {
        if g != T::zero() {
            model.backward(rec, g, &mut grad);
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub embed_dim: usize,
    pub feature_dim: usize,
}

/// Bilinear surrogate alignment model.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel<T> {
    config: ModelConfig,
    seed: u64,
    params: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SurrogateRecord<T> {
    video: Vec<T>,
    projected: Vec<T>,
    pooled: Vec<T>,
    /// `W c`
    mixed: Vec<T>,
    selected: Vec<usize>,
    output: T,
}

impl<T: Scalar> SurrogateModel<T> {
    pub const INIT_STD: f64 = 0.1;

    /// Gaussian(0, 0.1) weights, zero bias.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.feature_dim == 0 {
            return Err(Error::invalid("model config", "dimensions must be positive"));
        }
        let n = Self::param_count(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<T> = (0..n - 1)
            .map(|_| T::of(Self::INIT_STD * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        params.push(T::zero());
        Ok(Self { config, seed, params })
    }

    fn param_count(c: &ModelConfig) -> usize {
        let d = c.embed_dim;
        c.vocab.len() * d + d * c.feature_dim + d * d + 1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn d(&self) -> usize {
        self.config.embed_dim
    }

    fn proj_offset(&self) -> usize {
        self.config.vocab.len() * self.d()
    }

    fn inter_offset(&self) -> usize {
        self.proj_offset() + self.d() * self.config.feature_dim
    }

    fn bias_index(&self) -> usize {
        self.params.len() - 1
    }

    pub fn token_embeddings(&self) -> &[T] {
        &self.params[..self.proj_offset()]
    }

    pub fn video_projection(&self) -> &[T] {
        &self.params[self.proj_offset()..self.inter_offset()]
    }

    pub fn interaction(&self) -> &[T] {
        &self.params[self.inter_offset()..self.bias_index()]
    }

    pub fn interaction_mut(&mut self) -> &mut [T] {
        let (a, b) = (self.inter_offset(), self.bias_index());
        &mut self.params[a..b]
    }

    pub fn bias(&self) -> T {
        self.params[self.bias_index()]
    }

    pub fn set_bias(&mut self, b: T) {
        let i = self.bias_index();
        self.params[i] = b;
    }

    fn embedding_row(&self, id: usize) -> &[T] {
        let d = self.d();
        &self.params[id * d..(id + 1) * d]
    }

    fn selected(&self, caption: Caption<'_>) -> Result<Vec<usize>> {
        let vocab = self.config.vocab.len();
        if let Some(&bad) = caption.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        match caption.mask {
            None => Ok(caption.tokens.to_vec()),
            Some(mask) if mask.len() != caption.tokens.len() => Err(Error::MaskLength {
                expected: caption.tokens.len(),
                got: mask.len(),
            }),
            Some(mask) => Ok(caption
                .tokens
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(&t, _)| t)
                .collect()),
        }
    }

    fn pool(&self, selected: &[usize]) -> Vec<T> {
        let mut acc = vec![T::zero(); self.d()];
        if selected.is_empty() {
            return acc;
        }
        for &t in selected {
            acc.iter_mut().zip(self.embedding_row(t)).for_each(|(a, &e)| *a += e);
        }
        let n = T::of(selected.len() as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Mean of the embeddings of unmasked tokens; the zero vector when every
    /// token is masked.
    pub fn encode_caption(&self, caption: Caption<'_>) -> Result<Vec<T>> {
        Ok(self.pool(&self.selected(caption)?))
    }

    pub fn project_video(&self, video: &[T]) -> Result<Vec<T>> {
        let f = self.config.feature_dim;
        if video.len() != f {
            return Err(Error::Shape(format!("video has {} features, model expects {f}", video.len())));
        }
        if video.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("video features".into()));
        }
        let proj = self.video_projection();
        Ok((0..self.d())
            .map(|i| proj[i * f..(i + 1) * f].iter().zip(video).map(|(&w, &x)| w * x).sum())
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            token_embeddings: self.token_embeddings().to_vec(),
            video_projection: self.video_projection().to_vec(),
            interaction: self.interaction().to_vec(),
            bias: self.bias(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(&ckpt).map_err(|e| Error::invalid("checkpoint", e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid("checkpoint", format!("unsupported format {:?}", ckpt.format)));
        }
        let mut model = Self {
            config: ckpt.config,
            seed: ckpt.seed,
            params: Vec::new(),
        };
        let d = model.d();
        let expect = [
            ("token_embeddings", ckpt.token_embeddings.len(), model.config.vocab.len() * d),
            ("video_projection", ckpt.video_projection.len(), d * model.config.feature_dim),
            ("interaction", ckpt.interaction.len(), d * d),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} values, expected {want}")));
            }
        }
        model.params = [ckpt.token_embeddings, ckpt.video_projection, ckpt.interaction, vec![ckpt.bias]].concat();
        if model.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("parameters in {}", path.display())));
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "vlalign-surrogate/1";

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Checkpoint<T> {
    format: String,
    config: ModelConfig,
    seed: u64,
    token_embeddings: Vec<T>,
    video_projection: Vec<T>,
    interaction: Vec<T>,
    bias: T,
}

impl<T: Scalar> AlignmentModel<T> for SurrogateModel<T> {
    type Record = SurrogateRecord<T>;

    fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    fn forward(&self, video: &[T], caption: Caption<'_>) -> Result<(T, Self::Record)> {
        let selected = self.selected(caption)?;
        let projected = self.project_video(video)?;
        let pooled = self.pool(&selected);
        let d = self.d();
        let w = self.interaction();
        let mixed: Vec<T> = (0..d)
            .map(|i| w[i * d..(i + 1) * d].iter().zip(&pooled).map(|(&a, &c)| a * c).sum())
            .collect();
        let logit = projected.iter().zip(&mixed).map(|(&p, &m)| p * m).sum::<T>() + self.bias();
        if !logit.is_finite() {
            return Err(Error::NonFinite("logit".into()));
        }
        let output = sigmoid(logit);
        Ok((
            output,
            SurrogateRecord {
                video: video.to_vec(),
                projected,
                pooled,
                mixed,
                selected,
                output,
            },
        ))
    }

    fn backward(&self, rec: &Self::Record, upstream: T, grad: &mut [T]) {
        let d = self.d();
        let f = self.config.feature_dim;
        let g = upstream * rec.output * (T::one() - rec.output);
        let (proj_at, inter_at, bias_at) = (self.proj_offset(), self.inter_offset(), self.bias_index());
        let w = self.interaction();

        grad[bias_at] += g;
        for i in 0..d {
            let gp = g * rec.projected[i];
            for j in 0..d {
                grad[inter_at + i * d + j] += gp * rec.pooled[j];
            }
            let gm = g * rec.mixed[i];
            for k in 0..f {
                grad[proj_at + i * f + k] += gm * rec.video[k];
            }
        }
        if rec.selected.is_empty() {
            return;
        }
        let n = T::of(rec.selected.len() as f64);
        let d_pooled: Vec<T> = (0..d)
            .map(|j| (0..d).map(|i| rec.projected[i] * w[i * d + j]).sum::<T>() * g / n)
            .collect();
        for &t in &rec.selected {
            grad[t * d..(t + 1) * d]
                .iter_mut()
                .zip(&d_pooled)
                .for_each(|(a, &b)| *a += b);
        }
    }

    fn parameters(&self) -> &[T] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }
}

/// Uses a frozen model as a frame scorer over feature-vector videos, so the
/// trained model itself can stand in for the external ensemble.
pub struct ModelScorer<T> {
    id: String,
    model: Arc<SurrogateModel<T>>,
    features: Arc<FeatureStore>,
}

impl<T: Scalar> ModelScorer<T> {
    pub fn new(id: impl Into<String>, model: Arc<SurrogateModel<T>>, features: Arc<FeatureStore>) -> Self {
        Self {
            id: id.into(),
            model,
            features,
        }
    }
}

impl<T: Scalar> FrameScorer for ModelScorer<T> {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, frame: FrameRef<'_>, caption: &str) -> Result<f64> {
        let video: Vec<T> = self.features.require(frame.video_ref)?.iter().map(|&x| T::of(x)).collect();
        let tokens = self.model.vocab().encode_text(caption);
        Ok(self.model.predict(&video, Caption::new(&tokens))?.as_f64())
    }
}
