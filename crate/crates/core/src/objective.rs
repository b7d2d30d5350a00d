//! Loss terms and the training loop.
//!
//! For a sample with real video `Vr`, positive caption `tr`, negative caption
//! `ts`, synthetic video `Vs` and weight `w`:
//!
//! * real: `-[ln f(Vr, tr) + ln(1 - f(Vr, ts))]`
//! * synthetic: `w * -[ln f(Vs, ts) + ln(1 - f(Vs, tr))]`
//! * consistency: for each video, with `t'` the shared caption,
//!   `w * [max(0, g + f(V, t') - f(V, own)) + max(0, g + f(V, other) - f(V, t'))]`
//!
//! Each term is averaged over the samples it applies to, and the total is
//! `real + synthetic + lambda * consistency`.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captions::{lcs, tokenize, SharedCaption};
use crate::corpus::{FeatureStore, TrainingSample};
use crate::error::{Error, Result};
use crate::model::{parameter_gradients, AlignmentModel, Caption, Tape, Vocab};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Hinge margin of the consistency loss.
    pub gamma: f64,
    /// Weight of the consistency loss in the total.
    pub lambda_scr: f64,
    /// Predictions are clamped to `[epsilon, 1 - epsilon]` inside logs.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            lambda_scr: 1e-2,
            epsilon: 1e-7,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            warmup_steps: 200,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma >= 0.0 && self.lambda_scr >= 0.0) {
            return bad("gamma and lambda_scr must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad("epsilon must lie in (0, 0.5)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Learning rate at 1-based `step` of `total`: linear warmup, then
    /// cosine decay to zero.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let lr = self.learning_rate;
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return lr * step as f64 / self.warmup_steps as f64;
        }
        if total <= self.warmup_steps {
            return lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// Shared-caption masks over the positive and negative token lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedMasks {
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

impl SharedMasks {
    pub fn is_empty(&self) -> bool {
        !self.pos.iter().any(|&b| b)
    }
}

impl From<SharedCaption> for SharedMasks {
    fn from(s: SharedCaption) -> Self {
        Self {
            pos: s.mask_pos,
            neg: s.mask_neg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPart<T> {
    pub video: Vec<T>,
    pub weight: Option<T>,
    pub shared: Option<SharedMasks>,
}

/// A training sample resolved to feature vectors and token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<T> {
    pub key: String,
    pub real_video: Vec<T>,
    pub pos_tokens: Vec<usize>,
    pub neg_tokens: Vec<usize>,
    pub synthetic: Option<SyntheticPart<T>>,
}

impl<T: Scalar> PreparedSample<T> {
    /// The synthetic half as a plain real-loss sample: synthetic video,
    /// generating caption as positive, real caption as negative.
    pub fn synthetic_as_real(&self) -> Option<PreparedSample<T>> {
        self.synthetic.as_ref().map(|s| PreparedSample {
            key: self.key.clone(),
            real_video: s.video.clone(),
            pos_tokens: self.neg_tokens.clone(),
            neg_tokens: self.pos_tokens.clone(),
            synthetic: None,
        })
    }
}

/// Resolve features, token ids, weights and shared-caption masks.
pub fn prepare_samples<T: Scalar>(
    samples: &[TrainingSample],
    features: &FeatureStore,
    vocab: &Vocab,
) -> Result<Vec<PreparedSample<T>>> {
    let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    samples
        .iter()
        .map(|s| {
            let pos = tokenize(&s.triplet.caption_pos);
            let neg = tokenize(&s.triplet.caption_neg);
            let synthetic = match &s.synthetic {
                Some(syn) => Some(SyntheticPart {
                    video: cast(features.require(&syn.video_ref)?),
                    weight: s.weight.map(T::of),
                    shared: Some(lcs(&pos, &neg).into()),
                }),
                None => None,
            };
            Ok(PreparedSample {
                key: s.key(),
                real_video: cast(features.require(&s.triplet.video_ref)?),
                pos_tokens: vocab.encode(&pos.tokens),
                neg_tokens: vocab.encode(&neg.tokens),
                synthetic,
            })
        })
        .collect()
}

/// A loss value and its gradient with respect to the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleDiagnostics<T> {
    pub key: String,
    pub omega: Option<T>,
    /// Active consistency hinges: real (own, other), synthetic (own, other).
    pub hinges: [bool; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport<T> {
    pub l_real: T,
    pub l_syn: T,
    pub l_scr: T,
    pub total: T,
    pub diagnostics: Vec<SampleDiagnostics<T>>,
}

/// Predictions recorded for one loss evaluation, with the loss's derivative
/// with respect to each.
struct Recorder<'m, T: Scalar, M: AlignmentModel<T>> {
    model: &'m M,
    tape: Tape<M::Record>,
    upstream: Vec<T>,
}

impl<'m, T: Scalar, M: AlignmentModel<T>> Recorder<'m, T, M> {
    fn new(model: &'m M) -> Self {
        Self {
            model,
            tape: Tape::new(),
            upstream: Vec::new(),
        }
    }

    fn predict(&mut self, video: &[T], caption: Caption<'_>) -> Result<(T, usize)> {
        let out = self.model.record(&mut self.tape, video, caption)?;
        self.upstream.push(T::zero());
        Ok(out)
    }

    fn push_grad(&mut self, at: usize, g: T) {
        self.upstream[at] += g;
    }

    fn finish(self) -> Result<Vec<T>> {
        if self.tape.is_empty() {
            return Ok(vec![T::zero(); self.model.parameters().len()]);
        }
        parameter_gradients(self.model, &self.tape, &self.upstream)
    }
}

/// `-[ln f(video, pos) + ln(1 - f(video, neg))]` with clamped predictions;
/// adds `scale * d/df` for both predictions.
fn pair_nll<T: Scalar, M: AlignmentModel<T>>(
    rec: &mut Recorder<'_, T, M>,
    video: &[T],
    pos: &[usize],
    neg: &[usize],
    eps: T,
    scale: T,
) -> Result<T> {
    let (yp, ip) = rec.predict(video, Caption::new(pos))?;
    let (yn, in_) = rec.predict(video, Caption::new(neg))?;
    let hi = T::one() - eps;
    let cp = yp.max(eps).min(hi);
    let cn = yn.max(eps).min(hi);
    let term = -(cp.ln() + (T::one() - cn).ln());
    if scale != T::zero() {
        if yp > eps && yp < hi {
            rec.push_grad(ip, -scale / cp);
        }
        if yn > eps && yn < hi {
            rec.push_grad(in_, scale / (T::one() - cn));
        }
    }
    Ok(term)
}

fn weight_of<T: Scalar>(s: &PreparedSample<T>) -> Result<T> {
    s.synthetic
        .as_ref()
        .and_then(|p| p.weight)
        .ok_or_else(|| Error::MissingWeights(vec![s.key.clone()]))
}

fn real_term<T: Scalar, M: AlignmentModel<T>, S: Borrow<PreparedSample<T>>>(
    rec: &mut Recorder<'_, T, M>,
    batch: &[S],
    eps: T,
    scale: T,
) -> Result<T> {
    if batch.is_empty() {
        return Ok(T::zero());
    }
    let n = T::of(batch.len() as f64);
    let mut sum = T::zero();
    for s in batch {
        let s = s.borrow();
        sum += pair_nll(rec, &s.real_video, &s.pos_tokens, &s.neg_tokens, eps, scale / n)?;
    }
    Ok(sum / n)
}

fn syn_term<T: Scalar, M: AlignmentModel<T>>(
    rec: &mut Recorder<'_, T, M>,
    batch: &[&PreparedSample<T>],
    eps: T,
    scale: T,
) -> Result<T> {
    if batch.is_empty() {
        return Ok(T::zero());
    }
    let n = T::of(batch.len() as f64);
    let mut sum = T::zero();
    for s in batch {
        let w = weight_of(s)?;
        if w == T::zero() {
            continue;
        }
        let syn = s.synthetic.as_ref().expect("synthetic samples only");
        sum += w * pair_nll(rec, &syn.video, &s.neg_tokens, &s.pos_tokens, eps, scale * w / n)?;
    }
    Ok(sum / n)
}

/// Two hinges for one video; returns their sum and which were active.
#[allow(clippy::too_many_arguments)]
fn hinge_pair<T: Scalar, M: AlignmentModel<T>>(
    rec: &mut Recorder<'_, T, M>,
    video: &[T],
    own: &[usize],
    own_mask: &[bool],
    other: &[usize],
    gamma: T,
    scale: T,
) -> Result<(T, [bool; 2])> {
    let (f_own, i_own) = rec.predict(video, Caption::new(own))?;
    let (f_shared, i_shared) = rec.predict(video, Caption::masked(own, own_mask))?;
    let (f_other, i_other) = rec.predict(video, Caption::new(other))?;
    let h1 = gamma + f_shared - f_own;
    let h2 = gamma + f_other - f_shared;
    let active = [h1 > T::zero(), h2 > T::zero()];
    let mut value = T::zero();
    if active[0] {
        value += h1;
        rec.push_grad(i_shared, scale);
        rec.push_grad(i_own, -scale);
    }
    if active[1] {
        value += h2;
        rec.push_grad(i_other, scale);
        rec.push_grad(i_shared, -scale);
    }
    Ok((value, active))
}

fn scr_term<T: Scalar, M: AlignmentModel<T>>(
    rec: &mut Recorder<'_, T, M>,
    batch: &[&PreparedSample<T>],
    gamma: T,
    scale: T,
    hinges: &mut Vec<(String, [bool; 4])>,
) -> Result<T> {
    let missing: Vec<String> = batch
        .iter()
        .filter(|s| s.synthetic.as_ref().is_some_and(|p| p.shared.is_none()))
        .map(|s| s.key.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingMasks(missing));
    }
    let included: Vec<&PreparedSample<T>> = batch
        .iter()
        .copied()
        .filter(|s| s.synthetic.as_ref().and_then(|p| p.shared.as_ref()).is_some_and(|m| !m.is_empty()))
        .collect();
    if included.is_empty() {
        return Ok(T::zero());
    }
    let n = T::of(included.len() as f64);
    let mut sum = T::zero();
    for s in included {
        let w = weight_of(s)?;
        if w == T::zero() {
            hinges.push((s.key.clone(), [false; 4]));
            continue;
        }
        let syn = s.synthetic.as_ref().expect("filtered");
        let masks = syn.shared.as_ref().expect("filtered");
        let g = scale * w / n;
        let (real, ra) = hinge_pair(rec, &s.real_video, &s.pos_tokens, &masks.pos, &s.neg_tokens, gamma, g)?;
        let (synth, sa) = hinge_pair(rec, &syn.video, &s.neg_tokens, &masks.neg, &s.pos_tokens, gamma, g)?;
        sum += w * (real + synth);
        hinges.push((s.key.clone(), [ra[0], ra[1], sa[0], sa[1]]));
    }
    Ok(sum / n)
}

fn synthetic_only<T: Scalar, S: Borrow<PreparedSample<T>>>(batch: &[S]) -> Result<Vec<&PreparedSample<T>>> {
    let without: Vec<String> = batch
        .iter()
        .map(Borrow::borrow)
        .filter(|s| s.synthetic.is_none())
        .map(|s| s.key.clone())
        .collect();
    if !without.is_empty() {
        return Err(Error::invalid(
            "batch",
            format!("samples without a synthetic video: {}", without.join(", ")),
        ));
    }
    Ok(batch.iter().map(Borrow::borrow).collect())
}

/// Mean negative log-likelihood of the real videos.
pub fn loss_real<T, M, S>(model: &M, batch: &[S], config: &LossConfig) -> Result<LossValue<T>>
where
    T: Scalar,
    M: AlignmentModel<T>,
    S: Borrow<PreparedSample<T>>,
{
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    let mut rec = Recorder::new(model);
    let value = real_term(&mut rec, batch, T::of(config.epsilon), T::one())?;
    Ok(LossValue {
        value,
        grad: rec.finish()?,
    })
}

/// Weighted negative log-likelihood of the synthetic videos. Every sample
/// must carry a synthetic video and a weight.
pub fn loss_syn_weighted<T, M, S>(model: &M, batch: &[S], config: &LossConfig) -> Result<LossValue<T>>
where
    T: Scalar,
    M: AlignmentModel<T>,
    S: Borrow<PreparedSample<T>>,
{
    let syn = synthetic_only(batch)?;
    let mut rec = Recorder::new(model);
    let value = syn_term(&mut rec, &syn, T::of(config.epsilon), T::one())?;
    Ok(LossValue {
        value,
        grad: rec.finish()?,
    })
}

/// Weighted consistency hinge loss around the shared caption. Samples whose
/// shared caption is empty are skipped.
pub fn loss_scr<T, M, S>(model: &M, batch: &[S], config: &LossConfig) -> Result<LossValue<T>>
where
    T: Scalar,
    M: AlignmentModel<T>,
    S: Borrow<PreparedSample<T>>,
{
    let syn = synthetic_only(batch)?;
    let mut rec = Recorder::new(model);
    let value = scr_term(&mut rec, &syn, T::of(config.gamma), T::one(), &mut Vec::new())?;
    Ok(LossValue {
        value,
        grad: rec.finish()?,
    })
}

/// Full objective over a mixed batch. Synthetic-free samples only enter the
/// real term.
pub fn total_loss<T, M, S>(model: &M, batch: &[S], config: &LossConfig) -> Result<(LossReport<T>, Vec<T>)>
where
    T: Scalar,
    M: AlignmentModel<T>,
    S: Borrow<PreparedSample<T>>,
{
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    let eps = T::of(config.epsilon);
    let lambda = T::of(config.lambda_scr);
    let syn: Vec<&PreparedSample<T>> = batch
        .iter()
        .map(Borrow::borrow)
        .filter(|s| s.synthetic.is_some())
        .collect();

    let mut rec = Recorder::new(model);
    let l_real = real_term(&mut rec, batch, eps, T::one())?;
    let l_syn = syn_term(&mut rec, &syn, eps, T::one())?;
    let mut hinges = Vec::new();
    let l_scr = scr_term(&mut rec, &syn, T::of(config.gamma), lambda, &mut hinges)?;
    let grad = rec.finish()?;

    let diagnostics = batch
        .iter()
        .map(Borrow::borrow)
        .map(|s| SampleDiagnostics {
            key: s.key.clone(),
            omega: s.synthetic.as_ref().and_then(|p| p.weight),
            hinges: hinges
                .iter()
                .find(|(k, _)| k == &s.key)
                .map(|(_, h)| *h)
                .unwrap_or_default(),
        })
        .collect();
    Ok((
        LossReport {
            l_real,
            l_syn,
            l_scr,
            total: l_real + l_syn + lambda * l_scr,
            diagnostics,
        },
        grad,
    ))
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub l_real: f64,
    pub l_syn: f64,
    pub l_scr: f64,
    pub total: f64,
}

pub struct FitOutcome<M> {
    pub model: M,
    pub trace: Vec<EpochTrace>,
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Train `model` on `samples`. Batches come from a seeded shuffle per epoch;
/// the run is deterministic for a fixed config.
pub fn fit<T, M>(mut model: M, samples: &[PreparedSample<T>], config: &LossConfig) -> Result<FitOutcome<M>>
where
    T: Scalar,
    M: AlignmentModel<T>,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set", "no samples"));
    }
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| s.synthetic.as_ref().is_some_and(|p| p.weight.is_none()))
        .map(|s| s.key.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingWeights(missing));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_params = model.parameters().len();
    let mut adam = Adam {
        m: vec![T::zero(); n_params],
        v: vec![T::zero(); n_params],
        t: 0,
    };
    let per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let adam_eps = T::of(config.adam_epsilon);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 4];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (report, grad) = total_loss(&model, &batch, config)?;
            if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let keys: Vec<&str> = batch.iter().take(5).map(|s| s.key.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, batch {b} (first samples: {})",
                    keys.join(", ")
                )));
            }
            let size = batch.len() as f64;
            for (a, v) in acc.iter_mut().zip([report.l_real, report.l_syn, report.l_scr, report.total]) {
                *a += size * v.as_f64();
            }

            step += 1;
            let lr = T::of(config.learning_rate_at(step, total_steps));
            let params = model.parameters_mut();
            match config.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in params.iter_mut().zip(&grad) {
                        *p -= lr * *g;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = T::one() - b1.powi(adam.t);
                    let c2 = T::one() - b2.powi(adam.t);
                    for (k, (p, &g)) in params.iter_mut().zip(&grad).enumerate() {
                        adam.m[k] = b1 * adam.m[k] + (T::one() - b1) * g;
                        adam.v[k] = b2 * adam.v[k] + (T::one() - b2) * g * g;
                        let m_hat = adam.m[k] / c1;
                        let v_hat = adam.v[k] / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + adam_eps);
                    }
                }
            }
        }
        let n = samples.len() as f64;
        trace.push(EpochTrace {
            epoch,
            l_real: acc[0] / n,
            l_syn: acc[1] / n,
            l_scr: acc[2] / n,
            total: acc[3] / n,
        });
    }
    Ok(FitOutcome { model, trace })
}

/// `epoch,l_real,l_syn,l_scr,total`
pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,l_real,l_syn,l_scr,total\n");
    for t in trace {
        let _ = writeln!(out, "{},{},{},{},{}", t.epoch, t.l_real, t.l_syn, t.l_scr, t.total);
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &[EpochTrace]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}
