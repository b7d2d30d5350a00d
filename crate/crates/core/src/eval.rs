//! Evaluation protocols and the per-misalignment score analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captions::tokenize;
use crate::corpus::{read_jsonl, write_jsonl, FeatureStore, MisalignmentType, ToyCorpus, Triplet};
use crate::error::{Error, Result};
use crate::model::{AlignmentModel, Caption};
use crate::scalar::Scalar;
use crate::scoring::ScoreTable;

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
pub fn auc_roc<T: PartialOrd + Copy>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));

    // Walk tie groups in ascending order; each positive beats every negative
    // below its group and ties half of the negatives inside it.
    let mut below_neg = 0usize;
    let mut twice_concordant = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].partial_cmp(&scores[order[i]]) == Some(std::cmp::Ordering::Equal) {
            j += 1;
        }
        if j == i {
            j = i + 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k]).count();
        let neg = group.len() - pos;
        twice_concordant += (2 * pos * below_neg + pos * neg) as u128;
        below_neg += neg;
        i = j;
    }
    Ok(twice_concordant as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Retrieval benchmark: each class caption ranks the whole pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub classes: Vec<RetrievalClass>,
    pub pool: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalClass {
    pub caption: String,
    pub relevant: Vec<String>,
}

impl RetrievalTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("retrieval task", "no classes"));
        }
        for c in &self.classes {
            if c.relevant.is_empty() {
                return Err(Error::invalid("retrieval task", format!("class {:?} has no relevant videos", c.caption)));
            }
            if let Some(v) = c.relevant.iter().find(|v| !self.pool.contains(v)) {
                return Err(Error::invalid("retrieval task", format!("{v:?} is relevant but not in the pool")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::invalid("retrieval task", e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Average precision of a ranking: mean of precision at each relevant hit.
pub fn average_precision(ranked_relevance: &[bool]) -> f64 {
    let total = ranked_relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, _) in ranked_relevance.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    sum / total as f64
}

/// Mean average precision over classes. Each class ranks the pool by
/// descending score; equal scores keep pool order.
pub fn retrieval_map<T, F>(task: &RetrievalTask, mut score: F) -> Result<f64>
where
    T: PartialOrd + Copy,
    F: FnMut(usize, &str) -> Option<T>,
{
    task.validate()?;
    let mut total = 0.0;
    for (ci, class) in task.classes.iter().enumerate() {
        let mut scored = Vec::with_capacity(task.pool.len());
        for v in &task.pool {
            let s = score(ci, v).ok_or_else(|| Error::MissingPairScore {
                class: class.caption.clone(),
                video_ref: v.clone(),
            })?;
            scored.push((s, v));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let relevance: Vec<bool> = scored.iter().map(|(_, v)| class.relevant.contains(v)).collect();
        total += average_precision(&relevance);
    }
    Ok(total / task.classes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaCandidate {
    pub text: String,
    pub is_correct: bool,
}

/// A video with candidate statements, exactly one of them correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub video_ref: String,
    pub candidates: Vec<VqaCandidate>,
}

impl VqaItem {
    pub fn validate(&self) -> Result<()> {
        let correct = self.candidates.iter().filter(|c| c.is_correct).count();
        if self.candidates.len() < 2 || correct != 1 {
            return Err(Error::invalid(
                "vqa item",
                format!("{}: needs >= 2 candidates with exactly one correct", self.video_ref),
            ));
        }
        Ok(())
    }

    pub fn correct_index(&self) -> usize {
        self.candidates.iter().position(|c| c.is_correct).unwrap_or(0)
    }
}

/// Fraction of items whose highest-scoring candidate is the correct one.
/// Ties go to the earliest candidate.
pub fn vqa_accuracy<T, F>(items: &[VqaItem], mut score: F) -> Result<f64>
where
    T: PartialOrd + Copy,
    F: FnMut(&VqaItem, usize) -> Result<T>,
{
    if items.is_empty() {
        return Err(Error::invalid("vqa", "no items"));
    }
    let mut correct = 0usize;
    for item in items {
        item.validate()?;
        let mut best = 0;
        let mut best_score = score(item, 0)?;
        for k in 1..item.candidates.len() {
            let s = score(item, k)?;
            if s > best_score {
                best = k;
                best_score = s;
            }
        }
        if item.candidates[best].is_correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntailmentExample {
    pub video_ref: String,
    pub caption: String,
    pub label: u8,
}

pub const HISTOGRAM_BINS: usize = 40;

/// Score-difference statistics for one misalignment type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentRow {
    pub misalignment: MisalignmentType,
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Counts over [-1, 1] in equal bins; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
}

pub fn histogram_bin(diff: f64) -> usize {
    let x = ((diff.clamp(-1.0, 1.0) + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor() as usize;
    x.min(HISTOGRAM_BINS - 1)
}

/// Group `s_pos - s_neg` by misalignment type. Every type gets a row.
pub fn misalignment_analysis(scores: &ScoreTable, triplets: &[Triplet]) -> Result<Vec<MisalignmentRow>> {
    let types: BTreeMap<&str, MisalignmentType> = triplets.iter().map(|t| (t.id.as_str(), t.misalignment)).collect();
    let mut groups: BTreeMap<MisalignmentType, Vec<f64>> = BTreeMap::new();
    let mut unknown = Vec::new();
    for row in &scores.rows {
        match types.get(row.triplet_id.as_str()) {
            Some(&t) => groups.entry(t).or_default().push(row.diff()),
            None => unknown.push(row.triplet_id.clone()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::DanglingTriplets(unknown));
    }
    Ok(MisalignmentType::ALL
        .into_iter()
        .map(|t| {
            let diffs = groups.remove(&t).unwrap_or_default();
            let mut histogram = vec![0; HISTOGRAM_BINS];
            diffs.iter().for_each(|&d| histogram[histogram_bin(d)] += 1);
            let (mean, std) = if diffs.is_empty() {
                (None, None)
            } else {
                let n = diffs.len() as f64;
                let m = diffs.iter().sum::<f64>() / n;
                let var = diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / n;
                (Some(m), Some(var.sqrt()))
            };
            MisalignmentRow {
                misalignment: t,
                count: diffs.len(),
                mean,
                std,
                histogram,
            }
        })
        .collect())
}

/// One row per type; empty groups leave the metric columns blank.
pub fn analysis_csv(rows: &[MisalignmentRow]) -> String {
    let mut out = String::from("misalignment,count,mean,std");
    for b in 0..HISTOGRAM_BINS {
        let _ = write!(out, ",bin{b:02}");
    }
    out.push('\n');
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.misalignment, r.count, opt(r.mean), opt(r.std));
        for c in &r.histogram {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

/// Small SVG bar chart of one type's histogram.
pub fn histogram_svg(row: &MisalignmentRow) -> String {
    let (w, h, pad) = (400.0, 160.0, 20.0);
    let bar = (w - 2.0 * pad) / HISTOGRAM_BINS as f64;
    let peak = row.histogram.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <text x=\"{pad}\" y=\"14\" font-size=\"12\">{} (n={}, mean={})</text>\n",
        row.misalignment,
        row.count,
        row.mean.map(|m| format!("{m:.3}")).unwrap_or_else(|| "-".into())
    );
    let base = h - pad;
    for (i, &c) in row.histogram.iter().enumerate() {
        let bh = (h - 2.0 * pad - 10.0) * c as f64 / peak;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"/>",
            pad + i as f64 * bar,
            base - bh,
            bar * 0.9,
            bh
        );
    }
    let mid = w / 2.0;
    let _ = writeln!(svg, "<line x1=\"{mid}\" y1=\"{}\" x2=\"{mid}\" y2=\"{base}\" stroke=\"gray\"/>", pad + 10.0);
    svg.push_str("</svg>\n");
    svg
}

pub fn write_plots(dir: &Path, rows: &[MisalignmentRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in rows {
        let p = dir.join(format!("{}.svg", r.misalignment));
        fs::write(&p, histogram_svg(r)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Output of one `eval` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n_items: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::invalid("report", e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

fn video<T: Scalar>(features: &FeatureStore, video_ref: &str) -> Result<Vec<T>> {
    Ok(features.require(video_ref)?.iter().map(|&x| T::of(x)).collect())
}

fn predict_text<T: Scalar, M: AlignmentModel<T>>(model: &M, video: &[T], text: &str) -> Result<T> {
    let ids = model.vocab().encode(&tokenize(text).tokens);
    model.predict(video, Caption::new(&ids))
}

/// Entailment AUC of a model over (video, caption, label) examples.
pub fn evaluate_entailment<T: Scalar, M: AlignmentModel<T>>(
    model: &M,
    examples: &[EntailmentExample],
    features: &FeatureStore,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.label > 1 {
            return Err(Error::invalid("entailment example", format!("label {} is not 0 or 1", ex.label)));
        }
        scores.push(predict_text(model, &video(features, &ex.video_ref)?, &ex.caption)?);
        labels.push(ex.label == 1);
    }
    auc_roc(&scores, &labels)
}

pub fn evaluate_retrieval<T: Scalar, M: AlignmentModel<T>>(
    model: &M,
    task: &RetrievalTask,
    features: &FeatureStore,
) -> Result<f64> {
    task.validate()?;
    let videos: Vec<Vec<T>> = task.pool.iter().map(|v| video(features, v)).collect::<Result<_>>()?;
    let mut table = Vec::with_capacity(task.classes.len());
    for c in &task.classes {
        let row: Vec<T> = videos.iter().map(|v| predict_text(model, v, &c.caption)).collect::<Result<_>>()?;
        table.push(row);
    }
    retrieval_map(task, |ci, v| {
        let vi = task.pool.iter().position(|p| p == v)?;
        Some(table[ci][vi])
    })
}

pub fn evaluate_vqa<T: Scalar, M: AlignmentModel<T>>(model: &M, items: &[VqaItem], features: &FeatureStore) -> Result<f64> {
    let mut cache: Option<(String, Vec<T>)> = None;
    vqa_accuracy(items, |item, k| {
        if cache.as_ref().map(|(r, _)| r != &item.video_ref).unwrap_or(true) {
            cache = Some((item.video_ref.clone(), video(features, &item.video_ref)?));
        }
        let v = &cache.as_ref().expect("just set").1;
        predict_text(model, v, &item.candidates[k].text)
    })
}

pub fn load_entailment(path: &Path) -> Result<Vec<EntailmentExample>> {
    read_jsonl(path)
}

pub fn load_vqa(path: &Path) -> Result<Vec<VqaItem>> {
    read_jsonl(path)
}

/// Held-out evaluation sets derived from a toy corpus.
pub struct ToyTasks {
    pub entailment: Vec<EntailmentExample>,
    pub retrieval: RetrievalTask,
    pub vqa: Vec<VqaItem>,
}

impl ToyTasks {
    pub fn save(&self, entailment: &Path, retrieval: &Path, vqa: &Path) -> Result<()> {
        write_jsonl(entailment, &self.entailment)?;
        self.retrieval.save(retrieval)?;
        write_jsonl(vqa, &self.vqa)
    }
}

/// Entailment pairs, content-word retrieval classes, and five-way VQA items
/// over the held-out triplets.
pub fn toy_tasks(corpus: &ToyCorpus, seed: u64) -> ToyTasks {
    let test = corpus.test_triplets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);

    let entailment = test
        .iter()
        .flat_map(|t| {
            [
                EntailmentExample {
                    video_ref: t.video_ref.clone(),
                    caption: t.caption_pos.clone(),
                    label: 1,
                },
                EntailmentExample {
                    video_ref: t.video_ref.clone(),
                    caption: t.caption_neg.clone(),
                    label: 0,
                },
            ]
        })
        .collect();

    let content_of = |t: &Triplet| -> Option<(usize, String)> {
        tokenize(&t.caption_pos)
            .tokens
            .into_iter()
            .enumerate()
            .find(|(_, w)| corpus.content_tokens.contains(w))
    };
    let mut classes: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in &test {
        if let Some((_, w)) = content_of(t) {
            classes.entry(w).or_default().push(t.video_ref.clone());
        }
    }
    let retrieval = RetrievalTask {
        classes: classes
            .into_iter()
            .map(|(caption, relevant)| RetrievalClass { caption, relevant })
            .collect(),
        pool: test.iter().map(|t| t.video_ref.clone()).collect(),
    };

    let mut vqa = Vec::with_capacity(test.len());
    for t in &test {
        let Some((slot, word)) = content_of(t) else { continue };
        let tokens = tokenize(&t.caption_pos).tokens;
        let mut others: Vec<&String> = corpus.content_tokens.iter().filter(|w| **w != word).collect();
        others.shuffle(&mut rng);
        let mut candidates: Vec<VqaCandidate> = others
            .into_iter()
            .take(4)
            .map(|w| {
                let mut alt = tokens.clone();
                alt[slot] = w.clone();
                VqaCandidate {
                    text: alt.join(" "),
                    is_correct: false,
                }
            })
            .collect();
        let at = rng.random_range(0..=candidates.len());
        candidates.insert(
            at,
            VqaCandidate {
                text: t.caption_pos.clone(),
                is_correct: true,
            },
        );
        vqa.push(VqaItem {
            video_ref: t.video_ref.clone(),
            candidates,
        });
    }

    ToyTasks {
        entailment,
        retrieval,
        vqa,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreRow;

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auc_roc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc_roc(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&s, &[true; 4]), Err(Error::AucUndefined)));
        let msg = auc_roc(&s, &[false; 4]).unwrap_err().to_string();
        assert!(msg.contains("AUC undefined"));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true, false, false]), 1.0);
        assert_eq!(average_precision(&[false, true, false, true]), 0.5);
    }

    #[test]
    fn map_ranks_by_score() {
        let task = RetrievalTask {
            classes: vec![
                RetrievalClass {
                    caption: "a".into(),
                    relevant: vec!["v1".into(), "v2".into()],
                },
                RetrievalClass {
                    caption: "b".into(),
                    relevant: vec!["v3".into()],
                },
            ],
            pool: vec!["v1".into(), "v2".into(), "v3".into(), "v4".into()],
        };
        let scores = |c: usize, v: &str| -> Option<f64> {
            Some(match (c, v) {
                (0, "v1") | (0, "v2") => 0.9,
                (1, "v3") => 0.8,
                (1, "v1") => 0.95,
                _ => 0.1,
            })
        };
        // class a: AP 1; class b: v3 ranked second, AP 1/2
        assert_eq!(retrieval_map(&task, scores).unwrap(), 0.75);
        let err = retrieval_map(&task, |_, v: &str| if v == "v4" { None } else { Some(0.5) }).unwrap_err();
        assert!(matches!(err, Error::MissingPairScore { .. }));
    }

    #[test]
    fn map_ties_keep_pool_order() {
        let task = RetrievalTask {
            classes: vec![RetrievalClass {
                caption: "x".into(),
                relevant: vec!["v2".into(), "v4".into()],
            }],
            pool: (1..=4).map(|i| format!("v{i}")).collect(),
        };
        assert_eq!(retrieval_map(&task, |_, _| Some(1.0)).unwrap(), 0.5);
    }

    #[test]
    fn ssv2_temporal_shape() {
        let pool: Vec<String> = (0..216).map(|i| format!("v{i:03}")).collect();
        let classes: Vec<RetrievalClass> = (0..18)
            .map(|c| RetrievalClass {
                caption: format!("class {c}"),
                relevant: pool[c * 12..(c + 1) * 12].to_vec(),
            })
            .collect();
        let task = RetrievalTask { classes, pool };
        let m = retrieval_map(&task, |c, v: &str| {
            let i: usize = v[1..].parse().unwrap();
            Some(if i / 12 == c { 1.0 } else { ((i * 7919) % 100) as f64 / 100.0 })
        })
        .unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn invalid_retrieval_task() {
        let task = RetrievalTask {
            classes: vec![RetrievalClass {
                caption: "x".into(),
                relevant: vec!["elsewhere".into()],
            }],
            pool: vec!["v1".into()],
        };
        assert!(retrieval_map(&task, |_, _| Some(1.0)).is_err());
    }

    fn item(correct_at: usize, n: usize) -> VqaItem {
        VqaItem {
            video_ref: "v".into(),
            candidates: (0..n)
                .map(|k| VqaCandidate {
                    text: format!("c{k}"),
                    is_correct: k == correct_at,
                })
                .collect(),
        }
    }

    #[test]
    fn vqa_tie_rule() {
        let items = vec![item(0, 5), item(3, 5), item(1, 5), item(0, 5)];
        let perfect = vqa_accuracy(&items, |it, k| Ok(if it.candidates[k].is_correct { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(perfect, 1.0);
        let flat = vqa_accuracy(&items, |_, _| Ok(0.5)).unwrap();
        assert_eq!(flat, 0.5);
        assert!(vqa_accuracy(&[item(0, 1)], |_, _| Ok(0.0)).is_err());
        let mut two = item(0, 3);
        two.candidates[1].is_correct = true;
        assert!(two.validate().is_err());
    }

    fn row(id: &str, s_pos: f64, s_neg: f64) -> ScoreRow {
        ScoreRow {
            triplet_id: id.into(),
            generator_id: "g".into(),
            video_ref: format!("syn/{id}"),
            s_pos,
            s_neg,
        }
    }

    fn triplet(id: &str, m: MisalignmentType) -> Triplet {
        Triplet {
            id: id.into(),
            video_ref: format!("v/{id}"),
            caption_pos: "a b".into(),
            caption_neg: "a c".into(),
            misalignment: m,
            source: "unit".into(),
        }
    }

    #[test]
    fn analysis_groups() {
        let triplets = vec![
            triplet("a", MisalignmentType::Object),
            triplet("b", MisalignmentType::Object),
            triplet("c", MisalignmentType::Hallucination),
        ];
        let scores = ScoreTable {
            rows: vec![row("a", 0.5, 0.5), row("b", 0.7, 0.7), row("c", 0.2, 0.45)],
        };
        let rows = misalignment_analysis(&scores, &triplets).unwrap();
        assert_eq!(rows.len(), 7);
        let obj = &rows[0];
        assert_eq!((obj.count, obj.mean, obj.std), (2, Some(0.0), Some(0.0)));
        assert_eq!(obj.histogram[20], 2);
        let hal = rows.iter().find(|r| r.misalignment == MisalignmentType::Hallucination).unwrap();
        assert_eq!(hal.count, 1);
        assert!((hal.mean.unwrap() + 0.25).abs() < 1e-12);
        assert_eq!(hal.std, Some(0.0));
        let act = rows.iter().find(|r| r.misalignment == MisalignmentType::Action).unwrap();
        assert_eq!((act.count, act.mean, act.std), (0, None, None));

        let csv = analysis_csv(&rows);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.lines().nth(2).unwrap().starts_with("action,0,,,"));
        assert!(histogram_svg(obj).starts_with("<svg"));
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram_bin(-1.0), 0);
        assert_eq!(histogram_bin(1.0), HISTOGRAM_BINS - 1);
        assert_eq!(histogram_bin(0.0), 20);
        assert_eq!(histogram_bin(-0.01), 19);
    }

    #[test]
    fn report_round_trip() {
        let r = EvalReport {
            task: "entailment".into(),
            metric: "auc".into(),
            value: 0.875,
            n_items: 8,
            config_digest: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        r.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), r);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
    }
}
