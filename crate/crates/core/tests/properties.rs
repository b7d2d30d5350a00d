use proptest::prelude::*;

use vlalign::captions::{lcs_pairs, shared_caption, tokenize};
use vlalign::eval::{auc_roc, histogram_bin, retrieval_map, vqa_accuracy, RetrievalClass, RetrievalTask, VqaCandidate, VqaItem};
use vlalign::model::{AlignmentModel, Caption, ModelConfig, Vocab};
use vlalign::scoring::{compute_weight, ensemble_score, FrameRef, FrameScorer, WeightingStrategy};
use vlalign::{Model, Model32};

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "man", "dog", "runs", "the", "red", "ball", "on", "grass"]).prop_map(String::from)
}

fn caption() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 0..10)
}

/// Strictly increasing and far from linear.
fn warp(x: f64) -> f64 {
    (3.0 * x).exp() + x * x * x
}

proptest! {
    #[test]
    fn lcs_is_common_subsequence(a in caption(), b in caption()) {
        let pairs = lcs_pairs(&a, &b);
        prop_assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        prop_assert!(pairs.iter().all(|&(i, j)| a[i] == b[j]));
        prop_assert!(pairs.len() <= a.len().min(b.len()));
        prop_assert_eq!(pairs.len(), lcs_pairs(&b, &a).len());
    }

    #[test]
    fn lcs_of_self_is_self(a in caption()) {
        let pairs = lcs_pairs(&a, &a);
        prop_assert_eq!(pairs, (0..a.len()).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn masks_select_the_shared_caption(a in caption(), b in caption()) {
        let (ta, tb) = (a.join(" "), b.join(" "));
        let shared = shared_caption(&ta, &tb);
        prop_assert_eq!(tokenize(&ta).select(&shared.mask_pos).join(" "), shared.text.clone());
        prop_assert_eq!(tokenize(&tb).select(&shared.mask_neg).join(" "), shared.text);
    }

    #[test]
    fn tokenize_is_idempotent(s in "[A-Za-z ,.!?'-]{0,40}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.normalized()).tokens, once.tokens);
    }

    #[test]
    fn weights_in_unit_interval(s_pos in 0.0..=1.0f64, s_neg in 0.0..=1.0f64) {
        for strategy in WeightingStrategy::ALL {
            let w = compute_weight(strategy, s_pos, s_neg).unwrap();
            prop_assert!((0.0..=1.0).contains(&w), "{strategy} gave {w}");
        }
        let d = s_pos - s_neg;
        prop_assert_eq!(compute_weight(WeightingStrategy::ClampedDiff, s_pos, s_neg).unwrap(), d.max(0.0));
        prop_assert_eq!(
            compute_weight(WeightingStrategy::Indicator, s_pos, s_neg).unwrap(),
            if d > 0.0 { 1.0 } else { 0.0 }
        );
    }

    #[test]
    fn weights_are_monotone(s_pos in 0.0..=1.0f64, s_neg in 0.0..=1.0f64, dp in 0.0..=1.0f64, dn in 0.0..=1.0f64) {
        let hi_pos = (s_pos + dp).min(1.0);
        let hi_neg = (s_neg + dn).min(1.0);
        use WeightingStrategy::*;
        for strategy in [PosOnly, Product, ClampedDiff] {
            prop_assert!(compute_weight(strategy, hi_pos, s_neg).unwrap() >= compute_weight(strategy, s_pos, s_neg).unwrap());
        }
        for strategy in [Product, Indicator, ClampedDiff] {
            prop_assert!(compute_weight(strategy, s_pos, hi_neg).unwrap() <= compute_weight(strategy, s_pos, s_neg).unwrap());
        }
    }

    #[test]
    fn out_of_range_scores_rejected(x in 1.0001..5.0f64) {
        for strategy in WeightingStrategy::ALL {
            prop_assert!(compute_weight(strategy, x, 0.5).is_err());
            prop_assert!(compute_weight(strategy, 0.5, -x).is_err());
        }
    }

    #[test]
    fn ensemble_ignores_scorer_order(values in prop::collection::vec(0.0..=1.0f64, 1..6), rot in 0usize..6) {
        let make = |vs: &[f64]| -> Vec<Box<dyn FrameScorer>> {
            vs.iter().enumerate().map(|(i, &v)| Box::new(Fixed(format!("s{i}"), v)) as Box<dyn FrameScorer>).collect()
        };
        let mut rotated = values.clone();
        rotated.rotate_left(rot % values.len());
        let mut reversed = values.clone();
        reversed.reverse();
        let a = ensemble_score("v", "a dog", &make(&values), 4, 49).unwrap();
        let b = ensemble_score("v", "a dog", &make(&rotated), 4, 49).unwrap();
        let c = ensemble_score("v", "a dog", &make(&reversed), 4, 49).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(a.to_bits(), c.to_bits());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_is_rank_based(data in prop::collection::vec((-2.0..2.0f64, any::<bool>()), 2..30)) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let auc = auc_roc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|&x| warp(x)).collect();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!((auc - auc_roc(&warped, &labels).unwrap()).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auc + auc_roc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn map_is_rank_based(
        scores in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 8), 1..4),
        rel in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 1..4),
    ) {
        let n = scores.len().min(rel.len());
        prop_assume!(rel[..n].iter().all(|r| r.iter().any(|&x| x)));
        let pool: Vec<String> = (0..8).map(|i| format!("v{i}")).collect();
        let task = RetrievalTask {
            classes: (0..n)
                .map(|c| RetrievalClass {
                    caption: format!("c{c}"),
                    relevant: (0..8).filter(|&i| rel[c][i]).map(|i| pool[i].clone()).collect(),
                })
                .collect(),
            pool: pool.clone(),
        };
        let at = |c: usize, v: &str| v[1..].parse::<usize>().ok().map(|i| scores[c][i]);
        let plain = retrieval_map(&task, at).unwrap();
        let warped = retrieval_map(&task, |c, v| at(c, v).map(warp)).unwrap();
        prop_assert!((0.0..=1.0).contains(&plain));
        prop_assert_eq!(plain, warped);
    }

    #[test]
    fn vqa_is_rank_based(
        items in prop::collection::vec((prop::collection::vec(-2.0..2.0f64, 2..6), any::<prop::sample::Index>()), 1..20),
    ) {
        let vqa: Vec<VqaItem> = items
            .iter()
            .enumerate()
            .map(|(i, (s, at))| {
                let correct = at.index(s.len());
                VqaItem {
                    video_ref: format!("v{i}"),
                    candidates: (0..s.len()).map(|k| VqaCandidate { text: format!("c{k}"), is_correct: k == correct }).collect(),
                }
            })
            .collect();
        let score = |item: &VqaItem, k: usize| -> vlalign::Result<f64> {
            let i: usize = item.video_ref[1..].parse().unwrap();
            Ok(items[i].0[k])
        };
        let plain = vqa_accuracy(&vqa, score).unwrap();
        let warped = vqa_accuracy(&vqa, |it, k| score(it, k).map(warp)).unwrap();
        prop_assert!((0.0..=1.0).contains(&plain));
        prop_assert_eq!(plain, warped);
    }

    #[test]
    fn histogram_bins_in_range(d in -1.0..=1.0f64) {
        let b = histogram_bin(d);
        prop_assert!(b < 40);
        prop_assert!(-1.0 + b as f64 * 0.05 <= d + 1e-12);
    }

    #[test]
    fn predictions_in_open_unit_interval(
        seed in any::<u64>(),
        video in prop::collection::vec(-5.0..5.0f64, 4),
        tokens in prop::collection::vec(0usize..6, 0..6),
    ) {
        let m = model(seed);
        let y = m.predict(&video, Caption::new(&tokens)).unwrap();
        prop_assert!(y > 0.0 && y < 1.0);
        let m32 = Model32::new(m.config().clone(), seed).unwrap();
        let v32: Vec<f32> = video.iter().map(|&x| x as f32).collect();
        let y32 = m32.predict(&v32, Caption::new(&tokens)).unwrap();
        prop_assert!((y32 as f64 - y).abs() < 1e-4);
    }
}

fn model(seed: u64) -> Model {
    Model::new(
        ModelConfig {
            vocab: Vocab::from_captions(["a dog runs", "the cat sat"]),
            embed_dim: 3,
            feature_dim: 4,
        },
        seed,
    )
    .unwrap()
}

struct Fixed(String, f64);

impl FrameScorer for Fixed {
    fn id(&self) -> &str {
        &self.0
    }
    fn score(&self, _: FrameRef<'_>, _: &str) -> vlalign::Result<f64> {
        Ok(self.1)
    }
}
