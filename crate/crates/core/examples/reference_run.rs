//! Toy-scale reference runs: weight separation, per-type score means, and
//! held-out entailment AUC under fixed versus clamped-difference weighting.
//!
//! `cargo run --release -p vlalign --example reference_run [seeds]`

use std::collections::BTreeMap;
use std::time::Instant;

use vlalign::corpus::{FidelityMix, MisalignmentType, ToyCorpusConfig};
use vlalign::eval::misalignment_analysis;
use vlalign::pipeline::{Experiment, RunConfig};
use vlalign::scoring::WeightingStrategy;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn main() -> vlalign::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);

    let mixed = |seed: u64| RunConfig {
        seed,
        toy: Some(ToyCorpusConfig {
            seed,
            mix: Some(FidelityMix {
                fraction: 0.5,
                fidelity: 0.0,
            }),
            ..ToyCorpusConfig::default()
        }),
        ..RunConfig::default()
    };

    let t = Instant::now();
    let exp = Experiment::prepare(&mixed(0))?;
    let weights = exp.weights(WeightingStrategy::ClampedDiff)?;
    let truth: BTreeMap<(&str, &str), f64> = exp
        .corpus
        .ground_truth
        .iter()
        .map(|g| ((g.triplet_id.as_str(), g.generator_id.as_str()), g.fidelity))
        .collect();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for w in &weights {
        let rho = truth[&(w.triplet_id.as_str(), w.generator_id.as_str())];
        groups.entry(format!("{rho}")).or_default().push(w.omega);
    }
    for (rho, ws) in &groups {
        println!("rho={rho}: n={} mean omega={:.4}", ws.len(), ws.iter().sum::<f64>() / ws.len() as f64);
    }
    println!("separation done in {:.2?}", t.elapsed());

    let mut typed = RunConfig::default();
    let mut tf = BTreeMap::new();
    for m in MisalignmentType::ALL {
        let rho = match m {
            MisalignmentType::EventOrderFlip | MisalignmentType::Hallucination => 0.4,
            _ => 0.9,
        };
        tf.insert(m, rho);
    }
    typed.toy.as_mut().unwrap().type_fidelity = tf;
    let exp7 = Experiment::prepare(&typed)?;
    for row in misalignment_analysis(&exp7.scores, &exp7.corpus.triplets)? {
        println!("{:<14} n={:<4} mean={:+.4}", row.misalignment.to_string(), row.count, row.mean.unwrap_or(f64::NAN));
    }

    let t = Instant::now();
    let clean = RunConfig::default();
    let (fit, m) = Experiment::prepare(&clean)?.run(&clean)?;
    println!(
        "clean seed 0: auc={:.4} map={:.4} acc={:.4} final loss={:.4} ({:.2?})",
        m.auc,
        m.map,
        m.accuracy,
        fit.trace.last().unwrap().total,
        t.elapsed()
    );

    let mut by_strategy: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..seeds {
        let config = mixed(seed);
        let exp = Experiment::prepare(&config)?;
        for strategy in [WeightingStrategy::Fixed, WeightingStrategy::ClampedDiff] {
            let (_, m) = exp.run(&RunConfig { strategy, ..config.clone() })?;
            println!("seed {seed} {strategy:<13} auc={:.4} map={:.4} acc={:.4}", m.auc, m.map, m.accuracy);
            by_strategy.entry(strategy.as_str()).or_default().push(m.auc);
        }
    }
    for (s, aucs) in by_strategy {
        println!("{s:<13} median auc={:.4}", median(aucs));
    }
    Ok(())
}
