use mirror_core::rna_select::{rfe, rfe_cv, RfeCvConfig, RfeStep};
use mirror_core::tensor::Tensor;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// 200 samples × 50 genes, labels from a noisy linear rule over 5 planted genes.
fn planted(seed: u64, label_noise: f64) -> (Tensor, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (200, 50);
    let x = Tensor::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect());
    let mut informative = index::sample(&mut rng, d, 5).into_vec();
    informative.sort_unstable();
    let weights: Vec<f64> = informative
        .iter()
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(1.0..2.0)
        })
        .collect();
    let y = (0..n)
        .map(|r| {
            let score: f64 = informative.iter().zip(&weights).map(|(&g, w)| w * x.get(r, g)).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            usize::from(score + label_noise * eps > 0.0)
        })
        .collect();
    (x, y, informative)
}

#[test]
fn rfe_recovers_planted_genes() {
    let hits = (0..20u64)
        .filter(|&seed| {
            let (x, y, informative) = planted(seed, 0.5);
            let trace = rfe(&x, &y, 5, RfeStep::Fixed(1), 1e-2).unwrap();
            trace.survivors == informative
        })
        .count();
    assert!(hits >= 19, "recovered {hits}/20");
}

#[test]
fn rfe_cv_scores_every_fold_and_is_deterministic() {
    let (x, y, informative) = planted(3, 0.0);
    let genes: Vec<String> = (0..50).map(|g| format!("G{g}")).collect();
    let cfg = RfeCvConfig { k_target: 5, folds: 5, step: RfeStep::Fixed(1), reg: 1e-3, seed: 9 };
    let (panel, trace) = rfe_cv(&x, &y, &genes, &cfg).unwrap();
    assert_eq!(trace.cv_scores.len(), 5);
    let best = trace.cv_scores.iter().map(|s| s.1).fold(0.0, f64::max);
    assert_eq!(best, 1.0);
    let expected: Vec<String> = informative.iter().map(|g| format!("G{g}")).collect();
    assert_eq!(panel.gene_ids(), expected.iter().map(String::as_str).collect::<Vec<_>>());
    let (again, _) = rfe_cv(&x, &y, &genes, &cfg).unwrap();
    assert_eq!(panel, again);
}
