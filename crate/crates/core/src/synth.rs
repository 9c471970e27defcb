//! Synthetic paired cohorts with planted latent structure.
//!
//! Every patient carries four groups of latent factors: disease-relevant
//! shared (`u_rs`), disease-relevant modality-specific (`u_ru_s`, `u_ru_t`),
//! irrelevant shared (`e_is`) and irrelevant modality-specific (`e_iu_s`,
//! `e_iu_t`). Slides see `[u_rs; u_ru_s; e_is; e_iu_s]` through a fixed random
//! linear map on their tumor patches; expression sees
//! `[u_rs; u_ru_t; e_is; e_iu_t]` on the informative genes. Subtype shifts the
//! mean of `u_rs` and survival depends on all relevant factors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::Engine;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairedSample, PatchFeatureBag, SurvivalLabel, TranscriptomicsProfile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance between class means of `u_rs`, in standard deviations.
pub const CLASS_SEPARATION: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d_p: usize,
    pub k_genes: usize,
    pub d_rs: usize,
    pub d_ru: usize,
    pub d_is: usize,
    pub d_iu: usize,
    pub n_informative_genes: usize,
    pub tumor_patch_fraction: f64,
    pub patches_min: usize,
    pub patches_max: usize,
    pub censor_fraction: f64,
    /// Std of the additive noise on tumor patches.
    pub slide_noise: f64,
    /// Std of the additive noise on informative genes.
    pub rna_noise: f64,
    /// Std of the log-time noise.
    pub survival_noise: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            n_classes: 2,
            d_p: 64,
            k_genes: 256,
            d_rs: 8,
            d_ru: 4,
            d_is: 4,
            d_iu: 4,
            n_informative_genes: 32,
            tumor_patch_fraction: 0.3,
            patches_min: 64,
            patches_max: 196,
            censor_fraction: 0.3,
            slide_noise: 2.0,
            rna_noise: 0.5,
            survival_noise: 0.15,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_samples == 0 {
            return fail("n_samples must be at least 1");
        }
        if self.n_classes < 1 || self.n_classes > self.d_rs.max(1) {
            return fail("n_classes must be in [1, d_rs]");
        }
        if self.d_p == 0 || self.k_genes == 0 || self.d_rs == 0 {
            return fail("d_p, k_genes and d_rs must be positive");
        }
        if self.n_informative_genes == 0 || self.n_informative_genes > self.k_genes {
            return fail("n_informative_genes must be in [1, k_genes]");
        }
        if !(self.tumor_patch_fraction > 0.0 && self.tumor_patch_fraction <= 1.0) {
            return fail("tumor_patch_fraction must be in (0, 1]");
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return fail("need 1 <= patches_min <= patches_max");
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return fail("censor_fraction must be in [0, 1)");
        }
        if self.slide_noise < 0.0 || self.rna_noise < 0.0 || self.survival_noise < 0.0 {
            return fail("noise levels must be non-negative");
        }
        Ok(())
    }

    fn slide_latent_dim(&self) -> usize {
        self.d_rs + self.d_ru + self.d_is + self.d_iu
    }
}

/// Planted factors of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub u_rs: Vec<f64>,
    pub u_ru_s: Vec<f64>,
    pub u_ru_t: Vec<f64>,
    pub e_is: Vec<f64>,
    pub e_iu_s: Vec<f64>,
    pub e_iu_t: Vec<f64>,
}

impl LatentFactors {
    fn slide_view(&self) -> Vec<f64> {
        [&self.u_rs, &self.u_ru_s, &self.e_is, &self.e_iu_s].iter().flat_map(|v| v.iter().copied()).collect()
    }

    fn rna_view(&self) -> Vec<f64> {
        [&self.u_rs, &self.u_ru_t, &self.e_is, &self.e_iu_t].iter().flat_map(|v| v.iter().copied()).collect()
    }

    fn relevant(&self) -> Vec<f64> {
        [&self.u_rs, &self.u_ru_s, &self.u_ru_t].iter().flat_map(|v| v.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGroundTruth {
    pub factors: Vec<LatentFactors>,
    pub tumor_masks: Vec<Vec<bool>>,
    pub informative_gene_indices: Vec<usize>,
    /// Noise-free log-time predictor `w · [u_rs; u_ru_s; u_ru_t]` per sample.
    pub survival_score: Vec<f64>,
}

/// Named factor blocks used as probe targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorBlock {
    SharedRelevant,
    SlideSpecific,
    RnaSpecific,
    Irrelevant,
}

impl FactorBlock {
    pub const ALL: [FactorBlock; 4] =
        [FactorBlock::SharedRelevant, FactorBlock::SlideSpecific, FactorBlock::RnaSpecific, FactorBlock::Irrelevant];

    pub fn name(self) -> &'static str {
        match self {
            FactorBlock::SharedRelevant => "shared_relevant",
            FactorBlock::SlideSpecific => "slide_specific",
            FactorBlock::RnaSpecific => "rna_specific",
            FactorBlock::Irrelevant => "irrelevant",
        }
    }
}

/// Stacks the requested factor block across samples, one row per sample.
pub fn probe_targets(gt: &SyntheticGroundTruth, which: FactorBlock) -> Tensor {
    let rows: Vec<Vec<f64>> = gt
        .factors
        .iter()
        .map(|f| match which {
            FactorBlock::SharedRelevant => f.u_rs.clone(),
            FactorBlock::SlideSpecific => f.u_ru_s.clone(),
            FactorBlock::RnaSpecific => f.u_ru_t.clone(),
            FactorBlock::Irrelevant => [&f.e_is, &f.e_iu_s, &f.e_iu_t].iter().flat_map(|v| v.iter().copied()).collect(),
        })
        .collect();
    Tensor::from_rows(&rows)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>())
}

fn apply(a: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|r| a.row(r).iter().zip(x).map(|(w, v)| w * v).sum()).collect()
}

/// Per-sample seed.
fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64)
}

/// Generates a paired cohort together with its planted ground truth.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<(Dataset, SyntheticGroundTruth)> {
    cfg.validate()?;
    let mut crng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crng.set_stream(1);

    let ls = cfg.slide_latent_dim();
    let lt = cfg.d_rs + cfg.d_ru + cfg.d_is + cfg.d_iu;
    let a_s = gaussian_matrix(&mut crng, cfg.d_p, ls, 1.0 / (ls as f64).sqrt());
    let a_t = gaussian_matrix(&mut crng, cfg.n_informative_genes, lt, 1.0 / (lt as f64).sqrt());
    let mut informative = index::sample(&mut crng, cfg.k_genes, cfg.n_informative_genes).into_vec();
    informative.sort_unstable();
    let n_rel = cfg.d_rs + 2 * cfg.d_ru;
    let mut w = gaussian_vec(&mut crng, n_rel);
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= wn * 3.0);

    // class c shifts u_rs along axis c
    let offset = CLASS_SEPARATION / std::f64::consts::SQRT_2;
    let class_mean = |c: usize| -> Vec<f64> {
        let mut m = vec![0.0; cfg.d_rs];
        if cfg.n_classes > 1 {
            m[c] = offset;
        }
        m
    };
    // per-dimension second moment of the slide signal, for variance-matched background patches
    let mean_sq: Vec<f64> = (0..ls)
        .map(|j| {
            let cm = if j < cfg.d_rs && cfg.n_classes > 1 { offset * offset / cfg.n_classes as f64 } else { 0.0 };
            1.0 + cm
        })
        .collect();
    let background_std: Vec<f64> = (0..cfg.d_p)
        .map(|r| {
            let sig: f64 = a_s.row(r).iter().zip(&mean_sq).map(|(a, m)| a * a * m).sum();
            (sig + cfg.slide_noise * cfg.slide_noise).sqrt()
        })
        .collect();

    let gene_ids: Vec<String> = (0..cfg.k_genes).map(|g| format!("GENE{g:04}")).collect();
    let mut is_informative = vec![None; cfg.k_genes];
    for (row, &g) in informative.iter().enumerate() {
        is_informative[g] = Some(row);
    }

    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut factors = Vec::with_capacity(cfg.n_samples);
    let mut masks = Vec::with_capacity(cfg.n_samples);
    let mut scores = Vec::with_capacity(cfg.n_samples);
    let mut raw_expr: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
        let class = rng.random_range(0..cfg.n_classes);
        let mut u_rs = gaussian_vec(&mut rng, cfg.d_rs);
        for (u, m) in u_rs.iter_mut().zip(class_mean(class)) {
            *u += m;
        }
        let f = LatentFactors {
            u_rs,
            u_ru_s: gaussian_vec(&mut rng, cfg.d_ru),
            u_ru_t: gaussian_vec(&mut rng, cfg.d_ru),
            e_is: gaussian_vec(&mut rng, cfg.d_is),
            e_iu_s: gaussian_vec(&mut rng, cfg.d_iu),
            e_iu_t: gaussian_vec(&mut rng, cfg.d_iu),
        };

        // slide: a square-ish grid with a compact tumor region around a random center
        let n = rng.random_range(cfg.patches_min..=cfg.patches_max);
        let side = (n as f64).sqrt().ceil() as usize;
        let coords: Vec<(i32, i32)> = (0..n).map(|p| ((p / side) as i32, (p % side) as i32)).collect();
        let n_tumor = ((cfg.tumor_patch_fraction * n as f64).round() as usize).clamp(1, n);
        let center = coords[rng.random_range(0..n)];
        let mut order: Vec<usize> = (0..n).collect();
        let dist = |p: usize| {
            let (r, c) = coords[p];
            let (dr, dc) = ((r - center.0) as i64, (c - center.1) as i64);
            (dr * dr + dc * dc, p)
        };
        order.sort_by_key(|&p| dist(p));
        let mut mask = vec![false; n];
        for &p in &order[..n_tumor] {
            mask[p] = true;
        }
        let signal = apply(&a_s, &f.slide_view());
        let mut features = Vec::with_capacity(n * cfg.d_p);
        for &tumor in &mask {
            for d in 0..cfg.d_p {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = if tumor { signal[d] + cfg.slide_noise * z } else { background_std[d] * z };
                features.push(v as f32);
            }
        }

        // expression before per-gene standardization
        let rna_signal = apply(&a_t, &f.rna_view());
        let expr: Vec<f64> = (0..cfg.k_genes)
            .map(|g| {
                let z: f64 = StandardNormal.sample(&mut rng);
                match is_informative[g] {
                    Some(row) => rna_signal[row] + cfg.rna_noise * z,
                    None => z,
                }
            })
            .collect();

        let score: f64 = w.iter().zip(f.relevant()).map(|(a, b)| a * b).sum();
        let eps: f64 = StandardNormal.sample(&mut rng);
        let mut time = (score + cfg.survival_noise * eps).exp();
        let censored = rng.random::<f64>() < cfg.censor_fraction;
        if censored {
            time *= 1.0 - rng.random::<f64>();
        }
        let id = format!("S{i:05}");
        samples.push(PairedSample {
            bag: PatchFeatureBag { slide_id: id.clone(), d_p: cfg.d_p, features, coords },
            rna: TranscriptomicsProfile { sample_id: id, gene_ids: gene_ids.clone(), values: Vec::new() },
            subtype: class,
            survival: SurvivalLabel { time, event: !censored },
        });
        raw_expr.push(expr);
        factors.push(f);
        masks.push(mask);
        scores.push(score);
    }

    // z-score every gene across the cohort
    let n = cfg.n_samples as f64;
    for g in 0..cfg.k_genes {
        let mean = raw_expr.iter().map(|e| e[g]).sum::<f64>() / n;
        let var = raw_expr.iter().map(|e| (e[g] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        for e in &mut raw_expr {
            e[g] = (e[g] - mean) / sd;
        }
    }
    for (s, e) in samples.iter_mut().zip(raw_expr) {
        s.rna.values = e.into_iter().map(|v| v as f32).collect();
    }

    let metadata = BTreeMap::from([
        ("generator".to_string(), "synthetic".to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("config".to_string(), serde_json::to_string(cfg)?),
    ]);
    let ds = Dataset { samples, n_classes: cfg.n_classes, d_p: cfg.d_p, k_genes: cfg.k_genes, metadata };
    let gt = SyntheticGroundTruth {
        factors,
        tumor_masks: masks,
        informative_gene_indices: informative,
        survival_score: scores,
    };
    Ok((ds, gt))
}

#[derive(Serialize, Deserialize)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    /// Little-endian f32, base64.
    data: String,
}

fn encode_matrix(t: &Tensor) -> EncodedMatrix {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    EncodedMatrix { rows: t.rows(), cols: t.cols(), data: base64::engine::general_purpose::STANDARD.encode(bytes) }
}

fn decode_matrix(m: &EncodedMatrix) -> Result<Tensor> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&m.data)
        .map_err(|e| Error::Validation(format!("ground truth base64: {e}")))?;
    if bytes.len() != m.rows * m.cols * 4 {
        return Err(Error::DimensionMismatch {
            context: "ground truth matrix".into(),
            expected: m.rows * m.cols * 4,
            found: bytes.len(),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Tensor::from_vec(m.rows, m.cols, data))
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    version: u32,
    n_samples: usize,
    blocks: BTreeMap<String, EncodedMatrix>,
    tumor_masks: Vec<String>,
    informative_gene_indices: Vec<usize>,
    survival_score: EncodedMatrix,
}

fn block_tensor(gt: &SyntheticGroundTruth, pick: impl Fn(&LatentFactors) -> &Vec<f64>) -> Tensor {
    Tensor::from_rows(&gt.factors.iter().map(|f| pick(f).clone()).collect::<Vec<_>>())
}

/// Writes `ground_truth.json`; factor matrices are float32, base64 embedded.
/// Tumor masks are strings of `0`/`1`, one per sample.
pub fn write_ground_truth(gt: &SyntheticGroundTruth, path: &Path) -> Result<()> {
    let mut blocks = BTreeMap::new();
    blocks.insert("u_rs".into(), encode_matrix(&block_tensor(gt, |f| &f.u_rs)));
    blocks.insert("u_ru_s".into(), encode_matrix(&block_tensor(gt, |f| &f.u_ru_s)));
    blocks.insert("u_ru_t".into(), encode_matrix(&block_tensor(gt, |f| &f.u_ru_t)));
    blocks.insert("e_is".into(), encode_matrix(&block_tensor(gt, |f| &f.e_is)));
    blocks.insert("e_iu_s".into(), encode_matrix(&block_tensor(gt, |f| &f.e_iu_s)));
    blocks.insert("e_iu_t".into(), encode_matrix(&block_tensor(gt, |f| &f.e_iu_t)));
    let file = GroundTruthFile {
        version: 1,
        n_samples: gt.factors.len(),
        blocks,
        tumor_masks: gt
            .tumor_masks
            .iter()
            .map(|m| m.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect(),
        informative_gene_indices: gt.informative_gene_indices.clone(),
        survival_score: encode_matrix(&Tensor::row_vector(gt.survival_score.clone())),
    };
    fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
}

/// Reads a ground truth file. Factor values come back rounded to float32.
pub fn read_ground_truth(path: &Path) -> Result<SyntheticGroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: GroundTruthFile = serde_json::from_str(&text)?;
    let get = |name: &str| -> Result<Tensor> {
        let m = file.blocks.get(name).ok_or_else(|| Error::Validation(format!("ground truth lacks `{name}`")))?;
        let t = decode_matrix(m)?;
        if t.rows() != file.n_samples {
            return Err(Error::DimensionMismatch { context: name.into(), expected: file.n_samples, found: t.rows() });
        }
        Ok(t)
    };
    let (urs, urus, urut, eis, eius, eiut) =
        (get("u_rs")?, get("u_ru_s")?, get("u_ru_t")?, get("e_is")?, get("e_iu_s")?, get("e_iu_t")?);
    let factors = (0..file.n_samples)
        .map(|i| LatentFactors {
            u_rs: urs.row(i).to_vec(),
            u_ru_s: urus.row(i).to_vec(),
            u_ru_t: urut.row(i).to_vec(),
            e_is: eis.row(i).to_vec(),
            e_iu_s: eius.row(i).to_vec(),
            e_iu_t: eiut.row(i).to_vec(),
        })
        .collect();
    Ok(SyntheticGroundTruth {
        factors,
        tumor_masks: file.tumor_masks.iter().map(|s| s.chars().map(|c| c == '1').collect()).collect(),
        informative_gene_indices: file.informative_gene_indices,
        survival_score: decode_matrix(&file.survival_score)?.into_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{adjusted_r2, least_squares_r2, ridge_fit_predict};

    fn small() -> CohortConfig {
        CohortConfig { n_samples: 64, patches_min: 16, patches_max: 30, ..CohortConfig::default() }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = CohortConfig { seed: 7, ..small() };
        let (a, ga) = generate_cohort(&cfg).unwrap();
        let (b, gb) = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = generate_cohort(&CohortConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_tumor_fraction_marks_every_patch() {
        let cfg = CohortConfig { tumor_patch_fraction: 1.0, ..small() };
        let (_, gt) = generate_cohort(&cfg).unwrap();
        assert!(gt.tumor_masks.iter().all(|m| m.iter().all(|&b| b)));
    }

    #[test]
    fn output_satisfies_dataset_invariants() {
        let (ds, gt) = generate_cohort(&small()).unwrap();
        ds.validate().unwrap();
        assert_eq!(gt.informative_gene_indices.len(), 32);
        for (s, m) in ds.samples.iter().zip(&gt.tumor_masks) {
            assert_eq!(s.bag.n_patches(), m.len());
            assert!((16..=30).contains(&m.len()));
        }
    }

    #[test]
    fn probe_target_blocks() {
        let (_, gt) = generate_cohort(&small()).unwrap();
        let rs = probe_targets(&gt, FactorBlock::SharedRelevant);
        assert_eq!(rs.shape(), (64, 8));
        assert_eq!(rs.row(3), &gt.factors[3].u_rs[..]);
        let irr = probe_targets(&gt, FactorBlock::Irrelevant);
        assert_eq!(irr.shape(), (64, 12));
        let f = &gt.factors[5];
        let want: Vec<f64> = f.e_is.iter().chain(&f.e_iu_s).chain(&f.e_iu_t).copied().collect();
        assert_eq!(irr.row(5), &want[..]);
        assert_eq!(probe_targets(&gt, FactorBlock::RnaSpecific).rows(), 64);
    }

    #[test]
    fn class_means_are_linearly_separable() {
        let cfg = CohortConfig { n_samples: 512, patches_min: 4, patches_max: 4, seed: 7, ..CohortConfig::default() };
        let (ds, gt) = generate_cohort(&cfg).unwrap();
        let x = probe_targets(&gt, FactorBlock::SharedRelevant);
        let y = Tensor::from_vec(512, 1, ds.labels().iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect());
        // closed-form least squares on the raw factors, then threshold at zero
        let pred = ridge_fit_predict(&x, &y, &x, 0.0);
        let correct = (0..512).filter(|&i| (pred.get(i, 0) > 0.0) == (y.get(i, 0) > 0.0)).count();
        assert!(correct as f64 / 512.0 >= 0.99, "accuracy {}", correct as f64 / 512.0);
    }

    #[test]
    fn modality_specific_factors_do_not_leak() {
        let cfg = CohortConfig { n_samples: 512, patches_min: 16, patches_max: 16, seed: 3, ..CohortConfig::default() };
        let (ds, gt) = generate_cohort(&cfg).unwrap();
        let slide_means = Tensor::from_rows(
            &ds.samples
                .iter()
                .map(|s| {
                    let t = s.bag.to_tensor();
                    (0..t.cols()).map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / t.rows() as f64).collect()
                })
                .collect::<Vec<_>>(),
        );
        let expr = ds.expression_matrix();
        let ru_t = probe_targets(&gt, FactorBlock::RnaSpecific);
        let ru_s = probe_targets(&gt, FactorBlock::SlideSpecific);
        // each specific factor regressed on the other modality's observations
        for j in 0..ru_t.cols() {
            let y: Vec<f64> = (0..512).map(|i| ru_t.get(i, j)).collect();
            let r2 = adjusted_r2(least_squares_r2(&slide_means, &y, true), 512, 64);
            assert!(r2 < 0.05, "u_ru_t[{j}] leaks into slides: adjusted R2={r2}");
        }
        // expression has 256 columns; restrict to informative genes to keep the
        // regression well-determined
        let inf = Tensor::from_rows(
            &(0..512).map(|i| gt.informative_gene_indices.iter().map(|&g| expr.get(i, g)).collect()).collect::<Vec<_>>(),
        );
        for j in 0..ru_s.cols() {
            let y: Vec<f64> = (0..512).map(|i| ru_s.get(i, j)).collect();
            let r2 = adjusted_r2(least_squares_r2(&inf, &y, true), 512, 32);
            assert!(r2 < 0.05, "u_ru_s[{j}] leaks into expression: adjusted R2={r2}");
        }
        // positive control: the same regression recovers the shared factor
        let y: Vec<f64> = (0..512).map(|i| gt.factors[i].u_rs[0]).collect();
        assert!(least_squares_r2(&inf, &y, true) > 0.5);
    }

    #[test]
    fn informative_genes_carry_the_latent_signal() {
        let cfg = CohortConfig { n_samples: 512, patches_min: 4, patches_max: 4, seed: 11, ..CohortConfig::default() };
        let (ds, gt) = generate_cohort(&cfg).unwrap();
        let expr = ds.expression_matrix();
        let latent = Tensor::from_rows(&gt.factors.iter().map(|f| f.rna_view()).collect::<Vec<_>>());
        for g in 0..cfg.k_genes {
            let y: Vec<f64> = (0..512).map(|i| expr.get(i, g)).collect();
            let r2 = least_squares_r2(&latent, &y, true);
            if gt.informative_gene_indices.contains(&g) {
                assert!(r2 >= 0.5, "informative gene {g}: R2={r2}");
            } else {
                let adj = adjusted_r2(r2, 512, latent.cols());
                assert!(adj <= 0.05, "noise gene {g}: adjusted R2={adj}");
            }
        }
    }

    fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
        let (mut conc, mut disc) = (0.0, 0.0);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let s = (a[i] - a[j]) * (b[i] - b[j]);
                if s > 0.0 {
                    conc += 1.0;
                } else if s < 0.0 {
                    disc += 1.0;
                }
            }
        }
        (conc - disc) / (conc + disc)
    }

    #[test]
    fn survival_follows_the_relevant_factors() {
        let cfg = CohortConfig { n_samples: 512, patches_min: 4, patches_max: 4, seed: 5, ..CohortConfig::default() };
        let (ds, gt) = generate_cohort(&cfg).unwrap();
        let (mut s, mut t) = (Vec::new(), Vec::new());
        for (smp, &score) in ds.samples.iter().zip(&gt.survival_score) {
            if smp.survival.event {
                s.push(score);
                t.push(smp.survival.time.ln());
            }
        }
        let tau = kendall_tau(&s, &t);
        assert!(tau >= 0.8, "tau {tau}");
        let censored = ds.samples.iter().filter(|s| !s.survival.event).count() as f64 / 512.0;
        assert!((censored - 0.3).abs() < 0.07);
    }

    #[test]
    fn ground_truth_file_round_trip() {
        let (_, gt) = generate_cohort(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ground_truth.json");
        write_ground_truth(&gt, &p).unwrap();
        let back = read_ground_truth(&p).unwrap();
        assert_eq!(back.tumor_masks, gt.tumor_masks);
        assert_eq!(back.informative_gene_indices, gt.informative_gene_indices);
        for (a, b) in back.factors.iter().zip(&gt.factors) {
            for (x, y) in a.u_ru_t.iter().zip(&b.u_ru_t) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_cohort(&CohortConfig { n_informative_genes: 300, ..small() }).is_err());
        assert!(generate_cohort(&CohortConfig { patches_min: 40, patches_max: 30, ..small() }).is_err());
        assert!(generate_cohort(&CohortConfig { tumor_patch_fraction: 0.0, ..small() }).is_err());
    }
}
