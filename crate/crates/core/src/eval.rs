//! Downstream evaluation on frozen representations: stratified folds, linear
//! and few-shot probes, discrete-time survival with the concordance index,
//! cross-modal retrieval and ground-truth subspace probes.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, fit_binary, lipschitz_bound, SolverConfig};
use crate::data::{Dataset, SurvivalLabel};
use crate::error::{Error, Result};
use crate::linalg::{r2_score, ridge_fit_predict, Standardizer};
use crate::model::eval_batch;
use crate::synth::{probe_targets, FactorBlock, SyntheticGroundTruth};
use crate::tensor::Tensor;
use crate::trainer::ModelState;

/// Regularization of every probe classifier, fixed so that comparisons
/// differ only in the representation.
pub const PROBE_REG: f64 = 1e-3;
/// Number of discrete survival bins (quartiles).
pub const SURVIVAL_BINS: usize = 4;
/// Ridge penalty of subspace probes on standardized features.
pub const SUBSPACE_RIDGE: f64 = 1.0;
const ENCODE_CHUNK: usize = 32;

// ---- folds ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    /// Fold index of every sample, in dataset order.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// `(train, test)` sample indices for one fold, both ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &f) in self.assignment.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Stratified by subtype, seeded.
pub fn make_folds(ds: &Dataset, folds: usize, seed: u64) -> Result<FoldPlan> {
    make_label_folds(&ds.labels(), folds, seed)
}

pub fn make_label_folds(labels: &[usize], folds: usize, seed: u64) -> Result<FoldPlan> {
    let assignment = classifier::stratified_folds(labels, folds, seed)?;
    Ok(FoldPlan { folds, assignment })
}

fn check_plan(plan: &FoldPlan, n: usize) -> Result<()> {
    if plan.len() != n {
        return Err(Error::DimensionMismatch { context: "fold plan".into(), expected: n, found: plan.len() });
    }
    if plan.assignment.iter().any(|&f| f >= plan.folds) {
        return Err(Error::Validation("fold index out of range".into()));
    }
    Ok(())
}

// ---- representations ----

/// Everything evaluation needs from the encoders, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEncoding {
    pub s_cls: Tensor,
    pub t_vec: Tensor,
    /// Unit-norm outputs of the alignment heads.
    pub s_align: Tensor,
    pub t_align: Tensor,
    /// Mean over each sample's patch tokens.
    pub s_tokens_mean: Tensor,
    /// Mean over each sample's gene-group tokens.
    pub t_tokens_mean: Tensor,
}

fn segment_means(tokens: &Tensor, per_sample: usize) -> Tensor {
    let b = tokens.rows() / per_sample;
    let mut out = Tensor::zeros(b, tokens.cols());
    for s in 0..b {
        let row = out.row_mut(s);
        for r in s * per_sample..(s + 1) * per_sample {
            for (o, v) in row.iter_mut().zip(tokens.row(r)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= per_sample as f64);
    }
    out
}

/// Evaluation-mode encoding of every sample with id-keyed bag seeds.
pub fn encode_dataset(state: &ModelState, ds: &Dataset) -> Result<DatasetEncoding> {
    let model = &state.model;
    let n_fixed = model.cfg.encoder.n_fixed;
    let groups = model.cfg.encoder.gene_groups;
    let mut parts: [Vec<Tensor>; 6] = Default::default();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(ENCODE_CHUNK) {
        let batch = eval_batch(ds, chunk, n_fixed)?;
        let enc = model.encode(&state.params, &batch);
        let (sa, ta) = model.align_embeddings(&state.params, &enc.s_cls, &enc.t_vec);
        parts[0].push(enc.s_cls);
        parts[1].push(enc.t_vec);
        parts[2].push(sa);
        parts[3].push(ta);
        parts[4].push(segment_means(&enc.s_tokens, n_fixed));
        parts[5].push(segment_means(&enc.t_tokens, groups));
    }
    let cat = |v: &Vec<Tensor>| Tensor::vcat(&v.iter().collect::<Vec<_>>());
    Ok(DatasetEncoding {
        s_cls: cat(&parts[0]),
        t_vec: cat(&parts[1]),
        s_align: cat(&parts[2]),
        t_align: cat(&parts[3]),
        s_tokens_mean: cat(&parts[4]),
        t_tokens_mean: cat(&parts[5]),
    })
}

/// `[s_cls, t_vec]` per sample, rows in dataset order.
pub fn embed_dataset(state: &ModelState, ds: &Dataset) -> Result<Tensor> {
    let enc = encode_dataset(state, ds)?;
    Ok(Tensor::hcat(&[&enc.s_cls, &enc.t_vec]))
}

// ---- classification probes ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: Vec<f64>,
    pub macro_f1: Vec<f64>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl ProbeResult {
    pub fn accuracy_mean_std(&self) -> (f64, f64) {
        mean_std(&self.accuracy)
    }

    pub fn f1_mean_std(&self) -> (f64, f64) {
        mean_std(&self.macro_f1)
    }
}

fn n_classes_of(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

/// Standardizes with training statistics, fits, and scores the test rows.
fn fit_and_score(emb: &Tensor, labels: &[usize], train: &[usize], test: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::DegenerateLabels("empty test fold".into()));
    }
    // solver summation order follows row content, not row position
    let mut train = train.to_vec();
    sort_by_content(emb, &mut train);
    let x_train = emb.select_rows(&train);
    let scaler = Standardizer::fit(&x_train);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = classifier::fit(&scaler.apply(&x_train), &y_train, n_classes, &SolverConfig { reg: PROBE_REG, ..Default::default() })?;
    if !model.converged {
        debug!("probe classifier stopped after {} iterations without converging", model.iterations);
    }
    let pred = model.predict(&scaler.apply(&emb.select_rows(test)));
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok((classifier::accuracy(&pred, &truth), classifier::macro_f1(&pred, &truth, n_classes)))
}

/// Per fold: L2-regularized logistic regression on the other folds,
/// accuracy and macro-F1 on the held-out fold.
pub fn linear_probe(emb: &Tensor, labels: &[usize], plan: &FoldPlan) -> Result<ProbeResult> {
    check_plan(plan, emb.rows())?;
    if labels.len() != emb.rows() {
        return Err(Error::DimensionMismatch { context: "probe labels".into(), expected: emb.rows(), found: labels.len() });
    }
    let k = n_classes_of(labels);
    let mut out = ProbeResult { accuracy: Vec::new(), macro_f1: Vec::new() };
    for fold in 0..plan.folds {
        let (train, test) = plan.split(fold);
        let (acc, f1) = fit_and_score(emb, labels, &train, &test, k)?;
        out.accuracy.push(acc);
        out.macro_f1.push(f1);
    }
    Ok(out)
}

/// Orders row indices by the lexicographic content of their rows, so a draw
/// depends on which embeddings are present rather than where they sit.
fn sort_by_content(emb: &Tensor, idx: &mut [usize]) {
    idx.sort_by(|&a, &b| {
        emb.row(a)
            .iter()
            .zip(emb.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

/// Like [`linear_probe`] but each fold trains on `shots` seeded examples
/// per class drawn from its training folds.
pub fn few_shot_probe(emb: &Tensor, labels: &[usize], plan: &FoldPlan, shots: usize, seed: u64) -> Result<ProbeResult> {
    check_plan(plan, emb.rows())?;
    if labels.len() != emb.rows() {
        return Err(Error::DimensionMismatch { context: "probe labels".into(), expected: emb.rows(), found: labels.len() });
    }
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let k = n_classes_of(labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ProbeResult { accuracy: Vec::new(), macro_f1: Vec::new() };
    for fold in 0..plan.folds {
        let (train, test) = plan.split(fold);
        let mut chosen = Vec::with_capacity(shots * k);
        for c in 0..k {
            let mut members: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < shots {
                return Err(Error::DegenerateLabels(format!(
                    "class {c} has {} training samples in fold {fold}, fewer than {shots} shots",
                    members.len()
                )));
            }
            sort_by_content(emb, &mut members);
            members.shuffle(&mut rng);
            chosen.extend_from_slice(&members[..shots]);
        }
        let (acc, f1) = fit_and_score(emb, labels, &chosen, &test, k)?;
        out.accuracy.push(acc);
        out.macro_f1.push(f1);
    }
    Ok(out)
}

// ---- survival ----

/// Concordance over pairs `(i, j)` with `t_i < t_j` and an event at `i`:
/// full credit when `risk_i > risk_j`, half credit for tied risks.
pub fn c_index(times: &[f64], events: &[bool], risks: &[f64]) -> Result<f64> {
    if times.len() != events.len() || times.len() != risks.len() {
        return Err(Error::DimensionMismatch { context: "c-index inputs".into(), expected: times.len(), found: risks.len() });
    }
    // sort by time; for each event, compare with everything strictly later
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut pairs, mut credit) = (0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && times[order[end]] == times[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if !events[i] {
                continue;
            }
            for &j in &order[end..] {
                pairs += 1;
                credit += match risks[i].partial_cmp(&risks[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
        start = end;
    }
    if pairs == 0 {
        return Err(Error::DegenerateLabels("no comparable pairs".into()));
    }
    // integer half-credits keep the result independent of summation order
    Ok(credit as f64 / (2 * pairs) as f64)
}

/// Linear-interpolation quantile (the "type 7" rule) of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interior bin edges: quartiles of the given (uncensored) times.
pub fn quartile_edges(times: &[f64]) -> Vec<f64> {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..SURVIVAL_BINS).map(|q| quantile_sorted(&sorted, q as f64 / SURVIVAL_BINS as f64)).collect()
}

/// Bin of a time: the number of edges strictly below it.
pub fn time_bin(edges: &[f64], t: f64) -> usize {
    edges.iter().filter(|&&e| e < t).count()
}

/// Linear discrete-time hazard model: per-bin logits `x·w_k + b_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardModel {
    /// `bins × features`
    pub weights: Tensor,
    pub biases: Vec<f64>,
    pub edges: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl HazardModel {
    /// Per-bin hazards, `n × bins`.
    pub fn hazards(&self, x: &Tensor) -> Tensor {
        let mut out = x.matmul(&self.weights.transpose());
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.biases) {
                *v = sigmoid(*v + b);
            }
        }
        out
    }

    /// Negative expected survival: minus the sum of survival probabilities
    /// at the end of each bin.
    pub fn risk(&self, x: &Tensor) -> Vec<f64> {
        let h = self.hazards(x);
        (0..h.rows())
            .map(|r| {
                let mut s = 1.0;
                let mut total = 0.0;
                for &hk in h.row(r) {
                    s *= 1.0 - hk;
                    total += s;
                }
                -total
            })
            .collect()
    }
}

/// Fits the hazard model by minimizing the censoring-aware negative
/// log-likelihood plus `reg/2·‖W‖²`.
///
/// The likelihood separates over bins: bin `k` is a logistic regression
/// over the samples that reach it, with target 1 exactly for events in `k`.
/// Each is solved with the deterministic accelerated solver of the
/// classifier, rescaling the penalty so the objective stays the mean over
/// all samples.
pub fn fit_hazard(x: &Tensor, labels: &[SurvivalLabel], edges: &[f64], reg: f64) -> HazardModel {
    let n = x.rows();
    let bins = edges.len() + 1;
    let bin_of: Vec<usize> = labels.iter().map(|l| time_bin(edges, l.time)).collect();
    let mut weights = Tensor::zeros(bins, x.cols());
    let mut biases = Vec::with_capacity(bins);
    for k in 0..bins {
        let rows: Vec<usize> = (0..n).filter(|&i| bin_of[i] >= k).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|&i| if bin_of[i] == k && labels[i].event { 1.0 } else { -1.0 })
            .collect();
        let positives = y.iter().filter(|&&v| v > 0.0).count();
        if rows.is_empty() || positives == 0 || positives == rows.len() {
            // no contrast in this bin: constant hazard at the clipped empirical rate
            let p = if rows.is_empty() { 0.5 } else { (positives as f64 / rows.len() as f64).clamp(1e-6, 1.0 - 1e-6) };
            biases.push((p / (1.0 - p)).ln());
            continue;
        }
        let xk = x.select_rows(&rows);
        let cfg = SolverConfig { reg: reg * n as f64 / rows.len() as f64, max_iter: 2000, tol: 1e-6 };
        let (w, b, _, _) = fit_binary(&xk, &y, &cfg, lipschitz_bound(&xk));
        weights.row_mut(k).copy_from_slice(&w);
        biases.push(b);
    }
    HazardModel { weights, biases, edges: edges.to_vec() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalResult {
    pub c_index: Vec<f64>,
    /// Interior bin edges of every fold.
    pub bin_edges: Vec<Vec<f64>>,
}

impl SurvivalResult {
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.c_index)
    }
}

/// Per fold: quartile bins from uncensored training times, hazard model on
/// standardized training embeddings, C-index of its risk on the held-out fold.
pub fn survival_fit_eval(emb: &Tensor, labels: &[SurvivalLabel], plan: &FoldPlan) -> Result<SurvivalResult> {
    check_plan(plan, emb.rows())?;
    if labels.len() != emb.rows() {
        return Err(Error::DimensionMismatch { context: "survival labels".into(), expected: emb.rows(), found: labels.len() });
    }
    let mut out = SurvivalResult { c_index: Vec::new(), bin_edges: Vec::new() };
    for fold in 0..plan.folds {
        let (train, test) = plan.split(fold);
        let uncensored: Vec<f64> = train.iter().filter(|&&i| labels[i].event).map(|&i| labels[i].time).collect();
        if uncensored.len() < 2 {
            return Err(Error::DegenerateLabels(format!("fold {fold} has fewer than two uncensored training samples")));
        }
        if test.iter().all(|&i| !labels[i].event) {
            return Err(Error::DegenerateLabels(format!("held-out fold {fold} is entirely censored")));
        }
        let edges = quartile_edges(&uncensored);
        let x_train = emb.select_rows(&train);
        let scaler = Standardizer::fit(&x_train);
        let train_labels: Vec<SurvivalLabel> = train.iter().map(|&i| labels[i]).collect();
        let model = fit_hazard(&scaler.apply(&x_train), &train_labels, &edges, PROBE_REG);
        let risk = model.risk(&scaler.apply(&emb.select_rows(&test)));
        let times: Vec<f64> = test.iter().map(|&i| labels[i].time).collect();
        let events: Vec<bool> = test.iter().map(|&i| labels[i].event).collect();
        out.c_index.push(c_index(&times, &events, &risk)?);
        out.bin_edges.push(edges);
    }
    Ok(out)
}

// ---- alignment geometry and retrieval ----

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Recall@1 of slide→RNA retrieval inside seeded batches of `batch_size`.
///
/// Samples are shuffled and cut into full batches (a trailing partial batch
/// is dropped unless it is the only one). A sample counts as retrieved when
/// its own pair is strictly the most similar RNA embedding in its batch.
pub fn recall_at_1(s: &Tensor, t: &Tensor, batch_size: usize, seed: u64) -> f64 {
    assert_eq!(s.shape(), t.shape());
    if batch_size <= 1 {
        info!("retrieval with batch size {batch_size} is trivially exact");
        return 1.0;
    }
    let mut order: Vec<usize> = (0..s.rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for batch in batches {
        for &i in batch {
            let own = cosine(s.row(i), t.row(i));
            if batch.iter().all(|&j| j == i || cosine(s.row(i), t.row(j)) < own) {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return 1.0;
    }
    hits as f64 / total as f64
}

pub fn retrieval_recall(state: &ModelState, ds: &Dataset, batch_size: usize, seed: u64) -> Result<f64> {
    let enc = encode_dataset(state, ds)?;
    Ok(recall_at_1(&enc.s_align, &enc.t_align, batch_size, seed))
}

/// Mean cosine of matched and of mismatched slide/RNA pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCosines {
    pub positive: f64,
    pub negative: f64,
    pub negative_abs: f64,
}

impl PairCosines {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

pub fn pair_cosines(s: &Tensor, t: &Tensor) -> PairCosines {
    assert_eq!(s.shape(), t.shape());
    let n = s.rows();
    let (mut pos, mut neg, mut neg_abs) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = cosine(s.row(i), t.row(j));
            if i == j {
                pos += c;
            } else {
                neg += c;
                neg_abs += c.abs();
            }
        }
    }
    let off = (n * n.saturating_sub(1)).max(1) as f64;
    PairCosines { positive: pos / n.max(1) as f64, negative: neg / off, negative_abs: neg_abs / off }
}

// ---- subspace probes ----

/// Held-out R² of ridge regression from `x` to `y`: every fold is predicted
/// by a model fitted on the other folds (features standardized with
/// training statistics), then R² is computed over the pooled predictions.
pub fn cv_r2(x: &Tensor, y: &Tensor, plan: &FoldPlan, lambda: f64) -> Result<f64> {
    check_plan(plan, x.rows())?;
    if y.rows() != x.rows() {
        return Err(Error::DimensionMismatch { context: "probe targets".into(), expected: x.rows(), found: y.rows() });
    }
    let mut pred = Tensor::zeros(y.rows(), y.cols());
    for fold in 0..plan.folds {
        let (train, test) = plan.split(fold);
        if train.len() < 2 || test.is_empty() {
            return Err(Error::DegenerateLabels(format!("fold {fold} is too small for regression")));
        }
        let xt = x.select_rows(&train);
        let scaler = Standardizer::fit(&xt);
        let p = ridge_fit_predict(&scaler.apply(&xt), &y.select_rows(&train), &scaler.apply(&x.select_rows(&test)), lambda);
        for (r, &i) in test.iter().enumerate() {
            pred.row_mut(i).copy_from_slice(p.row(r));
        }
    }
    Ok(r2_score(y, &pred))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// `[S_align, T_align]`
    Aligned,
    /// `[s_cls, t_vec]`
    Encoder,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::Aligned => "aligned",
            Representation::Encoder => "encoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceEntry {
    pub block: String,
    pub representation: Representation,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceReport {
    pub entries: Vec<SubspaceEntry>,
}

impl SubspaceReport {
    pub fn get(&self, block: FactorBlock, representation: Representation) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.block == block.name() && e.representation == representation)
            .map(|e| e.r2)
    }
}

/// Held-out R² of every ground-truth factor block from both representations.
pub fn subspace_probe_encoded(enc: &DatasetEncoding, gt: &SyntheticGroundTruth, plan: &FoldPlan) -> Result<SubspaceReport> {
    if gt.factors.len() != enc.s_cls.rows() {
        return Err(Error::DimensionMismatch {
            context: "ground truth".into(),
            expected: enc.s_cls.rows(),
            found: gt.factors.len(),
        });
    }
    let reps = [
        (Representation::Aligned, Tensor::hcat(&[&enc.s_align, &enc.t_align])),
        (Representation::Encoder, Tensor::hcat(&[&enc.s_cls, &enc.t_vec])),
    ];
    let mut entries = Vec::with_capacity(8);
    for block in FactorBlock::ALL {
        let y = probe_targets(gt, block);
        for (rep, x) in &reps {
            entries.push(SubspaceEntry { block: block.name().into(), representation: *rep, r2: cv_r2(x, &y, plan, SUBSPACE_RIDGE)? });
        }
    }
    Ok(SubspaceReport { entries })
}

pub fn subspace_probe(state: &ModelState, ds: &Dataset, gt: &SyntheticGroundTruth, plan: &FoldPlan) -> Result<SubspaceReport> {
    subspace_probe_encoded(&encode_dataset(state, ds)?, gt, plan)
}

/// Held-out R² of the modality-specific factors from their own modality's
/// token outputs: `(u_ru_s from slide tokens, u_ru_t from RNA tokens)`.
pub fn specific_factor_r2(enc: &DatasetEncoding, gt: &SyntheticGroundTruth, plan: &FoldPlan) -> Result<(f64, f64)> {
    let slide = cv_r2(&enc.s_tokens_mean, &probe_targets(gt, FactorBlock::SlideSpecific), plan, SUBSPACE_RIDGE)?;
    let rna = cv_r2(&enc.t_tokens_mean, &probe_targets(gt, FactorBlock::RnaSpecific), plan, SUBSPACE_RIDGE)?;
    Ok((slide, rna))
}

/// Copy of `ds` whose expression profiles are permuted across samples
/// (seeded), destroying slide/RNA correspondence while keeping both marginals.
pub fn shuffle_pairing(ds: &Dataset, seed: u64) -> Dataset {
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = ds.clone();
    for (dst, &src) in out.samples.iter_mut().zip(&perm) {
        dst.rna.values = ds.samples[src].rna.values.clone();
    }
    out
}

// ---- metric files ----

/// One line of `metrics.csv`; `fold` is a fold index, `mean` or `std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub setting: String,
    pub fold: String,
    pub metric: String,
    pub value: f64,
}

/// Per-fold rows followed by mean and std rows.
pub fn metric_rows(task: &str, setting: &str, metric: &str, per_fold: &[f64]) -> Vec<MetricRow> {
    let row = |fold: String, value: f64| MetricRow {
        task: task.into(),
        setting: setting.into(),
        fold,
        metric: metric.into(),
        value,
    };
    let mut rows: Vec<MetricRow> = per_fold.iter().enumerate().map(|(f, &v)| row(f.to_string(), v)).collect();
    let (m, s) = mean_std(per_fold);
    rows.push(row("mean".into(), m));
    rows.push(row("std".into(), s));
    rows
}

pub fn write_metrics_json(rows: &[MetricRow], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}
