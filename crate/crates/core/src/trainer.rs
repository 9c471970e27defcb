//! Seeded pretraining loop with Adam, the finite-difference gradient gate,
//! and binary checkpoints.

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::data::{Dataset, Reader};
use crate::error::{Error, Result};
use crate::model::{eval_batch, make_batch, Batch, Mirror, ModelConfig};
use crate::objectives::{total_loss, total_loss_with_targets, LossBreakdown, ObjectiveConfig, RetentionTargets, StepSeeds};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MIRC";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to single precision at init and after every step.
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub objective: ObjectiveConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Parameter-name prefixes to update; empty updates everything.
    pub train_only: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 2e-5,
            objective: ObjectiveConfig::default(),
            seed: 0,
            precision: Precision::F64,
            train_only: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        self.objective.validate()
    }
}

/// Parameters, optimizer moments and step counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Mirror,
    pub params: ParamStore,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: u64,
    pub precision: Precision,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.model.cfg == other.model.cfg
            && self.params == other.params
            && self.adam_m == other.adam_m
            && self.adam_v == other.adam_v
            && self.step == other.step
            && self.precision == other.precision
    }
}

fn round_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

impl ModelState {
    pub fn new(cfg: &ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        let (model, mut params) = Mirror::init(cfg, seed)?;
        if precision == Precision::F32 {
            round_f32(&mut params);
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Ok(Self { model, params, adam_m: zeros.clone(), adam_v: zeros, step: 0, precision })
    }

    /// Trainable mask in parameter order for the given name prefixes.
    pub fn frozen_mask(&self, train_only: &[String]) -> Vec<bool> {
        self.params
            .iter()
            .map(|(_, name, _)| !train_only.is_empty() && !train_only.iter().any(|p| name.starts_with(p.as_str())))
            .collect()
    }

    /// One Adam step on the parameters that received a gradient.
    pub fn apply_gradients(&mut self, grads: &mut Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let Some(g) = grads.take(id) else { continue };
            let i = id.index();
            let p = self.params.get_mut(id).data_mut();
            let m = self.adam_m[i].data_mut();
            let v = self.adam_v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
        self.renormalize_centers();
        if self.precision == Precision::F32 {
            round_f32(&mut self.params);
        }
    }

    /// Projects cluster-center rows back onto the unit sphere. Rows already
    /// at unit norm (to 1e-12) are left bit-identical.
    pub fn renormalize_centers(&mut self) {
        let c = self.params.get_mut(self.model.heads.style.centers);
        for r in 0..c.rows() {
            let row = c.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && (n - 1.0).abs() > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-step training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Trains a freshly initialized model (initialization seeded by `cfg.seed`).
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelState, Vec<LogRow>)> {
    let mut state = ModelState::new(model_cfg, cfg.seed, cfg.precision)?;
    let log = train_from(&mut state, ds, cfg)?;
    Ok((state, log))
}

/// Continues training `state` for `cfg.epochs` epochs.
pub fn train_from(state: &mut ModelState, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if ds.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "dataset has {} samples, fewer than batch_size {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let enc = &state.model.cfg.encoder;
    if ds.d_p != enc.d_p || ds.k_genes != enc.k_genes {
        return Err(Error::DimensionMismatch { context: "dataset vs model inputs".into(), expected: enc.d_p, found: ds.d_p });
    }
    let frozen = state.frozen_mask(&cfg.train_only);
    let n_fixed = enc.n_fixed;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64 + 1));
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let step_key = rng.next_u64();
            let batch = make_batch(ds, chunk, n_fixed, |i| mix(step_key, i as u64))?;
            let seeds = StepSeeds { mask: rng.next_u64(), noise: Some(rng.next_u64()) };
            let model = state.model.clone();
            let (loss, mut grads) = {
                let mut g = Graph::with_frozen(&state.params, &frozen);
                let (total, parts) = total_loss(&model, &mut g, &batch, &cfg.objective, seeds)?;
                if !parts.l_total.is_finite() {
                    return Err(Error::NonFiniteLoss { step: state.step as usize });
                }
                (parts, g.backward(total))
            };
            state.apply_gradients(&mut grads, cfg.learning_rate);
            if !state.params.all_finite() {
                return Err(Error::NonFiniteLoss { step: state.step as usize });
            }
            log.push(LogRow { step: state.step, epoch, loss });
        }
        if let Some(last) = log.last() {
            info!("epoch {epoch}: step {} total {:.5}", last.step, last.loss.l_total);
        }
    }
    Ok(log)
}

/// Mean of a loss component over the steps of each epoch.
pub fn epoch_means(log: &[LogRow], pick: impl Fn(&LossBreakdown) -> f64) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in log {
        sums[r.epoch].0 += pick(&r.loss);
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

pub fn write_train_log(log: &[LogRow], path: &Path) -> Result<()> {
    let mut text = String::from("step,l_align,l_retention,l_style,l_cluster,l_total\n");
    for r in log {
        let l = &r.loss;
        text.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, l.l_align, l.l_retention, l.l_style, l.l_cluster, l.l_total
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- gradient verification ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| !(t.max_rel_err <= self.tolerance))
    }
}

/// Gradients smaller than `GRAD_FLOOR · max(1, |loss|)` are compared on an
/// absolute scale. Central differences of a loss `L` carry roundoff of a
/// few `ε·|L|/h`, so exactly-zero gradients (e.g. attention key biases)
/// would otherwise report pure noise as relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` (one tensor per parameter, `None` meaning zero)
/// with central differences of `loss` on a seeded subsample of at least
/// `coords` entries per tensor (all entries for smaller tensors).
pub fn check_gradients(
    store: &ParamStore,
    analytic: &[Option<Tensor>],
    coords: usize,
    tolerance: f64,
    seed: u64,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = GRAD_FLOOR * loss(store).abs().max(1.0);
    let mut work = store.clone();
    let mut tensors = Vec::new();
    for (id, name, value) in store.iter() {
        let n = value.len();
        let picks = if n <= coords { (0..n).collect() } else { index::sample(&mut rng, n, coords).into_vec() };
        let mut worst: f64 = 0.0;
        for &k in &picks {
            let orig = value.data()[k];
            let h = 1e-5 * orig.abs().max(1.0);
            work.get_mut(id).data_mut()[k] = orig + h;
            let up = loss(&work);
            work.get_mut(id).data_mut()[k] = orig - h;
            let down = loss(&work);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
            worst = worst.max(relative_error(a, numeric, floor));
        }
        tensors.push(TensorCheck { name: name.to_owned(), checked: picks.len(), max_rel_err: worst });
    }
    let passed = tensors.iter().all(|t| t.max_rel_err <= tolerance);
    GradReport { tensors, tolerance, passed }
}

/// Gradient gate for the full objective on `batch` with fixed step seeds.
pub fn finite_diff_check(
    state: &ModelState,
    batch: &Batch,
    obj: &ObjectiveConfig,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport> {
    if state.precision != Precision::F64 {
        return Err(Error::Config("gradient check requires 64-bit precision".into()));
    }
    let seeds = StepSeeds { mask: mix(seed, 1), noise: Some(mix(seed, 2)) };
    let model = &state.model;
    let mut g = Graph::new(&state.params);
    let (total, _) = total_loss(model, &mut g, batch, obj, seeds)?;
    let mut grads = g.backward(total);
    let analytic: Vec<Option<Tensor>> = state.params.ids().map(|id| grads.take(id)).collect();
    drop(g);
    let base = model.encode(&state.params, batch);
    let pinned = RetentionTargets { s_tokens: base.s_tokens, t_tokens: base.t_tokens };
    // perturbed evaluations need values only, so nothing is tracked for backward
    let frozen = vec![true; state.params.len()];
    let eval = |store: &ParamStore| {
        let mut g = Graph::with_frozen(store, &frozen);
        let (total, _) =
            total_loss_with_targets(model, &mut g, batch, obj, seeds, Some(&pinned)).expect("validated above");
        g.scalar(total)
    };
    Ok(check_gradients(&state.params, &analytic, 20, tolerance, seed, eval))
}

/// Batch of the first `size` samples with evaluation bag seeds, for checks.
pub fn probe_batch(ds: &Dataset, state: &ModelState, size: usize) -> Result<Batch> {
    let idx: Vec<usize> = (0..size.min(ds.len())).collect();
    eval_batch(ds, &idx, state.model.cfg.encoder.n_fixed)
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    precision: Precision,
    step: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, 2);
    put_u32(buf, t.rows() as u32);
    put_u32(buf, t.cols() as u32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Layout: magic, version, header length + JSON header (model config,
/// precision, step), record count, then `(name length, name, rank, dims,
/// f64 data)` records for parameters and both Adam moments.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let header = serde_json::to_vec(&CheckpointHeader {
        model: state.model.cfg.clone(),
        precision: state.precision,
        step: state.step,
    })?;
    put_u32(&mut buf, header.len() as u32);
    buf.extend_from_slice(&header);
    put_u32(&mut buf, (3 * state.params.len()) as u32);
    for (id, name, t) in state.params.iter() {
        put_tensor(&mut buf, name, t);
        put_tensor(&mut buf, &format!("{M_PREFIX}{name}"), &state.adam_m[id.index()]);
        put_tensor(&mut buf, &format!("{V_PREFIX}{name}"), &state.adam_v[id.index()]);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptHeader { path: path.into(), reason: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::CorruptHeader { path: path.into(), reason: e.to_string() })?;
    let mut state = ModelState::new(&header.model, 0, Precision::F64)?;
    state.precision = header.precision;
    state.step = header.step;
    let count = r.u32()? as usize;
    let mut seen = vec![[false; 3]; state.params.len()];
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::CorruptHeader { path: path.into(), reason: "tensor name is not utf-8".into() })?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (slot, base) = if let Some(b) = name.strip_prefix(M_PREFIX) {
            (1, b)
        } else if let Some(b) = name.strip_prefix(V_PREFIX) {
            (2, b)
        } else {
            (0, name.as_str())
        };
        let id = state.params.id(base).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let expected = state.params.get(id).shape();
        let (rows, cols) = match dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::CorruptHeader { path: path.into(), reason: format!("tensor {name} has rank {rank}") }),
        };
        if (rows, cols) != expected {
            return Err(Error::DimensionMismatch { context: name, expected: expected.0 * expected.1, found: rows * cols });
        }
        let t = Tensor::from_vec(rows, cols, data);
        match slot {
            0 => *state.params.get_mut(id) = t,
            1 => state.adam_m[id.index()] = t,
            _ => state.adam_v[id.index()] = t,
        }
        seen[id.index()][slot] = true;
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptHeader { path: path.into(), reason: "trailing bytes".into() });
    }
    if let Some(i) = seen.iter().position(|s| s.iter().any(|&x| !x)) {
        let name = state.params.name(state.params.ids().nth(i).expect("index in range"));
        return Err(Error::Validation(format!("checkpoint is missing tensor {name}")));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::objectives::LossWeights;
    use crate::synth::{generate_cohort, CohortConfig};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { d_p: 8, k_genes: 24, d: 8, d_t: 8, heads: 2, depth: 1, gene_groups: 4, n_fixed: 6, use_ppeg: true },
            retention_depth: 1,
            d_z: 4,
            clusters: 3,
        }
    }

    pub(crate) fn tiny_cohort() -> Dataset {
        let cfg = CohortConfig {
            n_samples: 12,
            d_p: 8,
            k_genes: 24,
            n_informative_genes: 8,
            patches_min: 4,
            patches_max: 9,
            seed: 3,
            ..CohortConfig::default()
        };
        generate_cohort(&cfg).unwrap().0
    }

    fn tiny_train(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, learning_rate: lr, seed: 1, ..TrainConfig::default() }
    }

    #[test]
    fn quadratic_harness_is_exact() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]));
        store.add("b", Tensor::from_rows(&[vec![4.0], vec![-0.5]]));
        let loss = |s: &ParamStore| s.iter().map(|(_, _, t)| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>()).sum();
        let analytic: Vec<Option<Tensor>> = store.iter().map(|(_, _, t)| Some(t.clone())).collect();
        let report = check_gradients(&store, &analytic, 20, 1e-8, 0, loss);
        assert!(report.passed);
        assert!(report.max_rel_err() < 1e-8, "{}", report.max_rel_err());

        let doubled: Vec<Option<Tensor>> = analytic.iter().map(|t| t.as_ref().map(|t| t.map(|v| 2.0 * v))).collect();
        let bad = check_gradients(&store, &doubled, 20, 1e-4, 0, loss);
        assert!(!bad.passed);
        assert_eq!(bad.failures().count(), 2);
    }

    #[test]
    fn full_objective_gradients_match() {
        let ds = tiny_cohort();
        let state = ModelState::new(&tiny_model(), 5, Precision::F64).unwrap();
        let batch = probe_batch(&ds, &state, 4).unwrap();
        let report = finite_diff_check(&state, &batch, &ObjectiveConfig::default(), 1e-4, 7).unwrap();
        for t in report.failures() {
            eprintln!("{} {}", t.name, t.max_rel_err);
        }
        assert!(report.passed, "max rel err {}", report.max_rel_err());
        assert!(report.tensors.iter().any(|t| t.name == "style.centers"));
    }

    #[test]
    fn training_is_reproducible_and_lr_zero_is_identity() {
        let ds = tiny_cohort();
        let (a, log_a) = train(&ds, &tiny_model(), &tiny_train(2, 1e-3)).unwrap();
        let (b, log_b) = train(&ds, &tiny_model(), &tiny_train(2, 1e-3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 6);
        let c = a.model.heads.style.centers;
        for r in 0..a.params.get(c).rows() {
            let n = a.params.get(c).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }

        let init = ModelState::new(&tiny_model(), 1, Precision::F64).unwrap();
        let (frozen, _) = train(&ds, &tiny_model(), &tiny_train(1, 0.0)).unwrap();
        assert_eq!(frozen.params, init.params);
    }

    #[test]
    fn train_only_limits_updates() {
        let ds = tiny_cohort();
        let cfg = TrainConfig { train_only: vec!["retention.".into()], ..tiny_train(1, 1e-2) };
        let (state, _) = train(&ds, &tiny_model(), &cfg).unwrap();
        let init = ModelState::new(&tiny_model(), 1, Precision::F64).unwrap();
        for (id, name, t) in state.params.iter() {
            assert_eq!(t == init.params.get(id), !name.starts_with("retention."), "{name}");
        }
    }

    #[test]
    fn centers_stay_unit_norm_after_every_step() {
        let ds = tiny_cohort();
        let mut state = ModelState::new(&tiny_model(), 2, Precision::F64).unwrap();
        let c = state.model.heads.style.centers;
        // one step per call
        let cfg = TrainConfig { batch_size: ds.len(), ..tiny_train(1, 5e-2) };
        for _ in 0..6 {
            let before = state.params.get(c).clone();
            train_from(&mut state, &ds, &cfg).unwrap();
            assert_ne!(state.params.get(c), &before);
            for r in 0..before.rows() {
                let n = state.params.get(c).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9, "step {} center {r} norm {n}", state.step);
            }
        }
    }

    #[test]
    fn retention_heads_alone_learn_to_reconstruct() {
        // noiseless tumor-only bags make the masked tokens predictable
        let cohort = CohortConfig {
            n_samples: 12,
            d_p: 8,
            k_genes: 24,
            n_informative_genes: 8,
            patches_min: 4,
            patches_max: 9,
            tumor_patch_fraction: 1.0,
            slide_noise: 0.0,
            rna_noise: 0.0,
            seed: 3,
            ..CohortConfig::default()
        };
        let ds = generate_cohort(&cohort).unwrap().0;
        let objective = ObjectiveConfig { weights: LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0 }, ..ObjectiveConfig::default() };
        let cfg = TrainConfig { train_only: vec!["retention.".into()], objective, ..tiny_train(300, 1e-2) };
        let (_, log) = train(&ds, &tiny_model(), &cfg).unwrap();
        let means = epoch_means(&log, |l| l.l_retention);
        let ratio = means[means.len() - 1] / means[0];
        assert!(ratio < 0.1, "retention loss fell only to {ratio:.3} of its start");
    }

    #[test]
    fn f32_precision_keeps_single_precision_values() {
        let ds = tiny_cohort();
        let cfg = TrainConfig { precision: Precision::F32, ..tiny_train(1, 1e-3) };
        let (state, _) = train(&ds, &tiny_model(), &cfg).unwrap();
        for (_, _, t) in state.params.iter() {
            assert!(t.data().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = tiny_cohort();
        let (state, log) = train(&ds, &tiny_model(), &tiny_train(1, 1e-3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&state, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), state);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptHeader { .. })));

        let mut renamed = bytes.clone();
        let needle = b"slide.cls";
        let at = renamed.windows(needle.len()).position(|w| w == needle).unwrap();
        renamed[at..at + needle.len()].copy_from_slice(b"slide.xyz");
        std::fs::write(&p, &renamed).unwrap();
        match load_checkpoint(&p) {
            Err(Error::UnknownTensor(n)) => assert_eq!(n, "slide.xyz"),
            other => panic!("{other:?}"),
        }

        let mut versioned = bytes;
        versioned[4] = 9;
        std::fs::write(&p, &versioned).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Version { found: 9, .. })));

        let csv = dir.path().join("train_log.csv");
        write_train_log(&log, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().next(), Some("step,l_align,l_retention,l_style,l_cluster,l_total"));
        assert_eq!(text.lines().count(), log.len() + 1);
    }
}
