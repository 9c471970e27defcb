//! Alignment, retention and style-clustering objectives and their weighted sum.

use log::debug;
use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Batch, Mirror};
use crate::nn::{Linear, Mlp, Stack};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-8;
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Multiplies the cosine logits (an inverse temperature).
    pub tau: f64,
    /// Sharpness of the soft cluster assignment.
    pub kappa: f64,
    pub mask_ratio_slide: f64,
    pub mask_ratio_rna: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), tau: 10.0, kappa: 5.0, mask_ratio_slide: 0.25, mask_ratio_rna: 0.25 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0) || !(self.kappa > 0.0) {
            return Err(Error::Config("tau and kappa must be positive".into()));
        }
        for r in [self.mask_ratio_slide, self.mask_ratio_rna] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("mask ratio {r} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_align: f64,
    pub l_retention: f64,
    pub l_style: f64,
    pub l_cluster: f64,
    pub l_total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Assembles a breakdown whose total is the weighted sum of the parts.
    pub fn new(l_align: f64, l_retention: f64, l_style: f64, l_cluster: f64, weights: LossWeights) -> Self {
        let l_total = weights.alpha * l_align + weights.beta * l_retention + weights.gamma * (l_style + l_cluster);
        Self { l_align, l_retention, l_style, l_cluster, l_total, weights }
    }
}

#[derive(Clone, Debug)]
pub struct AlignmentHeads {
    pub slide: Mlp,
    pub rna: Mlp,
}

#[derive(Clone, Debug)]
pub struct RetentionBranch {
    pub mask_token: ParamId,
    /// Learned position embedding added to the corrupted sequence, when the
    /// token order carries meaning.
    pub position: Option<ParamId>,
    pub stack: Stack,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct RetentionHeads {
    pub slide: RetentionBranch,
    pub rna: RetentionBranch,
}

#[derive(Clone, Debug)]
pub struct StyleClusteringHead {
    pub slide: Linear,
    pub rna: Linear,
    /// `[C × d_z]`, rows kept on the unit sphere by the trainer.
    pub centers: ParamId,
    pub d_z: usize,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub align: AlignmentHeads,
    pub retention: RetentionHeads,
    pub style: StyleClusteringHead,
}

#[allow(clippy::too_many_arguments)]
impl Heads {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        d: usize,
        d_t: usize,
        gene_groups: usize,
        heads: usize,
        retention_depth: usize,
        d_z: usize,
        clusters: usize,
    ) -> Self {
        let align = AlignmentHeads {
            slide: Mlp::new(store, init, "align.slide", d, d, d),
            rna: Mlp::new(store, init, "align.rna", d, d, d),
        };
        let slide = RetentionBranch {
            mask_token: store.add("retention.slide.mask_token", init.gaussian(1, d, 0.02)),
            position: None,
            stack: Stack::new(store, init, "retention.slide", d, heads, retention_depth),
            out: Linear::new(store, init, "retention.slide.out", d, d),
        };
        let rna = RetentionBranch {
            mask_token: store.add("retention.rna.mask_token", init.gaussian(1, d_t, 0.02)),
            position: Some(store.add("retention.rna.position", init.gaussian(gene_groups, d_t, 0.02))),
            stack: Stack::new(store, init, "retention.rna", d_t, heads, retention_depth),
            out: Linear::new(store, init, "retention.rna.out", d_t, d_t),
        };
        let style = StyleClusteringHead {
            slide: Linear::new(store, init, "style.slide", d, 2 * d_z),
            rna: Linear::new(store, init, "style.rna", d, 2 * d_z),
            centers: store.add("style.centers", init.unit_rows(clusters, d_z)),
            d_z,
        };
        Self { align, retention: RetentionHeads { slide, rna }, style }
    }
}

// ---- graph builders ----

/// Symmetric InfoNCE over unit-norm rows with diagonal positives.
pub fn contrastive_graph(g: &mut Graph<'_>, s: Var, t: Var, tau: f64) -> Var {
    let b = g.value(s).rows();
    let targets: Vec<usize> = (0..b).collect();
    let st = g.matmul_nt(s, t);
    let st = g.scale(st, tau);
    let l1 = g.cross_entropy(st, &targets);
    let ts = g.matmul_nt(t, s);
    let ts = g.scale(ts, tau);
    let l2 = g.cross_entropy(ts, &targets);
    let both = g.add(l1, l2);
    g.scale(both, 0.5)
}

/// `0.5 · Σ_d (μ² + e^{logσ²} − logσ² − 1)` averaged over rows.
pub fn style_kl_graph(g: &mut Graph<'_>, mu: Var, logvar: Var) -> Var {
    let (rows, cols) = g.value(mu).shape();
    let mu2 = g.mul(mu, mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var);
    let a = g.sub(a, logvar);
    let s = g.sum(a);
    let ones = g.constant(Tensor::full(1, 1, (rows * cols) as f64));
    let s = g.sub(s, ones);
    g.scale(s, 0.5 / rows as f64)
}

pub fn cluster_assign_graph(g: &mut Graph<'_>, z: Var, centers: Var, kappa: f64) -> Var {
    let zn = g.l2_normalize_rows(z);
    let cn = g.l2_normalize_rows(centers);
    let cos = g.matmul_nt(zn, cn);
    let logits = g.scale(cos, kappa);
    g.softmax_rows(logits)
}

/// Batch mean of `KL(p‖q) + KL(q‖p) = Σ (p − q)(log p − log q)` with floored logs.
pub fn consistency_graph(g: &mut Graph<'_>, p: Var, q: Var) -> Var {
    let rows = g.value(p).rows();
    let lp = g.clamp(p, PROB_FLOOR, f64::INFINITY);
    let lp = g.ln(lp);
    let lq = g.clamp(q, PROB_FLOOR, f64::INFINITY);
    let lq = g.ln(lq);
    let dp = g.sub(p, q);
    let dl = g.sub(lp, lq);
    let prod = g.mul(dp, dl);
    let s = g.sum(prod);
    g.scale(s, 1.0 / rows as f64)
}

/// Reconstruction of masked tokens. `masks[b]` flags the masked positions of
/// sequence `b`; all sequences have length `seq_len`. Returns the MSE over
/// masked positions averaged per sequence then over the batch, and the
/// reconstructed sequence.
/// `target` defaults to a detached copy of `tokens`.
pub fn retention_graph(
    g: &mut Graph<'_>,
    branch: &RetentionBranch,
    tokens: Var,
    target: Option<&Tensor>,
    seq_len: usize,
    masks: &[Vec<bool>],
) -> (Var, Var) {
    let (rows, width) = g.value(tokens).shape();
    assert_eq!(rows, seq_len * masks.len());
    let target = target.cloned().unwrap_or_else(|| g.value(tokens).clone());
    assert_eq!(target.shape(), (rows, width));
    let mask_tok = g.param(branch.mask_token);
    let pool = g.concat_rows(&[tokens, mask_tok]);
    let idx: Vec<usize> = (0..rows).map(|r| if masks[r / seq_len][r % seq_len] { rows } else { r }).collect();
    let mut x = g.gather_rows(pool, &idx);
    if let Some(pos) = branch.position {
        let p = g.param(pos);
        let pos_idx: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
        let p = g.gather_rows(p, &pos_idx);
        x = g.add(x, p);
    }
    let x = branch.stack.forward(g, x, &vec![seq_len; masks.len()]);
    let recon = branch.out.forward(g, x);
    let tgt = g.constant(target);
    (masked_mse_graph(g, recon, tgt, seq_len, masks), recon)
}

/// Squared error over the masked rows of `recon`, averaged over masked
/// entries of each sequence and then over sequences. Sequences without
/// masked rows contribute 0.
pub fn masked_mse_graph(g: &mut Graph<'_>, recon: Var, target: Var, seq_len: usize, masks: &[Vec<bool>]) -> Var {
    let (rows, width) = g.value(recon).shape();
    assert_eq!(rows, seq_len * masks.len());
    assert_eq!(g.value(target).shape(), (rows, width));
    let masked_rows: Vec<usize> = (0..rows).filter(|&r| masks[r / seq_len][r % seq_len]).collect();
    if masked_rows.is_empty() {
        return g.constant(Tensor::zeros(1, 1));
    }
    let mut weights = Tensor::zeros(masked_rows.len(), width);
    let counts: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).collect();
    for (i, &r) in masked_rows.iter().enumerate() {
        let w = 1.0 / (counts[r / seq_len] * width * masks.len()) as f64;
        weights.row_mut(i).iter_mut().for_each(|v| *v = w);
    }
    let pred = g.gather_rows(recon, &masked_rows);
    let tgt = g.gather_rows(target, &masked_rows);
    let diff = g.sub(pred, tgt);
    let sq = g.mul(diff, diff);
    let wv = g.constant(weights);
    let weighted = g.mul(sq, wv);
    g.sum(weighted)
}

// ---- value-level operations ----

fn scalar_graph<F: FnOnce(&mut Graph<'_>) -> Var>(f: F) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = f(&mut g);
    g.scalar(v)
}

/// Retention loss of a reconstruction against its targets; see
/// [`masked_mse_graph`].
pub fn retention_loss(recon: &Tensor, target: &Tensor, seq_len: usize, masks: &[Vec<bool>]) -> Result<f64> {
    if recon.shape() != target.shape() || recon.rows() != seq_len * masks.len() {
        return Err(Error::Validation(format!(
            "reconstruction {:?} and target {:?} do not match {} sequences of length {seq_len}",
            recon.shape(),
            target.shape(),
            masks.len()
        )));
    }
    if masks.iter().any(|m| m.len() != seq_len) {
        return Err(Error::Validation("every mask needs one flag per token".into()));
    }
    Ok(scalar_graph(|g| {
        let r = g.constant(recon.clone());
        let t = g.constant(target.clone());
        masked_mse_graph(g, r, t, seq_len, masks)
    }))
}

/// Symmetric InfoNCE on already aligned (unit-norm) embeddings.
pub fn contrastive_loss(s_align: &Tensor, t_align: &Tensor, tau: f64) -> Result<f64> {
    if s_align.rows() < 2 {
        return Err(Error::Validation("contrastive loss needs a batch of at least 2".into()));
    }
    if s_align.shape() != t_align.shape() {
        return Err(Error::DimensionMismatch { context: "aligned batch".into(), expected: s_align.rows(), found: t_align.rows() });
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    Ok(scalar_graph(|g| {
        let s = g.constant(s_align.clone());
        let t = g.constant(t_align.clone());
        contrastive_graph(g, s, t, tau)
    }))
}

/// Applies the alignment heads to `(S_cls, T)` and evaluates the contrastive loss.
pub fn alignment_loss(model: &Mirror, store: &ParamStore, s_cls: &Tensor, t_vec: &Tensor, tau: f64) -> Result<f64> {
    let (sa, ta) = model.align_embeddings(store, s_cls, t_vec);
    contrastive_loss(&sa, &ta, tau)
}

/// Exactly `max(1, round(ratio·n))` uniformly chosen masked positions.
pub fn mask_select(n_tokens: usize, ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if n_tokens < 2 {
        return Err(Error::Validation(format!("cannot mask a sequence of {n_tokens} tokens")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = ((ratio * n_tokens as f64).round() as usize).clamp(1, n_tokens - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n_tokens];
    for i in index::sample(&mut rng, n_tokens, count) {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn style_kl(mu: &Tensor, logvar: &Tensor) -> f64 {
    assert_eq!(mu.shape(), logvar.shape());
    scalar_graph(|g| {
        let m = g.constant(mu.clone());
        let l = g.constant(logvar.clone());
        style_kl_graph(g, m, l)
    })
}

pub fn cluster_assign(z: &Tensor, centers: &Tensor, kappa: f64) -> Tensor {
    for r in 0..z.rows() {
        if z.row(r).iter().all(|&v| v == 0.0) {
            debug!("zero-norm latent row {r}; assignment is uniform");
        }
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zv = g.constant(z.clone());
    let cv = g.constant(centers.clone());
    let p = cluster_assign_graph(&mut g, zv, cv, kappa);
    g.value(p).clone()
}

pub fn cluster_consistency_loss(p: &Tensor, q: &Tensor) -> f64 {
    assert_eq!(p.shape(), q.shape());
    scalar_graph(|g| {
        let a = g.constant(p.clone());
        let b = g.constant(q.clone());
        consistency_graph(g, a, b)
    })
}

/// Randomness of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSeeds {
    pub mask: u64,
    /// `None` selects evaluation mode: `z = μ` without sampling.
    pub noise: Option<u64>,
}

/// One flag per token for each sequence; `true` means masked.
pub type Masks = Vec<Vec<bool>>;

/// Slide and RNA masks for every sample of a batch.
pub fn batch_masks(b: usize, n_slide: usize, n_rna: usize, cfg: &ObjectiveConfig, seed: u64) -> Result<(Masks, Masks)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slide = Vec::with_capacity(b);
    let mut rna = Vec::with_capacity(b);
    for _ in 0..b {
        slide.push(mask_select(n_slide, cfg.mask_ratio_slide, rng.next_u64())?);
        rna.push(mask_select(n_rna, cfg.mask_ratio_rna, rng.next_u64())?);
    }
    Ok((slide, rna))
}

/// Style branch for one modality: returns `(KL, z)`.
fn style_branch(g: &mut Graph<'_>, head: &Linear, x: Var, d_z: usize, noise: Option<&Tensor>) -> (Var, Var) {
    let h = head.forward(g, x);
    let mu = g.slice_cols(h, 0, d_z);
    let lv = g.slice_cols(h, d_z, d_z);
    let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let kl = style_kl_graph(g, mu, lv);
    let z = match noise {
        Some(eps) => {
            let half = g.scale(lv, 0.5);
            let std = g.exp(half);
            let e = g.constant(eps.clone());
            let jitter = g.mul(std, e);
            g.add(mu, jitter)
        }
        None => mu,
    };
    (kl, z)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

/// Reconstruction targets pinned to fixed values instead of the current
/// encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionTargets {
    pub s_tokens: Tensor,
    pub t_tokens: Tensor,
}

/// Runs both encoders once and every enabled objective branch on `batch`.
/// Branches whose weight is zero are skipped and reported as 0.
pub fn total_loss(
    model: &Mirror,
    g: &mut Graph<'_>,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    seeds: StepSeeds,
) -> Result<(Var, LossBreakdown)> {
    total_loss_with_targets(model, g, batch, cfg, seeds, None)
}

/// [`total_loss`] with optionally pinned retention targets. Retention
/// targets carry no gradient, so a finite-difference check of the encoder
/// must hold them fixed.
pub fn total_loss_with_targets(
    model: &Mirror,
    g: &mut Graph<'_>,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    seeds: StepSeeds,
    targets: Option<&RetentionTargets>,
) -> Result<(Var, LossBreakdown)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Validation("a batch needs at least 2 samples".into()));
    }
    let w = cfg.weights;
    let enc = model.encoders.forward(g, &batch.bags, &batch.segments, &batch.expr);
    let mut terms: Vec<Var> = Vec::new();
    let value = |g: &Graph<'_>, v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));

    let align = (w.alpha > 0.0).then(|| {
        let (sa, ta) = model.align_vars(g, enc.s_cls, enc.t_vec);
        contrastive_graph(g, sa, ta, cfg.tau)
    });

    let retention = if w.beta > 0.0 {
        let n = batch.segments[0];
        if batch.segments.iter().any(|&s| s != n) {
            return Err(Error::Validation("retention needs equally sized bags".into()));
        }
        let groups = model.cfg.encoder.gene_groups;
        let (sm, rm) = batch_masks(b, n, groups, cfg, seeds.mask)?;
        let heads = &model.heads.retention;
        let (ls, _) = retention_graph(g, &heads.slide, enc.s_tokens, targets.map(|t| &t.s_tokens), n, &sm);
        let (lr, _) = retention_graph(g, &heads.rna, enc.t_tokens, targets.map(|t| &t.t_tokens), groups, &rm);
        let sum = g.add(ls, lr);
        Some(g.scale(sum, 0.5))
    } else {
        None
    };

    let (style, cluster) = if w.gamma > 0.0 {
        let head = &model.heads.style;
        let (eps_s, eps_t) = match seeds.noise {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = gaussian(b, head.d_z, &mut rng);
                (Some(a), Some(gaussian(b, head.d_z, &mut rng)))
            }
            None => (None, None),
        };
        let (kl_s, z_s) = style_branch(g, &head.slide, enc.s_cls, head.d_z, eps_s.as_ref());
        let (kl_t, z_t) = style_branch(g, &head.rna, enc.t_vec, head.d_z, eps_t.as_ref());
        let style = g.add(kl_s, kl_t);
        let centers = g.param(head.centers);
        let p = cluster_assign_graph(g, z_s, centers, cfg.kappa);
        let q = cluster_assign_graph(g, z_t, centers, cfg.kappa);
        (Some(style), Some(consistency_graph(g, p, q)))
    } else {
        (None, None)
    };

    let parts = LossBreakdown::new(
        value(g, align),
        value(g, retention),
        value(g, style),
        value(g, cluster),
        w,
    );
    if let Some(a) = align {
        terms.push(g.scale(a, w.alpha));
    }
    if let Some(r) = retention {
        terms.push(g.scale(r, w.beta));
    }
    if let (Some(s), Some(c)) = (style, cluster) {
        let sc = g.add(s, c);
        terms.push(g.scale(sc, w.gamma));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Err(Error::Config("all loss weights are zero".into())),
    };
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok((total, parts))
}
