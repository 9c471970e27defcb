//! L2-regularized logistic regression solved by deterministic full-batch
//! accelerated gradient descent. Shared by gene selection and the probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Strength of the `reg/2 · ‖β‖²` penalty (intercepts are not penalized).
    pub reg: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { reg: 1e-3, max_iter: 5000, tol: 1e-6 }
    }
}

/// One-vs-rest logistic models; a single model when there are two classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `models × features`
    pub coefficients: Tensor,
    pub intercepts: Vec<f64>,
    pub n_classes: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearClassifier {
    /// Per-class decision scores, `n × n_classes`.
    pub fn decision(&self, x: &Tensor) -> Tensor {
        let raw = x.matmul(&self.coefficients.transpose());
        let mut out = Tensor::zeros(x.rows(), self.n_classes);
        for r in 0..x.rows() {
            if self.n_classes == 2 {
                let s = raw.get(r, 0) + self.intercepts[0];
                out.set(r, 0, -s);
                out.set(r, 1, s);
            } else {
                for m in 0..self.n_classes {
                    out.set(r, m, raw.get(r, m) + self.intercepts[m]);
                }
            }
        }
        out
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let d = self.decision(x);
        (0..d.rows())
            .map(|r| {
                let row = d.row(r);
                // first maximum wins
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-feature importance: sum over models of the squared coefficient.
    pub fn importance(&self) -> Vec<f64> {
        let c = &self.coefficients;
        (0..c.cols()).map(|j| (0..c.rows()).map(|m| c.get(m, j).powi(2)).sum()).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1] / n` by power iteration.
pub(crate) fn lipschitz_bound(x: &Tensor) -> f64 {
    let (n, d) = x.shape();
    let mut v = vec![1.0; d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        v.iter_mut().for_each(|a| *a /= norm);
        let mut xv = vec![0.0; n];
        for (r, o) in xv.iter_mut().enumerate() {
            *o = x.row(r).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
        }
        let mut w = vec![0.0; d + 1];
        for (r, &s) in xv.iter().enumerate() {
            for (o, a) in w.iter_mut().zip(x.row(r)) {
                *o += a * s;
            }
            w[d] += s;
        }
        w.iter_mut().for_each(|a| *a /= n as f64);
        let next = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = w;
        if (next - lambda).abs() <= 1e-9 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(1e-12)
}

/// Binary L2 logistic regression on ±1 targets. Returns (β, b, iterations, converged).
pub(crate) fn fit_binary(x: &Tensor, y: &[f64], cfg: &SolverConfig, lip: f64) -> (Vec<f64>, f64, usize, bool) {
    let (n, d) = x.shape();
    let step = 1.0 / (0.25 * lip * 1.0001 + cfg.reg);
    let grad = |w: &[f64], b: f64| -> (Vec<f64>, f64, f64) {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for r in 0..n {
            let row = x.row(r);
            let z = row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
            let m = y[r] * z;
            loss += if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
            let coef = -y[r] * sigmoid(-m);
            for (g, a) in gw.iter_mut().zip(row) {
                *g += coef * a;
            }
            gb += coef;
        }
        let inv = 1.0 / n as f64;
        let mut reg_term = 0.0;
        for (g, wv) in gw.iter_mut().zip(w) {
            *g = *g * inv + cfg.reg * wv;
            reg_term += wv * wv;
        }
        (gw, gb * inv, loss * inv + 0.5 * cfg.reg * reg_term)
    };
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut w_prev = w.clone();
    let mut b_prev = b;
    let mut t = 1.0f64;
    let mut prev_loss = f64::INFINITY;
    for it in 0..cfg.max_iter {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        let yw: Vec<f64> = w.iter().zip(&w_prev).map(|(a, p)| a + mom * (a - p)).collect();
        let yb = b + mom * (b - b_prev);
        let (gw, gb, _) = grad(&yw, yb);
        let gnorm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        w_prev = w;
        b_prev = b;
        w = yw.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
        b = yb - step * gb;
        t = t_next;
        let (gw_at, gb_at, loss) = grad(&w, b);
        let gnorm_at = (gw_at.iter().map(|g| g * g).sum::<f64>() + gb_at * gb_at).sqrt();
        if gnorm_at <= cfg.tol || gnorm <= cfg.tol {
            return (w, b, it + 1, true);
        }
        // adaptive restart keeps the iteration monotone
        if loss > prev_loss {
            t = 1.0;
            w_prev = w.clone();
            b_prev = b;
        }
        prev_loss = loss;
    }
    (w, b, cfg.max_iter, false)
}

/// Fits the classifier. Labels must lie in `[0, n_classes)` with at least two classes present.
pub fn fit(x: &Tensor, y: &[usize], n_classes: usize, cfg: &SolverConfig) -> Result<LinearClassifier> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch { context: "classifier labels".into(), expected: x.rows(), found: y.len() });
    }
    if x.rows() < 2 {
        return Err(Error::DegenerateLabels("need at least two samples".into()));
    }
    if !x.is_finite() {
        return Err(Error::Validation("non-finite feature matrix".into()));
    }
    if !(cfg.reg > 0.0) {
        return Err(Error::Config("regularization must be positive".into()));
    }
    if y.iter().any(|&c| c >= n_classes) {
        return Err(Error::Validation("label outside class range".into()));
    }
    let present = {
        let mut seen = vec![false; n_classes];
        y.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::DegenerateLabels("only one class present".into()));
    }
    let lip = lipschitz_bound(x);
    let models: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
    let mut coef = Tensor::zeros(models.len(), x.cols());
    let mut intercepts = Vec::with_capacity(models.len());
    let mut iterations = 0;
    let mut converged = true;
    for (m, &positive) in models.iter().enumerate() {
        let targets: Vec<f64> = y.iter().map(|&c| if c == positive { 1.0 } else { -1.0 }).collect();
        let (w, b, it, ok) = fit_binary(x, &targets, cfg, lip);
        coef.row_mut(m).copy_from_slice(&w);
        intercepts.push(b);
        iterations = iterations.max(it);
        converged &= ok;
    }
    Ok(LinearClassifier { coefficients: coef, intercepts, n_classes, iterations, converged })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Unweighted mean of per-class F1 over classes that appear in `truth` or `pred`.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut f1s = Vec::new();
    for c in 0..n_classes {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fneg = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        if tp + fp + fneg == 0.0 {
            continue;
        }
        f1s.push(2.0 * tp / (2.0 * tp + fp + fneg));
    }
    if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    }
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin,
/// so per-class counts per fold differ by at most one.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0; labels.len()];
    let mut start = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            return Err(Error::DegenerateLabels(format!(
                "class {c} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            assign[i] = (start + k) % folds;
        }
        // rotate so remainders spread across folds
        start = (start + members.len()) % folds;
    }
    Ok(assign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect())
    }

    #[test]
    fn converges_on_overlapping_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = noise(&mut rng, 200, 5);
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        for (r, &c) in y.iter().enumerate() {
            x.row_mut(r)[0] += if c == 1 { 0.8 } else { -0.8 };
        }
        let m = fit(&x, &y, 2, &SolverConfig { reg: 1e-2, ..Default::default() }).unwrap();
        assert!(m.converged, "iterations {}", m.iterations);
        assert!(accuracy(&m.predict(&x), &y) > 0.7);
    }

    #[test]
    fn optimum_has_zero_gradient() {
        // check stationarity of the regularized objective at the returned solution
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = noise(&mut rng, 50, 3);
        let y: Vec<usize> = (0..50).map(|i| usize::from(x.get(i, 1) + 0.3 * x.get(i, 2) > 0.0)).collect();
        let cfg = SolverConfig { reg: 0.1, ..Default::default() };
        let m = fit(&x, &y, 2, &cfg).unwrap();
        let w = m.coefficients.row(0);
        let mut g = [0.0; 3];
        for r in 0..50 {
            let t = if y[r] == 1 { 1.0 } else { -1.0 };
            let z = x.row(r).iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + m.intercepts[0];
            let s = -t / (1.0 + (t * z).exp());
            for j in 0..3 {
                g[j] += s * x.get(r, j) / 50.0;
            }
        }
        for j in 0..3 {
            assert!((g[j] + 0.1 * w[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn multiclass_uses_one_model_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = noise(&mut rng, 90, 4);
        let y: Vec<usize> = (0..90).map(|i| i % 3).collect();
        for (r, &c) in y.iter().enumerate() {
            x.row_mut(r)[c] += 3.0;
        }
        let m = fit(&x, &y, 3, &SolverConfig::default()).unwrap();
        assert_eq!(m.coefficients.rows(), 3);
        assert!(accuracy(&m.predict(&x), &y) > 0.9);
        assert_eq!(m.importance().len(), 4);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::zeros(4, 2);
        assert!(matches!(fit(&x, &[1, 1, 1, 1], 2, &SolverConfig::default()), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn macro_f1_equals_accuracy_for_perfect_balanced_predictions() {
        let y = vec![0, 1, 0, 1, 1, 0];
        assert_eq!(macro_f1(&y, &y, 2), 1.0);
        assert_eq!(accuracy(&y, &y), 1.0);
        assert!((macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2) - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn folds_are_balanced_per_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let f = stratified_folds(&labels, 5, 4).unwrap();
        for k in 0..5 {
            for c in 0..2 {
                assert_eq!((0..100).filter(|&i| f[i] == k && labels[i] == c).count(), 10);
            }
        }
        assert_eq!(f, stratified_folds(&labels, 5, 4).unwrap());
        let uneven: Vec<usize> = (0..23).map(|i| usize::from(i % 3 == 0)).collect();
        let f = stratified_folds(&uneven, 4, 1).unwrap();
        for c in 0..2 {
            let counts: Vec<usize> = (0..4).map(|k| (0..23).filter(|&i| f[i] == k && uneven[i] == c).count()).collect();
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        assert!(stratified_folds(&[0, 0, 0, 1, 1, 1, 1, 1, 1], 5, 0).is_err());
    }
}
