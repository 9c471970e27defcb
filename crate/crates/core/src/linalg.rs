//! Closed-form regression helpers used by probes and tests.

use nalgebra::DMatrix;

use crate::tensor::Tensor;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut out = Tensor::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.set(r, c, m[(r, c)]);
        }
    }
    out
}

pub fn column_means(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (a, v) in m.iter_mut().zip(t.row(r)) {
            *a += v;
        }
    }
    let n = t.rows().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Column-wise affine standardization fitted on one matrix and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(t: &Tensor) -> Self {
        let mean = column_means(t);
        let mut var = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for ((v, x), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let n = t.rows().max(1) as f64;
        let scale = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Fits ridge regression with an unpenalized intercept on `(x, y)` and predicts `x_test`.
///
/// `lambda = 0` falls back to the minimum-norm least-squares solution.
pub fn ridge_fit_predict(x: &Tensor, y: &Tensor, x_test: &Tensor, lambda: f64) -> Tensor {
    assert_eq!(x.rows(), y.rows());
    let xm = column_means(x);
    let ym = column_means(y);
    let mut xc = to_na(x);
    for r in 0..xc.nrows() {
        for c in 0..xc.ncols() {
            xc[(r, c)] -= xm[c];
        }
    }
    let mut yc = to_na(y);
    for r in 0..yc.nrows() {
        for c in 0..yc.ncols() {
            yc[(r, c)] -= ym[c];
        }
    }
    let (n, p) = (xc.nrows(), xc.ncols());
    let beta = if lambda == 0.0 {
        let svd = xc.clone().svd(true, true);
        svd.solve(&yc, 1e-10).expect("svd solve")
    } else if p <= n {
        let mut gram = xc.transpose() * &xc;
        for i in 0..p {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.transpose() * &yc;
        gram.cholesky().expect("ridge system is positive definite").solve(&rhs)
    } else {
        let mut kern = &xc * xc.transpose();
        for i in 0..n {
            kern[(i, i)] += lambda;
        }
        let alpha = kern.cholesky().expect("ridge system is positive definite").solve(&yc);
        xc.transpose() * alpha
    };
    let mut xt = to_na(x_test);
    for r in 0..xt.nrows() {
        for c in 0..xt.ncols() {
            xt[(r, c)] -= xm[c];
        }
    }
    let mut pred = xt * beta;
    for r in 0..pred.nrows() {
        for c in 0..pred.ncols() {
            pred[(r, c)] += ym[c];
        }
    }
    from_na(&pred)
}

/// Coefficient of determination of `pred` against `y`, averaged over columns.
pub fn r2_score(y: &Tensor, pred: &Tensor) -> f64 {
    assert_eq!(y.shape(), pred.shape());
    let means = column_means(y);
    let mut total = 0.0;
    for c in 0..y.cols() {
        let (mut sse, mut sst) = (0.0, 0.0);
        for r in 0..y.rows() {
            sse += (y.get(r, c) - pred.get(r, c)).powi(2);
            sst += (y.get(r, c) - means[c]).powi(2);
        }
        total += if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    }
    total / y.cols().max(1) as f64
}

/// In-sample R² of an ordinary least-squares fit of `y` on `x`.
pub fn least_squares_r2(x: &Tensor, y: &[f64], intercept: bool) -> f64 {
    let yt = Tensor::from_vec(y.len(), 1, y.to_vec());
    let pred = if intercept {
        ridge_fit_predict(x, &yt, x, 0.0)
    } else {
        let xa = to_na(x);
        let beta = xa.clone().svd(true, true).solve(&to_na(&yt), 1e-10).expect("svd solve");
        from_na(&(xa * beta))
    };
    r2_score(&yt, &pred)
}

/// R² adjusted for `p` predictors over `n` samples.
pub fn adjusted_r2(r2: f64, n: usize, p: usize) -> f64 {
    1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - p as f64 - 1.0)
}
