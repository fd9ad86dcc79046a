//! Dense kernels, stable loss primitives, Adam and a finite-difference checker.

use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data. Fails if the length is wrong or any entry is not finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(domain(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(numeric(format!("non-finite matrix entry at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(domain("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity, clamped to `[-1, 1]` after the division.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(domain(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    if na == 0.0 {
        return Err(domain("cosine similarity: left vector has zero norm"));
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(domain("cosine similarity: right vector has zero norm"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `log(sum(exp(v)))` computed with a max shift.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(domain("log_sum_exp of an empty sequence"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(numeric("log_sum_exp of non-finite values"));
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax of `values` written into `out`; returns the log-sum-exp.
pub fn softmax_into(values: &[f64], out: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(values) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + sum.ln()
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            epsilon: Self::EPSILON,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }

    /// In-place Adam update with bias correction.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix, lr: f64) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.first_moment.shape() {
            return Err(domain(format!(
                "adam shape mismatch: params {:?}, grads {:?}, state {:?}",
                params.shape(),
                grads.shape(),
                self.first_moment.shape()
            )));
        }
        if !(lr > 0.0) {
            return Err(domain(format!("adam learning rate must be positive, got {lr}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let m = self.first_moment.as_mut_slice();
        let v = self.second_moment.as_mut_slice();
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_step(
    params: &Matrix,
    grads: &Matrix,
    state: &AdamState,
    lr: f64,
) -> Result<(Matrix, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads, lr)?;
    Ok((p, s))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(domain(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let fp = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - h;
        let fm = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(numeric(format!(
                "non-finite function value in finite differences at index {idx}"
            )));
        }
        grad.as_mut_slice()[idx] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest coordinate-wise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error: shape mismatch");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_names_side() {
        let e = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(e.to_string().contains("left"), "{e}");
        let e = cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(e.to_string().contains("right"), "{e}");
    }

    #[test]
    fn lse_fixtures() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let direct = ((-3f64).exp() + 1f64.exp() + 2f64.exp()).ln();
        let got = log_sum_exp(&[-3.0, 1.0, 2.0]).unwrap();
        assert!((got - direct).abs() / direct < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
        assert!(log_sum_exp(&[1e4, -1e4]).unwrap().is_finite());
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let p = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = Matrix::zeros(2, 2);
        let (p2, s2) = adam_step(&p, &g, &AdamState::for_param(&p), 0.01).unwrap();
        assert_eq!(p, p2);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let lr = 0.01;
        for g in [3.0, -0.2, 1e-3] {
            let p = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
            let grad = Matrix::from_vec(1, 1, vec![g]).unwrap();
            let (p2, _) = adam_step(&p, &grad, &AdamState::for_param(&p), lr).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = 0.5 - lr * g / (g.abs() + 1e-8);
            assert!((p2.get(0, 0) - expected).abs() < 1e-15);
            assert!(((0.5 - p2.get(0, 0)).abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut x = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut state = AdamState::for_param(&x);
        for _ in 0..200 {
            let g = Matrix::from_vec(1, 1, vec![2.0 * x.get(0, 0)]).unwrap();
            state.step(&mut x, &g, 0.05).unwrap();
        }
        assert!(x.get(0, 0).abs() < 1.0);
        assert_eq!(state.step_count, 200);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        assert!(adam_step(&p, &g, &AdamState::for_param(&p), 0.1).is_err());
        assert!(adam_step(&p, &p, &AdamState::for_param(&p), 0.0).is_err());
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let x = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|m| Ok(m.as_slice().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| Ok(3.0), &x, 1e-5).unwrap();
        assert_eq!(g, Matrix::zeros(1, 2));
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert!(finite_diff_grad(|m| Ok(1.0 / m.get(0, 0).abs().min(0.0)), &x, 1e-5).is_err());
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 5),
            b in proptest::collection::vec(-10.0f64..10.0, 5),
        ) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.abs() <= 1.0);
        }

        #[test]
        fn lse_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..8),
            c in -1e3f64..1e3,
        ) {
            let base = log_sum_exp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let got = log_sum_exp(&shifted).unwrap();
            let want = base + c;
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        #[test]
        fn adam_is_deterministic(
            p in proptest::collection::vec(-1.0f64..1.0, 4),
            g in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let p = Matrix::from_vec(2, 2, p).unwrap();
            let g = Matrix::from_vec(2, 2, g).unwrap();
            let s = AdamState::for_param(&p);
            let (a, sa) = adam_step(&p, &g, &s, 0.01).unwrap();
            let (b, sb) = adam_step(&p, &g, &s, 0.01).unwrap();
            prop_assert_eq!(a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(sa, sb);
        }
    }
}
