//! Small dense numeric layer.
//!
//! Everything is `f64` and every reduction runs left to right in row-major
//! order, so two runs with the same inputs produce the same bits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("binary mask has no set bit")]
    EmptyMask,
    #[error("length mismatch: logits {logits} vs mask {mask}")]
    MaskLength { logits: usize, mask: usize },
    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = NumError;

    fn try_from(repr: MatrixRepr) -> Result<Self, NumError> {
        Matrix::from_vec(repr.rows, repr.cols, repr.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::Shape {
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from `[-bound, bound)`, row-major draw order.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { rows, cols, data }
    }

    /// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::random_uniform(rows, cols, bound, rng)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| v.max(0.0))
    }

    /// Sum of squares.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Validity bits over a categorical support.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

impl From<&crate::opspace::TransitionMask> for BinaryMask {
    fn from(mask: &crate::opspace::TransitionMask) -> Self {
        Self::new(mask.to_bools().to_vec())
    }
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = u.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    u.iter().map(|x| x - max - log_total).collect()
}

/// Binary-masked softmax: `v_i e^{u_i} / sum_j v_j e^{u_j}`.
///
/// The max is taken over set bits only; cleared bits come out as exact zeros.
pub fn bmsoftmax(u: &[f64], mask: &BinaryMask) -> Result<Vec<f64>, NumError> {
    if u.len() != mask.len() {
        return Err(NumError::MaskLength {
            logits: u.len(),
            mask: mask.len(),
        });
    }
    let max = u
        .iter()
        .zip(mask.bits())
        .filter(|(_, on)| **on)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumError::EmptyMask);
    }
    let exps: Vec<f64> = u
        .iter()
        .zip(mask.bits())
        .map(|(x, on)| if *on { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, NumError> {
    if let Some((index, value)) = p.iter().copied().enumerate().find(|(_, v)| *v < 0.0) {
        return Err(NumError::NegativeProbability { index, value });
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(NumError::NotNormalized(total));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Gradient of the entropy of `p = (bm)softmax(u)` with respect to `u`:
/// `-p_j (ln p_j + H)`, zero where `p_j = 0`.
pub fn entropy_grad_wrt_logits(p: &[f64]) -> Vec<f64> {
    let h = entropy_unchecked(p);
    p.iter()
        .map(|pj| if *pj > 0.0 { -pj * (pj.ln() + h) } else { 0.0 })
        .collect()
}

/// Mean cross-entropy of row-wise softmax(logits) against integer labels,
/// plus its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    assert_eq!(logits.rows(), labels.len());
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let logp = log_softmax(logits.row(r));
        loss -= logp[*label];
        for (g, lp) in grad.row_mut(r).iter_mut().zip(&logp) {
            *g = lp.exp() / n;
        }
        grad[(r, *label)] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// Plain SGD with optional heavy-ball momentum (off when `momentum == 0`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Descends: `param -= lr * (grad + momentum * velocity)`. Pass a negated
    /// gradient to ascend.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        assert_eq!(params.len(), grads.len());
        if self.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(grads) {
                p.axpy(-self.lr, g);
            }
            return;
        }
        if self.velocity.len() != params.len() {
            self.velocity = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            v.scale(self.momentum);
            v.axpy(1.0, g);
            p.axpy(-self.lr, v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Both estimates at `worst_index`.
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// Relative error per coordinate is `|a - g| / max(|a|, |g|, GRAD_CHECK_FLOOR)`.
/// The floor keeps round-off in the difference quotient (about
/// `1e-16 * |f| / step`) from dominating coordinates whose true gradient is
/// near zero; those are effectively judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

pub fn grad_check<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), point.len());
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: analytic.first().copied().unwrap_or(0.0),
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() || !analytic[i].is_finite() {
            return Err(NumError::NonFinite { index: i });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.transpose().t_matmul(&b), ab);
        assert_eq!(a.matmul_t(&b.transpose()), ab);
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn bmsoftmax_examples() {
        let p = bmsoftmax(&[0.0, 0.0, 0.0], &BinaryMask::new(vec![true, false, true])).unwrap();
        assert!(close(&p, &[0.5, 0.0, 0.5], 1e-15));
        assert_eq!(p[1], 0.0);

        let p = bmsoftmax(&[2f64.ln(), 0.0, 0.0], &BinaryMask::new(vec![true, true, false])).unwrap();
        assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0, 0.0], 1e-15));

        assert_eq!(
            bmsoftmax(&[1.0, 2.0], &BinaryMask::new(vec![false, false])),
            Err(NumError::EmptyMask)
        );
        assert!(bmsoftmax(&[1.0], &BinaryMask::all_ones(2)).is_err());
    }

    #[test]
    fn bmsoftmax_survives_huge_logits() {
        let p = bmsoftmax(&[1e300, 1e300, -1e300], &BinaryMask::new(vec![true, true, true])).unwrap();
        assert!(close(&p, &[0.5, 0.5, 0.0], 1e-15));
        // a huge logit on a cleared bit must not matter
        let p = bmsoftmax(&[1e308, 0.0, 0.0], &BinaryMask::new(vec![false, true, true])).unwrap();
        assert!(close(&p, &[0.0, 0.5, 0.5], 1e-15));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[1.0 / 3.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((entropy(&[1.0 / 3.0; 3]).unwrap() - 1.098612).abs() < 1e-6);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.0, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            entropy(&[1.5, -0.5]),
            Err(NumError::NegativeProbability { index: 1, .. })
        ));
        assert!(matches!(entropy(&[0.2, 0.2]), Err(NumError::NotNormalized(_))));
    }

    #[test]
    fn grad_check_examples() {
        let r = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");

        let r = grad_check(|x| x[0] * x[0], &[12.0], &[3.0], 1e-5).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");

        assert_eq!(
            grad_check(|x| x[0].ln(), &[0.0], &[0.0], 1e-5).map(|_| ()),
            Err(NumError::NonFinite { index: 0 })
        );
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        // d/du log softmax(u)_a = onehot_a - softmax(u)
        let u = [0.3, -1.2, 2.0, 0.7, -0.4];
        let a = 2;
        let p = softmax(&u);
        let analytic: Vec<f64> = (0..5).map(|i| f64::from(u8::from(i == a)) - p[i]).collect();
        let r = grad_check(|x| log_softmax(x)[a], &analytic, &u, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let u = [0.3, -1.2, 2.0, 0.7, -0.4];
        let mask = BinaryMask::new(vec![true, false, true, true, false]);
        let p = bmsoftmax(&u, &mask).unwrap();
        let analytic = entropy_grad_wrt_logits(&p);
        let r = grad_check(
            |x| entropy_unchecked(&bmsoftmax(x, &mask).unwrap()),
            &analytic,
            &u,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(analytic[1], 0.0);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Matrix::from_vec(2, 3, vec![0.1, 0.5, -0.3, 1.0, -2.0, 0.0]).unwrap();
        let labels = [2, 0];
        let (_, grad) = cross_entropy_with_grad(&logits, &labels);
        let r = grad_check(
            |x| cross_entropy_with_grad(&Matrix::from_vec(2, 3, x.to_vec()).unwrap(), &labels).0,
            grad.data(),
            logits.data(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn sgd_descends_and_momentum_accumulates() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        Sgd::new(0.1).step(&mut [&mut p], &[&g]);
        assert!(close(p.data(), &[0.95, -0.95], 1e-15));

        let mut q = Matrix::zeros(1, 1);
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut opt = Sgd::with_momentum(1.0, 0.5);
        opt.step(&mut [&mut q], &[&g]);
        opt.step(&mut [&mut q], &[&g]);
        assert!(close(q.data(), &[-2.5], 1e-15));
    }

    fn logits_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..16).prop_flat_map(|n| {
            (
                prop::collection::vec(-50.0f64..50.0, n),
                prop::collection::vec(any::<bool>(), n),
                0..n,
            )
                .prop_map(|(u, mut bits, forced)| {
                    bits[forced] = true;
                    (u, bits)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bmsoftmax_is_masked_distribution((u, bits) in logits_and_mask(), shift in -100.0f64..100.0) {
            let mask = BinaryMask::new(bits.clone());
            let p = bmsoftmax(&u, &mask).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (pi, on) in p.iter().zip(&bits) {
                if !on { prop_assert_eq!(*pi, 0.0); } else { prop_assert!(*pi >= 0.0); }
            }

            // independent route: plain softmax of the kept sub-vector
            let kept: Vec<f64> = u.iter().zip(&bits).filter(|(_, on)| **on).map(|(x, _)| *x).collect();
            let sub = softmax(&kept);
            let mut embedded = vec![0.0; u.len()];
            let mut it = sub.into_iter();
            for (slot, on) in embedded.iter_mut().zip(&bits) {
                if *on { *slot = it.next().unwrap(); }
            }
            prop_assert!(close(&p, &embedded, 1e-12));

            let shifted: Vec<f64> = u.iter().map(|x| x + shift).collect();
            prop_assert!(close(&p, &bmsoftmax(&shifted, &mask).unwrap(), 1e-9));

            let h = entropy(&p).unwrap();
            prop_assert!(h <= (mask.popcount() as f64).ln() + 1e-12);
        }

        #[test]
        fn all_ones_mask_is_softmax(u in prop::collection::vec(-50.0f64..50.0, 1..16)) {
            let p = bmsoftmax(&u, &BinaryMask::all_ones(u.len())).unwrap();
            prop_assert!(close(&p, &softmax(&u), 1e-12));
        }
    }
}
