//! Dynamic time warping and its smoothed, differentiable variant.
//!
//! Both use the squared Euclidean distance between rows as the local cost
//! and the step set {down, right, diagonal} with no band constraint and no
//! path-length normalization.

use std::sync::Arc;

use crate::autodiff::{CustomRule, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_GAMMA: f64 = 5.0;

/// Name under which the soft-DTW rule is registered on a tape.
pub const SOFT_DTW_PRIMITIVE: &str = "soft_dtw";

fn check_pair<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidInput(format!(
            "alignment needs non-empty sequences, got {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "alignment",
            detail: format!("feature widths {} vs {}", a.cols(), b.cols()),
        });
    }
    Ok(())
}

/// Pairwise squared Euclidean costs `[La x Lb]`.
pub fn cost_matrix<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_pair(a, b)?;
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| squared_distance(a.row(i), b.row(j))))
}

pub fn dtw<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    let d = cost_matrix(a, b)?;
    Ok(dtw_from_costs(&d))
}

pub fn dtw_from_costs<T: Scalar>(d: &Matrix<T>) -> T {
    let (n, m) = d.shape();
    let inf = T::infinity();
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = T::zero();
    for i in 1..=n {
        cur[0] = inf;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = d[(i - 1, j - 1)] + best;
        }
        std::mem::swap(&mut prev, &mut cur);
        prev[0] = inf;
    }
    prev[m]
}

/// `-γ log(e^{-u/γ} + e^{-v/γ} + e^{-w/γ})`, shifted by the minimum so no
/// exponent overflows. Infinite arguments contribute nothing.
#[inline]
pub fn softmin3<T: Scalar>(u: T, v: T, w: T, gamma: T) -> T {
    let m = u.min(v).min(w);
    if m == T::infinity() {
        return m;
    }
    let s = (-(u - m) / gamma).exp() + (-(v - m) / gamma).exp() + (-(w - m) / gamma).exp();
    m - gamma * s.ln()
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if gamma.is_nan() || gamma <= T::zero() {
        return Err(Error::InvalidInput(format!("soft-DTW smoothing must be positive, got {gamma}")));
    }
    Ok(())
}

/// Accumulated soft costs `R`, `[(La+1) x (Lb+1)]` with the infinite border.
fn soft_accumulate<T: Scalar>(d: &Matrix<T>, gamma: T) -> Matrix<T> {
    let (n, m) = d.shape();
    let mut r = Matrix::filled(n + 1, m + 1, T::infinity());
    r[(0, 0)] = T::zero();
    for i in 1..=n {
        for j in 1..=m {
            r[(i, j)] = d[(i - 1, j - 1)] + softmin3(r[(i - 1, j - 1)], r[(i - 1, j)], r[(i, j - 1)], gamma);
        }
    }
    r
}

pub fn soft_dtw<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, gamma: T) -> Result<T> {
    check_gamma(gamma)?;
    let d = cost_matrix(a, b)?;
    let r = soft_accumulate(&d, gamma);
    Ok(r[(d.rows(), d.cols())])
}

/// Expected alignment `E = ∂ soft_dtw / ∂ D` from the backward recursion.
///
/// `E[i, j]` is the probability that cell `(i, j)` lies on the alignment
/// under the Gibbs distribution over paths at temperature `γ`.
pub fn expected_alignment<T: Scalar>(d: &Matrix<T>, gamma: T) -> Result<Matrix<T>> {
    check_gamma(gamma)?;
    let r = soft_accumulate(d, gamma);
    Ok(expected_alignment_from(d, &r, gamma))
}

fn expected_alignment_from<T: Scalar>(d: &Matrix<T>, r: &Matrix<T>, gamma: T) -> Matrix<T> {
    let (n, m) = d.shape();
    // 1-based padded copies: row/col n+1 and m+1 act as the terminal sink.
    let neg = T::neg_infinity();
    let rr = |i: usize, j: usize| -> T {
        if i == n + 1 && j == m + 1 {
            r[(n, m)]
        } else if i == n + 1 || j == m + 1 {
            neg
        } else {
            r[(i, j)]
        }
    };
    let dd = |i: usize, j: usize| -> T {
        if i > n || j > m {
            T::zero()
        } else {
            d[(i - 1, j - 1)]
        }
    };
    let mut e = Matrix::zeros(n + 2, m + 2);
    e[(n + 1, m + 1)] = T::one();
    for i in (1..=n).rev() {
        for j in (1..=m).rev() {
            let here = rr(i, j);
            let wa = ((rr(i + 1, j) - here - dd(i + 1, j)) / gamma).exp();
            let wb = ((rr(i, j + 1) - here - dd(i, j + 1)) / gamma).exp();
            let wc = ((rr(i + 1, j + 1) - here - dd(i + 1, j + 1)) / gamma).exp();
            e[(i, j)] = e[(i + 1, j)] * wa + e[(i, j + 1)] * wb + e[(i + 1, j + 1)] * wc;
        }
    }
    Matrix::from_fn(n, m, |i, j| e[(i + 1, j + 1)])
}

/// Gradients of a squared-Euclidean alignment cost with respect to both
/// sequences, given the alignment weights `E`.
fn pair_grads<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, e: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let two = T::lit(2.0);
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gb = Matrix::zeros(b.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let w = e[(i, j)];
            if w == T::zero() {
                continue;
            }
            for k in 0..a.cols() {
                let diff = two * w * (a[(i, k)] - b[(j, k)]);
                ga[(i, k)] += diff;
                gb[(j, k)] -= diff;
            }
        }
    }
    (ga, gb)
}

/// Gradient of `soft_dtw(a, b, γ)` with respect to `a`.
pub fn soft_dtw_grad<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, gamma: T) -> Result<Matrix<T>> {
    let d = cost_matrix(a, b)?;
    let e = expected_alignment(&d, gamma)?;
    Ok(pair_grads(a, b, &e).0)
}

/// Soft-DTW as a tape primitive with inputs `[a, b]`.
pub struct SoftDtwRule<T> {
    pub gamma: T,
}

impl<T: Scalar> CustomRule<T> for SoftDtwRule<T> {
    fn name(&self) -> &str {
        SOFT_DTW_PRIMITIVE
    }

    fn forward(&self, inputs: &[&Matrix<T>]) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
        let [a, b] = inputs else {
            return Err(Error::Shape {
                op: SOFT_DTW_PRIMITIVE,
                detail: format!("expects 2 inputs, got {}", inputs.len()),
            });
        };
        check_gamma(self.gamma)?;
        let d = cost_matrix(a, b)?;
        let r = soft_accumulate(&d, self.gamma);
        let e = expected_alignment_from(&d, &r, self.gamma);
        Ok((Matrix::scalar(r[(d.rows(), d.cols())]), Some(e)))
    }

    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        _output: &Matrix<T>,
        cache: Option<&Matrix<T>>,
        grad_out: &Matrix<T>,
    ) -> Result<Vec<Matrix<T>>> {
        let e = cache.ok_or_else(|| Error::InvalidInput("soft-DTW backward without alignment cache".into()))?;
        let (ga, gb) = pair_grads(inputs[0], inputs[1], e);
        let g = grad_out.item();
        Ok(vec![ga.scale(g), gb.scale(g)])
    }
}

/// Records `soft_dtw(a, b, γ)` on the tape, registering the rule when the
/// tape does not have one yet. The smoothing of an already-registered rule
/// wins, so use one `γ` per tape.
pub fn tape_soft_dtw<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, gamma: T) -> Result<Var> {
    match tape.custom(SOFT_DTW_PRIMITIVE, &[a, b]) {
        Err(Error::UnregisteredPrimitive(_)) => {
            tape.register(Arc::new(SoftDtwRule { gamma }));
            tape.custom(SOFT_DTW_PRIMITIVE, &[a, b])
        }
        other => other,
    }
}
