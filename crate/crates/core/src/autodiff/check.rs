//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{value_and_grad, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// A scalar function of named parameter tensors.
pub trait Objective<T: Scalar> {
    fn params(&self) -> &[Matrix<T>];
    fn param_name(&self, i: usize) -> String;
    fn value(&self, params: &[Matrix<T>]) -> Result<T>;
    fn value_and_grad(&self, params: &[Matrix<T>]) -> Result<(T, Vec<Matrix<T>>)>;
}

/// Objective defined by a tape program over named parameters.
pub struct TapeObjective<T: Scalar, F> {
    pub params: Vec<Matrix<T>>,
    pub names: Vec<String>,
    pub program: F,
}

impl<T, F> Objective<T> for TapeObjective<T, F>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    fn param_name(&self, i: usize) -> String {
        self.names.get(i).cloned().unwrap_or_else(|| format!("param{i}"))
    }

    fn value(&self, params: &[Matrix<T>]) -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = (self.program)(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    }

    fn value_and_grad(&self, params: &[Matrix<T>]) -> Result<(T, Vec<Matrix<T>>)> {
        value_and_grad(params, |t, v| (self.program)(t, v))
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Lower bound on the number of coordinates probed in total.
    pub min_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            min_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst_param: String,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on a random
/// subset of coordinates. Every tensor gets at least a few probes and the
/// total is at least `opts.min_coords` (or every coordinate, if fewer).
pub fn finite_diff_check<T: Scalar, O: Objective<T>>(obj: &O, opts: &CheckOptions) -> Result<GradReport> {
    let base = obj.params().to_vec();
    let (_, grads) = obj.value_and_grad(&base)?;
    let total: usize = base.iter().map(Matrix::len).sum();
    if total == 0 {
        return Err(Error::InvalidInput("objective has no parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = T::lit(opts.eps);
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        per_param: Vec::with_capacity(base.len()),
        coords_checked: 0,
    };
    let mut probe = base.clone();
    for (pi, tensor) in base.iter().enumerate() {
        let len = tensor.len();
        if len == 0 {
            continue;
        }
        let share = (opts.min_coords * len).div_ceil(total);
        let count = share.max(4).min(len);
        let mut worst = 0.0f64;
        for ci in sample(&mut rng, len, count) {
            let orig = tensor.as_slice()[ci];
            probe[pi].as_mut_slice()[ci] = orig + eps;
            let up = obj.value(&probe)?;
            probe[pi].as_mut_slice()[ci] = orig - eps;
            let down = obj.value(&probe)?;
            probe[pi].as_mut_slice()[ci] = orig;
            let numeric = (up - down).to_f64_lossy() / (2.0 * opts.eps);
            let analytic = grads[pi].as_slice()[ci].to_f64_lossy();
            let err = relative_error(analytic, numeric);
            if err > worst {
                worst = err;
            }
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = format!("{}[{ci}]", obj.param_name(pi));
            }
            report.coords_checked += 1;
        }
        report.per_param.push((obj.param_name(pi), worst));
    }
    Ok(report)
}
