//! Softmax attention as Gaussian filtering.
//!
//! For a query `q` and unit-length keys `k_i`,
//! `alpha q.k_i = alpha - (alpha / 2) ||q - k_i||^2`, so the softmax weights
//! `exp(alpha q.k_i)` and the Gaussian weights `exp(-(alpha / 2)||q - k_i||^2)`
//! differ by the common factor `exp(alpha)`, which cancels in the
//! normalization. Attention output at `q` is therefore the Gaussian kernel
//! (variance `1 / alpha`) applied to the sparse signal of values placed at the
//! key positions, evaluated at `q`. The convolution is only ever sampled at
//! the query points, so it is computed as the finite sum over keys.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{dot, sq_dist, Matrix, Rng};

pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FilterProbe {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    pub alpha: f64,
}

impl FilterProbe {
    /// Probe with every query and key row of unit length.
    pub fn new(queries: Matrix, keys: Matrix, values: Matrix, alpha: f64) -> Result<Self> {
        let p = FilterProbe::unnormalized(queries, keys, values, alpha)?;
        for (name, m) in [("query", &p.queries), ("key", &p.keys)] {
            for (i, r) in m.row_iter().enumerate() {
                let norm = dot(r, r).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::data(format!(
                        "{name} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(p)
    }

    /// Probe without the unit-norm requirement, for counterexamples.
    pub fn unnormalized(queries: Matrix, keys: Matrix, values: Matrix, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::data(format!("alpha must be positive, got {alpha}")));
        }
        if queries.cols() != keys.cols() {
            return Err(Error::data("queries and keys differ in dimension"));
        }
        if keys.rows() != values.rows() || keys.rows() == 0 {
            return Err(Error::data("need one value row per key and at least one key"));
        }
        for m in [&queries, &keys, &values] {
            m.check_finite()?;
        }
        Ok(FilterProbe {
            queries,
            keys,
            values,
            alpha,
        })
    }
}

/// Normalized weighted average of value rows, weights `exp(logit - max)`.
fn weighted_average(logits: &mut [f64], values: &Matrix, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (w, v) in logits.iter().zip(values.row_iter()) {
        let w = w / z;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

fn evaluate(p: &FilterProbe, logit: impl Fn(&[f64], &[f64]) -> f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(p.queries.rows(), p.values.cols());
    let mut logits = vec![0.0; p.keys.rows()];
    for i in 0..p.queries.rows() {
        let q = p.queries.row(i);
        for (l, k) in logits.iter_mut().zip(p.keys.row_iter()) {
            *l = logit(q, k);
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::data(format!("non-finite logit for query {i}")));
        }
        weighted_average(&mut logits, &p.values, out.row_mut(i));
    }
    Ok(out)
}

/// `o(q) = sum_i exp(alpha q.k_i) v_i / sum_i exp(alpha q.k_i)`.
pub fn attention_form(p: &FilterProbe) -> Result<Matrix> {
    let a = p.alpha;
    evaluate(p, |q, k| a * dot(q, k))
}

/// `o(q) = sum_i exp(-(alpha/2)||q - k_i||^2) v_i / z'(q)`.
pub fn filter_form(p: &FilterProbe) -> Result<Matrix> {
    let a = p.alpha;
    evaluate(p, |q, k| -0.5 * a * sq_dist(q, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_abs_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Key lengths used when generating a probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyNorms {
    Unit,
    /// Each key scaled to a length drawn uniformly from `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

fn unit_rows(rng: &mut Rng, n: usize, m: usize) -> Matrix {
    let mut out = Matrix::zeros(n, m);
    for r in 0..n {
        let row = out.row_mut(r);
        loop {
            row.iter_mut().for_each(|v| *v = rng.normal());
            let norm = dot(row, row).sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    out
}

/// Seeded random probe: `n` queries, keys and values of width `m`.
pub fn random_probe(n: usize, m: usize, alpha: f64, seed: u64, norms: KeyNorms) -> Result<FilterProbe> {
    if n == 0 || m == 0 {
        return Err(Error::usage("probe needs n >= 1 and m >= 1"));
    }
    let mut rng = Rng::new(seed);
    let queries = unit_rows(&mut rng, n, m);
    let mut keys = unit_rows(&mut rng, n, m);
    let values = Matrix::new(n, m, (0..n * m).map(|_| rng.normal()).collect())?;
    match norms {
        KeyNorms::Unit => FilterProbe::new(queries, keys, values, alpha),
        KeyNorms::Uniform { lo, hi } => {
            for r in 0..n {
                let s = lo + (hi - lo) * rng.uniform();
                keys.row_mut(r).iter_mut().for_each(|v| *v *= s);
            }
            FilterProbe::unnormalized(queries, keys, values, alpha)
        }
    }
}

pub fn compare_forms(p: &FilterProbe) -> Result<f64> {
    Ok(attention_form(p)?.max_abs_diff(&filter_form(p)?))
}

pub fn verify_with(n: usize, m: usize, alpha: f64, seed: u64, tol: f64, norms: KeyNorms) -> Result<EquivalenceReport> {
    if !(tol > 0.0) {
        return Err(Error::usage("tolerance must be positive"));
    }
    let probe = random_probe(n, m, alpha, seed, norms)?;
    let dev = compare_forms(&probe)?;
    Ok(EquivalenceReport {
        n,
        m,
        alpha,
        seed,
        max_abs_dev: dev,
        tol,
        pass: dev < tol,
    })
}

/// Checks the attention/Gaussian-filter identity on a seeded unit-norm probe.
pub fn verify_equivalence(n: usize, m: usize, alpha: f64, seed: u64, tol: f64) -> Result<EquivalenceReport> {
    verify_with(n, m, alpha, seed, tol, KeyNorms::Unit)
}
