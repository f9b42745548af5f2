//! Classical matrix-factorization baselines: NMF with multiplicative updates
//! and MCR-ALS built on non-negative least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::metrics::match_components;
use crate::numerics::{ensure_finite, Matrix, Rng};

/// Guards the multiplicative-update denominators.
const MU_EPS: f64 = 1e-12;
/// Ridge added to a singular normal-equation block.
const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sparse,
    Nmf,
    McrAls,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Sparse => "sparse",
            Method::Nmf => "nmf",
            Method::McrAls => "mcr-als",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = GmcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Method::Sparse),
            "nmf" => Ok(Method::Nmf),
            "mcr-als" | "mcr_als" => Ok(Method::McrAls),
            other => Err(GmcrError::argument(format!("unknown method {other:?}"))),
        }
    }
}

/// Non-negative factors `X ≈ C_hat · S_hat` with unit-norm rows of `S_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub c_hat: Matrix,
    pub s_hat: Matrix,
    pub n_iters: usize,
    pub final_loss: f64,
    /// Objective after every iteration.
    pub trace: Vec<f64>,
}

impl FactorPair {
    pub fn reconstruct(&self) -> Matrix {
        self.c_hat.dot(&self.s_hat)
    }
}

fn sq_error(x: &Matrix, c: &Matrix, s: &Matrix) -> f64 {
    let r = x - &c.dot(s);
    r.iter().map(|v| v * v).sum()
}

fn check_input(x: &Matrix, k: usize) -> Result<()> {
    ensure_finite(x, "baseline input")?;
    if x.iter().any(|&v| v < 0.0) {
        return Err(GmcrError::argument("baseline input must be non-negative"));
    }
    if k == 0 {
        return Err(GmcrError::argument("rank must be at least 1"));
    }
    Ok(())
}

/// Rescales rows of `s` to unit norm and moves the scale into `c`.
fn normalize_rows(c: &mut Matrix, s: &mut Matrix) {
    for i in 0..s.nrows() {
        let n = s.row(i).dot(&s.row(i)).sqrt();
        if n > 0.0 {
            s.row_mut(i).mapv_inplace(|v| v / n);
            c.column_mut(i).mapv_inplace(|v| v * n);
        }
    }
}

fn random_factor(rng: &mut Rng, shape: (usize, usize), scale: f64) -> Matrix {
    Matrix::from_shape_simple_fn(shape, || scale * (0.1 + rng.uniform()))
}

/// Lee–Seung multiplicative updates for the squared error.
pub fn nmf_fit(x: &Matrix, k: usize, iters: usize, rng: &mut Rng) -> Result<FactorPair> {
    check_input(x, k)?;
    let (b, d) = x.dim();
    if k > b.min(d) {
        return Err(GmcrError::argument(format!(
            "rank {k} exceeds min(samples, channels) = {}",
            b.min(d)
        )));
    }
    let scale = (x.mean().unwrap_or(0.0) / k as f64).sqrt();
    let mut c = random_factor(rng, (b, k), scale);
    let mut s = random_factor(rng, (k, d), scale);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let num = x.dot(&s.t());
        let den = c.dot(&s.dot(&s.t()));
        c.zip_mut_with(&num, |v, n| *v *= n);
        c.zip_mut_with(&den, |v, q| *v /= q + MU_EPS);
        let num = c.t().dot(x);
        let den = c.t().dot(&c).dot(&s);
        s.zip_mut_with(&num, |v, n| *v *= n);
        s.zip_mut_with(&den, |v, q| *v /= q + MU_EPS);
        trace.push(sq_error(x, &c, &s));
    }
    ensure_finite(&c, "nmf concentrations")?;
    ensure_finite(&s, "nmf components")?;
    normalize_rows(&mut c, &mut s);
    let final_loss = sq_error(x, &c, &s);
    Ok(FactorPair {
        c_hat: c,
        s_hat: s,
        n_iters: iters,
        final_loss,
        trace,
    })
}

/// Solves the passive-set block of the normal equations, falling back to a
/// ridge when the block is singular.
fn solve_block(g: &DMatrix<f64>, f: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = g.clone().cholesky() {
        return ch.solve(f);
    }
    log::warn!("rank-deficient least-squares block; adding ridge {RIDGE}");
    let n = g.nrows();
    let mut reg = g.clone();
    let scale = (g.trace() / n as f64).max(1.0);
    for i in 0..n {
        reg[(i, i)] += RIDGE * scale;
    }
    match reg.clone().cholesky() {
        Some(ch) => ch.solve(f),
        None => reg.lu().solve(f).unwrap_or_else(|| DVector::zeros(n)),
    }
}

/// Lawson–Hanson active set NNLS on the normal equations:
/// minimizes `½ zᵀ G z − fᵀ z` over `z ≥ 0`, with `G = AᵀA`, `f = Aᵀy`.
pub fn nnls_gram(g: &DMatrix<f64>, f: &DVector<f64>) -> DVector<f64> {
    let n = f.len();
    let mut z = DVector::zeros(n);
    let mut passive = vec![false; n];
    let gmax = g.amax().max(f.amax());
    if gmax == 0.0 {
        return z;
    }
    let tol = 1e-12 * gmax * n as f64;
    let max_outer = 3 * n + 10;
    let mut w = f - g * &z;
    for _ in 0..max_outer {
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(t) = cand else { break };
        passive[t] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let gp = DMatrix::from_fn(idx.len(), idx.len(), |r, c| g[(idx[r], idx[c])]);
            let fp = DVector::from_fn(idx.len(), |r, _| f[idx[r]]);
            let sol = solve_block(&gp, &fp);
            if sol.iter().all(|&v| v > 0.0) {
                z.fill(0.0);
                for (r, &j) in idx.iter().enumerate() {
                    z[j] = sol[r];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            let mut blocking = idx[0];
            for (r, &j) in idx.iter().enumerate() {
                if sol[r] <= 0.0 {
                    let step = z[j] / (z[j] - sol[r]);
                    if step < alpha {
                        alpha = step;
                        blocking = j;
                    }
                }
            }
            for (r, &j) in idx.iter().enumerate() {
                z[j] += alpha * (sol[r] - z[j]);
                if j == blocking || z[j] <= 0.0 {
                    z[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = f - g * &z;
    }
    z.iter_mut().for_each(|v| *v = v.max(0.0));
    z
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[[r, c]])
}

/// Row-wise NNLS: each row `x_b` of `x` is fit as `c_b · s` with `c_b ≥ 0`.
pub fn nnls_concentrations(x: &Matrix, s: &Matrix) -> Result<Matrix> {
    if x.ncols() != s.ncols() {
        return Err(GmcrError::argument(format!(
            "data has {} channels, components have {}",
            x.ncols(),
            s.ncols()
        )));
    }
    let sn = to_na(s);
    let g = &sn * sn.transpose();
    let xs = x.dot(&s.t());
    let mut c = Matrix::zeros((x.nrows(), s.nrows()));
    for b in 0..x.nrows() {
        let f = DVector::from_fn(s.nrows(), |r, _| xs[[b, r]]);
        let z = nnls_gram(&g, &f);
        for (i, v) in z.iter().enumerate() {
            c[[b, i]] = *v;
        }
    }
    Ok(c)
}

/// Alternating NNLS for concentrations and components, with unit-norm
/// component rows after every sweep.
pub fn mcr_als_fit(x: &Matrix, k: usize, iters: usize, rng: &mut Rng) -> Result<FactorPair> {
    check_input(x, k)?;
    let d = x.ncols();
    let mut s = random_factor(rng, (k, d), 1.0);
    let mut c = Matrix::zeros((x.nrows(), k));
    normalize_rows(&mut c, &mut s);
    let mut trace = Vec::with_capacity(iters);
    let xt = x.t().to_owned();
    for _ in 0..iters {
        c = nnls_concentrations(x, &s)?;
        s = nnls_concentrations(&xt, &c.t().to_owned())?.t().to_owned();
        normalize_rows(&mut c, &mut s);
        trace.push(sq_error(x, &c, &s));
    }
    ensure_finite(&c, "mcr-als concentrations")?;
    ensure_finite(&s, "mcr-als components")?;
    let final_loss = sq_error(x, &c, &s);
    Ok(FactorPair {
        c_hat: c,
        s_hat: s,
        n_iters: iters,
        final_loss,
        trace,
    })
}

/// Mean |S_hat| over the entries where the matched true component is exactly
/// zero. Components are paired by maximum-cosine assignment.
pub fn zero_leakage(s_hat: &Matrix, s_true: &Matrix) -> Result<f64> {
    let pairs = match_components(s_hat, s_true)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, e) in pairs {
        for (tv, ev) in s_true.row(t).iter().zip(s_hat.row(e).iter()) {
            if *tv == 0.0 {
                total += ev.abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{cosine, r_squared};
    use ndarray::array;

    fn rank_one() -> (Matrix, Matrix) {
        let c = array![[1.0], [2.0], [0.5], [3.0]];
        let s = array![[0.0, 1.0, 2.0, 0.0, 4.0]];
        (c.dot(&s), s)
    }

    #[test]
    fn nmf_rank_one_is_exact() {
        let (x, _) = rank_one();
        let fit = nmf_fit(&x, 1, 500, &mut Rng::new(1, 0)).unwrap();
        let rel = (fit.final_loss / x.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(rel <= 1e-6, "relative error {rel}");
    }

    #[test]
    fn nmf_objective_never_increases() {
        let mut rng = Rng::new(3, 0);
        let x = Matrix::from_shape_simple_fn((12, 9), || rng.uniform());
        let fit = nmf_fit(&x, 3, 300, &mut Rng::new(4, 0)).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_data_gives_zero_factors() {
        let x = Matrix::zeros((5, 4));
        let nmf = nmf_fit(&x, 2, 50, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(nmf.final_loss, 0.0);
        assert!(nmf.reconstruct().iter().all(|&v| v == 0.0));
        let als = mcr_als_fit(&x, 2, 5, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(als.final_loss, 0.0);
        assert!(als.c_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_checks() {
        let x = Matrix::ones((3, 5));
        assert!(nmf_fit(&x, 4, 10, &mut Rng::new(0, 0)).is_err());
        assert!(nmf_fit(&x, 0, 10, &mut Rng::new(0, 0)).is_err());
        assert!(mcr_als_fit(&-x, 1, 10, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn concentrations_from_known_components() {
        let mut rng = Rng::new(9, 0);
        let s = Matrix::from_shape_simple_fn((3, 10), || {
            let u = rng.uniform();
            if u < 0.4 {
                0.0
            } else {
                u
            }
        });
        let c_true = Matrix::from_shape_simple_fn((6, 3), || 10.0 * rng.uniform());
        let x = c_true.dot(&s);
        let c = nnls_concentrations(&x, &s).unwrap();
        let err = (&c - &c_true).mapv(|v| v * v).sum().sqrt() / c_true.mapv(|v| v * v).sum().sqrt();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn nnls_respects_bounds() {
        // unconstrained optimum has a negative coordinate
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, -1.0, 1.0]);
        let z = nnls_gram(&(a.transpose() * &a), &(a.transpose() * y));
        assert_eq!(z[1], 0.0);
        assert!((z[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn als_rank_one_direction() {
        let (x, s) = rank_one();
        let fit = mcr_als_fit(&x, 1, 20, &mut Rng::new(2, 0)).unwrap();
        assert!(cosine(fit.s_hat.row(0), s.row(0)) >= 0.9999);
        assert!(r_squared(&x, &fit.reconstruct()).unwrap() > 0.999999);
        let n = fit.s_hat.row(0).dot(&fit.s_hat.row(0)).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leakage_examples() {
        let s = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 2.0]];
        assert_eq!(zero_leakage(&s, &s).unwrap(), 0.0);
        let mut hat = s.clone();
        hat[[0, 3]] = 0.001;
        // ten true-zero entries across the two rows
        assert!((zero_leakage(&hat, &s).unwrap() - 0.0001).abs() < 1e-15);
        assert!(zero_leakage(&hat, &Matrix::zeros((2, 5))).is_err());
    }

    #[test]
    fn method_tags_round_trip() {
        for m in [Method::Sparse, Method::Nmf, Method::McrAls] {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
    }
}
