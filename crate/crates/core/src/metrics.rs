//! Evaluation metrics: pooled R², estimated-component curves across
//! replicates, realized SNR and component matching.

use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::numerics::{ensure_same_shape, Matrix};

/// Pooled coefficient of determination over every entry, zeros included.
///
/// The total sum of squares is taken about the global mean of `truth`.
pub fn r_squared(truth: &Matrix, pred: &Matrix) -> Result<f64> {
    ensure_same_shape(truth, pred, "r_squared")?;
    let n = truth.len();
    if n == 0 {
        return Err(GmcrError::UndefinedR2);
    }
    let mean = truth.sum() / n as f64;
    let mut ss_tot = 0.0;
    let mut ss_res = 0.0;
    for (t, p) in truth.iter().zip(pred.iter()) {
        ss_tot += (t - mean) * (t - mean);
        ss_res += (t - p) * (t - p);
    }
    if ss_tot == 0.0 {
        return Err(GmcrError::UndefinedR2);
    }
    let r2 = 1.0 - ss_res / ss_tot;
    if r2.is_finite() {
        Ok(r2)
    } else {
        Err(GmcrError::numeric("r_squared"))
    }
}

/// 10·log10(signal power / noise power) from a stored noise realization.
pub fn realized_snr_db(clean: &Matrix, noise: &Matrix) -> Result<f64> {
    ensure_same_shape(clean, noise, "realized_snr_db")?;
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = noise.iter().map(|v| v * v).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: Option<f64>,
    pub ec: usize,
    pub ec_true: Option<usize>,
    pub zero_leakage: Option<f64>,
    pub snr_realized_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub ec: usize,
    pub r2: Option<f64>,
}

/// Per-checkpoint series of one replicate.
pub fn ec_curve<I>(points: I) -> Result<Vec<CurvePoint>>
where
    I: IntoIterator<Item = CurvePoint>,
{
    let series: Vec<CurvePoint> = points.into_iter().collect();
    if series.is_empty() {
        return Err(GmcrError::argument("ec_curve needs at least one checkpoint"));
    }
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Unbiased sample standard deviation (0 for a single value).
    pub sd: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            sd: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, sd, n }
}

/// Replicate aggregation of EC and R² at each method's final/best checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub ec: Summary,
    pub r2: Summary,
}

pub fn aggregate_replicates(points: &[CurvePoint]) -> ReplicateSummary {
    let ec: Vec<f64> = points.iter().map(|p| p.ec as f64).collect();
    let r2: Vec<f64> = points.iter().filter_map(|p| p.r2).collect();
    ReplicateSummary {
        ec: summarize(&ec),
        r2: summarize(&r2),
    }
}

/// Cosine similarity of two rows; 0 when either is all-zero.
pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Maximum-total-cosine assignment of estimated rows to true rows.
///
/// Returns `(true_index, estimated_index)` pairs; with fewer estimated than
/// true rows some true rows stay unmatched and vice versa.
pub fn match_components(estimated: &Matrix, truth: &Matrix) -> Result<Vec<(usize, usize)>> {
    if estimated.ncols() != truth.ncols() {
        return Err(GmcrError::argument(format!(
            "cannot match components of dimension {} and {}",
            estimated.ncols(),
            truth.ncols()
        )));
    }
    let (nt, ne) = (truth.nrows(), estimated.nrows());
    if nt == 0 || ne == 0 {
        return Ok(Vec::new());
    }
    let mut sim = Matrix::zeros((nt, ne));
    for i in 0..nt {
        for j in 0..ne {
            sim[[i, j]] = cosine(truth.row(i), estimated.row(j));
        }
    }
    // hungarian minimizes; rows must not outnumber columns
    if nt <= ne {
        let cost = sim.mapv(|v| -v);
        Ok(hungarian(&cost).into_iter().enumerate().collect())
    } else {
        let cost = sim.t().mapv(|v| -v);
        Ok(hungarian(&cost).into_iter().enumerate().map(|(e, t)| (t, e)).collect())
    }
}

/// Minimum-cost assignment (Kuhn–Munkres with potentials) for an n × m cost
/// matrix with n ≤ m. Returns the column assigned to each row.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m, "hungarian needs rows <= columns");
    let inf = f64::INFINITY;
    // 1-based potentials; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn r2_examples() {
        let x = array![[0.0, 0.0, 10.0]];
        assert_eq!(r_squared(&x, &x).unwrap(), 1.0);
        let mean = Matrix::from_elem((1, 3), 10.0 / 3.0);
        assert_abs_diff_eq!(r_squared(&x, &mean).unwrap(), 0.0, epsilon = 1e-15);
        // SS_tot = 200/3, SS_res = 2
        let r2 = r_squared(&x, &array![[0.0, 1.0, 9.0]]).unwrap();
        assert_abs_diff_eq!(r2, 1.0 - 2.0 / (200.0 / 3.0), epsilon = 1e-15);
        assert_abs_diff_eq!(r2, 0.97, epsilon = 1e-12);
    }

    #[test]
    fn r2_constant_truth_is_error_not_nan() {
        let c = Matrix::from_elem((2, 2), 3.0);
        assert!(matches!(r_squared(&c, &c), Err(GmcrError::UndefinedR2)));
        assert!(r_squared(&c, &Matrix::zeros((2, 3))).is_err());
    }

    #[test]
    fn r2_tends_to_one_for_small_perturbation() {
        let x = array![[1.0, 5.0], [2.0, 0.0]];
        let mut last = 0.0;
        for eps in [1e-1, 1e-2, 1e-3] {
            let r2 = r_squared(&x, &(&x + eps)).unwrap();
            assert!(r2 > last);
            last = r2;
        }
        assert!(1.0 - last < 1e-5);
    }

    proptest! {
        #[test]
        fn r2_invariant_under_joint_permutation(
            vals in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4..40),
            seed in any::<u64>(),
        ) {
            let n = vals.len();
            let truth = Matrix::from_shape_vec((1, n), vals.iter().map(|v| v.0).collect()).unwrap();
            let pred = Matrix::from_shape_vec((1, n), vals.iter().map(|v| v.1).collect()).unwrap();
            prop_assume!(r_squared(&truth, &pred).is_ok());
            let perm = crate::numerics::Rng::new(seed, 0).choose_distinct(n, n);
            let pt = Matrix::from_shape_fn((1, n), |(_, j)| truth[[0, perm[j]]]);
            let pp = Matrix::from_shape_fn((1, n), |(_, j)| pred[[0, perm[j]]]);
            let a = r_squared(&truth, &pred).unwrap();
            let b = r_squared(&pt, &pp).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn curve_and_replicates() {
        let single = ec_curve([CurvePoint {
            iteration: 5,
            ec: 3,
            r2: Some(0.9),
        }])
        .unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].ec, 3);
        assert!(ec_curve(Vec::new()).is_err());

        let same = vec![
            CurvePoint {
                iteration: 1,
                ec: 8,
                r2: Some(0.99)
            };
            5
        ];
        let s = aggregate_replicates(&same);
        assert_eq!(s.ec.sd, 0.0);
        assert_eq!(s.r2.sd, 0.0);

        let ecs = [8usize, 9, 8, 10, 8];
        let pts: Vec<CurvePoint> = ecs
            .iter()
            .map(|&ec| CurvePoint {
                iteration: 1,
                ec,
                r2: None,
            })
            .collect();
        let s = aggregate_replicates(&pts);
        assert_abs_diff_eq!(s.ec.mean, 8.6, epsilon = 1e-12);
        // deviations -0.6, 0.4, -0.6, 1.4, -0.6 → squares sum 3.2, /4
        assert_abs_diff_eq!(s.ec.sd, (3.2f64 / 4.0).sqrt(), epsilon = 1e-12);
        assert_eq!(s.r2.n, 0);
    }

    #[test]
    fn hungarian_small_instance() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        assert_eq!(total, 5.0);
        // brute force over all permutations
        let mut best = f64::INFINITY;
        for p in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            best = best.min((0..3).map(|i| cost[[i, p[i]]]).sum());
        }
        assert_eq!(total, best);
    }

    #[test]
    fn matching_recovers_permutation() {
        let truth = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let est = array![[0.0, 0.1, 2.0], [3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        let mut m = match_components(&est, &truth).unwrap();
        m.sort();
        assert_eq!(m, vec![(0, 1), (1, 2), (2, 0)]);
        let fewer = match_components(&est.slice(ndarray::s![0..2, ..]).to_owned(), &truth).unwrap();
        assert_eq!(fewer.len(), 2);
        assert!(match_components(&Matrix::zeros((1, 2)), &truth).is_err());
    }

    #[test]
    fn snr_from_noise_realization() {
        let clean = Matrix::from_elem((1, 4), 10.0);
        let noise = Matrix::from_elem((1, 4), 1.0);
        assert_abs_diff_eq!(realized_snr_db(&clean, &noise).unwrap(), 20.0, epsilon = 1e-12);
    }
}
