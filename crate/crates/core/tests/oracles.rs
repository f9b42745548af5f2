use gmcr::baselines::{nnls_gram, zero_leakage};
use gmcr::decontam::{clean, fit_clean_process, Chromatogram, RunLabel, WindowPlan};
use gmcr::metrics::{hungarian, r_squared};
use gmcr::model::ComponentDictionary;
use gmcr::static_gate::StaticGateParams;
use gmcr::{HyperParams, Matrix, ModelConfig, Rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn quad(g: &DMatrix<f64>, f: &DVector<f64>, z: &DVector<f64>) -> f64 {
    0.5 * z.dot(&(g * z)) - f.dot(z)
}

/// Minimum of `½zᵀGz − fᵀz` over `z ≥ 0` by enumerating every support.
fn nnls_brute(g: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
    let n = f.len();
    let mut best = 0.0;
    for bits in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
        let gs = DMatrix::from_fn(idx.len(), idx.len(), |a, b| g[(idx[a], idx[b])]);
        let fs = DVector::from_fn(idx.len(), |a, _| f[idx[a]]);
        let Some(zs) = gs.lu().solve(&fs) else { continue };
        if zs.iter().any(|v| *v < 0.0) {
            continue;
        }
        let mut z = DVector::zeros(n);
        for (a, &i) in idx.iter().enumerate() {
            z[i] = zs[a];
        }
        best = f64::min(best, quad(g, f, &z));
    }
    best
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Matrix {
    Matrix::from_shape_vec((rows, cols), values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nnls_matches_support_enumeration(
        n in 1usize..5,
        a in prop::collection::vec(-2.0f64..2.0, 40),
        y in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let am = DMatrix::from_row_slice(8, n, &a[..8 * n]);
        let yv = DVector::from_vec(y);
        let g = am.transpose() * &am;
        let f = am.transpose() * &yv;
        let z = nnls_gram(&g, &f);
        prop_assert!(z.iter().all(|v| *v >= 0.0));
        let got = quad(&g, &f, &z);
        let want = nnls_brute(&g, &f);
        prop_assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn hungarian_matches_permutation_search(
        n in 1usize..6,
        c in prop::collection::vec(0.0f64..10.0, 25),
    ) {
        let cost = matrix(n, n, c[..n * n].to_vec());
        let assign = hungarian(&cost);
        let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
        let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        let mut seen = assign.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!((total(&assign) - best).abs() <= 1e-9);
    }

    #[test]
    fn r_squared_matches_direct_formula(
        t in prop::collection::vec(-5.0f64..5.0, 12),
        p in prop::collection::vec(-5.0f64..5.0, 12),
    ) {
        let truth = matrix(3, 4, t.clone());
        let pred = matrix(3, 4, p.clone());
        let mean = t.iter().sum::<f64>() / 12.0;
        let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        prop_assume!(ss_tot > 1e-6);
        let ss_res: f64 = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        let got = r_squared(&truth, &pred).unwrap();
        prop_assert!((got - (1.0 - ss_res / ss_tot)).abs() <= 1e-12);
    }

    #[test]
    fn hardened_dictionary_is_exactly_zero_off_mask(seed in 0u64..1000, gap in -2.0f64..2.0) {
        let mut rng = Rng::new(seed, 0);
        let (k, d) = (5, 12);
        let s = Matrix::from_shape_fn((k, d), |_| rng.uniform() + 0.1);
        let gate = StaticGateParams::random(k, d, gap, 1.0, &mut rng).unwrap();
        let dict = ComponentDictionary::new(s, gate.clone()).unwrap();
        let eff = dict.effective_components();
        for i in 0..k {
            for j in 0..d {
                let open = gate.e_on[[i, j]] < gate.e_off[[i, j]];
                prop_assert_eq!(eff[[i, j]] != 0.0, open);
                if !open {
                    prop_assert_eq!(eff[[i, j]].to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn zero_leakage_vanishes_on_shared_support(seed in 0u64..1000) {
        let mut rng = Rng::new(seed, 1);
        let truth = Matrix::from_shape_fn((3, 10), |_| if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() + 0.1 });
        let scaled = truth.mapv(|v| 2.5 * v);
        let mut rows: Vec<usize> = vec![2, 0, 1];
        rows.rotate_left((seed % 3) as usize);
        let shuffled = scaled.select(ndarray::Axis(0), &rows);
        prop_assert_eq!(zero_leakage(&shuffled, &truth).unwrap(), 0.0);
    }
}

fn chromatogram(rng: &mut Rng, n: usize, d: usize, label: RunLabel) -> Chromatogram {
    let rt: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
    let mz: Vec<u32> = (0..d as u32).map(|m| 50 + m).collect();
    let values = Matrix::from_shape_fn((n, d), |(i, j)| {
        let peak = (-((i as f64 - 10.0 - j as f64).powi(2)) / 8.0).exp();
        (200.0 * peak + 5.0 * rng.uniform()).round()
    });
    Chromatogram::new(rt, mz, values, label).unwrap()
}

#[test]
fn cleaned_plus_residual_reproduces_the_input_bitwise() {
    let mut rng = Rng::new(9, 0);
    let train = vec![
        chromatogram(&mut rng, 40, 6, RunLabel::Clean),
        chromatogram(&mut rng, 40, 6, RunLabel::Clean),
    ];
    let polluted = chromatogram(&mut rng, 40, 6, RunLabel::Polluted);
    let plan = WindowPlan::for_runs(&train, 10.0).unwrap();
    let model = ModelConfig {
        budget: 4,
        hidden: 6,
        ..ModelConfig::default()
    };
    let hp = HyperParams {
        max_iters: 200,
        checkpoint_interval: 100,
        batch_size: 16,
        ..HyperParams::for_dim(6)
    };
    let solvers = fit_clean_process(&train, &plan, &model, &hp).unwrap();
    let result = clean(&polluted, &plan, &solvers).unwrap();
    let sum = &result.cleaned.intensities + &result.residual;
    for (a, b) in sum.iter().zip(polluted.intensities.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(result.cleaned.intensities.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
}
