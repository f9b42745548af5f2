//! Static per-entry selection gate over the component dictionary.
//!
//! Every dictionary entry `(i, j)` carries two learnable energies: the energy
//! of using the index and the energy of not using it. The lower energy wins.
//! During training the decision is relaxed with binary-Concrete
//! (Gumbel-sigmoid) noise; at inference the mask is hardened to exact 0/1.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::numerics::{ensure_same_shape, gaussian, sigmoid, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticGateParams {
    /// Energy of using each index (K × d).
    pub e_on: Matrix,
    /// Energy of not using each index (K × d).
    pub e_off: Matrix,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    /// Relaxed mask in [0, 1].
    pub soft: Matrix,
    /// Exact {0, 1} mask.
    pub hard: Matrix,
}

impl StaticGateParams {
    /// Uninformative gate: both energies zero, soft mask 0.5 everywhere.
    pub fn zeros(k: usize, d: usize) -> Self {
        StaticGateParams {
            e_on: Matrix::zeros((k, d)),
            e_off: Matrix::zeros((k, d)),
            temperature: 1.0,
        }
    }

    /// Energies drawn i.i.d. from N(0, std²), independently for use and not-use.
    /// Energies drawn around `-gap/2` (on) and `gap/2` (off), so a positive
    /// gap starts the mask mostly open.
    pub fn random(k: usize, d: usize, gap: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(StaticGateParams {
            e_on: gaussian(rng, -0.5 * gap, std, (k, d))?,
            e_off: gaussian(rng, 0.5 * gap, std, (k, d))?,
            temperature: 1.0,
        })
    }

    pub fn from_energies(e_on: Matrix, e_off: Matrix, temperature: f64) -> Result<Self> {
        ensure_same_shape(&e_on, &e_off, "static gate energies")?;
        Ok(StaticGateParams {
            e_on,
            e_off,
            temperature,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.e_on.dim()
    }

    /// Energy gap `e_off − e_on`; positive means the index is used.
    pub fn logits(&self) -> Matrix {
        &self.e_off - &self.e_on
    }

    /// Probability that a noisy sample opens each index: sigmoid(e_off − e_on).
    pub fn use_probability(&self) -> Matrix {
        let mut p = self.logits();
        p.mapv_inplace(sigmoid);
        p
    }

    /// Hardened mask: 1 where `e_on < e_off`, ties closed.
    pub fn hard_mask(&self) -> Matrix {
        let mut hard = Matrix::zeros(self.dim());
        Zip::from(&mut hard)
            .and(&self.e_on)
            .and(&self.e_off)
            .for_each(|h, &on, &off| *h = if on < off { 1.0 } else { 0.0 });
        hard
    }

    /// Samples the relaxed mask. `noise` switches on Gumbel perturbation (training mode).
    pub fn soft_mask(&self, noise: Option<&mut Rng>) -> Result<GateMask> {
        self.mask_at(self.temperature, noise)
    }

    /// [`soft_mask`](Self::soft_mask) at an explicit temperature.
    pub fn mask_at(&self, tau: f64, noise: Option<&mut Rng>) -> Result<GateMask> {
        if !(tau > 0.0) {
            return Err(GmcrError::argument(format!(
                "static gate temperature {tau} must be > 0"
            )));
        }
        let mut soft = self.logits();
        match noise {
            Some(rng) => soft.mapv_inplace(|z| sigmoid((z + rng.gumbel_diff()) / tau)),
            None => soft.mapv_inplace(|z| sigmoid(z / tau)),
        }
        let hard = soft.mapv(|s| if s > 0.5 { 1.0 } else { 0.0 });
        Ok(GateMask { soft, hard })
    }

    /// Hardened mask packaged as a [`GateMask`] whose soft part equals the hard part.
    pub fn hardened(&self) -> GateMask {
        let hard = self.hard_mask();
        GateMask {
            soft: hard.clone(),
            hard,
        }
    }

    /// Squared Euclidean norm of all use and not-use energies.
    pub fn gate_energy(&self) -> f64 {
        self.e_on.iter().chain(self.e_off.iter()).map(|e| e * e).sum()
    }

    /// Keeps only the listed component rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        StaticGateParams {
            e_on: self.e_on.select(ndarray::Axis(0), rows),
            e_off: self.e_off.select(ndarray::Axis(0), rows),
            temperature: self.temperature,
        }
    }
}

/// Masks the dictionary: `S ⊙ soft` while training, `S ⊙ hard` when hardened.
pub fn apply_mask(s: &Matrix, mask: &GateMask, hardened: bool) -> Result<Matrix> {
    let m = if hardened { &mask.hard } else { &mask.soft };
    ensure_same_shape(s, m, "apply_mask")?;
    let mut out = s.clone();
    // Select rather than multiply so that closed entries are exactly +0.0.
    Zip::from(&mut out).and(m).for_each(|o, &g| {
        *o = if g == 0.0 { 0.0 } else { *o * g };
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn symmetric_energies_give_half() {
        let g = StaticGateParams::zeros(3, 4);
        let m = g.soft_mask(None).unwrap();
        assert!(m.soft.iter().all(|&v| v == 0.5));
        // ties close the gate
        assert!(m.hard.iter().all(|&v| v == 0.0));
        assert!(g.hard_mask().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_gap_saturates() {
        let g = StaticGateParams::from_energies(array![[0.0]], array![[10.0]], 1.0).unwrap();
        let m = g.soft_mask(None).unwrap();
        assert_abs_diff_eq!(m.soft[[0, 0]], 0.999_954_602_131_297_6, epsilon = 1e-12);
        assert_eq!(m.hard[[0, 0]], 1.0);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut g = StaticGateParams::zeros(1, 1);
        g.temperature = 0.0;
        assert!(g.soft_mask(None).is_err());
        g.temperature = -1.0;
        assert!(g.soft_mask(Some(&mut Rng::new(0, 0))).is_err());
    }

    /// P(hard = 1) under Gumbel noise is the logistic CDF of the energy gap,
    /// whatever the temperature.
    #[test]
    fn monte_carlo_open_frequency_matches_logistic_law() {
        let gaps = array![[-2.0, -0.5, 0.0, 0.7, 1.5]];
        let mut g = StaticGateParams::from_energies(Matrix::zeros((1, 5)), gaps.clone(), 0.5).unwrap();
        g.temperature = 0.5;
        let mut rng = Rng::new(2024, 3);
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let m = g.soft_mask(Some(&mut rng)).unwrap();
            for (c, &h) in counts.iter_mut().zip(m.hard.iter()) {
                *c += h as usize;
            }
        }
        for (c, &gap) in counts.iter().zip(gaps.iter()) {
            let freq = *c as f64 / draws as f64;
            // closed form: P(gap + L > 0) for L ~ Logistic(0, 1)
            let expected = 1.0 / (1.0 + (-gap).exp());
            assert!((freq - expected).abs() < 0.01, "gap {gap}: {freq} vs {expected}");
        }
    }

    #[test]
    fn apply_mask_examples() {
        let s = array![[1.0, 2.0], [3.0, 4.0]];
        let ones = GateMask {
            soft: Matrix::ones((2, 2)),
            hard: Matrix::ones((2, 2)),
        };
        assert_eq!(apply_mask(&s, &ones, true).unwrap(), s);
        let zeros = GateMask {
            soft: Matrix::zeros((2, 2)),
            hard: Matrix::zeros((2, 2)),
        };
        assert_eq!(apply_mask(&s, &zeros, true).unwrap(), Matrix::zeros((2, 2)));
        let diag = GateMask {
            soft: array![[0.9, 0.2], [0.1, 0.8]],
            hard: array![[1.0, 0.0], [0.0, 1.0]],
        };
        assert_eq!(apply_mask(&s, &diag, true).unwrap(), array![[1.0, 0.0], [0.0, 4.0]]);
        let soft = apply_mask(&s, &diag, false).unwrap();
        assert_abs_diff_eq!(soft[[0, 1]], 0.4, epsilon = 1e-15);
        assert!(apply_mask(
            &s,
            &GateMask {
                soft: Matrix::zeros((1, 2)),
                hard: Matrix::zeros((1, 2))
            },
            true
        )
        .is_err());
    }

    #[test]
    fn hardened_zeros_are_bitwise_zero() {
        let mut rng = Rng::new(5, 0);
        let g = StaticGateParams::random(6, 9, 0.0, 1.0, &mut rng).unwrap();
        let s = gaussian(&mut rng, 0.0, 1.0, (6, 9)).unwrap();
        let out = apply_mask(&s, &g.hardened(), true).unwrap();
        for (o, h) in out.iter().zip(g.hard_mask().iter()) {
            if *h == 0.0 {
                assert_eq!(o.to_bits(), 0.0f64.to_bits());
            }
        }
    }

    #[test]
    fn gate_energy_examples() {
        assert_eq!(StaticGateParams::zeros(2, 3).gate_energy(), 0.0);
        let g = StaticGateParams::from_energies(array![[3.0]], array![[4.0]], 1.0).unwrap();
        assert_eq!(g.gate_energy(), 25.0);

        let mut rng = Rng::new(77, 0);
        let g = StaticGateParams::random(4, 8, 0.0, 1.3, &mut rng).unwrap();
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..8 {
                brute += g.e_on[[i, j]] * g.e_on[[i, j]];
                brute += g.e_off[[i, j]] * g.e_off[[i, j]];
            }
        }
        assert_abs_diff_eq!(g.gate_energy(), brute, epsilon = 1e-12 * brute);
    }

    #[test]
    fn noise_free_mask_is_monotone_in_gap() {
        let gaps: Vec<f64> = (-20..=20).map(|v| v as f64 * 0.25).collect();
        let n = gaps.len();
        let off = Matrix::from_shape_vec((1, n), gaps).unwrap();
        let mut g = StaticGateParams::from_energies(Matrix::zeros((1, n)), off, 0.3).unwrap();
        g.temperature = 0.3;
        let soft = g.soft_mask(None).unwrap().soft;
        for w in soft.row(0).to_vec().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn soft_converges_to_hard_as_temperature_drops() {
        let mut rng = Rng::new(8, 0);
        let mut g = StaticGateParams::random(3, 5, 0.0, 1.0, &mut rng).unwrap();
        g.temperature = 1e-4;
        let m = g.soft_mask(None).unwrap();
        for (s, h) in m.soft.iter().zip(g.hard_mask().iter()) {
            assert!((s - h).abs() < 1e-6);
        }
    }
}
