//! Input-conditioned selection gate: an energy predictor maps each observed
//! mixture to per-component selection energies, which become stochastic
//! binary gates through the Gumbel-sigmoid relaxation.

use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::mlp::Mlp;
use crate::numerics::{sigmoid, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyPredictor {
    pub net: Mlp,
}

/// Per-sample, per-component gates.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGate {
    pub energies: Matrix,
    /// sigmoid(−energy): low energy means likely selected.
    pub probs: Matrix,
    pub delta_soft: Matrix,
    pub delta_hard: Matrix,
}

impl EnergyPredictor {
    pub fn new(net: Mlp) -> Self {
        EnergyPredictor { net }
    }

    pub fn budget(&self) -> usize {
        self.net.output_dim()
    }

    /// B × K selection energies for the prepared input rows.
    pub fn predict_energies(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.net.forward(x)?.0)
    }
}

/// Turns energies into gates. Gumbel noise is injected when `noise` is given.
///
/// Without noise and with a non-positive temperature the soft gates collapse
/// onto the hard ones.
pub fn sample_gates(energies: &Matrix, noise: Option<&mut Rng>, temperature: f64) -> Result<SelectionGate> {
    let probs = energies.mapv(|e| sigmoid(-e));
    let delta_soft = match noise {
        Some(rng) => {
            if !(temperature > 0.0) {
                return Err(GmcrError::argument(format!(
                    "gate temperature {temperature} must be > 0 in training mode"
                )));
            }
            energies.mapv(|e| sigmoid((-e + rng.gumbel_diff()) / temperature))
        }
        None if temperature > 0.0 => energies.mapv(|e| sigmoid(-e / temperature)),
        None => energies.mapv(|e| if e < 0.0 { 1.0 } else { 0.0 }),
    };
    let delta_hard = delta_soft.mapv(|s| if s > 0.5 { 1.0 } else { 0.0 });
    Ok(SelectionGate {
        energies: energies.clone(),
        probs,
        delta_soft,
        delta_hard,
    })
}

/// Squared norm of the energy matrix averaged over batch rows.
pub fn selection_energy(energies: &Matrix) -> f64 {
    if energies.nrows() == 0 {
        return 0.0;
    }
    energies.iter().map(|e| e * e).sum::<f64>() / energies.nrows() as f64
}

/// Expected number of selected components per sample.
pub fn expected_cardinality(probs: &Matrix) -> f64 {
    if probs.nrows() == 0 {
        return 0.0;
    }
    probs.sum() / probs.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, concatenate, Axis};

    #[test]
    fn zero_network_gives_zero_energy() {
        let f = EnergyPredictor::new(Mlp::zeros(5, 4, 3));
        let x = gaussian(&mut Rng::new(0, 0), 0.0, 1.0, (2, 5)).unwrap();
        let e = f.predict_energies(&x).unwrap();
        assert_eq!(e, Matrix::zeros((2, 3)));
        let g = sample_gates(&e, None, 1.0).unwrap();
        assert!(g.probs.iter().all(|&p| p == 0.5));
        assert!(g.delta_soft.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn hand_set_network() {
        let net = Mlp {
            w1: array![[1.0], [2.0]],
            b1: array![[0.5]],
            w2: array![[3.0]],
            b2: array![[-1.0]],
        };
        let e = EnergyPredictor::new(net)
            .predict_energies(&array![[1.0, -0.25]])
            .unwrap();
        // pre-activation 1.0, silu(1) = sigmoid(1)
        let expected = 3.0 * (1.0 / (1.0 + (-1.0f64).exp())) - 1.0;
        assert_abs_diff_eq!(e[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn duplicated_rows_give_identical_energies() {
        let mut rng = Rng::new(3, 0);
        let f = EnergyPredictor::new(Mlp::random(6, 8, 4, 1.0, &mut rng).unwrap());
        let row = gaussian(&mut rng, 0.0, 1.0, (1, 6)).unwrap();
        let x = concatenate![Axis(0), row, row];
        let e = f.predict_energies(&x).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let f = EnergyPredictor::new(Mlp::zeros(5, 4, 3));
        assert!(matches!(
            f.predict_energies(&Matrix::zeros((1, 4))),
            Err(GmcrError::Argument(_))
        ));
    }

    #[test]
    fn gate_limits_and_symmetry() {
        let g = sample_gates(&array![[-1e3, 0.0]], None, 0.7).unwrap();
        assert_abs_diff_eq!(g.delta_soft[[0, 0]], 1.0, epsilon = 1e-12);
        assert_eq!(g.delta_soft[[0, 1]], 0.5);
        assert_eq!(g.delta_hard, array![[1.0, 0.0]]);
        let noisy = sample_gates(&array![[-1e3]], Some(&mut Rng::new(1, 1)), 0.1).unwrap();
        assert_abs_diff_eq!(noisy.delta_soft[[0, 0]], 1.0, epsilon = 1e-12);
        assert!(sample_gates(&array![[0.0]], Some(&mut Rng::new(1, 1)), 0.0).is_err());
    }

    #[test]
    fn monte_carlo_selection_frequency() {
        let energies = array![[1.2, 0.0, -0.4, -2.0]];
        let mut rng = Rng::new(99, 2);
        let draws = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..draws {
            let g = sample_gates(&energies, Some(&mut rng), 0.5).unwrap();
            for (h, &d) in hits.iter_mut().zip(g.delta_hard.iter()) {
                *h += d as usize;
            }
        }
        for (h, &e) in hits.iter().zip(energies.iter()) {
            let freq = *h as f64 / draws as f64;
            let expected = 1.0 / (1.0 + e.exp());
            assert!((freq - expected).abs() < 0.01, "energy {e}: {freq} vs {expected}");
        }
    }

    #[test]
    fn noise_free_gates_monotone_in_energy() {
        let energies = Matrix::from_shape_fn((1, 41), |(_, j)| j as f64 * 0.2 - 4.0);
        let g = sample_gates(&energies, None, 0.4).unwrap();
        let soft = g.delta_soft.row(0).to_vec();
        for w in soft.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let threshold = energies.mapv(|e| if e < 0.0 { 1.0 } else { 0.0 });
        assert_eq!(g.delta_hard, threshold);
    }

    #[test]
    fn selection_energy_examples() {
        assert_eq!(selection_energy(&Matrix::zeros((3, 2))), 0.0);
        assert_eq!(selection_energy(&array![[3.0, 4.0]]), 25.0);
        let e = gaussian(&mut Rng::new(12, 0), 0.0, 2.0, (8, 16)).unwrap();
        let mut brute = 0.0;
        for b in 0..8 {
            for i in 0..16 {
                brute += e[[b, i]] * e[[b, i]];
            }
        }
        assert_abs_diff_eq!(selection_energy(&e), brute / 8.0, epsilon = 1e-12 * brute);
    }

    #[test]
    fn expected_cardinality_examples() {
        assert_eq!(expected_cardinality(&Matrix::zeros((2, 3))), 0.0);
        assert_eq!(expected_cardinality(&Matrix::ones((2, 3))), 3.0);
        assert_eq!(expected_cardinality(&array![[0.5, 0.5], [1.0, 0.0]]), 1.0);
        let p = array![[0.1, 0.7], [0.3, 0.2]];
        let doubled = concatenate![Axis(0), p, p];
        assert_abs_diff_eq!(
            expected_cardinality(&p),
            expected_cardinality(&doubled),
            epsilon = 1e-15
        );
    }
}
