//! One-hidden-layer perceptron with SiLU activation and hand-written backward pass.

use ndarray::{Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::numerics::{gaussian, sigmoid, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// input × hidden
    pub w1: Matrix,
    /// 1 × hidden
    pub b1: Matrix,
    /// hidden × output
    pub w2: Matrix,
    /// 1 × output
    pub b2: Matrix,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub pre: Matrix,
    pub hidden: Matrix,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Matrix::zeros((input, hidden)),
            b1: Matrix::zeros((1, hidden)),
            w2: Matrix::zeros((hidden, output)),
            b2: Matrix::zeros((1, output)),
        }
    }

    /// Normal fan-in initialization; `out_gain` scales the output layer.
    pub fn random(input: usize, hidden: usize, output: usize, out_gain: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Mlp {
            w1: gaussian(rng, 0.0, (1.0 / input as f64).sqrt(), (input, hidden))?,
            b1: Matrix::zeros((1, hidden)),
            w2: gaussian(rng, 0.0, out_gain / (hidden as f64).sqrt(), (hidden, output))?,
            b2: Matrix::zeros((1, output)),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpTrace)> {
        if x.ncols() != self.input_dim() {
            return Err(GmcrError::argument(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let pre = x.dot(&self.w1) + &self.b1;
        let hidden = pre.mapv(silu);
        let out = hidden.dot(&self.w2) + &self.b2;
        Ok((out, MlpTrace { pre, hidden }))
    }

    pub fn backward(&self, x: &Matrix, trace: &MlpTrace, d_out: &Matrix) -> MlpGrads {
        let w2 = trace.hidden.t().dot(d_out);
        let b2 = d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut d_pre = d_out.dot(&self.w2.t());
        Zip::from(&mut d_pre)
            .and(&trace.pre)
            .for_each(|g, &a| *g *= silu_grad(a));
        let w1 = x.t().dot(&d_pre);
        let b1 = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        MlpGrads { w1, b1, w2, b2 }
    }

    /// Keeps only the listed output units.
    pub fn select_outputs(&self, cols: &[usize]) -> Self {
        Mlp {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.select(Axis(1), cols),
            b2: self.b2.select(Axis(1), cols),
        }
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl MlpGrads {
    pub fn into_array(self) -> [Matrix; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(1, 0);
        let net = Mlp::random(3, 5, 2, 1.0, &mut rng).unwrap();
        let x = gaussian(&mut rng, 0.0, 1.0, (4, 3)).unwrap();
        let weights = gaussian(&mut rng, 0.0, 1.0, (4, 2)).unwrap();
        let objective = |n: &Mlp| (n.forward(&x).unwrap().0 * &weights).sum();
        let (_, trace) = net.forward(&x).unwrap();
        let grads = net.backward(&x, &trace, &weights).into_array();
        for (p, g) in grads.iter().enumerate() {
            let fd = finite_diff_grad(
                |m| {
                    let mut probe = net.clone();
                    *probe.params_mut()[p] = m.clone();
                    objective(&probe)
                },
                net.params()[p],
                1e-6,
            )
            .unwrap();
            let err = (&fd - g).mapv(f64::abs).sum() / fd.mapv(f64::abs).sum().max(1e-12);
            assert!(err < 1e-6, "param {p}: rel err {err}");
        }
    }
}
