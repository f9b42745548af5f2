//! Deterministic numerical substrate: seeded random streams, dense matrices,
//! the Adam optimizer and a central-difference gradient oracle.

use ndarray::{Array2, Zip};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};

/// Dense row-major matrix of 64-bit reals.
pub type Matrix = Array2<f64>;

/// Fails with a numeric error naming `what` if any entry is NaN or infinite.
pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GmcrError::numeric(what))
    }
}

pub fn ensure_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(GmcrError::argument(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dim(),
            b.dim()
        )))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary entropy (nats) of the Bernoulli with success probability sigmoid(logit).
#[inline]
pub fn binary_entropy_logit(logit: f64) -> f64 {
    // H = softplus(y) - y * sigmoid(y)
    softplus(logit) - logit * sigmoid(logit)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent job `label` under a root seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label))
}

/// Seeded random stream. Streams sharing a seed but differing in `stream_id`
/// are distinct ChaCha8 streams, so independent workers never overlap.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream labelled `label`; independent of how much of `self` was consumed.
    pub fn substream(&self, label: u64) -> Rng {
        Rng::new(self.seed, splitmix64(self.stream_id ^ splitmix64(label)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in [low, high].
    pub fn range_inclusive(&mut self, low: usize, high: usize) -> usize {
        self.inner.random_range(low..=high)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Standard Gumbel(0, 1) draw.
    pub fn gumbel(&mut self) -> f64 {
        let u: f64 = self.inner.sample(Open01);
        -(-u.ln()).ln()
    }

    /// Difference of two independent Gumbel(0, 1) draws (standard logistic).
    pub fn gumbel_diff(&mut self) -> f64 {
        let a = self.gumbel();
        let b = self.gumbel();
        a - b
    }

    /// Fisher-Yates sample of `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = self.range_inclusive(i, n - 1);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Matrix of i.i.d. normal draws.
pub fn gaussian(rng: &mut Rng, mean: f64, std: f64, shape: (usize, usize)) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(GmcrError::argument(format!(
            "gaussian: invalid mean {mean} / std {std}"
        )));
    }
    Ok(Array2::from_shape_simple_fn(shape, || mean + std * rng.normal()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Matrix,
    second_moment: Matrix,
    step_count: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize), config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Matrix::zeros(shape),
            second_moment: Matrix::zeros(shape),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one bias-corrected Adam update to `param` in place.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        ensure_same_shape(param, grad, "adam_step gradient")?;
        ensure_same_shape(param, &self.first_moment, "adam_step state")?;
        ensure_finite(grad, "adam_step gradient")?;
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        Zip::from(param)
            .and(&mut self.first_moment)
            .and(&mut self.second_moment)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            });
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(param: &Matrix, grad: &Matrix, state: &mut AdamState) -> Result<Matrix> {
    let mut out = param.clone();
    state.step(&mut out, grad)?;
    Ok(out)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(GmcrError::argument(format!("finite_diff_grad: step {h} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GmcrError::numeric(format!(
                "finite_diff_grad: objective at index {idx:?}"
            )));
        }
        grad[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
