//! Energy optimization: the five-term objective, its analytic gradient, the
//! annealed training loop and checkpoint bookkeeping.
//!
//! The objective for a batch `X_o` with reconstruction `X_g` is
//!
//! ```text
//! L = mean_b ‖x_b − x_g,b‖²                      reconstruction
//!   + λ′ · C(X_o)                                component usage
//!   + λ_e · mean_b ‖E_b‖²                        dynamic gate energy
//!   + λ_e · (‖e_on‖² + ‖e_off‖²)                 static gate energy
//!   + λ_amb · mean binary entropy of all gates   ambiguity
//! ```
//!
//! where `C` is the expected number of selected components per sample plus
//! `static_usage_weight` times the expected fraction of open dictionary
//! entries per component.

use std::path::Path;

use log::{debug, warn};
use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::dynamic_gate::{expected_cardinality, selection_energy};
use crate::error::{GmcrError, Result};
use crate::metrics::r_squared;
use crate::model::{GmcrModel, Mode, ModelConfig, DEFAULT_TAU_USE};
use crate::numerics::{binary_entropy_logit, sigmoid, AdamConfig, AdamState, Matrix, Rng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Multiplier λ′ of the component-usage term.
    pub lambda_prime: f64,
    /// Multiplier λ_e of both gate-energy terms.
    pub lambda_e: f64,
    /// Multiplier λ_amb of the gate-entropy term.
    pub lambda_amb: f64,
    /// Weight of open dictionary entries (per component, as a fraction of d) in the usage count.
    pub static_usage_weight: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    /// Loss breakdowns are recorded every `log_interval` iterations.
    pub log_interval: usize,
    pub tau_use: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda_prime: 1000.0,
            lambda_e: 1.0,
            lambda_amb: 0.01,
            static_usage_weight: 1.0,
            tau_start: 1.0,
            tau_end: 0.1,
            max_iters: 20_000,
            batch_size: 64,
            checkpoint_interval: 1000,
            log_interval: 10,
            tau_use: DEFAULT_TAU_USE,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// λ′ = max(1000, c·d).
pub fn scaled_lambda_prime(d: usize, per_dim: f64) -> f64 {
    (per_dim * d as f64).max(1000.0)
}

impl HyperParams {
    /// Defaults with λ′ scaled to the component dimension (c = 2).
    pub fn for_dim(d: usize) -> Self {
        HyperParams {
            lambda_prime: scaled_lambda_prime(d, 2.0),
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_prime", self.lambda_prime),
            ("lambda_e", self.lambda_e),
            ("lambda_amb", self.lambda_amb),
            ("static_usage_weight", self.static_usage_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GmcrError::argument(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(GmcrError::argument("temperatures must be > 0"));
        }
        if self.max_iters == 0 || self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(GmcrError::argument(
                "max_iters, batch_size and checkpoint_interval must be >= 1",
            ));
        }
        if self.log_interval == 0 {
            return Err(GmcrError::argument("log_interval must be >= 1"));
        }
        Ok(())
    }

    /// Geometric annealing from `tau_start` at iteration 0 to `tau_end` at the last one.
    pub fn temperature(&self, iteration: usize) -> f64 {
        if self.max_iters <= 1 {
            return self.tau_end;
        }
        let frac = iteration.min(self.max_iters - 1) as f64 / (self.max_iters - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub usage: f64,
    pub dyn_energy: f64,
    pub static_energy: f64,
    pub ambiguity: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms(recon: f64, usage: f64, dyn_energy: f64, static_energy: f64, ambiguity: f64) -> Result<Self> {
        let named = [
            ("reconstruction", recon),
            ("usage", usage),
            ("dynamic energy", dyn_energy),
            ("static energy", static_energy),
            ("ambiguity", ambiguity),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(GmcrError::numeric(format!("loss term {name}")));
        }
        Ok(LossBreakdown {
            recon,
            usage,
            dyn_energy,
            static_energy,
            ambiguity,
            total: recon + usage + dyn_energy + static_energy + ambiguity,
        })
    }

    pub fn terms(&self) -> [f64; 5] {
        [
            self.recon,
            self.usage,
            self.dyn_energy,
            self.static_energy,
            self.ambiguity,
        ]
    }
}

/// Gradients in the order of [`GmcrModel::params`].
#[derive(Debug, Clone)]
pub struct ModelGrads(pub Vec<Matrix>);

/// The objective for one batch.
pub fn loss(x: &Matrix, model: &GmcrModel, hp: &HyperParams, mode: Mode<'_>) -> Result<LossBreakdown> {
    Ok(evaluate(x, model, hp, mode, false)?.0)
}

/// The objective and its analytic gradient with respect to every parameter.
pub fn loss_and_grad(
    x: &Matrix,
    model: &GmcrModel,
    hp: &HyperParams,
    mode: Mode<'_>,
) -> Result<(LossBreakdown, ModelGrads)> {
    let (l, g) = evaluate(x, model, hp, mode, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn evaluate(
    x: &Matrix,
    model: &GmcrModel,
    hp: &HyperParams,
    mode: Mode<'_>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ModelGrads>)> {
    let t = model.forward_trace(x, mode)?;
    let b = x.nrows().max(1) as f64;
    let (k, d) = (model.budget(), model.dim());
    let gate = &model.dictionary.gate;
    let static_logits = gate.logits();

    let residual = &t.x_g - x;
    let recon = residual.iter().map(|r| r * r).sum::<f64>() / b;

    let static_open = static_logits.iter().map(|&z| sigmoid(z)).sum::<f64>();
    let cardinality = expected_cardinality(&t.gates.probs) + hp.static_usage_weight * static_open / d.max(1) as f64;
    let usage = hp.lambda_prime * cardinality;
    let dyn_energy = hp.lambda_e * selection_energy(&t.gates.energies);
    let static_energy = hp.lambda_e * gate.gate_energy();

    let n_gates = (t.gates.energies.len() + static_logits.len()).max(1) as f64;
    let entropy_sum = t.gates.energies.iter().map(|&e| binary_entropy_logit(-e)).sum::<f64>()
        + static_logits.iter().map(|&z| binary_entropy_logit(z)).sum::<f64>();
    let ambiguity = hp.lambda_amb * entropy_sum / n_gates;

    let breakdown = LossBreakdown::from_terms(recon, usage, dyn_energy, static_energy, ambiguity)?;
    if !with_grad {
        return Ok((breakdown, None));
    }

    // dL/dX_g
    let g_out = residual.mapv(|r| 2.0 * r / b);
    let d_masked = t.weights.t().dot(&g_out);
    let d_weights = g_out.dot(&t.masked.t());

    // dictionary and static gate
    let d_s = &d_masked * &t.mask;
    let mut d_logit = Matrix::zeros((k, d));
    if let Some(tau) = t.temperature {
        Zip::from(&mut d_logit)
            .and(&d_masked)
            .and(&model.dictionary.s)
            .and(&t.mask)
            .for_each(|g, &dm, &s, &m| *g = dm * s * m * (1.0 - m) / tau);
    }
    let usage_coef = hp.lambda_prime * hp.static_usage_weight / d.max(1) as f64;
    let amb_coef = hp.lambda_amb / n_gates;
    Zip::from(&mut d_logit).and(&static_logits).for_each(|g, &z| {
        let p = sigmoid(z);
        let dp = p * (1.0 - p);
        *g += usage_coef * dp - amb_coef * z * dp;
    });
    let d_on = gate.e_on.mapv(|e| 2.0 * hp.lambda_e * e) - &d_logit;
    let d_off = gate.e_off.mapv(|e| 2.0 * hp.lambda_e * e) + &d_logit;

    // dynamic gate energies
    let delta = if t.temperature.is_some() {
        &t.gates.delta_soft
    } else {
        &t.gates.delta_hard
    };
    let mut d_energy = Matrix::zeros(t.gates.energies.dim());
    if let Some(tau) = t.temperature {
        Zip::from(&mut d_energy)
            .and(&d_weights)
            .and(&t.concentrations)
            .and(delta)
            .for_each(|g, &dw, &c, &dl| *g = -dw * c * dl * (1.0 - dl) / tau);
    }
    let lp = hp.lambda_prime / b;
    let le = 2.0 * hp.lambda_e / b;
    Zip::from(&mut d_energy)
        .and(&t.gates.energies)
        .and(&t.gates.probs)
        .for_each(|g, &e, &p| {
            let dp = p * (1.0 - p);
            *g += -lp * dp + le * e - amb_coef * e * dp;
        });

    // concentrations
    let scale = model.concentration.output_scale;
    let mut d_logits = &d_weights * delta;
    Zip::from(&mut d_logits)
        .and(&t.conc_logits)
        .for_each(|g, &z| *g *= scale * sigmoid(z));

    let energy_grads = model.energy.net.backward(&t.features, &t.energy_trace, &d_energy);
    let conc_grads = model.concentration.net.backward(&t.features, &t.conc_trace, &d_logits);

    let mut grads = vec![d_s, d_on, d_off];
    grads.extend(energy_grads.into_array());
    grads.extend(conc_grads.into_array());
    Ok((breakdown, Some(ModelGrads(grads))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverCheckpoint {
    pub format_version: u32,
    pub iteration: usize,
    pub model: GmcrModel,
    pub hyper: HyperParams,
    /// Training-batch loss at this iteration.
    pub loss: LossBreakdown,
    /// Hardened, pruned reconstruction R² over the full training set.
    pub r2: Option<f64>,
    /// Estimated component count at `hyper.tau_use`.
    pub ec: usize,
}

impl SolverCheckpoint {
    /// Writes JSON atomically (temporary file in the same directory, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: SolverCheckpoint = crate::io::read_json(path)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(GmcrError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported checkpoint version {}", ckpt.format_version),
            });
        }
        Ok(ckpt)
    }

    /// The model with components below the usage threshold removed.
    pub fn pruned_model(&self, data: &Matrix) -> Result<GmcrModel> {
        self.model.prune(data, self.hyper.tau_use)
    }
}

/// `(R², EC)` of the hardened, pruned model on `data`. R² is `None` when undefined.
pub fn evaluate_model(model: &GmcrModel, data: &Matrix, tau_use: f64) -> Result<(Option<f64>, usize)> {
    let pruned = model.prune(data, tau_use)?;
    let recon = pruned.reconstruct(data)?;
    let r2 = match r_squared(data, &recon) {
        Ok(v) => Some(v),
        Err(GmcrError::UndefinedR2) => None,
        Err(e) => return Err(e),
    };
    Ok((r2, pruned.budget()))
}

/// Estimated component count of a trained checkpoint over `data`.
pub fn estimate_components(checkpoint: &SolverCheckpoint, data: &Matrix) -> Result<usize> {
    checkpoint.model.estimated_components(data, checkpoint.hyper.tau_use)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub temperature: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<SolverCheckpoint>,
    /// Index into `checkpoints` of the best one (highest R², then fewest components).
    pub best: Option<usize>,
    pub trace: Vec<TraceEntry>,
    /// Training stopped early on a non-finite loss or parameter.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> Option<&SolverCheckpoint> {
        self.best.map(|i| &self.checkpoints[i])
    }

    pub fn last_checkpoint(&self) -> Option<&SolverCheckpoint> {
        self.checkpoints.last()
    }
}

/// Index of the best checkpoint: highest R², ties broken by smaller EC, then earlier.
pub fn select_best(checkpoints: &[SolverCheckpoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in checkpoints.iter().enumerate() {
        let Some(r2) = c.r2 else { continue };
        best = match best {
            None => Some(i),
            Some(j) => {
                let (br2, bec) = (checkpoints[j].r2.unwrap_or(f64::NEG_INFINITY), checkpoints[j].ec);
                if r2 > br2 || (r2 == br2 && c.ec < bec) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best.or(if checkpoints.is_empty() {
        None
    } else {
        Some(checkpoints.len() - 1)
    })
}

/// Seeded stream labels derived from the root seed.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Initializes a model from `hp.seed` and trains it on `data`.
pub fn train(data: &Matrix, model_cfg: &ModelConfig, hp: &HyperParams) -> Result<TrainOutcome> {
    let root = Rng::new(hp.seed, 0);
    let model = GmcrModel::init(model_cfg, data, &mut root.substream(STREAM_INIT))?;
    train_model(model, data, hp)
}

/// Trains an existing model with minibatch Adam and geometric temperature annealing.
pub fn train_model(mut model: GmcrModel, data: &Matrix, hp: &HyperParams) -> Result<TrainOutcome> {
    hp.validate()?;
    if data.nrows() == 0 {
        return Err(GmcrError::argument("training data is empty"));
    }
    if data.ncols() != model.dim() {
        return Err(GmcrError::argument(format!(
            "data has {} channels, model expects {}",
            data.ncols(),
            model.dim()
        )));
    }
    crate::numerics::ensure_finite(data, "training data")?;
    let root = Rng::new(hp.seed, 0);
    let mut batch_rng = root.substream(STREAM_BATCH);
    let mut noise_rng = root.substream(STREAM_NOISE);
    let mut adam: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::new(p.dim(), hp.adam))
        .collect();

    let n = data.nrows();
    let full_batch = hp.batch_size >= n;
    let mut checkpoints = Vec::new();
    let mut trace = Vec::new();
    let mut diverged = false;

    for it in 0..hp.max_iters {
        let tau = hp.temperature(it);
        let batch_owned;
        let batch = if full_batch {
            data
        } else {
            let rows = batch_rng.choose_distinct(n, hp.batch_size);
            batch_owned = data.select(ndarray::Axis(0), &rows);
            &batch_owned
        };
        let step = loss_and_grad(
            batch,
            &model,
            hp,
            Mode::Train {
                rng: &mut noise_rng,
                temperature: tau,
            },
        );
        let (breakdown, grads) = match step {
            Ok(v) => v,
            Err(GmcrError::Numeric { what }) => {
                warn!("training diverged at iteration {it}: {what}");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if it % hp.log_interval == 0 {
            trace.push(TraceEntry {
                iteration: it,
                temperature: tau,
                loss: breakdown,
            });
        }
        let mut ok = true;
        for ((param, grad), state) in model.params_mut().into_iter().zip(&grads.0).zip(&mut adam) {
            if state.step(param, grad).is_err() {
                ok = false;
                break;
            }
        }
        model.dictionary.project_nonnegative();
        model.refresh_input_mask();
        if !ok || !model.is_finite() {
            warn!("non-finite parameters after iteration {it}; stopping at the last checkpoint");
            diverged = true;
            break;
        }

        let done = it + 1;
        if done % hp.checkpoint_interval == 0 || done == hp.max_iters {
            let (r2, ec) = evaluate_model(&model, data, hp.tau_use)?;
            debug!("iteration {done}: loss {:.4e} R2 {:?} EC {ec}", breakdown.total, r2);
            checkpoints.push(SolverCheckpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                iteration: done,
                model: model.clone(),
                hyper: *hp,
                loss: breakdown,
                r2,
                ec,
            });
        }
    }

    for idx in trend_violations(&trace, 100) {
        debug!("smoothed total loss rose at logged step {idx}");
    }

    let best = select_best(&checkpoints);
    Ok(TrainOutcome {
        checkpoints,
        best,
        trace,
        diverged,
    })
}

/// Logged steps where the moving average (over `window` logged entries) of
/// the total loss increased relative to the previous window.
pub fn trend_violations(trace: &[TraceEntry], window: usize) -> Vec<usize> {
    if window == 0 || trace.len() < 2 * window {
        return Vec::new();
    }
    let totals: Vec<f64> = trace.iter().map(|t| t.loss.total).collect();
    let means: Vec<(usize, f64)> = totals
        .chunks(window)
        .enumerate()
        .filter(|(_, c)| c.len() == window)
        .map(|(i, c)| (i * window, c.iter().sum::<f64>() / window as f64))
        .collect();
    means.windows(2).filter(|w| w[1].1 > w[0].1).map(|w| w[1].0).collect()
}
