//! Generative forward pass: selected components, masked by the static gate and
//! weighted by predicted concentrations, are superposed into reconstructed
//! mixtures `X_g = (δ ⊙ C) · (S ⊙ M)`.

use ndarray::{Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dynamic_gate::{sample_gates, EnergyPredictor, SelectionGate};
use crate::error::{GmcrError, Result};
use crate::mlp::{Mlp, MlpTrace};
use crate::numerics::{ensure_finite, sigmoid, softplus, Matrix, Rng};
use crate::static_gate::{apply_mask, GateMask, StaticGateParams};

/// Default usage threshold below which a component is pruned.
pub const DEFAULT_TAU_USE: f64 = 0.05;

/// Learnable non-negative dictionary (K × d) and its static sparsity gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDictionary {
    pub s: Matrix,
    pub gate: StaticGateParams,
}

impl ComponentDictionary {
    pub fn new(s: Matrix, gate: StaticGateParams) -> Result<Self> {
        if s.dim() != gate.dim() {
            return Err(GmcrError::argument(format!(
                "dictionary {:?} and gate {:?} differ in shape",
                s.dim(),
                gate.dim()
            )));
        }
        if s.iter().any(|v| *v < 0.0) {
            return Err(GmcrError::argument("dictionary entries must be non-negative"));
        }
        Ok(ComponentDictionary { s, gate })
    }

    pub fn budget(&self) -> usize {
        self.s.nrows()
    }

    pub fn dim(&self) -> usize {
        self.s.ncols()
    }

    /// `S ⊙ hard mask`, with exact zeros at every closed index.
    pub fn effective_components(&self) -> Matrix {
        apply_mask(&self.s, &self.gate.hardened(), true).expect("shapes checked at construction")
    }

    /// Components whose hardened pattern is entirely zero.
    pub fn empty_components(&self) -> Vec<usize> {
        self.effective_components()
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, row)| row.iter().all(|v| *v == 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Column indicator: 1 where at least one component keeps the channel open.
    pub fn channel_support(&self) -> Matrix {
        let hard = self.gate.hard_mask();
        let mut support = Matrix::zeros((1, self.dim()));
        for (j, col) in hard.axis_iter(Axis(1)).enumerate() {
            if col.iter().any(|v| *v > 0.0) {
                support[[0, j]] = 1.0;
            }
        }
        support
    }

    /// Clamps negative entries to zero (projection onto the feasible set).
    pub fn project_nonnegative(&mut self) {
        self.s.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        ComponentDictionary {
            s: self.s.select(Axis(0), rows),
            gate: self.gate.select_rows(rows),
        }
    }
}

/// Maps a mixture to non-negative concentrations: `output_scale · softplus(net(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPredictor {
    pub net: Mlp,
    pub output_scale: f64,
}

impl ConcentrationPredictor {
    pub fn new(net: Mlp, output_scale: f64) -> Self {
        ConcentrationPredictor { net, output_scale }
    }

    pub fn predict_concentrations(&self, x: &Matrix) -> Result<Matrix> {
        let (z, _) = self.net.forward(x)?;
        Ok(z.mapv(|v| self.output_scale * softplus(v)))
    }
}

/// How gates are evaluated during a forward pass.
#[derive(Debug)]
pub enum Mode<'a> {
    /// Gumbel-perturbed relaxed gates.
    Train { rng: &'a mut Rng, temperature: f64 },
    /// Noise-free relaxed gates.
    Relaxed { temperature: f64 },
    /// Exact 0/1 gates; used for inference and evaluation.
    Hardened,
}

#[derive(Debug, Clone)]
pub struct GeneratedBatch {
    pub x_g: Matrix,
    pub gates: SelectionGate,
    pub concentrations: Matrix,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub features: Matrix,
    pub energy_trace: MlpTrace,
    pub conc_trace: MlpTrace,
    pub conc_logits: Matrix,
    pub gates: SelectionGate,
    pub concentrations: Matrix,
    /// Static mask actually applied (soft or hard depending on mode).
    pub mask: Matrix,
    pub masked: Matrix,
    /// δ ⊙ C
    pub weights: Matrix,
    pub x_g: Matrix,
    /// `None` when hardened.
    pub temperature: Option<f64>,
}

/// The full solver: dictionary, both predictors and the fixed input scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmcrModel {
    pub dictionary: ComponentDictionary,
    pub energy: EnergyPredictor,
    pub concentration: ConcentrationPredictor,
    /// Observed mixtures are divided by this before entering the predictors.
    pub input_scale: f64,
    /// 1 × d channel indicator applied to predictor inputs; refreshed from the
    /// dictionary support during training and frozen afterwards.
    pub input_mask: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Component budget K.
    pub budget: usize,
    /// Hidden width of both predictors.
    pub hidden: usize,
    /// Std of the initial static gate energies.
    pub gate_init_std: f64,
    /// Mean of `e_off - e_on` at initialization.
    pub gate_init_gap: f64,
    /// Gain of the energy predictor's output layer at initialization.
    pub energy_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            budget: 64,
            hidden: 256,
            gate_init_std: 0.5,
            gate_init_gap: 2.0,
            energy_init_gain: 0.1,
        }
    }
}

impl GmcrModel {
    pub fn new(
        dictionary: ComponentDictionary,
        energy: EnergyPredictor,
        concentration: ConcentrationPredictor,
        input_scale: f64,
    ) -> Result<Self> {
        let (k, d) = (dictionary.budget(), dictionary.dim());
        let nets = [&energy.net, &concentration.net];
        if nets.iter().any(|n| n.input_dim() != d || n.output_dim() != k) {
            return Err(GmcrError::argument(format!(
                "predictors must map {d} channels to {k} components"
            )));
        }
        if !(input_scale > 0.0) {
            return Err(GmcrError::argument("input scale must be positive"));
        }
        let input_mask = dictionary.channel_support();
        Ok(GmcrModel {
            dictionary,
            energy,
            concentration,
            input_scale,
            input_mask,
        })
    }

    /// Randomly initialized model with scalings adapted to `data`.
    pub fn init(cfg: &ModelConfig, data: &Matrix, rng: &mut Rng) -> Result<Self> {
        let d = data.ncols();
        let k = cfg.budget;
        if d == 0 || k == 0 || data.nrows() == 0 {
            return Err(GmcrError::argument("model init needs non-empty data and budget"));
        }
        ensure_finite(data, "training data")?;
        let s = crate::numerics::gaussian(rng, 0.0, 1.0 / (d as f64).sqrt(), (k, d))?.mapv(f64::abs);
        let gate = StaticGateParams::random(k, d, cfg.gate_init_gap, cfg.gate_init_std, rng)?;
        let energy = Mlp::random(d, cfg.hidden, k, cfg.energy_init_gain, rng)?;
        let mut conc = Mlp::random(d, cfg.hidden, k, 1.0, rng)?;
        conc.w2.mapv_inplace(|v| 0.1 * v);

        let n = data.len() as f64;
        let rms = (data.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let input_scale = if rms > 0.0 { rms } else { 1.0 };
        // Match the initial mean reconstruction to the data mean, assuming half
        // the gates and half the mask entries are open.
        let data_mean = data.sum() / n;
        let s_mean = s.sum() / s.len() as f64;
        let c0 = data_mean / (0.25 * k as f64 * s_mean).max(1e-12);
        let output_scale = if c0 > 0.0 { c0 / std::f64::consts::LN_2 } else { 1.0 };

        GmcrModel::new(
            ComponentDictionary::new(s, gate)?,
            EnergyPredictor::new(energy),
            ConcentrationPredictor::new(conc, output_scale),
            input_scale,
        )
    }

    pub fn budget(&self) -> usize {
        self.dictionary.budget()
    }

    pub fn dim(&self) -> usize {
        self.dictionary.dim()
    }

    /// Predictor input: channels outside `input_mask` are blanked, the rest
    /// divided by `input_scale`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.dim() {
            return Err(GmcrError::argument(format!(
                "expected {} channels, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(x * &(&self.input_mask / self.input_scale))
    }

    /// Re-derives `input_mask` from the channels the hardened dictionary can explain.
    pub fn refresh_input_mask(&mut self) {
        self.input_mask = self.dictionary.channel_support();
    }

    pub fn predict_energies(&self, x: &Matrix) -> Result<Matrix> {
        self.energy.predict_energies(&self.features(x)?)
    }

    pub fn predict_concentrations(&self, x: &Matrix) -> Result<Matrix> {
        self.concentration.predict_concentrations(&self.features(x)?)
    }

    /// Noise-free selection probabilities sigmoid(−E).
    pub fn selection_probabilities(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.predict_energies(x)?.mapv(|e| sigmoid(-e)))
    }

    pub fn forward(&self, x: &Matrix, mode: Mode<'_>) -> Result<GeneratedBatch> {
        let t = self.forward_trace(x, mode)?;
        Ok(GeneratedBatch {
            x_g: t.x_g,
            gates: t.gates,
            concentrations: t.concentrations,
        })
    }

    /// Hardened reconstruction of `x`.
    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, Mode::Hardened)?.x_g)
    }

    pub(crate) fn forward_trace(&self, x: &Matrix, mode: Mode<'_>) -> Result<ForwardTrace> {
        let features = self.features(x)?;
        let (energies, energy_trace) = self.energy.net.forward(&features)?;
        let (conc_logits, conc_trace) = self.concentration.net.forward(&features)?;
        let scale = self.concentration.output_scale;
        let concentrations = conc_logits.mapv(|v| scale * softplus(v));

        let (gates, mask, temperature): (SelectionGate, GateMask, Option<f64>) = match mode {
            Mode::Train { rng, temperature } => {
                let gates = sample_gates(&energies, Some(&mut *rng), temperature)?;
                let mask = self.dictionary.gate.mask_at(temperature, Some(rng))?;
                (gates, mask, Some(temperature))
            }
            Mode::Relaxed { temperature } => (
                sample_gates(&energies, None, temperature)?,
                self.dictionary.gate.mask_at(temperature, None)?,
                Some(temperature),
            ),
            Mode::Hardened => {
                let mut g = sample_gates(&energies, None, 0.0)?;
                g.delta_soft = g.delta_hard.clone();
                (g, self.dictionary.gate.hardened(), None)
            }
        };
        let hardened = temperature.is_none();
        let masked = apply_mask(&self.dictionary.s, &mask, hardened)?;
        let delta = if hardened { &gates.delta_hard } else { &gates.delta_soft };
        let weights = delta * &concentrations;
        let x_g = weights.dot(&masked);
        ensure_finite(&x_g, "generated mixtures")?;
        Ok(ForwardTrace {
            features,
            energy_trace,
            conc_trace,
            conc_logits,
            gates,
            concentrations,
            mask: if hardened { mask.hard } else { mask.soft },
            masked,
            weights,
            x_g,
            temperature,
        })
    }

    /// Mean noise-free selection probability of each component over `data`.
    pub fn usage(&self, data: &Matrix) -> Result<Vec<f64>> {
        let probs = self.selection_probabilities(data)?;
        let n = probs.nrows().max(1) as f64;
        Ok(probs.sum_axis(Axis(0)).iter().map(|v| v / n).collect())
    }

    /// Keeps only the listed components.
    pub fn select_components(&self, keep: &[usize]) -> Self {
        GmcrModel {
            dictionary: self.dictionary.select_rows(keep),
            energy: EnergyPredictor::new(self.energy.net.select_outputs(keep)),
            concentration: ConcentrationPredictor::new(
                self.concentration.net.select_outputs(keep),
                self.concentration.output_scale,
            ),
            input_scale: self.input_scale,
            input_mask: self.input_mask.clone(),
        }
    }

    /// Drops components whose mean selection probability over `data` is below
    /// `tau_use`. The retained count is the estimated component number.
    pub fn prune(&self, data: &Matrix, tau_use: f64) -> Result<GmcrModel> {
        let keep = retained_components(&self.usage(data)?, tau_use);
        Ok(self.select_components(&keep))
    }

    pub fn estimated_components(&self, data: &Matrix, tau_use: f64) -> Result<usize> {
        Ok(retained_components(&self.usage(data)?, tau_use).len())
    }

    /// Parameter tensors in a fixed order shared with [`ModelGrads`](crate::optimizer::ModelGrads).
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.dictionary.s,
            &self.dictionary.gate.e_on,
            &self.dictionary.gate.e_off,
        ];
        out.extend(self.energy.net.params());
        out.extend(self.concentration.net.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.dictionary.s,
            &mut self.dictionary.gate.e_on,
            &mut self.dictionary.gate.e_off,
        ];
        out.extend(self.energy.net.params_mut());
        out.extend(self.concentration.net.params_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

pub const PARAM_GROUP_NAMES: [&str; 11] = [
    "dictionary",
    "static_energy_on",
    "static_energy_off",
    "energy_w1",
    "energy_b1",
    "energy_w2",
    "energy_b2",
    "concentration_w1",
    "concentration_b1",
    "concentration_w2",
    "concentration_b2",
];

/// Indices whose usage reaches `tau_use`.
pub fn retained_components(usage: &[f64], tau_use: f64) -> Vec<usize> {
    usage
        .iter()
        .enumerate()
        .filter(|(_, u)| **u >= tau_use)
        .map(|(i, _)| i)
        .collect()
}

/// Superposition `X_g = (δ ⊙ C) · S'` for given gates, concentrations and masked components.
pub fn aggregate(delta: &Matrix, concentrations: &Matrix, components: &Matrix) -> Result<Matrix> {
    if delta.dim() != concentrations.dim() || delta.ncols() != components.nrows() {
        return Err(GmcrError::argument("aggregate: inconsistent shapes"));
    }
    let mut weights = delta.clone();
    Zip::from(&mut weights).and(concentrations).for_each(|w, &c| *w *= c);
    Ok(weights.dot(components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, concatenate, s};

    fn toy_model(k: usize, d: usize, seed: u64) -> (GmcrModel, Matrix) {
        let mut rng = Rng::new(seed, 0);
        let data = gaussian(&mut rng, 0.0, 3.0, (5, d)).unwrap().mapv(f64::abs);
        let cfg = ModelConfig {
            budget: k,
            hidden: 6,
            gate_init_std: 1.0,
            gate_init_gap: 0.0,
            energy_init_gain: 1.0,
        };
        (GmcrModel::init(&cfg, &data, &mut rng).unwrap(), data)
    }

    #[test]
    fn single_term_aggregation() {
        let x = aggregate(&array![[1.0]], &array![[2.0]], &array![[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(x, array![[0.0, 2.0, 0.0]]);
    }

    #[test]
    fn two_components_add() {
        let s = array![[1.0, 0.0, 2.0], [0.0, 3.0, 1.0]];
        let x = aggregate(&array![[1.0, 1.0]], &array![[2.0, 0.5]], &s).unwrap();
        let expected = &s.row(0) * 2.0 + &s.row(1) * 0.5;
        assert_eq!(x.row(0), expected);
    }

    #[test]
    fn hardened_forward_matches_triple_loop() {
        let (model, data) = toy_model(4, 16, 3);
        let x = data.slice(s![0..2, ..]).to_owned();
        let out = model.forward(&x, Mode::Hardened).unwrap();
        let comps = model.dictionary.effective_components();
        let delta = &out.gates.delta_hard;
        let c = &out.concentrations;
        for b in 0..2 {
            for j in 0..16 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += delta[[b, i]] * c[[b, i]] * comps[[i, j]];
                }
                assert_abs_diff_eq!(out.x_g[[b, j]], acc, epsilon = 1e-9 * (1.0 + acc.abs()));
            }
        }
        assert!(out.x_g.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn forward_linear_in_dictionary() {
        let (model, data) = toy_model(3, 7, 4);
        let mut doubled = model.clone();
        doubled.dictionary.s.mapv_inplace(|v| 2.0 * v);
        let a = model.forward(&data, Mode::Relaxed { temperature: 0.5 }).unwrap().x_g;
        let b = doubled.forward(&data, Mode::Relaxed { temperature: 0.5 }).unwrap().x_g;
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn zero_network_concentrations() {
        let f = ConcentrationPredictor::new(Mlp::zeros(4, 3, 2), 1.0);
        let c = f.predict_concentrations(&Matrix::ones((3, 4))).unwrap();
        for v in c.iter() {
            assert_abs_diff_eq!(*v, std::f64::consts::LN_2, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_set_concentration_network() {
        let net = Mlp {
            w1: array![[2.0]],
            b1: array![[-1.0]],
            w2: array![[1.5]],
            b2: array![[0.25]],
        };
        let c = ConcentrationPredictor::new(net, 3.0)
            .predict_concentrations(&array![[1.0]])
            .unwrap();
        // pre = 1, silu(1) = sigmoid(1), z = 1.5 sigmoid(1) + 0.25
        let z = 1.5 / (1.0 + (-1.0f64).exp()) + 0.25;
        assert_abs_diff_eq!(c[[0, 0]], 3.0 * (1.0 + z.exp()).ln(), epsilon = 1e-14);
    }

    #[test]
    fn duplicated_rows_duplicate_predictions() {
        let (model, data) = toy_model(3, 5, 9);
        let row = data.slice(s![0..1, ..]).to_owned();
        let x = concatenate![Axis(0), row, row];
        let c = model.predict_concentrations(&x).unwrap();
        assert_eq!(c.row(0), c.row(1));
        assert!(c.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let (model, _) = toy_model(3, 5, 9);
        assert!(matches!(
            model.forward(&Matrix::zeros((2, 4)), Mode::Hardened),
            Err(GmcrError::Argument(_))
        ));
    }

    #[test]
    fn pruning_by_usage_threshold() {
        assert_eq!(retained_components(&[1.0, 1.0, 1.0], 0.05), vec![0, 1, 2]);
        assert!(retained_components(&[0.0, 0.0], 0.05).is_empty());
        assert_eq!(retained_components(&[0.9, 0.01, 0.7], 0.05), vec![0, 2]);
    }

    #[test]
    fn prune_drops_unused_components() {
        let (mut model, data) = toy_model(3, 5, 11);
        model.energy.net.w2.fill(0.0);
        model.energy.net.b2 = array![[-5.0, 8.0, 0.0]];
        assert_eq!(model.estimated_components(&data, 0.05).unwrap(), 2);
        let pruned = model.prune(&data, 0.05).unwrap();
        assert_eq!(pruned.budget(), 2);
        assert_eq!(pruned.dictionary.s.row(1), model.dictionary.s.row(2));
        // the pruned component was never hard-selected, so reconstructions agree
        let a = model.reconstruct(&data).unwrap();
        let b = pruned.reconstruct(&data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dictionary_rejects_negative_entries() {
        let gate = StaticGateParams::zeros(1, 2);
        assert!(ComponentDictionary::new(array![[1.0, -0.1]], gate).is_err());
    }
}
