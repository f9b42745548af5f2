//! Synthetic sparse-component benchmark data.
//!
//! Components are sparse non-negative unit vectors; each mixture superposes a
//! random subset of them with uniform concentrations, then Gaussian noise at a
//! target SNR is added and the result is clamped at zero and rounded to
//! integer counts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::io::{read_json, read_matrix_csv, write_json_atomic, write_matrix_csv};
use crate::model::aggregate;
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// True component number N.
    pub n_true: usize,
    pub d: usize,
    /// Average fraction of zero entries per component.
    pub sparsity_ratio: f64,
    /// Dataset size is `dataset_multiple × n_true`.
    pub dataset_multiple: usize,
    pub conc_low: f64,
    pub conc_high: f64,
    /// `None` disables noise (the data is only rounded).
    pub snr_db: Option<f64>,
    /// Inclusive range of active components per mixture.
    pub active_min: usize,
    pub active_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_true: 16,
            d: 256,
            sparsity_ratio: 0.95,
            dataset_multiple: 8,
            conc_low: 10.0,
            conc_high: 1000.0,
            snr_db: Some(30.0),
            active_min: 2,
            active_max: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        self.dataset_multiple * self.n_true
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_true == 0 || self.dataset_multiple == 0 {
            return Err(GmcrError::argument("n_true and dataset_multiple must be >= 1"));
        }
        if self.d < 2 {
            return Err(GmcrError::argument("component dimension must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.sparsity_ratio) {
            return Err(GmcrError::argument("sparsity ratio must lie in [0, 1)"));
        }
        if (self.d as f64) * (1.0 - self.sparsity_ratio) < 1.0 {
            return Err(GmcrError::argument(format!(
                "d = {} with sparsity {} leaves fewer than one expected non-zero per component",
                self.d, self.sparsity_ratio
            )));
        }
        if !(self.conc_low > 0.0) || !(self.conc_high >= self.conc_low) {
            return Err(GmcrError::argument("need 0 < conc_low <= conc_high"));
        }
        if self.active_min == 0 || self.active_min > self.active_max {
            return Err(GmcrError::argument("need 1 <= active_min <= active_max"));
        }
        if self.active_max > self.n_true {
            return Err(GmcrError::argument(format!(
                "active_max {} exceeds the {} true components",
                self.active_max, self.n_true
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(GmcrError::argument("snr_db must be finite (omit it for no noise)"));
            }
        }
        Ok(())
    }
}

/// Generated data together with everything used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// N × d, unit-norm rows.
    pub s_true: Matrix,
    /// B × N, zero where a component is inactive.
    pub c_true: Matrix,
    /// B × N in {0, 1}.
    pub delta_true: Matrix,
    pub x_clean: Matrix,
    /// Non-negative integer counts.
    pub x_noisy: Matrix,
    /// Pre-clamp noise realization added to `x_clean`.
    pub noise: Matrix,
}

/// Draws `n_true` sparse unit-norm components.
pub fn sample_components(cfg: &SynthConfig, rng: &mut Rng) -> Result<Matrix> {
    cfg.validate()?;
    let keep = 1.0 - cfg.sparsity_ratio;
    let mut s = Matrix::zeros((cfg.n_true, cfg.d));
    for mut row in s.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = if rng.uniform() < keep { rng.normal().abs() } else { 0.0 };
            }
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    Ok(s)
}

/// Random active subsets and concentrations; returns `(delta, concentrations, clean mixtures)`.
pub fn sample_mixtures(cfg: &SynthConfig, s_true: &Matrix, rng: &mut Rng) -> Result<(Matrix, Matrix, Matrix)> {
    cfg.validate()?;
    if s_true.nrows() != cfg.n_true || s_true.ncols() != cfg.d {
        return Err(GmcrError::argument("component matrix does not match the configuration"));
    }
    let b = cfg.n_samples();
    let mut delta = Matrix::zeros((b, cfg.n_true));
    let mut conc = Matrix::zeros((b, cfg.n_true));
    for i in 0..b {
        let k = rng.range_inclusive(cfg.active_min, cfg.active_max);
        for c in rng.choose_distinct(cfg.n_true, k) {
            delta[[i, c]] = 1.0;
            conc[[i, c]] = cfg.conc_low + (cfg.conc_high - cfg.conc_low) * rng.uniform();
        }
    }
    let clean = aggregate(&delta, &conc, s_true)?;
    Ok((delta, conc, clean))
}

/// Noise standard deviation giving `snr_db` for the mean power of `clean`.
pub fn noise_std(clean: &Matrix, snr_db: f64) -> f64 {
    let power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len().max(1) as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Adds Gaussian noise, clamps at zero and rounds to integers.
/// Returns `(noisy, noise_realization)`.
pub fn add_noise_quantize(clean: &Matrix, snr_db: Option<f64>, rng: &mut Rng) -> (Matrix, Matrix) {
    let noise = match snr_db {
        Some(snr) => {
            let std = noise_std(clean, snr);
            Matrix::from_shape_simple_fn(clean.dim(), || std * rng.normal())
        }
        None => Matrix::zeros(clean.dim()),
    };
    let noisy = (clean + &noise).mapv(|v| v.max(0.0).round());
    (noisy, noise)
}

/// Full generation from `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed, 0);
    let s_true = sample_components(cfg, &mut root.substream(1))?;
    let (delta_true, c_true, x_clean) = sample_mixtures(cfg, &s_true, &mut root.substream(2))?;
    let (x_noisy, noise) = add_noise_quantize(&x_clean, cfg.snr_db, &mut root.substream(3));
    Ok(GroundTruth {
        s_true,
        c_true,
        delta_true,
        x_clean,
        x_noisy,
        noise,
    })
}

pub const BUNDLE_MIXTURES: &str = "X_noisy.csv";
pub const BUNDLE_CLEAN: &str = "X_clean.csv";
pub const BUNDLE_COMPONENTS: &str = "S_true.csv";
pub const BUNDLE_CONCENTRATIONS: &str = "C_true.csv";
pub const BUNDLE_SELECTION: &str = "delta_true.csv";
pub const BUNDLE_CONFIG: &str = "config.json";

/// Writes the dataset bundle: CSV matrices plus a JSON sidecar with the configuration.
pub fn write_bundle(dir: &Path, cfg: &SynthConfig, truth: &GroundTruth) -> Result<()> {
    write_matrix_csv(&dir.join(BUNDLE_MIXTURES), &truth.x_noisy, None)?;
    write_matrix_csv(&dir.join(BUNDLE_CLEAN), &truth.x_clean, None)?;
    write_matrix_csv(&dir.join(BUNDLE_COMPONENTS), &truth.s_true, None)?;
    write_matrix_csv(&dir.join(BUNDLE_CONCENTRATIONS), &truth.c_true, None)?;
    write_matrix_csv(&dir.join(BUNDLE_SELECTION), &truth.delta_true, None)?;
    write_json_atomic(&dir.join(BUNDLE_CONFIG), cfg)
}

/// A bundle read back from disk. Ground-truth files are optional.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub config: Option<SynthConfig>,
    pub mixtures: Matrix,
    pub clean: Option<Matrix>,
    pub s_true: Option<Matrix>,
    pub c_true: Option<Matrix>,
    pub delta_true: Option<Matrix>,
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let optional = |name: &str| -> Result<Option<Matrix>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(read_matrix_csv(&p, false)?.1))
        } else {
            Ok(None)
        }
    };
    let cfg_path = dir.join(BUNDLE_CONFIG);
    let config = if cfg_path.exists() {
        Some(read_json(&cfg_path)?)
    } else {
        None
    };
    Ok(Bundle {
        config,
        mixtures: read_matrix_csv(&dir.join(BUNDLE_MIXTURES), false)?.1,
        clean: optional(BUNDLE_CLEAN)?,
        s_true: optional(BUNDLE_COMPONENTS)?,
        c_true: optional(BUNDLE_CONCENTRATIONS)?,
        delta_true: optional(BUNDLE_SELECTION)?,
    })
}
