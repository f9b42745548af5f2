//! Contamination removal for chromatograms.
//!
//! A solver is trained per retention-time window on clean runs only. Cleaning
//! a polluted run keeps the solver's hardened reconstruction of each scan:
//! signal built from clean-process components is reproduced, while pollution
//! with its own components is not. The difference is returned as the
//! residual, so `cleaned + residual == polluted` holds entry by entry.

use std::ops::Range;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmcrError, Result};
use crate::io::{read_json, read_matrix_csv, write_atomic, write_json_atomic, write_matrix_csv};
use crate::metrics::r_squared;
use crate::model::{GmcrModel, ModelConfig};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::optimizer::{train, HyperParams};

/// Largest integer below which every integer is exactly representable.
const EXACT_INT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunLabel {
    Clean,
    Polluted,
    Unknown,
}

/// Scans × channels intensity matrix with its axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromatogram {
    /// Retention time of every scan, seconds, strictly increasing.
    pub rt: Vec<f64>,
    /// m/z label of every channel.
    pub mz: Vec<u32>,
    /// Non-negative integer counts.
    pub intensities: Matrix,
    pub label: RunLabel,
}

impl Chromatogram {
    pub fn new(rt: Vec<f64>, mz: Vec<u32>, intensities: Matrix, label: RunLabel) -> Result<Self> {
        if rt.len() != intensities.nrows() {
            return Err(GmcrError::argument(format!(
                "{} retention times for {} scans",
                rt.len(),
                intensities.nrows()
            )));
        }
        if mz.len() != intensities.ncols() {
            return Err(GmcrError::argument(format!(
                "{} m/z labels for {} channels",
                mz.len(),
                intensities.ncols()
            )));
        }
        if rt.iter().any(|t| !t.is_finite()) || rt.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GmcrError::argument(
                "retention times must be finite and strictly increasing",
            ));
        }
        if let Some(v) = intensities
            .iter()
            .find(|v| !(**v >= 0.0 && v.fract() == 0.0 && **v < EXACT_INT))
        {
            return Err(GmcrError::argument(format!(
                "intensities must be non-negative integer counts, found {v}"
            )));
        }
        Ok(Chromatogram {
            rt,
            mz,
            intensities,
            label,
        })
    }

    pub fn n_scans(&self) -> usize {
        self.rt.len()
    }

    pub fn channel_index(&self, mz: u32) -> Option<usize> {
        self.mz.iter().position(|&m| m == mz)
    }

    /// Reads the CSV layout: header `rt,<mz>,<mz>,…`, one scan per row.
    pub fn read_csv(path: &Path, label: RunLabel) -> Result<Self> {
        let (header, m) = read_matrix_csv(path, true)?;
        let header = header.unwrap_or_default();
        if header.len() < 2 || m.ncols() != header.len() {
            return Err(GmcrError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "expected a retention-time column followed by m/z columns".into(),
            });
        }
        let mz = header[1..]
            .iter()
            .map(|h| {
                h.parse::<u32>().map_err(|_| GmcrError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("m/z label {h:?} is not an integer"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rt = m.column(0).to_vec();
        let intensities = m.slice(ndarray::s![.., 1..]).to_owned();
        Chromatogram::new(rt, mz, intensities, label).map_err(|e| GmcrError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_layout(path, &self.rt, &self.mz, &self.intensities)
    }
}

/// Writes any scans × channels matrix in the chromatogram CSV layout.
pub fn write_layout(path: &Path, rt: &[f64], mz: &[u32], values: &Matrix) -> Result<()> {
    let mut full = Matrix::zeros((values.nrows(), values.ncols() + 1));
    full.column_mut(0).assign(&ndarray::ArrayView1::from(rt));
    full.slice_mut(ndarray::s![.., 1..]).assign(values);
    let mut header = vec!["rt".to_string()];
    header.extend(mz.iter().map(u32::to_string));
    write_matrix_csv(path, &full, Some(&header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: RunLabel,
}

/// Directory manifest listing run files (relative to the manifest) and labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    /// Reads every listed run, resolving paths against `base`.
    pub fn read_runs(&self, base: &Path) -> Result<Vec<Chromatogram>> {
        self.runs
            .iter()
            .map(|e| Chromatogram::read_csv(&base.join(&e.path), e.label))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

/// Consecutive half-open retention-time windows `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_length: f64,
    pub windows: Vec<Window>,
}

pub const DEFAULT_WINDOW_SECONDS: f64 = 60.0;

impl WindowPlan {
    /// Windows aligned to multiples of `length` covering `[rt_min, rt_max]`.
    pub fn covering(rt_min: f64, rt_max: f64, length: f64) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(GmcrError::argument("window length must be positive"));
        }
        if !(rt_min <= rt_max) || !rt_min.is_finite() || !rt_max.is_finite() {
            return Err(GmcrError::argument("invalid retention-time range"));
        }
        let first = (rt_min / length).floor() as i64;
        let last = (rt_max / length).floor() as i64;
        let windows = (first..=last)
            .map(|k| Window {
                start: k as f64 * length,
                end: (k + 1) as f64 * length,
            })
            .collect();
        Ok(WindowPlan {
            window_length: length,
            windows,
        })
    }

    /// A single window holding every scan of the given runs.
    pub fn single(runs: &[Chromatogram]) -> Result<Self> {
        let (lo, hi) = rt_range(runs)?;
        Ok(WindowPlan {
            window_length: hi - lo + 1.0,
            windows: vec![Window {
                start: lo,
                end: hi + 1.0,
            }],
        })
    }

    pub fn for_runs(runs: &[Chromatogram], length: f64) -> Result<Self> {
        let (lo, hi) = rt_range(runs)?;
        WindowPlan::covering(lo, hi, length)
    }

    /// Scan rows of `chrom` inside window `w`.
    pub fn rows(&self, chrom: &Chromatogram, w: usize) -> Range<usize> {
        let win = self.windows[w];
        let lo = chrom.rt.partition_point(|&t| t < win.start);
        let hi = chrom.rt.partition_point(|&t| t < win.end);
        lo..hi
    }

    fn check_covers(&self, chrom: &Chromatogram) -> Result<()> {
        let (Some(first), Some(last)) = (self.windows.first(), self.windows.last()) else {
            return Err(GmcrError::argument("window plan is empty"));
        };
        match (chrom.rt.first(), chrom.rt.last()) {
            (Some(&a), Some(&b)) if a < first.start || b >= last.end => Err(GmcrError::argument(format!(
                "scans span {a}..{b} s, plan covers {}..{} s",
                first.start, last.end
            ))),
            _ => Ok(()),
        }
    }
}

fn rt_range(runs: &[Chromatogram]) -> Result<(f64, f64)> {
    let lo = runs
        .iter()
        .filter_map(|c| c.rt.first())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = runs
        .iter()
        .filter_map(|c| c.rt.last())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if lo > hi {
        return Err(GmcrError::argument("no scans to plan windows over"));
    }
    Ok((lo, hi))
}

/// Scan rows of one window; each row is one mixture sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBatch {
    pub window: usize,
    pub rows: Range<usize>,
    pub data: Matrix,
}

pub fn window_split(chrom: &Chromatogram, plan: &WindowPlan) -> Result<Vec<MixtureBatch>> {
    plan.check_covers(chrom)?;
    let mut out = Vec::new();
    for w in 0..plan.windows.len() {
        let rows = plan.rows(chrom, w);
        if rows.is_empty() {
            warn!("window {w} holds no scans; skipped");
            continue;
        }
        let data = chrom.intensities.slice(ndarray::s![rows.clone(), ..]).to_owned();
        out.push(MixtureBatch { window: w, rows, data });
    }
    Ok(out)
}

/// Solver for one window. `model` is `None` when the window's clean data is
/// all zero, in which case it reconstructs zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSolver {
    pub window: usize,
    pub start: f64,
    pub end: f64,
    pub n_train: usize,
    pub ec: usize,
    pub r2: Option<f64>,
    pub model: Option<GmcrModel>,
}

impl WindowSolver {
    fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        match &self.model {
            Some(m) => {
                if m.dim() != x.ncols() {
                    return Err(GmcrError::argument(format!(
                        "window {} solver expects {} channels, got {}",
                        self.window,
                        m.dim(),
                        x.ncols()
                    )));
                }
                m.reconstruct(x)
            }
            None => Ok(Matrix::zeros(x.dim())),
        }
    }
}

/// Trains one solver per window on the union of clean scans in it. Windows
/// run concurrently; each seed is derived from `hp.seed` and the window start,
/// so a window's solver does not depend on which other windows are fitted.
pub fn fit_clean_process(
    clean: &[Chromatogram],
    plan: &WindowPlan,
    model_cfg: &ModelConfig,
    hp: &HyperParams,
) -> Result<Vec<WindowSolver>> {
    if clean.is_empty() {
        return Err(GmcrError::argument("no clean runs to train on"));
    }
    let d = clean[0].mz.len();
    if clean.iter().any(|c| c.mz != clean[0].mz) {
        return Err(GmcrError::argument("clean runs have different m/z axes"));
    }
    for c in clean {
        plan.check_covers(c)?;
    }
    (0..plan.windows.len())
        .into_par_iter()
        .map(|w| {
            let blocks: Vec<_> = clean
                .iter()
                .map(|c| c.intensities.slice(ndarray::s![plan.rows(c, w), ..]))
                .collect();
            let data = ndarray::concatenate(ndarray::Axis(0), &blocks).unwrap_or_else(|_| Matrix::zeros((0, d)));
            fit_window(w, plan.windows[w], &data, model_cfg, hp)
        })
        .collect()
}

fn fit_window(w: usize, win: Window, data: &Matrix, model_cfg: &ModelConfig, hp: &HyperParams) -> Result<WindowSolver> {
    let trivial = WindowSolver {
        window: w,
        start: win.start,
        end: win.end,
        n_train: data.nrows(),
        ec: 0,
        r2: None,
        model: None,
    };
    if data.nrows() == 0 {
        warn!("window {w} has no clean scans; it will reconstruct zeros");
        return Ok(trivial);
    }
    if data.iter().all(|&v| v == 0.0) {
        return Ok(trivial);
    }
    let mut hp = *hp;
    hp.seed = derive_seed(hp.seed, win.start.to_bits());
    let outcome = train(data, model_cfg, &hp)?;
    let best = outcome
        .best_checkpoint()
        .ok_or_else(|| GmcrError::numeric(format!("window {w} produced no checkpoint")))?;
    let model = best.pruned_model(data)?;
    Ok(WindowSolver {
        ec: model.budget(),
        r2: best.r2,
        model: Some(model),
        ..trivial
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: usize,
    pub start: f64,
    pub end: f64,
    pub n_scans: usize,
    pub ec: usize,
    /// Reconstruction R² against the input scans; `None` when undefined.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanResult {
    pub cleaned: Chromatogram,
    /// `polluted − cleaned`, the pollution estimate.
    pub residual: Matrix,
    pub per_window: Vec<WindowMetrics>,
}

impl CleanResult {
    /// Writes `cleaned.csv`, `residual.csv` and `windows.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.cleaned.write_csv(&dir.join("cleaned.csv"))?;
        write_layout(
            &dir.join("residual.csv"),
            &self.cleaned.rt,
            &self.cleaned.mz,
            &self.residual,
        )?;
        write_json_atomic(&dir.join("windows.json"), &self.per_window)
    }
}

/// How a window's estimate turns into the cleaned scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CleanMode {
    /// Keep the clean-process reconstruction.
    Reconstruct,
    /// Subtract a pollution-process reconstruction.
    Subtract,
}

/// Cleans `polluted` window by window with solvers from [`fit_clean_process`].
pub fn clean(polluted: &Chromatogram, plan: &WindowPlan, solvers: &[WindowSolver]) -> Result<CleanResult> {
    clean_with(polluted, plan, solvers, CleanMode::Reconstruct)
}

pub fn clean_with(
    polluted: &Chromatogram,
    plan: &WindowPlan,
    solvers: &[WindowSolver],
    mode: CleanMode,
) -> Result<CleanResult> {
    plan.check_covers(polluted)?;
    if solvers.len() != plan.windows.len() || solvers.iter().enumerate().any(|(i, s)| s.window != i) {
        return Err(GmcrError::argument(format!(
            "{} solvers for {} windows",
            solvers.len(),
            plan.windows.len()
        )));
    }
    let x = &polluted.intensities;
    let mut cleaned = Matrix::zeros(x.dim());
    let mut per_window = Vec::new();
    for batch in window_split(polluted, plan)? {
        let solver = &solvers[batch.window];
        let estimate = solver.reconstruct(&batch.data)?;
        let r2 = r_squared(&batch.data, &estimate).ok();
        let kept = match mode {
            CleanMode::Reconstruct => estimate,
            CleanMode::Subtract => &batch.data - &estimate,
        };
        // integer counts keep polluted - cleaned exact
        let kept = kept.mapv(|v| v.max(0.0).round().min(EXACT_INT - 1.0));
        cleaned.slice_mut(ndarray::s![batch.rows.clone(), ..]).assign(&kept);
        per_window.push(WindowMetrics {
            window: batch.window,
            start: plan.windows[batch.window].start,
            end: plan.windows[batch.window].end,
            n_scans: batch.rows.len(),
            ec: solver.ec,
            r2,
        });
    }
    let residual = x - &cleaned;
    let cleaned = Chromatogram {
        rt: polluted.rt.clone(),
        mz: polluted.mz.clone(),
        intensities: cleaned,
        label: RunLabel::Unknown,
    };
    Ok(CleanResult {
        cleaned,
        residual,
        per_window,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReduction {
    pub mz: u32,
    pub before: f64,
    pub after: f64,
    /// Percent of the channel's total intensity removed; 0 for an empty channel.
    pub reduction_pct: f64,
}

pub fn pollution_channels_report(result: &CleanResult, channels: &[u32]) -> Result<Vec<ChannelReduction>> {
    channels
        .iter()
        .map(|&mz| {
            let j = result
                .cleaned
                .channel_index(mz)
                .ok_or_else(|| GmcrError::argument(format!("m/z {mz} is not a channel")))?;
            let after = result.cleaned.intensities.column(j).sum();
            let before = after + result.residual.column(j).sum();
            let reduction_pct = if before == 0.0 {
                0.0
            } else {
                100.0 * (before - after) / before
            };
            Ok(ChannelReduction {
                mz,
                before,
                after,
                reduction_pct,
            })
        })
        .collect()
}

pub fn write_channel_report(path: &Path, rows: &[ChannelReduction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| GmcrError::argument(format!("csv encoding: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| GmcrError::argument(format!("csv encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// True when no channel carries signal in both component sets.
pub fn supports_disjoint(a: &Matrix, b: &Matrix) -> bool {
    (0..a.ncols()).all(|j| {
        let in_a = a.column(j).iter().any(|&v| v != 0.0);
        let in_b = b.column(j).iter().any(|&v| v != 0.0);
        !(in_a && in_b)
    })
}

/// Synthetic contamination scenario: a clean process and a pollution process
/// on exclusive channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContaminationConfig {
    pub n_clean_components: usize,
    pub n_pollution_components: usize,
    pub channels: usize,
    pub first_mz: u32,
    /// Channels reserved for pollution.
    pub pollution_channels: usize,
    pub sparsity_ratio: f64,
    pub n_clean_runs: usize,
    pub n_polluted_runs: usize,
    pub duration_s: f64,
    pub scan_interval_s: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for ContaminationConfig {
    fn default() -> Self {
        ContaminationConfig {
            n_clean_components: 12,
            n_pollution_components: 2,
            channels: 120,
            first_mz: 12,
            pollution_channels: 6,
            sparsity_ratio: 0.9,
            n_clean_runs: 4,
            n_polluted_runs: 2,
            duration_s: 120.0,
            scan_interval_s: 0.5,
            snr_db: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContaminationFixture {
    pub clean_runs: Vec<Chromatogram>,
    pub polluted_runs: Vec<Chromatogram>,
    /// Noise-free clean-process part of each polluted run.
    pub polluted_clean_part: Vec<Matrix>,
    pub s_clean: Matrix,
    pub s_pollution: Matrix,
    pub pollution_mz: Vec<u32>,
    pub clean_mz: Vec<u32>,
}

struct Elution {
    apex: f64,
    width: f64,
}

impl ContaminationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clean_components == 0 || self.n_clean_runs == 0 {
            return Err(GmcrError::argument("need at least one clean component and run"));
        }
        if self.pollution_channels == 0 && self.n_pollution_components > 0 {
            return Err(GmcrError::argument("pollution components need reserved channels"));
        }
        if self.pollution_channels + 2 > self.channels {
            return Err(GmcrError::argument("too few channels for the clean process"));
        }
        if !(0.0..1.0).contains(&self.sparsity_ratio) {
            return Err(GmcrError::argument("sparsity ratio must lie in [0, 1)"));
        }
        if !(self.duration_s > 0.0 && self.scan_interval_s > 0.0) {
            return Err(GmcrError::argument("duration and scan interval must be positive"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<ContaminationFixture> {
        self.validate()?;
        let root = Rng::new(self.seed, 0);
        let mut rng = root.substream(1);
        let d = self.channels;
        let reserved = rng.choose_distinct(d, self.pollution_channels);
        let mut is_reserved = vec![false; d];
        reserved.iter().for_each(|&j| is_reserved[j] = true);
        let open: Vec<usize> = (0..d).filter(|&j| !is_reserved[j]).collect();

        let sparse_rows = |n: usize, pool: &[usize], keep: f64, rng: &mut Rng| {
            let mut s = Matrix::zeros((n, d));
            for mut row in s.rows_mut() {
                loop {
                    for &j in pool {
                        if rng.uniform() < keep {
                            row[j] = 0.1 + rng.normal().abs();
                        }
                    }
                    let norm = row.dot(&row).sqrt();
                    if norm > 0.0 {
                        row.mapv_inplace(|v| v / norm);
                        break;
                    }
                }
            }
            s
        };
        let s_clean = sparse_rows(self.n_clean_components, &open, 1.0 - self.sparsity_ratio, &mut rng);
        let s_pollution = sparse_rows(self.n_pollution_components, &reserved, 0.5, &mut rng);

        let elution: Vec<Elution> = (0..self.n_clean_components)
            .map(|_| Elution {
                apex: self.duration_s * rng.uniform(),
                width: 2.0 + 4.0 * rng.uniform(),
            })
            .collect();
        let n_scans = (self.duration_s / self.scan_interval_s).round() as usize;
        let rt: Vec<f64> = (0..n_scans).map(|i| i as f64 * self.scan_interval_s).collect();
        let mz: Vec<u32> = (0..d).map(|j| self.first_mz + j as u32).collect();

        let mut run_rng = root.substream(2);
        let mut noise_rng = root.substream(3);
        let mut make_run = |polluted: bool| -> Result<(Chromatogram, Matrix)> {
            let mut conc = Matrix::zeros((n_scans, self.n_clean_components));
            for (i, e) in elution.iter().enumerate() {
                let apex = e.apex + 3.0 * (run_rng.uniform() - 0.5);
                let height = 100.0 + 2000.0 * run_rng.uniform();
                for (r, &t) in rt.iter().enumerate() {
                    let z = (t - apex) / e.width;
                    conc[[r, i]] = height * (-0.5 * z * z).exp();
                }
            }
            let clean_part = conc.dot(&s_clean);
            let mut signal = clean_part.clone();
            if polluted {
                for p in 0..self.n_pollution_components {
                    let level = 100.0 + 300.0 * run_rng.uniform();
                    for (r, &t) in rt.iter().enumerate() {
                        let bleed = level * (0.5 + t / self.duration_s);
                        signal.row_mut(r).scaled_add(bleed, &s_pollution.row(p));
                    }
                }
            }
            let std = crate::synth::noise_std(&clean_part, self.snr_db);
            let noisy = signal.mapv(|v| (v + std * noise_rng.normal()).max(0.0).round());
            let label = if polluted { RunLabel::Polluted } else { RunLabel::Clean };
            Ok((Chromatogram::new(rt.clone(), mz.clone(), noisy, label)?, clean_part))
        };
        let mut clean_runs = Vec::new();
        for _ in 0..self.n_clean_runs {
            clean_runs.push(make_run(false)?.0);
        }
        let mut polluted_runs = Vec::new();
        let mut polluted_clean_part = Vec::new();
        for _ in 0..self.n_polluted_runs {
            let (c, part) = make_run(true)?;
            polluted_runs.push(c);
            polluted_clean_part.push(part);
        }
        let support = |s: &Matrix| -> Vec<u32> {
            (0..d)
                .filter(|&j| s.column(j).iter().any(|&v| v != 0.0))
                .map(|j| mz[j])
                .collect()
        };
        Ok(ContaminationFixture {
            clean_mz: support(&s_clean),
            pollution_mz: support(&s_pollution),
            clean_runs,
            polluted_runs,
            polluted_clean_part,
            s_clean,
            s_pollution,
        })
    }
}

impl ContaminationFixture {
    /// Writes every run as CSV plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let mut manifest = Manifest::default();
        let runs = self.clean_runs.iter().chain(&self.polluted_runs);
        for (i, run) in runs.enumerate() {
            let name = match run.label {
                RunLabel::Clean => format!("clean_{i:03}.csv"),
                _ => format!("polluted_{i:03}.csv"),
            };
            run.write_csv(&dir.join(&name))?;
            manifest.runs.push(ManifestEntry {
                path: PathBuf::from(name),
                label: run.label,
            });
        }
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn chrom(rt: Vec<f64>, d: usize) -> Chromatogram {
        let n = rt.len();
        let m = Matrix::from_shape_fn((n, d), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        Chromatogram::new(rt, (12..12 + d as u32).collect(), m, RunLabel::Clean).unwrap()
    }

    #[test]
    fn fifty_five_minute_run_gives_55_windows() {
        let n = 3375;
        let rt: Vec<f64> = (0..n).map(|i| i as f64 * 3300.0 / n as f64).collect();
        let c = chrom(rt, 3);
        let plan = WindowPlan::for_runs(std::slice::from_ref(&c), 60.0).unwrap();
        let batches = window_split(&c, &plan).unwrap();
        assert_eq!(batches.len(), 55);
        assert_eq!(batches.iter().map(|b| b.rows.len()).sum::<usize>(), n);
        let parts: Vec<_> = batches.iter().map(|b| b.data.view()).collect();
        let back = ndarray::concatenate(ndarray::Axis(0), &parts).unwrap();
        assert_eq!(back, c.intensities);
    }

    #[test]
    fn single_window_is_whole_matrix() {
        let c = chrom(vec![0.5, 1.0, 7.0, 30.0], 4);
        let plan = WindowPlan::single(std::slice::from_ref(&c)).unwrap();
        let batches = window_split(&c, &plan).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].data, c.intensities);
    }

    #[test]
    fn windows_partition_without_gaps() {
        let plan = WindowPlan::covering(13.0, 250.0, 60.0).unwrap();
        assert_eq!(plan.windows.first().unwrap().start, 0.0);
        assert!(plan.windows.last().unwrap().end > 250.0);
        for w in plan.windows.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn empty_windows_are_skipped() {
        let c = chrom(vec![1.0, 2.0, 130.0], 2);
        let plan = WindowPlan::for_runs(std::slice::from_ref(&c), 60.0).unwrap();
        assert_eq!(plan.windows.len(), 3);
        let b = window_split(&c, &plan).unwrap();
        assert_eq!(b.iter().map(|b| b.window).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn chromatogram_validation() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(Chromatogram::new(vec![1.0, 1.0], vec![1, 2], m.clone(), RunLabel::Clean).is_err());
        assert!(Chromatogram::new(vec![1.0, 2.0], vec![1], m.clone(), RunLabel::Clean).is_err());
        assert!(Chromatogram::new(vec![1.0, 2.0], vec![1, 2], m.mapv(|v| v + 0.5), RunLabel::Clean).is_err());
        assert!(Chromatogram::new(vec![1.0, 2.0], vec![1, 2], -m, RunLabel::Clean).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = chrom(vec![0.25, 0.5, 0.75], 3);
        let p = dir.path().join("run.csv");
        c.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("rt,12,13,14\n0.25,"));
        assert_eq!(Chromatogram::read_csv(&p, RunLabel::Clean).unwrap(), c);
        std::fs::write(&p, "rt,12,abc\n0,1,2\n").unwrap();
        assert!(matches!(
            Chromatogram::read_csv(&p, RunLabel::Clean),
            Err(GmcrError::Parse { line: 1, .. })
        ));
    }

    fn trivial_solvers(plan: &WindowPlan) -> Vec<WindowSolver> {
        plan.windows
            .iter()
            .enumerate()
            .map(|(i, w)| WindowSolver {
                window: i,
                start: w.start,
                end: w.end,
                n_train: 0,
                ec: 0,
                r2: None,
                model: None,
            })
            .collect()
    }

    #[test]
    fn zero_chromatogram_cleans_to_zero() {
        let rt = vec![0.0, 1.0, 2.0];
        let z = Chromatogram::new(rt, vec![5, 6], Matrix::zeros((3, 2)), RunLabel::Polluted).unwrap();
        let plan = WindowPlan::for_runs(std::slice::from_ref(&z), 60.0).unwrap();
        let res = clean(&z, &plan, &trivial_solvers(&plan)).unwrap();
        assert!(res.cleaned.intensities.iter().all(|&v| v == 0.0));
        assert!(res.residual.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_report_extremes() {
        let c = chrom(vec![0.0, 1.0, 2.0, 3.0], 2);
        let mut cleaned = c.clone();
        cleaned.intensities.column_mut(1).fill(0.0);
        let res = CleanResult {
            residual: &c.intensities - &cleaned.intensities,
            cleaned,
            per_window: vec![],
        };
        let rep = pollution_channels_report(&res, &[12, 13]).unwrap();
        assert_eq!(rep[0].reduction_pct, 0.0);
        assert_eq!(rep[1].reduction_pct, 100.0);
        assert!(pollution_channels_report(&res, &[99]).is_err());
    }

    #[test]
    fn fixture_sets_are_disjoint() {
        let f = ContaminationConfig::default().generate().unwrap();
        assert!(supports_disjoint(&f.s_clean, &f.s_pollution));
        assert_eq!(f.clean_runs.len(), 4);
        assert_eq!(f.polluted_runs[0].n_scans(), 240);
        for mz in &f.pollution_mz {
            let j = f.clean_runs[0].channel_index(*mz).unwrap();
            assert!(f.polluted_runs[0].intensities.column(j).sum() > f.clean_runs[0].intensities.column(j).sum());
        }
        assert_eq!(ContaminationConfig::default().generate().unwrap(), f);
    }

    #[test]
    fn cleaning_keeps_exact_decomposition_and_locality() {
        let cfg = ContaminationConfig {
            n_clean_components: 3,
            channels: 16,
            pollution_channels: 2,
            sparsity_ratio: 0.5,
            n_clean_runs: 2,
            n_polluted_runs: 1,
            ..ContaminationConfig::default()
        };
        let f = cfg.generate().unwrap();
        let plan = WindowPlan::for_runs(&f.clean_runs, 60.0).unwrap();
        let model_cfg = ModelConfig {
            budget: 6,
            hidden: 16,
            ..ModelConfig::default()
        };
        let hp = HyperParams {
            max_iters: 200,
            checkpoint_interval: 100,
            ..HyperParams::for_dim(16)
        };
        let solvers = fit_clean_process(&f.clean_runs, &plan, &model_cfg, &hp).unwrap();
        assert_eq!(solvers.len(), 2);
        let p = &f.polluted_runs[0];
        let res = clean(p, &plan, &solvers).unwrap();
        assert_eq!(&res.cleaned.intensities + &res.residual, p.intensities);
        assert!(res.cleaned.intensities.iter().all(|&v| v >= 0.0));

        // altering the second window leaves the first window's rows alone
        let mut q = p.clone();
        let second = plan.rows(p, 1);
        q.intensities.slice_mut(ndarray::s![second, ..]).fill(0.0);
        let res_q = clean(&q, &plan, &solvers).unwrap();
        let first = plan.rows(p, 0);
        assert_eq!(
            res.cleaned.intensities.slice(ndarray::s![first.clone(), ..]),
            res_q.cleaned.intensities.slice(ndarray::s![first, ..])
        );

        // a window trained on its own matches the jointly trained one
        let alone = WindowPlan {
            window_length: 60.0,
            windows: vec![plan.windows[1]],
        };
        let again = fit_clean_process(&f.clean_runs[..], &alone, &model_cfg, &hp);
        // the lone window does not cover the first scans
        assert!(again.is_err());
        let tail: Vec<Chromatogram> = f
            .clean_runs
            .iter()
            .map(|c| {
                let r = plan.rows(c, 1);
                Chromatogram::new(
                    c.rt[r.clone()].to_vec(),
                    c.mz.clone(),
                    c.intensities.slice(ndarray::s![r, ..]).to_owned(),
                    RunLabel::Clean,
                )
                .unwrap()
            })
            .collect();
        let again = fit_clean_process(&tail, &alone, &model_cfg, &hp).unwrap();
        assert_eq!(again[0].model, solvers[1].model);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let f = ContaminationConfig {
            n_clean_components: 2,
            channels: 10,
            pollution_channels: 2,
            n_clean_runs: 1,
            n_polluted_runs: 0,
            duration_s: 30.0,
            ..ContaminationConfig::default()
        }
        .generate()
        .unwrap();
        let plan = WindowPlan::for_runs(&f.clean_runs, 60.0).unwrap();
        let model_cfg = ModelConfig {
            budget: 3,
            hidden: 4,
            ..ModelConfig::default()
        };
        let hp = HyperParams {
            max_iters: 10,
            checkpoint_interval: 10,
            ..HyperParams::for_dim(10)
        };
        let solvers = fit_clean_process(&f.clean_runs, &plan, &model_cfg, &hp).unwrap();
        let other = chrom(f.clean_runs[0].rt.clone(), 7);
        assert!(matches!(clean(&other, &plan, &solvers), Err(GmcrError::Argument(_))));
    }
}
