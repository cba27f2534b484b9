//! Long-horizon rollout evaluation: pointwise error fields, per-step error
//! decomposition, and an integer-cell phase-lag diagnostic for comparing
//! models trained under different objectives.

use crate::autodiff::Tensor;
use crate::decomp::decompose;
use crate::error::{Error, Result};
use crate::model::AbcranModel;
use crate::pde::WaveDataset;
use serde::{Deserialize, Serialize};

/// Anything that can forecast fields autoregressively from a seed window.
///
/// Implemented by [`AbcranModel`]; test oracles implement it directly.
pub trait Forecaster {
    /// Number of seed snapshots consumed.
    fn input_window(&self) -> usize;
    /// `[input_window, nx]` seed -> `[n_steps, nx]` forecast.
    fn rollout_fields(&self, seed: &Tensor, n_steps: usize) -> Result<Tensor>;
}

impl Forecaster for AbcranModel {
    fn input_window(&self) -> usize {
        self.config.k_in
    }

    fn rollout_fields(&self, seed: &Tensor, n_steps: usize) -> Result<Tensor> {
        self.rollout(seed, n_steps)
    }
}

/// Per-step rollout metrics at one forecast horizon step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub mse: f64,
    pub tau_diss: f64,
    pub tau_disp: f64,
    pub rho: f64,
    pub phase_lag_cells: i64,
}

/// Rollout evaluation of one wave speed over a forecast horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    pub mu: f64,
    pub horizon: usize,
    pub start_index: usize,
    pub steps: Vec<StepRecord>,
    /// `|prediction - truth|`, shape `[horizon, nx]`.
    pub error_field: Tensor,
}

impl RolloutReport {
    /// CSV with the columns `mu,step,t,mse,tau_diss,tau_disp,rho,phase_lag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,step,t,mse,tau_diss,tau_disp,rho,phase_lag\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.mu, s.step, s.t, s.mse, s.tau_diss, s.tau_disp, s.rho, s.phase_lag_cells
            ));
        }
        out
    }

    pub fn mean_abs_phase_lag(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.phase_lag_cells.abs() as f64)
            .sum::<f64>()
            / self.steps.len() as f64
    }

    pub fn mean_mse(&self) -> f64 {
        self.steps.iter().map(|s| s.mse).sum::<f64>() / self.steps.len() as f64
    }
}

/// Elementwise `|pred - truth|` over equally shaped `[T, nx]` tensors.
pub fn pointwise_error(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "pointwise_error: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let data: Vec<f64> = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p - t).abs())
        .collect();
    Tensor::new(pred.shape(), data)
}

/// Integer-cell phase lag: argmax over circular shifts of the centered
/// cross-correlation between prediction and truth. Positive means the
/// prediction trails the true wave. Shifts scan `-nx/2 ..= nx/2`; the first
/// maximum wins ties.
pub fn phase_lag(pred: &[f64], truth: &[f64]) -> Result<i64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "phase_lag: lengths {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len();
    let t_mean = truth.iter().sum::<f64>() / n as f64;
    if truth.iter().all(|&v| (v - t_mean).abs() < 1e-14 * (1.0 + t_mean.abs())) {
        return Err(Error::invalid(
            "phase_lag is undefined for a constant truth slice",
        ));
    }
    let p_mean = pred.iter().sum::<f64>() / n as f64;
    let half = (n / 2) as i64;
    let mut best_s = -half;
    let mut best_c = f64::NEG_INFINITY;
    for s in -half..=half {
        let mut c = 0.0;
        for i in 0..n {
            let j = (i as i64 - s).rem_euclid(n as i64) as usize;
            c += (pred[j] - p_mean) * (truth[i] - t_mean);
        }
        if c > best_c {
            best_c = c;
            best_s = s;
        }
    }
    Ok(best_s)
}

/// Seeds a forecast with true snapshots `[start_index, start_index+k_in)` and
/// scores the free-running prediction against the exact solution step by
/// step.
pub fn evaluate_rollout<F: Forecaster>(
    model: &F,
    dataset: &WaveDataset,
    mu_index: usize,
    start_index: usize,
    horizon: usize,
) -> Result<RolloutReport> {
    if mu_index >= dataset.n_mu() {
        return Err(Error::invalid(format!(
            "mu_index {mu_index} out of range ({} instances)",
            dataset.n_mu()
        )));
    }
    if horizon < 1 {
        return Err(Error::invalid("horizon must be >= 1"));
    }
    let k_in = model.input_window();
    let (nt, nx) = (dataset.grid.nt, dataset.grid.nx);
    if start_index + k_in + horizon > nt {
        return Err(Error::invalid(format!(
            "window [{start_index}, {}) exceeds nt={nt}",
            start_index + k_in + horizon
        )));
    }
    let mut seed = Vec::with_capacity(k_in * nx);
    for j in 0..k_in {
        seed.extend_from_slice(dataset.field(mu_index, start_index + j));
    }
    let seed = Tensor::new(&[k_in, nx], seed)?;
    let pred = model.rollout_fields(&seed, horizon)?;
    if pred.shape() != [horizon, nx] {
        return Err(Error::shape(format!(
            "forecaster returned {:?}, expected [{horizon}, {nx}]",
            pred.shape()
        )));
    }

    let mut steps = Vec::with_capacity(horizon);
    let mut error = Vec::with_capacity(horizon * nx);
    for j in 0..horizon {
        let time_index = start_index + k_in + j;
        let truth = dataset.field(mu_index, time_index);
        let p = pred.row(j);
        let d = decompose(truth, p)?;
        steps.push(StepRecord {
            step: j + 1,
            t: dataset.grid.t(time_index),
            mse: d.tau,
            tau_diss: d.tau_diss,
            tau_disp: d.tau_disp,
            rho: d.stats.rho,
            phase_lag_cells: phase_lag(p, truth)?,
        });
        error.extend(truth.iter().zip(p).map(|(&t, &v)| (v - t).abs()));
    }
    Ok(RolloutReport {
        mu: dataset.mu_values[mu_index],
        horizon,
        start_index,
        steps,
        error_field: Tensor::new(&[horizon, nx], error)?,
    })
}

/// Per-model aggregate over a comparison run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub mean_mse: f64,
    pub mean_tau_diss: f64,
    pub mean_tau_disp: f64,
    pub mean_abs_phase_lag: f64,
}

/// Side-by-side rollout comparison of two forecasters.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
    pub aggregate_a: ModelAggregate,
    pub aggregate_b: ModelAggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub mu: f64,
    pub step: usize,
    pub t: f64,
    pub mse: f64,
    pub tau_diss: f64,
    pub tau_disp: f64,
    pub rho: f64,
    pub phase_lag: i64,
}

impl ComparisonTable {
    /// CSV with the columns
    /// `model,mu,step,t,mse,tau_diss,tau_disp,rho,phase_lag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,mu,step,t,mse,tau_diss,tau_disp,rho,phase_lag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.model, r.mu, r.step, r.t, r.mse, r.tau_diss, r.tau_disp, r.rho, r.phase_lag
            ));
        }
        out
    }
}

fn aggregate(reports: &[RolloutReport]) -> ModelAggregate {
    let mut n = 0.0;
    let (mut mse, mut diss, mut disp, mut lag) = (0.0, 0.0, 0.0, 0.0);
    for r in reports {
        for s in &r.steps {
            mse += s.mse;
            diss += s.tau_diss;
            disp += s.tau_disp;
            lag += s.phase_lag_cells.abs() as f64;
            n += 1.0;
        }
    }
    ModelAggregate {
        mean_mse: mse / n,
        mean_tau_diss: diss / n,
        mean_tau_disp: disp / n,
        mean_abs_phase_lag: lag / n,
    }
}

/// Evaluates both forecasters on the same rollouts and tabulates every step.
pub fn compare_models<A: Forecaster, B: Forecaster>(
    model_a: &A,
    model_b: &B,
    dataset: &WaveDataset,
    mu_indices: &[usize],
    start_index: usize,
    horizon: usize,
) -> Result<ComparisonTable> {
    if mu_indices.is_empty() {
        return Err(Error::invalid("compare_models: empty wave-speed list"));
    }
    if model_a.input_window() != model_b.input_window() {
        return Err(Error::invalid(format!(
            "input windows differ: {} vs {}",
            model_a.input_window(),
            model_b.input_window()
        )));
    }
    let mut rows = Vec::new();
    let mut reports_a = Vec::new();
    let mut reports_b = Vec::new();
    for &m in mu_indices {
        let ra = evaluate_rollout(model_a, dataset, m, start_index, horizon)?;
        let rb = evaluate_rollout(model_b, dataset, m, start_index, horizon)?;
        for (label, rep) in [("a", &ra), ("b", &rb)] {
            for s in &rep.steps {
                rows.push(CompareRow {
                    model: label.to_string(),
                    mu: rep.mu,
                    step: s.step,
                    t: s.t,
                    mse: s.mse,
                    tau_diss: s.tau_diss,
                    tau_disp: s.tau_disp,
                    rho: s.rho,
                    phase_lag: s.phase_lag_cells,
                });
            }
        }
        reports_a.push(ra);
        reports_b.push(rb);
    }
    Ok(ComparisonTable {
        aggregate_a: aggregate(&reports_a),
        aggregate_b: aggregate(&reports_b),
        rows,
    })
}
