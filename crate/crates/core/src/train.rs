//! End-to-end training: denoising reconstruction loss on the autoencoder
//! plus the decomposed (or plain MSE) forecast loss on the propagator,
//! optimized with AdamW under a cosine-annealing warm-restart schedule with
//! early stopping, and a successive-halving sweep over the loss weights.

use crate::autodiff::{Tape, Tensor, Var};
use crate::decomp::{decompose_batched, ErrorDecomposition, LossWeights};
use crate::error::{Error, Result};
use crate::model::{AbcranModel, ArchConfig, ModelVars};
use crate::pde::WaveDataset;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Propagator objective: plain MSE baseline or the dissipation/dispersion
/// decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Mse,
    Decomposed,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::Mse => write!(f, "mse"),
            LossMode::Decomposed => write!(f, "decomposed"),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "decomposed" => Ok(LossMode::Decomposed),
            other => Err(Error::invalid(format!(
                "unknown loss mode '{other}' (expected mse|decomposed)"
            ))),
        }
    }
}

/// All knobs of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub noise_std: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// First cosine cycle length, in epochs.
    pub restart_period: usize,
    /// Cycle-length multiplier after each restart.
    pub restart_mult: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Wave-speed instances held out for validation.
    pub n_val_mu: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights {
                alpha: 0.7,
                beta: 0.7,
            },
            noise_std: 0.0,
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            restart_period: 25,
            restart_mult: 2,
            patience: 50,
            max_epochs: 500,
            batch_size: 16,
            seed: 0,
            loss_mode: LossMode::Decomposed,
            n_val_mu: 2,
        }
    }
}

impl TrainConfig {
    /// Defaults with the noise level tied to the data amplitude
    /// (`0.01 · max |u|`).
    pub fn defaults_for(dataset: &WaveDataset) -> Self {
        TrainConfig {
            noise_std: 0.01 * dataset.max_abs(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(Error::invalid(format!(
                "need 0 <= lr_min <= lr_max and lr_max > 0, got lr_min={}, lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if self.restart_period < 1 || self.restart_mult < 1 {
            return Err(Error::invalid(
                "restart_period and restart_mult must be >= 1",
            ));
        }
        if self.patience < 1 || self.max_epochs < 1 || self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "need 1 <= patience <= max_epochs, got patience={}, max_epochs={}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.n_val_mu < 1 {
            return Err(Error::invalid("n_val_mu must be >= 1"));
        }
        Ok(())
    }
}

/// One per-epoch training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau_diss: f64,
    pub tau_disp: f64,
    pub decoder_loss: f64,
    pub propagator_loss: f64,
}

/// Full history of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    /// CSV with the columns `epoch,lr,train_loss,val_loss,tau_diss,tau_disp`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,tau_diss,tau_disp\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.val_loss, r.tau_diss, r.tau_disp
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn summary_json(&self, config: &TrainConfig) -> serde_json::Value {
        serde_json::json!({
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_val_loss": self.best_val_loss,
            "config": config,
        })
    }
}

/// Adds i.i.d. Gaussian noise; deterministic under a fixed rng state.
pub fn add_noise<R: Rng>(batch: &Tensor, noise_std: f64, rng: &mut R) -> Tensor {
    if noise_std == 0.0 {
        return batch.clone();
    }
    let normal = Normal::new(0.0, noise_std).expect("finite nonnegative std");
    let data: Vec<f64> = batch.data().iter().map(|v| v + normal.sample(rng)).collect();
    Tensor::new(batch.shape(), data).expect("shape preserved")
}

/// Optimizer state: first/second moment accumulators and the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamWState {
    pub fn new(model: &AbcranModel) -> Self {
        AdamWState {
            m: model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
            v: model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step over all trainable parameters:
/// `p <- p - lr·(m̂/(√v̂+ε) + weight_decay·p)`.
pub fn adamw_step(
    params: &mut [crate::autodiff::Parameter],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adamw_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Numerical("non-finite gradient in adamw_step".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if !p.trainable {
            continue;
        }
        let pd = p.tensor.data_mut();
        for (((pv, &gv), mv), vv) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *pv);
        }
    }
    Ok(())
}

/// Closed-form cosine-annealing schedule with warm restarts. `epoch` is
/// 0-based; cycle lengths are `t0, t0·mult, t0·mult², …`.
pub fn cosine_warm_restart_lr(
    epoch: usize,
    lr_max: f64,
    lr_min: f64,
    t0: usize,
    mult: usize,
) -> f64 {
    let mut start = 0usize;
    let mut len = t0.max(1);
    while epoch >= start + len {
        start += len;
        len = len.saturating_mul(mult.max(1));
    }
    let t_cur = (epoch - start) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t_cur / len as f64).cos())
}

/// MSE between `pred` and a constant target, recorded on the tape.
pub fn mse_loss_on_tape(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let target_var = tape.constant(target.clone())?;
    let diff = tape.sub(pred, target_var)?;
    let sq = tape.square(diff)?;
    tape.mean_all(sq)
}

/// The decomposed loss `w_diss·τ_diss + w_disp·τ_disp`, built from tape
/// primitives so gradients flow to `pred`.
///
/// Statistics run over the last (spatial) axis of each slice; the three
/// components are averaged over all leading axes. The ground truth enters as
/// constants, so only the prediction-side statistics are differentiated.
pub fn decomposed_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    truth: &Tensor,
    w_diss: f64,
    w_disp: f64,
) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.as_slice() != truth.shape() {
        return Err(Error::shape(format!(
            "decomposed loss: pred {:?} vs truth {:?}",
            shape,
            truth.shape()
        )));
    }
    if shape.is_empty() {
        return Err(Error::shape("decomposed loss needs rank >= 1"));
    }
    let nx = *shape.last().unwrap();
    let n_slices = truth.len() / nx;

    let mut mean_a = vec![0.0; n_slices];
    let mut std_a = vec![0.0; n_slices];
    for s in 0..n_slices {
        let row = &truth.data()[s * nx..(s + 1) * nx];
        let m = row.iter().sum::<f64>() / nx as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nx as f64;
        mean_a[s] = m;
        std_a[s] = var.sqrt();
    }
    let mean_a_c = tape.constant(Tensor::new(&[n_slices], mean_a)?)?;
    let std_a_c = tape.constant(Tensor::new(&[n_slices], std_a)?)?;
    let truth_c = tape.constant(truth.clone().reshaped(&[n_slices, nx])?)?;

    let pred2 = tape.reshape(pred, &[n_slices, nx])?;
    let mean_d = tape.mean_axis(pred2, 1)?;
    let var_d = tape.var_axis(pred2, 1)?;
    let std_d = tape.sqrt_eps(var_d)?;
    // cov = E[ua·ud] - mean_a·mean_d
    let prod = tape.mul(pred2, truth_c)?;
    let cross = tape.mean_axis(prod, 1)?;
    let mm = tape.mul(mean_d, mean_a_c)?;
    let cov = tape.sub(cross, mm)?;

    let dstd = tape.sub(std_a_c, std_d)?;
    let dstd2 = tape.square(dstd)?;
    let dmean = tape.sub(mean_a_c, mean_d)?;
    let dmean2 = tape.square(dmean)?;
    let diss = tape.add(dstd2, dmean2)?;

    let sd_prod = tape.mul(std_a_c, std_d)?;
    let gap = tape.sub(sd_prod, cov)?;
    let disp = tape.scale(gap, 2.0)?;

    let w_diss_term = tape.scale(diss, w_diss)?;
    let w_disp_term = tape.scale(disp, w_disp)?;
    let weighted = tape.add(w_diss_term, w_disp_term)?;
    tape.mean_all(weighted)
}

fn decoder_loss_on_tape(
    tape: &mut Tape,
    model: &AbcranModel,
    vars: &ModelVars,
    noisy_flat: &Tensor,
    clean_flat: &Tensor,
) -> Result<Var> {
    let noisy = tape.leaf(noisy_flat.clone())?;
    let latent = model.encode_on(tape, vars, noisy)?;
    let recon = model.decode_on(tape, vars, latent)?;
    mse_loss_on_tape(tape, recon, clean_flat)
}

/// Forecast fields for a batch of input windows:
/// `[B·k_in, nx] -> [B·k_out, nx]` through encode, propagate, decode.
fn propagator_forward(
    tape: &mut Tape,
    model: &AbcranModel,
    vars: &ModelVars,
    clean_flat: &Tensor,
    batch: usize,
) -> Result<Var> {
    let (k_in, k_out, r) = (model.config.k_in, model.config.k_out, model.config.latent_dim);
    let input = tape.leaf(clean_flat.clone())?;
    let latent = model.encode_on(tape, vars, input)?;
    let latent_seq = tape.reshape(latent, &[batch, k_in, r])?;
    let pred_seq = model.propagate_on(tape, vars, latent_seq)?;
    let pred_flat = tape.reshape(pred_seq, &[batch * k_out, r])?;
    model.decode_on(tape, vars, pred_flat)
}

fn prop_loss_from_pred(
    tape: &mut Tape,
    pred: Var,
    target_flat: &Tensor,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<Var> {
    match mode {
        LossMode::Mse => mse_loss_on_tape(tape, pred, target_flat),
        LossMode::Decomposed => decomposed_loss_on_tape(
            tape,
            pred,
            target_flat,
            weights.beta,
            1.0 - weights.beta,
        ),
    }
}

/// Reconstruction MSE of the noise-corrupted batch against the clean batch.
pub fn denoising_decoder_loss<R: Rng>(
    model: &AbcranModel,
    clean_batch: &Tensor,
    rng: &mut R,
    noise_std: f64,
) -> Result<f64> {
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be finite and >= 0"));
    }
    let noisy = add_noise(clean_batch, noise_std, rng);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let loss = decoder_loss_on_tape(&mut tape, model, &vars, &noisy, clean_batch)?;
    tape.value(loss).item()
}

/// Forecast loss for aligned `[B,k_in,nx]` input and `[B,k_out,nx]` target
/// windows, plus the physical-space error decomposition of the prediction.
pub fn propagator_loss(
    model: &AbcranModel,
    window_in: &Tensor,
    window_target: &Tensor,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<(f64, ErrorDecomposition)> {
    let (k_in, k_out, nx) = (model.config.k_in, model.config.k_out, model.config.nx);
    if window_in.rank() != 3 || window_in.shape()[1] != k_in || window_in.shape()[2] != nx {
        return Err(Error::shape(format!(
            "window_in must be [B, {k_in}, {nx}], got {:?}",
            window_in.shape()
        )));
    }
    let b = window_in.shape()[0];
    if window_target.shape() != [b, k_out, nx] {
        return Err(Error::shape(format!(
            "window_target must be [{b}, {k_out}, {nx}], got {:?}",
            window_target.shape()
        )));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let in_flat = window_in.clone().reshaped(&[b * k_in, nx])?;
    let target_flat = window_target.clone().reshaped(&[b * k_out, nx])?;
    let pred = propagator_forward(&mut tape, model, &vars, &in_flat, b)?;
    let loss = prop_loss_from_pred(&mut tape, pred, &target_flat, mode, weights)?;
    let decomp = decompose_batched(&target_flat, tape.value(pred))?;
    Ok((tape.value(loss).item()?, decomp))
}

/// Index pairs (wave-speed index, window start) for all consecutive windows.
fn window_index(nt: usize, k_in: usize, k_out: usize, mu_indices: &[usize]) -> Vec<(usize, usize)> {
    let span = k_in + k_out;
    let mut out = Vec::new();
    if nt < span {
        return out;
    }
    for &m in mu_indices {
        for s in 0..=nt - span {
            out.push((m, s));
        }
    }
    out
}

/// Evenly spaced interior hold-out of `n_val` wave-speed indices.
fn validation_split(n_mu: usize, n_val: usize) -> (Vec<usize>, Vec<usize>) {
    let mut val: Vec<usize> = (1..=n_val)
        .map(|i| (i * n_mu / (n_val + 1)).min(n_mu - 1))
        .collect();
    val.dedup();
    let train: Vec<usize> = (0..n_mu).filter(|i| !val.contains(i)).collect();
    (train, val)
}

fn batch_tensors(
    dataset: &WaveDataset,
    windows: &[(usize, usize)],
    k_in: usize,
    k_out: usize,
) -> Result<(Tensor, Tensor)> {
    let nx = dataset.grid.nx;
    let b = windows.len();
    let mut input = Vec::with_capacity(b * k_in * nx);
    let mut target = Vec::with_capacity(b * k_out * nx);
    for &(m, s) in windows {
        for j in 0..k_in {
            input.extend_from_slice(dataset.field(m, s + j));
        }
        for j in 0..k_out {
            target.extend_from_slice(dataset.field(m, s + k_in + j));
        }
    }
    Ok((
        Tensor::new(&[b * k_in, nx], input)?,
        Tensor::new(&[b * k_out, nx], target)?,
    ))
}

struct BatchEval {
    dec: f64,
    prop: f64,
    composite: f64,
    decomp: ErrorDecomposition,
}

/// Builds the composite loss for one batch; backward + step when training.
fn run_batch(
    model: &mut AbcranModel,
    tape: &mut Tape,
    dataset: &WaveDataset,
    windows: &[(usize, usize)],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    optimizer: Option<(&mut AdamWState, f64)>,
) -> Result<BatchEval> {
    let (k_in, k_out) = (model.config.k_in, model.config.k_out);
    let (input_flat, target_flat) = batch_tensors(dataset, windows, k_in, k_out)?;
    let train_mode = optimizer.is_some();
    let noisy = if train_mode {
        add_noise(&input_flat, config.noise_std, rng)
    } else {
        input_flat.clone()
    };

    tape.reset();
    let vars = model.bind(tape)?;
    let dec = decoder_loss_on_tape(tape, model, &vars, &noisy, &input_flat)?;
    let pred = propagator_forward(tape, model, &vars, &input_flat, windows.len())?;
    let prop = prop_loss_from_pred(tape, pred, &target_flat, config.loss_mode, &config.weights)?;
    let dec_term = tape.scale(dec, 1.0 - config.weights.alpha)?;
    let prop_term = tape.scale(prop, config.weights.alpha)?;
    let composite = tape.add(dec_term, prop_term)?;

    let decomp = decompose_batched(&target_flat, tape.value(pred))?;
    let eval = BatchEval {
        dec: tape.value(dec).item()?,
        prop: tape.value(prop).item()?,
        composite: tape.value(composite).item()?,
        decomp,
    };
    if let Some((state, lr)) = optimizer {
        tape.backward(composite)?;
        let grads: Vec<Tensor> = vars
            .all
            .iter()
            .map(|&v| tape.grad(v))
            .collect::<Result<_>>()?;
        adamw_step(&mut model.params, &grads, state, lr, config.weight_decay)?;
    }
    Ok(eval)
}

/// Trains `model` in place and returns the per-epoch report. The model is
/// left at its best-validation-epoch parameters.
pub fn fit(
    model: &mut AbcranModel,
    dataset: &WaveDataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let n_mu = dataset.n_mu();
    if n_mu < 3 {
        return Err(Error::invalid(format!(
            "training needs at least 3 wave-speed instances, got {n_mu}"
        )));
    }
    if config.n_val_mu >= n_mu {
        return Err(Error::invalid(format!(
            "n_val_mu={} leaves no training instances out of {n_mu}",
            config.n_val_mu
        )));
    }
    if dataset.grid.nx != model.config.nx {
        return Err(Error::shape(format!(
            "dataset nx={} but model nx={}",
            dataset.grid.nx, model.config.nx
        )));
    }
    let (k_in, k_out) = (model.config.k_in, model.config.k_out);
    if dataset.grid.nt < k_in + k_out {
        return Err(Error::invalid(format!(
            "nt={} is shorter than one window pair ({k_in}+{k_out})",
            dataset.grid.nt
        )));
    }

    let (train_mu, val_mu) = validation_split(n_mu, config.n_val_mu);
    let mut train_windows = window_index(dataset.grid.nt, k_in, k_out, &train_mu);
    let val_windows = window_index(dataset.grid.nt, k_in, k_out, &val_mu);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamWState::new(model);
    let mut tape = Tape::new();
    let mut records = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let mut stopped_epoch = config.max_epochs;

    for epoch in 1..=config.max_epochs {
        let lr = cosine_warm_restart_lr(
            epoch - 1,
            config.lr_max,
            config.lr_min,
            config.restart_period,
            config.restart_mult,
        );
        train_windows.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // dec, prop, composite, diss, disp
        let mut n_batches = 0.0;
        for chunk in train_windows.chunks(config.batch_size) {
            let eval = run_batch(
                model,
                &mut tape,
                dataset,
                chunk,
                config,
                &mut rng,
                Some((&mut state, lr)),
            )?;
            sums.0 += eval.dec;
            sums.1 += eval.prop;
            sums.2 += eval.composite;
            sums.3 += eval.decomp.tau_diss;
            sums.4 += eval.decomp.tau_disp;
            n_batches += 1.0;
        }
        let train_loss = sums.2 / n_batches;

        let mut val_sum = 0.0;
        let mut val_batches = 0.0;
        for chunk in val_windows.chunks(config.batch_size) {
            let eval = run_batch(model, &mut tape, dataset, chunk, config, &mut rng, None)?;
            val_sum += eval.composite;
            val_batches += 1.0;
        }
        let val_loss = val_sum / val_batches;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch}: train={train_loss}, val={val_loss}"
            )));
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            tau_diss: sums.3 / n_batches,
            tau_disp: sums.4 / n_batches,
            decoder_loss: sums.0 / n_batches,
            propagator_loss: sums.1 / n_batches,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            for (dst, p) in best_params.iter_mut().zip(&model.params) {
                dst.clone_from(&p.tensor);
            }
        } else if epoch - best_epoch >= config.patience {
            stopped_epoch = epoch;
            break;
        }
        stopped_epoch = epoch;
    }

    for (p, best) in model.params.iter_mut().zip(best_params) {
        p.tensor = best;
    }
    Ok(TrainReport {
        records,
        best_epoch,
        stopped_epoch,
        best_val_loss: best_val,
    })
}

/// One row of the sweep table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub rung: usize,
    pub epochs: usize,
    pub val_loss: f64,
    pub kept: bool,
}

/// Result of [`sweep_alpha_beta`]: the surviving weights plus every rung's
/// outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub best: LossWeights,
    pub best_val_loss: f64,
    pub table: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("alpha,beta,rung,epochs,val_loss,kept\n");
        for r in &self.table {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.alpha, r.beta, r.rung, r.epochs, r.val_loss, r.kept
            ));
        }
        out
    }
}

/// Successive halving over loss-weight candidates: every rung retrains the
/// surviving candidates from scratch with twice the epoch budget, keeping the
/// top half by validation loss, until one survivor remains.
pub fn sweep_alpha_beta(
    dataset: &WaveDataset,
    arch: &ArchConfig,
    base: &TrainConfig,
    grid: &[LossWeights],
    rung0_epochs: usize,
    jobs: usize,
) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if rung0_epochs < 1 {
        return Err(Error::invalid("rung0_epochs must be >= 1"));
    }
    let jobs = jobs.max(1);
    let mut survivors: Vec<usize> = (0..grid.len()).collect();
    let mut budget = rung0_epochs;
    let mut rung = 0usize;
    let mut table = Vec::new();

    loop {
        let mut results = run_rung(dataset, arch, base, grid, &survivors, budget, jobs)?;
        results.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let keep = survivors.len().div_ceil(2);
        let last_rung = survivors.len() == 1;
        for (rank, &(cand, val)) in results.iter().enumerate() {
            table.push(SweepRow {
                alpha: grid[cand].alpha,
                beta: grid[cand].beta,
                rung,
                epochs: budget,
                val_loss: val,
                kept: last_rung || rank < keep,
            });
        }
        if last_rung {
            let (cand, val) = results[0];
            return Ok(SweepOutcome {
                best: grid[cand],
                best_val_loss: val,
                table,
            });
        }
        survivors = results[..keep].iter().map(|&(c, _)| c).collect();
        budget *= 2;
        rung += 1;
    }
}

fn run_rung(
    dataset: &WaveDataset,
    arch: &ArchConfig,
    base: &TrainConfig,
    grid: &[LossWeights],
    candidates: &[usize],
    budget: usize,
    jobs: usize,
) -> Result<Vec<(usize, f64)>> {
    let run_one = |cand: usize| -> Result<(usize, f64)> {
        let mut config = base.clone();
        config.weights = grid[cand];
        config.max_epochs = budget;
        config.patience = config.patience.min(budget);
        let mut model = AbcranModel::new(arch.clone(), config.seed)?;
        let report = fit(&mut model, dataset, &config)?;
        Ok((cand, report.best_val_loss))
    };

    if jobs == 1 || candidates.len() == 1 {
        return candidates.iter().map(|&c| run_one(c)).collect();
    }
    let chunk = candidates.len().div_ceil(jobs);
    let mut out = Vec::with_capacity(candidates.len());
    let results: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = candidates
            .chunks(chunk)
            .map(|group| scope.spawn(move || group.iter().map(|&c| run_one(c)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for group in results {
        out.extend(group?);
    }
    Ok(out)
}
