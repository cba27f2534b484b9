//! Convolutional recurrent autoencoder with an attention-based
//! sequence-to-sequence latent propagator.
//!
//! Encoder: conv/pool stages, then dense layers down to the latent width.
//! Propagator: LSTM encoder over the latent history, LSTM decoder emitting
//! future latents, each step attending over all encoder hidden states.
//! Decoder: exact mirror of the encoder with nearest-neighbor upsampling in
//! place of max pooling.

use crate::autodiff::{dot_attention, lstm_cell, LstmParamVars, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// On-disk format version of a model directory.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Topology of the autoencoder and propagator.
///
/// `input_scale` is a fixed data normalization applied before the encoder
/// and inverted after the decoder; trainers set it from the data amplitude
/// so the tanh stages operate away from saturation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub nx: usize,
    pub latent_dim: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub lstm_hidden: usize,
    pub k_in: usize,
    pub k_out: usize,
    pub input_scale: f64,
}

impl ArchConfig {
    /// Default topology for a given input width: two conv/pool stages
    /// (8 then 16 channels, kernel 5), one hidden dense of 128, latent
    /// width 2, LSTM hidden width 64, 10-step input and output windows.
    pub fn default_for(nx: usize) -> Self {
        ArchConfig {
            nx,
            latent_dim: 2,
            conv_channels: vec![8, 16],
            conv_kernels: vec![5, 5],
            dense_widths: vec![128],
            lstm_hidden: 64,
            k_in: 10,
            k_out: 10,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_kernels.len() {
            return Err(Error::invalid(
                "conv_channels and conv_kernels must be nonempty and equal length",
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("conv channel counts must be positive"));
        }
        if self.conv_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::invalid(
                "conv kernels must be odd so same-padding preserves length",
            ));
        }
        if self.dense_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("dense widths must be positive"));
        }
        let stages = self.conv_channels.len() as u32;
        if self.nx < 2 || self.nx % (1usize << stages) != 0 {
            return Err(Error::invalid(format!(
                "nx={} must be divisible by 2^{stages} for the pooling stages",
                self.nx
            )));
        }
        if self.lstm_hidden < 1 || self.k_in < 1 || self.k_out < 1 {
            return Err(Error::invalid(
                "lstm_hidden, k_in and k_out must all be >= 1",
            ));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::invalid("input_scale must be finite and positive"));
        }
        Ok(())
    }

    /// Spatial length after all pooling stages.
    pub fn pooled_len(&self) -> usize {
        self.nx >> self.conv_channels.len()
    }

    /// Width of the flattened feature map entering the dense stack.
    pub fn flat_len(&self) -> usize {
        self.conv_channels.last().unwrap() * self.pooled_len()
    }

    /// Named layers in forward order. Attention is parameter-free and is not
    /// a named layer; the default config counts 15.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.conv_channels.len() {
            names.push(format!("enc.conv{i}"));
            names.push(format!("enc.pool{i}"));
        }
        for i in 1..=self.dense_widths.len() + 1 {
            names.push(format!("enc.dense{i}"));
        }
        names.push("prop.lstm_enc".into());
        names.push("prop.lstm_dec".into());
        names.push("prop.dense".into());
        for i in 1..=self.dense_widths.len() + 1 {
            names.push(format!("dec.dense{i}"));
        }
        for i in 1..=self.conv_channels.len() {
            names.push(format!("dec.up{i}"));
            names.push(format!("dec.conv{i}"));
        }
        names
    }

    /// Parameter names and shapes in canonical (initialization and
    /// serialization) order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let h4 = 4 * self.lstm_hidden;
        let r = self.latent_dim;

        let mut chans = vec![1usize];
        chans.extend(&self.conv_channels);
        for i in 1..chans.len() {
            let k = self.conv_kernels[i - 1];
            specs.push((format!("enc.conv{i}.w"), vec![chans[i], chans[i - 1], k]));
            specs.push((format!("enc.conv{i}.b"), vec![chans[i]]));
        }

        let mut dense_chain = vec![self.flat_len()];
        dense_chain.extend(&self.dense_widths);
        dense_chain.push(r);
        for i in 1..dense_chain.len() {
            specs.push((
                format!("enc.dense{i}.w"),
                vec![dense_chain[i - 1], dense_chain[i]],
            ));
            specs.push((format!("enc.dense{i}.b"), vec![dense_chain[i]]));
        }

        for cell in ["enc", "dec"] {
            specs.push((format!("prop.lstm_{cell}.wx"), vec![r, h4]));
            specs.push((format!("prop.lstm_{cell}.wh"), vec![self.lstm_hidden, h4]));
            specs.push((format!("prop.lstm_{cell}.b"), vec![h4]));
        }
        specs.push(("prop.dense.w".into(), vec![self.lstm_hidden, r]));
        specs.push(("prop.dense.b".into(), vec![r]));

        let rev_chain: Vec<usize> = dense_chain.iter().rev().copied().collect();
        for i in 1..rev_chain.len() {
            specs.push((
                format!("dec.dense{i}.w"),
                vec![rev_chain[i - 1], rev_chain[i]],
            ));
            specs.push((format!("dec.dense{i}.b"), vec![rev_chain[i]]));
        }

        for i in 1..chans.len() {
            let j = chans.len() - i; // mirror: c_j -> c_{j-1}
            let k = self.conv_kernels[j - 1];
            specs.push((format!("dec.conv{i}.w"), vec![chans[j - 1], chans[j], k]));
            specs.push((format!("dec.conv{i}.b"), vec![chans[j - 1]]));
        }
        specs
    }
}

/// Tape handles for one bound copy of the model parameters, in canonical
/// order, plus structured views used by the forward passes.
pub struct ModelVars {
    pub all: Vec<Var>,
    enc_convs: Vec<(Var, Var)>,
    enc_denses: Vec<(Var, Var)>,
    lstm_enc: LstmParamVars,
    lstm_dec: LstmParamVars,
    prop_dense: (Var, Var),
    dec_denses: Vec<(Var, Var)>,
    dec_convs: Vec<(Var, Var)>,
}

/// The autoencoder-propagator model: a config plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AbcranModel {
    pub config: ArchConfig,
    pub params: Vec<Parameter>,
    pub seed: u64,
}

impl AbcranModel {
    /// Fan-in-scaled uniform initialization, fully determined by `seed`.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in config.param_specs() {
            let tensor = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = match shape.len() {
                    3 => shape[1] * shape[2], // conv [out_c, in_c, k]
                    _ => shape[0],            // dense/lstm [in, out]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(&shape, data)?
            };
            params.push(Parameter::new(name, tensor));
        }
        Ok(AbcranModel {
            config,
            params,
            seed,
        })
    }

    /// Records every parameter as a tape leaf, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let mut all = Vec::with_capacity(self.params.len());
        for p in &self.params {
            all.push(tape.leaf(p.tensor.clone())?);
        }
        let mut cursor = 0usize;
        let mut take = |k: usize| -> Vec<Var> {
            let out = all[cursor..cursor + k].to_vec();
            cursor += k;
            out
        };
        let n_conv = self.config.conv_channels.len();
        let n_dense = self.config.dense_widths.len() + 1;
        let pairs = |vs: Vec<Var>| -> Vec<(Var, Var)> {
            vs.chunks(2).map(|c| (c[0], c[1])).collect()
        };
        let enc_convs = pairs(take(2 * n_conv));
        let enc_denses = pairs(take(2 * n_dense));
        let lstm = |vs: Vec<Var>| LstmParamVars {
            wx: vs[0],
            wh: vs[1],
            b: vs[2],
        };
        let lstm_enc = lstm(take(3));
        let lstm_dec = lstm(take(3));
        let prop_dense = pairs(take(2))[0];
        let dec_denses = pairs(take(2 * n_dense));
        let dec_convs = pairs(take(2 * n_conv));
        debug_assert_eq!(cursor, all.len());
        Ok(ModelVars {
            all,
            enc_convs,
            enc_denses,
            lstm_enc,
            lstm_dec,
            prop_dense,
            dec_denses,
            dec_convs,
        })
    }

    /// Encoder forward pass on an existing tape: `[batch, nx] -> [batch, r]`.
    pub fn encode_on(&self, tape: &mut Tape, vars: &ModelVars, field: Var) -> Result<Var> {
        let shape = tape.value(field).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.nx {
            return Err(Error::shape(format!(
                "encode expects [batch, {}], got {shape:?}",
                self.config.nx
            )));
        }
        let batch = shape[0];
        let mut x = tape.scale(field, 1.0 / self.config.input_scale)?;
        x = tape.reshape(x, &[batch, 1, self.config.nx])?;
        for (i, &(w, b)) in vars.enc_convs.iter().enumerate() {
            let k = self.config.conv_kernels[i];
            x = tape.conv1d(x, w, b, 1, k / 2)?;
            x = tape.tanh(x)?;
            x = tape.maxpool2(x)?;
        }
        x = tape.reshape(x, &[batch, self.config.flat_len()])?;
        let last = vars.enc_denses.len() - 1;
        for (i, &(w, b)) in vars.enc_denses.iter().enumerate() {
            x = tape.affine(x, w, b)?;
            if i < last {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// Decoder forward pass: `[batch, r] -> [batch, nx]`.
    pub fn decode_on(&self, tape: &mut Tape, vars: &ModelVars, latent: Var) -> Result<Var> {
        let shape = tape.value(latent).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::shape(format!(
                "decode expects [batch, {}], got {shape:?}",
                self.config.latent_dim
            )));
        }
        let batch = shape[0];
        let mut x = latent;
        for &(w, b) in &vars.dec_denses {
            x = tape.affine(x, w, b)?;
            x = tape.tanh(x)?;
        }
        let c_last = *self.config.conv_channels.last().unwrap();
        x = tape.reshape(x, &[batch, c_last, self.config.pooled_len()])?;
        let last = vars.dec_convs.len() - 1;
        for (i, &(w, b)) in vars.dec_convs.iter().enumerate() {
            let j = self.config.conv_channels.len() - 1 - i;
            let k = self.config.conv_kernels[j];
            x = tape.upsample2(x)?;
            x = tape.conv1d(x, w, b, 1, k / 2)?;
            if i < last {
                x = tape.tanh(x)?;
            }
        }
        x = tape.reshape(x, &[batch, self.config.nx])?;
        tape.scale(x, self.config.input_scale)
    }

    /// Propagator forward pass: `[batch, k_in, r] -> [batch, k_out, r]`.
    ///
    /// The encoder LSTM consumes the latent history; the decoder LSTM starts
    /// from the encoder's final state with the last input latent as its first
    /// input, and each emitted step attends over all encoder hidden states.
    /// The attention context is combined additively with the decoder hidden
    /// state so the output head stays at the LSTM width.
    pub fn propagate_on(&self, tape: &mut Tape, vars: &ModelVars, latent_seq: Var) -> Result<Var> {
        let shape = tape.value(latent_seq).shape().to_vec();
        let (r, h, k_in, k_out) = (
            self.config.latent_dim,
            self.config.lstm_hidden,
            self.config.k_in,
            self.config.k_out,
        );
        if shape.len() != 3 || shape[1] != k_in || shape[2] != r {
            return Err(Error::shape(format!(
                "propagate expects [batch, {k_in}, {r}], got {shape:?}"
            )));
        }
        let batch = shape[0];
        let mut hidden = tape.leaf(Tensor::zeros(&[batch, h]))?;
        let mut cell = tape.leaf(Tensor::zeros(&[batch, h]))?;
        let mut enc_states = Vec::with_capacity(k_in);
        for t in 0..k_in {
            let step = tape.slice(latent_seq, 1, t, 1)?;
            let x_t = tape.reshape(step, &[batch, r])?;
            let (h_t, c_t) = lstm_cell(tape, x_t, hidden, cell, &vars.lstm_enc)?;
            hidden = h_t;
            cell = c_t;
            enc_states.push(tape.reshape(h_t, &[batch, 1, h])?);
        }
        let enc_seq = tape.concat(&enc_states, 1)?;

        let last_in = tape.slice(latent_seq, 1, k_in - 1, 1)?;
        let mut x = tape.reshape(last_in, &[batch, r])?;
        let mut outputs = Vec::with_capacity(k_out);
        for _ in 0..k_out {
            let (h_t, c_t) = lstm_cell(tape, x, hidden, cell, &vars.lstm_dec)?;
            hidden = h_t;
            cell = c_t;
            let context = dot_attention(tape, h_t, enc_seq, enc_seq)?;
            let combined = tape.add(h_t, context)?;
            let out = tape.affine(combined, vars.prop_dense.0, vars.prop_dense.1)?;
            outputs.push(tape.reshape(out, &[batch, 1, r])?);
            x = out;
        }
        tape.concat(&outputs, 1)
    }

    /// Convenience eval-only encoder.
    pub fn encode(&self, field: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let x = tape.leaf(field.clone())?;
        let z = self.encode_on(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    /// Convenience eval-only decoder.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let z = tape.leaf(latent.clone())?;
        let x = self.decode_on(&mut tape, &vars, z)?;
        Ok(tape.value(x).clone())
    }

    /// Convenience eval-only propagator.
    pub fn propagate(&self, latent_seq: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let z = tape.leaf(latent_seq.clone())?;
        let out = self.propagate_on(&mut tape, &vars, z)?;
        Ok(tape.value(out).clone())
    }

    /// Autoregressive forecast: encode a `[k_in, nx]` seed window, repeatedly
    /// propagate `k_out` latent steps feeding the newest `k_in` latents back,
    /// decode everything, truncate to `n_steps` rows.
    pub fn rollout(&self, seed_window: &Tensor, n_steps: usize) -> Result<Tensor> {
        let (k_in, k_out) = (self.config.k_in, self.config.k_out);
        if seed_window.shape() != [k_in, self.config.nx] {
            return Err(Error::shape(format!(
                "rollout seed must be [{k_in}, {}], got {:?}",
                self.config.nx,
                seed_window.shape()
            )));
        }
        if n_steps < 1 {
            return Err(Error::invalid("rollout needs n_steps >= 1"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let seed = tape.leaf(seed_window.clone())?;
        let lat = self.encode_on(&mut tape, &vars, seed)?;
        let mut window = tape.reshape(lat, &[1, k_in, self.config.latent_dim])?;
        let mut emitted = Vec::new();
        let mut produced = 0;
        while produced < n_steps {
            let block = self.propagate_on(&mut tape, &vars, window)?;
            emitted.push(block);
            produced += k_out;
            let joined = tape.concat(&[window, block], 1)?;
            let total = tape.value(joined).shape()[1];
            window = tape.slice(joined, 1, total - k_in, k_in)?;
        }
        let all = tape.concat(&emitted, 1)?;
        let m = tape.value(all).shape()[1];
        let flat = tape.reshape(all, &[m, self.config.latent_dim])?;
        let fields = self.decode_on(&mut tape, &vars, flat)?;
        let wanted = tape.slice(fields, 0, 0, n_steps)?;
        Ok(tape.value(wanted).clone())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    version: u32,
    seed: u64,
    config: ArchConfig,
    manifest: Vec<ManifestEntry>,
}

/// Writes `arch.json` (config + ordered parameter manifest) and
/// `weights.bin` (f64 little-endian, concatenated in manifest order).
pub fn save_model(model: &AbcranModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let mut bytes = Vec::new();
    for p in &model.params {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset_bytes: bytes.len(),
        });
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = ModelMeta {
        version: MODEL_FORMAT_VERSION,
        seed: model.seed,
        config: model.config.clone(),
        manifest,
    };
    fs::write(dir.join("arch.json"), serde_json::to_string_pretty(&meta)?)?;
    fs::write(dir.join("weights.bin"), bytes)?;
    Ok(())
}

/// Reads a model directory written by [`save_model`]; bit-exact round trip.
pub fn load_model(dir: &Path) -> Result<AbcranModel> {
    let meta_raw = fs::read_to_string(dir.join("arch.json"))?;
    let meta: ModelMeta = serde_json::from_str(&meta_raw)?;
    if meta.version != MODEL_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported model format version {} (expected {})",
            meta.version, MODEL_FORMAT_VERSION
        )));
    }
    meta.config.validate()?;
    let specs = meta.config.param_specs();
    if specs.len() != meta.manifest.len() {
        return Err(Error::format(format!(
            "manifest lists {} parameters, config implies {}",
            meta.manifest.len(),
            specs.len()
        )));
    }
    let bytes = fs::read(dir.join("weights.bin"))?;
    let mut params = Vec::with_capacity(specs.len());
    let mut cursor = 0usize;
    for ((name, shape), entry) in specs.into_iter().zip(&meta.manifest) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::format(format!(
                "manifest entry {} {:?} does not match config parameter {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.offset_bytes != cursor {
            return Err(Error::format(format!(
                "manifest offset {} for {} is not contiguous (expected {})",
                entry.offset_bytes, name, cursor
            )));
        }
        let n: usize = shape.iter().product();
        let end = cursor + 8 * n;
        if end > bytes.len() {
            return Err(Error::format(format!(
                "weights.bin too short for parameter {name}"
            )));
        }
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Parameter::new(name, Tensor::new(&shape, data)?));
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::format(format!(
            "weights.bin holds {} bytes, manifest implies {}",
            bytes.len(),
            cursor
        )));
    }
    Ok(AbcranModel {
        config: meta.config,
        params,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ArchConfig {
        ArchConfig {
            nx: 16,
            latent_dim: 2,
            conv_channels: vec![2, 4],
            conv_kernels: vec![3, 3],
            dense_widths: vec![8],
            lstm_hidden: 4,
            k_in: 3,
            k_out: 3,
            input_scale: 1.0,
        }
    }

    #[test]
    fn default_config_counts_fifteen_layers() {
        let cfg = ArchConfig::default_for(256);
        cfg.validate().unwrap();
        assert_eq!(cfg.layer_names().len(), 15);
        assert_eq!(cfg.pooled_len(), 64);
        assert_eq!(cfg.flat_len(), 16 * 64);
    }

    #[test]
    fn config_validation_rejects_bad_topologies() {
        let mut cfg = ArchConfig::default_for(256);
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ArchConfig::default_for(250); // not divisible by 4
        cfg.latent_dim = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ArchConfig::default_for(256);
        cfg.conv_kernels = vec![4, 5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_decode_shapes_default_config() {
        let cfg = ArchConfig::default_for(256);
        let model = AbcranModel::new(cfg, 7).unwrap();
        let x = Tensor::from_fn(&[4, 256], |i| (i as f64 * 0.37).sin());
        let z = model.encode(&x).unwrap();
        assert_eq!(z.shape(), &[4, 2]);
        let back = model.decode(&z).unwrap();
        assert_eq!(back.shape(), &[4, 256]);
    }

    #[test]
    fn encode_is_batch_independent() {
        let model = AbcranModel::new(tiny_config(), 3).unwrap();
        let row: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let two = Tensor::new(&[2, 16], [row.clone(), row.clone()].concat()).unwrap();
        let z = model.encode(&two).unwrap();
        assert_eq!(z.row(0), z.row(1));
        let one = Tensor::new(&[1, 16], row).unwrap();
        let z1 = model.encode(&one).unwrap();
        assert_eq!(z.row(0), z1.row(0));
    }

    #[test]
    fn zero_weights_give_bias_output() {
        let mut model = AbcranModel::new(tiny_config(), 0).unwrap();
        for p in model.params.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = 0.0;
            }
        }
        // set the encoder's final bias; a zero input must pass it through
        let r = model.config.latent_dim;
        let bias = [0.25, -0.5];
        for p in model.params.iter_mut() {
            if p.name == "enc.dense2.b" {
                p.tensor.data_mut().copy_from_slice(&bias);
            }
        }
        let z = model.encode(&Tensor::zeros(&[3, 16])).unwrap();
        assert_eq!(z.shape(), &[3, r]);
        for b in 0..3 {
            assert_eq!(z.row(b), &bias);
        }
    }

    #[test]
    fn zero_parameters_propagate_to_zero() {
        let mut model = AbcranModel::new(tiny_config(), 0).unwrap();
        for p in model.params.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = 0.0;
            }
        }
        let seq = Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1 - 0.2);
        let out = model.propagate(&seq).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn propagate_shape_default_windows() {
        let mut cfg = ArchConfig::default_for(64);
        cfg.dense_widths = vec![32];
        let model = AbcranModel::new(cfg, 11).unwrap();
        let seq = Tensor::from_fn(&[4, 10, 2], |i| (i as f64 * 0.05).sin());
        let out = model.propagate(&seq).unwrap();
        assert_eq!(out.shape(), &[4, 10, 2]);
    }

    #[test]
    fn rollout_blocks_are_prefix_consistent() {
        let model = AbcranModel::new(tiny_config(), 5).unwrap();
        let seed = Tensor::from_fn(&[3, 16], |i| (i as f64 * 0.21).sin());
        let one_block = model.rollout(&seed, 3).unwrap();
        let two_blocks = model.rollout(&seed, 6).unwrap();
        assert_eq!(one_block.shape(), &[3, 16]);
        assert_eq!(two_blocks.shape(), &[6, 16]);
        assert_eq!(&two_blocks.data()[..3 * 16], one_block.data());
        // partial final block still truncates to the requested horizon
        let five = model.rollout(&seed, 5).unwrap();
        assert_eq!(five.shape(), &[5, 16]);
        assert_eq!(five.data(), &two_blocks.data()[..5 * 16]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = AbcranModel::new(tiny_config(), 42).unwrap();
        let b = AbcranModel::new(tiny_config(), 42).unwrap();
        assert_eq!(a, b);
        let c = AbcranModel::new(tiny_config(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = AbcranModel::new(tiny_config(), 9).unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(model, back);
        let seed = Tensor::from_fn(&[3, 16], |i| (i as f64 * 0.13).cos());
        let a = model.rollout(&seed, 6).unwrap();
        let b = back.rollout(&seed, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = AbcranModel::new(tiny_config(), 9).unwrap();
        save_model(&model, dir.path()).unwrap();
        let wpath = dir.path().join("weights.bin");
        let bytes = fs::read(&wpath).unwrap();
        fs::write(&wpath, &bytes[..bytes.len() - 16]).unwrap();
        match load_model(dir.path()) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn model_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = AbcranModel::new(tiny_config(), 9).unwrap();
        save_model(&model, dir.path()).unwrap();
        let apath = dir.path().join("arch.json");
        let meta = fs::read_to_string(&apath)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 7");
        fs::write(&apath, meta).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format(_))));
    }
}
