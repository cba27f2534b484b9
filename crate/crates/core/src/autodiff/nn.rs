use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles for one LSTM cell's parameters.
///
/// `wx [in, 4H]`, `wh [H, 4H]`, `b [4H]`; the packed gate order along the
/// width is input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParamVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

/// One LSTM step: `x [batch, in]`, `h_prev`/`c_prev [batch, H]` -> `(h, c)`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    params: &LstmParamVars,
) -> Result<(Var, Var)> {
    let zx = tape.affine(x, params.wx, params.b)?;
    let zh = tape.matmul(h_prev, params.wh)?;
    let z = tape.add(zx, zh)?;
    let width = tape.value(z).shape()[1];
    if width % 4 != 0 {
        return Err(Error::shape(format!(
            "lstm gate width {width} is not a multiple of 4"
        )));
    }
    let h = width / 4;
    let i_gate = {
        let s = tape.slice(z, 1, 0, h)?;
        tape.sigmoid(s)?
    };
    let f_gate = {
        let s = tape.slice(z, 1, h, h)?;
        tape.sigmoid(s)?
    };
    let g_cand = {
        let s = tape.slice(z, 1, 2 * h, h)?;
        tape.tanh(s)?
    };
    let o_gate = {
        let s = tape.slice(z, 1, 3 * h, h)?;
        tape.sigmoid(s)?
    };
    let keep = tape.mul(f_gate, c_prev)?;
    let write = tape.mul(i_gate, g_cand)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c)?;
    let h_out = tape.mul(o_gate, c_act)?;
    Ok((h_out, c))
}

/// Scaled dot-product attention.
///
/// `query [batch, d]`, `keys`/`values [batch, L, d]` -> context `[batch, d]`
/// with weights `softmax(query·keysᵀ/√d)`. Parameter-free.
pub fn dot_attention(tape: &mut Tape, query: Var, keys: Var, values: Var) -> Result<Var> {
    let ks = tape.value(keys).shape().to_vec();
    let qs = tape.value(query).shape().to_vec();
    let vs = tape.value(values).shape().to_vec();
    if ks.len() != 3 || vs.len() != 3 || qs.len() != 2 {
        return Err(Error::shape(format!(
            "dot_attention: query {qs:?}, keys {ks:?}, values {vs:?}"
        )));
    }
    let (b, l, d) = (ks[0], ks[1], ks[2]);
    if l == 0 {
        return Err(Error::invalid("dot_attention: empty key/value sequence"));
    }
    if qs != [b, d] || vs != [b, l, d] {
        return Err(Error::shape(format!(
            "dot_attention: query {qs:?}, keys {ks:?}, values {vs:?}"
        )));
    }
    let q3 = tape.reshape(query, &[b, d, 1])?;
    let scores = tape.matmul(keys, q3)?; // [b, L, 1]
    let scores = tape.reshape(scores, &[b, l])?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_last(scaled)?;
    let w3 = tape.reshape(weights, &[b, 1, l])?;
    let ctx = tape.matmul(w3, values)?; // [b, 1, d]
    tape.reshape(ctx, &[b, d])
}
