use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon used by the guarded square root (`sqrt(max(x, EPS))`), sized for
/// variance-to-std paths on near-constant slices.
pub const SQRT_EPS: f64 = 1e-30;

/// Handle to a node on a [`Tape`]. Invalidated by [`Tape::reset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: u32,
    generation: u32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Square,
    Tanh,
    Sigmoid,
    Relu,
    SqrtEps,
    Matmul,
    Affine,
    Conv1d { stride: usize, pad: usize },
    /// Width-2 max pooling; `argmax` caches, per output element, the flat
    /// input index that won (ties go to the lower index).
    MaxPool2 { argmax: Vec<u32> },
    Upsample2,
    SoftmaxLast,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    MeanAxis { axis: usize },
    VarAxis { axis: usize },
    MeanAll,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Square => "square",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::SqrtEps => "sqrt_eps",
            Op::Matmul => "matmul",
            Op::Affine => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 => "upsample2",
            Op::SoftmaxLast => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::MeanAxis { .. } => "mean_axis",
            Op::VarAxis { .. } => "var_axis",
            Op::MeanAll => "mean_all",
        }
    }
}

struct Node {
    value: Tensor,
    parents: Vec<u32>,
    op: Op,
}

/// Define-by-run gradient tape over [`Tensor`] values.
///
/// Nodes are appended in execution order, which is already a topological
/// order, so [`Tape::backward`] is a single reverse sweep. The tape is
/// rebuilt (or [`Tape::reset`]) for every training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
    generation: u32,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and gradients; previously issued `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads = None;
        self.generation += 1;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation {
            return Err(Error::Tape(
                "variable used after tape reset".into(),
            ));
        }
        let idx = v.index as usize;
        if idx >= self.nodes.len() {
            return Err(Error::Tape(format!("unknown variable index {idx}")));
        }
        Ok(idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.check(v).expect("invalid Var handle");
        &self.nodes[idx].value
    }

    fn push(&mut self, op: Op, parents: Vec<u32>, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        if self.grads.is_some() {
            return Err(Error::Tape(
                "cannot record new operations after backward(); reset() first".into(),
            ));
        }
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, parents, op });
        Ok(Var {
            index,
            generation: self.generation,
        })
    }

    /// Records an input tensor (parameter or constant) as a graph leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value)
    }

    fn binary_elementwise(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(op, vec![ia as u32, ib as u32], value)
    }

    fn unary_elementwise(
        &mut self,
        op: Op,
        a: Var,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(op, vec![ia as u32], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary_elementwise(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary_elementwise(Op::AddScalar, a, |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise(Op::Square, a, |x| x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise(Op::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `sqrt(max(x, SQRT_EPS))`; the clamped region has zero gradient.
    pub fn sqrt_eps(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise(Op::SqrtEps, a, |x| x.max(SQRT_EPS).sqrt())
    }

    /// 2-D `[m,k]·[k,n]` or batched 3-D `[b,m,k]·[b,k,n]` product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
                if k != k2 {
                    return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
                }
                let mut out = vec![0.0; m * n];
                matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
                Tensor::new(&[m, n], out)?
            }
            (3, 3) => {
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let (bt2, k2, n) = (sb[0], sb[1], sb[2]);
                if bt != bt2 || k != k2 {
                    return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
                }
                let mut out = vec![0.0; bt * m * n];
                for i in 0..bt {
                    matmul_into(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new(&[bt, m, n], out)?
            }
            _ => {
                return Err(Error::shape(format!(
                    "matmul expects rank 2x2 or 3x3, got {sa:?} x {sb:?}"
                )))
            }
        };
        self.push(Op::Matmul, vec![ia as u32, ib as u32], value)
    }

    /// `x·w + bias` with `x [b,i]`, `w [i,o]`, `bias [o]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ibias) = (self.check(x)?, self.check(w)?, self.check(bias)?);
        let (tx, tw, tb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ibias].value,
        );
        if tx.rank() != 2 || tw.rank() != 2 || tb.rank() != 1 {
            return Err(Error::shape(format!(
                "affine: x {:?}, w {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let (b, i) = (tx.shape()[0], tx.shape()[1]);
        let (i2, o) = (tw.shape()[0], tw.shape()[1]);
        if i != i2 || tb.shape()[0] != o {
            return Err(Error::shape(format!(
                "affine: x {:?}, w {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            out[r * o..(r + 1) * o].copy_from_slice(tb.data());
        }
        matmul_acc(tx.data(), tw.data(), &mut out, b, i, o);
        let value = Tensor::new(&[b, o], out)?;
        self.push(Op::Affine, vec![ix as u32, iw as u32, ibias as u32], value)
    }

    /// 1-D convolution with zero padding.
    /// `x [b,ci,L]`, `w [co,ci,k]`, `bias [co]` -> `[b,co,(L+2p-k)/s+1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv1d: stride must be >= 1"));
        }
        let (ix, iw, ibias) = (self.check(x)?, self.check(w)?, self.check(bias)?);
        let (tx, tw, tb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ibias].value,
        );
        if tx.rank() != 3 || tw.rank() != 3 || tb.rank() != 1 {
            return Err(Error::shape(format!(
                "conv1d: x {:?}, w {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let (b, ci, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (co, ci2, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if ci != ci2 || tb.shape()[0] != co || l + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv1d: x {:?}, w {:?}, bias {:?}, stride {stride}, pad {pad}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let lo = (l + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * co * lo];
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        for bi in 0..b {
            for oc in 0..co {
                let orow = (bi * co + oc) * lo;
                for j in 0..lo {
                    let mut acc = bd[oc];
                    let base = j * stride;
                    for ic in 0..ci {
                        let xrow = (bi * ci + ic) * l;
                        let wrow = (oc * ci + ic) * k;
                        for t in 0..k {
                            let pos = base + t;
                            if pos >= pad && pos - pad < l {
                                acc += wd[wrow + t] * xd[xrow + pos - pad];
                            }
                        }
                    }
                    out[orow + j] = acc;
                }
            }
        }
        let value = Tensor::new(&[b, co, lo], out)?;
        self.push(
            Op::Conv1d { stride, pad },
            vec![ix as u32, iw as u32, ibias as u32],
            value,
        )
    }

    /// Width-2 max pooling over the last axis of `[b,c,L]` (L must be even).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if tx.rank() != 3 || tx.shape()[2] % 2 != 0 || tx.shape()[2] == 0 {
            return Err(Error::shape(format!(
                "maxpool2 expects [b,c,L] with even L, got {:?}",
                tx.shape()
            )));
        }
        let (b, c, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let lo = l / 2;
        let xd = tx.data();
        let mut out = vec![0.0; b * c * lo];
        let mut argmax = vec![0u32; b * c * lo];
        for row in 0..b * c {
            let xrow = row * l;
            let orow = row * lo;
            for j in 0..lo {
                let i0 = xrow + 2 * j;
                // ties keep the lower index
                let (v, a) = if xd[i0 + 1] > xd[i0] {
                    (xd[i0 + 1], i0 + 1)
                } else {
                    (xd[i0], i0)
                };
                out[orow + j] = v;
                argmax[orow + j] = a as u32;
            }
        }
        let value = Tensor::new(&[b, c, lo], out)?;
        self.push(Op::MaxPool2 { argmax }, vec![ix as u32], value)
    }

    /// Nearest-neighbor 2x upsampling over the last axis of `[b,c,L]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if tx.rank() != 3 {
            return Err(Error::shape(format!(
                "upsample2 expects [b,c,L], got {:?}",
                tx.shape()
            )));
        }
        let (b, c, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let xd = tx.data();
        let mut out = vec![0.0; b * c * 2 * l];
        for row in 0..b * c {
            for i in 0..l {
                let v = xd[row * l + i];
                out[row * 2 * l + 2 * i] = v;
                out[row * 2 * l + 2 * i + 1] = v;
            }
        }
        let value = Tensor::new(&[b, c, 2 * l], out)?;
        self.push(Op::Upsample2, vec![ix as u32], value)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if tx.rank() == 0 || tx.shape()[tx.rank() - 1] == 0 {
            return Err(Error::shape(format!(
                "softmax needs a nonempty last axis, got {:?}",
                tx.shape()
            )));
        }
        let w = tx.shape()[tx.rank() - 1];
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push(Op::SoftmaxLast, vec![ix as u32], value)
    }

    /// Concatenates along `axis`; inputs must agree on all other extents.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat: empty input list"));
        }
        let idxs: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0usize;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::shape(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    first, s
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let row_out = total * inner;
        let mut offset = 0usize;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let mid = s[axis];
            let block = mid * inner;
            let d = self.nodes[i].value.data();
            for o in 0..outer {
                out[o * row_out + offset..o * row_out + offset + block]
                    .copy_from_slice(&d[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            Op::Concat { axis },
            idxs.into_iter().map(|i| i as u32).collect(),
            value,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let shape = tx.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice axis {axis} [{start}..{}] of {shape:?}",
                start + len
            )));
        }
        let (outer, mid, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let d = tx.data();
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&d[src..src + len * inner]);
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(Op::Slice { axis, start }, vec![ix as u32], value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.clone().reshaped(shape)?;
        self.push(Op::Reshape, vec![ix as u32], value)
    }

    /// Arithmetic mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let shape = tx.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, mid, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let d = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[src + i];
                }
            }
        }
        let inv = 1.0 / mid as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(Op::MeanAxis { axis }, vec![ix as u32], value)
    }

    /// Population variance over one axis (the axis is removed).
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let shape = tx.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!(
                "variance over axis {axis} of {shape:?}"
            )));
        }
        let (outer, mid, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let d = tx.data();
        let inv = 1.0 / mid as f64;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut mean = 0.0;
                for m in 0..mid {
                    mean += d[(o * mid + m) * inner + i];
                }
                mean *= inv;
                let mut acc = 0.0;
                for m in 0..mid {
                    let dv = d[(o * mid + m) * inner + i] - mean;
                    acc += dv * dv;
                }
                out[o * inner + i] = acc * inv;
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(Op::VarAxis { axis }, vec![ix as u32], value)
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if tx.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let mean = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let value = Tensor::scalar(mean);
        self.push(Op::MeanAll, vec![ix as u32], value)
    }

    /// Runs the reverse sweep from a scalar output. May be called once per
    /// recorded graph; call [`Tape::reset`] before reusing the tape.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let iout = self.check(out)?;
        if self.grads.is_some() {
            return Err(Error::Tape(
                "backward() already ran on this tape; reset() first".into(),
            ));
        }
        if !self.nodes[iout].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[iout].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[iout] = Some(Tensor::full(self.nodes[iout].value.shape(), 1.0));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the backward output with respect to `v`. Zero tensor if the
    /// node does not influence the output.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let idx = self.check(v)?;
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Tape("grad() before backward()".into()))?;
        Ok(match &grads[idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[idx].value.shape()),
        })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let parents = &node.parents;
        let gd = g.data();
        macro_rules! acc {
            ($p:expr) => {{
                let pi = parents[$p] as usize;
                if grads[pi].is_none() {
                    grads[pi] = Some(Tensor::zeros(self.nodes[pi].value.shape()));
                }
                grads[pi].as_mut().unwrap().data_mut()
            }};
        }
        let pval = |p: usize| self.nodes[parents[p] as usize].value.data();
        let pshape = |p: usize| self.nodes[parents[p] as usize].value.shape();

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for (dst, &gv) in acc!(0).iter_mut().zip(gd) {
                    *dst += gv;
                }
                for (dst, &gv) in acc!(1).iter_mut().zip(gd) {
                    *dst += gv;
                }
            }
            Op::Sub => {
                for (dst, &gv) in acc!(0).iter_mut().zip(gd) {
                    *dst += gv;
                }
                for (dst, &gv) in acc!(1).iter_mut().zip(gd) {
                    *dst -= gv;
                }
            }
            Op::Mul => {
                {
                    let bvals = pval(1).to_vec();
                    for ((dst, &gv), bv) in acc!(0).iter_mut().zip(gd).zip(bvals) {
                        *dst += gv * bv;
                    }
                }
                let avals = pval(0).to_vec();
                for ((dst, &gv), av) in acc!(1).iter_mut().zip(gd).zip(avals) {
                    *dst += gv * av;
                }
            }
            Op::Scale(c) => {
                let c = *c;
                for (dst, &gv) in acc!(0).iter_mut().zip(gd) {
                    *dst += gv * c;
                }
            }
            Op::AddScalar | Op::Reshape => {
                for (dst, &gv) in acc!(0).iter_mut().zip(gd) {
                    *dst += gv;
                }
            }
            Op::Square => {
                let xv = pval(0).to_vec();
                for ((dst, &gv), x) in acc!(0).iter_mut().zip(gd).zip(xv) {
                    *dst += 2.0 * x * gv;
                }
            }
            Op::Tanh => {
                let yv = node.value.data().to_vec();
                for ((dst, &gv), y) in acc!(0).iter_mut().zip(gd).zip(yv) {
                    *dst += (1.0 - y * y) * gv;
                }
            }
            Op::Sigmoid => {
                let yv = node.value.data().to_vec();
                for ((dst, &gv), y) in acc!(0).iter_mut().zip(gd).zip(yv) {
                    *dst += y * (1.0 - y) * gv;
                }
            }
            Op::Relu => {
                let xv = pval(0).to_vec();
                for ((dst, &gv), x) in acc!(0).iter_mut().zip(gd).zip(xv) {
                    if x > 0.0 {
                        *dst += gv;
                    }
                }
            }
            Op::SqrtEps => {
                let xv = pval(0).to_vec();
                let yv = node.value.data().to_vec();
                for (((dst, &gv), x), y) in acc!(0).iter_mut().zip(gd).zip(xv).zip(yv) {
                    if x > SQRT_EPS {
                        *dst += 0.5 / y * gv;
                    }
                }
            }
            Op::Matmul => {
                let sa = pshape(0).to_vec();
                let sb = pshape(1).to_vec();
                let (batches, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                {
                    let bvals = pval(1).to_vec();
                    let da = acc!(0);
                    // dA = g · B^T
                    for bt in 0..batches {
                        let gb = &gd[bt * m * n..(bt + 1) * m * n];
                        let bb = &bvals[bt * k * n..(bt + 1) * k * n];
                        let ab = &mut da[bt * m * k..(bt + 1) * m * k];
                        for r in 0..m {
                            for c in 0..k {
                                let mut a = 0.0;
                                for j in 0..n {
                                    a += gb[r * n + j] * bb[c * n + j];
                                }
                                ab[r * k + c] += a;
                            }
                        }
                    }
                }
                let avals = pval(0).to_vec();
                let db = acc!(1);
                // dB = A^T · g
                for bt in 0..batches {
                    let gb = &gd[bt * m * n..(bt + 1) * m * n];
                    let ab = &avals[bt * m * k..(bt + 1) * m * k];
                    let bb = &mut db[bt * k * n..(bt + 1) * k * n];
                    for r in 0..m {
                        let arow = &ab[r * k..(r + 1) * k];
                        let grow = &gb[r * n..(r + 1) * n];
                        for (c, &av) in arow.iter().enumerate() {
                            if av != 0.0 {
                                for (j, &gv) in grow.iter().enumerate() {
                                    bb[c * n + j] += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Affine => {
                let (b, i_dim) = {
                    let s = pshape(0);
                    (s[0], s[1])
                };
                let o = pshape(2)[0];
                {
                    let wvals = pval(1).to_vec();
                    let dx = acc!(0);
                    // dx = g · w^T
                    for r in 0..b {
                        for c in 0..i_dim {
                            let mut a = 0.0;
                            let wrow = &wvals[c * o..(c + 1) * o];
                            let grow = &gd[r * o..(r + 1) * o];
                            for (wv, gv) in wrow.iter().zip(grow) {
                                a += wv * gv;
                            }
                            dx[r * i_dim + c] += a;
                        }
                    }
                }
                {
                    let xvals = pval(0).to_vec();
                    let dw = acc!(1);
                    // dw = x^T · g
                    for r in 0..b {
                        let grow = &gd[r * o..(r + 1) * o];
                        for c in 0..i_dim {
                            let xv = xvals[r * i_dim + c];
                            if xv != 0.0 {
                                let wrow = &mut dw[c * o..(c + 1) * o];
                                for (dst, &gv) in wrow.iter_mut().zip(grow) {
                                    *dst += xv * gv;
                                }
                            }
                        }
                    }
                }
                let db = acc!(2);
                for r in 0..b {
                    for (dst, &gv) in db.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                        *dst += gv;
                    }
                }
            }
            Op::Conv1d { stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = pshape(0).to_vec();
                let ws = pshape(1).to_vec();
                let (b, ci, l) = (xs[0], xs[1], xs[2]);
                let (co, _, k) = (ws[0], ws[1], ws[2]);
                let lo = node.value.shape()[2];
                {
                    let wvals = pval(1).to_vec();
                    let dx = acc!(0);
                    for bi in 0..b {
                        for oc in 0..co {
                            let orow = (bi * co + oc) * lo;
                            for j in 0..lo {
                                let gv = gd[orow + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let base = j * stride;
                                for ic in 0..ci {
                                    let xrow = (bi * ci + ic) * l;
                                    let wrow = (oc * ci + ic) * k;
                                    for t in 0..k {
                                        let pos = base + t;
                                        if pos >= pad && pos - pad < l {
                                            dx[xrow + pos - pad] += wvals[wrow + t] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let xvals = pval(0).to_vec();
                    let dw = acc!(1);
                    for bi in 0..b {
                        for oc in 0..co {
                            let orow = (bi * co + oc) * lo;
                            for j in 0..lo {
                                let gv = gd[orow + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let base = j * stride;
                                for ic in 0..ci {
                                    let xrow = (bi * ci + ic) * l;
                                    let wrow = (oc * ci + ic) * k;
                                    for t in 0..k {
                                        let pos = base + t;
                                        if pos >= pad && pos - pad < l {
                                            dw[wrow + t] += xvals[xrow + pos - pad] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let db = acc!(2);
                for bi in 0..b {
                    for oc in 0..co {
                        let orow = (bi * co + oc) * lo;
                        db[oc] += gd[orow..orow + lo].iter().sum::<f64>();
                    }
                }
            }
            Op::MaxPool2 { argmax } => {
                let dx = acc!(0);
                for (out_idx, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += gd[out_idx];
                }
            }
            Op::Upsample2 => {
                let xs = pshape(0).to_vec();
                let l = xs[2];
                let rows: usize = xs[0] * xs[1];
                let dx = acc!(0);
                for row in 0..rows {
                    for i in 0..l {
                        dx[row * l + i] += gd[row * 2 * l + 2 * i] + gd[row * 2 * l + 2 * i + 1];
                    }
                }
            }
            Op::SoftmaxLast => {
                let y = node.value.data().to_vec();
                let w = node.value.shape()[node.value.rank() - 1];
                let dx = acc!(0);
                for r in 0..y.len() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &gd[r * w..(r + 1) * w];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dst, &yv), &gv) in dx[r * w..(r + 1) * w].iter_mut().zip(yr).zip(gr) {
                        *dst += yv * (gv - dot);
                    }
                }
            }
            Op::Concat { axis } => {
                let shape = node.value.shape().to_vec();
                let (outer, _, inner) = axis_split(&shape, *axis);
                let row_out = shape[*axis] * inner;
                let mut offset = 0usize;
                for p in 0..parents.len() {
                    let mid = pshape(p)[*axis];
                    let block = mid * inner;
                    let dst = acc!(p);
                    for o in 0..outer {
                        for (d, &gv) in dst[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(&gd[o * row_out + offset..o * row_out + offset + block])
                        {
                            *d += gv;
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { axis, start } => {
                let in_shape = pshape(0).to_vec();
                let (outer, mid, inner) = axis_split(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                let dx = acc!(0);
                for o in 0..outer {
                    let dst0 = (o * mid + start) * inner;
                    for (d, &gv) in dx[dst0..dst0 + len * inner]
                        .iter_mut()
                        .zip(&gd[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += gv;
                    }
                }
            }
            Op::MeanAxis { axis } => {
                let in_shape = pshape(0).to_vec();
                let (outer, mid, inner) = axis_split(&in_shape, *axis);
                let inv = 1.0 / mid as f64;
                let dx = acc!(0);
                for o in 0..outer {
                    for m in 0..mid {
                        let dst = (o * mid + m) * inner;
                        for i in 0..inner {
                            dx[dst + i] += gd[o * inner + i] * inv;
                        }
                    }
                }
            }
            Op::VarAxis { axis } => {
                // d var / d x_k = 2 (x_k - mean) / n
                let in_shape = pshape(0).to_vec();
                let (outer, mid, inner) = axis_split(&in_shape, *axis);
                let inv = 1.0 / mid as f64;
                let xv = pval(0).to_vec();
                let dx = acc!(0);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut mean = 0.0;
                        for m in 0..mid {
                            mean += xv[(o * mid + m) * inner + i];
                        }
                        mean *= inv;
                        let gv = gd[o * inner + i];
                        for m in 0..mid {
                            let idx = (o * mid + m) * inner + i;
                            dx[idx] += 2.0 * (xv[idx] - mean) * inv * gv;
                        }
                    }
                }
            }
            Op::MeanAll => {
                let inv = 1.0 / pval(0).len() as f64;
                let gv = gd[0] * inv;
                for dst in acc!(0).iter_mut() {
                    *dst += gv;
                }
            }
        }
        Ok(())
    }
}

/// `out = a·b` for row-major `a [m,k]`, `b [k,n]` (out must be zeroed).
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc(a, b, out, m, k, n);
}

/// `out += a·b`, row-major.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}
