//! Reverse-mode differentiation over coarse layer operations.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node
//! holding its output grid and whatever the backward kernel needs.
//! Parameters are never copied onto the tape: operations reference them by
//! [`ParamId`] and [`Tape::backward`] accumulates into a [`Gradients`]
//! buffer shaped like the store.

use super::kernels::{self, AttentionCache, ConvSpec, NormCache, SsmDims, SsmGrads};
use super::{Gradients, ParamId, ParamStore, Real, SeqTensor, ValidityMask};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R> {
    Input {
        requires_grad: bool,
    },
    Conv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        spec: ConvSpec,
    },
    LayerNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        cache: NormCache<R>,
    },
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    /// Zeroes columns whose flag is false.
    MaskCols(Var, Vec<bool>),
    ReverseTime(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SsmScan {
        u: Var,
        delta: Var,
        b_in: Var,
        c_out: Var,
        a_log: ParamId,
        skip: ParamId,
        states: Vec<R>,
        a: Vec<R>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cache: AttentionCache<R>,
    },
    MaskedMean {
        x: Var,
        valid_len: usize,
    },
    Sum(Var),
    /// Scalar with caller-supplied local gradients `d value / d input`.
    Custom(Vec<(Var, Vec<R>)>),
}

struct Node<R> {
    rows: usize,
    cols: usize,
    value: Vec<R>,
    op: Op<R>,
}

/// Records a forward pass against a borrowed parameter store.
pub struct Tape<'p, R: Real = f32> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
}

/// Result of [`Tape::backward`].
pub struct Backward<R> {
    pub params: Gradients<R>,
    nodes: Vec<Option<Vec<R>>>,
}

impl<R: Real> Backward<R> {
    /// Gradient with respect to a recorded node, if any flowed into it.
    pub fn wrt(&self, var: Var) -> Option<&[R]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<R> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<R>, op: Op<R>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> SeqTensor<R> {
        let n = &self.nodes[v.0];
        SeqTensor::from_vec(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, x: &SeqTensor<R>, requires_grad: bool) -> Var {
        self.push(
            x.channels(),
            x.length(),
            x.values().to_vec(),
            Op::Input { requires_grad },
        )
    }

    pub fn conv1d(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>, out_channels: usize, spec: ConvSpec) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let out = kernels::conv1d_forward(
            self.data(x),
            rows,
            cols,
            self.params.values(weight),
            bias.map(|b| self.params.values(b)),
            out_channels,
            &spec,
        )?;
        let len = spec.output_len(cols)?;
        Ok(self.push(out_channels, len, out, Op::Conv { x, weight, bias, spec }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let (y, cache) = kernels::layer_norm_forward(
            self.data(x),
            rows,
            cols,
            self.params.values(gamma),
            self.params.values(beta),
        )?;
        Ok(self.push(rows, cols, y, Op::LayerNorm { x, gamma, beta, cache }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let (rows, cols) = self.shape(x);
        let y = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(rows, cols, y, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(R::zero()), Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| R::of(v.f64() * kernels::sigmoid(v.f64())), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| R::of(kernels::softplus(v.f64())), Op::Softplus(x))
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise operands {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (rows, cols) = self.shape(a);
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(rows, cols, y, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Zeroes the columns a validity mask marks invalid.
    pub fn mask(&mut self, x: Var, mask: &ValidityMask) -> Result<Var> {
        self.mask_cols(x, mask.as_slice().to_vec())
    }

    pub fn mask_cols(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if keep.len() != cols {
            return Err(Error::Config(format!(
                "mask length {} differs from sequence length {cols}",
                keep.len()
            )));
        }
        let mut y = self.data(x).to_vec();
        for r in 0..rows {
            for (v, &k) in y[r * cols..(r + 1) * cols].iter_mut().zip(&keep) {
                if !k {
                    *v = R::zero();
                }
            }
        }
        Ok(self.push(rows, cols, y, Op::MaskCols(x, keep)))
    }

    pub fn reverse_time(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let src = self.data(x);
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            y.extend(src[r * cols..(r + 1) * cols].iter().rev());
        }
        self.push(rows, cols, y, Op::ReverseTime(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + count > rows {
            return Err(Error::Shape(format!("rows {start}..{} of {rows}", start + count)));
        }
        let y = self.data(x)[start * cols..(start + count) * cols].to_vec();
        Ok(self.push(count, cols, y, Op::SliceRows { x, start }))
    }

    /// Masked max pooling; returns the pooled node and its mask.
    pub fn masked_maxpool(&mut self, x: Var, mask: &ValidityMask, kernel: usize, stride: usize, padding: usize) -> Result<(Var, ValidityMask)> {
        let (rows, cols) = self.shape(x);
        let (y, valid, argmax) =
            kernels::masked_maxpool_forward(self.data(x), rows, cols, mask.as_slice(), kernel, stride, padding)?;
        let out_len = valid.len();
        let out_mask = ValidityMask::from_bools(valid)?;
        Ok((self.push(rows, out_len, y, Op::MaxPool { x, argmax }), out_mask))
    }

    /// State-expanded selective scan (see [`kernels::ssm_scan_forward`]).
    /// The decay matrix is `A = -exp(a_log)`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(&mut self, u: Var, delta: Var, b_in: Var, c_out: Var, a_log: ParamId, skip: ParamId) -> Result<Var> {
        let (channels, len) = self.shape(u);
        let state = self.shape(b_in).0;
        if self.shape(delta) != (channels, len) || self.shape(b_in) != (state, len) || self.shape(c_out) != (state, len) {
            return Err(Error::Shape("selective scan operand shapes".into()));
        }
        if self.params.values(a_log).len() != channels * state || self.params.values(skip).len() != channels {
            return Err(Error::Config("selective scan parameter sizes".into()));
        }
        let a: Vec<R> = self.params.values(a_log).iter().map(|&v| -v.exp()).collect();
        let dims = SsmDims { channels, state, len };
        let (y, states) = kernels::ssm_scan_forward(
            self.data(u),
            self.data(delta),
            self.data(b_in),
            self.data(c_out),
            &a,
            self.params.values(skip),
            dims,
        )?;
        Ok(self.push(
            channels,
            len,
            y,
            Op::SsmScan { u, delta, b_in, c_out, a_log, skip, states, a },
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, query_mask: &ValidityMask, key_mask: &ValidityMask) -> Result<Var> {
        let (dim, len) = self.shape(q);
        if self.shape(k) != (dim, len) || self.shape(v) != (dim, len) {
            return Err(Error::Internal(format!(
                "attention streams differ: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if query_mask.len() != len || key_mask.len() != len {
            return Err(Error::Internal("attention mask length".into()));
        }
        let (y, cache) = kernels::attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            dim,
            len,
            query_mask.as_slice(),
            key_mask.as_slice(),
        )?;
        Ok(self.push(dim, len, y, Op::Attention { q, k, v, cache }))
    }

    /// Per-row mean over the valid prefix; output is `rows × 1`.
    pub fn masked_mean(&mut self, x: Var, mask: &ValidityMask) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let valid_len = mask.valid_len();
        if mask.len() != cols || valid_len == 0 {
            return Err(Error::Domain("masked mean needs at least one valid position".into()));
        }
        let data = self.data(x);
        let y = (0..rows)
            .map(|r| {
                let s: f64 = data[r * cols..r * cols + valid_len].iter().map(|v| v.f64()).sum();
                R::of(s / valid_len as f64)
            })
            .collect();
        Ok(self.push(rows, 1, y, Op::MaskedMean { x, valid_len }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.f64()).sum();
        self.push(1, 1, vec![R::of(s)], Op::Sum(x))
    }

    /// Records a scalar computed outside the tape together with its local
    /// gradient with respect to each input node.
    pub fn custom_scalar(&mut self, value: R, local_grads: Vec<(Var, Vec<R>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if g.len() != self.data(*v).len() {
                return Err(Error::Shape("custom gradient size".into()));
            }
        }
        Ok(self.push(1, 1, vec![value], Op::Custom(local_grads)))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Backward<R>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        let root = &self.nodes[loss.0];
        if root.rows * root.cols != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {}x{}",
                root.rows, root.cols
            )));
        }
        if !root.value[0].is_finite() {
            return Err(Error::numeric("loss", "non-finite loss value"));
        }
        let mut pgrads = self.params.zero_gradients();
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads, &mut pgrads);
            grads[idx] = Some(gy);
        }
        // Only keep gradients of inputs that asked for them and of interior nodes.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { requires_grad: false } = node.op {
                grads[i] = None;
            }
        }
        Ok(Backward {
            params: pgrads,
            nodes: grads,
        })
    }

    fn backprop_node(&self, idx: usize, gy: &[R], grads: &mut [Option<Vec<R>>], pg: &mut Gradients<R>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input { .. } => {}
            Op::Conv { x, weight, bias, spec } => {
                let (rows, cols) = self.shape(*x);
                let w = self.params.values(*weight);
                let mut gw = std::mem::take(pg.grads_mut_vec(*weight));
                let mut gb = bias.map(|b| std::mem::take(pg.grads_mut_vec(b)));
                let gx = slot(grads, *x, rows * cols);
                kernels::conv1d_backward(
                    self.data(*x),
                    rows,
                    cols,
                    w,
                    node.rows,
                    spec,
                    gy,
                    Some(gx),
                    &mut gw,
                    gb.as_deref_mut(),
                );
                *pg.grads_mut_vec(*weight) = gw;
                if let (Some(b), Some(gb)) = (bias, gb) {
                    *pg.grads_mut_vec(*b) = gb;
                }
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let mut gg = std::mem::take(pg.grads_mut_vec(*gamma));
                let mut gbeta = std::mem::take(pg.grads_mut_vec(*beta));
                let gx = slot(grads, *x, node.rows * node.cols);
                kernels::layer_norm_backward(
                    cache,
                    node.rows,
                    node.cols,
                    self.params.values(*gamma),
                    gy,
                    Some(gx),
                    &mut gg,
                    &mut gbeta,
                );
                *pg.grads_mut_vec(*gamma) = gg;
                *pg.grads_mut_vec(*beta) = gbeta;
            }
            Op::Relu(x) => {
                let xs = &self.nodes[x.0].value;
                let gx = slot(grads, *x, xs.len());
                for ((g, &v), &u) in gx.iter_mut().zip(gy).zip(xs) {
                    if u > R::zero() {
                        *g += v;
                    }
                }
            }
            Op::Silu(x) => {
                let xs = &self.nodes[x.0].value;
                let gx = slot(grads, *x, xs.len());
                for ((g, &v), &u) in gx.iter_mut().zip(gy).zip(xs) {
                    let s = kernels::sigmoid(u.f64());
                    *g += R::of(v.f64() * s * (1.0 + u.f64() * (1.0 - s)));
                }
            }
            Op::Softplus(x) => {
                let xs = &self.nodes[x.0].value;
                let gx = slot(grads, *x, xs.len());
                for ((g, &v), &u) in gx.iter_mut().zip(gy).zip(xs) {
                    *g += R::of(v.f64() * kernels::sigmoid(u.f64()));
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    let gx = slot(grads, *x, gy.len());
                    for (g, &v) in gx.iter_mut().zip(gy) {
                        *g += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    let ov = &self.nodes[other.0].value;
                    let gx = slot(grads, *x, gy.len());
                    for ((g, &v), &o) in gx.iter_mut().zip(gy).zip(ov) {
                        *g += v * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, gy.len());
                for (g, &v) in gx.iter_mut().zip(gy) {
                    *g += v * *s;
                }
            }
            Op::MaskCols(x, keep) => {
                let cols = node.cols;
                let gx = slot(grads, *x, gy.len());
                for (i, (g, &v)) in gx.iter_mut().zip(gy).enumerate() {
                    if keep[i % cols] {
                        *g += v;
                    }
                }
            }
            Op::ReverseTime(x) => {
                let cols = node.cols;
                let gx = slot(grads, *x, gy.len());
                for r in 0..node.rows {
                    for t in 0..cols {
                        gx[r * cols + t] += gy[r * cols + cols - 1 - t];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let gx = slot(grads, *x, rows * cols);
                let off = start * cols;
                for (g, &v) in gx[off..off + gy.len()].iter_mut().zip(gy) {
                    *g += v;
                }
            }
            Op::MaxPool { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let gx = slot(grads, *x, rows * cols);
                for (&src, &v) in argmax.iter().zip(gy) {
                    if src != usize::MAX {
                        gx[src] += v;
                    }
                }
            }
            Op::SsmScan { u, delta, b_in, c_out, a_log, skip, states, a } => {
                let (channels, len) = self.shape(*u);
                let state = self.shape(*b_in).0;
                let dims = SsmDims { channels, state, len };
                let mut gu = take_slot(grads, *u, channels * len);
                let mut gd = take_slot(grads, *delta, channels * len);
                let mut gbm = take_slot(grads, *b_in, state * len);
                let mut gcm = take_slot(grads, *c_out, state * len);
                let mut ga = vec![0.0f64; channels * state];
                let mut gskip = std::mem::take(pg.grads_mut_vec(*skip));
                kernels::ssm_scan_backward(
                    self.data(*u),
                    self.data(*delta),
                    self.data(*b_in),
                    self.data(*c_out),
                    a,
                    self.params.values(*skip),
                    states,
                    dims,
                    gy,
                    SsmGrads {
                        u: Some(&mut gu),
                        delta: Some(&mut gd),
                        b_in: Some(&mut gbm),
                        c_out: Some(&mut gcm),
                        a: &mut ga,
                        skip: &mut gskip,
                    },
                );
                *pg.grads_mut_vec(*skip) = gskip;
                // dA/da_log = A
                let galog = pg.grads_mut_vec(*a_log);
                for ((g, &gav), &av) in galog.iter_mut().zip(&ga).zip(a.iter()) {
                    *g += R::of(gav * av.f64());
                }
                merge_slot(grads, *u, gu);
                merge_slot(grads, *delta, gd);
                merge_slot(grads, *b_in, gbm);
                merge_slot(grads, *c_out, gcm);
            }
            Op::Attention { q, k, v, cache } => {
                let (dim, len) = (node.rows, node.cols);
                let mut gq = take_slot(grads, *q, dim * len);
                let mut gk = take_slot(grads, *k, dim * len);
                let mut gv = take_slot(grads, *v, dim * len);
                kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    dim,
                    len,
                    cache,
                    gy,
                    Some(&mut gq),
                    Some(&mut gk),
                    Some(&mut gv),
                );
                // q, k and v may alias when the same node feeds several roles.
                merge_slot(grads, *q, gq);
                merge_slot(grads, *k, gk);
                merge_slot(grads, *v, gv);
            }
            Op::MaskedMean { x, valid_len } => {
                let (rows, cols) = self.shape(*x);
                let gx = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let g = gy[r] / R::of(*valid_len as f64);
                    for v in &mut gx[r * cols..r * cols + valid_len] {
                        *v += g;
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.nodes[x.0].value.len());
                for v in gx.iter_mut() {
                    *v += gy[0];
                }
            }
            Op::Custom(locals) => {
                for (x, local) in locals {
                    let gx = slot(grads, *x, local.len());
                    for (g, &l) in gx.iter_mut().zip(local) {
                        *g += gy[0] * l;
                    }
                }
            }
        }
    }
}

fn slot<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, len: usize) -> &mut Vec<R> {
    grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
}

fn take_slot<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, len: usize) -> Vec<R> {
    grads[v.0].take().unwrap_or_else(|| vec![R::zero(); len])
}

fn merge_slot<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, g: Vec<R>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        none => *none = Some(g),
    }
}

