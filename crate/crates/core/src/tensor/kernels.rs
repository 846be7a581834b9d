//! Plain layer kernels over channel-major buffers.
//!
//! Each forward kernel has a matching backward that accumulates into
//! caller-provided gradient buffers. The [`Tape`](super::Tape) records calls
//! to these; the `SeqTensor` wrappers at the bottom of the file are the
//! non-recording entry points.

use super::{Real, SeqTensor, ValidityMask, LN_EPS};
use crate::{Error, Result};

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    /// Length-preserving convolution for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad_left: (kernel - 1) / 2,
            pad_right: (kernel - 1) / 2,
            depthwise: false,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }

    /// Left-padded convolution: output `t` only reads inputs `<= t`.
    pub fn causal(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad_left: kernel - 1,
            pad_right: 0,
            depthwise: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.depthwise = true;
        self
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        let padded = len + self.pad_left + self.pad_right;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "padded length {padded} shorter than kernel {}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_len(&self, in_channels: usize, out_channels: usize) -> usize {
        let per_out = if self.depthwise { 1 } else { in_channels };
        out_channels * per_out * self.kernel
    }

    fn validate(&self, in_channels: usize, out_channels: usize, weight_len: usize, bias_len: Option<usize>) -> Result<()> {
        if self.depthwise && in_channels != out_channels {
            return Err(Error::Config(format!(
                "depthwise convolution maps {in_channels} channels to {out_channels}"
            )));
        }
        let expected = self.weight_len(in_channels, out_channels);
        if weight_len != expected {
            return Err(Error::Config(format!(
                "conv weight has {weight_len} entries, expected {expected} for {in_channels}->{out_channels} k={}",
                self.kernel
            )));
        }
        if let Some(b) = bias_len {
            if b != out_channels {
                return Err(Error::Config(format!(
                    "conv bias has {b} entries for {out_channels} output channels"
                )));
            }
        }
        Ok(())
    }

    /// Output positions `[lo, hi)` whose tap `k` lands inside the input.
    #[inline]
    fn tap_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let pl = self.pad_left;
        if len + pl <= k {
            return (0, 0);
        }
        let lo = if pl > k { (pl - k).div_ceil(self.stride) } else { 0 };
        let hi = ((len - 1 + pl - k) / self.stride + 1).min(out_len);
        (lo, hi.max(lo))
    }
}

#[inline]
fn axpy<R: Real>(y: &mut [R], a: R, x: &[R]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot64<R: Real>(a: &[R], b: &[R]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

/// Forward convolution. Input is `in_channels × len`; output is
/// `out_channels × spec.output_len(len)`.
pub fn conv1d_forward<R: Real>(
    x: &[R],
    in_channels: usize,
    len: usize,
    weight: &[R],
    bias: Option<&[R]>,
    out_channels: usize,
    spec: &ConvSpec,
) -> Result<Vec<R>> {
    spec.validate(in_channels, out_channels, weight.len(), bias.map(<[R]>::len))?;
    if x.len() != in_channels * len {
        return Err(Error::Shape(format!(
            "conv input has {} values, expected {in_channels}x{len}",
            x.len()
        )));
    }
    let out_len = spec.output_len(len)?;
    let k_size = spec.kernel;
    let mut out = vec![R::zero(); out_channels * out_len];
    for o in 0..out_channels {
        let row = &mut out[o * out_len..(o + 1) * out_len];
        if let Some(b) = bias {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
        let inputs: Box<dyn Iterator<Item = (usize, usize)>> = if spec.depthwise {
            Box::new(std::iter::once((o, 0)))
        } else {
            Box::new((0..in_channels).map(|i| (i, i)))
        };
        let per_out = if spec.depthwise { 1 } else { in_channels };
        for (i, wi) in inputs {
            let xr = &x[i * len..(i + 1) * len];
            let wbase = (o * per_out + wi) * k_size;
            for k in 0..k_size {
                let w = weight[wbase + k];
                if w == R::zero() {
                    continue;
                }
                let (lo, hi) = spec.tap_range(k, len, out_len);
                if lo >= hi {
                    continue;
                }
                if spec.stride == 1 {
                    let start = lo + k - spec.pad_left;
                    axpy(&mut row[lo..hi], w, &xr[start..start + (hi - lo)]);
                } else {
                    for t in lo..hi {
                        row[t] += w * xr[t * spec.stride + k - spec.pad_left];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates convolution gradients for upstream gradient `gy`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<R: Real>(
    x: &[R],
    in_channels: usize,
    len: usize,
    weight: &[R],
    out_channels: usize,
    spec: &ConvSpec,
    gy: &[R],
    mut gx: Option<&mut [R]>,
    gw: &mut [R],
    gb: Option<&mut [R]>,
) {
    let out_len = spec.output_len(len).expect("validated in forward");
    let k_size = spec.kernel;
    let per_out = if spec.depthwise { 1 } else { in_channels };
    if let Some(gb) = gb {
        for o in 0..out_channels {
            let s: f64 = gy[o * out_len..(o + 1) * out_len].iter().map(|v| v.f64()).sum();
            gb[o] += R::of(s);
        }
    }
    for o in 0..out_channels {
        let gyr = &gy[o * out_len..(o + 1) * out_len];
        let (i_lo, i_hi) = if spec.depthwise { (o, o + 1) } else { (0, in_channels) };
        for i in i_lo..i_hi {
            let wi = if spec.depthwise { 0 } else { i };
            let xr = &x[i * len..(i + 1) * len];
            let wbase = (o * per_out + wi) * k_size;
            for k in 0..k_size {
                let (lo, hi) = spec.tap_range(k, len, out_len);
                if lo >= hi {
                    continue;
                }
                if spec.stride == 1 {
                    let start = lo + k - spec.pad_left;
                    let n = hi - lo;
                    gw[wbase + k] += R::of(dot64(&gyr[lo..hi], &xr[start..start + n]));
                    if let Some(gx) = gx.as_deref_mut() {
                        let w = weight[wbase + k];
                        if w != R::zero() {
                            axpy(&mut gx[i * len + start..i * len + start + n], w, &gyr[lo..hi]);
                        }
                    }
                } else {
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let ti = t * spec.stride + k - spec.pad_left;
                        acc += gyr[t].f64() * xr[ti].f64();
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[i * len + ti] += weight[wbase + k] * gyr[t];
                        }
                    }
                    gw[wbase + k] += R::of(acc);
                }
            }
        }
    }
}

/// Per-column statistics cached by [`layer_norm_forward`].
#[derive(Debug, Clone)]
pub struct NormCache<R> {
    pub xhat: Vec<R>,
    pub rstd: Vec<f64>,
}

/// Normalizes each time point over the channel axis, then applies the
/// per-channel affine transform.
pub fn layer_norm_forward<R: Real>(
    x: &[R],
    channels: usize,
    len: usize,
    gamma: &[R],
    beta: &[R],
) -> Result<(Vec<R>, NormCache<R>)> {
    if gamma.len() != channels || beta.len() != channels {
        return Err(Error::Config(format!(
            "layer norm over {channels} channels given gamma/beta of {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if x.len() != channels * len {
        return Err(Error::Shape("layer norm input size".into()));
    }
    let mut mean = vec![0.0f64; len];
    for c in 0..channels {
        for (m, v) in mean.iter_mut().zip(&x[c * len..(c + 1) * len]) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= channels as f64);
    let mut var = vec![0.0f64; len];
    for c in 0..channels {
        for ((s, v), m) in var.iter_mut().zip(&x[c * len..(c + 1) * len]).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    let rstd: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / channels as f64 + LN_EPS).sqrt())
        .collect();
    let mut xhat = vec![R::zero(); channels * len];
    let mut y = vec![R::zero(); channels * len];
    for c in 0..channels {
        let (g, b) = (gamma[c], beta[c]);
        for t in 0..len {
            let idx = c * len + t;
            let h = R::of((x[idx].f64() - mean[t]) * rstd[t]);
            xhat[idx] = h;
            y[idx] = h * g + b;
        }
    }
    Ok((y, NormCache { xhat, rstd }))
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<R: Real>(
    cache: &NormCache<R>,
    channels: usize,
    len: usize,
    gamma: &[R],
    gy: &[R],
    gx: Option<&mut [R]>,
    ggamma: &mut [R],
    gbeta: &mut [R],
) {
    let mut sum_g = vec![0.0f64; len];
    let mut sum_gx = vec![0.0f64; len];
    for c in 0..channels {
        let mut gg = 0.0;
        let mut gbs = 0.0;
        for t in 0..len {
            let idx = c * len + t;
            let g = gy[idx].f64();
            let h = cache.xhat[idx].f64();
            gg += g * h;
            gbs += g;
            let gh = g * gamma[c].f64();
            sum_g[t] += gh;
            sum_gx[t] += gh * h;
        }
        ggamma[c] += R::of(gg);
        gbeta[c] += R::of(gbs);
    }
    if let Some(gx) = gx {
        let n = channels as f64;
        for c in 0..channels {
            for t in 0..len {
                let idx = c * len + t;
                let gh = gy[idx].f64() * gamma[c].f64();
                let h = cache.xhat[idx].f64();
                let v = cache.rstd[t] / n * (n * gh - sum_g[t] - h * sum_gx[t]);
                gx[idx] += R::of(v);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Max pooling with invalid positions treated as negative infinity.
///
/// Returns the pooled grid, the output mask (a position is valid iff its
/// window covers a valid input) and, per output entry, the flat input index
/// of the selected maximum (`usize::MAX` for invalid outputs).
#[allow(clippy::type_complexity)]
pub fn masked_maxpool_forward<R: Real>(
    x: &[R],
    channels: usize,
    len: usize,
    valid: &[bool],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Vec<R>, Vec<bool>, Vec<usize>)> {
    if valid.len() != len {
        return Err(Error::Config(format!(
            "mask length {} differs from sequence length {len}",
            valid.len()
        )));
    }
    let spec = ConvSpec {
        kernel,
        stride,
        pad_left: padding,
        pad_right: padding,
        depthwise: true,
    };
    let out_len = spec.output_len(len)?;
    let window = |j: usize| {
        let start = (j * stride) as isize - padding as isize;
        (start.max(0) as usize)..((start + kernel as isize).min(len as isize).max(0) as usize)
    };
    let out_valid: Vec<bool> = (0..out_len).map(|j| window(j).any(|t| valid[t])).collect();
    let mut out = vec![R::zero(); channels * out_len];
    let mut arg = vec![usize::MAX; channels * out_len];
    for c in 0..channels {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..out_len {
            if !out_valid[j] {
                continue;
            }
            let mut best: Option<(usize, R)> = None;
            for t in window(j) {
                if !valid[t] {
                    continue;
                }
                if best.is_none_or(|(_, b)| row[t] > b) {
                    best = Some((t, row[t]));
                }
            }
            let (t, v) = best.ok_or_else(|| {
                Error::Internal(format!("pool window {j} marked valid has no valid input"))
            })?;
            out[c * out_len + j] = v;
            arg[c * out_len + j] = c * len + t;
        }
    }
    Ok((out, out_valid, arg))
}

/// Softmax over the valid entries of one logit row; invalid entries get 0.
pub fn masked_softmax<R: Real>(logits: &[R], key_valid: &[bool]) -> Result<Vec<R>> {
    if logits.len() != key_valid.len() {
        return Err(Error::Shape("softmax logits and mask differ in length".into()));
    }
    let max = logits
        .iter()
        .zip(key_valid)
        .filter(|(_, &v)| v)
        .map(|(l, _)| l.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain("softmax row has no valid key".into()));
    }
    let exps: Vec<f64> = logits
        .iter()
        .zip(key_valid)
        .map(|(l, &v)| if v { (l.f64() - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| R::of(e / z)).collect())
}

/// Cached quantities of [`attention_forward`].
#[derive(Debug, Clone)]
pub struct AttentionCache<R> {
    /// Row-major `len × len` attention probabilities (zero rows for invalid queries).
    pub probs: Vec<R>,
}

/// Single-head scaled dot-product attention between channel-major
/// `dim × len` query, key and value grids. Rows of invalid queries are zero.
pub fn attention_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dim: usize,
    len: usize,
    query_valid: &[bool],
    key_valid: &[bool],
) -> Result<(Vec<R>, AttentionCache<R>)> {
    if q.len() != dim * len || k.len() != dim * len || v.len() != dim * len {
        return Err(Error::Internal("attention operands differ in shape".into()));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let qt = transpose(q, dim, len);
    let kt = transpose(k, dim, len);
    let mut probs = vec![R::zero(); len * len];
    let mut logits = vec![R::zero(); len];
    for i in 0..len {
        if !query_valid[i] {
            continue;
        }
        let qi = &qt[i * dim..(i + 1) * dim];
        for j in 0..len {
            logits[j] = if key_valid[j] {
                R::of(dot64(qi, &kt[j * dim..(j + 1) * dim]) * scale)
            } else {
                R::zero()
            };
        }
        let p = masked_softmax(&logits, key_valid)?;
        probs[i * len..(i + 1) * len].copy_from_slice(&p);
    }
    // out[d, i] = sum_j v[d, j] * p[i, j]
    let mut out = vec![R::zero(); dim * len];
    for d in 0..dim {
        let vr = &v[d * len..(d + 1) * len];
        for i in 0..len {
            if query_valid[i] {
                out[d * len + i] = R::of(dot64(vr, &probs[i * len..(i + 1) * len]));
            }
        }
    }
    Ok((out, AttentionCache { probs }))
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dim: usize,
    len: usize,
    cache: &AttentionCache<R>,
    gy: &[R],
    gq: Option<&mut [R]>,
    gk: Option<&mut [R]>,
    gv: Option<&mut [R]>,
) {
    let scale = 1.0 / (dim as f64).sqrt();
    let p = &cache.probs;
    // gp[i, j] = sum_d gy[d, i] v[d, j]
    let gyt = transpose(gy, dim, len);
    let vt = transpose(v, dim, len);
    let mut gs = vec![0.0f64; len * len];
    for i in 0..len {
        let prow = &p[i * len..(i + 1) * len];
        if prow.iter().all(|x| *x == R::zero()) {
            continue;
        }
        let gyi = &gyt[i * dim..(i + 1) * dim];
        let gp: Vec<f64> = (0..len).map(|j| dot64(gyi, &vt[j * dim..(j + 1) * dim])).collect();
        let inner: f64 = prow.iter().zip(&gp).map(|(a, b)| a.f64() * b).sum();
        for j in 0..len {
            gs[i * len + j] = prow[j].f64() * (gp[j] - inner) * scale;
        }
    }
    if let Some(gv) = gv {
        for d in 0..dim {
            let gyr = &gy[d * len..(d + 1) * len];
            for j in 0..len {
                let acc: f64 = (0..len).map(|i| p[i * len + j].f64() * gyr[i].f64()).sum();
                gv[d * len + j] += R::of(acc);
            }
        }
    }
    if let Some(gq) = gq {
        for d in 0..dim {
            let kr = &k[d * len..(d + 1) * len];
            for i in 0..len {
                let acc: f64 = (0..len).map(|j| gs[i * len + j] * kr[j].f64()).sum();
                gq[d * len + i] += R::of(acc);
            }
        }
    }
    if let Some(gk) = gk {
        for d in 0..dim {
            let qr = &q[d * len..(d + 1) * len];
            for j in 0..len {
                let acc: f64 = (0..len).map(|i| gs[i * len + j] * qr[i].f64()).sum();
                gk[d * len + j] += R::of(acc);
            }
        }
    }
}

fn transpose<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Elementwise linear recurrence `h_t = a_t h_{t-1} + b_t u_t`,
/// `y_t = c_t h_t`, run left to right from `h = 0` over each channel.
pub fn selective_scan<R: Real>(
    u: &SeqTensor<R>,
    a: &SeqTensor<R>,
    b: &SeqTensor<R>,
    c: &SeqTensor<R>,
) -> Result<SeqTensor<R>> {
    for (name, g) in [("a", a), ("b", b), ("c", c)] {
        if g.shape() != u.shape() {
            return Err(Error::Shape(format!(
                "scan grid {name} is {:?}, input is {:?}",
                g.shape(),
                u.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric("selective_scan", format!("non-finite entry in {name}")));
        }
    }
    let (channels, len) = u.shape();
    let mut y = SeqTensor::zeros(channels, len);
    for ch in 0..channels {
        let mut h = R::zero();
        for t in 0..len {
            h = a.get(ch, t) * h + b.get(ch, t) * u.get(ch, t);
            y.set(ch, t, c.get(ch, t) * h);
        }
    }
    Ok(y)
}

/// Shapes of the state-expanded scan used inside the selective-scan block.
#[derive(Debug, Clone, Copy)]
pub struct SsmDims {
    pub channels: usize,
    pub state: usize,
    pub len: usize,
}

/// Selective scan with an `N`-dimensional diagonal state per channel and
/// zero-order-hold discretization:
///
/// `a[d,n,t] = exp(delta[d,t] * A[d,n])`, `b[d,n,t] = delta[d,t] * B[n,t]`,
/// `h[d,n,t] = a h[d,n,t-1] + b u[d,t]`,
/// `y[d,t] = sum_n C[n,t] h[d,n,t] + skip[d] u[d,t]`.
///
/// Returns `y` and the hidden states laid out `(d, t, n)`.
#[allow(clippy::too_many_arguments)]
pub fn ssm_scan_forward<R: Real>(
    u: &[R],
    delta: &[R],
    b_in: &[R],
    c_out: &[R],
    a: &[R],
    skip: &[R],
    dims: SsmDims,
) -> Result<(Vec<R>, Vec<R>)> {
    let SsmDims { channels, state, len } = dims;
    let mut y = vec![R::zero(); channels * len];
    let mut hs = vec![R::zero(); channels * len * state];
    let mut h = vec![R::zero(); state];
    for d in 0..channels {
        h.iter_mut().for_each(|v| *v = R::zero());
        let arow = &a[d * state..(d + 1) * state];
        for t in 0..len {
            let dt = delta[d * len + t];
            let ut = u[d * len + t];
            let mut acc = R::zero();
            for n in 0..state {
                let decay = (dt * arow[n]).exp();
                h[n] = decay * h[n] + dt * b_in[n * len + t] * ut;
                acc += c_out[n * len + t] * h[n];
            }
            hs[(d * len + t) * state..(d * len + t + 1) * state].copy_from_slice(&h);
            y[d * len + t] = acc + skip[d] * ut;
        }
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "selective_scan",
            format!("non-finite output at channel {}, t {}", i / len, i % len),
        ));
    }
    Ok((y, hs))
}

/// Gradient buffers written by [`ssm_scan_backward`].
pub struct SsmGrads<'a, R> {
    pub u: Option<&'a mut [R]>,
    pub delta: Option<&'a mut [R]>,
    pub b_in: Option<&'a mut [R]>,
    pub c_out: Option<&'a mut [R]>,
    /// Gradient with respect to the decay matrix `A` itself.
    pub a: &'a mut [f64],
    pub skip: &'a mut [R],
}

#[allow(clippy::too_many_arguments)]
pub fn ssm_scan_backward<R: Real>(
    u: &[R],
    delta: &[R],
    b_in: &[R],
    c_out: &[R],
    a: &[R],
    skip: &[R],
    hs: &[R],
    dims: SsmDims,
    gy: &[R],
    grads: SsmGrads<'_, R>,
) {
    let SsmDims { channels, state, len } = dims;
    let SsmGrads {
        u: mut gu,
        delta: mut gdelta,
        b_in: mut gb,
        c_out: mut gc,
        a: ga,
        skip: gskip,
    } = grads;
    let mut carry = vec![0.0f64; state];
    for d in 0..channels {
        carry.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[d * state..(d + 1) * state];
        let mut gskip_acc = 0.0;
        for t in (0..len).rev() {
            let idx = d * len + t;
            let g_y = gy[idx].f64();
            let ut = u[idx].f64();
            let dt = delta[idx].f64();
            gskip_acc += g_y * ut;
            let mut g_u = g_y * skip[d].f64();
            let mut g_dt = 0.0;
            let h_now = &hs[idx * state..(idx + 1) * state];
            for n in 0..state {
                let an = arow[n].f64();
                let bn = b_in[n * len + t].f64();
                let cn = c_out[n * len + t].f64();
                let h = h_now[n].f64();
                let h_prev = if t > 0 { hs[(idx - 1) * state + n].f64() } else { 0.0 };
                if let Some(gc) = gc.as_deref_mut() {
                    gc[n * len + t] += R::of(g_y * h);
                }
                let g_h = g_y * cn + carry[n];
                let decay = (dt * an).exp();
                let g_decay = g_h * h_prev;
                g_u += g_h * dt * bn;
                g_dt += g_h * bn * ut + g_decay * decay * an;
                if let Some(gb) = gb.as_deref_mut() {
                    gb[n * len + t] += R::of(g_h * dt * ut);
                }
                ga[d * state + n] += g_decay * decay * dt;
                carry[n] = g_h * decay;
            }
            if let Some(gu) = gu.as_deref_mut() {
                gu[idx] += R::of(g_u);
            }
            if let Some(gd) = gdelta.as_deref_mut() {
                gd[idx] += R::of(g_dt);
            }
        }
        gskip[d] += R::of(gskip_acc);
    }
}

// SeqTensor-level entry points.

/// Convolution of a sequence tensor with `out_channels` filters.
pub fn conv1d<R: Real>(
    x: &SeqTensor<R>,
    weight: &[R],
    bias: Option<&[R]>,
    out_channels: usize,
    spec: &ConvSpec,
) -> Result<SeqTensor<R>> {
    let out = conv1d_forward(x.values(), x.channels(), x.length(), weight, bias, out_channels, spec)?;
    let len = spec.output_len(x.length())?;
    SeqTensor::from_vec(out_channels, len, out)
}

pub fn layer_norm<R: Real>(x: &SeqTensor<R>, gamma: &[R], beta: &[R]) -> Result<SeqTensor<R>> {
    let (y, _) = layer_norm_forward(x.values(), x.channels(), x.length(), gamma, beta)?;
    SeqTensor::from_vec(x.channels(), x.length(), y)
}

pub fn relu<R: Real>(x: &SeqTensor<R>) -> SeqTensor<R> {
    map(x, |v| v.max(R::zero()))
}

pub fn silu<R: Real>(x: &SeqTensor<R>) -> SeqTensor<R> {
    map(x, |v| R::of(v.f64() * sigmoid(v.f64())))
}

fn map<R: Real>(x: &SeqTensor<R>, f: impl Fn(R) -> R) -> SeqTensor<R> {
    SeqTensor::from_vec(x.channels(), x.length(), x.values().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

pub fn masked_maxpool1d<R: Real>(
    x: &SeqTensor<R>,
    mask: &ValidityMask,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(SeqTensor<R>, ValidityMask)> {
    let (out, valid, _) =
        masked_maxpool_forward(x.values(), x.channels(), x.length(), mask.as_slice(), kernel, stride, padding)?;
    let len = valid.len();
    Ok((SeqTensor::from_vec(x.channels(), len, out)?, ValidityMask::from_bools(valid)?))
}

/// Stochastic depth on a whole residual branch: in training the branch is
/// zeroed with probability `rate` and otherwise scaled by `1 / (1 - rate)`.
pub fn drop_path<R: Real, G: rand::Rng + ?Sized>(
    x: &SeqTensor<R>,
    rate: f64,
    training: bool,
    rng: &mut G,
) -> SeqTensor<R> {
    let factor = drop_path_factor(rate, training, rng);
    map(x, |v| v * R::of(factor))
}

/// Multiplier applied by drop-path for one draw.
pub fn drop_path_factor<G: rand::Rng + ?Sized>(rate: f64, training: bool, rng: &mut G) -> f64 {
    if !training || rate <= 0.0 {
        return 1.0;
    }
    if rng.gen::<f64>() < rate {
        0.0
    } else {
        1.0 / (1.0 - rate)
    }
}
