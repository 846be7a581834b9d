//! Parameterized building blocks shared by the network modules.

use rand::Rng;

use crate::tensor::{ConvSpec, ParamId, ParamStore, Real, Tape, ValidityMask, Var};
use crate::{Error, Result};

/// Uniform initialization in `±1/sqrt(fan_in)`.
pub(crate) fn uniform_init<R: Real, G: Rng + ?Sized>(rng: &mut G, n: usize, fan_in: usize) -> Vec<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| R::of(rng.gen_range(-bound..bound))).collect()
}

/// A convolution with its parameters.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        with_bias: bool,
        rng: &mut G,
    ) -> Result<Self> {
        let per_out = if spec.depthwise { 1 } else { in_channels };
        let n = spec.weight_len(in_channels, out_channels);
        let weight = store.add(
            format!("{name}.weight"),
            &[out_channels, per_out, spec.kernel],
            uniform_init(rng, n, per_out * spec.kernel),
        )?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), &[out_channels], vec![R::zero(); out_channels])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            spec,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var) -> Result<Var> {
        let rows = tape.shape(x).0;
        if rows != self.in_channels {
            return Err(Error::Config(format!(
                "convolution expects {} input channels, got {rows}",
                self.in_channels
            )));
        }
        tape.conv1d(x, self.weight, self.bias, self.out_channels, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], vec![R::one(); channels])?,
            beta: store.add(format!("{name}.beta"), &[channels], vec![R::zero(); channels])?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

/// `ReLU(LayerNorm(Conv1D(x)))` with the mask re-applied to the output.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl ConvNormAct {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut G,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), in_channels, out_channels, ConvSpec::same(3), true, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_channels)?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var, mask: &ValidityMask) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        let y = tape.relu(y);
        tape.mask(y, mask)
    }
}

/// Drop-path on a recorded branch.
pub fn drop_path<R: Real, G: Rng + ?Sized>(
    tape: &mut Tape<'_, R>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut G,
) -> Var {
    let factor = crate::tensor::kernels::drop_path_factor(rate, training, rng);
    if factor == 1.0 {
        x
    } else {
        tape.scale(x, R::of(factor))
    }
}
