//! Masked selective-scan sequence blocks.
//!
//! A [`MambaMixer`] projects the input to an expanded width, runs a short
//! depthwise convolution and an input-dependent diagonal state-space scan,
//! gates the result and projects back. With `bidirectional` set the scan is
//! run once left-to-right and once right-to-left (each direction with its
//! own convolution, projections and decay), and the two outputs are summed.
//! Padded positions are zeroed before every stage that could carry them
//! across time, so outputs at valid positions never depend on padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{drop_path, Conv, LayerNorm};
use crate::tensor::{ConvSpec, ParamId, ParamStore, Real, Tape, ValidityMask, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MambaConfig {
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub bidirectional: bool,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            expand: 2,
            conv_kernel: 4,
            bidirectional: true,
        }
    }
}

/// Parameters of one scan direction.
#[derive(Debug, Clone)]
pub struct ScanBranch {
    pub conv: Conv,
    pub dt_proj: Conv,
    pub b_proj: Conv,
    pub c_proj: Conv,
    /// `A = -exp(a_log)`, one row of `state_dim` decays per channel.
    pub a_log: ParamId,
    pub skip: ParamId,
    pub reverse: bool,
}

impl ScanBranch {
    fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        inner: usize,
        cfg: &MambaConfig,
        reverse: bool,
        rng: &mut G,
    ) -> Result<Self> {
        let conv = Conv::new(
            store,
            &format!("{name}.conv"),
            inner,
            inner,
            ConvSpec::causal(cfg.conv_kernel).depthwise(),
            true,
            rng,
        )?;
        let dt_proj = Conv::new(store, &format!("{name}.dt_proj"), inner, inner, ConvSpec::pointwise(), true, rng)?;
        // Step sizes start log-uniform in [1e-3, 1e-1].
        let dt_bias: Vec<R> = (0..inner)
            .map(|_| {
                let dt: f64 = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                R::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        store
            .values_mut(dt_proj.bias.expect("dt_proj has bias"))
            .copy_from_slice(&dt_bias);
        let n = cfg.state_dim;
        let b_proj = Conv::new(store, &format!("{name}.b_proj"), inner, n, ConvSpec::pointwise(), false, rng)?;
        let c_proj = Conv::new(store, &format!("{name}.c_proj"), inner, n, ConvSpec::pointwise(), false, rng)?;
        let a_log = store.add(
            format!("{name}.a_log"),
            &[inner, n],
            (0..inner * n).map(|i| R::of(((i % n) as f64 + 1.0).ln())).collect(),
        )?;
        let skip = store.add(format!("{name}.skip"), &[inner], vec![R::one(); inner])?;
        Ok(Self {
            conv,
            dt_proj,
            b_proj,
            c_proj,
            a_log,
            skip,
            reverse,
        })
    }

    fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, xs: Var, keep: &[bool]) -> Result<Var> {
        let (x, keep): (Var, Vec<bool>) = if self.reverse {
            (tape.reverse_time(xs), keep.iter().rev().copied().collect())
        } else {
            (xs, keep.to_vec())
        };
        let c = self.conv.forward(tape, x)?;
        let u = tape.silu(c);
        let u = tape.mask_cols(u, keep)?;
        let dt = self.dt_proj.forward(tape, u)?;
        let delta = tape.softplus(dt);
        let b = self.b_proj.forward(tape, u)?;
        let c = self.c_proj.forward(tape, u)?;
        let y = tape.ssm_scan(u, delta, b, c, self.a_log, self.skip)?;
        Ok(if self.reverse { tape.reverse_time(y) } else { y })
    }
}

/// The selective-scan token mixer without normalization or residual.
#[derive(Debug, Clone)]
pub struct MambaMixer {
    pub dim: usize,
    pub inner: usize,
    pub in_proj: Conv,
    pub branches: Vec<ScanBranch>,
    pub out_proj: Conv,
}

impl MambaMixer {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        cfg: &MambaConfig,
        rng: &mut G,
    ) -> Result<Self> {
        if cfg.state_dim == 0 || cfg.expand == 0 || cfg.conv_kernel == 0 {
            return Err(Error::Config("selective-scan sizes must be positive".into()));
        }
        let inner = dim * cfg.expand;
        let in_proj = Conv::new(store, &format!("{name}.in_proj"), dim, 2 * inner, ConvSpec::pointwise(), true, rng)?;
        let mut branches = vec![ScanBranch::new(store, &format!("{name}.fwd"), inner, cfg, false, rng)?];
        if cfg.bidirectional {
            branches.push(ScanBranch::new(store, &format!("{name}.bwd"), inner, cfg, true, rng)?);
        }
        let out_proj = Conv::new(store, &format!("{name}.out_proj"), inner, dim, ConvSpec::pointwise(), true, rng)?;
        Ok(Self {
            dim,
            inner,
            in_proj,
            branches,
            out_proj,
        })
    }

    /// The same mixer with the roles of the scan directions exchanged.
    pub fn swapped_directions(&self) -> Self {
        let mut m = self.clone();
        for b in &mut m.branches {
            b.reverse = !b.reverse;
        }
        m
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var, mask: &ValidityMask) -> Result<Var> {
        let (rows, len) = tape.shape(x);
        if mask.len() != len {
            return Err(Error::Config(format!(
                "mask length {} differs from sequence length {len}",
                mask.len()
            )));
        }
        if rows != self.dim {
            return Err(Error::Config(format!("mixer expects {} channels, got {rows}", self.dim)));
        }
        let x = tape.mask(x, mask)?;
        let xz = self.in_proj.forward(tape, x)?;
        let xs = tape.slice_rows(xz, 0, self.inner)?;
        let xs = tape.mask(xs, mask)?;
        let z = tape.slice_rows(xz, self.inner, self.inner)?;
        let mut y: Option<Var> = None;
        for branch in &self.branches {
            let yb = branch.forward(tape, xs, mask.as_slice())?;
            y = Some(match y {
                Some(acc) => tape.add(acc, yb)?,
                None => yb,
            });
        }
        let y = y.expect("at least one branch");
        let gate = tape.silu(z);
        let y = tape.mul(y, gate)?;
        let y = self.out_proj.forward(tape, y)?;
        tape.mask(y, mask)
    }
}

/// Pre-norm residual selective-scan block:
/// `x + DropPath(Mixer(LN(x)))`, zeroed at invalid positions.
#[derive(Debug, Clone)]
pub struct MaskedMambaBlock {
    pub norm: LayerNorm,
    pub mixer: MambaMixer,
    pub drop_path_rate: f64,
}

impl MaskedMambaBlock {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        cfg: &MambaConfig,
        drop_path_rate: f64,
        rng: &mut G,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            mixer: MambaMixer::new(store, &format!("{name}.mixer"), dim, cfg, rng)?,
            drop_path_rate,
        })
    }

    pub fn swapped_directions(&self) -> Self {
        Self {
            norm: self.norm.clone(),
            mixer: self.mixer.swapped_directions(),
            drop_path_rate: self.drop_path_rate,
        }
    }

    pub fn forward<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, R>,
        x: Var,
        mask: &ValidityMask,
        training: bool,
        rng: &mut G,
    ) -> Result<Var> {
        if mask.len() != tape.shape(x).1 {
            return Err(Error::Config(format!(
                "mask length {} differs from sequence length {}",
                mask.len(),
                tape.shape(x).1
            )));
        }
        let x = tape.mask(x, mask)?;
        let h = self.norm.forward(tape, x)?;
        let h = self.mixer.forward(tape, h, mask)?;
        let h = drop_path(tape, h, self.drop_path_rate, training, rng);
        let y = tape.add(x, h)?;
        tape.mask(y, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::{ssm_scan_forward, SsmDims};
    use crate::tensor::{grad_check, GradCheckOptions, SeqTensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block<R: Real>(dim: usize, cfg: &MambaConfig, seed: u64) -> (ParamStore<R>, MaskedMambaBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = MaskedMambaBlock::new(&mut store, "blk", dim, cfg, 0.1, &mut rng).unwrap();
        (store, b)
    }

    fn random_input(dim: usize, len: usize, seed: u64) -> SeqTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqTensor::from_fn(dim, len, |_, _| rng.gen_range(-1.0f32..1.0))
    }

    fn run(store: &ParamStore, b: &MaskedMambaBlock, x: &SeqTensor, mask: &ValidityMask) -> SeqTensor {
        let mut tape = Tape::new(store);
        let v = tape.input(x, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = b.forward(&mut tape, v, mask, false, &mut rng).unwrap();
        tape.value(y)
    }

    fn reversed(x: &SeqTensor) -> SeqTensor {
        let t = x.length();
        SeqTensor::from_fn(x.channels(), t, |c, i| x.get(c, t - 1 - i))
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, b) = block(8, &MambaConfig::default(), 1);
        let y = run(&store, &b, &random_input(8, 12, 2), &ValidityMask::all_valid(12));
        assert_eq!(y.shape(), (8, 12));
        assert!(y.is_finite());
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let (mut store, b) = block(8, &MambaConfig::default(), 3);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".bias") || p.name.ends_with(".beta"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let y = run(&store, &b, &SeqTensor::zeros(8, 10), &ValidityMask::all_valid(10));
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_tail_content_does_not_leak() {
        let (store, b) = block(8, &MambaConfig::default(), 4);
        let mask = ValidityMask::prefix(20, 13).unwrap();
        let mut clean = random_input(8, 20, 5);
        clean.zero_invalid(&mask);
        let mut dirty = clean.clone();
        for c in 0..8 {
            for t in 13..20 {
                dirty.set(c, t, 1e3 * (c as f32 - t as f32));
            }
        }
        let a = run(&store, &b, &clean, &mask);
        let d = run(&store, &b, &dirty, &mask);
        assert_eq!(a.values(), d.values());
        for c in 0..8 {
            assert!(a.row(c)[13..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mask_length_mismatch_is_config_error() {
        let (store, b) = block(4, &MambaConfig::default(), 6);
        let mut tape = Tape::new(&store);
        let v = tape.input(&random_input(4, 8, 7), false);
        let err = b
            .forward(&mut tape, v, &ValidityMask::all_valid(9), false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reversal_equals_swapped_scan_directions() {
        let (store, b) = block(6, &MambaConfig::default(), 8);
        let x = random_input(6, 15, 9);
        let mask = ValidityMask::all_valid(15);
        let lhs = reversed(&run(&store, &b, &reversed(&x), &mask));
        let rhs = run(&store, &b.swapped_directions(), &x, &mask);
        assert!(lhs.max_abs_diff(&rhs) < 1e-6, "{}", lhs.max_abs_diff(&rhs));
        // The forward-only block is not reversal-symmetric.
        let cfg = MambaConfig {
            bidirectional: false,
            ..MambaConfig::default()
        };
        let (store, b) = block(6, &cfg, 8);
        assert_eq!(b.mixer.branches.len(), 1);
        let lhs = reversed(&run(&store, &b, &reversed(&x), &mask));
        let rhs = run(&store, &b, &x, &mask);
        assert!(lhs.max_abs_diff(&rhs) > 1e-4);
    }

    #[test]
    fn forward_only_block_is_causal() {
        let cfg = MambaConfig {
            bidirectional: false,
            ..MambaConfig::default()
        };
        let (store, b) = block(6, &cfg, 10);
        let x = random_input(6, 16, 11);
        let mut y = x.clone();
        for c in 0..6 {
            y.set(c, 12, 5.0);
        }
        let mask = ValidityMask::all_valid(16);
        let (a, d) = (run(&store, &b, &x, &mask), run(&store, &b, &y, &mask));
        for c in 0..6 {
            assert_eq!(a.row(c)[..12], d.row(c)[..12]);
        }
        assert!(a.max_abs_diff(&d) > 0.0);
    }

    #[test]
    fn hidden_state_obeys_geometric_bound_on_long_sequences() {
        let (channels, state, len) = (4, 16, 288);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u: Vec<f32> = (0..channels * len).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let delta: Vec<f32> = (0..channels * len).map(|_| rng.gen_range(0.001..2.0)).collect();
        let b_in: Vec<f32> = (0..state * len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c_out = vec![1.0f32; state * len];
        let a: Vec<f32> = (0..channels * state).map(|i| -((i % state) as f32 + 1.0)).collect();
        let skip = vec![1.0f32; channels];
        let dims = SsmDims { channels, state, len };
        let (y, hs) = ssm_scan_forward(&u, &delta, &b_in, &c_out, &a, &skip, dims).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        for d in 0..channels {
            for n in 0..state {
                let an = a[d * state + n] as f64;
                let (mut max_in, mut max_a) = (0.0f64, 0.0f64);
                for t in 0..len {
                    let dt = delta[d * len + t] as f64;
                    max_in = max_in.max((dt * b_in[n * len + t] as f64 * u[d * len + t] as f64).abs());
                    max_a = max_a.max((dt * an).exp());
                }
                let bound = max_in / (1.0 - max_a) * (1.0 + 1e-4);
                for t in 0..len {
                    assert!((hs[(d * len + t) * state + n] as f64).abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = MambaConfig {
            state_dim: 4,
            ..MambaConfig::default()
        };
        let (store, b) = block::<f64>(4, &cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mask = ValidityMask::prefix(9, 7).unwrap();
        let mut x = SeqTensor::<f64>::from_fn(4, 9, |_, _| rng.gen_range(-1.0..1.0));
        x.zero_invalid(&mask);
        let w = SeqTensor::<f64>::from_fn(4, 9, |_, _| rng.gen_range(-1.0..1.0));
        let report = grad_check(
            &store,
            |tape| {
                let xv = tape.input(&x, false);
                let wv = tape.input(&w, false);
                let y = b.forward(tape, xv, &mask, false, &mut ChaCha8Rng::seed_from_u64(0))?;
                let p = tape.mul(y, wv)?;
                Ok(tape.sum(p))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
