//! TES prediction towers and the PCS regression head.

use rand::Rng;

use crate::layers::{Conv, ConvNormAct};
use crate::tensor::{ConvSpec, ParamId, ParamStore, Real, SeqTensor, Tape, ValidityMask, Var};
use crate::Result;

/// Two `conv + LN + ReLU` stages followed by a projection conv.
///
/// Regression towers carry a frozen scalar gain applied before the
/// projection, so raw-unit targets with a large spread stay reachable
/// without large weights.
#[derive(Debug, Clone)]
pub struct Tower {
    pub stages: Vec<ConvNormAct>,
    pub out: Conv,
    pub gain: Option<ParamId>,
}

impl Tower {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        out_channels: usize,
        bias_init: f64,
        with_gain: bool,
        rng: &mut G,
    ) -> Result<Self> {
        let stages = (0..2)
            .map(|i| ConvNormAct::new(store, &format!("{name}.stage{i}"), dim, dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv::new(store, &format!("{name}.out"), dim, out_channels, ConvSpec::same(3), true, rng)?;
        store
            .values_mut(out.bias.expect("tower output has bias"))
            .iter_mut()
            .for_each(|b| *b = R::of(bias_init));
        let gain = if with_gain {
            Some(store.add_frozen(format!("{name}.gain"), &[1], vec![R::one()])?)
        } else {
            None
        };
        Ok(Self { stages, out, gain })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var, mask: &ValidityMask) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            h = s.forward(tape, h, mask)?;
        }
        if let Some(g) = self.gain {
            let g = tape.params().values(g)[0];
            if g != R::one() {
                h = tape.scale(h, g);
            }
        }
        let y = self.out.forward(tape, h)?;
        tape.mask(y, mask)
    }
}

/// Tape handles for one pyramid level of TES predictions.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub logits: Var,
    pub offsets: Var,
    pub scores: Var,
}

/// Classification, boundary-offset and element-score towers, shared by all levels.
#[derive(Debug, Clone)]
pub struct TesHead {
    pub cls: Tower,
    pub reg: Tower,
    pub score: Tower,
}

impl TesHead {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        dim: usize,
        num_classes: usize,
        cls_prior: f64,
        score_bias: f64,
        rng: &mut G,
    ) -> Result<Self> {
        let cls_bias = -((1.0 - cls_prior) / cls_prior).ln();
        Ok(Self {
            cls: Tower::new(store, "tes.cls", dim, num_classes, cls_bias, false, rng)?,
            reg: Tower::new(store, "tes.reg", dim, 2, 0.0, false, rng)?,
            score: Tower::new(store, "tes.score", dim, 1, score_bias, true, rng)?,
        })
    }

    pub fn forward_level<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var, mask: &ValidityMask) -> Result<LevelVars> {
        let logits = self.cls.forward(tape, x, mask)?;
        let raw = self.reg.forward(tape, x, mask)?;
        let offsets = tape.relu(raw);
        let scores = self.score.forward(tape, x, mask)?;
        Ok(LevelVars { logits, offsets, scores })
    }
}

/// Regresses the program-component score from the fused last-level feature.
#[derive(Debug, Clone)]
pub struct PcsHead {
    pub tower: Tower,
}

impl PcsHead {
    pub fn new<R: Real, G: Rng + ?Sized>(store: &mut ParamStore<R>, dim: usize, bias: f64, rng: &mut G) -> Result<Self> {
        Ok(Self {
            tower: Tower::new(store, "pcs", dim, 1, bias, true, rng)?,
        })
    }

    /// Returns a `1 x 1` node holding the masked temporal mean.
    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var, mask: &ValidityMask) -> Result<Var> {
        let y = self.tower.forward(tape, x, mask)?;
        tape.masked_mean(y, mask)
    }
}

/// Materialized predictions for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutputs {
    /// `C x T_l` classification logits.
    pub logits: SeqTensor,
    /// `2 x T_l` non-negative start/end offsets in level grid units.
    pub offsets: SeqTensor,
    /// `1 x T_l` element scores.
    pub scores: SeqTensor,
    pub mask: ValidityMask,
    /// Seconds per grid cell at this level.
    pub stride: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutputs>,
    pub pcs: f32,
}

impl HeadOutputs {
    pub fn num_points(&self) -> usize {
        self.levels.iter().map(|l| l.mask.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> SeqTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqTensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0))
    }

    fn tes(dim: usize) -> (ParamStore, TesHead) {
        let mut store = ParamStore::new();
        let head = TesHead::new(&mut store, dim, 22, 0.01, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, head)
    }

    fn run_level(store: &ParamStore, head: &TesHead, x: &SeqTensor, mask: &ValidityMask) -> [SeqTensor; 3] {
        let mut tape = Tape::new(store);
        let v = tape.input(x, false);
        let o = head.forward_level(&mut tape, v, mask).unwrap();
        [tape.value(o.logits), tape.value(o.offsets), tape.value(o.scores)]
    }

    #[test]
    fn tes_head_shapes_follow_level_lengths() {
        let (store, head) = tes(16);
        for t in [288, 144, 72, 36, 18, 9] {
            let [c, o, s] = run_level(&store, &head, &random(16, t, t as u64), &ValidityMask::all_valid(t));
            assert_eq!((c.shape(), o.shape(), s.shape()), ((22, t), (2, t), (1, t)));
            assert!(o.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn classification_prior_sets_initial_probability() {
        let (store, head) = tes(8);
        let b = store.values(head.cls.out.bias.unwrap());
        assert!(b.iter().all(|&v| (sigmoid(v as f64) - 0.01).abs() < 1e-6));
    }

    #[test]
    fn zero_features_and_biases_give_even_odds() {
        let (mut store, head) = tes(8);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".bias") || p.name.ends_with(".beta"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let [c, _, _] = run_level(&store, &head, &SeqTensor::zeros(8, 9), &ValidityMask::all_valid(9));
        assert!(c.values().iter().all(|&v| sigmoid(v as f64) == 0.5));
    }

    #[test]
    fn levels_share_parameters() {
        let (store, head) = tes(8);
        assert!(store.iter().all(|(_, p)| !p.name.contains("level")));
        let x = random(8, 9, 3);
        let mask = ValidityMask::all_valid(9);
        assert_eq!(run_level(&store, &head, &x, &mask), run_level(&store, &head, &x, &mask));
    }

    fn pcs(dim: usize, seed: u64) -> (ParamStore, PcsHead) {
        let mut store = ParamStore::new();
        let head = PcsHead::new(&mut store, dim, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, head)
    }

    fn run_pcs(store: &ParamStore, head: &PcsHead, x: &SeqTensor, mask: &ValidityMask) -> Result<f32> {
        let mut tape = Tape::new(store);
        let v = tape.input(x, false);
        let y = head.forward(&mut tape, v, mask)?;
        assert_eq!(tape.shape(y), (1, 1));
        Ok(tape.scalar(y))
    }

    #[test]
    fn pcs_constant_path_is_length_independent() {
        let (mut store, head) = pcs(8, 4);
        store.values_mut(head.tower.out.weight).iter_mut().for_each(|v| *v = 0.0);
        store.values_mut(head.tower.out.bias.unwrap())[0] = 63.5;
        let x = SeqTensor::from_fn(8, 9, |_, _| 2.0);
        for valid in [9, 4, 1] {
            let y = run_pcs(&store, &head, &x, &ValidityMask::prefix(9, valid).unwrap()).unwrap();
            assert_eq!(y, 63.5);
        }
    }

    #[test]
    fn pcs_mean_ignores_masked_half_of_constant_map() {
        let (mut store, head) = pcs(8, 5);
        // Keep only centre taps so border columns see the same receptive field.
        let convs: Vec<_> = head.tower.stages.iter().map(|s| s.conv.weight).chain([head.tower.out.weight]).collect();
        for id in convs {
            for (i, w) in store.values_mut(id).iter_mut().enumerate() {
                if i % 3 != 1 {
                    *w = 0.0;
                }
            }
        }
        let x = SeqTensor::from_fn(8, 10, |c, _| c as f32 * 0.3 - 1.0);
        let full = run_pcs(&store, &head, &x, &ValidityMask::all_valid(10)).unwrap();
        let mask = ValidityMask::prefix(10, 5).unwrap();
        let mut half = x.clone();
        half.zero_invalid(&mask);
        assert_eq!(run_pcs(&store, &head, &half, &mask).unwrap(), full);
    }

    #[test]
    fn pcs_head_on_full_width_feature_is_finite() {
        let (store, head) = pcs(512, 6);
        let y = run_pcs(&store, &head, &random(512, 9, 7), &ValidityMask::all_valid(9)).unwrap();
        assert!(y.is_finite());
        assert!(matches!(
            run_pcs(&store, &head, &random(512, 9, 7), &ValidityMask::all_valid(8)),
            Err(crate::Error::Domain(_) | crate::Error::Shape(_) | crate::Error::Config(_))
        ));
    }
}
