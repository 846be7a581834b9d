//! Two-stream pyramid network.
//!
//! The video stream encodes video features at full resolution and halves
//! the length `levels - 1` times; every level feeds the TES head. The
//! video-audio stream starts from the audio encoding and, before each of
//! its down-sampling stages, fuses in the video feature of the same level
//! through cross attention, with video as the query. The video stream is
//! computed first and never reads anything from the other stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::heads::{HeadOutputs, LevelOutputs, LevelVars, PcsHead, TesHead};
use crate::layers::{drop_path, Conv, ConvNormAct, LayerNorm};
use crate::mamba::{MambaConfig, MaskedMambaBlock, MambaMixer};
use crate::tensor::{ConvSpec, ParamStore, Real, SeqTensor, Tape, ValidityMask, Var};
use crate::{Error, Result};

/// Unit in which a point's largest boundary distance is compared with the
/// per-level regression range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeUnits {
    /// Input time steps (seconds at one feature per second).
    Seconds,
    /// Grid cells of the level being assigned.
    LevelGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mamba,
    /// Every selective-scan operator replaced by `conv(k3) + LN + ReLU`.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub audio_dim: usize,
    pub embed_dim: usize,
    pub t_max: usize,
    pub levels: usize,
    pub num_classes: usize,
    /// Half-open `[lo, hi)` per level; the last `hi` is infinite.
    pub regress_ranges: Vec<[f64; 2]>,
    pub range_units: RangeUnits,
    pub mamba: MambaConfig,
    pub drop_path_rate: f64,
    pub backbone: BackboneKind,
    /// Adds a fusion of the last video level into the VA stream before the PCS head.
    pub fuse_last_level: bool,
    pub cls_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_dim: 1024,
            audio_dim: 128,
            embed_dim: 512,
            t_max: 288,
            levels: 6,
            num_classes: 22,
            regress_ranges: default_ranges(6),
            range_units: RangeUnits::Seconds,
            mamba: MambaConfig::default(),
            drop_path_rate: 0.1,
            backbone: BackboneKind::Mamba,
            fuse_last_level: false,
            cls_prior: 0.01,
        }
    }
}

/// `[0,4), [4,8), [8,16), ...` with an open-ended last level.
pub fn default_ranges(levels: usize) -> Vec<[f64; 2]> {
    (0..levels)
        .map(|l| {
            let lo = if l == 0 { 0.0 } else { 4.0 * (1u64 << (l - 1)) as f64 };
            let hi = if l + 1 == levels { f64::INFINITY } else { 4.0 * (1u64 << l) as f64 };
            [lo, hi]
        })
        .collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.video_dim == 0 || self.audio_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return bad("feature dimensions and class count must be positive".into());
        }
        if self.levels < 2 || self.levels > 16 {
            return bad(format!("levels must be in [2, 16], got {}", self.levels));
        }
        let step = 1usize << (self.levels - 1);
        if self.t_max == 0 || self.t_max % step != 0 {
            return bad(format!("t_max {} must be a positive multiple of {step}", self.t_max));
        }
        if self.regress_ranges.len() != self.levels {
            return bad(format!(
                "{} regress ranges for {} levels",
                self.regress_ranges.len(),
                self.levels
            ));
        }
        if self.regress_ranges[0][0] != 0.0 || self.regress_ranges[self.levels - 1][1] != f64::INFINITY {
            return bad("regress ranges must start at 0 and end at infinity".into());
        }
        for (l, r) in self.regress_ranges.iter().enumerate() {
            if !(r[0] < r[1]) || r[0].is_nan() {
                return bad(format!("regress range {l} is empty"));
            }
            if l > 0 && self.regress_ranges[l - 1][1] != r[0] {
                return bad(format!("regress ranges {} and {l} are not contiguous", l - 1));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return bad(format!("cls_prior {} outside (0, 1)", self.cls_prior));
        }
        if self.mamba.state_dim == 0 || self.mamba.expand == 0 || self.mamba.conv_kernel == 0 {
            return bad("selective-scan sizes must be positive".into());
        }
        Ok(())
    }

    pub fn level_lengths(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.t_max >> l).collect()
    }

    /// Seconds per grid cell at level `l` (0-based).
    pub fn level_stride(&self, l: usize) -> f64 {
        (1u64 << l) as f64
    }
}

/// Selective-scan block or its convolutional stand-in.
#[derive(Debug, Clone)]
pub enum Refiner {
    Mamba(MaskedMambaBlock),
    Conv(ConvNormAct),
}

impl Refiner {
    fn forward<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, R>,
        x: Var,
        mask: &ValidityMask,
        training: bool,
        rng: &mut G,
    ) -> Result<Var> {
        match self {
            Refiner::Mamba(b) => b.forward(tape, x, mask, training, rng),
            Refiner::Conv(c) => c.forward(tape, x, mask),
        }
    }
}

/// Embedding convolutions followed by two full-resolution refinement blocks.
#[derive(Debug, Clone)]
pub struct Thfe {
    pub in_dim: usize,
    pub embed: Vec<ConvNormAct>,
    pub refine: Vec<Refiner>,
}

impl Thfe {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        in_dim: usize,
        cfg: &ModelConfig,
        rng: &mut G,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let embed = vec![
            ConvNormAct::new(store, &format!("{name}.embed0"), in_dim, d, rng)?,
            ConvNormAct::new(store, &format!("{name}.embed1"), d, d, rng)?,
        ];
        let refine = (0..2)
            .map(|i| {
                let n = format!("{name}.refine{i}");
                Ok(match cfg.backbone {
                    BackboneKind::Mamba => Refiner::Mamba(MaskedMambaBlock::new(
                        store,
                        &n,
                        d,
                        &cfg.mamba,
                        cfg.drop_path_rate,
                        rng,
                    )?),
                    BackboneKind::Conv => Refiner::Conv(ConvNormAct::new(store, &n, d, d, rng)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { in_dim, embed, refine })
    }

    pub fn forward<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, R>,
        x: Var,
        mask: &ValidityMask,
        training: bool,
        rng: &mut G,
    ) -> Result<Var> {
        let (rows, len) = tape.shape(x);
        if rows != self.in_dim {
            return Err(Error::Config(format!("expected {} input channels, got {rows}", self.in_dim)));
        }
        if mask.len() != len {
            return Err(Error::Config(format!("mask length {} differs from {len}", mask.len())));
        }
        let mut h = tape.mask(x, mask)?;
        for e in &self.embed {
            h = e.forward(tape, h, mask)?;
        }
        for r in &self.refine {
            h = r.forward(tape, h, mask, training, rng)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Mamba(MambaMixer),
    Conv(ConvNormAct),
}

/// `MaxPool(Mixer(LN(x)) + DropPath(x))` with a halving masked max-pool.
#[derive(Debug, Clone)]
pub struct MdsBlock {
    pub norm: LayerNorm,
    pub mixer: Mixer,
    pub drop_path_rate: f64,
}

impl MdsBlock {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut G,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let mixer = match cfg.backbone {
            BackboneKind::Mamba => Mixer::Mamba(MambaMixer::new(store, &format!("{name}.mixer"), d, &cfg.mamba, rng)?),
            BackboneKind::Conv => Mixer::Conv(ConvNormAct::new(store, &format!("{name}.mixer"), d, d, rng)?),
        };
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            mixer,
            drop_path_rate: cfg.drop_path_rate,
        })
    }

    pub fn forward<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, R>,
        x: Var,
        mask: &ValidityMask,
        training: bool,
        rng: &mut G,
    ) -> Result<(Var, ValidityMask)> {
        let len = tape.shape(x).1;
        if len % 2 != 0 {
            return Err(Error::Config(format!("down-sampling needs an even length, got {len}")));
        }
        if mask.len() != len {
            return Err(Error::Config(format!("mask length {} differs from {len}", mask.len())));
        }
        let x = tape.mask(x, mask)?;
        let h = self.norm.forward(tape, x)?;
        let h = match &self.mixer {
            Mixer::Mamba(m) => m.forward(tape, h, mask)?,
            Mixer::Conv(c) => c.forward(tape, h, mask)?,
        };
        let r = drop_path(tape, x, self.drop_path_rate, training, rng);
        let s = tape.add(h, r)?;
        tape.masked_maxpool(s, mask, 3, 2, 1)
    }
}

/// Cross attention with video queries and keys/values from the VA stream,
/// added back onto the video query.
#[derive(Debug, Clone)]
pub struct Mcaf {
    pub q: (Conv, LayerNorm),
    pub k: (Conv, LayerNorm),
    pub v: (Conv, LayerNorm),
    pub out: Conv,
}

impl Mcaf {
    pub fn new<R: Real, G: Rng + ?Sized>(store: &mut ParamStore<R>, name: &str, dim: usize, rng: &mut G) -> Result<Self> {
        let mut proj = |s: &str, store: &mut ParamStore<R>| -> Result<(Conv, LayerNorm)> {
            Ok((
                Conv::new(store, &format!("{name}.{s}.conv"), dim, dim, ConvSpec::same(3).depthwise(), true, rng)?,
                LayerNorm::new(store, &format!("{name}.{s}.norm"), dim)?,
            ))
        };
        let q = proj("q", store)?;
        let k = proj("k", store)?;
        let v = proj("v", store)?;
        let out = Conv::new(store, &format!("{name}.out"), dim, dim, ConvSpec::pointwise(), true, rng)?;
        Ok(Self { q, k, v, out })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, video: Var, va: Var, mask: &ValidityMask) -> Result<Var> {
        if tape.shape(video) != tape.shape(va) {
            return Err(Error::Internal(format!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                tape.shape(video),
                tape.shape(va)
            )));
        }
        let mut project = |p: &(Conv, LayerNorm), x: Var| -> Result<Var> {
            let y = p.0.forward(tape, x)?;
            let y = p.1.forward(tape, y)?;
            tape.mask(y, mask)
        };
        let q = project(&self.q, video)?;
        let k = project(&self.k, va)?;
        let v = project(&self.v, va)?;
        let att = tape.attention(q, k, v, mask, mask)?;
        let o = self.out.forward(tape, att)?;
        let fused = tape.add(o, video)?;
        tape.mask(fused, mask)
    }
}

/// Per-level video features and the final VA-stream feature.
#[derive(Debug, Clone)]
pub struct StreamVars {
    pub video_levels: Vec<(Var, ValidityMask)>,
    pub fused: (Var, ValidityMask),
}

#[derive(Debug, Clone)]
pub struct NetVars {
    pub streams: StreamVars,
    pub tes: Vec<LevelVars>,
    pub pcs: Var,
}

#[derive(Debug, Clone)]
pub struct TwoStreamNet {
    pub config: ModelConfig,
    pub video_thfe: Thfe,
    pub audio_thfe: Thfe,
    pub video_mds: Vec<MdsBlock>,
    pub va_mds: Vec<MdsBlock>,
    pub fusions: Vec<Mcaf>,
    pub tes_head: TesHead,
    pub pcs_head: PcsHead,
}

impl TwoStreamNet {
    /// Registers all parameters in `store` in a fixed order.
    pub fn new<R: Real, G: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore<R>, rng: &mut G) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let video_thfe = Thfe::new(store, "video.thfe", config.video_dim, config, rng)?;
        let video_mds = (1..config.levels)
            .map(|k| MdsBlock::new(store, &format!("video.mds{k}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let audio_thfe = Thfe::new(store, "audio.thfe", config.audio_dim, config, rng)?;
        let n_fusions = config.levels - 1 + usize::from(config.fuse_last_level);
        let fusions = (1..=n_fusions)
            .map(|k| Mcaf::new(store, &format!("fusion{k}"), d, rng))
            .collect::<Result<Vec<_>>>()?;
        let va_mds = (1..config.levels)
            .map(|k| MdsBlock::new(store, &format!("va.mds{k}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let tes_head = TesHead::new(store, d, config.num_classes, config.cls_prior, 0.0, rng)?;
        let pcs_head = PcsHead::new(store, d, 0.0, rng)?;
        Ok(Self {
            config: config.clone(),
            video_thfe,
            audio_thfe,
            video_mds,
            va_mds,
            fusions,
            tes_head,
            pcs_head,
        })
    }

    /// Sets the constant terms of the element-score and PCS projections.
    pub fn set_output_biases<R: Real>(&self, store: &mut ParamStore<R>, score: f64, pcs: f64) {
        for (id, v) in [
            (self.tes_head.score.out.bias, score),
            (self.pcs_head.tower.out.bias, pcs),
        ] {
            if let Some(id) = id {
                store.values_mut(id).iter_mut().for_each(|b| *b = R::of(v));
            }
        }
    }

    /// Sets the frozen gains of the element-score and PCS towers.
    pub fn set_output_gains<R: Real>(&self, store: &mut ParamStore<R>, score: f64, pcs: f64) {
        for (id, v) in [(self.tes_head.score.gain, score), (self.pcs_head.tower.gain, pcs)] {
            if let Some(id) = id {
                store.values_mut(id)[0] = R::of(v);
            }
        }
    }

    fn check_inputs<R: Real>(&self, video: &SeqTensor<R>, audio: &SeqTensor<R>, mask: &ValidityMask) -> Result<()> {
        let c = &self.config;
        if video.shape() != (c.video_dim, c.t_max) || audio.shape() != (c.audio_dim, c.t_max) {
            return Err(Error::Config(format!(
                "inputs must be {}x{} video and {}x{} audio, got {:?} and {:?}",
                c.video_dim,
                c.t_max,
                c.audio_dim,
                c.t_max,
                video.shape(),
                audio.shape()
            )));
        }
        if mask.len() != c.t_max {
            return Err(Error::Config(format!("mask length {} differs from t_max {}", mask.len(), c.t_max)));
        }
        Ok(())
    }

    pub fn forward_streams<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, R>,
        video: &SeqTensor<R>,
        audio: &SeqTensor<R>,
        mask: &ValidityMask,
        training: bool,
        rng: &mut G,
    ) -> Result<StreamVars> {
        self.check_inputs(video, audio, mask)?;
        let v_in = tape.input(video, false);
        let mut v = self.video_thfe.forward(tape, v_in, mask, training, rng)?;
        let mut m = mask.clone();
        let mut video_levels = vec![(v, m.clone())];
        for block in &self.video_mds {
            (v, m) = block.forward(tape, v, &m, training, rng)?;
            video_levels.push((v, m.clone()));
        }

        let a_in = tape.input(audio, false);
        let mut va = self.audio_thfe.forward(tape, a_in, mask, training, rng)?;
        let mut va_mask = mask.clone();
        for (k, block) in self.va_mds.iter().enumerate() {
            let (vk, mk) = &video_levels[k];
            let fused = self.fusions[k].forward(tape, *vk, va, mk)?;
            (va, va_mask) = block.forward(tape, fused, &va_mask, training, rng)?;
        }
        if self.config.fuse_last_level {
            let (vl, ml) = video_levels.last().expect("at least one level");
            va = self.fusions[self.va_mds.len()].forward(tape, *vl, va, ml)?;
        }
        Ok(StreamVars {
            video_levels,
            fused: (va, va_mask),
        })
    }

    pub fn forward<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, R>,
        video: &SeqTensor<R>,
        audio: &SeqTensor<R>,
        mask: &ValidityMask,
        training: bool,
        rng: &mut G,
    ) -> Result<NetVars> {
        let streams = self.forward_streams(tape, video, audio, mask, training, rng)?;
        let tes = streams
            .video_levels
            .iter()
            .map(|(x, m)| self.tes_head.forward_level(tape, *x, m))
            .collect::<Result<Vec<_>>>()?;
        let pcs = self.pcs_head.forward(tape, streams.fused.0, &streams.fused.1)?;
        Ok(NetVars { streams, tes, pcs })
    }

    /// Reads head values off a tape produced by [`TwoStreamNet::forward`].
    pub fn collect_outputs<R: Real>(&self, tape: &Tape<'_, R>, vars: &NetVars) -> HeadOutputs {
        let cast = |v: Var| tape.value(v).cast::<f32>();
        let levels = vars
            .tes
            .iter()
            .zip(&vars.streams.video_levels)
            .enumerate()
            .map(|(l, (lv, (_, mask)))| LevelOutputs {
                logits: cast(lv.logits),
                offsets: cast(lv.offsets),
                scores: cast(lv.scores),
                mask: mask.clone(),
                stride: self.config.level_stride(l),
            })
            .collect();
        HeadOutputs {
            levels,
            pcs: tape.scalar(vars.pcs).f64() as f32,
        }
    }

    /// Evaluation-mode forward pass.
    pub fn predict(
        &self,
        store: &ParamStore,
        video: &SeqTensor,
        audio: &SeqTensor,
        mask: &ValidityMask,
    ) -> Result<HeadOutputs> {
        let mut tape = Tape::new(store);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let vars = self.forward(&mut tape, video, audio, mask, false, &mut rng)?;
        Ok(self.collect_outputs(&tape, &vars))
    }
}
