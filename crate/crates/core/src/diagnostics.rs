//! Gradient checks over every layer type and a shrunk full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{default_ranges, BackboneKind, Mcaf, MdsBlock, ModelConfig, Thfe, TwoStreamNet};
use crate::heads::{PcsHead, TesHead};
use crate::layers::{Conv, ConvNormAct, LayerNorm};
use crate::losses::{record_sample_loss, LossWeights};
use crate::mamba::{MambaConfig, MambaMixer, MaskedMambaBlock};
use crate::targets::{generate_point_targets, GtSegment};
use crate::tensor::{grad_check, ConvSpec, GradCheckOptions, GradCheckReport, ParamStore, SeqTensor, Tape, ValidityMask, Var};
use crate::Result;

/// Size of the model used by [`model_grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckScale {
    /// `D = 8, T = 8, L = 2, C = 3`.
    Tiny,
    /// `D = 16, T = 16, L = 3, C = 4`.
    Small,
}

impl std::str::FromStr for CheckScale {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(CheckScale::Tiny),
            "small" => Ok(CheckScale::Small),
            other => Err(crate::Error::Usage(format!("unknown scale {other:?}; expected tiny or small"))),
        }
    }
}

impl CheckScale {
    pub fn model(self, backbone: BackboneKind) -> ModelConfig {
        let (d, t, l, c, n) = match self {
            CheckScale::Tiny => (8, 8, 2, 3, 2),
            CheckScale::Small => (16, 16, 3, 4, 4),
        };
        ModelConfig {
            video_dim: 6,
            audio_dim: 5,
            embed_dim: d,
            t_max: t,
            levels: l,
            num_classes: c,
            regress_ranges: default_ranges(l),
            mamba: MambaConfig {
                state_dim: n,
                ..MambaConfig::default()
            },
            backbone,
            ..ModelConfig::default()
        }
    }
}

/// Options shared by all checks. Networks built from ReLU, max-pool and
/// clamped losses have kinks; a short step keeps central differences from
/// straddling one.
pub fn check_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        samples_per_param: 3,
        step: 3e-6,
        seed,
        ..GradCheckOptions::default()
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SeqTensor<f64> {
    SeqTensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `Σ w ⊙ v` for a fixed random `w`.
fn probe(tape: &mut Tape<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(v);
    let w = random(r, c, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.input(&w, false);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn sum_all(tape: &mut Tape<'_, f64>, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(total)
}

/// One gradient check per layer type, each on random inputs with a padded tail.
pub fn layer_grad_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let (d, t, valid) = (6, 12, 10);
    let mask = ValidityMask::prefix(t, valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random(d, t, &mut rng);
    x.zero_invalid(&mask);
    let mut y = random(d, t, &mut rng);
    y.zero_invalid(&mask);
    let mamba = MambaConfig {
        state_dim: 4,
        ..MambaConfig::default()
    };
    let model = ModelConfig {
        video_dim: d,
        audio_dim: d,
        embed_dim: d,
        t_max: t,
        levels: 2,
        num_classes: 3,
        regress_ranges: default_ranges(2),
        mamba: mamba.clone(),
        ..ModelConfig::default()
    };
    let opts = check_options(seed);
    let mut reports = Vec::new();
    let mut run = |name: &str, store: &ParamStore<f64>, f: &dyn Fn(&mut Tape<'_, f64>) -> Result<Var>| -> Result<()> {
        reports.push((name.to_string(), grad_check(store, f, &opts)?));
        Ok(())
    };
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let eval_rng = || rand::rngs::mock::StepRng::new(0, 0);

    let mut s = ParamStore::new();
    let conv = Conv::new(&mut s, "conv", d, 4, ConvSpec::same(3), true, &mut init)?;
    run("conv", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = conv.forward(tape, v)?;
        probe(tape, o, 1)
    })?;

    let mut s = ParamStore::new();
    let dw = Conv::new(&mut s, "dwconv", d, d, ConvSpec::causal(4).depthwise(), true, &mut init)?;
    run("depthwise causal conv", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = dw.forward(tape, v)?;
        probe(tape, o, 2)
    })?;

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", d)?;
    let gamma = s.id("ln.gamma").expect("registered");
    s.values_mut(gamma).iter_mut().zip(random(d, 1, &mut init).values()).for_each(|(g, r)| *g = 1.0 + 0.5 * r);
    run("layer norm", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = ln.forward(tape, v)?;
        probe(tape, o, 3)
    })?;

    let mut s = ParamStore::new();
    let cna = ConvNormAct::new(&mut s, "cna", d, d, &mut init)?;
    run("conv + norm + relu", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = cna.forward(tape, v, &mask)?;
        probe(tape, o, 4)
    })?;

    let mut s = ParamStore::new();
    let mixer = MambaMixer::new(&mut s, "mixer", d, &mamba, &mut init)?;
    run("selective-scan mixer", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = mixer.forward(tape, v, &mask)?;
        probe(tape, o, 5)
    })?;

    let mut s = ParamStore::new();
    let block = MaskedMambaBlock::new(&mut s, "block", d, &mamba, 0.0, &mut init)?;
    run("masked selective-scan block", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = block.forward(tape, v, &mask, false, &mut eval_rng())?;
        probe(tape, o, 6)
    })?;

    let mut s = ParamStore::new();
    let thfe = Thfe::new(&mut s, "thfe", d, &model, &mut init)?;
    run("temporal encoder", &s, &|tape| {
        let v = tape.input(&x, false);
        let o = thfe.forward(tape, v, &mask, false, &mut eval_rng())?;
        probe(tape, o, 7)
    })?;

    let mut s = ParamStore::new();
    let mds = MdsBlock::new(&mut s, "mds", &model, &mut init)?;
    run("down-sampling block", &s, &|tape| {
        let v = tape.input(&x, false);
        let (o, _) = mds.forward(tape, v, &mask, false, &mut eval_rng())?;
        probe(tape, o, 8)
    })?;

    let mut s = ParamStore::new();
    let mcaf = Mcaf::new(&mut s, "mcaf", d, &mut init)?;
    run("cross-attention fusion", &s, &|tape| {
        let v = tape.input(&x, false);
        let a = tape.input(&y, false);
        let o = mcaf.forward(tape, v, a, &mask)?;
        probe(tape, o, 9)
    })?;

    let mut s = ParamStore::new();
    let tes = TesHead::new(&mut s, d, 3, 0.01, 1.0, &mut init)?;
    run("TES head", &s, &|tape| {
        let v = tape.input(&x, false);
        let lv = tes.forward_level(tape, v, &mask)?;
        let terms = [probe(tape, lv.logits, 10)?, probe(tape, lv.offsets, 11)?, probe(tape, lv.scores, 12)?];
        sum_all(tape, &terms)
    })?;

    let mut s = ParamStore::new();
    let pcs = PcsHead::new(&mut s, d, 50.0, &mut init)?;
    run("PCS head", &s, &|tape| {
        let v = tape.input(&x, false);
        pcs.forward(tape, v, &mask)
    })?;
    Ok(reports)
}

/// Gradient check of the full two-stream network under the training loss,
/// with random inputs, a padded tail and targets from random segments.
pub fn model_grad_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = TwoStreamNet::new(config, &mut store, &mut rng)?;
    let t = config.t_max;
    let valid = t - t / 8;
    let mask = ValidityMask::prefix(t, valid)?;
    let mut video = random(config.video_dim, t, &mut rng);
    let mut audio = random(config.audio_dim, t, &mut rng);
    video.zero_invalid(&mask);
    audio.zero_invalid(&mask);
    let mut segments = Vec::new();
    let mut start = 0.0;
    while start + 2.0 < valid as f64 {
        let len = rng.gen_range(1..=(valid / 3).max(1)) as f64;
        let end = (start + len).min(valid as f64);
        segments.push(GtSegment {
            start,
            end,
            class_id: rng.gen_range(0..config.num_classes),
            score: rng.gen_range(0.0..5.0),
        });
        start = end + 1.0;
    }
    let targets = generate_point_targets(&segments, 3.0, config)?;
    let weights = LossWeights::default();
    let positive = targets.num_positive();
    grad_check(
        &store,
        |tape| {
            let mut eval_rng = rand::rngs::mock::StepRng::new(0, 0);
            let vars = net.forward(tape, &video, &audio, &mask, false, &mut eval_rng)?;
            let (loss, _) = record_sample_loss(tape, &vars, &targets, &weights, positive, 1)?;
            Ok(loss)
        },
        &check_options(seed),
    )
}
