//! Seeded synthetic programs with planted, recoverable ground truth.
//!
//! Inside each element the video carries a class pattern scaled by
//! `score / 20` plus a class-agnostic element marker, over Gaussian noise.
//! The audio carries a blend `(1 - a) A0 + a A1` of two fixed patterns for
//! the whole program and `pcs = 20 + 80 a`. Blending rather than scaling
//! keeps the amplitude readable after per-step normalization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{encode_manifest, write_sample, Manifest, Sample};
use crate::decode::ProgramType;
use crate::targets::GtSegment;
use crate::tensor::SeqTensor;
use crate::{Error, Result};

pub const SCORE_CAP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub video_dim: usize,
    pub audio_dim: usize,
    pub num_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise: f64,
    /// Amplitude of the class-agnostic element marker.
    pub marker: f64,
    /// Probability of a free program.
    pub free_fraction: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            video_dim: 1024,
            audio_dim: 128,
            num_classes: 22,
            min_len: 150,
            max_len: 288,
            min_duration: 1,
            max_duration: 77,
            noise: 0.1,
            marker: 0.5,
            free_fraction: 0.5,
            max_attempts: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.video_dim > 0
            && self.audio_dim > 0
            && self.num_classes > 0
            && 0 < self.min_len
            && self.min_len <= self.max_len
            && 0 < self.min_duration
            && self.min_duration <= self.max_duration
            && self.noise >= 0.0
            && (0.0..=1.0).contains(&self.free_fraction)
            && self.max_attempts > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic data settings: {self:?}")))
        }
    }
}

/// Sizes of the validation and test splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSplits {
    pub val: usize,
    pub test: usize,
}

fn sign_pattern(seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn class_pattern(class: usize, dim: usize) -> Vec<f32> {
    sign_pattern(0x5CA7_E000 + class as u64, dim)
}

/// Mean element score of a class, spread over `[2, 16]`.
pub fn class_base_score(class: usize, num_classes: usize) -> f64 {
    let k = (7 * class) % num_classes;
    2.0 + 14.0 * k as f64 / (num_classes.max(2) - 1) as f64
}

fn place_segments<G: Rng + ?Sized>(rng: &mut G, len: usize, count: usize, cfg: &SynthConfig) -> Result<Vec<(usize, usize)>> {
    let (lo, hi) = (cfg.min_duration as f64, (cfg.max_duration + 1) as f64);
    for _ in 0..cfg.max_attempts {
        let durations: Vec<usize> = (0..count)
            .map(|_| {
                let d = rng.gen_range(lo.ln()..hi.ln()).exp().floor() as usize;
                d.clamp(cfg.min_duration, cfg.max_duration)
            })
            .collect();
        let needed = durations.iter().sum::<usize>() + count.saturating_sub(1);
        if needed > len {
            continue;
        }
        let slack = len - needed;
        let weights: Vec<f64> = (0..=count).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let gaps: Vec<usize> = weights.iter().map(|w| (slack as f64 * w / total).floor() as usize).collect();
        let mut pos = gaps[0];
        let mut out = Vec::with_capacity(count);
        for (k, d) in durations.iter().enumerate() {
            out.push((pos, pos + d));
            pos += d + 1 + gaps[k + 1];
        }
        return Ok(out);
    }
    Err(Error::Data(format!(
        "could not pack {count} elements into {len} s after {} attempts",
        cfg.max_attempts
    )))
}

pub fn synth_sample<G: Rng + ?Sized>(rng: &mut G, id: &str, cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    let program_type = if rng.gen_bool(cfg.free_fraction) {
        ProgramType::Free
    } else {
        ProgramType::Short
    };
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let spans = place_segments(rng, len, program_type.element_count(), cfg)?;
    let segments: Vec<GtSegment> = spans
        .iter()
        .map(|&(s, e)| {
            let class_id = rng.gen_range(0..cfg.num_classes);
            let r = class_base_score(class_id, cfg.num_classes) + rng.gen_range(-3.0..3.0);
            GtSegment {
                start: s as f64,
                end: e as f64,
                class_id,
                score: (r.clamp(0.0, SCORE_CAP) * 100.0).round() / 100.0,
            }
        })
        .collect();

    let noise = cfg.noise;
    let mut video = SeqTensor::from_fn(cfg.video_dim, len, |_, _| (noise * rng.sample::<f64, _>(StandardNormal)) as f32);
    let marker = sign_pattern(0xE1E7, cfg.video_dim);
    for seg in &segments {
        let p = class_pattern(seg.class_id, cfg.video_dim);
        let amp = (seg.score / SCORE_CAP) as f32;
        for t in seg.start as usize..seg.end as usize {
            for d in 0..cfg.video_dim {
                let v = video.get(d, t) + amp * p[d] + cfg.marker as f32 * marker[d];
                video.set(d, t, v);
            }
        }
    }

    let a: f64 = rng.gen();
    let (a0, a1) = (sign_pattern(0xA0D1_0000, cfg.audio_dim), sign_pattern(0xA0D1_0001, cfg.audio_dim));
    let audio = SeqTensor::from_fn(cfg.audio_dim, len, |d, _| {
        ((1.0 - a) * a0[d] as f64 + a * a1[d] as f64 + noise * rng.sample::<f64, _>(StandardNormal)) as f32
    });
    Ok(Sample {
        id: id.to_string(),
        program_type,
        video,
        audio,
        segments,
        pcs: ((20.0 + 80.0 * a) * 100.0).round() / 100.0,
    })
}

pub fn synth_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_sample(&mut rng, &format!("s{i:05}"), cfg)).collect()
}

/// Writes `n` samples under `out/samples` and a `manifest.json` whose
/// splits are train, then `splits.val`, then `splits.test` samples.
pub fn synth_generate(seed: u64, n: usize, cfg: &SynthConfig, splits: SynthSplits, out: &Path) -> Result<Manifest> {
    if splits.val + splits.test > n {
        return Err(Error::Config(format!(
            "{} validation and {} test samples requested from {n}",
            splits.val, splits.test
        )));
    }
    let samples = synth_dataset(seed, n, cfg)?;
    let root = out.join("samples");
    for s in &samples {
        write_sample(&root.join(&s.id), s)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let n_train = n - splits.val - splits.test;
    let manifest = Manifest {
        root: "samples".into(),
        video_dim: cfg.video_dim,
        audio_dim: cfg.audio_dim,
        num_classes: cfg.num_classes,
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + splits.val].to_vec(),
        test: ids[n_train + splits.val..].to_vec(),
    };
    let path = out.join("manifest.json");
    std::fs::write(&path, encode_manifest(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { root, ..manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            video_dim: 4,
            audio_dim: 2,
            ..SynthConfig::default()
        }
    }

    fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    let rel = e.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, std::fs::read(&e).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_gives_identical_dataset_on_disk() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig {
            video_dim: 12,
            audio_dim: 6,
            ..SynthConfig::default()
        };
        let splits = SynthSplits { val: 1, test: 1 };
        let m = synth_generate(7, 5, &cfg, splits, a.path()).unwrap();
        synth_generate(7, 5, &cfg, splits, b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (3, 1, 1));
        let c = tempfile::tempdir().unwrap();
        synth_generate(8, 5, &cfg, splits, c.path()).unwrap();
        assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
    }

    #[test]
    fn ten_thousand_draws_satisfy_sample_invariants() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen_free = false;
        let mut seen_short = false;
        for i in 0..10_000 {
            let s = synth_sample(&mut rng, &format!("x{i}"), &cfg).unwrap();
            s.validate(22).unwrap();
            assert!((150..=288).contains(&s.len()));
            assert_eq!(s.segments.len(), s.program_type.element_count());
            seen_free |= s.program_type == ProgramType::Free;
            seen_short |= s.program_type == ProgramType::Short;
            for w in s.segments.windows(2) {
                assert!(w[0].end < w[1].start, "elements overlap or touch");
            }
            for g in &s.segments {
                let d = g.duration();
                assert!((1.0..=77.0).contains(&d) && d.fract() == 0.0);
                assert!((0.0..=SCORE_CAP).contains(&g.score));
                assert!(g.class_id < 22);
            }
            assert!((20.0..=100.0).contains(&s.pcs));
        }
        assert!(seen_free && seen_short);
    }

    #[test]
    fn infeasible_packing_is_reported() {
        let cfg = SynthConfig {
            min_len: 10,
            max_len: 10,
            min_duration: 5,
            max_duration: 5,
            max_attempts: 3,
            ..tiny()
        };
        assert!(matches!(synth_dataset(1, 1, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn linear_probe_recovers_class_from_in_element_features() {
        let cfg = SynthConfig {
            video_dim: 64,
            audio_dim: 4,
            ..SynthConfig::default()
        };
        let samples = synth_dataset(21, 240, &cfg).unwrap();
        let mut points: Vec<(Vec<f64>, usize)> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for s in &samples {
            for g in &s.segments {
                let t = rng.gen_range(g.start as usize..g.end as usize);
                points.push(((0..64).map(|d| s.video.get(d, t) as f64).collect(), g.class_id));
            }
        }
        assert!(points.len() >= 2000);
        let (fit, eval) = points.split_at(1000);
        let eval = &eval[..1000];
        // Nearest class mean under a dot-product score is a linear classifier.
        let mut means = vec![vec![0.0; 64]; 22];
        let mut counts = vec![0usize; 22];
        for (x, c) in fit {
            counts[*c] += 1;
            for d in 0..64 {
                means[*c][d] += x[d];
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        let predict = |x: &[f64]| -> usize {
            (0..22)
                .max_by(|&a, &b| {
                    let score = |c: usize| {
                        let m = &means[c];
                        let dot: f64 = x.iter().zip(m).map(|(u, v)| u * v).sum();
                        dot - 0.5 * m.iter().map(|v| v * v).sum::<f64>()
                    };
                    score(a).total_cmp(&score(b))
                })
                .unwrap()
        };
        let correct = eval.iter().filter(|(x, c)| predict(x) == *c).count();
        assert!(correct as f64 / 1000.0 > 0.95, "probe accuracy {}", correct as f64 / 1000.0);
    }

    #[test]
    fn audio_blend_tracks_pcs() {
        let cfg = SynthConfig {
            video_dim: 4,
            audio_dim: 32,
            ..SynthConfig::default()
        };
        let a1 = sign_pattern(0xA0D1_0001, 32);
        let a0 = sign_pattern(0xA0D1_0000, 32);
        for s in synth_dataset(5, 20, &cfg).unwrap() {
            // Projection on the pattern difference recovers the blend weight.
            let diff: Vec<f64> = a1.iter().zip(&a0).map(|(x, y)| (x - y) as f64).collect();
            let norm: f64 = diff.iter().map(|v| v * v).sum();
            let mut est = 0.0;
            for t in 0..s.len() {
                let proj: f64 = (0..32).map(|d| (s.audio.get(d, t) as f64 - a0[d] as f64) * diff[d]).sum();
                est += proj / norm;
            }
            est /= s.len() as f64;
            assert!((20.0 + 80.0 * est - s.pcs).abs() < 1.0);
        }
    }
}
