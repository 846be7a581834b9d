//! Sample files, batching and the synthetic program generator.

mod features;
mod label;
mod manifest;
mod synth;

use std::path::Path;

pub use features::{decode_features, encode_features, read_features, write_features, HEADER_LEN, MAGIC, VERSION};
pub use label::{encode_label, parse_label, read_label, Label};
pub use manifest::{encode_manifest, load_manifest, parse_manifest, Manifest};
pub use synth::{synth_dataset, synth_generate, synth_sample, SynthConfig, SynthSplits};

use crate::decode::ProgramType;
use crate::targets::GtSegment;
use crate::tensor::{SeqTensor, ValidityMask};
use crate::{Error, Result};

pub const VIDEO_FILE: &str = "video.f32";
pub const AUDIO_FILE: &str = "audio.f32";
pub const LABEL_FILE: &str = "label.json";

/// One program: aligned video/audio features (one column per second) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub program_type: ProgramType,
    pub video: SeqTensor,
    pub audio: SeqTensor,
    pub segments: Vec<GtSegment>,
    pub pcs: f64,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.video.length()
    }

    pub fn is_empty(&self) -> bool {
        self.video.length() == 0
    }

    /// Sum of element scores.
    pub fn tes(&self) -> f64 {
        self.segments.iter().map(|s| s.score).sum()
    }

    pub fn label(&self) -> Label {
        Label {
            program_type: self.program_type,
            pcs: self.pcs,
            segments: self.segments.clone(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.video.length() != self.audio.length() {
            return Err(Error::Validation(format!(
                "sample {}: video has {} steps, audio {}",
                self.id,
                self.video.length(),
                self.audio.length()
            )));
        }
        if self.is_empty() {
            return Err(Error::Validation(format!("sample {} is empty", self.id)));
        }
        self.label()
            .validate(self.len(), num_classes)
            .map_err(|e| Error::Validation(format!("sample {}: {e}", self.id)))
    }
}

/// Writes `video.f32`, `audio.f32` and `label.json` into `dir`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_features(&dir.join(VIDEO_FILE), &sample.video)?;
    write_features(&dir.join(AUDIO_FILE), &sample.audio)?;
    let path = dir.join(LABEL_FILE);
    std::fs::write(&path, encode_label(&sample.label())).map_err(|e| Error::io(&path, e))
}

/// Loads a sample directory; the id is the directory name.
pub fn load_sample(dir: &Path, num_classes: usize) -> Result<Sample> {
    let video = read_features(&dir.join(VIDEO_FILE))?;
    let audio = read_features(&dir.join(AUDIO_FILE))?;
    let label = read_label(&dir.join(LABEL_FILE))?;
    let sample = Sample {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        program_type: label.program_type,
        video,
        audio,
        segments: label.segments,
        pcs: label.pcs,
    };
    sample.validate(num_classes)?;
    Ok(sample)
}

/// Loads every sample of a manifest split, checking feature sizes.
pub fn load_split(manifest: &Manifest, split: &str) -> Result<Vec<Sample>> {
    manifest
        .split(split)?
        .iter()
        .map(|id| {
            let s = load_sample(&manifest.sample_dir(id), manifest.num_classes)?;
            if s.video.channels() != manifest.video_dim || s.audio.channels() != manifest.audio_dim {
                return Err(Error::Validation(format!(
                    "sample {id}: feature sizes {}/{} differ from manifest {}/{}",
                    s.video.channels(),
                    s.audio.channels(),
                    manifest.video_dim,
                    manifest.audio_dim
                )));
            }
            Ok(s)
        })
        .collect()
}

/// A sample's features zero-padded to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSample {
    pub video: SeqTensor,
    pub audio: SeqTensor,
    pub mask: ValidityMask,
}

pub fn pad_sample(sample: &Sample, t_max: usize) -> Result<PaddedSample> {
    let t = sample.len();
    if t == 0 || t > t_max {
        return Err(Error::Validation(format!(
            "sample {} has {t} steps, outside [1, {t_max}]",
            sample.id
        )));
    }
    let pad = |x: &SeqTensor| SeqTensor::from_fn(x.channels(), t_max, |c, i| if i < t { x.get(c, i) } else { 0.0 });
    Ok(PaddedSample {
        video: pad(&sample.video),
        audio: pad(&sample.audio),
        mask: ValidityMask::prefix(t_max, t)?,
    })
}

pub fn pad_batch(samples: &[Sample], t_max: usize) -> Result<Vec<PaddedSample>> {
    samples.iter().map(|s| pad_sample(s, t_max)).collect()
}
