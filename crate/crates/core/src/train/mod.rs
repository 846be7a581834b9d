//! Training, evaluation and inference drivers.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, BestVal, Checkpoint, RngState,
    TensorRecord,
};
pub use optim::{clip_global_norm, step_decay, AdamState};

use crate::backbone::{ModelConfig, TwoStreamNet};
use crate::data::{load_manifest, load_split, pad_sample, Manifest, PaddedSample, Sample};
use crate::decode::{predict_elements, DecodeConfig, SamplePrediction, Segment};
use crate::losses::{record_sample_loss, LossBreakdown, LossWeights};
use crate::metrics::{evaluate_predictions, EvalReport};
use crate::targets::{generate_point_targets, PointTargets};
use crate::tensor::{Gradients, ParamStore, Tape};
use crate::{Error, Result};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_LOG: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub manifest: PathBuf,
    /// Start the element-score and PCS biases at the training-split means
    /// and their gains at the training-split standard deviations (at least 1).
    pub init_output_biases: bool,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 5e-2,
            lr_decay: 0.1,
            lr_decay_every: 5,
            clip_norm: 1.0,
            seed: 0,
            manifest: PathBuf::from("manifest.json"),
            init_output_biases: true,
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch_size and lr_decay_every must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay * self.lr < 1.0) {
            return bad(format!("weight_decay {} invalid for lr {}", self.weight_decay, self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        let w = &self.loss;
        if [w.alpha, w.beta, w.focal_alpha, w.focal_gamma].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        self.model.validate()
    }

    /// Checks that the model's input sizes agree with a dataset manifest.
    pub fn check_manifest(&self, m: &Manifest) -> Result<()> {
        let c = &self.model;
        if (c.video_dim, c.audio_dim, c.num_classes) != (m.video_dim, m.audio_dim, m.num_classes) {
            return Err(Error::Config(format!(
                "model expects video/audio/classes {}/{}/{}, manifest has {}/{}/{}",
                c.video_dim, c.audio_dim, c.num_classes, m.video_dim, m.audio_dim, m.num_classes
            )));
        }
        Ok(())
    }
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut c = parse_train_config(&text)?;
    if c.manifest.is_relative() {
        c.manifest = path.parent().unwrap_or(Path::new(".")).join(&c.manifest);
    }
    Ok(c)
}

/// A padded sample with its point targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub padded: PaddedSample,
    pub targets: PointTargets,
}

pub fn prepare(samples: &[Sample], model: &ModelConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                padded: pad_sample(s, model.t_max)?,
                targets: generate_point_targets(&s.segments, s.pcs, model)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValSummary {
    pub spearman_tes: f64,
    pub spearman_pcs: f64,
    pub avg_map: f64,
}

impl From<&EvalReport> for ValSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            spearman_tes: r.spearman_tes,
            spearman_pcs: r.spearman_pcs,
            avg_map: r.avg_map,
        }
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub lr: f64,
    /// Components averaged over mini-batches; `num_positive` is the epoch total.
    pub loss: LossBreakdown,
    pub batches: usize,
    /// Largest pre-clipping gradient norm of the epoch.
    pub max_grad_norm: f64,
    pub val: Option<ValSummary>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: TwoStreamNet,
    pub store: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    pub best: Option<BestVal>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig, train: &[Sample]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = TwoStreamNet::new(&config.model, &mut store, &mut rng)?;
        if config.init_output_biases && !train.is_empty() {
            let scores: Vec<f64> = train.iter().flat_map(|s| s.segments.iter().map(|g| g.score)).collect();
            let pcs: Vec<f64> = train.iter().map(|s| s.pcs).collect();
            let (score_mean, score_std) = mean_std(&scores);
            let (pcs_mean, pcs_std) = mean_std(&pcs);
            net.set_output_biases(&mut store, score_mean, pcs_mean);
            net.set_output_gains(&mut store, score_std.max(1.0), pcs_std.max(1.0));
        }
        let adam = AdamState::new(&store);
        Ok(Self {
            config: config.clone(),
            net,
            store,
            adam,
            epoch: 0,
            best: None,
            rng,
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.config.validate()?;
        let (net, store, adam) = restore_model(c)?;
        Ok(Self {
            config: c.config.clone(),
            net,
            store,
            adam,
            epoch: c.epoch,
            best: c.best,
            rng: c.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.epoch, &self.store, &self.adam, &self.rng, self.best)
    }

    /// Learning rate of the next epoch.
    pub fn lr(&self) -> f64 {
        let c = &self.config;
        step_decay(c.lr, c.lr_decay, c.lr_decay_every, self.epoch as usize)
    }

    fn sample_gradients(&self, p: &Prepared, seed: u64, batch_positive: usize, batch_size: usize) -> Result<(Gradients, LossBreakdown)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(&self.store);
        let vars = self
            .net
            .forward(&mut tape, &p.padded.video, &p.padded.audio, &p.padded.mask, true, &mut rng)?;
        let (loss, parts) = record_sample_loss(&mut tape, &vars, &p.targets, &self.config.loss, batch_positive, batch_size)?;
        Ok((tape.backward(loss)?.params, parts))
    }

    /// One pass over `data` in shuffled mini-batches. Per-sample gradients
    /// are computed in parallel and summed in batch order.
    pub fn train_epoch(&mut self, data: &[Prepared]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let lr = self.lr();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = LossBreakdown::default();
        let mut batches = 0;
        let mut max_grad_norm: f64 = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();
            let positive: usize = batch.iter().map(|&i| data[i].targets.num_positive()).sum();
            let results: Vec<Result<(Gradients, LossBreakdown)>> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| self.sample_gradients(&data[i], seed, positive, batch.len()))
                .collect();
            let mut grads = self.store.zero_gradients();
            let mut parts = LossBreakdown::default();
            for r in results {
                let (g, b) = r?;
                grads.add_assign(&g);
                parts.accumulate(&b);
            }
            max_grad_norm = max_grad_norm.max(clip_global_norm(&mut grads, self.config.clip_norm));
            self.adam.step(&mut self.store, &grads, lr, self.config.weight_decay)?;
            total.accumulate(&parts);
            batches += 1;
        }
        let k = batches as f64;
        let loss = LossBreakdown {
            focal: total.focal / k,
            diou: total.diou / k,
            element: total.element / k,
            pcs: total.pcs / k,
            total: total.total / k,
            num_positive: total.num_positive,
        };
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            loss,
            batches,
            max_grad_norm,
            val: None,
        };
        self.epoch += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalReport> {
        evaluate_model(&self.net, &self.store, samples, &self.config.decode)
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 1.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rebuilds the network described by a checkpoint and loads its values.
pub fn restore_model(c: &Checkpoint) -> Result<(TwoStreamNet, ParamStore, AdamState)> {
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let net = TwoStreamNet::new(&c.config.model, &mut store, &mut init)?;
    let adam = c.restore_into(&mut store)?;
    Ok((net, store, adam))
}

pub fn predict_sample(net: &TwoStreamNet, store: &ParamStore, sample: &Sample, decode: &DecodeConfig) -> Result<SamplePrediction> {
    let p = pad_sample(sample, net.config.t_max)?;
    let outputs = net.predict(store, &p.video, &p.audio, &p.mask)?;
    let (segments, tes) = predict_elements(&outputs, sample.program_type, decode);
    Ok(SamplePrediction {
        id: sample.id.clone(),
        program_type: sample.program_type,
        segments,
        tes,
        pcs: outputs.pcs as f64,
    })
}

fn truth(samples: &[Sample]) -> Vec<(Vec<crate::targets::GtSegment>, f64, f64)> {
    samples.iter().map(|s| (s.segments.clone(), s.tes(), s.pcs)).collect()
}

pub fn evaluate_model(net: &TwoStreamNet, store: &ParamStore, samples: &[Sample], decode: &DecodeConfig) -> Result<EvalReport> {
    if samples.len() < 2 {
        return Err(Error::Domain(format!("evaluation needs at least 2 samples, got {}", samples.len())));
    }
    let predictions = samples
        .par_iter()
        .map(|s| predict_sample(net, store, s, decode))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(predictions, &truth(samples))
}

/// Ground truth repackaged as predictions, for checking the scoring path.
pub fn oracle_predictions(samples: &[Sample]) -> Vec<SamplePrediction> {
    samples
        .iter()
        .map(|s| SamplePrediction {
            id: s.id.clone(),
            program_type: s.program_type,
            segments: s
                .segments
                .iter()
                .map(|g| Segment {
                    start: g.start,
                    end: g.end,
                    class_id: g.class_id,
                    element_score: g.score,
                    confidence: 1.0,
                })
                .collect(),
            tes: s.tes(),
            pcs: s.pcs,
        })
        .collect()
}

pub fn evaluate_oracle(samples: &[Sample]) -> Result<EvalReport> {
    if samples.len() < 2 {
        return Err(Error::Domain(format!("evaluation needs at least 2 samples, got {}", samples.len())));
    }
    evaluate_predictions(oracle_predictions(samples), &truth(samples))
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochStats>,
    pub best: Option<BestVal>,
}

/// Trains on the manifest's train split, validating on its val split
/// after every epoch when it holds at least two samples.
///
/// Writes `last.ckpt` every epoch, `best.ckpt` whenever the validation
/// score `ρ_TES + ρ_PCS` improves, and appends one JSON line per epoch to
/// `log.jsonl`. With `resume`, training continues from that checkpoint.
pub fn train(config: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let manifest = load_manifest(&config.manifest)?;
    config.check_manifest(&manifest)?;
    let train_samples = load_split(&manifest, "train")?;
    if train_samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val_samples = load_split(&manifest, "val")?;
    let data = prepare(&train_samples, &config.model)?;
    let mut trainer = match resume {
        Some(path) => {
            let c = read_checkpoint(path)?;
            if c.config.model != config.model {
                return Err(Error::Config("checkpoint model differs from the configured model".into()));
            }
            let mut t = Trainer::from_checkpoint(&c)?;
            t.config = config.clone();
            t
        }
        None => Trainer::new(config, &train_samples)?,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(EPOCH_LOG);
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut history = Vec::new();
    while (trainer.epoch as usize) < config.epochs {
        let mut stats = trainer.train_epoch(&data)?;
        if val_samples.len() >= 2 {
            let report = trainer.evaluate(&val_samples)?;
            let score = report.spearman_tes + report.spearman_pcs;
            if trainer.best.map_or(true, |b| score > b.score) {
                trainer.best = Some(BestVal { score, epoch: stats.epoch });
                write_checkpoint(&out_dir.join(BEST_CHECKPOINT), &trainer.checkpoint())?;
            }
            stats.val = Some(ValSummary::from(&report));
        }
        log::info!(
            "epoch {} lr {:.2e} loss {:.4} (focal {:.4} diou {:.4} element {:.4} pcs {:.4}){}",
            stats.epoch,
            stats.lr,
            stats.loss.total,
            stats.loss.focal,
            stats.loss.diou,
            stats.loss.element,
            stats.loss.pcs,
            stats
                .val
                .as_ref()
                .map(|v| format!(" val rho_tes {:.3} rho_pcs {:.3} mAP {:.3}", v.spearman_tes, v.spearman_pcs, v.avg_map))
                .unwrap_or_default()
        );
        let line = serde_json::to_string(&stats).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        write_checkpoint(&out_dir.join(LAST_CHECKPOINT), &trainer.checkpoint())?;
        history.push(stats);
    }
    if val_samples.len() < 2 {
        std::fs::copy(out_dir.join(LAST_CHECKPOINT), out_dir.join(BEST_CHECKPOINT))
            .map_err(|e| Error::io(out_dir.join(BEST_CHECKPOINT), e))?;
    }
    Ok(TrainSummary {
        history,
        best: trainer.best,
    })
}

/// Evaluates a checkpoint on a manifest split.
pub fn evaluate_checkpoint(c: &Checkpoint, manifest: &Manifest, split: &str) -> Result<EvalReport> {
    c.config.check_manifest(manifest)?;
    let samples = load_split(manifest, split)?;
    let (net, store, _) = restore_model(c)?;
    evaluate_model(&net, &store, &samples, &c.config.decode)
}
