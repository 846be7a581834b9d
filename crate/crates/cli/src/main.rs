use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skatescore::backbone::BackboneKind;
use skatescore::data::{
    load_manifest, load_sample, load_split, read_features, synth_generate, Sample, SynthConfig,
    SynthSplits, AUDIO_FILE, LABEL_FILE, VIDEO_FILE,
};
use skatescore::decode::ProgramType;
use skatescore::diagnostics::{layer_grad_checks, model_grad_check, CheckScale};
use skatescore::metrics::EvalReport;
use skatescore::train::{
    evaluate_checkpoint, evaluate_oracle, load_train_config, predict_sample, read_checkpoint, restore_model, train,
};
use skatescore::{Error, Result};

#[derive(Parser)]
#[command(name = "skatescore", version, about = "Figure skating element localization and TES/PCS scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Number of programs.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long, default_value_t = 1024)]
        video_dim: usize,
        #[arg(long, default_value_t = 128)]
        audio_dim: usize,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints and the epoch log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest split and write the report as JSON.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the manifest recorded in the checkpoint.
        #[arg(long, required_unless_present = "ckpt")]
        manifest: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict elements, TES and PCS for one sample directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        /// Required when the sample has no label file.
        #[arg(long)]
        program: Option<ProgramType>,
        /// Writes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "small")]
        scale: CheckScale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the convolutional backbone instead of selective scan.
        #[arg(long)]
        conv: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Exit code 2 is reserved for numeric failures, so argument errors exit 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summarize(report: &EvalReport) {
    println!(
        "rho_tes {:.4}  rho_pcs {:.4}  avg_mAP {:.4}  ({} samples)",
        report.spearman_tes,
        report.spearman_pcs,
        report.avg_map,
        report.samples.len()
    );
    for (t, m) in report.thresholds.iter().zip(&report.map_per_threshold) {
        println!("  mAP@{t:.2} {m:.4}");
    }
}

fn load_infer_sample(dir: &Path, program: Option<ProgramType>, num_classes: usize) -> Result<Sample> {
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join(LABEL_FILE).exists() {
        let mut s = load_sample(dir, num_classes)?;
        if let Some(p) = program {
            s.program_type = p;
        }
        return Ok(s);
    }
    let program = program.ok_or_else(|| Error::Usage(format!("{} has no {LABEL_FILE}; pass --program", dir.display())))?;
    let sample = Sample {
        id,
        program_type: program,
        video: read_features(&dir.join(VIDEO_FILE))?,
        audio: read_features(&dir.join(AUDIO_FILE))?,
        segments: Vec::new(),
        pcs: 0.0,
    };
    sample.validate(num_classes)?;
    Ok(sample)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth {
            seed,
            n,
            out,
            val,
            test,
            video_dim,
            audio_dim,
        } => {
            let cfg = SynthConfig {
                video_dim,
                audio_dim,
                ..SynthConfig::default()
            };
            let m = synth_generate(seed, n, &cfg, SynthSplits { val, test }, &out)?;
            println!(
                "wrote {n} samples to {} (train {}, val {}, test {})",
                out.display(),
                m.train.len(),
                m.val.len(),
                m.test.len()
            );
        }
        Command::Train { config, out, resume } => {
            let cfg = load_train_config(&config)?;
            let summary = train(&cfg, &out, resume.as_deref())?;
            if let Some(last) = summary.history.last() {
                println!("finished epoch {} loss {:.4}", last.epoch, last.loss.total);
            }
            if let Some(b) = summary.best {
                println!("best validation rho_tes + rho_pcs {:.4} at epoch {}", b.score, b.epoch);
            }
        }
        Command::Eval {
            ckpt,
            split,
            manifest,
            oracle,
            out,
        } => {
            let ckpt = ckpt.map(|p| read_checkpoint(&p).map(|c| (p, c))).transpose()?;
            let manifest_path = match (&manifest, &ckpt) {
                (Some(m), _) => m.clone(),
                (None, Some((_, c))) => c.config.manifest.clone(),
                (None, None) => return Err(Error::Usage("--manifest is required without --ckpt".into())),
            };
            let manifest = load_manifest(&manifest_path)?;
            let report = if oracle {
                evaluate_oracle(&load_split(&manifest, &split)?)?
            } else {
                let (_, c) = ckpt.as_ref().expect("clap requires --ckpt without --oracle");
                evaluate_checkpoint(c, &manifest, &split)?
            };
            summarize(&report);
            let out = out.unwrap_or_else(|| {
                let dir = ckpt
                    .as_ref()
                    .and_then(|(p, _)| p.parent().map(Path::to_path_buf))
                    .unwrap_or_else(|| PathBuf::from("."));
                dir.join(format!("eval_{split}{}.json", if oracle { "_oracle" } else { "" }))
            });
            write_json(&report, Some(&out))?;
            println!("report written to {}", out.display());
        }
        Command::Infer {
            ckpt,
            sample,
            program,
            out,
        } => {
            let c = read_checkpoint(&ckpt)?;
            let (net, store, _) = restore_model(&c)?;
            let s = load_infer_sample(&sample, program, c.config.model.num_classes)?;
            let p = predict_sample(&net, &store, &s, &c.config.decode)?;
            write_json(&p, out.as_deref())?;
        }
        Command::Gradcheck { scale, seed, conv } => {
            let mut ok = true;
            for (name, r) in layer_grad_checks(seed)? {
                println!(
                    "{} {name}: max relative error {:.3e}",
                    if r.passed() { "ok  " } else { "FAIL" },
                    r.max_rel_error()
                );
                ok &= r.passed();
            }
            let kind = if conv { BackboneKind::Conv } else { BackboneKind::Mamba };
            let r = model_grad_check(&scale.model(kind), seed)?;
            println!("full model ({scale:?}, {kind:?}):\n{r}");
            ok &= r.passed();
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
