//! Command-line entry points: train, eval, diffuse, gradcheck, synth.
//! Every subcommand exits nonzero on error and writes a machine-readable
//! JSON diagnostic to standard error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evheat::config::RunConfig;
use evheat::error::{Error, Result};
use evheat::events::{save_annotations, save_events_packed, synth_generate, Annotation};
use evheat::heat::{self};
use evheat::model::{apply_checkpoint, load_checkpoint, Detector};
use evheat::pgm;
use evheat::scalar::Scalar;
use evheat::tensor::Tensor;
use evheat::train::{build_dataset, detector_config, metrics_json, run_eval, run_train, Split};
use evheat::transforms::TransformKind;

#[derive(Parser)]
#[command(
    name = "evheat",
    version,
    about = "Event-camera detection with learnable heat conduction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config; writes checkpoint.evck and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's precision (32 or 64).
        #[arg(long)]
        precision: Option<u8>,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's eval split; metrics JSON to
    /// stdout and <out>/metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        precision: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Diffuse a graymap through one expert; writes frame_XXX.pgm (and
    /// oracle_XXX.pgm with --oracle) plus a deviation report.
    Diffuse {
        /// Binary PGM (P5) input image.
        #[arg(long)]
        input: PathBuf,
        /// dct, dft, or haar.
        #[arg(long)]
        expert: String,
        /// Constant diffusivity.
        #[arg(long)]
        k: f64,
        /// Total diffusion time.
        #[arg(long)]
        t: f64,
        /// Number of output intervals (frames at j*t/steps, j = 0..=steps).
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also integrate the finite-difference oracle and report the
        /// maximum per-pixel relative deviation.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the full gradient-check suite at 64-bit; nonzero exit on failure.
    Gradcheck {
        /// Test hook: append a deliberately corrupted-gradient entry.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Generate synthetic scenes; writes packed event files + annotations.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the synthetic base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        let diag = serde_json::json!({ "error": format!("{e}") });
        eprintln!("{diag}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, out, precision, seed } => {
            let cfg = override_cfg(RunConfig::load(&config)?, precision, seed)?;
            match cfg.precision {
                64 => cmd_train::<f64>(&cfg, &out),
                _ => cmd_train::<f32>(&cfg, &out),
            }
        }
        Cmd::Eval { checkpoint, config, out, precision, seed } => {
            let cfg = override_cfg(RunConfig::load(&config)?, precision, seed)?;
            match cfg.precision {
                64 => cmd_eval::<f64>(&cfg, &checkpoint, &out),
                _ => cmd_eval::<f32>(&cfg, &checkpoint, &out),
            }
        }
        Cmd::Diffuse { input, expert, k, t, steps, out, oracle } => {
            cmd_diffuse(&input, &expert, k, t, steps, &out, oracle)
        }
        Cmd::Gradcheck { corrupt } => cmd_gradcheck(corrupt),
        Cmd::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
    }
}

fn override_cfg(mut cfg: RunConfig, precision: Option<u8>, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(p) = precision {
        cfg.precision = p;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let outcome = run_train::<T>(cfg, out)?;
    let summary = serde_json::json!({
        "checkpoint": outcome.checkpoint.display().to_string(),
        "metrics": outcome.metrics.display().to_string(),
        "final_loss": outcome.final_loss,
        "final_eval": outcome.final_eval.as_ref().map(metrics_json),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let det = Detector::<T>::new(detector_config(cfg), &mut rng)?;
    apply_checkpoint(&ckpt, &det.params())?;
    let ds = build_dataset(cfg, Split::Eval, Path::new("."))?;
    if ds.samples.is_empty() {
        eprintln!("{}", serde_json::json!({ "warning": "empty eval dataset; metrics are zero-filled" }));
    }
    let m = run_eval(&det, &ds, cfg.eval.k, &cfg.thresholds(), cfg.data.classes)?;
    let json = metrics_json(&m);
    std::fs::write(out.join("metrics.json"), format!("{json:#}\n"))?;
    println!("{json}");
    Ok(())
}

fn parse_expert(s: &str) -> Result<TransformKind> {
    match s.to_ascii_lowercase().as_str() {
        "dct" => Ok(TransformKind::Dct),
        "dft" => Ok(TransformKind::Dft),
        "haar" => Ok(TransformKind::Haar),
        other => Err(Error::Config(format!("expert: must be dct|dft|haar, got {other:?}"))),
    }
}

fn cmd_diffuse(
    input: &Path,
    expert: &str,
    k: f64,
    t: f64,
    steps: usize,
    out: &Path,
    oracle: bool,
) -> Result<()> {
    let kind = parse_expert(expert)?;
    if !(k >= 0.0) {
        return Err(Error::Config(format!("k: must be >= 0, got {k}")));
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("t: must be > 0, got {t}")));
    }
    if steps == 0 {
        return Err(Error::Config("steps: must be >= 1".into()));
    }
    if oracle && kind == TransformKind::Haar {
        return Err(Error::Config(
            "oracle: the FD oracle certifies only the dct and dft experts".into(),
        ));
    }
    let img = pgm::read_pgm(input)?;
    let (h, w) = (img.h, img.w);
    std::fs::create_dir_all(out)?;

    let u0 = Tensor::<f64>::from_f64_slice(&img.data, &[h, w]);
    let kmap = Tensor::<f64>::full(&[h, w], k);
    // largest refinement keeping the fine grid tractable
    let r = [8usize, 4, 2, 1]
        .into_iter()
        .find(|r| r * h.max(w) <= 512)
        .unwrap_or(1);

    let mut max_rel = 0.0f64;
    for j in 0..=steps {
        let tj = t * j as f64 / steps as f64;
        let spectral: Vec<f64> = if j == 0 || k == 0.0 {
            img.data.clone()
        } else {
            heat::hco_apply(&u0, kind, &kmap, tj)?.data().to_vec()
        };
        pgm::write_pgm(&out.join(format!("frame_{j:03}.pgm")), w, h, &spectral)?;
        if oracle {
            let fd: Vec<f64> = if j == 0 || k == 0.0 {
                img.data.clone()
            } else {
                heat::refined_oracle_field(&img.data, h, w, kind, k, tj, r)?
            };
            pgm::write_pgm(&out.join(format!("oracle_{j:03}.pgm")), w, h, &fd)?;
            let scale = spectral.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let dev = spectral
                .iter()
                .zip(&fd)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            max_rel = max_rel.max(dev / scale);
        }
    }
    let mut report = serde_json::json!({
        "frames": steps + 1,
        "expert": expert,
        "k": k,
        "t": t,
    });
    if oracle {
        report
            .as_object_mut()
            .expect("report is an object")
            .insert("max_rel_deviation".into(), serde_json::json!(max_rel));
    }
    println!("{report}");
    Ok(())
}

fn cmd_gradcheck(corrupt: bool) -> Result<()> {
    let reports = evheat::checks::run_all(corrupt);
    let mut failed = 0usize;
    for r in &reports {
        println!("{r}");
        if !r.pass {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", reports.len(), failed);
    if failed > 0 {
        return Err(Error::Validation(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let s = &cfg.data.synthetic;
    let base_seed = seed.unwrap_or(s.seed);
    std::fs::create_dir_all(out)?;
    let scenes = s.train_scenes + s.eval_scenes;
    let mut all_anns: Vec<(String, Vec<Annotation>)> = Vec::new();
    for i in 0..scenes {
        let scene_cfg = s.to_synth_config(cfg.data.classes, base_seed.wrapping_add(i as u64));
        let (stream, truth) = synth_generate(&scene_cfg)?;
        let name = format!("scene_{i:04}");
        save_events_packed(out.join(format!("{name}.evs")), &stream)?;
        for (frame, anns) in truth {
            all_anns.push((format!("{name}/{frame}"), anns));
        }
    }
    save_annotations(out.join("annotations.json"), &all_anns)?;
    println!(
        "{}",
        serde_json::json!({ "scenes": scenes, "out": out.display().to_string() })
    );
    Ok(())
}
