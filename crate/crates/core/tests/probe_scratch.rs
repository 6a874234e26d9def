//! Temporary diagnostic: load a calibration checkpoint and dump predictions.
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evheat::config::RunConfig;
use evheat::model::{apply_checkpoint, load_checkpoint, Detector};
use evheat::train::{build_dataset, detector_config, run_eval, Split};

#[test]
#[ignore]
fn dump_checkpoint_predictions() {
    let ckpt_path = Path::new("/tmp/cal_clip4/checkpoint.evck");
    if !ckpt_path.exists() {
        eprintln!("no checkpoint; skipping");
        return;
    }
    let ckpt = load_checkpoint(ckpt_path).unwrap();
    let cfg: RunConfig = serde_json::from_str(&ckpt.config_json).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let det = Detector::<f64>::new(detector_config(&cfg), &mut rng).unwrap();
    apply_checkpoint(&ckpt, &det.params()).unwrap();

    let ds = build_dataset(&cfg, Split::Eval, Path::new(".")).unwrap();
    println!("eval samples: {}", ds.samples.len());

    for idx in 0..3 {
        let s = &ds.samples[idx];
        println!("== image {idx}: {} GT boxes", s.annotations.len());
        for a in &s.annotations {
            println!(
                "  gt  cls {} [{:.1} {:.1} {:.1} {:.1}]",
                a.cls, a.x1, a.y1, a.x2, a.y2
            );
        }
        let frames = evheat::events::frames_to_batch::<f64>(
            &[s.frame.clone()],
            cfg.data.clip,
        )
        .unwrap();
        let dets = det.detect(&frames, cfg.eval.k, &mut rng).unwrap();
        let mut top: Vec<_> = dets[0].clone();
        top.sort_by(|a, b| b.score.total_cmp(&a.score));
        for d in top.iter().take(8) {
            println!(
                "  det cls {} score {:.3} [{:.1} {:.1} {:.1} {:.1}]",
                d.cls, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
            );
        }
    }

    let m = run_eval(&det, &ds, cfg.eval.k, &[0.5], cfg.data.classes).unwrap();
    println!("map@50 {:.4} precision {:.4} recall {:.4}", m.map_50, m.precision, m.recall);
}

#[test]
#[ignore]
fn dump_input_statistics() {
    let ckpt_path = Path::new("/tmp/cal_clip4/checkpoint.evck");
    if !ckpt_path.exists() {
        eprintln!("no checkpoint; skipping");
        return;
    }
    let ckpt = load_checkpoint(ckpt_path).unwrap();
    let cfg: RunConfig = serde_json::from_str(&ckpt.config_json).unwrap();
    let ds = build_dataset(&cfg, Split::Eval, Path::new(".")).unwrap();
    for idx in 0..3 {
        let s = &ds.samples[idx];
        let frames = evheat::events::frames_to_batch::<f64>(
            &[s.frame.clone()],
            cfg.data.clip,
        )
        .unwrap();
        let d = frames.data();
        let nonzero = d.iter().filter(|v| **v != 0.0).count();
        let mx = d.iter().cloned().fold(f64::MIN, f64::max);
        let sum: f64 = d.iter().sum();
        println!(
            "image {idx}: shape {:?} nonzero {}/{} max {:.4} mean {:.6} events {}",
            frames.shape(),
            nonzero,
            d.len(),
            mx,
            sum / d.len() as f64,
            s.frame.counts.iter().map(|&c| c as u64).sum::<u64>(),
        );
    }
}
