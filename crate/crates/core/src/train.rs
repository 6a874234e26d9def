//! Dataset assembly, the training loop, and checkpoint-driven evaluation.
//! Config + seed fully determine every output at 64-bit precision: batches,
//! Gumbel noise, and initialization all derive from counter-based seeds.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::backbone::RoutingMode;
use crate::config::RunConfig;
use crate::detect::{detection_loss, evaluate_map, LossWeights, MapMetrics, ScoredDetection};
use crate::error::{Error, Result};
use crate::events::{
    frames_to_batch, load_annotations, load_events, stack_events, synth_generate, Annotation,
    EventFormat, EventFrame,
};
use crate::model::{save_checkpoint, Detector, DetectorConfig};
use crate::optim::{cosine_schedule, Optimizer};
use crate::scalar::Scalar;


pub struct Sample {
    pub frame: EventFrame,
    /// Boxes in model-resolution pixel coordinates.
    pub annotations: Vec<Annotation>,
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub bins: usize,
    pub h: usize,
    pub w: usize,
    /// Count clip applied when stacking frames into model input.
    pub clip: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn scale_annotations(
    anns: &[Annotation],
    from: (f64, f64),
    to: (f64, f64),
) -> Vec<Annotation> {
    let (sx, sy) = (to.0 / from.0, to.1 / from.1);
    anns.iter()
        .map(|a| Annotation {
            x1: a.x1 * sx,
            y1: a.y1 * sy,
            x2: a.x2 * sx,
            y2: a.y2 * sy,
            cls: a.cls,
        })
        .filter(|a| a.x1 < a.x2 && a.y1 < a.y2)
        .collect()
}

/// Builds the split from per-scene seeded synthetic scenes; each scene
/// contributes `frames` stacked samples.
pub fn build_synthetic_dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let s = &cfg.data.synthetic;
    let (w, h) = (cfg.data.resolution[0], cfg.data.resolution[1]);
    let (lo, n) = match split {
        Split::Train => (0, s.train_scenes),
        Split::Eval => (s.train_scenes, s.eval_scenes),
    };
    let mut samples = Vec::with_capacity(n * s.frames);
    for i in 0..n {
        let scene_seed = s.seed.wrapping_add((lo + i) as u64);
        let scene_cfg = s.to_synth_config(cfg.data.classes, scene_seed);
        let (stream, truth) = synth_generate(&scene_cfg)?;
        let dur_us = (s.duration_ms * 1000.0) as u64;
        for f in 0..s.frames {
            let t0 = dur_us * f as u64 / s.frames as u64;
            let t1 = dur_us * (f + 1) as u64 / s.frames as u64;
            let frame = stack_events(&stream, (t0, t1), cfg.data.bins, h, w)?;
            let anns = scale_annotations(
                &truth[f].1,
                (s.width as f64, s.height as f64),
                (w as f64, h as f64),
            );
            samples.push(Sample { frame, annotations: anns });
        }
    }
    Ok(Dataset { samples, bins: cfg.data.bins, h, w, clip: cfg.data.clip })
}

/// Builds the split from event files plus an annotation JSON keyed by file
/// stem; each file contributes one whole-stream sample.
pub fn build_file_dataset(cfg: &RunConfig, split: Split, base: &Path) -> Result<Dataset> {
    let files = &cfg.data.files;
    let (w, h) = (cfg.data.resolution[0], cfg.data.resolution[1]);
    let format: EventFormat = files.format.parse()?;
    let ann_path = base.join(&files.annotations);
    let all_anns = load_annotations(&ann_path)?;
    let lookup: std::collections::BTreeMap<&str, &Vec<Annotation>> =
        all_anns.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let eval_start = files.events.len().saturating_sub(files.eval_count);
    let range = match split {
        Split::Train => 0..eval_start,
        Split::Eval => eval_start..files.events.len(),
    };
    let mut samples = Vec::new();
    for idx in range {
        let path = base.join(&files.events[idx]);
        let geometry = files.geometry.map(|g| (g[0], g[1]));
        let stream = load_events(&path, format, geometry)?;
        let t0 = stream.events.first().map(|e| e.t).unwrap_or(0);
        let t1 = stream.events.last().map(|e| e.t + 1).unwrap_or(1);
        let frame = stack_events(&stream, (t0, t1), cfg.data.bins, h, w)?;
        let stem = Path::new(&files.events[idx])
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_string();
        let anns = lookup
            .get(stem.as_str())
            .map(|a| {
                scale_annotations(
                    a,
                    (stream.width as f64, stream.height as f64),
                    (w as f64, h as f64),
                )
            })
            .unwrap_or_default();
        samples.push(Sample { frame, annotations: anns });
    }
    Ok(Dataset { samples, bins: cfg.data.bins, h, w, clip: cfg.data.clip })
}

pub fn build_dataset(cfg: &RunConfig, split: Split, base: &Path) -> Result<Dataset> {
    match cfg.data.source.as_str() {
        "files" => build_file_dataset(cfg, split, base),
        _ => build_synthetic_dataset(cfg, split),
    }
}

pub fn detector_config(cfg: &RunConfig) -> DetectorConfig {
    DetectorConfig {
        backbone: cfg.backbone_config(),
        head_dim: cfg.model.head_dim,
        classes: cfg.data.classes,
    }
}

/// Per-step seed: reproducing a step only needs the config seed and the step
/// index (reported in non-finite-loss diagnostics).
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn batch_tensor<T: Scalar>(ds: &Dataset, indices: &[usize]) -> Result<crate::tensor::Tensor<T>> {
    let frames: Vec<EventFrame> = indices.iter().map(|&i| ds.samples[i].frame.clone()).collect();
    frames_to_batch(&frames, ds.clip)
}

pub struct TrainOutcome {
    pub final_loss: Option<f64>,
    pub final_eval: Option<MapMetrics>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// JSON object for a metrics row or an eval report; NaN per-class entries
/// become nulls.
pub fn metrics_json(m: &MapMetrics) -> serde_json::Value {
    serde_json::json!({
        "map_50_95": m.map_50_95,
        "map_50": m.map_50,
        "map_75": m.map_75,
        "precision": m.precision,
        "recall": m.recall,
        "per_class": m
            .per_class
            .iter()
            .map(|v| if v.is_nan() {
                serde_json::Value::Null
            } else {
                serde_json::json!(v)
            })
            .collect::<Vec<_>>(),
    })
}

/// Evaluates a detector over a dataset in eval (argmax-routing) mode.
pub fn run_eval<T: Scalar>(
    det: &Detector<T>,
    ds: &Dataset,
    k: usize,
    thresholds: &[f64],
    classes: usize,
) -> Result<MapMetrics> {
    if ds.samples.is_empty() {
        return Ok(MapMetrics {
            map_50_95: 0.0,
            map_50: 0.0,
            map_75: 0.0,
            precision: 0.0,
            recall: 0.0,
            per_class: vec![f64::NAN; classes],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval path draws no randomness
    let mut dets: Vec<Vec<ScoredDetection>> = Vec::with_capacity(ds.samples.len());
    let mut gts: Vec<Vec<Annotation>> = Vec::with_capacity(ds.samples.len());
    for chunk in (0..ds.samples.len()).collect::<Vec<_>>().chunks(8) {
        let frames = batch_tensor::<T>(ds, chunk)?;
        dets.extend(det.detect(&frames, k, &mut rng)?);
        gts.extend(chunk.iter().map(|&i| ds.samples[i].annotations.clone()));
    }
    Ok(evaluate_map(&dets, &gts, thresholds, classes))
}

/// Full training run: writes `metrics.jsonl` and `checkpoint.evck` under
/// `out_dir` and returns the final loss/eval summary.
pub fn run_train<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let ckpt_path = out_dir.join("checkpoint.evck");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let det = Detector::<T>::new(detector_config(cfg), &mut init_rng)?;
    let params = det.params();
    let train_ds = build_dataset(cfg, Split::Train, Path::new("."))?;
    let eval_ds = build_dataset(cfg, Split::Eval, Path::new("."))?;
    let config_json = serde_json::to_string(cfg)?;

    let tokens = det.tokens_per_image();
    if cfg.eval.k > tokens {
        return Err(Error::Config(format!(
            "eval.k: {} queries exceed the {tokens} tokens per image",
            cfg.eval.k
        )));
    }

    let mut opt = match cfg.train.optimizer.as_str() {
        "sgdw" => Optimizer::sgdw(cfg.train.lr, cfg.train.weight_decay, cfg.train.momentum),
        _ => Optimizer::adamw(cfg.train.lr, cfg.train.weight_decay),
    };

    let steps = cfg.train.steps;
    let thresholds = cfg.thresholds();
    let weights = LossWeights::default();
    let mut final_loss = None;
    let mut final_eval = None;

    for step in 0..steps {
        let bseed = batch_seed(cfg.train.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(bseed);
        let tau = if steps > 1 {
            let x = step as f64 / (steps - 1) as f64;
            cfg.train.temp_start + (cfg.train.temp_end - cfg.train.temp_start) * x
        } else {
            cfg.train.temp_start
        };
        let indices: Vec<usize> = (0..cfg.train.batch_size)
            .map(|_| rng.gen_range(0..train_ds.samples.len()))
            .collect();
        let frames = batch_tensor::<T>(&train_ds, &indices)?;

        for p in &params {
            p.zero_grad();
        }
        let out = det.forward(&frames, RoutingMode::Train { temperature: tau }, &mut rng)?;
        let mut total = None;
        let (mut bbox_v, mut cls_v) = (0.0f64, 0.0f64);
        for (bi, &si) in indices.iter().enumerate() {
            let one = det.per_image(&out, bi)?;
            let lb = detection_loss(
                &one,
                &train_ds.samples[si].annotations,
                (train_ds.w as f64, train_ds.h as f64),
                &weights,
            )?;
            bbox_v += lb.bbox.data()[0].as_f64();
            cls_v += lb.cls.data()[0].as_f64();
            total = Some(match total {
                None => lb.total,
                Some(acc) => lb.total.add(&acc)?,
            });
        }
        let n = indices.len() as f64;
        let loss = total.expect("non-empty batch").scale(1.0 / n);
        let loss_v = loss.data()[0].as_f64();
        if !loss_v.is_finite() {
            let diag = serde_json::json!({
                "error": "non-finite loss",
                "step": step,
                "batch_seed": bseed,
                "batch_indices": indices,
            });
            writeln!(metrics, "{diag}")?;
            metrics.flush()?;
            return Err(Error::NonFinite(format!(
                "training loss at step {step} (batch_seed {bseed}); see {}",
                metrics_path.display()
            )));
        }
        loss.backward();
        let lr_scale = cosine_schedule(step, steps);
        opt.step(&params, lr_scale)?;
        final_loss = Some(loss_v);

        let log_now = (step + 1) % cfg.train.log_every == 0 || step + 1 == steps;
        let eval_now =
            (cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0) || step + 1 == steps;
        if log_now || eval_now {
            let mut row = serde_json::json!({
                "step": step + 1,
                "loss": loss_v,
                "bbox": bbox_v / n,
                "cls": cls_v / n,
                "lr": cfg.train.lr * lr_scale,
                "temperature": tau,
            });
            if eval_now {
                let m = run_eval(&det, &eval_ds, cfg.eval.k, &thresholds, cfg.data.classes)?;
                row.as_object_mut()
                    .expect("row is an object")
                    .insert("eval".into(), metrics_json(&m));
                final_eval = Some(m);
            }
            writeln!(metrics, "{row}")?;
            metrics.flush()?;
        }
    }

    save_checkpoint(&ckpt_path, &config_json, &params)?;
    metrics.flush()?;
    Ok(TrainOutcome { final_loss, final_eval, checkpoint: ckpt_path, metrics: metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig::from_toml(
            r#"
precision = 64
[model]
depths = [1, 0, 0, 0]
channels = [4, 4, 4, 4]
experts = 3
head_dim = 8
[data]
bins = 2
resolution = [32, 32]
classes = 3
[data.synthetic]
width = 32
height = 32
duration_ms = 10.0
frames = 1
train_scenes = 4
eval_scenes = 2
speed_min = 0.2
speed_max = 0.5
[train]
steps = 2
batch_size = 2
eval_every = 0
log_every = 1
[eval]
k = 4
"#,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_dataset_respects_split_and_scaling() {
        let cfg = tiny_cfg();
        let train = build_synthetic_dataset(&cfg, Split::Train).unwrap();
        let eval = build_synthetic_dataset(&cfg, Split::Eval).unwrap();
        assert_eq!(train.samples.len(), 4);
        assert_eq!(eval.samples.len(), 2);
        assert!(train.samples.iter().any(|s| s.frame.total() > 0));
        for s in &train.samples {
            for a in &s.annotations {
                assert!(a.x2 <= 32.0 + 1e-9 && a.y2 <= 32.0 + 1e-9);
            }
        }
        // splits draw disjoint scene seeds: eval[0] differs from train[0]
        assert_ne!(train.samples[0].frame.counts, eval.samples[0].frame.counts);
    }

    #[test]
    fn train_zero_steps_writes_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.train.steps = 0;
        let out = run_train::<f64>(&cfg, dir.path()).unwrap();
        assert!(out.checkpoint.exists());
        assert!(out.final_loss.is_none());
        let metrics = std::fs::read_to_string(&out.metrics).unwrap();
        assert!(metrics.is_empty());
        let ck = crate::model::load_checkpoint(&out.checkpoint).unwrap();
        assert!(!ck.entries.is_empty());
    }

    #[test]
    fn train_is_deterministic_at_f64() {
        let cfg = tiny_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run_train::<f64>(&cfg, d1.path()).unwrap();
        let b = run_train::<f64>(&cfg, d2.path()).unwrap();
        assert_eq!(a.final_loss, b.final_loss);
        let ma = std::fs::read_to_string(&a.metrics).unwrap();
        let mb = std::fs::read_to_string(&b.metrics).unwrap();
        assert_eq!(ma, mb);
        let ca = std::fs::read(&a.checkpoint).unwrap();
        let cb = std::fs::read(&b.checkpoint).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn eval_zero_fills_empty_dataset() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = Detector::<f64>::new(detector_config(&cfg), &mut rng).unwrap();
        let empty = Dataset { samples: vec![], bins: 2, h: 32, w: 32, clip: 255 };
        let m = run_eval(&det, &empty, 4, &crate::detect::coco_thresholds(), 3).unwrap();
        assert_eq!(m.map_50_95, 0.0);
        assert!(m.per_class.iter().all(|v| v.is_nan()));
    }
}
