//! Full detector: backbone stages feed multi-scale query tokens (strides 8,
//! 16, 32) through per-stage linear necks with sinusoidal position encoding
//! into the detection head. Also the checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::backbone::{Backbone, BackboneConfig, RoutingMode};
use crate::detect::{decode_detections, DetectHead, HeadOutput, ScoredDetection};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// Stages whose outputs become query tokens (0-indexed; strides 8, 16, 32).
pub const TOKEN_STAGES: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub head_dim: usize,
    pub classes: usize,
}

/// Fixed 2D sinusoidal position encoding for an `h x w` grid, one row per
/// token in row-major order; the first half of each vector encodes y, the
/// second half x.
pub fn sinusoidal_posenc<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    assert!(dim % 4 == 0, "position encoding dim must be divisible by 4");
    let half = dim / 2;
    let mut data = vec![0.0f64; h * w * dim];
    let two_pi = 2.0 * std::f64::consts::PI;
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * dim;
            for axis in 0..2 {
                let pos = if axis == 0 {
                    two_pi * (y as f64 + 0.5) / h as f64
                } else {
                    two_pi * (x as f64 + 0.5) / w as f64
                };
                for i in 0..half {
                    let t = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    let v = if i % 2 == 0 { (pos / t).sin() } else { (pos / t).cos() };
                    data[row + axis * half + i] = v;
                }
            }
        }
    }
    Tensor::from_f64_slice(&data, &[h * w, dim])
}

pub struct Detector<T: Scalar> {
    pub cfg: DetectorConfig,
    pub backbone: Backbone<T>,
    /// Per token stage: linear neck (weight `[C_s, D]`, bias `[D]`).
    necks: Vec<(Parameter<T>, Parameter<T>)>,
    /// Per token stage: constant position encoding `[h_s*w_s, D]`.
    posenc: Vec<Tensor<T>>,
    pub head: DetectHead<T>,
    /// Token-grid shape per token stage.
    grids: Vec<(usize, usize)>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: DetectorConfig, rng: &mut dyn RngCore) -> Result<Self> {
        if cfg.head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model.head_dim: must be divisible by 4, got {}",
                cfg.head_dim
            )));
        }
        let backbone = Backbone::new(cfg.backbone.clone(), rng)?;
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let (ih, iw) = cfg.backbone.input_hw;
        let mut necks = Vec::new();
        let mut posenc = Vec::new();
        let mut grids = Vec::new();
        for &s in TOKEN_STAGES.iter() {
            let c = cfg.backbone.channels[s];
            let d = cfg.head_dim;
            let w: Vec<f64> = (0..c * d).map(|_| dist.sample(rng)).collect();
            necks.push((
                Parameter::from_f64(&format!("neck{s}.w"), &w, &[c, d]),
                Parameter::from_f64(&format!("neck{s}.b"), &vec![0.0; d], &[d]),
            ));
            let (h, w) = (ih >> (2 + s), iw >> (2 + s));
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "data.resolution: stage {s} token grid is empty for input {iw}x{ih}"
                )));
            }
            posenc.push(sinusoidal_posenc(h, w, d));
            grids.push((h, w));
        }
        let head = DetectHead::new(cfg.head_dim, cfg.classes, rng);
        Ok(Detector { cfg, backbone, necks, posenc, head, grids })
    }

    /// Query tokens per image.
    pub fn tokens_per_image(&self) -> usize {
        self.grids.iter().map(|(h, w)| h * w).sum()
    }

    /// Grid position (stage, y, x) of each query token, in token order.
    pub fn token_positions(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.tokens_per_image());
        for (si, &(h, w)) in self.grids.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    out.push((TOKEN_STAGES[si], y, x));
                }
            }
        }
        out
    }

    /// Runs the backbone and head over a `[N, C, H, W]` batch. The head
    /// output rows are image-major: rows `i*T..(i+1)*T` belong to image `i`,
    /// where `T` is `tokens_per_image()`.
    pub fn forward(
        &self,
        frames: &Tensor<T>,
        mode: RoutingMode,
        rng: &mut dyn RngCore,
    ) -> Result<HeadOutput<T>> {
        let n = frames.shape()[0];
        let stages = self.backbone.forward(frames, mode, rng)?;
        // project each token stage and append per-stage token blocks
        let mut blocks = Vec::new();
        let mut hw_sizes = Vec::new();
        for (si, &s) in TOKEN_STAGES.iter().enumerate() {
            let fmap = &stages[s];
            let hw = fmap.shape()[2] * fmap.shape()[3];
            let toks = fmap.nchw_to_tokens()?; // [n*hw, C_s]
            let (w, b) = &self.necks[si];
            let proj = toks.matmul(&w.tensor())?.add(&b.tensor())?;
            let tiled: Vec<usize> = (0..n * hw).map(|r| r % hw).collect();
            let pe = self.posenc[si].gather_rows(&tiled)?;
            blocks.push(proj.add(&pe)?);
            hw_sizes.push(hw);
        }
        let stacked = Tensor::concat_rows(&blocks)?;
        // reorder from stage-major to image-major rows
        let t_per = self.tokens_per_image();
        let mut perm = Vec::with_capacity(n * t_per);
        for img in 0..n {
            let mut base = 0usize;
            for &hw in &hw_sizes {
                for k in 0..hw {
                    perm.push(base + img * hw + k);
                }
                base += n * hw;
            }
        }
        let tokens = stacked.gather_rows(&perm)?;
        self.head.forward(&tokens)
    }

    /// Slices one image's rows out of a batched head output, preserving the
    /// autodiff graph.
    pub fn per_image<'a>(&self, out: &'a HeadOutput<T>, img: usize) -> Result<HeadOutput<T>> {
        let t = self.tokens_per_image();
        let rows: Vec<usize> = (img * t..(img + 1) * t).collect();
        Ok(HeadOutput {
            boxes: out.boxes.gather_rows(&rows)?,
            cls_logits: out.cls_logits.gather_rows(&rows)?,
        })
    }

    /// Deterministic eval-mode detection: argmax routing, top-`k` query
    /// selection per image, decoded to pixel coordinates.
    pub fn detect(
        &self,
        frames: &Tensor<T>,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<ScoredDetection>>> {
        let n = frames.shape()[0];
        let (h, w) = self.cfg.backbone.input_hw;
        let out = self.forward(frames, RoutingMode::Eval, rng)?;
        let mut per_image = Vec::with_capacity(n);
        for img in 0..n {
            let one = self.per_image(&out, img)?;
            let scores = one.cls_logits.sigmoid();
            let picked = crate::detect::iou_query_select(&scores, k)?;
            let sel = HeadOutput {
                boxes: one.boxes.gather_rows(&picked)?,
                cls_logits: one.cls_logits.gather_rows(&picked)?,
            };
            per_image.push(decode_detections(&sel, w as f64, h as f64));
        }
        Ok(per_image)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.backbone.params();
        for (w, b) in &self.necks {
            out.push(w);
            out.push(b);
        }
        out.extend(self.head.params());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

// ---- checkpoints ----------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"EVCK";
const CKPT_VERSION: u8 = 1;

/// Writes `config_json` (an architecture echo) and every parameter, as f64,
/// in registry order. The format is deterministic byte-for-byte.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config_json: &str,
    params: &[&Parameter<T>],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&[CKPT_VERSION])?;
    let cj = config_json.as_bytes();
    f.write_all(&(cj.len() as u32).to_le_bytes())?;
    f.write_all(cj)?;
    f.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name();
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u16).to_le_bytes())?;
        f.write_all(nb)?;
        let shape = p.shape();
        f.write_all(&[shape.len() as u8])?;
        for d in shape.iter() {
            f.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in p.data().iter() {
            f.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub config_json: String,
    pub entries: Vec<CheckpointEntry>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 5];
    f.read_exact(&mut magic).map_err(|e| bad(format!("header: {e}")))?;
    if &magic[..4] != CKPT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    if magic[4] != CKPT_VERSION {
        return Err(bad(format!("unsupported version {}", magic[4])));
    }
    let mut u32b = [0u8; 4];
    f.read_exact(&mut u32b)?;
    let clen = u32::from_le_bytes(u32b) as usize;
    let mut cj = vec![0u8; clen];
    f.read_exact(&mut cj)?;
    let config_json =
        String::from_utf8(cj).map_err(|e| bad(format!("config block: {e}")))?;
    f.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        f.read_exact(&mut u16b)?;
        let nlen = u16::from_le_bytes(u16b) as usize;
        let mut nb = vec![0u8; nlen];
        f.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| bad(format!("name: {e}")))?;
        let mut rank = [0u8; 1];
        f.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            f.read_exact(&mut u32b)?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64b = [0u8; 8];
        for _ in 0..numel {
            f.read_exact(&mut f64b)?;
            data.push(f64::from_le_bytes(f64b));
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(Checkpoint { config_json, entries })
}

/// Copies checkpoint values into the model's parameters; any name or shape
/// difference fails with a full diff.
pub fn apply_checkpoint<T: Scalar>(ckpt: &Checkpoint, params: &[&Parameter<T>]) -> Result<()> {
    let mut diffs = Vec::new();
    let by_name: std::collections::BTreeMap<&str, &CheckpointEntry> =
        ckpt.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for p in params {
        match by_name.get(p.name()) {
            None => diffs.push(format!("missing from checkpoint: {}", p.name())),
            Some(e) if e.shape != p.shape() => diffs.push(format!(
                "{}: model {:?} vs checkpoint {:?}",
                p.name(),
                p.shape(),
                e.shape
            )),
            Some(_) => {}
        }
    }
    let model_names: std::collections::BTreeSet<&str> =
        params.iter().map(|p| p.name()).collect();
    for e in &ckpt.entries {
        if !model_names.contains(e.name.as_str()) {
            diffs.push(format!("unexpected in checkpoint: {}", e.name));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch:\n  {}",
            diffs.join("\n  ")
        )));
    }
    for p in params {
        let e = by_name[p.name()];
        p.set_data(e.data.iter().map(|v| T::from_f64(*v)).collect());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::{HcoConfig, KMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> DetectorConfig {
        DetectorConfig {
            backbone: BackboneConfig {
                in_channels: 4,
                input_hw: (64, 64),
                depths: [1, 1, 1, 1],
                channels: [8, 8, 16, 16],
                num_experts: 3,
                hco: HcoConfig { t: 1.0, k_mode: KMode::PredictedFromFes },
                window: None,
            },
            head_dim: 16,
            classes: 3,
        }
    }

    #[test]
    fn forward_emits_image_major_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = Detector::<f32>::new(toy_config(), &mut rng).unwrap();
        assert_eq!(det.tokens_per_image(), 64 + 16 + 4);
        let frames = Tensor::<f32>::full(&[2, 4, 64, 64], 0.1);
        let out = det.forward(&frames, RoutingMode::Eval, &mut rng).unwrap();
        assert_eq!(out.boxes.shape(), &[2 * 84, 4]);
        assert_eq!(out.cls_logits.shape(), &[2 * 84, 3]);
        // identical input images -> identical per-image rows
        let a = det.per_image(&out, 0).unwrap();
        let b = det.per_image(&out, 1).unwrap();
        assert_eq!(a.boxes.data(), b.boxes.data());
        assert_eq!(a.cls_logits.data(), b.cls_logits.data());
        let positions = det.token_positions();
        assert_eq!(positions.len(), 84);
        assert_eq!(positions[0], (1, 0, 0));
        assert_eq!(positions[83], (3, 1, 1));
    }

    #[test]
    fn posenc_distinguishes_positions_and_repeats() {
        let pe = sinusoidal_posenc::<f64>(4, 4, 16);
        assert_eq!(pe.shape(), &[16, 16]);
        let d = pe.data();
        assert_ne!(d[0..16], d[16..32], "neighboring tokens must differ");
        // same x, different y differs too
        assert_ne!(d[0..16], d[4 * 16..5 * 16]);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_diff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.evck");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = Detector::<f64>::new(toy_config(), &mut rng).unwrap();
        save_checkpoint(&path, "{\"arch\":\"toy\"}", &det.params()).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let det2 = Detector::<f64>::new(toy_config(), &mut rng2).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config_json, "{\"arch\":\"toy\"}");
        apply_checkpoint(&ck, &det2.params()).unwrap();
        for (a, b) in det.params().iter().zip(det2.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.data(), b.data());
        }

        // architecture drift -> named shape diff
        let mut other = toy_config();
        other.backbone.channels = [8, 8, 16, 32];
        let det3 = Detector::<f64>::new(other, &mut rng2).unwrap();
        let err = apply_checkpoint(&ck, &det3.params()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("architecture mismatch"), "{msg}");
        assert!(msg.contains("vs checkpoint"), "{msg}");
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.evck");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn detect_selects_k_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let det = Detector::<f32>::new(toy_config(), &mut rng).unwrap();
        let frames = Tensor::<f32>::full(&[1, 4, 64, 64], 0.2);
        let dets = det.detect(&frames, 30, &mut rng).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].len(), 30);
        // zero-init head: every box decodes to the centered half-size box
        assert!((dets[0][0].score - 0.5).abs() < 1e-6);
        let err = det.detect(&frames, 85, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
