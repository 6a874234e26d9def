//! Mixture-of-experts backbone: policy-routed heat-conduction layers inside
//! residual blocks, a stem embedding, stage downsampling, and the four-stage
//! feature pyramid that feeds the detection head.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::heat::{self, HcoConfig, KMode};
use crate::scalar::Scalar;
use crate::tensor::{PadMode, Parameter, Tensor};
use crate::transforms::TransformKind;

/// Fixed expert order; `num_experts = n` enables the first `n`.
pub const EXPERT_ORDER: [TransformKind; 3] =
    [TransformKind::Dct, TransformKind::Dft, TransformKind::Haar];

pub fn enabled_experts(n: usize) -> Result<&'static [TransformKind]> {
    if (1..=3).contains(&n) {
        Ok(&EXPERT_ORDER[..n])
    } else {
        Err(Error::Config(format!("num_experts must be 1, 2, or 3, got {n}")))
    }
}

/// Expert-mixture weights for one batch: rows sum to 1; hard rows are one-hot.
#[derive(Clone, Debug)]
pub struct ExpertRoute<T: Scalar> {
    pub weights: Tensor<T>,
    pub hard: bool,
}

/// Softmax of Gumbel-perturbed logits at the given temperature. `hard` adds a
/// straight-through one-hot on top (forward one-hot, backward soft). With a
/// fixed rng the output is deterministic.
pub fn gumbel_softmax<T: Scalar>(
    logits: &Tensor<T>,
    temperature: f64,
    hard: bool,
    rng: &mut dyn RngCore,
) -> Result<ExpertRoute<T>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "gumbel-softmax temperature must be > 0, got {temperature}"
        )));
    }
    if logits.rank() != 2 {
        return Err(Error::invalid(
            "gumbel_softmax",
            format!("logits must be [N, E], got {:?}", logits.shape()),
        ));
    }
    let noise: Vec<f64> = (0..logits.numel())
        .map(|_| {
            let u = rand::Rng::gen::<f64>(rng).clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    let g = Tensor::<T>::from_f64_slice(&noise, logits.shape());
    let soft = logits.add(&g)?.scale(1.0 / temperature).softmax_last();
    let weights = if hard { soft.straight_through_onehot()? } else { soft };
    Ok(ExpertRoute { weights, hard })
}

/// Policy logits: global-average-pool over space, then a linear map C -> E.
/// `w` is `[C, E]`, `b` is `[E]`.
pub fn policy_score<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shapes("policy_score", x.shape(), w.shape()));
    }
    x.mean_hw()?.matmul(w)?.add(b)
}

/// How a forward pass routes experts.
#[derive(Clone, Copy, Debug)]
pub enum RoutingMode {
    /// Hard straight-through Gumbel-Softmax sampling (training).
    Train { temperature: f64 },
    /// Soft mixture without the straight-through one-hot (gradient checking).
    Soft { temperature: f64 },
    /// Deterministic argmax of the policy logits, no sampling (evaluation).
    Eval,
}

/// Where a layer's diffusivity map comes from (owns any parameters).
#[derive(Debug)]
pub enum KSource<T: Scalar> {
    Fixed(f64),
    /// Raw scalar passed through softplus, broadcast over the map.
    LearnableScalar(Parameter<T>),
    /// Linear projection of the stage's frequency embeddings.
    Predicted { weight: Parameter<T>, bias: Parameter<T> },
}

fn normal_vec(rng: &mut dyn RngCore, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// `[N,C,H,W] -> [N*nh*nw, C, s, s]`: cut the spatial map into s-by-s tiles,
/// batching the tiles so the global transforms operate per tile.
fn window_partition<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "window size {s} does not divide feature map {h}x{w}"
        )));
    }
    let (nh, nw) = (h / s, w / s);
    let mut perm = Vec::with_capacity(n * c * h * w);
    for bn in 0..n {
        for by in 0..nh {
            for bx in 0..nw {
                for ch in 0..c {
                    for iy in 0..s {
                        for ix in 0..s {
                            perm.push(((bn * c + ch) * h + by * s + iy) * w + bx * s + ix);
                        }
                    }
                }
            }
        }
    }
    Ok(x.reshape(&[n * c * h * w, 1])
        .gather_rows(&perm)?
        .reshape(&[n * nh * nw, c, s, s]))
}

/// Inverse of [`window_partition`].
fn window_merge<T: Scalar>(
    tiles: &Tensor<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let s = tiles.shape()[2];
    let (nh, nw) = (h / s, w / s);
    let mut perm = Vec::with_capacity(n * c * h * w);
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (by, iy) = (y / s, y % s);
                    let (bx, ix) = (x / s, x % s);
                    perm.push((((bn * nh + by) * nw + bx) * c + ch) * s * s + iy * s + ix);
                }
            }
        }
    }
    Ok(tiles
        .reshape(&[n * c * h * w, 1])
        .gather_rows(&perm)?
        .reshape(&[n, c, h, w]))
}

/// One routed heat-conduction layer:
/// `y = x + proj(hco(dwconv(norm(x))))`, then `y = y + mlp(norm(y))`.
pub struct MhcoLayer<T: Scalar> {
    experts: &'static [TransformKind],
    t: f64,
    window: Option<usize>,
    norm1_g: Parameter<T>,
    norm1_b: Parameter<T>,
    dw_w: Parameter<T>,
    dw_b: Parameter<T>,
    policy_w: Parameter<T>,
    policy_b: Parameter<T>,
    k_source: KSource<T>,
    proj_w: Parameter<T>,
    proj_b: Parameter<T>,
    norm2_g: Parameter<T>,
    norm2_b: Parameter<T>,
    mlp_w1: Parameter<T>,
    mlp_b1: Parameter<T>,
    mlp_w2: Parameter<T>,
    mlp_b2: Parameter<T>,
}

impl<T: Scalar> MhcoLayer<T> {
    pub fn new(
        prefix: &str,
        channels: usize,
        hco: HcoConfig,
        num_experts: usize,
        window: Option<usize>,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let experts = enabled_experts(num_experts)?;
        let c = channels;
        let e = experts.len();
        let hidden = 4 * c;
        let k_source = match hco.k_mode {
            KMode::Fixed(v) => {
                if v < 0.0 {
                    return Err(Error::Config(format!("fixed diffusivity must be >= 0, got {v}")));
                }
                KSource::Fixed(v)
            }
            KMode::LearnableScalar => KSource::LearnableScalar(Parameter::from_f64(
                format!("{prefix}.k_raw"),
                &[0.0],
                &[1],
            )),
            KMode::PredictedFromFes => KSource::Predicted {
                weight: Parameter::from_f64(
                    format!("{prefix}.kproj.w"),
                    &normal_vec(rng, c, 0.02),
                    &[c],
                ),
                bias: Parameter::from_f64(format!("{prefix}.kproj.b"), &[0.0], &[1]),
            },
        };
        Ok(MhcoLayer {
            experts,
            t: hco.t,
            window,
            norm1_g: Parameter::from_f64(format!("{prefix}.norm1.g"), &vec![1.0; c], &[c]),
            norm1_b: Parameter::from_f64(format!("{prefix}.norm1.b"), &vec![0.0; c], &[c]),
            dw_w: Parameter::from_f64(
                format!("{prefix}.dw.w"),
                &normal_vec(rng, c * 9, 0.02),
                &[c, 3, 3],
            ),
            dw_b: Parameter::from_f64(format!("{prefix}.dw.b"), &vec![0.0; c], &[c]),
            policy_w: Parameter::from_f64(
                format!("{prefix}.policy.w"),
                &normal_vec(rng, c * e, 0.02),
                &[c, e],
            ),
            policy_b: Parameter::from_f64(format!("{prefix}.policy.b"), &vec![0.0; e], &[e]),
            k_source,
            proj_w: Parameter::from_f64(
                format!("{prefix}.proj.w"),
                &normal_vec(rng, c * c, 0.02),
                &[c, c, 1, 1],
            ),
            proj_b: Parameter::from_f64(format!("{prefix}.proj.b"), &vec![0.0; c], &[c]),
            norm2_g: Parameter::from_f64(format!("{prefix}.norm2.g"), &vec![1.0; c], &[c]),
            norm2_b: Parameter::from_f64(format!("{prefix}.norm2.b"), &vec![0.0; c], &[c]),
            mlp_w1: Parameter::from_f64(
                format!("{prefix}.mlp.w1"),
                &normal_vec(rng, hidden * c, 0.02),
                &[hidden, c, 1, 1],
            ),
            mlp_b1: Parameter::from_f64(format!("{prefix}.mlp.b1"), &vec![0.0; hidden], &[hidden]),
            mlp_w2: Parameter::from_f64(
                format!("{prefix}.mlp.w2"),
                &normal_vec(rng, c * hidden, 0.02),
                &[c, hidden, 1, 1],
            ),
            mlp_b2: Parameter::from_f64(format!("{prefix}.mlp.b2"), &vec![0.0; c], &[c]),
        })
    }

    /// Diffusivity map for this layer at the given frequency-map extents.
    fn k_map(&self, fes: Option<&Tensor<T>>, fh: usize, fw: usize) -> Result<Tensor<T>> {
        match &self.k_source {
            KSource::Fixed(v) => Ok(Tensor::full(&[fh, fw], T::from_f64(*v))),
            KSource::LearnableScalar(p) => {
                let ones = Tensor::full(&[fh, fw], T::one());
                p.tensor().softplus().mul(&ones)
            }
            KSource::Predicted { weight, bias } => {
                let fes = fes.ok_or_else(|| {
                    Error::Config("layer predicts k from FEs but the stage has none".into())
                })?;
                heat::predict_diffusivity(fes, &weight.tensor(), &bias.tensor())
            }
        }
    }

    /// One expert on the (possibly tiled) feature map. Haar on non-power-of-
    /// two extents zero-pads right/bottom and crops after the inverse; the
    /// diffusivity map is zero-padded alike, so the padded frequency band
    /// passes through unattenuated.
    fn apply_expert(
        &self,
        z: &Tensor<T>,
        kind: TransformKind,
        k: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let r = z.rank();
        let (h, w) = (z.shape()[r - 2], z.shape()[r - 1]);
        if kind == TransformKind::Haar && (!is_pow2(h) || !is_pow2(w)) {
            let (hp, wp) = (next_pow2(h), next_pow2(w));
            let zp = z.pad2d(0, hp - h, 0, wp - w, PadMode::Zero)?;
            let kp = k.pad2d(0, hp - h, 0, wp - w, PadMode::Zero)?;
            heat::hco_apply(&zp, kind, &kp, self.t)?.crop2d(0, 0, h, w)
        } else {
            heat::hco_apply(z, kind, k, self.t)
        }
    }

    /// Run every enabled expert and mix with the route weights.
    fn mix_all_experts(&self, z: &Tensor<T>, k: &Tensor<T>, route: &ExpertRoute<T>) -> Result<Tensor<T>> {
        let outs: Vec<Tensor<T>> = self
            .experts
            .iter()
            .map(|&kind| self.apply_expert(z, kind, k))
            .collect::<Result<_>>()?;
        Tensor::route_combine(&route.weights, &outs)
    }

    /// Evaluation path: each sample runs only its argmax expert. Samples are
    /// grouped per expert, processed as sub-batches, and restitched.
    fn mix_argmax(&self, z: &Tensor<T>, k: &Tensor<T>, logits: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = z.shape().to_vec();
        let (n, e) = (logits.shape()[0], logits.shape()[1]);
        let ld = logits.data();
        let pick: Vec<usize> = (0..n)
            .map(|r| {
                let row = &ld[r * e..(r + 1) * e];
                let mut best = 0;
                for j in 1..e {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let first = pick[0];
        if pick.iter().all(|&p| p == first) {
            return self.apply_expert(z, self.experts[first], k);
        }
        let per_sample = z.numel() / n;
        let flat = z.reshape(&[n, per_sample]);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); e];
        for (i, &p) in pick.iter().enumerate() {
            groups[p].push(i);
        }
        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (ei, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let mut sub_shape = sh.clone();
            sub_shape[0] = idx.len();
            let sub = flat.gather_rows(idx)?.reshape(&sub_shape);
            let out = self.apply_expert(&sub, self.experts[ei], k)?;
            parts.push(out.reshape(&[idx.len(), per_sample]));
            order.extend_from_slice(idx);
        }
        let stacked = Tensor::concat_rows(&parts)?;
        let mut inverse = vec![0usize; n];
        for (pos, &orig) in order.iter().enumerate() {
            inverse[orig] = pos;
        }
        Ok(stacked.gather_rows(&inverse)?.reshape(&sh))
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        fes: Option<&Tensor<T>>,
        mode: RoutingMode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>> {
        let sh = x.shape().to_vec();
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let z = x.layer_norm_channels(&self.norm1_g.tensor(), &self.norm1_b.tensor(), 1e-6)?;
        let logits = policy_score(&z, &self.policy_w.tensor(), &self.policy_b.tensor())?;
        let z = z.depthwise_conv2d(&self.dw_w.tensor(), Some(&self.dw_b.tensor()), 1, 1)?;

        let (fh, fw) = match self.window {
            Some(s) => (s, s),
            None => (h, w),
        };
        let k = self.k_map(fes, fh, fw)?;

        let tiled = match self.window {
            Some(s) => window_partition(&z, s)?,
            None => z,
        };
        let mixed = match mode {
            RoutingMode::Train { temperature } => {
                let route = gumbel_softmax(&logits, temperature, true, rng)?;
                let route = self.expand_route(route, n, tiled.shape()[0])?;
                self.mix_all_experts(&tiled, &k, &route)?
            }
            RoutingMode::Soft { temperature } => {
                let route = gumbel_softmax(&logits, temperature, false, rng)?;
                let route = self.expand_route(route, n, tiled.shape()[0])?;
                self.mix_all_experts(&tiled, &k, &route)?
            }
            RoutingMode::Eval => {
                let expanded = self.expand_logits(&logits, n, tiled.shape()[0]);
                self.mix_argmax(&tiled, &k, &expanded)?
            }
        };
        let hco_out = match self.window {
            Some(_) => window_merge(&mixed, n, c, h, w)?,
            None => mixed,
        };

        let branch = hco_out.conv2d(&self.proj_w.tensor(), Some(&self.proj_b.tensor()), 1, 0)?;
        let y = x.add(&branch)?;
        let z2 = y.layer_norm_channels(&self.norm2_g.tensor(), &self.norm2_b.tensor(), 1e-6)?;
        let m = z2
            .conv2d(&self.mlp_w1.tensor(), Some(&self.mlp_b1.tensor()), 1, 0)?
            .gelu()
            .conv2d(&self.mlp_w2.tensor(), Some(&self.mlp_b2.tensor()), 1, 0)?;
        y.add(&m)
    }

    /// Tiling multiplies the batch axis; each tile inherits its sample's route.
    fn expand_route(&self, route: ExpertRoute<T>, n: usize, rows: usize) -> Result<ExpertRoute<T>> {
        if rows == n {
            return Ok(route);
        }
        let tiles = rows / n;
        let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(tiles)).collect();
        Ok(ExpertRoute { weights: route.weights.gather_rows(&idx)?, hard: route.hard })
    }

    fn expand_logits(&self, logits: &Tensor<T>, n: usize, rows: usize) -> Tensor<T> {
        if rows == n {
            return logits.clone();
        }
        let tiles = rows / n;
        let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(tiles)).collect();
        logits.gather_rows(&idx).expect("logits are rank-2")
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = vec![
            &self.norm1_g,
            &self.norm1_b,
            &self.dw_w,
            &self.dw_b,
            &self.policy_w,
            &self.policy_b,
        ];
        match &self.k_source {
            KSource::Fixed(_) => {}
            KSource::LearnableScalar(s) => p.push(s),
            KSource::Predicted { weight, bias } => {
                p.push(weight);
                p.push(bias);
            }
        }
        p.extend([
            &self.proj_w,
            &self.proj_b,
            &self.norm2_g,
            &self.norm2_b,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]);
        p
    }

    pub fn policy_params(&self) -> [&Parameter<T>; 2] {
        [&self.policy_w, &self.policy_b]
    }
}

/// Event-frame embedding: two stride-2 3x3 convolutions with a nonlinearity
/// between, mapping `[N,C_in,H,W]` to `[N,C1,H/4,W/4]`.
pub struct Stem<T: Scalar> {
    conv1_w: Parameter<T>,
    conv1_b: Parameter<T>,
    conv2_w: Parameter<T>,
    conv2_b: Parameter<T>,
}

impl<T: Scalar> Stem<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut dyn RngCore) -> Self {
        let mid = (out_channels / 2).max(1);
        Stem {
            conv1_w: Parameter::from_f64(
                "stem.conv1.w",
                &normal_vec(rng, mid * in_channels * 9, 0.02),
                &[mid, in_channels, 3, 3],
            ),
            conv1_b: Parameter::from_f64("stem.conv1.b", &vec![0.0; mid], &[mid]),
            conv2_w: Parameter::from_f64(
                "stem.conv2.w",
                &normal_vec(rng, out_channels * mid * 9, 0.02),
                &[out_channels, mid, 3, 3],
            ),
            conv2_b: Parameter::from_f64("stem.conv2.b", &vec![0.0; out_channels], &[out_channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::invalid(
                "stem",
                format!("expected [N,C,H,W] input, got {:?}", x.shape()),
            ));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "stem needs extents divisible by 4, got {h}x{w}"
            )));
        }
        x.conv2d(&self.conv1_w.tensor(), Some(&self.conv1_b.tensor()), 2, 1)?
            .gelu()
            .conv2d(&self.conv2_w.tensor(), Some(&self.conv2_b.tensor()), 2, 1)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
    }
}

/// Stride-2 3x3 convolution between stages.
pub struct Downsample<T: Scalar> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Scalar> Downsample<T> {
    fn new(prefix: &str, cin: usize, cout: usize, rng: &mut dyn RngCore) -> Self {
        Downsample {
            w: Parameter::from_f64(
                format!("{prefix}.down.w"),
                &normal_vec(rng, cout * cin * 9, 0.02),
                &[cout, cin, 3, 3],
            ),
            b: Parameter::from_f64(format!("{prefix}.down.b"), &vec![0.0; cout], &[cout]),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.w.tensor(), Some(&self.b.tensor()), 2, 1)
    }
}

/// Model architecture settings.
#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Input extents; frequency embeddings are sized from these.
    pub input_hw: (usize, usize),
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    pub num_experts: usize,
    pub hco: HcoConfig,
    /// Apply the transforms per s-by-s tile instead of over the full map.
    pub window: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 2,
            input_hw: (640, 640),
            depths: [2, 2, 12, 2],
            channels: [96, 192, 384, 768],
            num_experts: 3,
            hco: HcoConfig::default(),
            window: None,
        }
    }
}

pub struct Stage<T: Scalar> {
    down: Option<Downsample<T>>,
    pub fes: Option<Parameter<T>>,
    pub layers: Vec<MhcoLayer<T>>,
}

/// Four-stage backbone producing features at strides 4, 8, 16, 32.
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub stem: Stem<T>,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, rng: &mut dyn RngCore) -> Result<Self> {
        enabled_experts(cfg.num_experts)?;
        let (ih, iw) = cfg.input_hw;
        if ih % 32 != 0 || iw % 32 != 0 {
            return Err(Error::Config(format!(
                "input extents must be divisible by 32, got {ih}x{iw}"
            )));
        }
        if cfg.hco.t <= 0.0 {
            return Err(Error::Config(format!("diffusion time must be > 0, got {}", cfg.hco.t)));
        }
        if cfg.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be nonzero".into()));
        }
        if let Some(s) = cfg.window {
            if s < 2 {
                return Err(Error::Config(format!("window size must be >= 2, got {s}")));
            }
            if cfg.num_experts == 3 && !is_pow2(s) {
                return Err(Error::Config(format!(
                    "window size must be a power of two when the Haar expert is enabled, got {s}"
                )));
            }
        }
        let stem = Stem::new(cfg.in_channels, cfg.channels[0], rng);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let (sh, sw) = (ih >> (2 + i), iw >> (2 + i));
            if cfg.depths[i] > 0 && (sh == 0 || sw == 0) {
                return Err(Error::Config(format!(
                    "stage {i} feature map vanished at input {ih}x{iw}"
                )));
            }
            let (fh, fw) = match cfg.window {
                Some(s) => {
                    if cfg.depths[i] > 0 && (sh % s != 0 || sw % s != 0) {
                        return Err(Error::Config(format!(
                            "window {s} does not divide stage {i} map {sh}x{sw}"
                        )));
                    }
                    (s, s)
                }
                None => (sh, sw),
            };
            let c = cfg.channels[i];
            let down = if i == 0 {
                None
            } else {
                Some(Downsample::new(&format!("stage{i}"), cfg.channels[i - 1], c, rng))
            };
            let fes = match cfg.hco.k_mode {
                KMode::PredictedFromFes if cfg.depths[i] > 0 => Some(Parameter::from_f64(
                    format!("stage{i}.fes"),
                    &normal_vec(rng, c * fh * fw, 0.02),
                    &[c, fh, fw],
                )),
                _ => None,
            };
            let layers = (0..cfg.depths[i])
                .map(|j| {
                    MhcoLayer::new(
                        &format!("stage{i}.layer{j}"),
                        c,
                        cfg.hco,
                        cfg.num_experts,
                        cfg.window,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, fes, layers });
        }
        Ok(Backbone { cfg, stem, stages })
    }

    /// Per-stage features at strides 4, 8, 16, 32.
    pub fn forward(
        &self,
        frames: &Tensor<T>,
        mode: RoutingMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Tensor<T>>> {
        let mut x = self.stem.forward(frames)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                x = down.forward(&x)?;
            }
            let fes = stage.fes.as_ref().map(|p| p.tensor());
            for layer in &stage.layers {
                x = layer.forward(&x, fes.as_ref(), mode, rng)?;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.stem.params();
        for stage in &self.stages {
            if let Some(d) = &stage.down {
                p.push(&d.w);
                p.push(&d.b);
            }
            if let Some(f) = &stage.fes {
                p.push(f);
            }
            for layer in &stage.layers {
                p.extend(layer.params());
            }
        }
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Human-readable table of parameter names, shapes, and counts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in self.params() {
            s.push_str(&format!("{:<28} {:>16?} {:>10}\n", p.name(), p.shape(), p.numel()));
        }
        s.push_str(&format!("total parameters: {}\n", self.parameter_count()));
        s
    }
}
