//! The gradient gate: a registry of finite-difference checks covering every
//! differentiable op plus end-to-end chains (one MHCO layer, head + loss).
//! All checks run at 64-bit. The straight-through estimator is deliberately
//! biased against finite differences, so it is verified against its contract
//! instead: hard-path gradients must equal soft-path gradients exactly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{gumbel_softmax, policy_score, MhcoLayer, RoutingMode};
use crate::detect::{detection_loss, DetectHead, LossWeights};
use crate::events::Annotation;
use crate::heat::{self, HcoConfig, KMode};
use crate::tensor::gradcheck::{check, CheckReport, GRAD_TOL};
use crate::tensor::{PadMode, Parameter, Tensor};
use crate::transforms::{self, TransformKind};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn param(name: &str, seed: u64, shape: &[usize], lo: f64, hi: f64) -> Parameter<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Parameter::from_f64(name, &data, shape)
}

fn probe(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    Tensor::from_f64_slice(&(0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>(), shape)
}

/// Verifies that the straight-through one-hot forwards a one-hot vector while
/// back-propagating exactly the soft-path gradient.
fn check_straight_through() -> CheckReport {
    let p = param("logits", 41, &[2, 3], -1.0, 1.0);
    let pr = probe(42, &[2, 3]);

    p.zero_grad();
    let soft = p.tensor().softmax_last();
    let hard = soft.straight_through_onehot().unwrap();
    // forward contract: exactly one-hot per row
    let hd = hard.data();
    let mut forward_ok = true;
    for r in 0..2 {
        let row = &hd[r * 3..(r + 1) * 3];
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        forward_ok &= ones == 1 && zeros == 2;
    }
    hard.mul(&pr).unwrap().sum_all().backward();
    let hard_grad = p.grad().unwrap();

    p.zero_grad();
    let soft2 = p.tensor().softmax_last();
    soft2.mul(&pr).unwrap().sum_all().backward();
    let soft_grad = p.grad().unwrap();
    p.zero_grad();

    let mut max_rel = 0.0f64;
    for (a, b) in hard_grad.iter().zip(&soft_grad) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    if !forward_ok {
        max_rel = f64::INFINITY;
    }
    CheckReport {
        name: "straight_through_onehot".into(),
        max_rel_err: max_rel,
        worst_at: "vs soft path".into(),
        pass: max_rel < GRAD_TOL,
    }
}

/// One MHCO layer, soft routing, diffusivity predicted from embeddings.
fn check_mhco_layer() -> CheckReport {
    let mut r = rng(55);
    let hco = HcoConfig { t: 1.0, k_mode: KMode::PredictedFromFes };
    let layer = MhcoLayer::<f64>::new("l0", 4, hco, 3, None, &mut r).unwrap();
    let x = probe(56, &[1, 4, 8, 8]).scale(0.5);
    let fes = param("fes", 57, &[4, 8, 8], -0.05, 0.05);
    let pr = probe(58, &[1, 4, 8, 8]);
    let mut inputs: Vec<&Parameter<f64>> = vec![&fes];
    let all = layer.params();
    // a representative parameter subset keeps the FD sweep under a second
    let wanted = ["l0.norm1_g", "l0.dw_w", "l0.policy_w", "l0.kproj_w", "l0.proj_w", "l0.mlp_b1"];
    for p in all {
        if wanted.contains(&p.name()) {
            inputs.push(p);
        }
    }
    check("mhco_layer_end_to_end", &inputs, || {
        let mut fr = rng(99);
        let y = layer
            .forward(
                &x,
                Some(&fes.tensor()),
                RoutingMode::Soft { temperature: 2.0 },
                &mut fr,
            )
            .unwrap();
        y.mul(&pr).unwrap().sum_all()
    })
}

fn check_head_and_loss() -> CheckReport {
    let mut r = rng(7);
    let d = 6usize;
    let head = DetectHead::<f64>::new(d, 2, &mut r);
    // final-layer class columns stay zero: scores sit at 0.5 where the
    // detached IoU target has no finite-difference footprint
    let mut w3 = vec![0.0; d * 6];
    for (i, v) in w3.iter_mut().enumerate() {
        if i % 6 < 4 {
            *v = r.gen_range(-0.3..0.3);
        }
    }
    let head_params = head.params();
    head_params[0].set_data((0..d * d).map(|_| r.gen_range(-0.5..0.5)).collect());
    head_params[2].set_data((0..d * d).map(|_| r.gen_range(-0.5..0.5)).collect());
    head_params[4].set_data(w3);
    let tokens = Tensor::from_f64_slice(
        &(0..2 * d).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        &[2, d],
    );
    let gt = vec![Annotation { x1: 8.0, y1: 8.0, x2: 38.0, y2: 36.0, cls: 1 }];
    check("head_and_detection_loss", &head_params, || {
        let out = head.forward(&tokens).unwrap();
        detection_loss(&out, &gt, (64.0, 64.0), &LossWeights::default())
            .unwrap()
            .total
    })
}

/// Negative control (test hook): leaks half the dependence through a stale
/// constant so the analytic gradient is knowingly wrong.
fn check_corrupted() -> CheckReport {
    let p = param("corrupt", 1234, &[3], -1.0, 1.0);
    check("corrupted_gradient_negative_control", &[&p], || {
        let stale = Tensor::from_f64_slice(&p.data(), &[3]);
        p.tensor().add(&stale).unwrap().sum_all()
    })
}

/// Runs the whole registry; `include_negative_control` appends the
/// deliberately failing entry used to prove the gate trips.
pub fn run_all(include_negative_control: bool) -> Vec<CheckReport> {
    let mut out: Vec<CheckReport> = Vec::new();

    // elementwise binary ops (operands separated to keep min/max kink-free)
    let a = param("a", 1, &[2, 3], 0.4, 1.6);
    let b = param("b", 2, &[2, 3], 2.0, 3.0);
    let pr = probe(3, &[2, 3]);
    out.push(check("add", &[&a, &b], || {
        a.tensor().add(&b.tensor()).unwrap().mul(&pr).unwrap().sum_all()
    }));
    out.push(check("sub", &[&a, &b], || {
        a.tensor().sub(&b.tensor()).unwrap().mul(&pr).unwrap().sum_all()
    }));
    out.push(check("mul", &[&a, &b], || {
        a.tensor().mul(&b.tensor()).unwrap().mul(&pr).unwrap().sum_all()
    }));
    out.push(check("div", &[&a, &b], || {
        a.tensor().div(&b.tensor()).unwrap().mul(&pr).unwrap().sum_all()
    }));
    out.push(check("minimum", &[&a, &b], || {
        a.tensor().minimum(&b.tensor()).unwrap().mul(&pr).unwrap().sum_all()
    }));
    out.push(check("maximum", &[&a, &b], || {
        a.tensor().maximum(&b.tensor()).unwrap().mul(&pr).unwrap().sum_all()
    }));

    // unary ops
    let u = param("u", 4, &[2, 3], 0.3, 1.5);
    out.push(check("neg_scale_add_scalar", &[&u], || {
        u.tensor().neg().scale(0.7).add_scalar(0.2).mul(&pr).unwrap().sum_all()
    }));
    out.push(check("exp", &[&u], || u.tensor().exp().mul(&pr).unwrap().sum_all()));
    out.push(check("ln", &[&u], || u.tensor().ln().mul(&pr).unwrap().sum_all()));
    out.push(check("abs", &[&u], || u.tensor().abs().mul(&pr).unwrap().sum_all()));
    out.push(check("sigmoid", &[&u], || u.tensor().sigmoid().mul(&pr).unwrap().sum_all()));
    out.push(check("gelu", &[&u], || u.tensor().gelu().mul(&pr).unwrap().sum_all()));
    out.push(check("softplus", &[&u], || u.tensor().softplus().mul(&pr).unwrap().sum_all()));
    out.push(check("softmax_last", &[&u], || {
        u.tensor().softmax_last().mul(&pr).unwrap().sum_all()
    }));
    out.push(check("mean_all", &[&u], || u.tensor().mean_all()));
    out.push(check("reshape", &[&u], || {
        u.tensor().reshape(&[3, 2]).mul(&probe(5, &[3, 2])).unwrap().sum_all()
    }));
    out.push(check("bce_with_logits", &[&u], || {
        u.tensor().bce_with_logits(&[0.3; 6]).unwrap().sum_all()
    }));

    // linear algebra and reductions over maps
    let m1 = param("m1", 6, &[2, 3], -1.0, 1.0);
    let m2 = param("m2", 7, &[3, 2], -1.0, 1.0);
    out.push(check("matmul", &[&m1, &m2], || {
        m1.tensor().matmul(&m2.tensor()).unwrap().mul(&probe(8, &[2, 2])).unwrap().sum_all()
    }));
    let x4 = param("x4", 9, &[1, 2, 3, 3], -1.0, 1.0);
    out.push(check("mean_hw", &[&x4], || {
        x4.tensor().mean_hw().unwrap().mul(&probe(10, &[1, 2])).unwrap().sum_all()
    }));

    // convolutions and normalization
    let cw = param("cw", 11, &[2, 2, 3, 3], -0.5, 0.5);
    let cb = param("cb", 12, &[2], -0.2, 0.2);
    out.push(check("conv2d", &[&x4, &cw, &cb], || {
        x4.tensor()
            .conv2d(&cw.tensor(), Some(&cb.tensor()), 1, 1)
            .unwrap()
            .mul(&probe(13, &[1, 2, 3, 3]))
            .unwrap()
            .sum_all()
    }));
    let dw = param("dw", 14, &[2, 3, 3], -0.5, 0.5);
    out.push(check("depthwise_conv2d", &[&x4, &dw, &cb], || {
        x4.tensor()
            .depthwise_conv2d(&dw.tensor(), Some(&cb.tensor()), 1, 1)
            .unwrap()
            .mul(&probe(15, &[1, 2, 3, 3]))
            .unwrap()
            .sum_all()
    }));
    let gamma = param("gamma", 16, &[2], 0.5, 1.5);
    let beta = param("beta", 17, &[2], -0.3, 0.3);
    out.push(check("layer_norm_channels", &[&x4, &gamma, &beta], || {
        x4.tensor()
            .layer_norm_channels(&gamma.tensor(), &beta.tensor(), 1e-6)
            .unwrap()
            .mul(&probe(18, &[1, 2, 3, 3]))
            .unwrap()
            .sum_all()
    }));

    // shape plumbing
    out.push(check("pad2d_zero_crop2d", &[&x4], || {
        x4.tensor()
            .pad2d(1, 1, 1, 1, PadMode::Zero)
            .unwrap()
            .crop2d(1, 1, 3, 3)
            .unwrap()
            .mul(&probe(19, &[1, 2, 3, 3]))
            .unwrap()
            .sum_all()
    }));
    out.push(check("pad2d_replicate", &[&x4], || {
        x4.tensor()
            .pad2d(1, 1, 1, 1, PadMode::Replicate)
            .unwrap()
            .mul(&probe(20, &[1, 2, 5, 5]))
            .unwrap()
            .sum_all()
    }));
    out.push(check("narrow_concat_last", &[&m1], || {
        let left = m1.tensor().narrow_last(0, 1).unwrap();
        let right = m1.tensor().narrow_last(1, 2).unwrap();
        Tensor::concat_last(&[right, left])
            .unwrap()
            .mul(&probe(21, &[2, 3]))
            .unwrap()
            .sum_all()
    }));
    out.push(check("gather_concat_rows", &[&m1], || {
        let g = m1.tensor().gather_rows(&[1, 0, 1]).unwrap();
        Tensor::concat_rows(&[g, m1.tensor()])
            .unwrap()
            .mul(&probe(22, &[5, 3]))
            .unwrap()
            .sum_all()
    }));
    out.push(check("nchw_to_tokens", &[&x4], || {
        x4.tensor().nchw_to_tokens().unwrap().mul(&probe(23, &[9, 2])).unwrap().sum_all()
    }));
    let rw = param("rw", 24, &[2, 2], 0.1, 0.9);
    let e1 = param("e1", 25, &[2, 4], -1.0, 1.0);
    let e2 = param("e2", 26, &[2, 4], -1.0, 1.0);
    out.push(check("route_combine", &[&rw, &e1, &e2], || {
        Tensor::route_combine(&rw.tensor(), &[e1.tensor(), e2.tensor()])
            .unwrap()
            .mul(&probe(27, &[2, 4]))
            .unwrap()
            .sum_all()
    }));

    // transforms: disturb the spectrum, invert, reduce
    let img = param("img", 28, &[6, 6], -1.0, 1.0);
    let spec_probe = probe(29, &[6, 6]);
    out.push(check("dct2_idct2", &[&img], || {
        let s = transforms::dct2(&img.tensor()).mul(&spec_probe).unwrap();
        transforms::idct2(&s).mul(&probe(30, &[6, 6])).unwrap().sum_all()
    }));
    let img8 = param("img8", 49, &[8, 8], -1.0, 1.0);
    let spec_probe8 = probe(50, &[8, 8]);
    out.push(check("haar2_ihaar2", &[&img8], || {
        let s = transforms::haar2(&img8.tensor()).unwrap().mul(&spec_probe8).unwrap();
        transforms::ihaar2(&s).unwrap().mul(&probe(31, &[8, 8])).unwrap().sum_all()
    }));
    out.push(check("dft2_idft2", &[&img], || {
        let s = transforms::dft2(&img.tensor());
        transforms::idft2(&s).unwrap().mul(&probe(32, &[6, 6])).unwrap().sum_all()
    }));

    // heat conduction
    let kraw = param("kraw", 33, &[6, 6], -1.0, 1.0);
    let grid = transforms::FrequencyGrid::new(TransformKind::Dct, 6, 6);
    out.push(check("heat_multiplier", &[&kraw], || {
        let k = kraw.tensor().softplus();
        heat::heat_multiplier(&k, 1.0, &grid).unwrap().mul(&spec_probe).unwrap().sum_all()
    }));
    for kind in [TransformKind::Dct, TransformKind::Dft, TransformKind::Haar] {
        let name = match kind {
            TransformKind::Dct => "hco_apply_dct",
            TransformKind::Dft => "hco_apply_dft",
            TransformKind::Haar => "hco_apply_haar",
        };
        let u0 = param("u0", 34, &[8, 8], -1.0, 1.0);
        let kk = param("kk", 35, &[8, 8], -1.0, 1.0);
        let pr8 = probe(36, &[8, 8]);
        out.push(check(name, &[&u0, &kk], || {
            let k = kk.tensor().softplus();
            heat::hco_apply(&u0.tensor(), kind, &k, 0.7)
                .unwrap()
                .mul(&pr8)
                .unwrap()
                .sum_all()
        }));
    }
    let fes = param("fes", 37, &[3, 4, 4], -0.5, 0.5);
    let kw = param("kw", 38, &[3], -0.5, 0.5);
    let kb = param("kb", 39, &[1], -0.5, 0.5);
    out.push(check("predict_diffusivity", &[&fes, &kw, &kb], || {
        heat::predict_diffusivity(&fes.tensor(), &kw.tensor(), &kb.tensor())
            .unwrap()
            .mul(&probe(40, &[4, 4]))
            .unwrap()
            .sum_all()
    }));

    // routing
    let px = param("px", 43, &[2, 3, 2, 2], -1.0, 1.0);
    let pw = param("pw", 44, &[3, 3], -0.5, 0.5);
    let pb = param("pb", 45, &[3], -0.2, 0.2);
    out.push(check("policy_score", &[&px, &pw, &pb], || {
        policy_score(&px.tensor(), &pw.tensor(), &pb.tensor())
            .unwrap()
            .mul(&probe(46, &[2, 3]))
            .unwrap()
            .sum_all()
    }));
    let gl = param("gl", 47, &[2, 3], -1.0, 1.0);
    out.push(check("gumbel_softmax_soft", &[&gl], || {
        let mut gr = rng(1000);
        let route = gumbel_softmax(&gl.tensor(), 1.3, false, &mut gr).unwrap();
        route.weights.mul(&probe(48, &[2, 3])).unwrap().sum_all()
    }));
    out.push(check_straight_through());

    // end-to-end chains
    out.push(check_mhco_layer());
    out.push(check_head_and_loss());

    if include_negative_control {
        out.push(check_corrupted());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_registry_passes() {
        let reports = run_all(false);
        assert!(reports.len() >= 30, "expected a broad registry, got {}", reports.len());
        for r in &reports {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn negative_control_fails() {
        let reports = run_all(true);
        let c = reports
            .iter()
            .find(|r| r.name == "corrupted_gradient_negative_control")
            .expect("control present");
        assert!(!c.pass, "negative control must fail");
    }
}
