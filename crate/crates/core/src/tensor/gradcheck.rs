//! Central-difference gradient verification. Always runs at f64; the step is
//! 1e-5 and the pass bar is a relative error below 1e-4.

use super::{Parameter, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Where the worst error occurred, e.g. `weight[3]`.
    pub worst_at: String,
    pub pass: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<34} {} max_rel_err {:.3e} at {}",
            self.name,
            if self.pass { "ok  " } else { "FAIL" },
            self.max_rel_err,
            self.worst_at
        )
    }
}

/// Compare analytic gradients of `f` against central differences for every
/// element of every input. `f` must rebuild its graph from the inputs'
/// current values on each call.
pub fn check(
    name: &str,
    inputs: &[&Parameter<f64>],
    f: impl Fn() -> Tensor<f64>,
) -> CheckReport {
    for p in inputs {
        p.zero_grad();
    }
    let loss = f();
    assert_eq!(loss.numel(), 1, "gradcheck loss must be scalar");
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst_at = String::from("-");
    for (pi, p) in inputs.iter().enumerate() {
        let base = p.data();
        for j in 0..base.len() {
            let mut up = base.clone();
            up[j] += FD_STEP;
            p.set_data(up);
            let lp = f().item();
            let mut dn = base.clone();
            dn[j] -= FD_STEP;
            p.set_data(dn);
            let lm = f().item();
            p.set_data(base.clone());
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst_at = format!("{}[{}]", p.name(), j);
            }
        }
        p.zero_grad();
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        worst_at,
        pass: max_rel < GRAD_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BackwardFn;

    #[test]
    fn passes_on_correct_gradient() {
        let x = Parameter::<f64>::new("x", vec![0.4, -1.2, 2.0], &[3]);
        let r = check("sigmoid_mul", &[&x], || {
            let t = x.tensor();
            t.sigmoid().mul(&t).unwrap().sum_all()
        });
        assert!(r.pass, "{r}");
    }

    #[test]
    fn catches_a_corrupted_gradient() {
        // An op whose backward is deliberately off by 10%: the harness must
        // flag it, proving it can detect wrong gradients.
        fn bad_double(x: &Tensor<f64>) -> Tensor<f64> {
            let y: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
            let backward: BackwardFn<f64> = Box::new(move |g| {
                vec![Some(g.iter().map(|v| 2.2 * v).collect())]
            });
            Tensor::from_op(y, x.shape().to_vec(), vec![x.clone()], backward)
        }
        let x = Parameter::<f64>::new("x", vec![1.0, 2.0], &[2]);
        let r = check("corrupted", &[&x], || bad_double(&x.tensor()).sum_all());
        assert!(!r.pass, "corrupted gradient slipped through: {r}");
    }

    #[test]
    fn restores_input_values() {
        let x = Parameter::<f64>::new("x", vec![0.7, -0.3], &[2]);
        let before = x.data();
        let _ = check("exp", &[&x], || x.tensor().exp().sum_all());
        assert_eq!(x.data(), before);
    }
}
