//! Heat-conduction operator: spectral multiplier construction, expert
//! application under DCT/DFT/Haar bases, diffusivity prediction from
//! frequency embeddings, and the finite-difference oracle that certifies the
//! constant-diffusivity case.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{self, raw, FrequencyGrid, TransformKind};

/// How each layer obtains its diffusivity map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KMode {
    Fixed(f64),
    LearnableScalar,
    PredictedFromFes,
}

/// Heat-conduction settings shared by every layer of a model: the diffusion
/// time is fixed (never learned) and constant across training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HcoConfig {
    pub t: f64,
    pub k_mode: KMode,
}

impl Default for HcoConfig {
    fn default() -> Self {
        HcoConfig { t: 1.0, k_mode: KMode::PredictedFromFes }
    }
}

/// Multiplier M(i,j) = exp(-k(i,j) * (vx(i)^2 + vy(j)^2) * t).
///
/// `k` is an H x W map of nonnegative diffusivities over the frequency grid;
/// the result is differentiable with respect to `k`. M(0,0) is exactly 1, so
/// the zero-frequency (mean) component always survives unchanged.
pub fn heat_multiplier<T: Scalar>(
    k: &Tensor<T>,
    t: f64,
    grid: &FrequencyGrid,
) -> Result<Tensor<T>> {
    if k.shape() != [grid.h, grid.w] {
        return Err(Error::shapes("heat_multiplier", k.shape(), &[grid.h, grid.w]));
    }
    if t <= 0.0 {
        return Err(Error::invalid("heat_multiplier", format!("t must be > 0, got {t}")));
    }
    if let Some(neg) = k.data().iter().find(|v| **v < T::zero()) {
        return Err(Error::Validation(format!(
            "diffusivity map has negative element {neg} (softplus construction bug)"
        )));
    }
    let lam = Tensor::<T>::from_f64_slice(&grid.lambda(), &[grid.h, grid.w]);
    Ok(k.mul(&lam)?.scale(-t).exp())
}

/// One heat-conduction expert: transform, attenuate, transform back.
/// `u0` has spatial trailing axes `[.., H, W]` matching `k`'s shape.
///
/// For the DFT expert the diffusivity map is first symmetrized across
/// mirrored frequency bins, k(i,j) <- (k(i,j) + k(-i mod H, -j mod W)) / 2:
/// bins i and H-i carry the same |v| (the grid already reflects this), and a
/// diffusivity that differed between +v and -v would turn the Hermitian
/// spectrum of a real field into a non-Hermitian one. Symmetrizing keeps the
/// output exactly real and the semigroup law exact; constant or already
/// symmetric maps pass through unchanged.
pub fn hco_apply<T: Scalar>(
    u0: &Tensor<T>,
    expert: TransformKind,
    k: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let r = u0.rank();
    if r < 2 || k.rank() != 2 || u0.shape()[r - 2..] != *k.shape() {
        return Err(Error::shapes("hco_apply", u0.shape(), k.shape()));
    }
    let (h, w) = (k.shape()[0], k.shape()[1]);
    let grid = FrequencyGrid::new(expert, h, w);
    let k_eff = match expert {
        TransformKind::Dft => {
            let mut perm = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    perm.push(((h - i) % h) * w + (w - j) % w);
                }
            }
            let mirrored = k.reshape(&[h * w, 1]).gather_rows(&perm)?.reshape(&[h, w]);
            k.add(&mirrored)?.scale(0.5)
        }
        _ => k.clone(),
    };
    let m = heat_multiplier(&k_eff, t, &grid)?;
    match expert {
        TransformKind::Dct => Ok(transforms::idct2(&transforms::dct2(u0).mul(&m)?)),
        TransformKind::Haar => transforms::ihaar2(&transforms::haar2(u0)?.mul(&m)?),
        TransformKind::Dft => transforms::idft2(&transforms::dft2(u0).mul_real(&m)?),
    }
}

/// k = softplus(linear(FEs)): a 1-channel projection of the stage's
/// frequency embeddings. `fes` is `[C, H, W]`, `weight` is `[C]`, `bias`
/// is `[1]`; the result is the `[H, W]` diffusivity map.
pub fn predict_diffusivity<T: Scalar>(
    fes: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if fes.rank() != 3 || weight.rank() != 1 || fes.shape()[0] != weight.shape()[0] {
        return Err(Error::shapes("predict_diffusivity", fes.shape(), weight.shape()));
    }
    if bias.numel() != 1 {
        return Err(Error::invalid(
            "predict_diffusivity",
            format!("bias must be a single element, got shape {:?}", bias.shape()),
        ));
    }
    let (c, h, w) = (fes.shape()[0], fes.shape()[1], fes.shape()[2]);
    let z = weight
        .reshape(&[1, c])
        .matmul(&fes.reshape(&[c, h * w]))?
        .add(bias)?;
    Ok(z.softplus().reshape(&[h, w]))
}

// ---- finite-difference oracle ----------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Zero normal derivative via ghost-cell mirroring; conserves the sum.
    Neumann,
    Periodic,
}

/// Initial condition and discretization for the PDE oracle.
#[derive(Clone, Debug)]
pub struct OracleGrid {
    pub u: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub boundary: Boundary,
    pub dx: f64,
    pub dt_fd: f64,
}

impl OracleGrid {
    pub fn new(u: Vec<f64>, h: usize, w: usize, boundary: Boundary, dx: f64, dt_fd: f64) -> Self {
        assert_eq!(u.len(), h * w, "field length does not match {h}x{w}");
        OracleGrid { u, h, w, boundary, dx, dt_fd }
    }
}

/// Explicit-Euler 5-point integration of u_t = k * laplace(u) from the grid's
/// field to time `t`. The step count is ceil(t / dt_fd) so the integration
/// lands on `t` exactly with a uniform step no larger than `dt_fd`.
pub fn pde_oracle_solve(grid: &OracleGrid, k: f64, t: f64) -> Result<Vec<f64>> {
    let (h, w, dx) = (grid.h, grid.w, grid.dx);
    if !(k > 0.0) || !(t > 0.0) {
        return Err(Error::Config(format!("oracle needs k > 0 and t > 0, got k={k}, t={t}")));
    }
    let stability = dx * dx / (4.0 * k);
    if grid.dt_fd > stability * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "oracle step dt={} violates stability bound dx^2/(4k)={}",
            grid.dt_fd, stability
        )));
    }
    let steps = ((t / grid.dt_fd - 1e-12).ceil() as usize).max(1);
    let dt = t / steps as f64;
    let c = dt * k / (dx * dx);

    let mut u = grid.u.clone();
    let mut next = vec![0.0f64; u.len()];
    let at = |u: &[f64], y: isize, x: isize| -> f64 {
        let (yy, xx) = match grid.boundary {
            Boundary::Neumann => (
                if y < 0 { 0 } else if y >= h as isize { h - 1 } else { y as usize },
                if x < 0 { 0 } else if x >= w as isize { w - 1 } else { x as usize },
            ),
            Boundary::Periodic => (
                ((y % h as isize + h as isize) % h as isize) as usize,
                ((x % w as isize + w as isize) % w as isize) as usize,
            ),
        };
        u[yy * w + xx]
    };
    for _ in 0..steps {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let lap = at(&u, y - 1, x) + at(&u, y + 1, x) + at(&u, y, x - 1)
                    + at(&u, y, x + 1)
                    - 4.0 * u[y as usize * w + x as usize];
                next[y as usize * w + x as usize] = u[y as usize * w + x as usize] + c * lap;
            }
        }
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u)
}

/// Constant-k spectral solution on a raw f64 field (no graph); the exact
/// answer `hco_apply` must reproduce, and the reference the FD oracle
/// converges to.
pub fn spectral_reference(
    u0: &[f64],
    h: usize,
    w: usize,
    kind: TransformKind,
    k: f64,
    t: f64,
) -> Vec<f64> {
    let grid = FrequencyGrid::new(kind, h, w);
    let lam = grid.lambda();
    let fast = h.max(w) > 64;
    match kind {
        TransformKind::Dct => {
            let mut c = raw::dct2(u0, h, w, fast);
            for (cv, l) in c.iter_mut().zip(&lam) {
                *cv *= (-k * l * t).exp();
            }
            raw::idct2(&c, h, w, fast)
        }
        TransformKind::Haar => {
            let mut c = raw::haar2(u0, h, w, fast);
            for (cv, l) in c.iter_mut().zip(&lam) {
                *cv *= (-k * l * t).exp();
            }
            raw::ihaar2(&c, h, w, fast)
        }
        TransformKind::Dft => {
            let (mut re, mut im) = raw::dft2(u0, h, w, fast);
            for ((rv, iv), l) in re.iter_mut().zip(im.iter_mut()).zip(&lam) {
                let m = (-k * l * t).exp();
                *rv *= m;
                *iv *= m;
            }
            raw::idft2(&re, &im, h, w, fast).0
        }
    }
}

/// Prolongation of a coarse field to an `r`-times finer grid by evaluating
/// its transform-basis interpolant at the fine sample positions: zero-padded
/// DCT coefficients for the Neumann (cell-centered) geometry, zero-padded
/// DFT spectrum with the Nyquist bins split for the periodic geometry.
pub fn prolong(u0: &[f64], h: usize, w: usize, boundary: Boundary, r: usize) -> Vec<f64> {
    assert!(r >= 1 && r % 2 == 0 || r == 1, "refinement factor must be 1 or even, got {r}");
    if r == 1 {
        return u0.to_vec();
    }
    let (hf, wf) = (h * r, w * r);
    let fast = hf.max(wf) > 64;
    match boundary {
        Boundary::Neumann => {
            let c = raw::dct2(u0, h, w, h.max(w) > 64);
            let mut cf = vec![0.0f64; hf * wf];
            let scale = r as f64; // sqrt(r) per axis under orthonormal scaling
            for i in 0..h {
                for j in 0..w {
                    cf[i * wf + j] = c[i * w + j] * scale;
                }
            }
            raw::idct2(&cf, hf, wf, fast)
        }
        Boundary::Periodic => {
            let (re, im) = raw::dft2(u0, h, w, h.max(w) > 64);
            let mut fre = vec![0.0f64; hf * wf];
            let mut fim = vec![0.0f64; hf * wf];
            let scale = (r * r) as f64;
            let slots = |kk: usize, n: usize, nf: usize| -> Vec<(usize, f64)> {
                if kk == 0 {
                    vec![(0, 1.0)]
                } else if 2 * kk == n {
                    vec![(kk, 0.5), (nf - kk, 0.5)]
                } else if 2 * kk < n {
                    vec![(kk, 1.0)]
                } else {
                    vec![(nf - (n - kk), 1.0)]
                }
            };
            for ky in 0..h {
                let sy = slots(ky, h, hf);
                for kx in 0..w {
                    let sx = slots(kx, w, wf);
                    let (a, b) = (re[ky * w + kx], im[ky * w + kx]);
                    for &(iy, wy) in &sy {
                        for &(ix, wx) in &sx {
                            fre[iy * wf + ix] += a * wy * wx * scale;
                            fim[iy * wf + ix] += b * wy * wx * scale;
                        }
                    }
                }
            }
            raw::idft2(&fre, &fim, hf, wf, fast).0
        }
    }
}

/// Restriction of an `r`-times finer field back to the coarse grid: a
/// 4-point cubic stencil (-1, 9, 9, -1)/16 at the coarse cell centers with
/// mirror ghosts for the Neumann geometry, direct injection of coincident
/// samples for the periodic geometry.
pub fn restrict(uf: &[f64], h: usize, w: usize, boundary: Boundary, r: usize) -> Vec<f64> {
    if r == 1 {
        return uf.to_vec();
    }
    let (hf, wf) = (h * r, w * r);
    assert_eq!(uf.len(), hf * wf);
    match boundary {
        Boundary::Periodic => {
            let mut out = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = uf[(y * r) * wf + x * r];
                }
            }
            out
        }
        Boundary::Neumann => {
            let mirror = |i: isize, n: usize| -> usize {
                if i < 0 {
                    (-1 - i) as usize
                } else if i >= n as isize {
                    2 * n - 1 - i as usize
                } else {
                    i as usize
                }
            };
            let cubic = |f: &dyn Fn(isize) -> f64, c: usize| -> f64 {
                let j0 = (r * c + r / 2) as isize - 1;
                (-f(j0 - 1) + 9.0 * f(j0) + 9.0 * f(j0 + 1) - f(j0 + 2)) / 16.0
            };
            // restrict rows (axis 0) first
            let mut mid = vec![0.0f64; h * wf];
            for x in 0..wf {
                for y in 0..h {
                    mid[y * wf + x] = cubic(&|i| uf[mirror(i, hf) * wf + x], y);
                }
            }
            let mut out = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = cubic(&|i| mid[y * wf + mirror(i, wf)], x);
                }
            }
            out
        }
    }
}

/// FD-oracle solution restricted back to the original grid: prolong by `r`,
/// integrate with dx = 1/r and dt = 0.2 dx^2 / k, restrict. The expert's
/// basis fixes the boundary: DCT vs Neumann, DFT vs periodic.
pub fn refined_oracle_field(
    u0: &[f64],
    h: usize,
    w: usize,
    kind: TransformKind,
    k: f64,
    t: f64,
    r: usize,
) -> Result<Vec<f64>> {
    let boundary = match kind {
        TransformKind::Dct => Boundary::Neumann,
        TransformKind::Dft => Boundary::Periodic,
        TransformKind::Haar => {
            return Err(Error::invalid(
                "oracle_agreement",
                "the FD oracle certifies only the DCT and DFT experts",
            ))
        }
    };
    let fine = prolong(u0, h, w, boundary, r);
    let dx = 1.0 / r as f64;
    let grid = OracleGrid::new(fine, h * r, w * r, boundary, dx, 0.2 * dx * dx / k);
    let solved = pde_oracle_solve(&grid, k, t)?;
    Ok(restrict(&solved, h, w, boundary, r))
}

/// Relative L2 distance to the spectral reference for FD solutions computed
/// on successively refined oracle grids (dx = 1/r, dt = 0.2 dx^2 / k). The
/// expert's basis fixes the boundary: DCT vs Neumann, DFT vs periodic.
pub fn oracle_agreement_errors(
    u0: &[f64],
    h: usize,
    w: usize,
    kind: TransformKind,
    k: f64,
    t: f64,
    refinements: &[usize],
) -> Result<Vec<f64>> {
    if kind == TransformKind::Haar {
        return Err(Error::invalid(
            "oracle_agreement",
            "the FD oracle certifies only the DCT and DFT experts",
        ));
    }
    let reference = spectral_reference(u0, h, w, kind, k, t);
    let ref_norm = l2(&reference);
    let mut errs = Vec::with_capacity(refinements.len());
    for &r in refinements {
        let coarse = refined_oracle_field(u0, h, w, kind, k, t, r)?;
        let dist = coarse
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        errs.push(dist / ref_norm);
    }
    Ok(errs)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
