//! Orthonormal 2D spectral transforms (DCT-II/III, DFT, full-depth Haar)
//! over the trailing two axes, batched across leading axes, differentiable.
//!
//! Two execution paths: direct separable matrix products (the oracle, used
//! up to 64x64) and FFT/lifting fast paths above that. Both must agree to
//! 1e-9 at 64-bit; internals always compute in f64 regardless of the tensor
//! element type.
//!
//! Conventions: DCT and Haar are orthonormal both ways. The DFT is
//! unnormalized forward with the 1/(H*W) factor on the inverse, so Parseval
//! picks up the same factor. VJPs are the matching inverse transforms
//! (orthonormal case) or scaled forward transforms (DFT case).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardFn, ComplexPair, Tensor};

const DIRECT_LIMIT: usize = 64;
const HERMITIAN_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Dct,
    Dft,
    Haar,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Dct => "dct",
            TransformKind::Dft => "dft",
            TransformKind::Haar => "haar",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dct" => Ok(TransformKind::Dct),
            "dft" => Ok(TransformKind::Dft),
            "haar" => Ok(TransformKind::Haar),
            other => Err(Error::Config(format!(
                "unknown transform {other:?} (expected dct, dft, or haar)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformPath {
    Direct,
    Fast,
    /// Direct up to 64x64, fast above.
    Auto,
}

fn use_fast(path: TransformPath, h: usize, w: usize) -> bool {
    match path {
        TransformPath::Direct => false,
        TransformPath::Fast => true,
        TransformPath::Auto => h.max(w) > DIRECT_LIMIT,
    }
}

/// Per-axis frequency values feeding the heat multiplier.
///
/// DCT/Haar: vx(i) = pi*i/H (grid-position convention, nondecreasing).
/// DFT: vx(i) = 2*pi*min(i, H-i)/H (aliased magnitude, symmetric about
/// Nyquist). Always vx(0) = vy(0) = 0.
#[derive(Clone, Debug)]
pub struct FrequencyGrid {
    pub h: usize,
    pub w: usize,
    pub kind: TransformKind,
    vx: Vec<f64>,
    vy: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(kind: TransformKind, h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1, "empty frequency grid {h}x{w}");
        let axis = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| match kind {
                    TransformKind::Dct | TransformKind::Haar => {
                        std::f64::consts::PI * i as f64 / n as f64
                    }
                    TransformKind::Dft => {
                        2.0 * std::f64::consts::PI * i.min(n - i) as f64 / n as f64
                    }
                })
                .collect()
        };
        FrequencyGrid {
            h,
            w,
            kind,
            vx: axis(h),
            vy: axis(w),
        }
    }

    pub fn vx(&self) -> &[f64] {
        &self.vx
    }

    pub fn vy(&self) -> &[f64] {
        &self.vy
    }

    /// Row-major `vx(i)^2 + vy(j)^2` of length H*W.
    pub fn lambda(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h * self.w);
        for &x in &self.vx {
            for &y in &self.vy {
                out.push(x * x + y * y);
            }
        }
        out
    }
}

// ---- raw f64 kernels (shared by forward passes, VJPs, and PDE oracles) ----

pub(crate) mod raw {
    use super::*;

    thread_local! {
        static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
            RefCell::new(HashMap::new());
    }

    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        PLANS.with(|p| {
            let mut map = p.borrow_mut();
            map.entry((len, inverse))
                .or_insert_with(|| {
                    let mut planner = FftPlanner::new();
                    if inverse {
                        planner.plan_fft_inverse(len)
                    } else {
                        planner.plan_fft_forward(len)
                    }
                })
                .clone()
        })
    }

    fn fft(buf: &mut [Complex64], inverse: bool) {
        fft_plan(buf.len(), inverse).process(buf);
    }

    /// Orthonormal DCT-II matrix and its transpose; the direct path hits
    /// these every call, so they are built once per size.
    struct DctMats {
        m: Vec<f64>,
        t: Vec<f64>,
    }

    thread_local! {
        static DCT_MATS: RefCell<HashMap<usize, Arc<DctMats>>> = RefCell::new(HashMap::new());
        static DFT_TWIDDLES: RefCell<HashMap<(usize, bool), Arc<Vec<Complex64>>>> =
            RefCell::new(HashMap::new());
    }

    /// Row-k/col-j orthonormal DCT-II matrix entry table, row-major [n*n].
    fn dct_matrix(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        let s0 = (1.0 / n as f64).sqrt();
        let sk = (2.0 / n as f64).sqrt();
        for k in 0..n {
            let s = if k == 0 { s0 } else { sk };
            for j in 0..n {
                m[k * n + j] =
                    s * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2 * n) as f64)
                        .cos();
            }
        }
        m
    }

    fn dct_mats(n: usize) -> Arc<DctMats> {
        DCT_MATS.with(|c| {
            c.borrow_mut()
                .entry(n)
                .or_insert_with(|| {
                    let m = dct_matrix(n);
                    let t = transpose(&m, n);
                    Arc::new(DctMats { m, t })
                })
                .clone()
        })
    }

    /// out = M * X over the first axis: out[k][j] = sum_m M[k][m] x[m][j].
    fn apply_cols(m: &[f64], x: &[f64], n: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * w];
        for k in 0..n {
            for mm in 0..n {
                let c = m[k * n + mm];
                if c == 0.0 {
                    continue;
                }
                let (orow, xrow) = (k * w, mm * w);
                for j in 0..w {
                    out[orow + j] += c * x[xrow + j];
                }
            }
        }
        out
    }

    /// out = X * B over the second axis: out[i][l] = sum_j x[i][j] B[j][l];
    /// row-accumulation order so the inner loop vectorizes.
    fn apply_rows(b: &[f64], x: &[f64], h: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * n];
        for (i, orow) in out.chunks_exact_mut(n).enumerate() {
            for (j, &xv) in x[i * n..(i + 1) * n].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                    *o += xv * bv;
                }
            }
        }
        out
    }

    /// Orthonormal DCT-II of one axis via a 2n-point FFT of the even
    /// extension [x, reverse(x)].
    fn dct1d_fast(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex64> = Vec::with_capacity(2 * n);
        buf.extend(x.iter().map(|&v| Complex64::new(v, 0.0)));
        buf.extend(x.iter().rev().map(|&v| Complex64::new(v, 0.0)));
        fft(&mut buf, false);
        let s0 = (1.0 / n as f64).sqrt();
        let sk = (2.0 / n as f64).sqrt();
        (0..n)
            .map(|k| {
                let ang = -std::f64::consts::PI * k as f64 / (2 * n) as f64;
                let c = 0.5 * (Complex64::from_polar(1.0, ang) * buf[k]).re;
                c * if k == 0 { s0 } else { sk }
            })
            .collect()
    }

    /// Orthonormal DCT-III (inverse of `dct1d_fast`) via a zero-padded
    /// 2n-point inverse FFT.
    fn dct3_1d_fast(coef: &[f64]) -> Vec<f64> {
        let n = coef.len();
        let s0 = (1.0 / n as f64).sqrt();
        let sk = (2.0 / n as f64).sqrt();
        let mut buf = vec![Complex64::new(0.0, 0.0); 2 * n];
        for k in 0..n {
            let w = coef[k] * if k == 0 { s0 } else { sk };
            let ang = std::f64::consts::PI * k as f64 / (2 * n) as f64;
            buf[k] = Complex64::from_polar(1.0, ang) * w;
        }
        fft(&mut buf, true);
        (0..n).map(|i| buf[i].re).collect()
    }

    fn columns_of(x: &[f64], h: usize, w: usize, j: usize) -> Vec<f64> {
        (0..h).map(|i| x[i * w + j]).collect()
    }

    fn fast_separable(x: &[f64], h: usize, w: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut mid = vec![0.0; h * w];
        for j in 0..w {
            let col = f(&columns_of(x, h, w, j));
            for i in 0..h {
                mid[i * w + j] = col[i];
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            out[i * w..(i + 1) * w].copy_from_slice(&f(&mid[i * w..(i + 1) * w]));
        }
        out
    }

    pub fn dct2(x: &[f64], h: usize, w: usize, fast: bool) -> Vec<f64> {
        if fast {
            fast_separable(x, h, w, dct1d_fast)
        } else {
            // C = Mh X Mw^T
            let (mh, mw) = (dct_mats(h), dct_mats(w));
            apply_rows(&mw.t, &apply_cols(&mh.m, x, h, w), h, w)
        }
    }

    pub fn idct2(x: &[f64], h: usize, w: usize, fast: bool) -> Vec<f64> {
        if fast {
            fast_separable(x, h, w, dct3_1d_fast)
        } else {
            // inverse of an orthonormal map is its transpose: X = Mh^T C Mw
            let (mh, mw) = (dct_mats(h), dct_mats(w));
            apply_rows(&mw.m, &apply_cols(&mh.t, x, h, w), h, w)
        }
    }

    fn transpose(m: &[f64], n: usize) -> Vec<f64> {
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = m[i * n + j];
            }
        }
        t
    }

    /// Unnormalized forward 2D DFT of a real field.
    pub fn dft2(x: &[f64], h: usize, w: usize, fast: bool) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        dft2_complex(&mut buf, h, w, fast, false);
        (buf.iter().map(|c| c.re).collect(), buf.iter().map(|c| c.im).collect())
    }

    /// Complex inverse 2D DFT including the 1/(H*W) factor; returns both parts.
    pub fn idft2(re: &[f64], im: &[f64], h: usize, w: usize, fast: bool) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> = re
            .iter()
            .zip(im)
            .map(|(&a, &b)| Complex64::new(a, b))
            .collect();
        dft2_complex(&mut buf, h, w, fast, true);
        let norm = 1.0 / (h * w) as f64;
        (
            buf.iter().map(|c| c.re * norm).collect(),
            buf.iter().map(|c| c.im * norm).collect(),
        )
    }

    fn dft2_complex(buf: &mut [Complex64], h: usize, w: usize, fast: bool, inverse: bool) {
        if fast {
            // rows
            for i in 0..h {
                fft(&mut buf[i * w..(i + 1) * w], inverse);
            }
            // columns
            let mut col = vec![Complex64::new(0.0, 0.0); h];
            for j in 0..w {
                for i in 0..h {
                    col[i] = buf[i * w + j];
                }
                fft(&mut col, inverse);
                for i in 0..h {
                    buf[i * w + j] = col[i];
                }
            }
        } else {
            let (eh, ew) = (dft_twiddle(h, inverse), dft_twiddle(w, inverse));
            let mut mid = vec![Complex64::new(0.0, 0.0); h * w];
            for k in 0..h {
                for m in 0..h {
                    let c = eh[k * h + m];
                    for j in 0..w {
                        mid[k * w + j] += c * buf[m * w + j];
                    }
                }
            }
            // the twiddle matrix is symmetric (entry (l, j) depends on l*j
            // mod n), so the row pass can also accumulate row-wise
            for i in 0..h {
                let brow = &mut buf[i * w..(i + 1) * w];
                brow.fill(Complex64::new(0.0, 0.0));
                for (j, &mv) in mid[i * w..(i + 1) * w].iter().enumerate() {
                    for (o, &tv) in brow.iter_mut().zip(&ew[j * w..(j + 1) * w]) {
                        *o += mv * tv;
                    }
                }
            }
        }
    }

    /// Cached n x n DFT twiddle table, entry (k, m) = exp(sign*2*pi*i*k*m/n).
    fn dft_twiddle(n: usize, inverse: bool) -> Arc<Vec<Complex64>> {
        DFT_TWIDDLES.with(|c| {
            c.borrow_mut()
                .entry((n, inverse))
                .or_insert_with(|| {
                    let sign = if inverse { 1.0 } else { -1.0 };
                    Arc::new(
                        (0..n * n)
                            .map(|kn| {
                                let (k, m) = (kn / n, kn % n);
                                Complex64::from_polar(
                                    1.0,
                                    sign * 2.0 * std::f64::consts::PI * (k * m % n) as f64
                                        / n as f64,
                                )
                            })
                            .collect(),
                    )
                })
                .clone()
        })
    }

    /// Band sizes visited by the full-depth Haar recursion, largest first.
    fn haar_levels(h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut levels = Vec::new();
        let (mut hh, mut ww) = (h, w);
        while hh >= 2 || ww >= 2 {
            levels.push((hh, ww));
            if hh >= 2 {
                hh /= 2;
            }
            if ww >= 2 {
                ww /= 2;
            }
        }
        levels
    }

    fn haar_step(vals: &mut Vec<f64>) {
        let n = vals.len();
        let half = n / 2;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = vec![0.0; n];
        for i in 0..half {
            out[i] = (vals[2 * i] + vals[2 * i + 1]) * r;
            out[half + i] = (vals[2 * i] - vals[2 * i + 1]) * r;
        }
        *vals = out;
    }

    fn haar_unstep(vals: &mut Vec<f64>) {
        let n = vals.len();
        let half = n / 2;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = vec![0.0; n];
        for i in 0..half {
            out[2 * i] = (vals[i] + vals[half + i]) * r;
            out[2 * i + 1] = (vals[i] - vals[half + i]) * r;
        }
        *vals = out;
    }

    /// One Haar analysis matrix step as an explicit matrix (direct path).
    fn haar_step_matrix(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        let half = n / 2;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..half {
            m[i * n + 2 * i] = r;
            m[i * n + 2 * i + 1] = r;
            m[(half + i) * n + 2 * i] = r;
            m[(half + i) * n + 2 * i + 1] = -r;
        }
        m
    }

    /// Full-depth 2D Haar: one separable analysis step per level, recursing
    /// into the low-low band; once an axis reaches extent 1 the remaining
    /// levels act on the other axis alone.
    pub fn haar2(x: &[f64], h: usize, w: usize, fast: bool) -> Vec<f64> {
        let mut out = x.to_vec();
        for (bh, bw) in haar_levels(h, w) {
            if bw >= 2 {
                if fast {
                    for i in 0..bh {
                        let mut row: Vec<f64> = (0..bw).map(|j| out[i * w + j]).collect();
                        haar_step(&mut row);
                        for j in 0..bw {
                            out[i * w + j] = row[j];
                        }
                    }
                } else {
                    let m = haar_step_matrix(bw);
                    for i in 0..bh {
                        let row: Vec<f64> = (0..bw).map(|j| out[i * w + j]).collect();
                        let nr = apply_cols(&m, &row, bw, 1);
                        for j in 0..bw {
                            out[i * w + j] = nr[j];
                        }
                    }
                }
            }
            if bh >= 2 {
                if fast {
                    for j in 0..bw {
                        let mut col: Vec<f64> = (0..bh).map(|i| out[i * w + j]).collect();
                        haar_step(&mut col);
                        for i in 0..bh {
                            out[i * w + j] = col[i];
                        }
                    }
                } else {
                    let m = haar_step_matrix(bh);
                    for j in 0..bw {
                        let col: Vec<f64> = (0..bh).map(|i| out[i * w + j]).collect();
                        let nc = apply_cols(&m, &col, bh, 1);
                        for i in 0..bh {
                            out[i * w + j] = nc[i];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn ihaar2(x: &[f64], h: usize, w: usize, fast: bool) -> Vec<f64> {
        let _ = fast; // synthesis runs the lifting steps either way
        let mut out = x.to_vec();
        for (bh, bw) in haar_levels(h, w).into_iter().rev() {
            if bh >= 2 {
                for j in 0..bw {
                    let mut col: Vec<f64> = (0..bh).map(|i| out[i * w + j]).collect();
                    haar_unstep(&mut col);
                    for i in 0..bh {
                        out[i * w + j] = col[i];
                    }
                }
            }
            if bw >= 2 {
                for i in 0..bh {
                    let mut row: Vec<f64> = (0..bw).map(|j| out[i * w + j]).collect();
                    haar_unstep(&mut row);
                    for j in 0..bw {
                        out[i * w + j] = row[j];
                    }
                }
            }
        }
        out
    }
}

// ---- tensor-level differentiable wrappers ----------------------------------

fn spatial_dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let r = x.rank();
    assert!(r >= 2, "transform input must have rank >= 2, got {:?}", x.shape());
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let lead: usize = x.shape()[..r - 2].iter().product();
    (lead, h, w)
}

fn map_slices<T: Scalar>(
    data: &[T],
    lead: usize,
    hw: usize,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<T> {
    let mut out = Vec::with_capacity(lead * hw);
    let mut slice = vec![0.0f64; hw];
    for l in 0..lead {
        for (d, s) in slice.iter_mut().zip(&data[l * hw..(l + 1) * hw]) {
            *d = s.as_f64();
        }
        out.extend(f(&slice).into_iter().map(T::from_f64));
    }
    out
}

fn orthonormal_transform<T: Scalar>(
    x: &Tensor<T>,
    path: TransformPath,
    fwd: fn(&[f64], usize, usize, bool) -> Vec<f64>,
    adj: fn(&[f64], usize, usize, bool) -> Vec<f64>,
) -> Tensor<T> {
    let (lead, h, w) = spatial_dims(x);
    let fast = use_fast(path, h, w);
    let out = map_slices(x.data(), lead, h * w, |s| fwd(s, h, w, fast));
    let backward: BackwardFn<T> = Box::new(move |g| {
        let dx = map_slices(g, lead, h * w, |s| adj(s, h, w, fast));
        vec![Some(dx)]
    });
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], backward)
}

/// Orthonormal 2D DCT-II over the trailing axes.
pub fn dct2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    dct2_path(x, TransformPath::Auto)
}

pub fn dct2_path<T: Scalar>(x: &Tensor<T>, path: TransformPath) -> Tensor<T> {
    orthonormal_transform(x, path, raw::dct2, raw::idct2)
}

/// Inverse (DCT-III) of `dct2`.
pub fn idct2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    idct2_path(x, TransformPath::Auto)
}

pub fn idct2_path<T: Scalar>(x: &Tensor<T>, path: TransformPath) -> Tensor<T> {
    orthonormal_transform(x, path, raw::idct2, raw::dct2)
}

fn check_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h.is_power_of_two() && w.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{op}: spatial extents must be powers of two, got {h}x{w}"
        )))
    }
}

/// Full-depth orthonormal 2D Haar decomposition (power-of-two extents).
pub fn haar2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    haar2_path(x, TransformPath::Auto)
}

pub fn haar2_path<T: Scalar>(x: &Tensor<T>, path: TransformPath) -> Result<Tensor<T>> {
    let (_, h, w) = spatial_dims(x);
    check_pow2("haar2", h, w)?;
    Ok(orthonormal_transform(x, path, raw::haar2, raw::ihaar2))
}

/// Inverse of `haar2`.
pub fn ihaar2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ihaar2_path(x, TransformPath::Auto)
}

pub fn ihaar2_path<T: Scalar>(x: &Tensor<T>, path: TransformPath) -> Result<Tensor<T>> {
    let (_, h, w) = spatial_dims(x);
    check_pow2("ihaar2", h, w)?;
    Ok(orthonormal_transform(x, path, raw::ihaar2, raw::haar2))
}

/// Unnormalized forward 2D DFT of a real tensor.
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> ComplexPair<T> {
    dft2_path(x, TransformPath::Auto)
}

pub fn dft2_path<T: Scalar>(x: &Tensor<T>, path: TransformPath) -> ComplexPair<T> {
    let (lead, h, w) = spatial_dims(x);
    let fast = use_fast(path, h, w);
    let hw = h * w;
    let mut re = Vec::with_capacity(lead * hw);
    let mut im = Vec::with_capacity(lead * hw);
    let data = x.data();
    let mut slice = vec![0.0f64; hw];
    for l in 0..lead {
        for (d, s) in slice.iter_mut().zip(&data[l * hw..(l + 1) * hw]) {
            *d = s.as_f64();
        }
        let (r, i) = raw::dft2(&slice, h, w, fast);
        re.extend(r.into_iter().map(T::from_f64));
        im.extend(i.into_iter().map(T::from_f64));
    }
    // d(loss)/dx = Re(dft2(G_re)) + Im(dft2(G_im)) for the two cotangents.
    let backward_re: BackwardFn<T> = Box::new(move |g| {
        let dx = map_slices(g, lead, hw, |s| raw::dft2(s, h, w, fast).0);
        vec![Some(dx)]
    });
    let backward_im: BackwardFn<T> = Box::new(move |g| {
        let dx = map_slices(g, lead, hw, |s| raw::dft2(s, h, w, fast).1);
        vec![Some(dx)]
    });
    let shape = x.shape().to_vec();
    ComplexPair::new(
        Tensor::from_op(re, shape.clone(), vec![x.clone()], backward_re),
        Tensor::from_op(im, shape, vec![x.clone()], backward_im),
    )
}

/// Inverse DFT with 1/(H*W) normalization, returning the real field.
/// The spectrum must be Hermitian-symmetric: max |S(u,v) - conj(S(-u,-v))|,
/// measured relative to max(1, max |S|), must stay below 1e-6.
pub fn idft2<T: Scalar>(s: &ComplexPair<T>) -> Result<Tensor<T>> {
    idft2_path(s, TransformPath::Auto)
}

pub fn idft2_path<T: Scalar>(s: &ComplexPair<T>, path: TransformPath) -> Result<Tensor<T>> {
    let (lead, h, w) = spatial_dims(&s.re);
    let fast = use_fast(path, h, w);
    let hw = h * w;
    let (re_d, im_d) = (s.re.data(), s.im.data());

    let mut max_dev = 0.0f64;
    let mut max_mag = 0.0f64;
    for l in 0..lead {
        let base = l * hw;
        for u in 0..h {
            for v in 0..w {
                let (a_re, a_im) = (
                    re_d[base + u * w + v].as_f64(),
                    im_d[base + u * w + v].as_f64(),
                );
                let m = (h - u) % h * w + (w - v) % w;
                let (b_re, b_im) = (re_d[base + m].as_f64(), im_d[base + m].as_f64());
                let dev = ((a_re - b_re).powi(2) + (a_im + b_im).powi(2)).sqrt();
                max_dev = max_dev.max(dev);
                max_mag = max_mag.max((a_re * a_re + a_im * a_im).sqrt());
            }
        }
    }
    let deviation = max_dev / max_mag.max(1.0);
    if deviation > HERMITIAN_TOL {
        return Err(Error::NotHermitian {
            deviation,
            tol: HERMITIAN_TOL,
        });
    }

    let mut out = Vec::with_capacity(lead * hw);
    let mut sr = vec![0.0f64; hw];
    let mut si = vec![0.0f64; hw];
    for l in 0..lead {
        for j in 0..hw {
            sr[j] = re_d[l * hw + j].as_f64();
            si[j] = im_d[l * hw + j].as_f64();
        }
        let (r, _) = raw::idft2(&sr, &si, h, w, fast);
        out.extend(r.into_iter().map(T::from_f64));
    }

    let norm = 1.0 / (h * w) as f64;
    let backward: BackwardFn<T> = Box::new(move |g| {
        // dL/dS = (1/(H*W)) * dft2(g) split into the two parents.
        let mut dre = Vec::with_capacity(g.len());
        let mut dim = Vec::with_capacity(g.len());
        let mut slice = vec![0.0f64; hw];
        for l in 0..lead {
            for (d, s) in slice.iter_mut().zip(&g[l * hw..(l + 1) * hw]) {
                *d = s.as_f64();
            }
            let (r, i) = raw::dft2(&slice, h, w, fast);
            dre.extend(r.into_iter().map(|v| T::from_f64(v * norm)));
            dim.extend(i.into_iter().map(|v| T::from_f64(v * norm)));
        }
        vec![Some(dre), Some(dim)]
    });

    Ok(Tensor::from_op(
        out,
        s.re.shape().to_vec(),
        vec![s.re.clone(), s.im.clone()],
        backward,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use crate::tensor::Parameter;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn l2(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn dct2_golden_2x2() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = dct2(&x);
        let expect = [5.0, -1.0, -2.0, 0.0];
        assert!(linf(y.data(), &expect) < 1e-12, "{:?}", y.data());
        let back = idct2(&y);
        assert!(linf(back.data(), x.data()) < 1e-12);
    }

    #[test]
    fn haar2_golden_2x2() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = haar2(&x).unwrap();
        assert!(linf(y.data(), &[5.0, -1.0, -2.0, 0.0]) < 1e-12, "{:?}", y.data());
        let back = ihaar2(&y).unwrap();
        assert!(linf(back.data(), x.data()) < 1e-12);
    }

    #[test]
    fn dft2_golden_2x2() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let s = dft2(&x);
        assert!(linf(s.re.data(), &[10.0, -2.0, -4.0, 0.0]) < 1e-12);
        assert!(linf(s.im.data(), &[0.0; 4]) < 1e-12);
        let back = idft2(&s).unwrap();
        assert!(linf(back.data(), x.data()) < 1e-12);
    }

    #[test]
    fn constant_field_concentrates_at_dc() {
        let (h, w) = (6, 10);
        let c = 0.37;
        let x = Tensor::<f64>::full(&[h, w], c);
        let y = dct2(&x);
        assert!((y.data()[0] - c * ((h * w) as f64).sqrt()).abs() < 1e-9);
        assert!(y.data()[1..].iter().all(|v| v.abs() < 1e-9));

        let s = dft2(&x);
        assert!((s.re.data()[0] - c * (h * w) as f64).abs() < 1e-9);
        assert!(s.re.data()[1..].iter().all(|v| v.abs() < 1e-9));
        assert!(s.im.data().iter().all(|v| v.abs() < 1e-9));

        let xh = Tensor::<f64>::full(&[8, 8], c);
        let yh = haar2(&xh).unwrap();
        assert!((yh.data()[0] - c * 8.0).abs() < 1e-9);
        assert!(yh.data()[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn roundtrips_and_parseval_within_1e9() {
        for (h, w) in [(1, 1), (2, 2), (3, 5), (16, 16), (32, 32), (64, 32), (64, 64)] {
            let f = rand_field(h, w, (h * 100 + w) as u64);
            let x = Tensor::<f64>::new(f.clone(), &[h, w]);
            let rt = idct2(&dct2(&x));
            assert!(linf(rt.data(), &f) < 1e-9, "dct roundtrip {h}x{w}");
            assert!((l2(dct2(&x).data()) - l2(&f)).abs() < 1e-9, "dct parseval {h}x{w}");

            let s = dft2(&x);
            let rt = idft2(&s).unwrap();
            assert!(linf(rt.data(), &f) < 1e-9, "dft roundtrip {h}x{w}");
            let spec_energy: f64 = s
                .re
                .data()
                .iter()
                .zip(s.im.data())
                .map(|(a, b)| a * a + b * b)
                .sum::<f64>()
                / (h * w) as f64;
            assert!(
                (spec_energy.sqrt() - l2(&f)).abs() < 1e-9,
                "dft parseval {h}x{w}"
            );
        }
        for (h, w) in [(1, 1), (2, 2), (4, 4), (8, 16), (32, 32), (64, 64)] {
            let f = rand_field(h, w, (h * 17 + w) as u64);
            let x = Tensor::<f64>::new(f.clone(), &[h, w]);
            let y = haar2(&x).unwrap();
            let rt = ihaar2(&y).unwrap();
            assert!(linf(rt.data(), &f) < 1e-9, "haar roundtrip {h}x{w}");
            assert!((l2(y.data()) - l2(&f)).abs() < 1e-9, "haar parseval {h}x{w}");
        }
    }

    #[test]
    fn direct_and_fast_paths_agree() {
        for (h, w) in [(8, 8), (12, 20), (33, 7), (64, 64), (96, 40), (128, 128)] {
            let f = rand_field(h, w, (h * 31 + w) as u64);
            let x = Tensor::<f64>::new(f.clone(), &[h, w]);
            let a = dct2_path(&x, TransformPath::Direct);
            let b = dct2_path(&x, TransformPath::Fast);
            assert!(linf(a.data(), b.data()) < 1e-9, "dct {h}x{w}");
            let ai = idct2_path(&a, TransformPath::Direct);
            let bi = idct2_path(&a, TransformPath::Fast);
            assert!(linf(ai.data(), bi.data()) < 1e-9, "idct {h}x{w}");

            let sa = dft2_path(&x, TransformPath::Direct);
            let sb = dft2_path(&x, TransformPath::Fast);
            assert!(linf(sa.re.data(), sb.re.data()) < 1e-9, "dft re {h}x{w}");
            assert!(linf(sa.im.data(), sb.im.data()) < 1e-9, "dft im {h}x{w}");
            let ia = idft2_path(&sa, TransformPath::Direct).unwrap();
            let ib = idft2_path(&sa, TransformPath::Fast).unwrap();
            assert!(linf(ia.data(), ib.data()) < 1e-9, "idft {h}x{w}");
        }
        for (h, w) in [(4, 4), (16, 8), (64, 64), (128, 128)] {
            let f = rand_field(h, w, (h * 13 + w) as u64);
            let x = Tensor::<f64>::new(f, &[h, w]);
            let a = haar2_path(&x, TransformPath::Direct).unwrap();
            let b = haar2_path(&x, TransformPath::Fast).unwrap();
            assert!(linf(a.data(), b.data()) < 1e-9, "haar {h}x{w}");
        }
    }

    #[test]
    fn linearity_holds() {
        let (h, w) = (16, 12);
        let xf = rand_field(h, w, 5);
        let yf = rand_field(h, w, 6);
        let (a, b) = (1.7, -0.4);
        let comb: Vec<f64> = xf.iter().zip(&yf).map(|(x, y)| a * x + b * y).collect();
        let lhs = dct2(&Tensor::<f64>::new(comb.clone(), &[h, w]));
        let rx = dct2(&Tensor::<f64>::new(xf.clone(), &[h, w]));
        let ry = dct2(&Tensor::<f64>::new(yf.clone(), &[h, w]));
        let rhs: Vec<f64> = rx
            .data()
            .iter()
            .zip(ry.data())
            .map(|(x, y)| a * x + b * y)
            .collect();
        assert!(linf(lhs.data(), &rhs) < 1e-9);

        let sl = dft2(&Tensor::<f64>::new(comb, &[h, w]));
        let sx = dft2(&Tensor::<f64>::new(xf, &[h, w]));
        let sy = dft2(&Tensor::<f64>::new(yf, &[h, w]));
        let rre: Vec<f64> = sx
            .re
            .data()
            .iter()
            .zip(sy.re.data())
            .map(|(x, y)| a * x + b * y)
            .collect();
        assert!(linf(sl.re.data(), &rre) < 1e-9);
    }

    #[test]
    fn non_pow2_haar_is_config_error() {
        let x = Tensor::<f64>::zeros(&[6, 8]);
        let msg = haar2(&x).unwrap_err().to_string();
        assert!(msg.contains("power"), "{msg}");
    }

    #[test]
    fn non_hermitian_spectrum_errors() {
        // S[0,1] = i with no mirrored conjugate partner
        let re = Tensor::<f64>::zeros(&[2, 2]);
        let im = Tensor::<f64>::new(vec![0.0, 1.0, 0.0, 0.0], &[2, 2]);
        let err = idft2(&ComplexPair::new(re, im)).unwrap_err();
        assert!(matches!(err, Error::NotHermitian { .. }), "{err}");
    }

    #[test]
    fn hermitian_reconstruction_imag_residual_tiny() {
        let f = rand_field(16, 16, 9);
        let x = Tensor::<f64>::new(f, &[16, 16]);
        let s = dft2(&x);
        let (si, sr) = (s.im.to_f64_vec(), s.re.to_f64_vec());
        let (_, imag) = raw::idft2(&sr, &si, 16, 16, false);
        assert!(imag.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batched_slices_transform_independently() {
        let f0 = rand_field(8, 8, 20);
        let f1 = rand_field(8, 8, 21);
        let mut both = f0.clone();
        both.extend_from_slice(&f1);
        let batched = dct2(&Tensor::<f64>::new(both, &[2, 1, 8, 8]));
        let single = dct2(&Tensor::<f64>::new(f1, &[8, 8]));
        assert!(linf(&batched.data()[64..], single.data()) < 1e-12);
    }

    #[test]
    fn transforms_pass_grad_check() {
        let p = Parameter::<f64>::new("x", rand_field(4, 6, 30), &[4, 6]);
        let wt = Tensor::<f64>::new(rand_field(4, 6, 31), &[4, 6]);
        let r = gradcheck::check("dct2", &[&p], || {
            dct2(&p.tensor()).mul(&wt).unwrap().sum_all()
        });
        assert!(r.pass, "{r}");
        let r = gradcheck::check("idct2", &[&p], || {
            idct2(&p.tensor()).mul(&wt).unwrap().sum_all()
        });
        assert!(r.pass, "{r}");

        let ph = Parameter::<f64>::new("x", rand_field(4, 4, 32), &[4, 4]);
        let wh = Tensor::<f64>::new(rand_field(4, 4, 33), &[4, 4]);
        let r = gradcheck::check("haar2", &[&ph], || {
            haar2(&ph.tensor()).unwrap().mul(&wh).unwrap().sum_all()
        });
        assert!(r.pass, "{r}");
        let r = gradcheck::check("ihaar2", &[&ph], || {
            ihaar2(&ph.tensor()).unwrap().mul(&wh).unwrap().sum_all()
        });
        assert!(r.pass, "{r}");

        let wi = Tensor::<f64>::new(rand_field(4, 6, 34), &[4, 6]);
        let r = gradcheck::check("dft2", &[&p], || {
            let s = dft2(&p.tensor());
            let lr = s.re.mul(&wt).unwrap().sum_all();
            let li = s.im.mul(&wi).unwrap().sum_all();
            lr.add(&li).unwrap()
        });
        assert!(r.pass, "{r}");

        // idft2 through a synthesized Hermitian spectrum: build it from a
        // real field so the symmetry precondition holds at every FD probe.
        let r = gradcheck::check("idft2", &[&p], || {
            let s = dft2(&p.tensor());
            idft2(&s).unwrap().mul(&wt).unwrap().sum_all()
        });
        assert!(r.pass, "{r}");
    }

    #[test]
    fn frequency_grid_conventions() {
        let g = FrequencyGrid::new(TransformKind::Dct, 4, 8);
        assert_eq!(g.vx()[0], 0.0);
        assert!((g.vx()[1] - std::f64::consts::PI / 4.0).abs() < 1e-15);
        assert!((g.vx()[3] - 3.0 * std::f64::consts::PI / 4.0).abs() < 1e-15);
        // nondecreasing
        assert!(g.vx().windows(2).all(|p| p[0] <= p[1]));

        let g = FrequencyGrid::new(TransformKind::Dft, 8, 8);
        assert_eq!(g.vx()[0], 0.0);
        // aliased magnitude symmetric about Nyquist
        assert!((g.vx()[1] - g.vx()[7]).abs() < 1e-15);
        assert!((g.vx()[3] - g.vx()[5]).abs() < 1e-15);
        assert!((g.vx()[4] - std::f64::consts::PI).abs() < 1e-15);

        let g = FrequencyGrid::new(TransformKind::Haar, 4, 4);
        assert!((g.vx()[2] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let lam = g.lambda();
        assert_eq!(lam[0], 0.0);
        assert!((lam[5] - 2.0 * (std::f64::consts::FRAC_PI_4).powi(2)).abs() < 1e-12);
    }
}
