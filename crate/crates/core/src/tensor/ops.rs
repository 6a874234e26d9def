//! Op catalog. Every op computes its forward value eagerly and registers a
//! closure producing vector-Jacobian products for each input.
//!
//! Binary pointwise ops accept equal shapes, a single-element operand, or a
//! lower-rank operand whose shape is a trailing suffix of the other's
//! (broadcast across the leading axes). Anything else is a shape error.

use super::{BackwardFn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

enum Bcast {
    Equal,
    /// rhs is smaller; its flat index is `i % rhs_numel`.
    RhsSmall,
    /// lhs is smaller.
    LhsSmall,
}

fn broadcast_plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Equal);
    }
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(Bcast::RhsSmall);
    }
    if ln == 1 {
        return Ok(Bcast::LhsSmall);
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        return Ok(Bcast::RhsSmall);
    }
    if lhs.len() < rhs.len() && rhs.ends_with(lhs) {
        return Ok(Bcast::LhsSmall);
    }
    Err(Error::shapes(op, lhs, rhs))
}

impl<T: Scalar> Tensor<T> {
    // ---- generic builders ------------------------------------------------

    fn unary(
        &self,
        f: impl Fn(T) -> T,
        // (x_i, y_i, g_i) -> dx_i
        df: impl Fn(T, T, T) -> T + 'static,
    ) -> Tensor<T> {
        let y: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let xc = self.clone();
        let yc = y.clone();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let dx = xc
                .data()
                .iter()
                .zip(yc.iter())
                .zip(g)
                .map(|((&x, &y), &g)| df(x, y, g))
                .collect();
            vec![Some(dx)]
        });
        Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], backward)
    }

    fn binary(
        &self,
        op: &'static str,
        rhs: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        // (a_i, b_i, g_i) -> (da_i, db_i)
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Tensor<T>> {
        let plan = broadcast_plan(op, self.shape(), rhs.shape())?;
        let (a, b) = (self.data(), rhs.data());
        let (out, shape): (Vec<T>, Vec<usize>) = match plan {
            Bcast::Equal => (
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
                self.shape().to_vec(),
            ),
            Bcast::RhsSmall => {
                let rn = b.len();
                (
                    a.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b[i % rn]))
                        .collect(),
                    self.shape().to_vec(),
                )
            }
            Bcast::LhsSmall => {
                let ln = a.len();
                (
                    b.iter()
                        .enumerate()
                        .map(|(i, &y)| f(a[i % ln], y))
                        .collect(),
                    rhs.shape().to_vec(),
                )
            }
        };
        let (ac, bc) = (self.clone(), rhs.clone());
        let backward: BackwardFn<T> = Box::new(move |g| {
            let (a, b) = (ac.data(), bc.data());
            let mut da = vec![T::zero(); a.len()];
            let mut db = vec![T::zero(); b.len()];
            let (an, bn) = (a.len(), b.len());
            for (i, &gi) in g.iter().enumerate() {
                let (x, y) = (a[i % an], b[i % bn]);
                let (dx, dy) = df(x, y, gi);
                da[i % an] += dx;
                db[i % bn] += dy;
            }
            vec![Some(da), Some(db)]
        });
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    // ---- pointwise -------------------------------------------------------

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("add", rhs, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("sub", rhs, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("mul", rhs, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            "div",
            rhs,
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    /// Elementwise minimum; on exact ties the gradient goes to `self`.
    pub fn minimum(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            "minimum",
            rhs,
            |a, b| if a <= b { a } else { b },
            |a, b, g| {
                if a <= b {
                    (g, T::zero())
                } else {
                    (T::zero(), g)
                }
            },
        )
    }

    /// Elementwise maximum; on exact ties the gradient goes to `self`.
    pub fn maximum(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            "maximum",
            rhs,
            |a, b| if a >= b { a } else { b },
            |a, b, g| {
                if a >= b {
                    (g, T::zero())
                } else {
                    (T::zero(), g)
                }
            },
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _, g| -g)
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary(move |x| x * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary(move |x| x + c, |_, _, g| g)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y, g| g * y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _, g| g / x)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _, g| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(stable_sigmoid, |_, y, g| g * y * (T::one() - y))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        self.unary(
            move |x| {
                let u = c * (x + a * x * x * x);
                half * x * (T::one() + u.tanh())
            },
            move |x, _, g| {
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
                g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
            },
        )
    }

    /// Numerically stable softplus: `max(x,0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _, g| g * stable_sigmoid(x),
        )
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(Error::shapes("matmul", self.shape(), rhs.shape()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let out = matmul_nn(self.data(), rhs.data(), m, k, n);
        let (ac, bc) = (self.clone(), rhs.clone());
        let backward: BackwardFn<T> = Box::new(move |g| {
            // dA = G B^T, dB = A^T G
            let da = matmul_nt(g, bc.data(), m, n, k);
            let db = matmul_tn(ac.data(), g, k, m, n);
            vec![Some(da), Some(db)]
        });
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g| vec![Some(vec![g[0]; n])]);
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], backward)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn mean_hw(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::invalid(
                "mean_hw",
                format!("expected rank-4 input, got shape {:?}", self.shape()),
            ));
        }
        let [n, c, h, w] = [
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        ];
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let x = self.data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut s = T::zero();
            for j in 0..hw {
                s += x[i * hw + j];
            }
            out[i] = s * inv;
        }
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); n * c * hw];
            for i in 0..n * c {
                let gi = g[i] * inv;
                for j in 0..hw {
                    dx[i * hw + j] = gi;
                }
            }
            vec![Some(dx)]
        });
        Ok(Tensor::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            backward,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let d = *self.shape().last().expect("softmax on rank-0 tensor");
        let rows = self.numel() / d;
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                y[r * d + j] = e;
                z += e;
            }
            for j in 0..d {
                y[r * d + j] /= z;
            }
        }
        let yc = y.clone();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); yc.len()];
            for r in 0..rows {
                let o = r * d;
                let mut dot = T::zero();
                for j in 0..d {
                    dot += g[o + j] * yc[o + j];
                }
                for j in 0..d {
                    dx[o + j] = yc[o + j] * (g[o + j] - dot);
                }
            }
            vec![Some(dx)]
        });
        Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], backward)
    }

    // ---- convolutions ----------------------------------------------------

    /// Dense conv: x `[n,ci,h,w]`, weight `[co,ci,kh,kw]`, optional bias `[co]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(Error::shapes("conv2d", self.shape(), weight.shape()));
        }
        let [n, ci, h, w] = four(self.shape());
        let [co, _, kh, kw] = four(weight.shape());
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shapes("conv2d bias", b.shape(), &[co]));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (oh, ow) = conv_out(h, w, kh, kw, stride, pad, "conv2d")?;

        if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            return self.conv2d_1x1(weight, bias, n, ci, co, h, w);
        }

        // im2col per image so the kernel contraction runs through the
        // vectorized matmuls: out[co, ohw] = W[co, ci*kh*kw] col[ci*kh*kw, ohw]
        let cikk = ci * kh * kw;
        let ohw = oh * ow;
        let geom = ConvGeom { ci, h, w, kh, kw, oh, ow, stride, pad };

        let x = self.data();
        let k = weight.data();
        let mut out = vec![T::zero(); n * co * ohw];
        let mut col = vec![T::zero(); cikk * ohw];
        for img in 0..n {
            im2col(&x[img * ci * h * w..(img + 1) * ci * h * w], &mut col, &geom);
            let y = matmul_nn(k, &col, co, cikk, ohw);
            out[img * co * ohw..(img + 1) * co * ohw].copy_from_slice(&y);
        }
        if let Some(b) = bias {
            let bd = b.data();
            for img in 0..n {
                for c in 0..co {
                    let bv = bd[c];
                    for o in &mut out[(img * co + c) * ohw..(img * co + c + 1) * ohw] {
                        *o += bv;
                    }
                }
            }
        }

        let xc = self.clone();
        let wc = weight.clone();
        let has_bias = bias.is_some();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let x = xc.data();
            let k = wc.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); k.len()];
            let mut db = vec![T::zero(); co];
            let mut col = vec![T::zero(); cikk * ohw];
            for img in 0..n {
                let gi = &g[img * co * ohw..(img + 1) * co * ohw];
                im2col(&x[img * ci * h * w..(img + 1) * ci * h * w], &mut col, &geom);
                // dW += G col^T, dcol = W^T G scattered back to dx
                for (acc, v) in dw.iter_mut().zip(matmul_nt(gi, &col, co, ohw, cikk)) {
                    *acc += v;
                }
                let dcol = matmul_tn(k, gi, cikk, co, ohw);
                col2im(&dcol, &mut dx[img * ci * h * w..(img + 1) * ci * h * w], &geom);
                if has_bias {
                    for c in 0..co {
                        db[c] += gi[c * ohw..(c + 1) * ohw].iter().copied().sum();
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        });

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![n, co, oh, ow], parents, backward))
    }

    /// Pointwise conv as per-image matmuls: `out[co, hw] = W[co, ci] x[ci, hw]`.
    /// Carries the bulk of the network's multiplies, so it routes through the
    /// vectorized kernels instead of the general sliding-window loop.
    fn conv2d_1x1(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        n: usize,
        ci: usize,
        co: usize,
        h: usize,
        w: usize,
    ) -> Result<Tensor<T>> {
        let hw = h * w;
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); n * co * hw];
        for img in 0..n {
            let y = matmul_nn(wd, &x[img * ci * hw..(img + 1) * ci * hw], co, ci, hw);
            out[img * co * hw..(img + 1) * co * hw].copy_from_slice(&y);
        }
        if let Some(b) = bias {
            let bd = b.data();
            for img in 0..n {
                for c in 0..co {
                    let bv = bd[c];
                    for o in &mut out[(img * co + c) * hw..(img * co + c + 1) * hw] {
                        *o += bv;
                    }
                }
            }
        }

        let xc = self.clone();
        let wc = weight.clone();
        let has_bias = bias.is_some();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let x = xc.data();
            let wd = wc.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut db = vec![T::zero(); co];
            for img in 0..n {
                let gi = &g[img * co * hw..(img + 1) * co * hw];
                let xi = &x[img * ci * hw..(img + 1) * ci * hw];
                // dx = W^T g, dW += g x^T
                let dxi = matmul_tn(wd, gi, ci, co, hw);
                dx[img * ci * hw..(img + 1) * ci * hw].copy_from_slice(&dxi);
                for (acc, v) in dw.iter_mut().zip(matmul_nt(gi, xi, co, hw, ci)) {
                    *acc += v;
                }
                if has_bias {
                    for c in 0..co {
                        db[c] += gi[c * hw..(c + 1) * hw].iter().copied().sum();
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        });

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![n, co, h, w], parents, backward))
    }

    /// Per-channel conv: x `[n,c,h,w]`, weight `[c,kh,kw]`, optional bias `[c]`.
    pub fn depthwise_conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 3 || self.shape()[1] != weight.shape()[0] {
            return Err(Error::shapes("depthwise_conv2d", self.shape(), weight.shape()));
        }
        let [n, c, h, w] = four(self.shape());
        let (kh, kw) = (weight.shape()[1], weight.shape()[2]);
        if let Some(b) = bias {
            if b.shape() != [c] {
                return Err(Error::shapes("depthwise_conv2d bias", b.shape(), &[c]));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("depthwise_conv2d", "stride must be >= 1"));
        }
        let (oh, ow) = conv_out(h, w, kh, kw, stride, pad, "depthwise_conv2d")?;

        let x = self.data();
        let k = weight.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for in_ in 0..n {
            for ch in 0..c {
                let b = bias.map(|b| b.data()[ch]).unwrap_or_else(T::zero);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((in_ * c + ch) * h + iy as usize) * w + ix as usize]
                                    * k[(ch * kh + ky) * kw + kx];
                            }
                        }
                        out[((in_ * c + ch) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }

        let xc = self.clone();
        let wc = weight.clone();
        let has_bias = bias.is_some();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let x = xc.data();
            let k = wc.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); k.len()];
            let mut db = vec![T::zero(); c];
            for in_ in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gi = g[((in_ * c + ch) * oh + oy) * ow + ox];
                            db[ch] += gi;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi =
                                        ((in_ * c + ch) * h + iy as usize) * w + ix as usize;
                                    let wi = (ch * kh + ky) * kw + kx;
                                    dx[xi] += gi * k[wi];
                                    dw[wi] += gi * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        });

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![n, c, oh, ow], parents, backward))
    }

    /// LayerNorm across the channel axis of `[n,c,h,w]`, scale/shift `[c]`.
    pub fn layer_norm_channels(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::invalid(
                "layer_norm",
                format!("expected rank-4 input, got shape {:?}", self.shape()),
            ));
        }
        let [n, c, h, w] = four(self.shape());
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shapes("layer_norm", gamma.shape(), &[c]));
        }
        let hw = h * w;
        let eps = T::from_f64(eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let x = self.data();
        let ga = gamma.data();
        let be = beta.data();

        let mut out = vec![T::zero(); x.len()];
        // Saved for backward: normalized values and 1/std per (n,h,w) site.
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * hw];
        for in_ in 0..n {
            for s in 0..hw {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean += x[(in_ * c + ch) * hw + s];
                }
                mean *= inv_c;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = x[(in_ * c + ch) * hw + s] - mean;
                    var += d * d;
                }
                var *= inv_c;
                let r = (var + eps).sqrt().recip();
                rstd[in_ * hw + s] = r;
                for ch in 0..c {
                    let i = (in_ * c + ch) * hw + s;
                    let xh = (x[i] - mean) * r;
                    xhat[i] = xh;
                    out[i] = ga[ch] * xh + be[ch];
                }
            }
        }

        let gc = gamma.clone();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let ga = gc.data();
            let mut dx = vec![T::zero(); xhat.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for in_ in 0..n {
                for s in 0..hw {
                    let r = rstd[in_ * hw + s];
                    let mut m1 = T::zero(); // mean of gamma*g over channels
                    let mut m2 = T::zero(); // mean of gamma*g*xhat
                    for ch in 0..c {
                        let i = (in_ * c + ch) * hw + s;
                        let gg = ga[ch] * g[i];
                        m1 += gg;
                        m2 += gg * xhat[i];
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for ch in 0..c {
                        let i = (in_ * c + ch) * hw + s;
                        dx[i] = (ga[ch] * g[i] - m1 - xhat[i] * m2) * r;
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        });

        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        ))
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        let backward: BackwardFn<T> = Box::new(move |g| vec![Some(g.to_vec())]);
        Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            backward,
        )
    }

    /// Pad the trailing two axes.
    pub fn pad2d(
        &self,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
        mode: PadMode,
    ) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::invalid("pad2d", "input must have rank >= 2"));
        }
        let r = self.rank();
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        let lead: usize = self.shape()[..r - 2].iter().product();
        let (oh, ow) = (h + top + bottom, w + left + right);
        let x = self.data();
        let mut out = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = oy as isize - top as isize;
                    let sx = ox as isize - left as isize;
                    let v = match mode {
                        PadMode::Zero => {
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                T::zero()
                            } else {
                                x[(l * h + sy as usize) * w + sx as usize]
                            }
                        }
                        PadMode::Replicate => {
                            let cy = sy.clamp(0, h as isize - 1) as usize;
                            let cx = sx.clamp(0, w as isize - 1) as usize;
                            x[(l * h + cy) * w + cx]
                        }
                    };
                    out[(l * oh + oy) * ow + ox] = v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let in_numel = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); in_numel];
            for l in 0..lead {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gi = g[(l * oh + oy) * ow + ox];
                        let sy = oy as isize - top as isize;
                        let sx = ox as isize - left as isize;
                        match mode {
                            PadMode::Zero => {
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    dx[(l * h + sy as usize) * w + sx as usize] += gi;
                                }
                            }
                            PadMode::Replicate => {
                                let cy = sy.clamp(0, h as isize - 1) as usize;
                                let cx = sx.clamp(0, w as isize - 1) as usize;
                                dx[(l * h + cy) * w + cx] += gi;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(Tensor::from_op(out, shape, vec![self.clone()], backward))
    }

    /// Crop a window from the trailing two axes.
    pub fn crop2d(&self, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::invalid("crop2d", "input must have rank >= 2"));
        }
        let r = self.rank();
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        if top + ch > h || left + cw > w {
            return Err(Error::invalid(
                "crop2d",
                format!(
                    "window {}x{} at ({},{}) exceeds extent {}x{}",
                    ch, cw, top, left, h, w
                ),
            ));
        }
        let lead: usize = self.shape()[..r - 2].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); lead * ch * cw];
        for l in 0..lead {
            for y in 0..ch {
                for xcol in 0..cw {
                    out[(l * ch + y) * cw + xcol] = x[(l * h + top + y) * w + left + xcol];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 2] = ch;
        shape[r - 1] = cw;
        let in_numel = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); in_numel];
            for l in 0..lead {
                for y in 0..ch {
                    for xcol in 0..cw {
                        dx[(l * h + top + y) * w + left + xcol] += g[(l * ch + y) * cw + xcol];
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(Tensor::from_op(out, shape, vec![self.clone()], backward))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("narrow_last", "rank-0 input"))?;
        if start + len > d {
            return Err(Error::invalid(
                "narrow_last",
                format!("slice {}..{} out of bounds for axis of {}", start, start + len, d),
            ));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut out = vec![T::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&x[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let in_numel = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); in_numel];
            for r in 0..rows {
                dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(dx)]
        });
        Ok(Tensor::from_op(out, shape, vec![self.clone()], backward))
    }

    /// Concatenate along the last axis; leading axes must match.
    pub fn concat_last(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        assert!(!parts.is_empty(), "concat_last of zero tensors");
        let lead = &parts[0].shape()[..parts[0].rank() - 1];
        for p in parts {
            if p.rank() != lead.len() + 1 || &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::shapes("concat_last", parts[0].shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &wd) in parts.iter().zip(&widths) {
                out[r * total + off..r * total + off + wd]
                    .copy_from_slice(&p.data()[r * wd..(r + 1) * wd]);
                off += wd;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let widths_b = widths.clone();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut grads = Vec::with_capacity(widths_b.len());
            let mut off = 0;
            for &wd in &widths_b {
                let mut dp = vec![T::zero(); rows * wd];
                for r in 0..rows {
                    dp[r * wd..(r + 1) * wd]
                        .copy_from_slice(&g[r * total + off..r * total + off + wd]);
                }
                grads.push(Some(dp));
                off += wd;
            }
            grads
        });
        Ok(Tensor::from_op(out, shape, parts.to_vec(), backward))
    }

    /// Stack rank-2 tensors `[r_i, d]` into `[sum r_i, d]`.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        assert!(!parts.is_empty(), "concat_rows of zero tensors");
        let d = parts[0].shape().get(1).copied().unwrap_or(0);
        for p in parts {
            if p.rank() != 2 || p.shape()[1] != d {
                return Err(Error::shapes("concat_rows", parts[0].shape(), p.shape()));
            }
        }
        let heights: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * d);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let heights_b = heights.clone();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut grads = Vec::with_capacity(heights_b.len());
            let mut off = 0;
            for &ht in &heights_b {
                grads.push(Some(g[off * d..(off + ht) * d].to_vec()));
                off += ht;
            }
            grads
        });
        Ok(Tensor::from_op(out, vec![total, d], parts.to_vec(), backward))
    }

    /// Select rows of a rank-2 tensor; duplicate indices accumulate in backward.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "gather_rows",
                format!("expected rank-2 input, got shape {:?}", self.shape()),
            ));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row index {} out of bounds for {} rows", bad, rows),
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let idx_b = idx.to_vec();
        let in_numel = self.numel();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); in_numel];
            for (k, &i) in idx_b.iter().enumerate() {
                for j in 0..d {
                    dx[i * d + j] += g[k * d + j];
                }
            }
            vec![Some(dx)]
        });
        Ok(Tensor::from_op(
            out,
            vec![idx.len(), d],
            vec![self.clone()],
            backward,
        ))
    }

    /// `[n,c,h,w] -> [n*h*w, c]`, rows ordered by (n, y, x).
    pub fn nchw_to_tokens(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::invalid(
                "nchw_to_tokens",
                format!("expected rank-4 input, got shape {:?}", self.shape()),
            ));
        }
        let [n, c, h, w] = four(self.shape());
        let hw = h * w;
        let x = self.data();
        let mut out = vec![T::zero(); n * hw * c];
        for in_ in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    out[(in_ * hw + s) * c + ch] = x[(in_ * c + ch) * hw + s];
                }
            }
        }
        let backward: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); n * c * hw];
            for in_ in 0..n {
                for ch in 0..c {
                    for s in 0..hw {
                        dx[(in_ * c + ch) * hw + s] = g[(in_ * hw + s) * c + ch];
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(Tensor::from_op(
            out,
            vec![n * hw, c],
            vec![self.clone()],
            backward,
        ))
    }

    // ---- routing ---------------------------------------------------------

    /// Mix per-sample expert outputs: `out[n] = sum_e w[n,e] * expert_e[n]`.
    pub fn route_combine(weights: &Tensor<T>, experts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if weights.rank() != 2 {
            return Err(Error::invalid(
                "route_combine",
                format!("weights must be rank-2, got {:?}", weights.shape()),
            ));
        }
        let (n, e) = (weights.shape()[0], weights.shape()[1]);
        if experts.len() != e {
            return Err(Error::invalid(
                "route_combine",
                format!("{} experts for {} routing columns", experts.len(), e),
            ));
        }
        let shape = experts[0].shape().to_vec();
        for x in experts {
            if x.shape() != shape {
                return Err(Error::shapes("route_combine", &shape, x.shape()));
            }
        }
        if shape.first() != Some(&n) {
            return Err(Error::shapes("route_combine", weights.shape(), &shape));
        }
        let per: usize = shape[1..].iter().product();
        let wd = weights.data();
        let mut out = vec![T::zero(); n * per];
        for (ei, x) in experts.iter().enumerate() {
            let xd = x.data();
            for in_ in 0..n {
                let wv = wd[in_ * e + ei];
                if wv == T::zero() {
                    continue;
                }
                for j in 0..per {
                    out[in_ * per + j] += wv * xd[in_ * per + j];
                }
            }
        }
        let wc = weights.clone();
        let experts_c: Vec<Tensor<T>> = experts.to_vec();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let wd = wc.data();
            let mut dw = vec![T::zero(); n * e];
            let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(1 + experts_c.len());
            let mut expert_grads = Vec::with_capacity(experts_c.len());
            for (ei, x) in experts_c.iter().enumerate() {
                let xd = x.data();
                let mut dxe = vec![T::zero(); xd.len()];
                for in_ in 0..n {
                    let wv = wd[in_ * e + ei];
                    let mut dot = T::zero();
                    for j in 0..per {
                        let gi = g[in_ * per + j];
                        dot += gi * xd[in_ * per + j];
                        dxe[in_ * per + j] = wv * gi;
                    }
                    dw[in_ * e + ei] = dot;
                }
                expert_grads.push(Some(dxe));
            }
            grads.push(Some(dw));
            grads.extend(expert_grads);
            grads
        });
        let mut parents = vec![weights.clone()];
        parents.extend(experts.iter().cloned());
        Ok(Tensor::from_op(out, shape, parents, backward))
    }

    /// Row-wise hard one-hot of the argmax with a straight-through gradient
    /// (forward emits the one-hot, backward passes the gradient unchanged).
    /// Ties resolve to the lowest index.
    pub fn straight_through_onehot(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "straight_through_onehot",
                format!("expected rank-2 input, got {:?}", self.shape()),
            ));
        }
        let (n, e) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![T::zero(); n * e];
        for r in 0..n {
            let row = &x[r * e..(r + 1) * e];
            let mut best = 0;
            for j in 1..e {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out[r * e + best] = T::one();
        }
        let backward: BackwardFn<T> = Box::new(move |g| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(
            out,
            vec![n, e],
            vec![self.clone()],
            backward,
        ))
    }

    // ---- losses ----------------------------------------------------------

    /// Elementwise binary cross-entropy on logits against constant targets:
    /// `max(z,0) - z*t + ln(1+e^{-|z|})`.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(Error::invalid(
                "bce_with_logits",
                format!(
                    "{} targets for {} logits",
                    targets.len(),
                    self.numel()
                ),
            ));
        }
        let z = self.data();
        let out: Vec<T> = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let tgt = targets.to_vec();
        let xc = self.clone();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let dz = xc
                .data()
                .iter()
                .zip(&tgt)
                .zip(g)
                .map(|((&z, &t), &gi)| gi * (stable_sigmoid(z) - t))
                .collect();
            vec![Some(dz)]
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            backward,
        ))
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn four(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn conv_out(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    op: &'static str,
) -> Result<(usize, usize)> {
    let oh = (h + 2 * pad).checked_sub(kh).map(|v| v / stride + 1);
    let ow = (w + 2 * pad).checked_sub(kw).map(|v| v / stride + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
        _ => Err(Error::invalid(
            op,
            format!(
                "kernel {}x{} with stride {} pad {} yields empty output for input {}x{}",
                kh, kw, stride, pad, h, w
            ),
        )),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

/// Unfolds one image `[ci, h, w]` into `col[ci*kh*kw, oh*ow]`; out-of-bounds
/// taps read as zero.
fn im2col<T: Scalar>(x: &[T], col: &mut [T], g: &ConvGeom) {
    let ohw = g.oh * g.ow;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let crow = &mut col[((c * g.kh + ky) * g.kw + kx) * ohw
                    ..((c * g.kh + ky) * g.kw + kx + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let orow = &mut crow[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        orow.fill(T::zero());
                        continue;
                    }
                    let xrow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-adds `col`-shaped gradients back onto the
/// image gradient.
fn col2im<T: Scalar>(dcol: &[T], dx: &mut [T], g: &ConvGeom) {
    let ohw = g.oh * g.ow;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let crow = &dcol[((c * g.kh + ky) * g.kw + kx) * ohw
                    ..((c * g.kh + ky) * g.kw + kx + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow =
                        &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in crow[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xrow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

// The three dense kernels below take whole-row subslices so the inner loops
// carry no bounds checks and auto-vectorize.

/// Accumulates `av * brow` into `orow`.
#[inline]
fn axpy_row<T: Scalar>(orow: &mut [T], av: T, brow: &[T]) {
    for (o, &bv) in orow.iter_mut().zip(brow) {
        *o += av * bv;
    }
}

pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy_row(orow, av, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `A [m,n] x B^T` where `B` is `[k,n]` -> `[m,k]`. Materializes the
/// transpose so the row-accumulation kernel vectorizes; the extra `n*k`
/// writes are negligible next to the `m*n*k` multiplies.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); n * k];
    for j in 0..k {
        for (p, &v) in b[j * n..(j + 1) * n].iter().enumerate() {
            bt[p * k + j] = v;
        }
    }
    matmul_nn(a, &bt, m, n, k)
}

/// `A^T x B` where `A` is `[m,k]`, `B` is `[m,n]` -> `[k,n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * k..(p + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy_row(&mut out[i * n..(i + 1) * n], av, brow);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape)
    }

    #[test]
    fn add_broadcasts_trailing_suffix() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t64(&[10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // lower-rank operand on the left works symmetrically
        let d = b.add(&a).unwrap();
        assert_eq!(d.data(), c.data());
    }

    #[test]
    fn add_rejects_non_suffix_shapes() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 6], &[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_operand_broadcasts() {
        let a = t64(&[1.0, 2.0], &[2]);
        let s = t64(&[10.0], &[1]);
        assert_eq!(a.mul(&s).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(s.mul(&a).unwrap().data(), &[10.0, 20.0]);
    }

    #[test]
    fn broadcast_backward_reduces() {
        let a = Tensor::<f64>::var(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::var(vec![5.0, 7.0], &[2]);
        let y = a.mul(&b).unwrap().sum_all();
        y.backward();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0, 5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0 + 3.0, 2.0 + 4.0]);
    }

    #[test]
    fn matmul_golden() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 4], &[2, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t64(&[2.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[2, 3]);
        let y = x.softmax_last();
        let d = y.data();
        assert!((d[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // softmax([2,0,0])_0 = e^2 / (e^2 + 2)
        let expect = 2f64.exp() / (2f64.exp() + 2.0);
        assert!((d[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let x = t64(&[0.0], &[1]);
        let y = x.softplus();
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn conv2d_golden_small() {
        // 1x1x3x3 input, single 2x2 kernel, stride 1, no pad.
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 1, 3, 3]);
        let w = t64(&[1.0, 0.0, 0.0, -1.0], &[1, 1, 2, 2]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // each output = top-left - bottom-right = -4
        assert_eq!(y.data(), &[-4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn conv2d_rejects_empty_output() {
        let x = t64(&[0.0; 9], &[1, 1, 3, 3]);
        let w = t64(&[0.0; 16], &[1, 1, 4, 4]);
        assert!(x.conv2d(&w, None, 1, 0).is_err());
    }

    #[test]
    fn depthwise_channel_mismatch_errors() {
        let x = t64(&[0.0; 18], &[1, 2, 3, 3]);
        let w = t64(&[0.0; 12], &[3, 2, 2]);
        assert!(x.depthwise_conv2d(&w, None, 1, 0).is_err());
    }

    #[test]
    fn layer_norm_normalizes_channels() {
        let x = t64(&[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0], &[1, 2, 2, 2]);
        let g = t64(&[1.0, 1.0], &[2]);
        let b = t64(&[0.0, 0.0], &[2]);
        let y = x.layer_norm_channels(&g, &b, 1e-6).unwrap();
        // Every site has channel values {v, v+4}: mean v+2, std 2.
        for s in 0..4 {
            assert!((y.data()[s] + 1.0).abs() < 1e-3);
            assert!((y.data()[4 + s] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn route_combine_mixes_by_sample() {
        let w = t64(&[1.0, 0.0, 0.25, 0.75], &[2, 2]);
        let e0 = t64(&[1.0, 1.0, 4.0, 4.0], &[2, 1, 1, 2]);
        let e1 = t64(&[2.0, 2.0, 8.0, 8.0], &[2, 1, 1, 2]);
        let y = Tensor::route_combine(&w, &[e0, e1]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 0.25 * 4.0 + 0.75 * 8.0, 7.0]);
    }

    #[test]
    fn straight_through_is_onehot_and_identity_grad() {
        let x = Tensor::<f64>::var(vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05], &[2, 3]);
        let h = x.straight_through_onehot().unwrap();
        assert_eq!(h.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let w = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        h.mul(&w).unwrap().sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn bce_at_logit_zero_is_ln_two() {
        // score 0.5 against any target gives ln 2
        let z = t64(&[0.0], &[1]);
        let l = z.bce_with_logits(&[1.0 / 7.0]).unwrap();
        assert!((l.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let x = Tensor::<f64>::var(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = x.gather_rows(&[0, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn tokens_roundtrip_layout() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[1, 2, 2, 2]);
        let t = x.nchw_to_tokens().unwrap();
        assert_eq!(t.shape(), &[4, 2]);
        // token (y=0,x=0) = channels (1, 5)
        assert_eq!(t.data()[0..2], [1.0, 5.0]);
        assert_eq!(t.data()[6..8], [4.0, 8.0]);
    }

    #[test]
    fn pad_replicate_and_crop_invert() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let p = x.pad2d(1, 1, 1, 1, PadMode::Replicate).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(p.data()[0], 1.0); // corner replicated
        assert_eq!(p.data()[15], 4.0);
        let c = p.crop2d(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), x.data());
    }
}
