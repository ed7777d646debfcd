//! Batched layers with hand-derived backward passes.
//!
//! Activations use a channel-major layout `[C][B][H][W]`, so a convolution
//! over a whole batch is one matrix product and channel concatenation is plain
//! buffer concatenation.

use rand::Rng;

use crate::real::{gemm, MatRef, Real};
use crate::tensor::{Params, Slot, Tensor};

/// A batch of feature maps in `[C][B][H][W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            b,
            h,
            w,
            data: vec![T::zero(); c * b * h * w],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.b, self.h, self.w)
    }

    /// Columns per channel row: `B * H * W`.
    #[inline]
    pub fn n(&self) -> usize {
        self.b * self.h * self.w
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// The `H*W` plane of channel `c`, sample `b`.
    #[inline]
    pub fn plane(&self, c: usize, b: usize) -> &[T] {
        let hw = self.hw();
        let off = (c * self.b + b) * hw;
        &self.data[off..off + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize, b: usize) -> &mut [T] {
        let hw = self.hw();
        let off = (c * self.b + b) * hw;
        &mut self.data[off..off + hw]
    }

    /// Stacks channels of `parts` (which share batch and spatial size).
    pub fn concat(parts: &[&Act<T>]) -> Self {
        let (b, h, w) = (parts[0].b, parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut c = 0;
        for p in parts {
            assert!(p.b == b && p.h == h && p.w == w, "concat geometry mismatch");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Act { c, b, h, w, data }
    }

    /// Splits channels at `at`; inverse of [`Act::concat`] for two parts.
    pub fn split(&self, at: usize) -> (Self, Self) {
        let cut = at * self.n();
        (
            Act {
                c: at,
                b: self.b,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Act {
                c: self.c - at,
                b: self.b,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    /// Gathers sample-major tensors `[C, H, W]` into a batch.
    pub fn from_samples(samples: &[&Tensor<T>]) -> Self {
        let s = samples[0].shape();
        assert_eq!(s.len(), 3, "samples must be [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let b = samples.len();
        let mut a = Act::zeros(c, b, h, w);
        for (bi, t) in samples.iter().enumerate() {
            assert_eq!(t.shape(), s, "samples differ in shape");
            for ci in 0..c {
                a.plane_mut(ci, bi)
                    .copy_from_slice(&t.data()[ci * h * w..(ci + 1) * h * w]);
            }
        }
        a
    }

    /// Extracts sample `b` as a `[C, H, W]` tensor.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.c * self.hw());
        for c in 0..self.c {
            data.extend_from_slice(self.plane(c, b));
        }
        Tensor::from_vec(&[self.c, self.h, self.w], data).expect("consistent shape")
    }

    pub fn add_assign(&mut self, other: &Act<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

/// 2-D convolution with square kernels, zero padding, stride and dilation.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub w: Slot,
    pub b: Slot,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvSpec {
    pub fn same3(cin: usize, cout: usize) -> Self {
        ConvSpec { cin, cout, k: 3, stride: 1, pad: 1, dil: 1 }
    }
}

impl Conv2d {
    /// Registers weights (fan-in uniform, or zeros) and a zero bias.
    pub fn register<T: Real, R: Rng>(
        p: &mut Params<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
        zero_init: bool,
    ) -> Self {
        let fan_in = spec.cin * spec.k * spec.k;
        let wshape = [spec.cout, fan_in];
        let wt = if zero_init {
            Tensor::zeros(&wshape)
        } else {
            fan_in_uniform(rng, &wshape, fan_in)
        };
        let w = p.push(format!("{name}.weight"), wt);
        let b = p.push(format!("{name}.bias"), Tensor::zeros(&[spec.cout]));
        Conv2d {
            cin: spec.cin,
            cout: spec.cout,
            k: spec.k,
            stride: spec.stride,
            pad: spec.pad,
            dil: spec.dil,
            w,
            b,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dil * (self.k - 1) + 1;
        (
            (h + 2 * self.pad - span) / self.stride + 1,
            (w + 2 * self.pad - span) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + off` lies
    /// inside `[0, w)`.
    fn valid_range(&self, off: isize, w: usize, wo: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((w as isize - off + s - 1) / s).clamp(0, wo as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    fn im2col<T: Real>(&self, x: &Act<T>) -> Vec<T> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let n = x.b * ho * wo;
        let kk = self.k * self.k;
        let mut cols = vec![T::zero(); self.cin * kk * n];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * n;
                    let off = (kx * self.dil) as isize - self.pad as isize;
                    let (lo, hi) = self.valid_range(off, x.w, wo);
                    for b in 0..x.b {
                        let plane = x.plane(ci, b);
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky * self.dil) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize || lo >= hi {
                                continue;
                            }
                            let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let dst = &mut cols[row + (b * ho + oy) * wo..row + (b * ho + oy + 1) * wo];
                            let start = (lo as isize * self.stride as isize + off) as usize;
                            if self.stride == 1 {
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src[start + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut Act<T>) {
        let (ho, wo) = self.out_hw(dx.h, dx.w);
        let n = dx.b * ho * wo;
        let kk = self.k * self.k;
        let (h, w) = (dx.h, dx.w);
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * n;
                    let off = (kx * self.dil) as isize - self.pad as isize;
                    let (lo, hi) = self.valid_range(off, w, wo);
                    for b in 0..dx.b {
                        let plane = dx.plane_mut(ci, b);
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky * self.dil) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize || lo >= hi {
                                continue;
                            }
                            let src = &cols[row + (b * ho + oy) * wo..row + (b * ho + oy + 1) * wo];
                            let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let start = (lo as isize * self.stride as isize + off) as usize;
                            if self.stride == 1 {
                                for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for (j, &v) in src[lo..hi].iter().enumerate() {
                                    dst[start + j * self.stride] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Act<T>) -> Act<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let n = x.b * ho * wo;
        let kdim = self.cin * self.k * self.k;
        let mut y = Act::zeros(self.cout, x.b, ho, wo);
        let bias = p.get(self.b).data();
        for (co, row) in y.data.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        let wm = MatRef::new(p.get(self.w).data(), self.cout, kdim);
        if self.is_pointwise() {
            gemm(T::one(), wm, MatRef::new(&x.data, kdim, n), T::one(), &mut y.data);
        } else {
            let cols = self.im2col(x);
            gemm(T::one(), wm, MatRef::new(&cols, kdim, n), T::one(), &mut y.data);
        }
        y
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient (when requested).
    pub fn backward<T: Real>(
        &self,
        p: &Params<T>,
        x: &Act<T>,
        dy: &Act<T>,
        grads: Option<&mut Params<T>>,
        want_dx: bool,
    ) -> Option<Act<T>> {
        let n = dy.n();
        let kdim = self.cin * self.k * self.k;
        let cols_owned;
        let cols: &[T] = if self.is_pointwise() {
            &x.data
        } else if grads.is_some() {
            cols_owned = self.im2col(x);
            &cols_owned
        } else {
            &[]
        };
        if let Some(g) = grads {
            gemm(
                T::one(),
                MatRef::new(&dy.data, self.cout, n),
                MatRef::new(cols, kdim, n).t(),
                T::one(),
                g.get_mut(self.w).data_mut(),
            );
            let db = g.get_mut(self.b).data_mut();
            for (co, row) in dy.data.chunks(n).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if !want_dx {
            return None;
        }
        let wm = MatRef::new(p.get(self.w).data(), self.cout, kdim);
        let mut dx = x.zeros_like();
        if self.is_pointwise() {
            gemm(T::one(), wm.t(), MatRef::new(&dy.data, self.cout, n), T::zero(), &mut dx.data);
        } else {
            let mut dcols = vec![T::zero(); kdim * n];
            gemm(T::one(), wm.t(), MatRef::new(&dy.data, self.cout, n), T::zero(), &mut dcols);
            self.col2im(&dcols, &mut dx);
        }
        Some(dx)
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    x.logistic()
}

pub fn silu<T: Real>(x: &Act<T>) -> Act<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = *v * sigmoid(*v));
    y
}

/// Gradient of SiLU given its pre-activation input.
pub fn silu_backward<T: Real>(x: &Act<T>, dy: &Act<T>) -> Act<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    }
    dx
}

pub fn sigmoid_act<T: Real>(x: &Act<T>) -> Act<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    y
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<T: Real>(y: &Act<T>, dy: &Act<T>) -> Act<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data.iter_mut().zip(&y.data) {
        *d *= s * (T::one() - s);
    }
    dx
}

pub fn upsample2<T: Real>(x: &Act<T>) -> Act<T> {
    let mut y = Act::zeros(x.c, x.b, x.h * 2, x.w * 2);
    let w2 = x.w * 2;
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.plane(c, b).to_vec();
            let dst = y.plane_mut(c, b);
            for iy in 0..x.h {
                for ix in 0..x.w {
                    let v = src[iy * x.w + ix];
                    let o = 2 * iy * w2 + 2 * ix;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + w2] = v;
                    dst[o + w2 + 1] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.b, h, w);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.plane(c, b).to_vec();
            let dst = dx.plane_mut(c, b);
            for iy in 0..h {
                for ix in 0..w {
                    let o = 2 * iy * dy.w + 2 * ix;
                    dst[iy * w + ix] = src[o] + src[o + 1] + src[o + dy.w] + src[o + dy.w + 1];
                }
            }
        }
    }
    dx
}

/// Adds `bias[b * C + c]` to every position of channel `c`, sample `b`.
pub fn add_sample_channel_bias<T: Real>(x: &mut Act<T>, bias: &[T]) {
    assert_eq!(bias.len(), x.b * x.c);
    for c in 0..x.c {
        for b in 0..x.b {
            let v = bias[b * x.c + c];
            x.plane_mut(c, b).iter_mut().for_each(|e| *e += v);
        }
    }
}

/// Gradient of [`add_sample_channel_bias`] w.r.t. the bias.
pub fn sample_channel_bias_grad<T: Real>(dy: &Act<T>) -> Vec<T> {
    let mut g = vec![T::zero(); dy.b * dy.c];
    for c in 0..dy.c {
        for b in 0..dy.b {
            g[b * dy.c + c] = dy.plane(c, b).iter().copied().sum();
        }
    }
    g
}

/// Row-major dense layer: `y[n, out] = x[n, in] W^T + b`, `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub w: Slot,
    pub b: Option<Slot>,
}

impl Linear {
    pub fn register<T: Real, R: Rng>(
        p: &mut Params<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = p.push(format!("{name}.weight"), fan_in_uniform(rng, &[dout, din], din));
        let b = bias.then(|| p.push(format!("{name}.bias"), Tensor::zeros(&[dout])));
        Linear { din, dout, w, b }
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.b.is_some() { self.dout } else { 0 }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.din);
        let mut y = vec![T::zero(); rows * self.dout];
        if let Some(b) = self.b {
            let bias = p.get(b).data();
            for r in y.chunks_mut(self.dout) {
                r.copy_from_slice(bias);
            }
        }
        gemm(
            T::one(),
            MatRef::new(x, rows, self.din),
            MatRef::new(p.get(self.w).data(), self.dout, self.din).t(),
            T::one(),
            &mut y,
        );
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &Params<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        grads: Option<&mut Params<T>>,
    ) -> Vec<T> {
        if let Some(g) = grads {
            gemm(
                T::one(),
                MatRef::new(dy, rows, self.dout).t(),
                MatRef::new(x, rows, self.din),
                T::one(),
                g.get_mut(self.w).data_mut(),
            );
            if let Some(b) = self.b {
                let db = g.get_mut(b).data_mut();
                for r in dy.chunks(self.dout) {
                    for (d, &v) in db.iter_mut().zip(r) {
                        *d += v;
                    }
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.din];
        gemm(
            T::one(),
            MatRef::new(dy, rows, self.dout),
            MatRef::new(p.get(self.w).data(), self.dout, self.din),
            T::zero(),
            &mut dx,
        );
        dx
    }
}

/// Cached quantities of one single-head attention evaluation.
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    /// Attention weights `[nq, nk]`; rows are zero when every key is masked.
    pub weights: Vec<T>,
}

/// Single-head scaled dot-product attention on row-major matrices:
/// `out[nq, dv] = softmax(q k^T * scale) v`, with masked keys excluded.
///
/// When every key is masked the output rows are defined to be zero.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    key_mask: Option<&[bool]>,
    scale: T,
) -> (Vec<T>, AttnCache<T>) {
    let mut s = vec![T::zero(); nq * nk];
    gemm(scale, MatRef::new(q, nq, d), MatRef::new(k, nk, d).t(), T::zero(), &mut s);
    let live = |j: usize| key_mask.is_none_or(|m| m[j]);
    for row in s.chunks_mut(nk) {
        let mx = (0..nk)
            .filter(|&j| live(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        if mx == T::neg_infinity() {
            row.iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let mut z = T::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if live(j) {
                *x = (*x - mx).exp();
                z += *x;
            } else {
                *x = T::zero();
            }
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    let mut out = vec![T::zero(); nq * dv];
    gemm(T::one(), MatRef::new(&s, nq, nk), MatRef::new(v, nk, dv), T::zero(), &mut out);
    (out, AttnCache { weights: s })
}

/// Returns `(dq, dk, dv)` for [`attention`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    cache: &AttnCache<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let a = &cache.weights;
    let mut dvv = vec![T::zero(); nk * dv];
    gemm(T::one(), MatRef::new(a, nq, nk).t(), MatRef::new(dout, nq, dv), T::zero(), &mut dvv);
    let mut da = vec![T::zero(); nq * nk];
    gemm(T::one(), MatRef::new(dout, nq, dv), MatRef::new(v, nk, dv).t(), T::zero(), &mut da);
    // softmax Jacobian; masked entries have a == 0 and stay zero.
    for (arow, drow) in a.chunks(nk).zip(da.chunks_mut(nk)) {
        let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
        for (dd, &aa) in drow.iter_mut().zip(arow) {
            *dd = aa * (*dd - dot);
        }
    }
    let mut dq = vec![T::zero(); nq * d];
    gemm(scale, MatRef::new(&da, nq, nk), MatRef::new(k, nk, d), T::zero(), &mut dq);
    let mut dk = vec![T::zero(); nk * d];
    gemm(scale, MatRef::new(&da, nq, nk).t(), MatRef::new(q, nq, d), T::zero(), &mut dk);
    (dq, dk, dvv)
}
