//! The conditional noise predictor.
//!
//! ```text
//! [z_t ; cond] -> conv 2->16 (+t) -> conv 16->32 /2 (+t) -> cross-attn(ctx)
//!              -> conv 32->16 -> up x2 (+skip, +t) -> conv 16->1
//! ```
//!
//! The timestep enters as per-channel biases produced from a sinusoidal
//! embedding; the fused caption context enters through one cross-attention
//! block at 16x16.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};
use crate::nn::{self, Act, Conv2d, ConvSpec, Linear};
use crate::real::{gemm, MatRef, Real};
use crate::schedule::Latent;
use crate::sgi::{ContextEmbedding, WIDTH};
use crate::tensor::Params;
use crate::world::{CANVAS, CAPTION_LEN};

/// Width of the sinusoidal timestep embedding.
pub const TIME_DIM: usize = 32;
const C1: usize = 16;
const C2: usize = 32;

/// Sinusoidal embedding: `sin(t w_i)` then `cos(t w_i)`, `w_i = 10000^(-i/16)`.
pub fn timestep_embedding(t: usize) -> [f64; TIME_DIM] {
    let half = TIME_DIM / 2;
    let mut e = [0.0; TIME_DIM];
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = (t as f64 * w).sin();
        e[half + i] = (t as f64 * w).cos();
    }
    e
}

fn silu_rows<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * nn::sigmoid(v)).collect()
}

fn silu_rows_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = nn::sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    time: Linear,
    time_in: Linear,
    time_down: Linear,
    time_up: Linear,
    conv_in: Conv2d,
    down: Conv2d,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_o: Linear,
    up: Conv2d,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn register<T: Real, R: Rng>(p: &mut Params<T>, rng: &mut R) -> Self {
        Denoiser {
            time: Linear::register(p, "denoiser.time", TIME_DIM, TIME_DIM, true, rng),
            time_in: Linear::register(p, "denoiser.time_in", TIME_DIM, C1, true, rng),
            time_down: Linear::register(p, "denoiser.time_down", TIME_DIM, C2, true, rng),
            time_up: Linear::register(p, "denoiser.time_up", TIME_DIM, C1, true, rng),
            conv_in: Conv2d::register(p, "denoiser.conv_in", ConvSpec::same3(2, C1), rng, false),
            down: Conv2d::register(
                p,
                "denoiser.down",
                ConvSpec { cin: C1, cout: C2, k: 3, stride: 2, pad: 1, dil: 1 },
                rng,
                false,
            ),
            attn_q: Linear::register(p, "denoiser.attn.q", C2, WIDTH, false, rng),
            attn_k: Linear::register(p, "denoiser.attn.k", WIDTH, WIDTH, false, rng),
            attn_v: Linear::register(p, "denoiser.attn.v", WIDTH, WIDTH, false, rng),
            attn_o: Linear::register(p, "denoiser.attn.o", WIDTH, C2, true, rng),
            up: Conv2d::register(p, "denoiser.up", ConvSpec::same3(C2, C1), rng, false),
            conv_out: Conv2d::register(p, "denoiser.conv_out", ConvSpec::same3(C1, 1), rng, true),
        }
    }

    pub fn arch() -> &'static Denoiser {
        static ARCH: OnceLock<Denoiser> = OnceLock::new();
        ARCH.get_or_init(|| Denoiser::register::<f32, _>(&mut Params::new(), &mut ChaCha8Rng::seed_from_u64(0)))
    }

    pub fn param_count(&self) -> usize {
        let lin = [&self.time, &self.time_in, &self.time_down, &self.time_up, &self.attn_q, &self.attn_k, &self.attn_v, &self.attn_o];
        let conv = [&self.conv_in, &self.down, &self.up, &self.conv_out];
        lin.iter().map(|l| l.param_count()).sum::<usize>() + conv.iter().map(|c| c.param_count()).sum::<usize>()
    }

    fn scale<T: Real>() -> T {
        T::of(1.0 / (WIDTH as f64).sqrt())
    }

    /// Batched forward pass. `zt` and `cond` are `[1, B, 32, 32]`, `ts` holds
    /// one timestep per sample and `ctx` is `B` row-major `[4, 32]` contexts.
    pub fn forward<T: Real>(&self, p: &Params<T>, zt: &Act<T>, cond: &Act<T>, ts: &[usize], ctx: &[T]) -> DenoiserCache<T> {
        let b = zt.b;
        assert_eq!((zt.c, zt.h, zt.w), (1, CANVAS, CANVAS), "latent shape");
        assert_eq!((cond.c, cond.b, cond.h, cond.w), (1, b, CANVAS, CANVAS), "condition shape");
        assert_eq!(ts.len(), b);
        assert_eq!(ctx.len(), b * CAPTION_LEN * WIDTH);

        let temb: Vec<T> = ts.iter().flat_map(|&t| timestep_embedding(t).map(T::of)).collect();
        let te_pre = self.time.forward(p, &temb, b);
        let te = silu_rows(&te_pre);
        let bias_in = self.time_in.forward(p, &te, b);
        let bias_down = self.time_down.forward(p, &te, b);
        let bias_up = self.time_up.forward(p, &te, b);

        let x = Act::concat(&[zt, cond]);
        let mut a1 = self.conv_in.forward(p, &x);
        nn::add_sample_channel_bias(&mut a1, &bias_in);
        let h1 = nn::silu(&a1);
        let mut a2 = self.down.forward(p, &h1);
        nn::add_sample_channel_bias(&mut a2, &bias_down);
        let h2 = nn::silu(&a2);

        let n = h2.n();
        let hw = h2.hw();
        let s = Self::scale::<T>();
        let mut q = vec![T::zero(); WIDTH * n];
        gemm(
            T::one(),
            MatRef::new(p.get(self.attn_q.w).data(), WIDTH, C2),
            MatRef::new(&h2.data, C2, n),
            T::zero(),
            &mut q,
        );
        let k = self.attn_k.forward(p, ctx, b * CAPTION_LEN);
        let v = self.attn_v.forward(p, ctx, b * CAPTION_LEN);
        let mut weights = vec![T::zero(); b * CAPTION_LEN * hw];
        let mut o = vec![T::zero(); WIDTH * n];
        let mut ob = vec![T::zero(); WIDTH * hw];
        for bi in 0..b {
            let kb = &k[bi * CAPTION_LEN * WIDTH..(bi + 1) * CAPTION_LEN * WIDTH];
            let vb = &v[bi * CAPTION_LEN * WIDTH..(bi + 1) * CAPTION_LEN * WIDTH];
            let wb = &mut weights[bi * CAPTION_LEN * hw..(bi + 1) * CAPTION_LEN * hw];
            let qb = MatRef { data: &q[bi * hw..], rows: WIDTH, cols: hw, rs: n, cs: 1 };
            gemm(s, MatRef::new(kb, CAPTION_LEN, WIDTH), qb, T::zero(), wb);
            for col in 0..hw {
                let mx = (0..CAPTION_LEN).map(|r| wb[r * hw + col]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for r in 0..CAPTION_LEN {
                    let e = (wb[r * hw + col] - mx).exp();
                    wb[r * hw + col] = e;
                    z += e;
                }
                for r in 0..CAPTION_LEN {
                    wb[r * hw + col] /= z;
                }
            }
            gemm(T::one(), MatRef::new(vb, CAPTION_LEN, WIDTH).t(), MatRef::new(wb, CAPTION_LEN, hw), T::zero(), &mut ob);
            for c in 0..WIDTH {
                o[c * n + bi * hw..c * n + (bi + 1) * hw].copy_from_slice(&ob[c * hw..(c + 1) * hw]);
            }
        }
        let mut h3 = h2.clone();
        let bo = p.get(self.attn_o.b.expect("output bias")).data();
        for (c, row) in h3.data.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|x| *x += bo[c]);
        }
        gemm(
            T::one(),
            MatRef::new(p.get(self.attn_o.w).data(), C2, WIDTH),
            MatRef::new(&o, WIDTH, n),
            T::one(),
            &mut h3.data,
        );

        let mut a4 = nn::upsample2(&self.up.forward(p, &h3));
        a4.add_assign(&h1);
        nn::add_sample_channel_bias(&mut a4, &bias_up);
        let h4 = nn::silu(&a4);
        let out = self.conv_out.forward(p, &h4);
        DenoiserCache {
            temb,
            te_pre,
            te,
            x,
            a1,
            h1,
            a2,
            h2,
            q,
            k,
            v,
            weights,
            o,
            ctx: ctx.to_vec(),
            h3,
            a4,
            h4,
            out,
        }
    }

    /// Back-propagates `d_out`. Parameter gradients accumulate into `grads`
    /// when given; the latent gradient is returned when `want_dzt` is set.
    pub fn backward<T: Real>(
        &self,
        p: &Params<T>,
        c: &DenoiserCache<T>,
        d_out: &Act<T>,
        mut grads: Option<&mut Params<T>>,
        want_dzt: bool,
    ) -> DenoiserGrads<T> {
        let b = c.out.b;
        let dh4 = self.conv_out.backward(p, &c.h4, d_out, grads.as_deref_mut(), true).unwrap();
        let da4 = nn::silu_backward(&c.a4, &dh4);
        let d_bias_up = nn::sample_channel_bias_grad(&da4);
        let dup = nn::upsample2_backward(&da4);
        let dh3 = self.up.backward(p, &c.h3, &dup, grads.as_deref_mut(), true).unwrap();

        let n = c.h2.n();
        let hw = c.h2.hw();
        let s = Self::scale::<T>();
        let mut dh2 = dh3.clone();
        if let Some(g) = grads.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::new(&dh3.data, C2, n),
                MatRef::new(&c.o, WIDTH, n).t(),
                T::one(),
                g.get_mut(self.attn_o.w).data_mut(),
            );
            let db = g.get_mut(self.attn_o.b.expect("output bias")).data_mut();
            for (ch, row) in dh3.data.chunks(n).enumerate() {
                db[ch] += row.iter().copied().sum::<T>();
            }
        }
        let mut d_o = vec![T::zero(); WIDTH * n];
        gemm(
            T::one(),
            MatRef::new(p.get(self.attn_o.w).data(), C2, WIDTH).t(),
            MatRef::new(&dh3.data, C2, n),
            T::zero(),
            &mut d_o,
        );
        let mut dq = vec![T::zero(); WIDTH * n];
        let mut dk = vec![T::zero(); b * CAPTION_LEN * WIDTH];
        let mut dv = vec![T::zero(); b * CAPTION_LEN * WIDTH];
        let mut da = vec![T::zero(); CAPTION_LEN * hw];
        let mut dqb = vec![T::zero(); WIDTH * hw];
        for bi in 0..b {
            let span = bi * CAPTION_LEN * WIDTH..(bi + 1) * CAPTION_LEN * WIDTH;
            let wb = &c.weights[bi * CAPTION_LEN * hw..(bi + 1) * CAPTION_LEN * hw];
            let dob = MatRef { data: &d_o[bi * hw..], rows: WIDTH, cols: hw, rs: n, cs: 1 };
            gemm(T::one(), MatRef::new(wb, CAPTION_LEN, hw), dob.t(), T::zero(), &mut dv[span.clone()]);
            gemm(T::one(), MatRef::new(&c.v[span.clone()], CAPTION_LEN, WIDTH), dob, T::zero(), &mut da);
            for col in 0..hw {
                let dot: T = (0..CAPTION_LEN).map(|r| wb[r * hw + col] * da[r * hw + col]).sum();
                for r in 0..CAPTION_LEN {
                    da[r * hw + col] = wb[r * hw + col] * (da[r * hw + col] - dot);
                }
            }
            let qb = MatRef { data: &c.q[bi * hw..], rows: WIDTH, cols: hw, rs: n, cs: 1 };
            gemm(s, MatRef::new(&da, CAPTION_LEN, hw), qb.t(), T::zero(), &mut dk[span.clone()]);
            gemm(s, MatRef::new(&c.k[span], CAPTION_LEN, WIDTH).t(), MatRef::new(&da, CAPTION_LEN, hw), T::zero(), &mut dqb);
            for ch in 0..WIDTH {
                dq[ch * n + bi * hw..ch * n + (bi + 1) * hw].copy_from_slice(&dqb[ch * hw..(ch + 1) * hw]);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::new(&dq, WIDTH, n),
                MatRef::new(&c.h2.data, C2, n).t(),
                T::one(),
                g.get_mut(self.attn_q.w).data_mut(),
            );
        }
        gemm(
            T::one(),
            MatRef::new(p.get(self.attn_q.w).data(), WIDTH, C2).t(),
            MatRef::new(&dq, WIDTH, n),
            T::one(),
            &mut dh2.data,
        );
        let rows = b * CAPTION_LEN;
        let mut d_ctx = self.attn_k.backward(p, &c.ctx, &dk, rows, grads.as_deref_mut());
        let d_ctx_v = self.attn_v.backward(p, &c.ctx, &dv, rows, grads.as_deref_mut());
        d_ctx.iter_mut().zip(&d_ctx_v).for_each(|(a, &v)| *a += v);

        let da2 = nn::silu_backward(&c.a2, &dh2);
        let d_bias_down = nn::sample_channel_bias_grad(&da2);
        let mut dh1 = self.down.backward(p, &c.h1, &da2, grads.as_deref_mut(), true).unwrap();
        dh1.add_assign(&da4);
        let da1 = nn::silu_backward(&c.a1, &dh1);
        let d_bias_in = nn::sample_channel_bias_grad(&da1);
        let dx = self.conv_in.backward(p, &c.x, &da1, grads.as_deref_mut(), want_dzt);

        if let Some(g) = grads {
            let mut dte = self.time_in.backward(p, &c.te, &d_bias_in, b, Some(&mut *g));
            for (lin, d) in [(&self.time_down, &d_bias_down), (&self.time_up, &d_bias_up)] {
                let x = lin.backward(p, &c.te, d, b, Some(&mut *g));
                dte.iter_mut().zip(&x).for_each(|(a, &v)| *a += v);
            }
            let dpre = silu_rows_backward(&c.te_pre, &dte);
            self.time.backward(p, &c.temb, &dpre, b, Some(g));
        }
        DenoiserGrads {
            d_zt: dx.map(|d| d.split(1).0),
            d_ctx,
        }
    }
}

/// Intermediate activations of one denoiser pass.
pub struct DenoiserCache<T> {
    temb: Vec<T>,
    te_pre: Vec<T>,
    te: Vec<T>,
    x: Act<T>,
    a1: Act<T>,
    h1: Act<T>,
    a2: Act<T>,
    h2: Act<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    weights: Vec<T>,
    o: Vec<T>,
    ctx: Vec<T>,
    h3: Act<T>,
    a4: Act<T>,
    h4: Act<T>,
    /// Predicted noise `[1, B, 32, 32]`.
    pub out: Act<T>,
}

pub struct DenoiserGrads<T> {
    pub d_zt: Option<Act<T>>,
    /// Gradient w.r.t. the `B` contexts, row-major `[B * 4, 32]`.
    pub d_ctx: Vec<T>,
}

/// Deterministic denoiser parameters; the output convolution starts at zero.
pub fn init_denoiser<T: Real>(seed: u64) -> Params<T> {
    let mut p = Params::new();
    Denoiser::register(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Predicts the noise in `zt` given the condition image, timestep and context.
pub fn predict_noise<T: Real>(
    zt: &Latent<T>,
    cond: &Latent<T>,
    t: usize,
    context: &ContextEmbedding<T>,
    params: &Params<T>,
) -> Result<Latent<T>> {
    for (what, x) in [("latent", zt), ("condition", cond)] {
        ensure_arg!(
            x.shape() == [1, CANVAS, CANVAS],
            "{what} must be [1, {CANVAS}, {CANVAS}], got {:?}",
            x.shape()
        );
    }
    let cache = Denoiser::arch().forward(
        params,
        &Act::from_samples(&[zt]),
        &Act::from_samples(&[cond]),
        &[t],
        context.rows.data(),
    );
    Ok(cache.out.sample(0))
}
