//! Spatial Guidance Injector: keypoint annotations become padded, masked
//! token embeddings, pass through one self-attention layer, and are fused into
//! the caption context by cross-attention with a residual connection:
//!
//! ```text
//! fused = softmax(Q(C) K(A)^T / sqrt(d)) V(A) + C
//! ```
//!
//! where `C` is the frozen caption embedding and `A` the attended annotations.

use std::cell::Cell;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_arg, Result};
use crate::nn::{attention, attention_backward, AttnCache, Linear};
use crate::real::Real;
use crate::tensor::{Params, Slot, Tensor};
use crate::world::{SceneSpec, TokenSeq, CANVAS, CAPTION_LEN, KEYPOINTS_PER_FIGURE, SLOTS, VOCAB_SIZE};

thread_local! {
    static FUSE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of fusion evaluations made on this thread.
pub fn fuse_calls() -> u64 {
    FUSE_CALLS.with(|c| c.get())
}

/// Model width shared by captions, annotations and attention.
pub const WIDTH: usize = 32;
/// Padded annotation length.
pub const ANNOTATION_LEN: usize = 16;

/// Seed of the frozen caption-embedding table.
const CAPTION_TABLE_SEED: u64 = 0x00C1_1F00;

/// Tokenized keypoint annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationTokens {
    /// `figure * 5 + keypoint`, or 0 when padded.
    pub kp_ids: [u8; ANNOTATION_LEN],
    /// `(x_bin, y_bin)` by floor quantization; `(0, 0)` when padded.
    pub coords: [[u8; 2]; ANNOTATION_LEN],
    /// `true` for real tokens.
    pub mask: [bool; ANNOTATION_LEN],
}

impl AnnotationTokens {
    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lists keypoints figure-major, keypoint-minor, and pads to 16 tokens.
pub fn tokenize_annotations(scene: &SceneSpec) -> AnnotationTokens {
    let mut t = AnnotationTokens {
        kp_ids: [0; ANNOTATION_LEN],
        coords: [[0, 0]; ANNOTATION_LEN],
        mask: [false; ANNOTATION_LEN],
    };
    let bin = |v: f64| v.floor().clamp(0.0, (CANVAS - 1) as f64) as u8;
    let mut i = 0;
    for (f, fig) in scene.figures.iter().enumerate().take(SLOTS / KEYPOINTS_PER_FIGURE) {
        for (k, kp) in fig.keypoints.iter().enumerate() {
            t.kp_ids[i] = (f * KEYPOINTS_PER_FIGURE + k) as u8;
            t.coords[i] = [bin(kp[0]), bin(kp[1])];
            t.mask[i] = true;
            i += 1;
        }
    }
    t
}

/// Caption token embeddings `[4, 32]`, before or after fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding<T = f64> {
    pub rows: Tensor<T>,
}

impl<T: Real> ContextEmbedding<T> {
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        ensure_arg!(
            rows.shape() == [CAPTION_LEN, WIDTH],
            "context must be [{CAPTION_LEN}, {WIDTH}], got {:?}",
            rows.shape()
        );
        Ok(ContextEmbedding { rows })
    }
}

/// The frozen token table: 16 mutually orthogonal rows of norm `sqrt(32)`,
/// drawn once from a fixed seed by Gram-Schmidt.
pub fn caption_table() -> &'static [[f64; WIDTH]; VOCAB_SIZE] {
    static TABLE: OnceLock<[[f64; WIDTH]; VOCAB_SIZE]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(CAPTION_TABLE_SEED);
        let mut rows = [[0.0; WIDTH]; VOCAB_SIZE];
        for i in 0..VOCAB_SIZE {
            let mut v: [f64; WIDTH] = std::array::from_fn(|_| rng.sample(StandardNormal));
            for prev in &rows[..i] {
                let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / WIDTH as f64;
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            rows[i] = v.map(|a| a / n * (WIDTH as f64).sqrt());
        }
        rows
    })
}

/// The frozen caption encoder: one table row per token.
pub fn caption_context<T: Real>(caption: &TokenSeq) -> ContextEmbedding<T> {
    let table = caption_table();
    let data = caption
        .ids
        .iter()
        .flat_map(|&id| table[id as usize].iter().map(|&v| T::of(v)))
        .collect();
    ContextEmbedding {
        rows: Tensor::from_vec(&[CAPTION_LEN, WIDTH], data).expect("context shape"),
    }
}

/// Parameter layout of the injector.
#[derive(Clone, Debug)]
pub struct Sgi {
    kp_embed: Slot,
    x_embed: Slot,
    y_embed: Slot,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_o: Linear,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
}

fn normal_table<T: Real, R: Rng>(rng: &mut R, rows: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * WIDTH)
        .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(&[rows, WIDTH], data).expect("table shape")
}

impl Sgi {
    pub fn register<T: Real, R: Rng>(p: &mut Params<T>, rng: &mut R) -> Self {
        // Three summed tables; each scaled so the sum has unit variance.
        let std = 1.0 / 3f64.sqrt();
        let kp_embed = p.push("sgi.kp_embed", normal_table(rng, ANNOTATION_LEN, std));
        let x_embed = p.push("sgi.x_embed", normal_table(rng, CANVAS, std));
        let y_embed = p.push("sgi.y_embed", normal_table(rng, CANVAS, std));
        let mut lin = |name: &str| Linear::register(p, name, WIDTH, WIDTH, false, rng);
        Sgi {
            kp_embed,
            x_embed,
            y_embed,
            self_q: lin("sgi.self.q"),
            self_k: lin("sgi.self.k"),
            self_v: lin("sgi.self.v"),
            self_o: lin("sgi.self.o"),
            cross_q: lin("sgi.cross.q"),
            cross_k: lin("sgi.cross.k"),
            cross_v: lin("sgi.cross.v"),
        }
    }

    pub fn arch() -> &'static Sgi {
        static ARCH: OnceLock<Sgi> = OnceLock::new();
        ARCH.get_or_init(|| Sgi::register::<f32, _>(&mut Params::new(), &mut ChaCha8Rng::seed_from_u64(0)))
    }

    /// Cross-attention value projection, exposed for tests that zero it.
    pub fn cross_value_slot(&self) -> Slot {
        self.cross_v.w
    }

    pub fn param_count(&self) -> usize {
        (ANNOTATION_LEN + 2 * CANVAS) * WIDTH + 7 * WIDTH * WIDTH
    }

    fn scale<T: Real>() -> T {
        T::of(1.0 / (WIDTH as f64).sqrt())
    }

    pub fn embed<T: Real>(&self, p: &Params<T>, tokens: &AnnotationTokens) -> EmbedCache<T> {
        let (kp, xe, ye) = (p.get(self.kp_embed).data(), p.get(self.x_embed).data(), p.get(self.y_embed).data());
        let mut e = vec![T::zero(); ANNOTATION_LEN * WIDTH];
        for i in 0..ANNOTATION_LEN {
            let (id, [x, y]) = (tokens.kp_ids[i] as usize, tokens.coords[i]);
            for c in 0..WIDTH {
                e[i * WIDTH + c] = kp[id * WIDTH + c] + xe[x as usize * WIDTH + c] + ye[y as usize * WIDTH + c];
            }
        }
        let n = ANNOTATION_LEN;
        let q = self.self_q.forward(p, &e, n);
        let k = self.self_k.forward(p, &e, n);
        let v = self.self_v.forward(p, &e, n);
        let (o, attn) = attention(&q, &k, &v, n, n, WIDTH, WIDTH, Some(&tokens.mask), Self::scale());
        let mut out = self.self_o.forward(p, &o, n);
        for (i, row) in out.chunks_mut(WIDTH).enumerate() {
            if tokens.mask[i] {
                row.iter_mut().zip(&e[i * WIDTH..(i + 1) * WIDTH]).for_each(|(r, &x)| *r += x);
            } else {
                row.iter_mut().for_each(|r| *r = T::zero());
            }
        }
        EmbedCache {
            tokens: tokens.clone(),
            e,
            q,
            k,
            v,
            attn,
            o,
            out,
        }
    }

    pub fn fuse<T: Real>(&self, p: &Params<T>, context: &[T], ann: &[T], mask: &[bool; ANNOTATION_LEN]) -> FuseCache<T> {
        FUSE_CALLS.with(|c| c.set(c.get() + 1));
        let (nq, nk) = (CAPTION_LEN, ANNOTATION_LEN);
        let q = self.cross_q.forward(p, context, nq);
        let k = self.cross_k.forward(p, ann, nk);
        let v = self.cross_v.forward(p, ann, nk);
        let (o, attn) = attention(&q, &k, &v, nq, nk, WIDTH, WIDTH, Some(mask), Self::scale());
        let out = o.iter().zip(context).map(|(&a, &c)| a + c).collect();
        FuseCache {
            context: context.to_vec(),
            ann: ann.to_vec(),
            q,
            k,
            v,
            attn,
            out,
        }
    }

    /// Full forward pass: embed annotations, then fuse into `context`.
    pub fn forward<T: Real>(&self, p: &Params<T>, context: &[T], tokens: &AnnotationTokens) -> (EmbedCache<T>, FuseCache<T>) {
        let emb = self.embed(p, tokens);
        let fuse = self.fuse(p, context, &emb.out, &tokens.mask);
        (emb, fuse)
    }

    /// Back-propagates the gradient of the fused context into `grads`.
    pub fn backward<T: Real>(&self, p: &Params<T>, emb: &EmbedCache<T>, fuse: &FuseCache<T>, d_out: &[T], grads: &mut Params<T>) {
        let (nq, nk, n) = (CAPTION_LEN, ANNOTATION_LEN, ANNOTATION_LEN);
        let s = Self::scale();
        let (dq, dk, dv) = attention_backward(&fuse.attn, &fuse.q, &fuse.k, &fuse.v, d_out, nq, nk, WIDTH, WIDTH, s);
        // The caption context is frozen; its gradient is not needed.
        self.cross_q.backward(p, &fuse.context, &dq, nq, Some(grads));
        let mut d_ann = self.cross_k.backward(p, &fuse.ann, &dk, nk, Some(grads));
        let d_ann_v = self.cross_v.backward(p, &fuse.ann, &dv, nk, Some(grads));
        d_ann.iter_mut().zip(&d_ann_v).for_each(|(a, &b)| *a += b);

        // Padded output rows were zeroed: no gradient flows through them.
        for (i, row) in d_ann.chunks_mut(WIDTH).enumerate() {
            if !emb.tokens.mask[i] {
                row.iter_mut().for_each(|r| *r = T::zero());
            }
        }
        let mut de = d_ann.clone();
        let d_o = self.self_o.backward(p, &emb.o, &d_ann, n, Some(grads));
        let (dqs, dks, dvs) = attention_backward(&emb.attn, &emb.q, &emb.k, &emb.v, &d_o, n, n, WIDTH, WIDTH, s);
        for (lin, d) in [(&self.self_q, &dqs), (&self.self_k, &dks), (&self.self_v, &dvs)] {
            let dx = lin.backward(p, &emb.e, d, n, Some(grads));
            de.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b);
        }
        for i in 0..n {
            let (id, [x, y]) = (emb.tokens.kp_ids[i] as usize, emb.tokens.coords[i]);
            let row = &de[i * WIDTH..(i + 1) * WIDTH];
            for (slot, r) in [(self.kp_embed, id), (self.x_embed, x as usize), (self.y_embed, y as usize)] {
                let t = grads.get_mut(slot).data_mut();
                t[r * WIDTH..(r + 1) * WIDTH].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

pub struct EmbedCache<T> {
    tokens: AnnotationTokens,
    e: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: AttnCache<T>,
    o: Vec<T>,
    /// Attended annotations `[16, 32]`; padded rows are zero.
    pub out: Vec<T>,
}

pub struct FuseCache<T> {
    context: Vec<T>,
    ann: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: AttnCache<T>,
    /// Fused context `[4, 32]`.
    pub out: Vec<T>,
}

impl<T> FuseCache<T> {
    /// Cross-attention weights `[4, 16]`.
    pub fn weights(&self) -> &[T] {
        &self.attn.weights
    }
}

/// Deterministic injector parameters.
pub fn init_sgi<T: Real>(seed: u64) -> Params<T> {
    let mut p = Params::new();
    Sgi::register(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Self-attended annotation embeddings `[16, 32]`.
pub fn embed_annotations<T: Real>(tokens: &AnnotationTokens, params: &Params<T>) -> Tensor<T> {
    let out = Sgi::arch().embed(params, tokens).out;
    Tensor::from_vec(&[ANNOTATION_LEN, WIDTH], out).expect("annotation shape")
}

/// Fuses attended annotations into the caption context.
pub fn sgi_fuse<T: Real>(
    context: &ContextEmbedding<T>,
    ann_emb: &Tensor<T>,
    mask: &[bool; ANNOTATION_LEN],
    params: &Params<T>,
) -> Result<ContextEmbedding<T>> {
    ensure_arg!(
        ann_emb.shape() == [ANNOTATION_LEN, WIDTH],
        "annotation embedding must be [{ANNOTATION_LEN}, {WIDTH}]"
    );
    let cache = Sgi::arch().fuse(params, context.rows.data(), ann_emb.data(), mask);
    ContextEmbedding::new(Tensor::from_vec(&[CAPTION_LEN, WIDTH], cache.out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{sample_scene, GenConfig};

    #[test]
    fn tokenization_contract() {
        let s = sample_scene(2, &GenConfig::with_count(1)).unwrap();
        let t = tokenize_annotations(&s);
        assert_eq!(t.mask, [true, true, true, true, true, false, false, false, false, false, false, false, false, false, false, false]);
        for i in 5..16 {
            assert_eq!((t.kp_ids[i], t.coords[i]), (0, [0, 0]));
        }
        let mut s3 = sample_scene(2, &GenConfig::with_count(3)).unwrap();
        s3.figures[1].keypoints[2] = [15.7, 3.2];
        let t = tokenize_annotations(&s3);
        assert_eq!(t.real_count(), 15);
        assert_eq!(t.kp_ids[7], 7);
        assert_eq!(t.coords[7], [15, 3]);
    }

    #[test]
    fn caption_table_rows_are_orthogonal() {
        let t = caption_table();
        for i in 0..VOCAB_SIZE {
            for j in 0..VOCAB_SIZE {
                let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { WIDTH as f64 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_real_token_reduces_to_value_path_plus_residual() {
        let p = init_sgi::<f64>(3);
        let arch = Sgi::arch();
        let mut tokens = tokenize_annotations(&sample_scene(4, &GenConfig::with_count(1)).unwrap());
        for m in tokens.mask.iter_mut().skip(1) {
            *m = false;
        }
        let cache = arch.embed(&p, &tokens);
        let e = &cache.e[..WIDTH];
        let v = arch.self_v.forward(&p, e, 1);
        let want: Vec<f64> = arch.self_o.forward(&p, &v, 1).iter().zip(e).map(|(a, b)| a + b).collect();
        for (a, b) in cache.out[..WIDTH].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cache.out[WIDTH..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn padded_positions_do_not_affect_real_rows() {
        let p = init_sgi::<f64>(5);
        let tokens = tokenize_annotations(&sample_scene(6, &GenConfig::with_count(2)).unwrap());
        let base = embed_annotations(&tokens, &p);
        let mut swapped = tokens.clone();
        // Give two padded positions distinct contents, then swap them.
        swapped.kp_ids[12] = 3;
        swapped.coords[12] = [9, 9];
        let a = embed_annotations(&swapped, &p);
        swapped.kp_ids.swap(12, 13);
        swapped.coords.swap(12, 13);
        let b = embed_annotations(&swapped, &p);
        for out in [&a, &b] {
            assert_eq!(&out.data()[..10 * WIDTH], &base.data()[..10 * WIDTH]);
        }
    }

    #[test]
    fn fusion_identities() {
        let mut p = init_sgi::<f64>(7);
        let scene = sample_scene(8, &GenConfig::default()).unwrap();
        let tokens = tokenize_annotations(&scene);
        let ctx = caption_context::<f64>(&crate::world::encode_caption(&scene));
        let ann = embed_annotations(&tokens, &p);

        let fused = sgi_fuse(&ctx, &ann, &[false; ANNOTATION_LEN], &p).unwrap();
        assert_eq!(fused, ctx);

        let cache = Sgi::arch().fuse(&p, ctx.rows.data(), ann.data(), &tokens.mask);
        for row in cache.weights().chunks(ANNOTATION_LEN) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().zip(&tokens.mask).all(|(&w, &m)| m || w == 0.0));
        }

        p.get_mut(Sgi::arch().cross_value_slot()).data_mut().iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(sgi_fuse(&ctx, &ann, &tokens.mask, &p).unwrap(), ctx);
    }
}
