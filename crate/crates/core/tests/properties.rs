use proptest::prelude::*;

use ecnet::checkpoint::{Block, Container};
use ecnet::eval::{nme_metric, pck_metric};
use ecnet::keypoint::{render_gt_heatmaps, HeatmapStack};
use ecnet::losses::{base_denoising_loss, dcl_loss, total_loss, weighted_sd_loss, LossConfig, Stage};
use ecnet::nn::attention;
use ecnet::schedule::{derive_x0, diffuse, make_schedule, noise_diff_latent};
use ecnet::sgi::{caption_context, embed_annotations, init_sgi, sgi_fuse, tokenize_annotations, ANNOTATION_LEN, WIDTH};
use ecnet::world::{encode_caption, render_image, sample_scene, GenConfig, SceneSpec, CANVAS, SLOTS};
use ecnet::Tensor;

fn tensor(len: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0..3.0f64, len).prop_map(move |v| Tensor::from_vec(&[1, 1, len], v).unwrap())
}

fn scene() -> impl Strategy<Value = SceneSpec> {
    any::<u64>().prop_map(|s| sample_scene(s, &GenConfig::default()).unwrap())
}

fn stack(seed: u64) -> HeatmapStack<f64> {
    render_gt_heatmaps(&sample_scene(seed, &GenConfig::default()).unwrap(), 1.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bars_decrease_inside_the_unit_interval(steps in 2usize..400, lo in 1e-5..0.01f64, span in 0.0..0.05f64) {
        let s = make_schedule(steps, lo, lo + span).unwrap();
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn derived_image_inverts_diffusion(z0 in tensor(16), eps in tensor(16), t in 0usize..200) {
        let s = make_schedule(200, 5e-4, 0.1).unwrap();
        let zt = diffuse(&z0, t, &eps, &s).unwrap();
        let back = derive_x0(&zt, &eps, t, &s).unwrap();
        prop_assert!(back.max_abs_diff(&z0) < 1e-6);
        // The noise-difference image is the clean estimate scaled by the signal level.
        let nd = noise_diff_latent(&zt, &eps, t, &s).unwrap();
        let scaled = back.map(|v| v * s.signal_noise(t).0);
        prop_assert!(nd.max_abs_diff(&scaled) < 1e-9);
    }

    #[test]
    fn scenes_and_captions_respect_their_contracts(s in scene()) {
        prop_assert!((1..=3).contains(&s.figures.len()));
        for f in &s.figures {
            for p in f.keypoints {
                prop_assert!(p.iter().all(|&c| (0.0..=(CANVAS - 1) as f64).contains(&c)));
            }
        }
        let cap = encode_caption(&s);
        prop_assert_eq!(cap.ids.len(), 4);
        prop_assert!((1..=3).contains(&cap.ids[0]));
        let img = render_image(&s);
        prop_assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let tok = tokenize_annotations(&s);
        prop_assert_eq!(tok.real_count(), s.keypoint_count());
        for i in 0..ANNOTATION_LEN {
            if !tok.mask[i] {
                prop_assert_eq!((tok.kp_ids[i], tok.coords[i]), (0, [0, 0]));
            }
        }
    }

    #[test]
    fn fusion_keeps_the_context_shape_and_ignores_padding(s in scene(), seed in any::<u64>(), a in 0usize..16, b in 0usize..16) {
        let p = init_sgi::<f64>(seed);
        let ctx = caption_context::<f64>(&encode_caption(&s));
        let tok = tokenize_annotations(&s);
        let emb = embed_annotations(&tok, &p);
        let out = sgi_fuse(&ctx, &emb, &tok.mask, &p).unwrap();
        prop_assert_eq!(out.rows.shape(), ctx.rows.shape());
        prop_assert!(out.rows.is_finite());
        if !tok.mask[a] && !tok.mask[b] {
            let mut swapped = emb.clone();
            for c in 0..WIDTH {
                swapped.data_mut().swap(a * WIDTH + c, b * WIDTH + c);
            }
            let out2 = sgi_fuse(&ctx, &swapped, &tok.mask, &p).unwrap();
            prop_assert!(out2.rows.max_abs_diff(&out.rows) < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_a_per_row_logit_shift(
        q in prop::collection::vec(-2.0..2.0f64, 3 * 4),
        k in prop::collection::vec(-2.0..2.0f64, 5 * 4),
        shift in prop::collection::vec(-5.0..5.0f64, 3),
        mask in prop::collection::vec(any::<bool>(), 5),
    ) {
        let v: Vec<f64> = (0..5 * 2).map(|i| i as f64).collect();
        let (_, c0) = attention(&q, &k, &v, 3, 5, 4, 2, Some(&mask), 1.0);
        // Appending a column holding the shift to q and a column of ones to k
        // adds the shift to every logit of that query row.
        let q2: Vec<f64> = (0..3).flat_map(|i| q[i * 4..i * 4 + 4].iter().copied().chain([shift[i]])).collect();
        let k2: Vec<f64> = (0..5).flat_map(|j| k[j * 4..j * 4 + 4].iter().copied().chain([1.0])).collect();
        let (_, c1) = attention(&q2, &k2, &v, 3, 5, 5, 2, Some(&mask), 1.0);
        for (x, y) in c0.weights.iter().zip(&c1.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for row in c0.weights.chunks(5) {
            let sum: f64 = row.iter().sum();
            let ok = if mask.iter().any(|&m| m) { (sum - 1.0).abs() < 1e-9 } else { sum == 0.0 };
            prop_assert!(ok, "row sum {}", sum);
        }
    }

    #[test]
    fn loss_orderings(eps in tensor(1024), hat in tensor(1024), seed in any::<u64>(), lambda in 0.0..5.0f64, l_dc in 0.0..3.0f64, alpha in 0.0..2.0f64) {
        let shape = [1, CANVAS, CANVAS];
        let eps = Tensor::from_vec(&shape, eps.into_data()).unwrap();
        let hat = Tensor::from_vec(&shape, hat.into_data()).unwrap();
        let cfg = LossConfig { lambda, alpha, ..LossConfig::default() };
        let base = base_denoising_loss(&eps, &hat).unwrap();
        let l_h = weighted_sd_loss(&eps, &hat, &stack(seed), &cfg).unwrap();
        prop_assert!(l_h >= base - 1e-12);
        prop_assert!(total_loss(l_h, l_dc, &cfg).unwrap() >= l_h);
    }

    #[test]
    fn only_the_selected_stage_is_read(t in 0usize..200, a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let cfg = LossConfig::default();
        let inp = stack(a);
        let (drv, dff) = (stack(b), stack(c));
        let blank = HeatmapStack::new(Tensor::full(&[SLOTS, CANVAS, CANVAS], 7.0)).unwrap();
        let (v, stage) = dcl_loss(t, &cfg, &inp, &drv, &dff).unwrap();
        prop_assert_eq!(stage, if t < 120 { Stage::Drv } else { Stage::Dff });
        let v2 = match stage {
            Stage::Drv => dcl_loss(t, &cfg, &inp, &drv, &blank).unwrap().0,
            Stage::Dff => dcl_loss(t, &cfg, &inp, &blank, &dff).unwrap().0,
        };
        prop_assert_eq!(v, v2);
    }

    #[test]
    fn pck_is_monotone_and_nme_scale_free(s in scene(), noise in prop::collection::vec(-4.0..4.0f64, 2 * SLOTS), r in 0.0..6.0f64, dr in 0.0..6.0f64) {
        let gt = s.slots();
        let pred: Vec<[f64; 2]> = (0..SLOTS)
            .map(|i| {
                let g = gt[i].unwrap_or([0.0, 0.0]);
                [g[0] + noise[2 * i], g[1] + noise[2 * i + 1]]
            })
            .collect();
        let lo = pck_metric(&pred, &gt, r).unwrap();
        let hi = pck_metric(&pred, &gt, r + dr).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo) && lo <= hi);
        let nme = nme_metric(&pred, &gt, &s).unwrap();
        prop_assert!(nme >= 0.0);
        let mut big = s.clone();
        for f in &mut big.figures {
            for p in &mut f.keypoints {
                *p = [p[0] * 2.0, p[1] * 2.0];
            }
        }
        let pred2: Vec<[f64; 2]> = pred.iter().map(|p| [p[0] * 2.0, p[1] * 2.0]).collect();
        prop_assert!((nme_metric(&pred2, &big.slots(), &big).unwrap() - nme).abs() < 1e-12);
    }

    #[test]
    fn containers_round_trip_and_detect_any_flipped_byte(
        data in prop::collection::vec(-1e6..1e6f64, 0..20),
        name in "[a-z.]{1,12}",
        flip in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let mut c = Container::default();
        c.push(Block::new(name, &[data.len()], data));
        c.push(Block::scalar("s", -0.0));
        let bytes = c.encode();
        let back = Container::decode(&bytes, "x".as_ref()).unwrap();
        prop_assert_eq!(back.encode(), bytes.clone());
        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= 1 << bit;
        prop_assert!(Container::decode(&bad, "x".as_ref()).is_err());
    }
}
