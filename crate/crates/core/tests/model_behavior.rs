//! Structural properties of the model: ablation degeneracies, the
//! inference simplification, delivery directionality, stage geometry and
//! parameter-count stability.

use messenger::model::layout::ParamBuf;
use messenger::model::{build_layout, init_params, FlowFeatures, Mode, Model, ModelConfig};
use messenger::tensor::argmax_channel;
use messenger::Tensor4;
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_shape_fn((b, 1, h, w), |_| rng.gen::<f64>())
}

fn micro_model(alpha: f64, seed: u64) -> Model<f64> {
    Model::new(ModelConfig::micro(3, alpha), seed).unwrap()
}

/// Same parameters, different alpha.
fn with_alpha(model: &Model<f64>, alpha: f64) -> Model<f64> {
    let mut cfg = model.config().clone();
    cfg.alpha = alpha;
    Model::from_params(cfg, model.params().clone()).unwrap()
}

#[test]
fn alpha_zero_labeled_flow_is_bit_equal_to_self_attention_path() {
    let model = micro_model(0.0, 1);
    let images_l = random_images(2, 64, 64, 10);
    let images_u = random_images(2, 64, 64, 11);
    let fwd = model.forward_pair(&images_l, &images_u).unwrap();
    let single = model.forward_single(&images_l).unwrap();
    assert_eq!(fwd.logits_l, single.logits, "alpha=0 must take the identical code path");
    // The unlabeled flow is always self-attention only.
    let single_u = model.forward_single(&images_u).unwrap();
    assert_eq!(fwd.logits_u, single_u.logits);
}

#[test]
fn alpha_one_with_identical_flows_matches_alpha_zero() {
    let model1 = micro_model(1.0, 2);
    let model0 = with_alpha(&model1, 0.0);
    let images = random_images(2, 64, 64, 12);
    let fwd1 = model1.forward_pair(&images, &images).unwrap();
    let fwd0 = model0.forward_pair(&images, &images).unwrap();
    for (a, b) in fwd1.logits_l.iter().zip(fwd0.logits_l.iter()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn doubled_batch_inference_matches_single_flow() {
    let model = micro_model(0.5, 3);
    for seed in 0..20u64 {
        let images = random_images(1, 64, 64, 100 + seed);
        let (logits, _) = model.predict(&images).unwrap();
        let (dl, du) = model.predict_doubled(&images).unwrap();
        for (a, b) in logits.iter().zip(dl.iter()) {
            assert!((a - b).abs() < 1e-6, "labeled flow: {a} vs {b}");
        }
        for (a, b) in logits.iter().zip(du.iter()) {
            assert!((a - b).abs() < 1e-6, "unlabeled flow: {a} vs {b}");
        }
    }
}

#[test]
fn infer_mode_on_duplicated_input_gives_identical_flows() {
    let model = micro_model(0.7, 4);
    let images = random_images(2, 64, 64, 13);
    let stages = model.encoder_forward(&images, &images, Mode::Infer).unwrap();
    for (k, f) in stages.iter().enumerate() {
        assert_eq!(f.f_l, f.f_u, "stage {k} flows must be identical in infer mode");
    }
}

#[test]
fn zeroing_unlabeled_features_only_moves_the_labeled_flow() {
    let model = micro_model(0.5, 5);
    let images_l = random_images(1, 64, 64, 14);
    let images_u = random_images(1, 64, 64, 15);
    let c = model.config().stages[0].channels;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let f_l = Tensor4::from_shape_fn((1, c, 16, 16), |_| rng.gen::<f64>() - 0.5);
    let f_u = Tensor4::from_shape_fn((1, c, 16, 16), |_| rng.gen::<f64>() - 0.5);
    let zeros = Tensor4::zeros((1, c, 16, 16));
    let _ = (images_l, images_u);

    let base = model
        .messenger_block_forward(0, 0, &FlowFeatures { f_l: f_l.clone(), f_u: f_u.clone() }, Mode::Train)
        .unwrap();
    let zeroed = model
        .messenger_block_forward(0, 0, &FlowFeatures { f_l: f_l.clone(), f_u: zeros.clone() }, Mode::Train)
        .unwrap();
    assert_ne!(base.f_l, zeroed.f_l, "alpha > 0: labeled flow must react to f_u");
    assert_eq!(
        base.f_u.dim(),
        zeroed.f_u.dim()
    );
    // The unlabeled flow depends only on its own input.
    let moved_l = model
        .messenger_block_forward(0, 0, &FlowFeatures { f_l: zeros.clone(), f_u: f_u.clone() }, Mode::Train)
        .unwrap();
    assert_eq!(base.f_u, moved_l.f_u, "unlabeled flow must ignore f_l");

    // With alpha = 0 the labeled flow ignores f_u as well.
    let model0 = with_alpha(&model, 0.0);
    let a = model0
        .messenger_block_forward(0, 0, &FlowFeatures { f_l: f_l.clone(), f_u }, Mode::Train)
        .unwrap();
    let b = model0
        .messenger_block_forward(0, 0, &FlowFeatures { f_l, f_u: zeros }, Mode::Train)
        .unwrap();
    assert_eq!(a.f_l, b.f_l, "alpha = 0: labeled flow must ignore f_u");
}

#[test]
fn blend_is_linear_in_alpha_pre_projection() {
    // Neutralize the FFN so the block output is exactly the attention
    // sublayer: x + blend(alpha) * W_O, which is affine in alpha.
    let cfg = ModelConfig::micro(3, 0.5);
    let layout = build_layout(&cfg);
    let mut params: ParamBuf<f64> = init_params(layout.clone(), 6);
    for name in ["ffn.w1", "ffn.b1", "ffn.dw.k", "ffn.dw.b", "ffn.w2", "ffn.b2"] {
        let full = format!("enc.s0.blk0.{name}");
        let spec = layout.spec(&full).clone();
        for v in &mut params.data_mut()[spec.offset..spec.offset + spec.len()] {
            *v = 0.0;
        }
    }
    let mk = |alpha: f64| {
        let mut c = cfg.clone();
        c.alpha = alpha;
        Model::from_params(c, params.clone()).unwrap()
    };
    let c = cfg.stages[0].channels;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let flow = FlowFeatures {
        f_l: Tensor4::from_shape_fn((1, c, 8, 8), |_| rng.gen::<f64>() - 0.5),
        f_u: Tensor4::from_shape_fn((1, c, 8, 8), |_| rng.gen::<f64>() - 0.5),
    };
    let at = |alpha: f64| mk(alpha).messenger_block_forward(0, 0, &flow, Mode::Train).unwrap().f_l;
    let lo = at(0.0);
    let mid = at(0.5);
    let hi = at(1.0);
    for ((a, m), b) in lo.iter().zip(mid.iter()).zip(hi.iter()) {
        assert!(
            (m - 0.5 * (a + b)).abs() < 1e-12,
            "midpoint {m} vs average {}",
            0.5 * (a + b)
        );
    }
}

#[test]
fn stage_shapes_follow_the_stride_schedule() {
    let model = Model::<f64>::new(ModelConfig::tiny(3, 0.5), 0).unwrap();
    let images = random_images(1, 64, 64, 18);
    let stages = model.encoder_forward(&images, &images, Mode::Infer).unwrap();
    let want = [(16usize, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)];
    assert_eq!(stages.len(), 4);
    for (k, (c, h, w)) in want.iter().enumerate() {
        assert_eq!(stages[k].f_l.dim(), (1, *c, *h, *w), "stage {k}");
    }
}

#[test]
fn decoder_output_shape_and_zero_features_give_constant_logits() {
    let model = micro_model(0.5, 7);
    let dims = [(16usize, 16usize), (8, 8), (4, 4), (2, 2)];
    let features: Vec<Tensor4<f64>> = model
        .config()
        .stages
        .iter()
        .zip(dims.iter())
        .map(|(s, d)| Tensor4::zeros((2, s.channels, d.0, d.1)))
        .collect();
    let logits = model.decoder_forward(&features).unwrap();
    assert_eq!(logits.dim(), (2, 3, 64, 64));
    for c in 0..3 {
        let plane = logits.index_axis(Axis(0), 0);
        let v0 = plane[[c, 0, 0]];
        for v in plane.index_axis(Axis(0), c).iter() {
            assert!((v - v0).abs() < 1e-12, "logits must be spatially constant");
        }
    }
}

#[test]
fn predict_is_constant_when_one_channel_dominates_and_ties_go_low() {
    let model = micro_model(0.5, 8);
    let images = random_images(1, 64, 64, 19);
    let (logits, map) = model.predict(&images).unwrap();
    assert_eq!(logits.dim(), (1, 3, 64, 64));
    assert_eq!(map.dim(), (1, 64, 64));
    // Dominant-channel and tie behavior are properties of the argmax.
    let mut t = Tensor4::<f64>::zeros((1, 3, 2, 2));
    for y in 0..2 {
        for x in 0..2 {
            t[[0, 2, y, x]] = 5.0;
        }
    }
    assert!(argmax_channel(&t).iter().all(|&c| c == 2));
    let tie = Tensor4::<f64>::zeros((1, 3, 2, 2));
    assert!(argmax_channel(&tie).iter().all(|&c| c == 0));
}

#[test]
fn affinity_rows_sum_to_one_across_a_full_forward() {
    let model = Model::<f64>::new(ModelConfig::tiny(3, 0.5), 9).unwrap();
    let images_l = random_images(2, 64, 64, 20);
    let images_u = random_images(2, 64, 64, 21);
    let fwd = model.forward_pair(&images_l, &images_u).unwrap();
    let mats = fwd.affinity_matrices();
    assert!(!mats.is_empty());
    for m in mats {
        for row in m.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() <= 1e-6, "affinity row sums to {s}");
        }
    }
}

#[test]
fn parameter_count_is_a_frozen_constant() {
    // Messenger-Tiny; any change to the layout must be deliberate.
    let model = Model::<f64>::new(ModelConfig::tiny(3, 0.5), 0).unwrap();
    let by_hand: usize = {
        // embeds: (in*k*k+1)*C + 2C per stage
        let embed = |cin: usize, k: usize, c: usize| (cin * k * k + 1) * c + 2 * c;
        // block: attn LN 2C + QKV 3*C*2C + O 2C*C + ffn LN 2C
        //        + W1 C*E + E + dw 10E + W2 E*C + C, E = 4C
        let block = |c: usize| {
            let e = 4 * c;
            2 * c + 3 * c * 2 * c + 2 * c * c + 2 * c + c * e + e + 10 * e + e * c + c
        };
        embed(1, 7, 16)
            + block(16)
            + 2 * 16
            + embed(16, 3, 32)
            + block(32)
            + 2 * 32
            + embed(32, 3, 64)
            + 2 * block(64)
            + 2 * 64
            + embed(64, 3, 128)
            + block(128)
            + 2 * 128
            + (16 + 32 + 64 + 128 + 4) * 64 // decoder projections
            + (4 * 64 + 1) * 64 // fuse
            + (64 + 1) * 3 // classifier
    };
    assert_eq!(model.param_count(), by_hand);
    // Rebuilding with a different seed never changes the count.
    let again = Model::<f64>::new(ModelConfig::tiny(3, 0.5), 12345).unwrap();
    assert_eq!(again.param_count(), model.param_count());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::tiny(3, 0.5);
    cfg.alpha = 1.5;
    assert!(Model::<f64>::new(cfg, 0).is_err());
    let mut cfg = ModelConfig::tiny(3, 0.5);
    cfg.stages[2].channels = 8; // not increasing
    assert!(Model::<f64>::new(cfg, 0).is_err());
    let cfg = ModelConfig::tiny(1, 0.5);
    assert!(Model::<f64>::new(cfg, 0).is_err());
    // Undersized images.
    let model = micro_model(0.5, 0);
    let images = random_images(1, 32, 32, 0);
    assert!(model.predict(&images).is_err());
}
