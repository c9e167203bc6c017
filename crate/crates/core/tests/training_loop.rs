//! Training loop behavior: schedule, losses, pseudo-labels, determinism,
//! descent sanity and checkpoint resume.

use std::path::Path;

use messenger::datagen::{build_corpus, CorpusConfig, Preset};
use messenger::dataio::{load_manifest, next_pair, CorpusIndex};
use messenger::l2u::PatchSpec;
use messenger::model::{Model, ModelConfig};
use messenger::tensor::{argmax_channel, is_one_hot, one_hot_from_classes};
use messenger::training::{
    assemble_unsupervised_target, cross_entropy_with_grad, latest_checkpoint, load_checkpoint,
    make_pseudo_labels, poly_lr, run_training, save_checkpoint, sgd_update, supervised_loss,
    train_step, unsupervised_loss, TrainConfig, TrainState,
};
use messenger::Tensor4;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_corpus(dir: &Path, seed: u64) -> CorpusIndex {
    let mut cfg = CorpusConfig::desk_default(Preset::Ssmis, dir.into(), seed);
    cfg.labeled = 2;
    cfg.unlabeled = 4;
    cfg.test = 2;
    let manifest = build_corpus(&cfg).unwrap();
    load_manifest(&manifest).unwrap()
}

fn micro_train_config(seed: u64, iters: usize) -> TrainConfig {
    TrainConfig {
        lr_init: 0.01,
        total_iters: iters,
        batch_size: 4,
        momentum: 0.9,
        weight_decay: 1e-4,
        patch_size: 16,
        seed,
        checkpoint_every: 4,
        augment: true,
    }
}

#[test]
fn poly_lr_matches_schedule() {
    assert_eq!(poly_lr(0.01, 0, 100).unwrap(), 0.01);
    assert_eq!(poly_lr(0.01, 100, 100).unwrap(), 0.0);
    // Scalar evaluation of lr_init * (1 - i/I)^0.9 at the midpoint.
    let mid = poly_lr(0.01, 50, 100).unwrap();
    assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    assert!((mid - 0.005358867).abs() < 1e-9);
    // Nonincreasing, positive before the end.
    let mut prev = f64::INFINITY;
    for i in 0..=100 {
        let lr = poly_lr(0.01, i, 100).unwrap();
        assert!(lr <= prev);
        if i < 100 {
            assert!(lr > 0.0);
        }
        prev = lr;
    }
    assert!(poly_lr(0.01, 101, 100).is_err());
}

#[test]
fn uniform_logits_cost_ln_l() {
    for l in [2usize, 3, 5] {
        let logits = Tensor4::<f64>::zeros((2, l, 4, 4));
        let target = one_hot_from_classes::<f64>(
            &Array3::from_shape_fn((2, 4, 4), |(b, y, x)| (b + y + x) % l),
            l,
        );
        let loss = supervised_loss(&logits, &target).unwrap();
        assert!((loss - (l as f64).ln()).abs() < 1e-9, "L={l}: {loss}");
    }
}

#[test]
fn perfect_prediction_loss_tends_to_zero() {
    let target = one_hot_from_classes::<f64>(&Array3::from_elem((1, 4, 4), 1usize), 3);
    let mut logits = Tensor4::<f64>::zeros((1, 3, 4, 4));
    for y in 0..4 {
        for x in 0..4 {
            logits[[0, 1, y, x]] = 50.0;
        }
    }
    let loss = unsupervised_loss(&logits, &target).unwrap();
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    // 2x2 image, L = 2, hand-set logits; independent scalar arithmetic.
    let logits = Tensor4::from_shape_vec(
        (1, 2, 2, 2),
        vec![
            0.3, -1.2, 0.8, 2.0, // channel 0
            -0.5, 0.7, 0.1, -0.4, // channel 1
        ],
    )
    .unwrap();
    let classes = Array3::from_shape_vec((1, 2, 2), vec![0usize, 1, 1, 0]).unwrap();
    let target = one_hot_from_classes::<f64>(&classes, 2);
    let (loss, grad) = cross_entropy_with_grad(&logits, &target).unwrap();

    let mut expected = 0.0;
    for (y, x, t) in [(0, 0, 0usize), (0, 1, 1), (1, 0, 1), (1, 1, 0)] {
        let a = logits[[0, 0, y, x]];
        let b = logits[[0, 1, y, x]];
        let z = (a.exp() + b.exp()).ln();
        let picked = if t == 0 { a } else { b };
        expected += z - picked;
    }
    expected /= 4.0;
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    // Gradient: (softmax - target) / pixel count.
    for (y, x, t) in [(0usize, 0usize, 0usize), (0, 1, 1), (1, 0, 1), (1, 1, 0)] {
        let a = logits[[0, 0, y, x]];
        let b = logits[[0, 1, y, x]];
        let p0 = a.exp() / (a.exp() + b.exp());
        for c in 0..2 {
            let p = if c == 0 { p0 } else { 1.0 - p0 };
            let tv = if c == t { 1.0 } else { 0.0 };
            assert!((grad[[0, c, y, x]] - (p - tv) / 4.0).abs() < 1e-12);
        }
    }
    // Non-one-hot target is a contract violation.
    let mut bad = target.clone();
    bad[[0, 0, 0, 0]] = 0.4;
    assert!(cross_entropy_with_grad(&logits, &bad).is_err());
}

#[test]
fn pseudo_labels_take_channel_argmax_with_low_ties() {
    let mut logits = Tensor4::<f64>::zeros((1, 3, 4, 4));
    for y in 0..4 {
        for x in 0..4 {
            logits[[0, 2, y, x]] = 1.0;
        }
    }
    let y = make_pseudo_labels(&logits, 4, 4);
    assert!(is_one_hot(&y));
    assert!(argmax_channel(&y).iter().all(|&c| c == 2));

    // Tie everywhere: lower index wins, consistent with predict.
    let tie = Tensor4::<f64>::zeros((1, 3, 4, 4));
    let y = make_pseudo_labels(&tie, 4, 4);
    assert!(argmax_channel(&y).iter().all(|&c| c == 0));

    // Random logits against a brute-force per-pixel argmax oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Tensor4::from_shape_fn((2, 3, 4, 4), |_| rng.gen::<f64>());
    let y = make_pseudo_labels(&logits, 4, 4);
    for b in 0..2 {
        for yy in 0..4 {
            for xx in 0..4 {
                let mut best = 0;
                for c in 1..3 {
                    if logits[[b, c, yy, xx]] > logits[[b, best, yy, xx]] {
                        best = c;
                    }
                }
                assert_eq!(y[[b, best, yy, xx]], 1.0);
            }
        }
    }

    // Nearest-neighbor upsampling to label resolution.
    let y = make_pseudo_labels(&logits, 8, 8);
    assert_eq!(y.dim(), (2, 3, 8, 8));
    assert!(is_one_hot(&y));
}

#[test]
fn pasted_regions_carry_donor_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = Tensor4::from_shape_fn((2, 3, 8, 8), |_| rng.gen::<f64>());
    let donor = one_hot_from_classes::<f64>(
        &Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(0..3usize)),
        3,
    );
    let patches = vec![
        PatchSpec { row: 1, col: 2, size: 3 },
        PatchSpec { row: 0, col: 0, size: 0 },
    ];
    let target = assemble_unsupervised_target(&logits, &donor, &patches, 8, 8);
    assert!(is_one_hot(&target));
    let plain = make_pseudo_labels(&logits, 8, 8);
    for j in 0..2 {
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let want = if patches[j].contains(y, x) {
                        donor[[j, c, y, x]]
                    } else {
                        plain[[j, c, y, x]]
                    };
                    assert_eq!(target[[j, c, y, x]], want);
                }
            }
        }
    }
}

#[test]
fn one_sgd_step_descends_on_a_frozen_batch() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = next_pair::<f64>(&index, 2, &mut rng).unwrap();
    let model_cfg = ModelConfig::micro(3, 0.5);
    let mut model = Model::<f64>::new(model_cfg, 7).unwrap();

    // Fixed targets; small plain-SGD step must reduce the loss.
    let y_l = batch.labeled_labels.clone();
    let fwd = model.forward_pair(&batch.labeled_images, &batch.unlabeled_images).unwrap();
    let pseudo = make_pseudo_labels(&fwd.logits_u, 64, 64);
    let (ls0, dl) = cross_entropy_with_grad(&fwd.logits_l, &y_l).unwrap();
    let (lu0, du) = cross_entropy_with_grad(&fwd.logits_u, &pseudo).unwrap();
    let grads = model.backward_pair(&fwd, &dl, &du);
    let mut momentum = model.zero_grads();
    sgd_update(model.params_mut(), &mut momentum, &grads, 1e-3, 0.0, 0.0);
    let fwd2 = model.forward_pair(&batch.labeled_images, &batch.unlabeled_images).unwrap();
    let ls1 = supervised_loss(&fwd2.logits_l, &y_l).unwrap();
    let lu1 = unsupervised_loss(&fwd2.logits_u, &pseudo).unwrap();
    assert!(
        ls1 + lu1 < ls0 + lu0,
        "descent failed: {} -> {}",
        ls0 + lu0,
        ls1 + lu1
    );
}

#[test]
fn equal_seeds_give_identical_loss_histories() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 8);
    let run = || {
        let mut state =
            TrainState::<f64>::new(ModelConfig::micro(3, 0.5), micro_train_config(9, 6)).unwrap();
        run_training(&mut state, &index, None).unwrap();
        state
    };
    let a = run();
    let b = run();
    assert_eq!(a.history.len(), 6);
    for (ra, rb) in a.history.iter().zip(&b.history) {
        assert_eq!(ra.loss_s.to_bits(), rb.loss_s.to_bits());
        assert_eq!(ra.loss_u.to_bits(), rb.loss_u.to_bits());
    }
    for (x, y) in a.model.params().data().iter().zip(b.model.params().data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn loss_total_is_exactly_the_sum_of_terms() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 10);
    let mut state =
        TrainState::<f64>::new(ModelConfig::micro(3, 0.5), micro_train_config(11, 3)).unwrap();
    run_training(&mut state, &index, None).unwrap();
    for row in &state.history {
        assert!((row.total() - (row.loss_s + row.loss_u)).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise_and_resume_matches_continuous() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 12);
    let run_dir = dir.path().join("run");

    // Continuous run: 8 iterations, checkpoints every 4.
    let mut continuous =
        TrainState::<f64>::new(ModelConfig::micro(3, 0.5), micro_train_config(13, 8)).unwrap();
    run_training(&mut continuous, &index, Some(&run_dir)).unwrap();

    // Bitwise state round trip at the final checkpoint.
    let final_ckpt = latest_checkpoint(&run_dir).unwrap();
    assert!(final_ckpt.ends_with("ckpt_000008.bin"));
    let reloaded = load_checkpoint::<f64>(&final_ckpt).unwrap();
    assert_eq!(reloaded.iter, 8);
    for (a, b) in reloaded
        .model
        .params()
        .data()
        .iter()
        .zip(continuous.model.params().data())
    {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (a, b) in reloaded.momentum.data().iter().zip(continuous.momentum.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(reloaded.rng, continuous.rng);
    assert_eq!(reloaded.history.len(), continuous.history.len());

    // Resume from the midpoint: the remaining trajectory must be
    // bit-identical to the continuous run's.
    let mid = run_dir.join("checkpoints/ckpt_000004.bin");
    let mut resumed = load_checkpoint::<f64>(&mid).unwrap();
    assert_eq!(resumed.iter, 4);
    let resume_dir = dir.path().join("resumed");
    run_training(&mut resumed, &index, Some(&resume_dir)).unwrap();
    for i in 4..8 {
        assert_eq!(
            resumed.history[i].loss_s.to_bits(),
            continuous.history[i].loss_s.to_bits(),
            "iteration {i} diverged after resume"
        );
        assert_eq!(
            resumed.history[i].loss_u.to_bits(),
            continuous.history[i].loss_u.to_bits()
        );
    }
    for (a, b) in resumed
        .model
        .params()
        .data()
        .iter()
        .zip(continuous.model.params().data())
    {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // The rewritten loss log equals the continuous run's.
    let log_a = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    let log_b = std::fs::read_to_string(resume_dir.join("loss.csv")).unwrap();
    assert_eq!(log_a, log_b);

    // Corrupt checkpoint is rejected.
    let bytes = std::fs::read(&mid).unwrap();
    std::fs::write(&mid, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint::<f64>(&mid).is_err());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 14);
    let mut state =
        TrainState::<f64>::new(ModelConfig::micro(3, 0.5), micro_train_config(15, 4)).unwrap();
    // Blow up the classifier so logits become infinite while attention
    // inputs stay finite.
    {
        let mut w = state.model.params_mut().mat_mut("dec.cls.w");
        w.fill(f64::INFINITY);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let batch = next_pair::<f64>(&index, 2, &mut rng).unwrap();
    let err = train_step(&mut state, &batch).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("iteration 0"), "{msg}");
    assert!(msg.contains("lr"), "{msg}");
}

#[test]
fn nan_parameters_surface_stage_and_block_context() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 17);
    let mut state =
        TrainState::<f64>::new(ModelConfig::micro(3, 0.5), micro_train_config(18, 4)).unwrap();
    {
        let mut w = state.model.params_mut().mat_mut("enc.s1.blk0.attn.wq");
        w[[0, 0]] = f64::NAN;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let batch = next_pair::<f64>(&index, 2, &mut rng).unwrap();
    let err = train_step(&mut state, &batch).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("stage 1 block 0"), "{msg}");
}

#[test]
fn schedule_boundary_last_update_uses_positive_lr() {
    let dir = tempfile::tempdir().unwrap();
    let index = micro_corpus(dir.path(), 20);
    let mut state =
        TrainState::<f64>::new(ModelConfig::micro(3, 0.5), micro_train_config(21, 3)).unwrap();
    run_training(&mut state, &index, None).unwrap();
    assert_eq!(state.history.len(), 3);
    for row in &state.history {
        assert!(row.lr > 0.0, "every executed update uses a positive lr");
    }
    assert_eq!(state.iter, 3);
    // A further step is refused: no update may use lr at i = I.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let batch = next_pair::<f64>(&index, 2, &mut rng).unwrap();
    assert!(train_step(&mut state, &batch).is_err());
}
