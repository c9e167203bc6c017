use messenger::model::{Model, ModelConfig};
use messenger::training::cross_entropy_with_grad;
use messenger::tensor::one_hot_from_classes;
use messenger::Tensor4;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe<S: messenger::Scalar>(name: &str) {
    let model = Model::<S>::new(ModelConfig::tiny(3, 0.5), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let il = Tensor4::from_shape_fn((4, 1, 64, 64), |_| S::cast(rng.gen::<f64>()));
    let iu = Tensor4::from_shape_fn((4, 1, 64, 64), |_| S::cast(rng.gen::<f64>()));
    let y = one_hot_from_classes::<S>(&Array3::from_shape_fn((4, 64, 64), |_| rng.gen_range(0..3usize)), 3);
    // warmup
    let fwd = model.forward_pair(&il, &iu).unwrap();
    let (_, dl) = cross_entropy_with_grad(&fwd.logits_l, &y).unwrap();
    let (_, du) = cross_entropy_with_grad(&fwd.logits_u, &y).unwrap();
    let _ = model.backward_pair(&fwd, &dl, &du);
    let t0 = std::time::Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let fwd = model.forward_pair(&il, &iu).unwrap();
        let (_, dl) = cross_entropy_with_grad(&fwd.logits_l, &y).unwrap();
        let (_, du) = cross_entropy_with_grad(&fwd.logits_u, &y).unwrap();
        let _g = model.backward_pair(&fwd, &dl, &du);
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{name}: {:.1} ms/iter -> 2000 iters = {:.1} s; 9 runs = {:.1} min", per*1e3, per*2000.0, per*2000.0*9.0/60.0);
    // baseline cost (alpha=0)
    let model0 = Model::<S>::from_params({let mut c = model.config().clone(); c.alpha=0.0; c}, model.params().clone()).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let fwd = model0.forward_pair(&il, &iu).unwrap();
        let (_, dl) = cross_entropy_with_grad(&fwd.logits_l, &y).unwrap();
        let (_, du) = cross_entropy_with_grad(&fwd.logits_u, &y).unwrap();
        let _g = model0.backward_pair(&fwd, &dl, &du);
    }
    println!("{name} alpha=0: {:.1} ms/iter", t0.elapsed().as_secs_f64()/iters as f64*1e3);
}

fn main() {
    probe::<f64>("f64");
    probe::<f32>("f32");
}
