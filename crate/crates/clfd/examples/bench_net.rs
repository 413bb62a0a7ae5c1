// Throughput probe: full train step (fwd+bwd+step) for desk net at 16x16 and 32x32.
use clfd::model::{Arch, BackboneConfig, Network};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn step_time(input: usize, batch: usize, iters: usize) -> (f64, f64) {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let config = BackboneConfig::new(Arch::Desk, (3, input, input), 10);
    let mut net = Network::<f32>::new(config, &mut rng);
    let x = Array4::from_shape_fn((batch, 3, input, input), |_| rng.random_range(-1.0f32..1.0));
    let flops = clfd::model::count_flops(&config) as f64 * batch as f64 * 3.0;
    // warmup
    for _ in 0..2 {
        let (f, c) = net.extract_train(x.clone()).unwrap();
        let l = net.head_forward(&f);
        let d = Array2::from_elem(l.dim(), 1e-6f32);
        let df = net.head.backward(f.view(), d.view());
        net.backbone.backward_batch(&c, &df);
        net.zero_grads();
    }
    let t0 = Instant::now();
    for _ in 0..iters {
        net.zero_grads();
        let (f, c) = net.extract_train(x.clone()).unwrap();
        let l = net.head_forward(&f);
        let d = Array2::from_elem(l.dim(), 1e-6f32);
        let df = net.head.backward(f.view(), d.view());
        net.backbone.backward_batch(&c, &df);
        net.sgd_step(0.01, 0.0, None);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    (dt, flops / dt / 1e9)
}

fn main() {
    for (inp, batch) in [(16usize, 64usize), (32, 64)] {
        let (dt, gflops) = step_time(inp, batch, 8);
        println!("input {inp}x{inp} batch {batch}: {:.1} ms/step, ~{:.1} GFLOPS effective", dt * 1e3, gflops);
    }
}
