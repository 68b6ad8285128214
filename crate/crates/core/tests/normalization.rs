use proptest::prelude::*;
use rand::Rng;

use tano_core::data::{generate_synthetic_domains, GenerateConfig};
use tano_core::encoder::encode_traced;
use tano_core::normalization::{
    bn_apply, channel_values, compute_batch_stats, sphere_residual, BnLayerParams, BnMode,
    GroupWorker,
};
use tano_core::rng::rng_for;
use tano_core::training::Model;
use tano_core::Tensor;

/// Mean and biased variance of channel `c`, one element at a time in
/// `(n, h, w)` order, via the textbook two-pass formula.
fn naive_stats(data: &[f64], shape: &[usize], c: usize) -> (f64, f64) {
    let (n, ch, plane) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let at = |i: usize, p: usize| data[(i * ch + c) * plane + p];
    let mut sum = 0.0;
    for i in 0..n {
        for p in 0..plane {
            sum += at(i, p);
        }
    }
    let m = (n * plane) as f64;
    let mean = sum / m;
    let mut sq = 0.0;
    for i in 0..n {
        for p in 0..plane {
            sq += (at(i, p) - mean).powi(2);
        }
    }
    (mean, sq / m)
}

fn random_input(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_for(seed, 77, 0);
    let scale = rng.random_range(0.1..10.0);
    let offset = rng.random_range(-5.0..5.0);
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len)
            .map(|_| offset + scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn random_layer(seed: u64, c: usize) -> BnLayerParams {
    let mut rng = rng_for(seed, 78, 0);
    let mut p = BnLayerParams::new(c, 1e-5, 0.1);
    for ch in 0..c {
        p.gamma[ch] = rng.random_range(0.2..3.0) * if rng.random_bool(0.3) { -1.0 } else { 1.0 };
        p.beta[ch] = rng.random_range(-2.0..2.0);
        p.running_mean[ch] = rng.random_range(-3.0..3.0);
        p.running_var[ch] = rng.random_range(0.05..4.0);
    }
    p
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        (1usize..8, 1usize..6).prop_map(|(n, c)| vec![n, c]),
        (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_map(|(n, c, h, w)| vec![n, c, h, w]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn batch_stats_match_naive_reference(shape in shape_strategy(), seed in any::<u64>()) {
        let z = random_input(seed, &shape);
        let stats = compute_batch_stats(&z).unwrap();
        for c in 0..shape[1] {
            let (mean, var) = naive_stats(z.data(), &shape, c);
            prop_assert!((stats.mean[c] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            prop_assert!((stats.var[c] - var).abs() <= 1e-12 * var.abs().max(1.0));
        }
    }

    #[test]
    fn bn_apply_matches_naive_reference(shape in shape_strategy(), seed in any::<u64>()) {
        let z = random_input(seed, &shape);
        let p = random_layer(seed, shape[1]);
        let plane: usize = shape[2..].iter().product();
        for mode in [BnMode::Train, BnMode::Eval] {
            let out = bn_apply(&z, &p, mode).unwrap();
            for (i, (&x, &y)) in z.data().iter().zip(out.data()).enumerate() {
                let c = (i / plane) % shape[1];
                let (mean, var) = match mode {
                    BnMode::Train => naive_stats(z.data(), &shape, c),
                    BnMode::Eval => (p.running_mean[c], p.running_var[c]),
                };
                let expected = p.gamma[c] * (x - mean) / (var + p.epsilon).sqrt() + p.beta[c];
                prop_assert!((y - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{mode:?} {y} vs {expected}");
            }
        }
    }

    #[test]
    fn eval_mode_is_batch_independent(n in 2usize..6, c in 1usize..4, seed in any::<u64>()) {
        let shape = [n, c, 3, 3];
        let z = random_input(seed, &shape);
        let p = random_layer(seed, c);
        let whole = bn_apply(&z, &p, BnMode::Eval).unwrap();
        let per = 9 * c;
        for i in 0..n {
            let one = z.slice_rows(i, i + 1).unwrap();
            let alone = bn_apply(&one, &p, BnMode::Eval).unwrap();
            for (a, b) in alone.data().iter().zip(&whole.data()[i * per..(i + 1) * per]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

/// Worst relative sphere residuals over every layer, channel and worker of
/// `model` on `images`, with γ, β randomised so the affine image is non-trivial.
/// Also checks that the gap to radius `√m` is exactly the `ε / (var + ε)` that
/// ε predicts, and the `γ = 1, β = 0` specialization after inverting the affine.
fn worst_sphere(model: &Model, images: &Tensor, epsilon: f64, seed: u64) -> (f64, f64) {
    let (mut affine, mut inverted) = (0.0f64, 0.0f64);
    for (w, worker) in model.bank.workers.iter().enumerate() {
        let layers = worker
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| BnLayerParams {
                epsilon,
                ..random_layer(seed ^ ((w * 16 + j) as u64), l.channels())
            })
            .collect();
        let worker = GroupWorker { index: w, layers };
        let (_, trace) = encode_traced(images, &model.encoder, &worker, BnMode::Train).unwrap();
        for (j, (pre, post)) in trace.pre_bn.iter().zip(&trace.post_bn).enumerate() {
            let stats = compute_batch_stats(pre).unwrap();
            let l = &worker.layers[j];
            for c in 0..stats.mean.len() {
                let var = stats.var[c];
                let z_hat = channel_values(post, c).unwrap();
                let r = sphere_residual(&z_hat, l.gamma[c], l.beta[c], var, epsilon).unwrap();
                affine = affine.max(r.identity / r.m as f64);
                let expected_gap = epsilon / (var + epsilon);
                assert!(
                    (r.radius_gap - expected_gap).abs() < 1e-10,
                    "layer {j} channel {c}: {r:?}"
                );

                let unit: Vec<f64> = z_hat.iter().map(|v| (v - l.beta[c]) / l.gamma[c]).collect();
                let r = sphere_residual(&unit, 1.0, 0.0, var, epsilon).unwrap();
                inverted = inverted.max(r.identity / r.m as f64);
            }
        }
    }
    (affine, inverted)
}

#[test]
fn normalized_channels_lie_on_the_sphere() {
    let data = generate_synthetic_domains(&GenerateConfig {
        per_class: 4,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    for seed in 0..3u64 {
        let mut rng = rng_for(seed, 5, 0);
        let items: Vec<(usize, usize, usize)> = (0..24)
            .map(|_| {
                (
                    rng.random_range(0..4),
                    rng.random_range(0..20),
                    rng.random_range(0..4),
                )
            })
            .collect();
        let images = data.stack(&items);
        let model = Model::random(seed, 4).unwrap();

        let (affine, inverted) = worst_sphere(&model, &images, 0.0, seed);
        assert!(
            affine < 1e-12 && inverted < 1e-12,
            "ε=0: {affine:e} {inverted:e}"
        );

        let (affine, inverted) = worst_sphere(&model, &images, 1e-5, seed);
        assert!(
            affine < 1e-3 && inverted < 1e-3,
            "ε=1e-5: {affine:e} {inverted:e}"
        );
    }
}
