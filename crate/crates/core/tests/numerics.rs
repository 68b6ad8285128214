use proptest::prelude::*;
use rand::Rng;

use tano_core::autodiff::{finite_diff_check, Tape, Target, Var};
use tano_core::data::{
    generate_synthetic_domains, sample_episode, EpisodeShape, GenerateConfig, Phase, Protocol,
    Split,
};
use tano_core::normalization::{bn_forward, BnLayerParams, BnMode};
use tano_core::rng::rng_for;
use tano_core::training::meta::{episode_gradients, meta_train_step, trainable_params};
use tano_core::training::{episode_grad_check, Model};
use tano_core::{Result, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, 0x6e75, shape.iter().product::<usize>() as u64);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so `h` never crosses a ReLU kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| v.signum() * (0.1 + v.abs()))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> f64 {
    finite_diff_check(f, params, H).unwrap().max_rel_error
}

/// Scalar probe: a fixed random linear functional of `out`, so every output
/// element contributes to the gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random(&shape, seed ^ 0xabc));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_ops(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let (a, b) = (random(&[rows, cols], seed), random(&[rows, cols], seed + 1));
        for op in 0..4 {
            let err = check(|t, v| {
                let out = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    2 => t.mul(v[0], v[1])?,
                    _ => t.scale(v[0], -1.7),
                };
                probe(t, out, seed)
            }, &[a.clone(), b.clone()]);
            prop_assert!(err < TOL, "op {op}: {err}");
        }
    }

    #[test]
    fn reductions_and_reshapes(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let a = random(&[rows, cols], seed);
        let err = check(|t, v| { let s = t.mean(v[0]); let m = t.mul(s, s)?; let x = t.sum(v[0]); t.add(m, x) }, std::slice::from_ref(&a));
        prop_assert!(err < TOL);
        let err = check(|t, v| { let r = t.reshape(v[0], &[cols, rows])?; probe(t, r, seed) }, std::slice::from_ref(&a));
        prop_assert!(err < TOL);
        let err = check(|t, v| { let r = t.mean_rows(v[0])?; probe(t, r, seed) }, std::slice::from_ref(&a));
        prop_assert!(err < TOL);
        let err = check(|t, v| { let r = t.rows(v[0], 0, rows.div_ceil(2))?; probe(t, r, seed) }, &[a]);
        prop_assert!(err < TOL);
    }

    #[test]
    fn matrix_ops(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let (a, b, bias) = (random(&[m, k], seed), random(&[k, n], seed + 1), random(&[n], seed + 2));
        let err = check(|t, v| { let p = t.matmul(v[0], v[1])?; let p = t.add_row_bias(p, v[2])?; probe(t, p, seed) }, &[a, b, bias]);
        prop_assert!(err < TOL);
        let (q, p) = (random(&[m, k], seed + 3), random(&[n, k], seed + 4));
        let err = check(|t, v| { let d = t.neg_sq_dist(v[0], v[1])?; probe(t, d, seed) }, &[q, p]);
        prop_assert!(err < TOL);
    }

    #[test]
    fn relu_and_pooling(c in 1usize..3, seed in 0u64..1000) {
        let x = away_from_zero(&[2, c, 4, 4], seed);
        let err = check(|t, v| { let r = t.relu(v[0]); probe(t, r, seed) }, std::slice::from_ref(&x));
        prop_assert!(err < TOL);
        let err = check(|t, v| { let r = t.max_pool2(v[0])?; probe(t, r, seed) }, std::slice::from_ref(&x));
        prop_assert!(err < TOL);
        let err = check(|t, v| { let r = t.flatten(v[0])?; probe(t, r, seed) }, &[x]);
        prop_assert!(err < TOL);
    }

    #[test]
    fn convolution(c in 1usize..3, o in 1usize..3, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000) {
        let (x, k) = (random(&[2, c, 5, 5], seed), random(&[o, c, 3, 3], seed + 1));
        let err = check(|t, v| { let y = t.conv2d(v[0], v[1], stride, pad)?; probe(t, y, seed) }, &[x, k]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_family(rows in 1usize..4, cols in 2usize..6, seed in 0u64..1000) {
        let x = random(&[rows, cols], seed).map(|v| 3.0 * v);
        for axis in 0..2 {
            let err = check(|t, v| { let s = t.softmax(v[0], axis)?; probe(t, s, seed) }, std::slice::from_ref(&x));
            prop_assert!(err < TOL);
            let err = check(|t, v| { let s = t.log_softmax(v[0], axis)?; probe(t, s, seed) }, std::slice::from_ref(&x));
            prop_assert!(err < TOL);
        }
        let labels: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize) % cols).collect();
        let err = check(|t, v| t.cross_entropy(v[0], Target::Classes(&labels)), std::slice::from_ref(&x));
        prop_assert!(err < TOL);
        let dist = Tensor::new([rows, cols], random(&[rows, cols], seed + 9).data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        let sums: Vec<f64> = (0..rows).map(|r| dist.row(r).iter().sum()).collect();
        let dist = Tensor::new([rows, cols], dist.data().iter().enumerate().map(|(i, v)| v / sums[i / cols]).collect()).unwrap();
        let err = check(|t, v| t.cross_entropy(v[0], Target::Distribution(&dist)), &[x]);
        prop_assert!(err < TOL);
    }

    #[test]
    fn batch_norm_both_modes(c in 1usize..4, seed in 0u64..1000) {
        let z = random(&[3, c, 2, 2], seed).map(|v| 2.0 * v + 0.5);
        let (g, b) = (random(&[c], seed + 1).map(|v| 1.0 + 0.5 * v), random(&[c], seed + 2));
        let mut params = BnLayerParams::new(c, 1e-5, 0.1);
        params.running_mean = random(&[c], seed + 3).into_data();
        params.running_var = random(&[c], seed + 4).map(|v| 0.5 + v.abs()).into_data();
        for mode in [BnMode::Train, BnMode::Eval] {
            let err = check(|t, v| { let (y, _) = bn_forward(t, v[0], v[1], v[2], &params, mode)?; probe(t, y, seed) }, &[z.clone(), g.clone(), b.clone()]);
            prop_assert!(err < TOL, "{mode:?}: {err}");
        }
    }
}

fn episode(seed: u64) -> tano_core::data::Episode {
    let data = generate_synthetic_domains(&GenerateConfig {
        per_class: 4,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut rng = rng_for(seed, 1, 0);
    sample_episode(
        &data,
        Split::Base,
        Protocol::Intra,
        Phase::Train,
        EpisodeShape::new(3, 1, 2),
        &mut rng,
    )
    .unwrap()
}

#[test]
fn full_episode_loss_matches_central_differences() {
    for (seed, workers, label) in [(3, 4, 2), (4, 1, 0)] {
        let ep = episode(seed);
        let model = Model::random(seed + 5, workers).unwrap();
        let report = episode_grad_check(&model, &ep, label, H, 8, seed).unwrap();
        assert!(report.checked > 60, "{report:?}");
        assert!(report.max_rel_error < TOL, "{report:?}");
        assert!(report.straddling_rel_error < TOL, "{report:?}");
        assert!(
            report.unresolved_abs_error < 10.0 * report.resolution,
            "{report:?}"
        );
        assert!(report.straddling * 5 < report.checked, "{report:?}");
    }
}

#[test]
fn step_applies_exactly_the_reported_gradients() {
    let ep = episode(5);
    let model = Model::random(2, 4).unwrap();
    let grads = episode_gradients(&model, &ep, 1, 1.0, 1.0).unwrap();
    let lr = 0.25;
    let mut stepped = model.clone();
    meta_train_step(&mut stepped, &ep, 1, lr, 1.0, 1.0).unwrap();
    let mut before = model.clone();
    let old = trainable_params(&mut before, grads.routed);
    let new = trainable_params(&mut stepped, grads.routed);
    for (((name, o), (_, n)), g) in old.iter().zip(&new).zip(grads.flat()) {
        for ((a, b), d) in o.iter().zip(n.iter()).zip(&g) {
            assert_eq!(*b, a - lr * d, "{name}");
        }
    }
}
