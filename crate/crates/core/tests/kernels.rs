mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use stylize_core::tensor::{
    conv2d_backward_input, conv2d_forward, pool_backward, pool_forward, relu_backward, relu_forward,
};
use stylize_core::{ConvKernel, Error, PoolMode, Tensor3};

fn zero_bias(k: &ConvKernel) -> ConvKernel {
    ConvKernel::new(
        k.out_channels(),
        k.in_channels(),
        k.weights().to_vec(),
        vec![0.0; k.out_channels()],
    )
    .unwrap()
}

#[test]
fn conv_matches_loops_on_every_small_shape() {
    let mut r = rng(10);
    for h in 1..=8 {
        for w in 1..=8 {
            let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=4));
            let x = random_tensor(&mut r, cin, h, w, 1.0);
            let k = random_kernel(&mut r, cout, cin);
            let got = conv2d_forward(&x, &k).unwrap();
            let err = max_rel_diff(&got, &conv_reference(&x, &k));
            assert!(err < 1e-5, "{cin}->{cout} {h}x{w}: {err}");
        }
    }
}

#[test]
fn pool_matches_window_scan_on_every_small_shape() {
    let mut r = rng(11);
    for h in 1..=8 {
        for w in 1..=8 {
            let x = random_tensor(&mut r, 3, h, w, 1.0);
            for (mode, max) in [(PoolMode::Max, true), (PoolMode::Average, false)] {
                let (got, _) = pool_forward(&x, mode).unwrap();
                let err = max_rel_diff(&got, &pool_reference(&x, max));
                assert!(err < 1e-5, "{mode} {h}x{w}: {err}");
            }
        }
    }
}

#[test]
fn relu_matches_reference() {
    let mut r = rng(12);
    for h in 1..=8 {
        let x = random_tensor(&mut r, 2, h, 9 - h, 1.0);
        assert_eq!(relu_forward(&x), relu_reference(&x));
    }
}

#[test]
fn adjoint_identities_hold_over_twenty_seeds() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let x = random_tensor(&mut r, 3, h, w, 1.0);

        let k = zero_bias(&random_kernel(&mut r, 4, 3));
        let y = random_tensor(&mut r, 4, h, w, 1.0);
        let lhs = dot(&conv2d_forward(&x, &k).unwrap(), &y);
        let rhs = dot(&x, &conv2d_backward_input(&y, &k).unwrap());
        assert!(rel_err(lhs, rhs) < 1e-5, "conv seed {seed}: {lhs} vs {rhs}");

        let y = random_tensor(&mut r, 3, h, w, 1.0);
        let lhs = dot(&relu_forward(&x), &y);
        let rhs = dot(&x, &relu_backward(&y, &x).unwrap());
        assert!(rel_err(lhs, rhs) < 1e-5, "relu seed {seed}");

        for mode in [PoolMode::Max, PoolMode::Average] {
            let (out, rec) = pool_forward(&x, mode).unwrap();
            let (c, oh, ow) = out.shape();
            let y = random_tensor(&mut r, c, oh, ow, 1.0);
            let lhs = dot(&out, &y);
            let rhs = dot(&x, &pool_backward(&y, &rec).unwrap());
            assert!(rel_err(lhs, rhs) < 1e-5, "{mode} seed {seed}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_adjoint_for_any_shape(seed in 0u64..1_000_000, cin in 1usize..5, cout in 1usize..5,
                                  h in 1usize..12, w in 1usize..12) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, cin, h, w, 1.0);
        let y = random_tensor(&mut r, cout, h, w, 1.0);
        let k = zero_bias(&random_kernel(&mut r, cout, cin));
        let lhs = dot(&conv2d_forward(&x, &k).unwrap(), &y);
        let rhs = dot(&x, &conv2d_backward_input(&y, &k).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}

// Central differences of `⟨forward(x), probe⟩`, run in f64.
fn fd_max_err(
    x: &Tensor3,
    analytic: &Tensor3,
    skip: impl Fn(usize) -> bool,
    f: impl Fn(&Tensor3<f64>) -> f64,
) -> f64 {
    let x64 = x.cast::<f64>();
    (0..x.len())
        .filter(|&i| !skip(i))
        .map(|i| {
            rel_err(
                analytic.as_slice()[i] as f64,
                central_diff(&x64, i, 1e-4, &f),
            )
        })
        .fold(0.0, f64::max)
}

#[test]
fn conv_backward_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let x = random_tensor(&mut r, 2, 5, 5, 1.0);
        let k = random_kernel(&mut r, 3, 2);
        let probe = random_tensor(&mut r, 3, 5, 5, 1.0);
        let analytic = conv2d_backward_input(&probe, &k).unwrap();
        let p64 = probe.cast::<f64>();
        let err = fd_max_err(
            &x,
            &analytic,
            |_| false,
            |t| conv2d_forward(t, &k).unwrap().dot(&p64).unwrap(),
        );
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn relu_backward_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let x = random_tensor(&mut r, 3, 4, 4, 1.0);
        let probe = random_tensor(&mut r, 3, 4, 4, 1.0);
        let analytic = relu_backward(&probe, &x).unwrap();
        let p64 = probe.cast::<f64>();
        let near_kink = |i: usize| x.as_slice()[i].abs() < 1e-3;
        let err = fd_max_err(&x, &analytic, near_kink, |t| {
            relu_forward(t).dot(&p64).unwrap()
        });
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn pool_backward_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(400 + seed);
        let (h, w) = (7, 8);
        let x = random_tensor(&mut r, 3, h, w, 1.0);
        for mode in [PoolMode::Max, PoolMode::Average] {
            let (out, rec) = pool_forward(&x, mode).unwrap();
            let (c, oh, ow) = out.shape();
            let probe = random_tensor(&mut r, c, oh, ow, 1.0);
            let analytic = pool_backward(&probe, &rec).unwrap();
            let p64 = probe.cast::<f64>();
            // Max mode: skip entries whose window has a rival within reach of
            // the step.
            let contested = |i: usize| {
                let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                let (y0, x0) = (y / 2 * 2, xx / 2 * 2);
                mode == PoolMode::Max
                    && (y0..(y0 + 2).min(h))
                        .flat_map(|a| (x0..(x0 + 2).min(w)).map(move |b| (a, b)))
                        .any(|(a, b)| {
                            (a, b) != (y, xx) && (x.at(ch, a, b) - x.at(ch, y, xx)).abs() < 1e-3
                        })
            };
            let err = fd_max_err(&x, &analytic, contested, |t| {
                pool_forward(t, mode).unwrap().0.dot(&p64).unwrap()
            });
            assert!(err < 1e-3, "{mode} seed {seed}: {err}");
        }
    }
}

#[test]
fn shape_errors() {
    let k = ConvKernel::new(2, 3, vec![0.0; 54], vec![0.0; 2]).unwrap();
    assert!(matches!(
        conv2d_forward(&Tensor3::<f32>::zeros(2, 4, 4), &k),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        relu_backward(&Tensor3::<f32>::zeros(1, 2, 2), &Tensor3::zeros(1, 2, 3)),
        Err(Error::Dimension(_))
    ));
    let (_, rec) = pool_forward(&Tensor3::<f32>::zeros(1, 4, 4), PoolMode::Max).unwrap();
    assert!(matches!(
        pool_backward(&Tensor3::<f32>::zeros(1, 3, 2), &rec),
        Err(Error::Dimension(_))
    ));
    assert!(ConvKernel::new(2, 3, vec![0.0; 53], vec![0.0; 2]).is_err());
}

#[test]
fn conv_is_thread_count_independent() {
    let mut r = rng(13);
    let x = random_tensor(&mut r, 8, 50, 45, 1.0);
    let k = random_kernel(&mut r, 16, 8);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let a = one.install(|| conv2d_forward(&x, &k).unwrap());
    let b = four.install(|| conv2d_forward(&x, &k).unwrap());
    assert_eq!(a, b);
}
