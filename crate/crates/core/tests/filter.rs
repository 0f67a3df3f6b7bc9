mod common;

use common::uniform;
use gafl_core::autograd::{grad_check_many, Graph, UnaryKind, Var};
use gafl_core::gafl::{
    self, param_count, Domain, Family, FilterConfig, FilterParams, MLP_ACTIVATIONS,
};
use gafl_core::spectral::{fft2_real, magnitude};
use gafl_core::{Error, Tensor};

fn cfg(family: Family, domain: Domain) -> FilterConfig {
    FilterConfig::new(family, domain).unwrap()
}

/// Raw weights away from the relu kink: positive scales, positive biases,
/// unconstrained angles.
fn generic_weights(config: FilterConfig, shape: &[usize], seed: u64) -> Vec<Tensor> {
    match config.family {
        Family::Phase => vec![uniform(shape, -1.0, 1.0, seed)],
        Family::Mlp => vec![
            uniform(shape, 0.5, 1.5, seed),
            uniform(shape, 0.5, 1.5, seed + 1),
            uniform(shape, 0.1, 0.5, seed + 2),
            uniform(shape, 0.1, 0.5, seed + 3),
        ],
        _ => vec![uniform(shape, 0.5, 1.5, seed)],
    }
}

#[test]
fn identity_for_every_configuration() {
    let mut configs = FilterConfig::all();
    for act in [UnaryKind::Relu, UnaryKind::Relu6] {
        configs.push(FilterConfig::with_activation(Family::Mlp, Domain::Plain, act).unwrap());
    }
    let extents = [(8, 8), (9, 7), (16, 16)];
    for config in configs {
        for k in 0..20u64 {
            let c = 1 + (k as usize % 3);
            let (n, m) = extents[k as usize % 3];
            let img = uniform(&[2, c, n, m], 0.0, 1.0, k);
            let p = FilterParams::identity(config, c, n, m).unwrap();
            let out = p.apply(&img).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-6 * img.max_abs(), "{config:?}");
        }
    }
}

#[test]
fn gradients_for_every_family_and_domain() {
    for config in FilterConfig::all() {
        let img = uniform(&[1, 1, 8, 8], 0.0, 1.0, 11);
        let target = uniform(&[1, 1, 8, 8], 0.0, 1.0, 12);
        let ws = generic_weights(config, &[1, 8, 5], 3);
        let err = grad_check_many(
            |g, vs| {
                let x = g.constant(img.clone());
                let t = g.constant(target.clone());
                gafl::forward(g, &config, vs, x)?.sub(t)?.square()?.mean()
            },
            &ws,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{config:?}: {err}");
    }
}

#[test]
fn gradients_of_output_energy() {
    let magnitude_families = FilterConfig::all()
        .into_iter()
        .filter(|c| c.family != Family::Phase);
    for config in magnitude_families {
        let img = uniform(&[1, 1, 8, 8], 0.0, 1.0, 11);
        let ws = generic_weights(config, &[1, 8, 5], 3);
        let err = grad_check_many(
            |g, vs| {
                let x = g.constant(img.clone());
                gafl::forward(g, &config, vs, x)?.square()?.mean()
            },
            &ws,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{config:?}: {err}");
    }
}

#[test]
fn mlp_gradients_for_smooth_activations() {
    for act in MLP_ACTIVATIONS {
        let config = FilterConfig::with_activation(Family::Mlp, Domain::Log, act).unwrap();
        let img = uniform(&[1, 1, 8, 8], 0.0, 1.0, 12);
        let ws = generic_weights(config, &[1, 8, 5], 4);
        let err = grad_check_many(
            |g, vs| {
                gafl::forward(g, &config, vs, g.constant(img.clone()))?
                    .square()?
                    .mean()
            },
            &ws,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{act:?}: {err}");
    }
}

#[test]
fn phase_energy_gradient_lives_on_self_conjugate_columns() {
    // a rotation keeps |F| on mirrored pairs, so by Parseval the energy only
    // depends on angles in columns 0 and m/2
    let config = cfg(Family::Phase, Domain::Plain);
    let img = uniform(&[1, 1, 8, 8], 0.0, 1.0, 11);
    let ws = generic_weights(config, &[1, 8, 5], 3);
    let (_, grads) = output_and_grads(config, &img, &ws);
    for (i, g) in grads[0].data().iter().enumerate() {
        let v = i % 5;
        if v != 0 && v != 4 {
            assert!(g.abs() < 1e-15, "entry {i}: {g}");
        }
    }
    let mut worst: f64 = 0.0;
    for i in (0..40).filter(|i| i % 5 == 0 || i % 5 == 4) {
        let energy = |delta: f64| {
            let mut w = ws[0].clone();
            w.data_mut()[i] += delta;
            let out = FilterParams::from_matrices(config, 1, 8, 8, vec![w])
                .unwrap()
                .apply(&img)
                .unwrap();
            out.data().iter().map(|v| v * v).sum::<f64>() / 64.0
        };
        let numeric = (energy(1e-5) - energy(-1e-5)) / 2e-5;
        let a = grads[0].data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
    }
    assert!(worst < 1e-4, "{worst}");
}

fn output_and_grads(config: FilterConfig, img: &Tensor, ws: &[Tensor]) -> (Tensor, Vec<Tensor>) {
    let g = Graph::new();
    let vs: Vec<Var> = ws.iter().map(|w| g.leaf(w.clone())).collect();
    let out = gafl::forward(&g, &config, &vs, g.constant(img.clone())).unwrap();
    let grads = g.backward(out.square().unwrap().mean().unwrap()).unwrap();
    (
        out.tensor(),
        vs.iter().map(|v| grads.get(*v).unwrap().clone()).collect(),
    )
}

#[test]
fn negative_raw_weights_are_indistinguishable() {
    for config in [
        cfg(Family::Linear, Domain::Plain),
        cfg(Family::General, Domain::Log),
        cfg(Family::Mlp, Domain::Plain),
    ] {
        let img = uniform(&[1, 1, 6, 6], 0.0, 1.0, 2);
        let mut ws = generic_weights(config, &[1, 6, 4], 8);
        ws[0].data_mut()[5] = -0.5;
        let (out_a, grad_a) = output_and_grads(config, &img, &ws);
        ws[0].data_mut()[5] = -3.0;
        let (out_b, grad_b) = output_and_grads(config, &img, &ws);
        assert_eq!(out_a, out_b);
        assert_eq!(grad_a, grad_b);
        assert_eq!(grad_a[0].data()[5], 0.0);
    }
}

#[test]
fn lowering_a_weight_never_raises_its_frequency() {
    let (n, m) = (6, 8);
    let config = cfg(Family::Linear, Domain::Plain);
    let img = uniform(&[1, 1, n, m], 0.0, 1.0, 4);
    let base = uniform(&[1, n, 5], 0.5, 1.5, 6);
    for idx in 0..base.len() {
        let mut prev = f64::INFINITY;
        for w in [2.0, 1.0, 0.5, 0.1, 0.0] {
            let mut weights = base.clone();
            weights.data_mut()[idx] = w;
            let p = FilterParams::from_matrices(config, 1, n, m, vec![weights]).unwrap();
            let out = p.apply(&img).unwrap().reshape(&[1, n, m]).unwrap();
            let e = magnitude(&fft2_real(&out).unwrap()).0.data()[idx];
            assert!(e <= prev + 1e-15, "index {idx}, weight {w}");
            prev = e;
        }
    }
}

#[test]
fn dc_only_weight_returns_the_mean() {
    let (n, m) = (8, 8);
    // constant plus a checkerboard
    let data: Vec<f64> = (0..n * m)
        .map(|i| 0.4 + 0.3 * if (i / m + i % m) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let img = Tensor::new(&[1, 1, n, m], data).unwrap();
    let mut w = Tensor::zeros(&[1, n, 5]);
    w.data_mut()[0] = 1.0;
    let p =
        FilterParams::from_matrices(cfg(Family::Linear, Domain::Plain), 1, n, m, vec![w]).unwrap();
    let out = p.apply(&img).unwrap();
    let mean = img.mean();
    assert!(out.data().iter().all(|v| (v - mean).abs() < 1e-12));
}

#[test]
fn linear_log_coincides_with_general_plain() {
    for seed in 0..5u64 {
        let img = uniform(&[2, 2, 8, 6], 0.0, 1.0, seed);
        let w = uniform(&[2, 8, 4], 0.0, 2.0, seed + 50);
        let a =
            FilterParams::from_matrices(cfg(Family::Linear, Domain::Log), 2, 8, 6, vec![w.clone()])
                .unwrap();
        let b = FilterParams::from_matrices(cfg(Family::General, Domain::Plain), 2, 8, 6, vec![w])
            .unwrap();
        let (ya, yb) = (a.apply(&img).unwrap(), b.apply(&img).unwrap());
        assert!(ya.max_abs_diff(&yb) <= 1e-12);
    }
}

#[test]
fn zero_linear_weights_give_zero_image() {
    let p = FilterParams::from_matrices(
        cfg(Family::Linear, Domain::Plain),
        1,
        4,
        4,
        vec![Tensor::zeros(&[1, 4, 3])],
    )
    .unwrap();
    let out = p.apply(&uniform(&[1, 1, 4, 4], 0.0, 1.0, 0)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_counts() {
    let linear = cfg(Family::Linear, Domain::Plain);
    assert_eq!(param_count(&linear, 3, 32, 32), 276_026 - 274_394);
    assert_eq!(param_count(&linear, 3, 64, 64), 293_080 - 286_744);
    assert_eq!(param_count(&cfg(Family::Mlp, Domain::Plain), 1, 8, 8), 160);
    let p = FilterParams::identity(cfg(Family::Mlp, Domain::Log), 2, 5, 7).unwrap();
    assert_eq!(p.param_count(), param_count(p.config(), 2, 5, 7));
}

#[test]
fn serialization_round_trip_is_bit_exact() {
    for config in FilterConfig::all() {
        let ws = generic_weights(config, &[2, 5, 4], 21);
        let p = FilterParams::from_matrices(config, 2, 5, 7, ws).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"GAFL");
        assert_eq!(FilterParams::from_bytes(&bytes).unwrap(), p);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let p = FilterParams::identity(cfg(Family::Phase, Domain::Plain), 1, 4, 4).unwrap();
    p.save(&path).unwrap();
    assert_eq!(FilterParams::load(&path).unwrap(), p);
    let mut bad = p.to_bytes();
    bad[0] = b'X';
    assert!(FilterParams::from_bytes(&bad).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let p = FilterParams::identity(cfg(Family::Linear, Domain::Plain), 1, 8, 8).unwrap();
    assert!(matches!(
        p.apply(&Tensor::zeros(&[1, 1, 8, 6])),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        p.apply(&Tensor::zeros(&[1, 2, 8, 8])),
        Err(Error::Shape(_))
    ));
}
