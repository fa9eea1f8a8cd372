use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;

fn toy_layout() -> FieldLayout {
    // 2x2 grid of one feature + 1-wide MLP: 4 + (1+1) + (1+1) + (1+1) = 10
    let enc = EncodingConfig {
        levels: 1,
        base_resolution: 2,
        growth: 2.0,
        features_per_level: 1,
    };
    FieldLayout::new(enc, 1, 1).unwrap()
}

fn small_layout(channels: usize) -> FieldLayout {
    let enc = EncodingConfig {
        levels: 3,
        base_resolution: 3,
        growth: 1.7,
        features_per_level: 2,
    };
    FieldLayout::new(enc, 8, channels).unwrap()
}

/// Randomizes every parameter so the MLP is far from its near-constant init.
fn scrambled<T: Real>(layout: FieldLayout, seed: u64) -> FieldParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..layout.param_count())
        .map(|_| T::of(rng.random_range(-1.0..1.0)))
        .collect();
    FieldParams::from_values(layout, values).unwrap()
}

fn scalar_objective(p: &FieldParams<f64>, xs: &[Coord], up: &[f64]) -> f64 {
    let preds = p.predict(xs).unwrap();
    preds.iter().zip(up).map(|(a, b)| a * b).sum()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= (1e-3 * a.abs().max(b.abs())).max(1e-6)
}

/// True when `t` is within `eps` of a grid line of any level.
fn near_cell_boundary(t: f64, layout: &FieldLayout, eps: f64) -> bool {
    layout.resolutions().iter().any(|&r| {
        let pos = t * (r - 1) as f64;
        (pos - pos.round()).abs() < eps * (r - 1) as f64
    })
}

#[test]
fn layout_parameter_count() {
    let enc = EncodingConfig {
        levels: 1,
        base_resolution: 2,
        growth: 2.0,
        features_per_level: 2,
    };
    let lay = FieldLayout::new(enc, 64, 3).unwrap();
    let grid = 2 * 2 * 2;
    let mlp = (2 * 64 + 64) + (64 * 64 + 64) + (64 * 3 + 3);
    assert_eq!(lay.param_count(), grid + mlp);
    assert_eq!(toy_layout().param_count(), 10);
    assert_eq!(
        EncodingConfig::default().resolutions(),
        vec![16, 32, 64, 128]
    );
}

#[test]
fn invalid_encodings_are_rejected() {
    let d = EncodingConfig::default();
    assert!(EncodingConfig { levels: 0, ..d }.validate().is_err());
    assert!(EncodingConfig {
        base_resolution: 1,
        ..d
    }
    .validate()
    .is_err());
    assert!(EncodingConfig { growth: 1.0, ..d }.validate().is_err());
    assert!(EncodingConfig {
        growth: f64::NAN,
        ..d
    }
    .validate()
    .is_err());
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = FieldParams::<f32>::init(small_layout(3), 7);
    let b = FieldParams::<f32>::init(small_layout(3), 7);
    let c = FieldParams::<f32>::init(small_layout(3), 8);
    assert_eq!(
        a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_ne!(a.values(), c.values());
    let grid = &a.values()[..a.layout().grid_len()];
    assert!(grid.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn forward_range_purity_and_empty_batch() {
    let p = scrambled::<f64>(small_layout(3), 1);
    let x = Coord::new(0.3, 0.8);
    let (preds, tape) = p.forward(&[x, Coord::new(0.9, 0.1), x]).unwrap();
    assert_eq!(tape.len(), 3);
    assert!(preds.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(&preds[0..3], &preds[6..9]);

    let (empty, mut tape) = p.forward(&[]).unwrap();
    assert!(empty.is_empty() && tape.is_empty());
    assert!(p
        .backward_params(&mut tape, &[])
        .unwrap()
        .iter()
        .all(|&g| g == 0.0));
    assert!(p.backward_coords(&mut tape, &[]).unwrap().is_empty());
}

#[test]
fn reused_tape_matches_fresh_tape() {
    let p = scrambled::<f64>(small_layout(3), 13);
    let big: Vec<Coord> = (0..40)
        .map(|i| Coord::new(i as f64 / 40.0, 1.0 - i as f64 / 40.0))
        .collect();
    let small = [Coord::new(0.3, 0.3), Coord::new(0.6, 0.1)];
    let up = [0.5, -1.0, 0.25, 1.0, 0.0, -0.5];
    let mut reused = ForwardTape::default();
    p.forward_into(&big, &mut reused).unwrap();
    p.backward_params(&mut reused, &vec![1.0; 120]).unwrap();
    let a = p.forward_into(&small, &mut reused).unwrap();
    let (b, mut fresh) = p.forward(&small).unwrap();
    assert_eq!(a, b);
    assert_eq!(reused.len(), 2);
    assert_eq!(
        p.backward_params(&mut reused, &up).unwrap(),
        p.backward_params(&mut fresh, &up).unwrap()
    );
    assert_eq!(
        p.backward_coords(&mut reused, &up).unwrap(),
        p.backward_coords(&mut fresh, &up).unwrap()
    );
}

#[test]
fn forward_rejects_out_of_domain() {
    let p = FieldParams::<f64>::init(small_layout(1), 0);
    assert!(matches!(
        p.forward(&[Coord::new(0.5, -0.01)]),
        Err(Error::OutOfDomain { .. })
    ));
}

#[test]
fn f32_and_f64_agree() {
    let p64 = scrambled::<f64>(small_layout(3), 4);
    let p32: FieldParams<f32> = p64.convert();
    let xs = [Coord::new(0.12, 0.9), Coord::new(0.5, 0.5)];
    let a = p64.predict(&xs).unwrap();
    let b = p32.predict(&xs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn stale_tape_is_rejected() {
    let mut p = scrambled::<f64>(small_layout(1), 2);
    let (_, mut tape) = p.forward(&[Coord::new(0.2, 0.2)]).unwrap();
    p.values_mut()[0] += 1.0;
    assert!(matches!(
        p.backward_params(&mut tape, &[1.0]),
        Err(Error::StaleTape { .. })
    ));
    assert!(matches!(
        p.backward_coords(&mut tape, &[1.0]),
        Err(Error::StaleTape { .. })
    ));
    let other = scrambled::<f64>(small_layout(1), 2);
    assert!(other.backward_params(&mut tape, &[1.0]).is_err());
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let p = scrambled::<f64>(small_layout(3), 3);
    let (_, mut tape) = p
        .forward(&[Coord::new(0.4, 0.6), Coord::new(0.1, 0.2)])
        .unwrap();
    let g = p.backward_params(&mut tape, &[0.0; 6]).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    let gc = p.backward_coords(&mut tape, &[0.0; 6]).unwrap();
    assert!(gc.iter().all(|v| *v == [0.0, 0.0]));
}

#[test]
fn parameter_gradient_is_additive_over_samples() {
    let p = scrambled::<f64>(small_layout(3), 5);
    let a = Coord::new(0.31, 0.77);
    let b = Coord::new(0.64, 0.05);
    let (ua, ub) = ([0.3, -1.0, 0.5], [1.2, 0.1, -0.7]);
    let (_, mut ta) = p.forward(&[a]).unwrap();
    let (_, mut tb) = p.forward(&[b]).unwrap();
    let (_, mut tab) = p.forward(&[a, b]).unwrap();
    let ga = p.backward_params(&mut ta, &ua).unwrap();
    let gb = p.backward_params(&mut tb, &ub).unwrap();
    let up: Vec<f64> = ua.iter().chain(&ub).copied().collect();
    let gab = p.backward_params(&mut tab, &up).unwrap();
    for i in 0..gab.len() {
        assert_relative_eq!(gab[i], ga[i] + gb[i], epsilon = 1e-12, max_relative = 1e-10);
    }
}

#[test]
fn toy_field_parameter_gradient_matches_finite_differences() {
    let p = scrambled::<f64>(toy_layout(), 11);
    let xs = [Coord::new(0.3, 0.6), Coord::new(0.85, 0.2)];
    let up = [1.0, -0.5];
    let (_, mut tape) = p.forward(&xs).unwrap();
    let g = p.backward_params(&mut tape, &up).unwrap();
    let h = 1e-6;
    for (j, &gj) in g.iter().enumerate() {
        let mut plus = p.clone();
        plus.values_mut()[j] += h;
        let mut minus = p.clone();
        minus.values_mut()[j] -= h;
        let fd =
            (scalar_objective(&plus, &xs, &up) - scalar_objective(&minus, &xs, &up)) / (2.0 * h);
        assert!(close(fd, gj), "param {j}: fd {fd} vs {gj}");
    }
}

#[test]
fn constant_field_has_zero_coordinate_gradient() {
    let lay = small_layout(3);
    let mut p = scrambled::<f64>(lay.clone(), 6);
    let grid_len = lay.grid_len();
    let w2 = lay.mlp_blocks()[2].clone();
    let v = p.values_mut();
    v[..grid_len].iter_mut().for_each(|x| *x = 0.0);
    v[w2].iter_mut().for_each(|x| *x = 0.0);
    let xs = [Coord::new(0.2, 0.3), Coord::new(0.7, 0.9)];
    let (preds, mut tape) = p.forward(&xs).unwrap();
    assert_eq!(&preds[0..3], &preds[3..6]);
    let g = p.backward_coords(&mut tape, &[1.0; 6]).unwrap();
    assert!(g.iter().all(|v| *v == [0.0, 0.0]));
}

#[test]
fn duplicate_coordinates_get_identical_coordinate_gradients() {
    let p = scrambled::<f64>(small_layout(3), 8);
    let x = Coord::new(0.42, 0.58);
    let (_, mut tape) = p.forward(&[x, x]).unwrap();
    let g = p
        .backward_coords(&mut tape, &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5])
        .unwrap();
    assert_eq!(g[0], g[1]);
}

#[test]
fn skipped_rows_do_not_change_other_rows() {
    let p = scrambled::<f64>(small_layout(3), 9);
    let xs = [
        Coord::new(0.1, 0.9),
        Coord::new(0.5, 0.5),
        Coord::new(0.8, 0.3),
    ];
    let (_, mut tape) = p.forward(&xs).unwrap();
    let full = p.backward_coords(&mut tape, &[1.0; 9]).unwrap();
    let mut up = [1.0; 9];
    up[3..6].fill(0.0);
    let partial = p.backward_coords(&mut tape, &up).unwrap();
    assert_eq!(partial[1], [0.0, 0.0]);
    for s in [0, 2] {
        for k in 0..2 {
            assert_relative_eq!(partial[s][k], full[s][k], max_relative = 1e-12);
        }
    }
}

fn coordinate_gradient_check(p: &FieldParams<f64>, x: Coord, up: &[f64]) {
    let (_, mut tape) = p.forward(&[x]).unwrap();
    let g = p.backward_coords(&mut tape, up).unwrap()[0];
    let h = 1e-6;
    let f = |c: Coord| scalar_objective(p, &[c], up);
    let du = (f(Coord::new(x.u + h, x.v)) - f(Coord::new(x.u - h, x.v))) / (2.0 * h);
    let dv = (f(Coord::new(x.u, x.v + h)) - f(Coord::new(x.u, x.v - h))) / (2.0 * h);
    assert!(close(du, g[0]), "du: fd {du} vs {} at {x:?}", g[0]);
    assert!(close(dv, g[1]), "dv: fd {dv} vs {} at {x:?}", g[1]);
}

#[test]
fn coordinate_gradient_matches_finite_differences() {
    let lay = small_layout(3);
    let p = scrambled::<f64>(lay.clone(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut n = 0;
    while n < 200 {
        let x = Coord::new(rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        if near_cell_boundary(x.u, &lay, 1e-5) || near_cell_boundary(x.v, &lay, 1e-5) {
            continue;
        }
        let up = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            1.0,
        ];
        coordinate_gradient_check(&p, x, &up);
        n += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_configurations_pass_gradient_checks(
        seed in any::<u64>(),
        levels in 1usize..4,
        base in 2usize..6,
        features in 1usize..3,
        hidden in 1usize..10,
        channels in prop::sample::select(vec![1usize, 3]),
        u in 0.02f64..0.98,
        v in 0.02f64..0.98,
    ) {
        let enc = EncodingConfig { levels, base_resolution: base, growth: 1.6, features_per_level: features };
        let lay = FieldLayout::new(enc, hidden, channels).unwrap();
        prop_assume!(!near_cell_boundary(u, &lay, 1e-5) && !near_cell_boundary(v, &lay, 1e-5));
        let p = scrambled::<f64>(lay.clone(), seed);
        let x = Coord::new(u, v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let up: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        coordinate_gradient_check(&p, x, &up);

        let (_, mut tape) = p.forward(&[x]).unwrap();
        let g = p.backward_params(&mut tape, &up).unwrap();
        let h = 1e-6;
        for _ in 0..8 {
            let j = rng.random_range(0..p.len());
            let mut plus = p.clone();
            plus.values_mut()[j] += h;
            let mut minus = p.clone();
            minus.values_mut()[j] -= h;
            let fd = (scalar_objective(&plus, &[x], &up) - scalar_objective(&minus, &[x], &up)) / (2.0 * h);
            prop_assert!(close(fd, g[j]), "param {}: fd {} vs {}", j, fd, g[j]);
        }
    }
}
