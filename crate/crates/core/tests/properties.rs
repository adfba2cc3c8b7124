//! Property tests for the algebraic invariants of fields, transforms, fusion and metrics.

mod common;

use common::*;
use groupreg::demons::{demons_force, fluid_smooth, DemonsConfig};
use groupreg::diffeo::{auto_steps, center_velocities, compose, exponentiate, Steps};
use groupreg::generative::{counterfactual_transform, IntensityCodebook};
use groupreg::grid::{
    downsample, jacobian_determinant, warp, CategoricalField, GridSpec, ImageField, InterpMode, LabelField,
    VectorField,
};
use groupreg::io::{decode, encode, Dtype, Volume};
use groupreg::metrics::{dice, groupwise_dice, groupwise_warping_index};
use groupreg::sampling::{conditional_gumbel_draw, gumbel_max_sample, logsumexp, softmax};
use groupreg::structrep::{
    arithmetic_mean, floor_probabilities, geometric_mean, intrinsic_distance, kl_divergence,
};
use proptest::prelude::*;
use rand::Rng;

fn dims2() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..10, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_displacement_warp_is_identity(dims in dims2(), seed in any::<u64>()) {
        let grid = GridSpec::new(&dims).unwrap();
        let mut r = rng(seed);
        let img = random_image(&grid, -1.0, 1.0, &mut r);
        let zero = VectorField::zeros(grid);
        prop_assert_eq!(warp(&img, &zero, InterpMode::Linear).unwrap(), img.clone());
        prop_assert_eq!(warp(&img, &zero, InterpMode::Nearest).unwrap(), img);
    }

    #[test]
    fn categorical_warp_stays_on_simplex(dims in dims2(), k in 2usize..6, seed in any::<u64>()) {
        let grid = GridSpec::new(&dims).unwrap();
        let mut r = rng(seed);
        let z = random_categorical(&grid, k, &mut r);
        let u = smooth_velocity(&grid, 3.0, &mut r);
        let w = warp(&z, &u, InterpMode::Linear).unwrap();
        for i in 0..grid.len() {
            let p = w.at(i);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn exp_of_zero_is_identity_and_compose_with_identity_is_neutral(dims in dims2(), seed in any::<u64>()) {
        let grid = GridSpec::new(&dims).unwrap();
        let zero = VectorField::zeros(grid.clone());
        prop_assert_eq!(exponentiate(&zero, Steps::Auto), zero.clone());
        let u = smooth_velocity(&grid, 1.0, &mut rng(seed));
        prop_assert_eq!(compose(&u, &zero).unwrap(), u.clone());
        prop_assert_eq!(compose(&zero, &u).unwrap(), u);
    }

    #[test]
    fn exp_inverse_is_close_to_identity(seed in any::<u64>(), amp in 0.1f64..5.0) {
        let grid = GridSpec::new(&[64, 64]).unwrap();
        let v = smooth_velocity(&grid, amp, &mut rng(seed));
        let steps = Steps::Fixed(8);
        let round = compose(&exponentiate(&v, steps), &exponentiate(&v.scaled(-1.0), steps)).unwrap();
        for i in 0..grid.len() {
            if grid.boundary_distance(i) >= 6 {
                let e = round.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!(e <= 0.1, "residual {} at {}", e, i);
            }
        }
        prop_assert!(jacobian_determinant(&exponentiate(&v, Steps::Auto)).values().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn auto_steps_keep_the_scaled_field_under_half_a_voxel(seed in any::<u64>(), amp in 0.0f64..40.0) {
        let grid = GridSpec::new(&[8, 8]).unwrap();
        let v = smooth_velocity(&grid, amp.max(1e-9), &mut rng(seed));
        let t = auto_steps(&v);
        prop_assert!(t >= 2);
        prop_assert!(v.max_norm() / 2f64.powi(t as i32) <= 0.5 + 1e-12);
    }

    #[test]
    fn centering_leaves_zero_mean(n in 2usize..6, seed in any::<u64>()) {
        let grid = GridSpec::new(&[7, 5]).unwrap();
        let mut r = rng(seed);
        let fields: Vec<_> = (0..n).map(|_| smooth_velocity(&grid, 2.0, &mut r)).collect();
        let centred = center_velocities(&fields).unwrap();
        for c in 0..grid.len() * 2 {
            let s: f64 = centred.iter().map(|f| f.components()[c]).sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn downsampling_preserves_the_mean(seed in any::<u64>()) {
        let grid = GridSpec::new(&[8, 12]).unwrap();
        let mut r = rng(seed);
        let img = random_image(&grid, 0.0, 1.0, &mut r);
        let small = downsample(&img, 2);
        let m0 = img.values().iter().sum::<f64>() / img.values().len() as f64;
        let m1 = small.values().iter().sum::<f64>() / small.values().len() as f64;
        prop_assert!((m0 - m1).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_idempotent_and_permutation_invariant(k in 2usize..=8, n in 1usize..=10, seed in any::<u64>()) {
        let grid = GridSpec::new(&[3, 2]).unwrap();
        let mut r = rng(seed);
        let views: Vec<_> = (0..n).map(|_| random_categorical(&grid, k, &mut r)).collect();
        let refs: Vec<_> = views.iter().collect();
        let mut rev = refs.clone();
        rev.reverse();
        prop_assert_eq!(geometric_mean(&refs).unwrap(), geometric_mean(&rev).unwrap());
        prop_assert_eq!(arithmetic_mean(&refs).unwrap(), arithmetic_mean(&rev).unwrap());
        let same = vec![&views[0]; n];
        prop_assert_eq!(&geometric_mean(&same).unwrap(), &views[0]);
        prop_assert_eq!(&arithmetic_mean(&same).unwrap(), &views[0]);
    }

    #[test]
    fn intrinsic_distance_bounds_prior_kl(k in 2usize..=8, n in 2usize..=10, seed in any::<u64>()) {
        let grid = GridSpec::new(&[2, 2]).unwrap();
        let mut r = rng(seed);
        let views: Vec<_> = (0..n).map(|_| random_categorical(&grid, k, &mut r)).collect();
        let refs: Vec<_> = views.iter().collect();
        let q = geometric_mean(&refs).unwrap();
        let upper = intrinsic_distance(&q, &refs).unwrap().total;
        let exact = kl_divergence(&q, &arithmetic_mean(&refs).unwrap()).unwrap();
        prop_assert!(exact <= upper + 1e-12);
        prop_assert!(exact >= -1e-12);
    }

    #[test]
    fn flooring_keeps_a_simplex_above_epsilon(k in 2usize..=8, seed in any::<u64>(), eps_exp in -8.0f64..-2.0) {
        let eps = 10f64.powf(eps_exp).min(0.5 / k as f64);
        let mut p = random_simplex(k, &mut rng(seed));
        p[0] = 0.0;
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        floor_probabilities(&mut p, eps);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= eps * (1.0 - 1e-12)));
    }

    #[test]
    fn softmax_is_a_shift_invariant_simplex(x in prop::collection::vec(-30.0f64..30.0, 1..8), shift in -50.0f64..50.0, tau in 0.05f64..5.0) {
        let y = softmax(&x, tau);
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
        for (a, b) in y.iter().zip(softmax(&xs, tau)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((logsumexp(&xs) - logsumexp(&x) - shift).abs() < 1e-9);
    }

    #[test]
    fn conditional_draws_keep_the_realised_argmax(x in prop::collection::vec(-5.0f64..5.0, 2..8), seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = gumbel_max_sample(&x, &mut r).unwrap();
        let class = z.iter().position(|&v| v == 1.0).unwrap();
        for _ in 0..10 {
            let g = conditional_gumbel_draw(&x, &z, &mut r).unwrap();
            let best = g.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(best, class);
        }
    }

    #[test]
    fn demons_force_is_bounded_and_zero_on_identical_inputs(k in 2usize..5, seed in any::<u64>(), alpha in 0.1f64..2.0) {
        let grid = GridSpec::new(&[10, 9]).unwrap();
        let mut r = rng(seed);
        let f = random_categorical(&grid, k, &mut r);
        let m = random_categorical(&grid, k, &mut r);
        let mut cfg = DemonsConfig::for_level(2, 3);
        cfg.alpha = alpha.min(0.99 * cfg.alpha0);
        let out = demons_force(&f, &m, &cfg).unwrap();
        prop_assert!(out.mu.max_norm() <= cfg.alpha * (1.0 + 1e-12));
        let same = demons_force(&f, &f, &cfg).unwrap();
        prop_assert!(same.mu.max_norm() == 0.0);
    }

    #[test]
    fn fluid_smoothing_preserves_uniform_fields(vx in -3.0f64..3.0, vy in -3.0f64..3.0, sigma in 0.0f64..4.0) {
        let grid = GridSpec::new(&[9, 11]).unwrap();
        let v = VectorField::uniform(grid, &[vx, vy]).unwrap();
        let s = fluid_smooth(&v, sigma);
        for (a, b) in s.components().iter().zip(v.components()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 36), b in prop::collection::vec(any::<bool>(), 36)) {
        let d = dice(&a, &b);
        prop_assert_eq!(d, dice(&b, &a));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a), 1.0);
    }

    #[test]
    fn groupwise_dice_ignores_image_order(seed in any::<u64>(), n in 2usize..5) {
        let grid = GridSpec::new(&[6, 6]).unwrap();
        let mut r = rng(seed);
        let labels: Vec<_> = (0..n)
            .map(|_| LabelField::new(grid.clone(), 3, (0..36).map(|_| r.gen_range(0..3)).collect()).unwrap())
            .collect();
        let mut rev = labels.clone();
        rev.reverse();
        let (a, b) = (groupwise_dice(&labels, None).unwrap(), groupwise_dice(&rev, None).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gwi_ignores_a_common_shift(seed in any::<u64>(), sx in -2i32..=2, sy in -2i32..=2) {
        let grid = GridSpec::new(&[24, 24]).unwrap();
        let mut r = rng(seed);
        let truth: Vec<_> = (0..3).map(|_| smooth_velocity(&grid, 1.0, &mut r)).collect();
        let pred: Vec<_> = (0..3).map(|_| smooth_velocity(&grid, 1.0, &mut r)).collect();
        // moving the common space by s turns every prediction into pred ∘ s
        let shift = VectorField::uniform(grid.clone(), &[f64::from(sx), f64::from(sy)]).unwrap();
        let shifted: Vec<_> = pred.iter().map(|p| compose(p, &shift).unwrap()).collect();
        let fg: Vec<bool> = (0..grid.len()).map(|i| grid.boundary_distance(i) >= 8).collect();
        let base = groupwise_warping_index(&truth, &pred, &fg).unwrap();
        let moved = groupwise_warping_index(&truth, &shifted, &fg).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9, "{} vs {}", base, moved);
    }

    #[test]
    fn nearest_transform_intervention_commutes(seed in any::<u64>(), k in 2usize..5) {
        let grid = GridSpec::new(&[10, 8]).unwrap();
        let mut r = rng(seed);
        let labels = LabelField::new(grid.clone(), k as u32, (0..grid.len()).map(|_| r.gen_range(0..k as u32)).collect()).unwrap();
        let z = CategoricalField::one_hot(&labels, k).unwrap();
        let cb = IntensityCodebook::new((0..k).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let u = smooth_velocity(&grid, 2.5, &mut r);
        let cf = counterfactual_transform(&z, &cb, &u, InterpMode::Nearest).unwrap();
        prop_assert!(cf.difference.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn containers_roundtrip(dims in dims2(), seed in any::<u64>(), k in 2usize..5) {
        let grid = GridSpec::new(&dims).unwrap();
        let mut r = rng(seed);
        let img = random_image(&grid, -1e3, 1e3, &mut r);
        let cat = random_categorical(&grid, k, &mut r);
        for v in [Volume::Image(img), Volume::Vector(smooth_velocity(&grid, 2.0, &mut r))] {
            let (back, _) = decode(&encode(&v, Dtype::Float64, None)).unwrap();
            prop_assert_eq!(back, v);
        }
        let (back, _) = decode(&encode(&Volume::Categorical(cat.clone()), Dtype::Float64, Some("x"))).unwrap();
        prop_assert_eq!(back, Volume::Categorical(cat));
    }
}

#[test]
fn float32_container_roundtrip_is_bit_exact_for_float32_data() {
    let grid = GridSpec::new(&[5, 4]).unwrap();
    let img = ImageField::from_fn(grid, |c| f64::from((c[0] as f32 * 0.1 - 0.3).exp())).unwrap();
    let v = Volume::Image(img);
    let bytes = encode(&v, Dtype::Float32, Some("t1"));
    let (back, header) = decode(&bytes).unwrap();
    assert_eq!(back, v);
    assert_eq!(encode(&back, Dtype::Float32, header.modality.as_deref()), bytes);
}
