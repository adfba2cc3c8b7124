//! End-to-end behaviour of the groupwise registration loop and its state files.

use groupreg::engine::{register_group, register_group_scaled, EngineConfig, GroupState};
use groupreg::grid::{GridSpec, ImageField, VectorField};
use groupreg::io::state::{decode_state, encode_state, export_state, import_state};
use groupreg::structrep::{fit_view_extractor, TaggedImage};
use groupreg::synth::{make_phantom_group, phantom_anatomy, phantom_codebooks, render, PhantomSpec};
use groupreg::Error;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: vec![48, 48],
        ring_width: 4.0,
        sectors: 12,
        ffd_spacing: 8.0,
        ffd_bound: 2.0,
        seed,
        ..PhantomSpec::default()
    }
}

fn config() -> EngineConfig {
    EngineConfig {
        k: 4,
        iters_per_level: 20,
        ..EngineConfig::default()
    }
}

fn registered(seed: u64) -> (Vec<TaggedImage>, GroupState) {
    let group = make_phantom_group(&small_spec(seed)).unwrap();
    let state = register_group(&group.images, &config()).unwrap();
    (group.images, state)
}

#[test]
fn identical_images_stay_put() {
    let group = make_phantom_group(&small_spec(4)).unwrap();
    let img = group.images[0].image.clone();
    let images: Vec<_> = ["t1", "t2", "flair"].iter().map(|m| TaggedImage::new(*m, img.clone())).collect();
    let state = register_group(&images, &config()).unwrap();
    for f in &state.transforms.forward {
        assert!(f.max_norm() < 1e-6, "max displacement {}", f.max_norm());
    }
}

#[test]
fn recovers_a_three_voxel_translation() {
    // few sectors so the pattern has no near-periodic ambiguity along x
    let spec = PhantomSpec { dims: vec![64, 64], sectors: 6, ..small_spec(0) };
    let anatomy = phantom_anatomy(&spec).unwrap();
    let grid = anatomy.grid().clone();
    let shift = VectorField::uniform(grid.clone(), &[3.0, 0.0]).unwrap();
    let moved = anatomy.warp(&shift).unwrap();
    let levels = phantom_codebooks(2, 0);
    let images = vec![
        TaggedImage::new("t1", render(&anatomy, &levels[0])),
        TaggedImage::new("t2", render(&moved, &levels[1])),
    ];
    let state = register_group(&images, &config()).unwrap();
    // I_1(x) = I_0(x + 3), so aligning both needs φ_1 - φ_0 = -3 along x
    let fg = anatomy.foreground();
    let (mut sum, mut n) = (0.0, 0.0);
    for i in 0..grid.len() {
        if fg[i] && grid.boundary_distance(i) >= 6 {
            sum += state.transforms.forward[1].vector(i)[0] - state.transforms.forward[0].vector(i)[0];
            n += 1.0;
        }
    }
    let mean = sum / n;
    assert!((mean + 3.0).abs() < 0.5, "relative x displacement {mean}");
}

#[test]
fn totals_are_zero_mean_and_transforms_consistent() {
    let (_, state) = registered(1);
    let grid = state.grid().clone();
    for c in 0..grid.len() * grid.ndim() {
        let s: f64 = state.totals.iter().map(|t| t.components()[c]).sum();
        assert!(s.abs() < 1e-9);
    }
    assert!(!state.trace.is_empty());
    let objective: Vec<f64> = state.trace.iter().map(|t| t.objective).collect();
    assert!(objective.last().unwrap() < objective.first().unwrap());
    let breakdown = state.elbo().unwrap();
    let sum = breakdown.reconstruction + breakdown.structural + breakdown.regularization;
    assert!((breakdown.total - sum).abs() <= 1e-10 * breakdown.total.abs().max(1.0));
}

#[test]
fn registration_is_deterministic() {
    let (_, a) = registered(2);
    let (_, b) = registered(2);
    assert_eq!(a, b);
}

#[test]
fn reversing_the_group_reverses_the_transforms() {
    let (images, state) = registered(3);
    let reversed: Vec<_> = images.iter().rev().cloned().collect();
    let back = register_group(&reversed, &config()).unwrap();
    let n = images.len();
    for j in 0..n {
        let (a, b) = (&state.transforms.forward[j], &back.transforms.forward[n - 1 - j]);
        let diff = a
            .components()
            .iter()
            .zip(b.components())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "image {j}: transforms differ by {diff}");
    }
}

#[test]
fn trained_extractors_register_subsets_and_larger_groups() {
    let spec = small_spec(5);
    let base = make_phantom_group(&spec).unwrap();
    let cfg = config();
    let (extractor, _) = fit_view_extractor(&base.images, &cfg.extractor_options()).unwrap();
    // a pair missing one of the trained modalities
    let pair = register_group_scaled(&base.images[..2], &extractor, &cfg).unwrap();
    assert_eq!(pair.transforms.forward.len(), 2);
    let big = make_phantom_group(&PhantomSpec { images: 6, ..spec }).unwrap();
    let six = register_group_scaled(&big.images, &extractor, &cfg).unwrap();
    assert_eq!(six.image_count(), 6);
    let unknown = vec![base.images[0].clone(), TaggedImage::new("pd", base.images[1].image.clone())];
    assert!(matches!(register_group_scaled(&unknown, &extractor, &cfg), Err(Error::InvalidInput(_))));
}

#[test]
fn rejects_bad_groups() {
    let group = make_phantom_group(&small_spec(6)).unwrap();
    assert!(matches!(register_group(&group.images[..1], &config()), Err(Error::InvalidInput(_))));
    let grid = GridSpec::new(&[48, 48]).unwrap();
    let flat: Vec<_> = ["t1", "t2"]
        .iter()
        .map(|m| TaggedImage::new(*m, ImageField::constant(grid.clone(), 0.5)))
        .collect();
    assert!(matches!(register_group(&flat, &config()), Err(Error::Degenerate(_))));
    let deep = EngineConfig { levels: 8, ..config() };
    assert!(register_group(&group.images, &deep).is_err());
}

#[test]
fn state_roundtrips_bit_exactly_and_rejects_damage() {
    let (_, state) = registered(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.grs");
    export_state(&state, &path).unwrap();
    assert_eq!(import_state(&path).unwrap(), state);

    let bytes = encode_state(&state).unwrap();
    for cut in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 5] {
        match decode_state(&bytes[..cut]) {
            Err(Error::Parse { .. }) | Err(Error::Format { .. }) => {}
            other => panic!("truncated state at {cut} gave {other:?}"),
        }
    }
    let text = String::from_utf8_lossy(&bytes[..64]).replace("GRSTATE 1", "GRSTATE 7");
    let mut bumped = text.into_bytes();
    bumped.extend_from_slice(&bytes[64..]);
    assert!(matches!(decode_state(&bumped), Err(Error::Version { .. })));
}
