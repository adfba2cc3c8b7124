//! Synthetic multi-modal phantom groups with known deformations.
//!
//! The anatomy is an elliptical polar checkerboard: a central core disc
//! surrounded by rings split into angular sectors of alternating class, on
//! a zero background. Each modality renders the classes through its own
//! permutation of intensity levels, so no single intensity mapping relates
//! two modalities linearly. Every copy of the anatomy is warped (nearest
//! neighbour) by an independent cubic B-spline free-form deformation
//! `ψ_j = id + d_j`, rendered, and corrupted by Gaussian noise; `ψ_j` is the
//! ground-truth correspondence.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ImageField, LabelField, VectorField};
use crate::structrep::TaggedImage;

/// Random free-form deformation parameters (voxel units).
#[derive(Debug, Clone, PartialEq)]
pub struct FfdSpec {
    pub spacing: f64,
    pub bound: f64,
    pub seed: u64,
}

impl FfdSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing >= 2.0) {
            return Err(Error::invalid("FFD control spacing must be >= 2 voxels"));
        }
        if !(self.bound >= 0.0 && self.bound < self.spacing / 2.0) {
            return Err(Error::invalid("FFD bound must lie in [0, spacing/2)"));
        }
        Ok(())
    }

    /// Bound on any second partial derivative of the dense field:
    /// the cubic B-spline second-derivative weights have absolute sum ≤ 4.
    pub fn second_derivative_bound(&self) -> f64 {
        4.0 * self.bound / (self.spacing * self.spacing)
    }
}

/// Uniform cubic B-spline basis at fractional offset `t`.
fn bspline(t: f64) -> [f64; 4] {
    let it = 1.0 - t;
    [
        it * it * it / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Dense displacement of a cubic B-spline FFD whose control displacements
/// are i.i.d. uniform in `[-bound, bound]` per component.
pub fn random_ffd(spec: &FfdSpec, grid: &GridSpec) -> Result<VectorField> {
    spec.validate()?;
    let nd = grid.ndim();
    // control point i sits at (i - 1) * spacing
    let ctrl: Vec<usize> = grid
        .dims()
        .iter()
        .map(|&n| ((n - 1) as f64 / spec.spacing).floor() as usize + 4)
        .collect();
    let ncp: usize = ctrl.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coeffs: Vec<f64> = if spec.bound > 0.0 {
        (0..ncp * nd).map(|_| rng.gen_range(-spec.bound..=spec.bound)).collect()
    } else {
        vec![0.0; ncp * nd]
    };
    let mut cs = [0usize; 3];
    let mut acc = 1;
    for a in 0..nd {
        cs[a] = acc;
        acc *= ctrl[a];
    }
    let mut data = vec![0.0; grid.len() * nd];
    for (i, out) in data.chunks_exact_mut(nd).enumerate() {
        let c = grid.coords(i);
        let mut base = [0usize; 3];
        let mut w = [[1.0f64; 4]; 3];
        for a in 0..nd {
            let u = c[a] as f64 / spec.spacing;
            let cell = u.floor();
            base[a] = cell as usize;
            w[a] = bspline(u - cell);
        }
        let corners = 4usize.pow(nd as u32);
        for corner in 0..corners {
            let mut weight = 1.0;
            let mut idx = 0;
            let mut rem = corner;
            for a in 0..nd {
                let o = rem % 4;
                rem /= 4;
                weight *= w[a][o];
                idx += (base[a] + o) * cs[a];
            }
            for (k, v) in out.iter_mut().enumerate() {
                *v += weight * coeffs[idx * nd + k];
            }
        }
    }
    VectorField::new(grid.clone(), data)
}

/// Phantom anatomy and group design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    pub modalities: Vec<String>,
    /// Number of images; modalities are assigned cyclically.
    pub images: usize,
    /// Angular sectors per ring.
    pub sectors: usize,
    /// Approximate ring width in voxels along the major axis.
    pub ring_width: f64,
    pub noise_sigma: f64,
    /// Control spacing and bound of the per-image FFDs (the seed is derived).
    pub ffd_spacing: f64,
    pub ffd_bound: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: vec![96, 96],
            modalities: vec!["t1".into(), "t2".into(), "flair".into()],
            images: 3,
            sectors: 24,
            ring_width: 5.0,
            noise_sigma: 0.02,
            ffd_spacing: 10.0,
            ffd_bound: 3.0,
            seed: 0,
        }
    }
}

/// Number of anatomy classes (background, core, two checker classes).
pub const PHANTOM_CLASSES: usize = 4;
const LEVELS: [f64; PHANTOM_CLASSES] = [0.1, 0.4, 0.7, 1.0];

/// A rendered phantom group with everything needed for evaluation.
#[derive(Debug, Clone)]
pub struct PhantomGroup {
    /// Undistorted anatomy labels.
    pub anatomy: LabelField,
    pub images: Vec<TaggedImage>,
    /// Anatomy warped by each image's deformation (nearest neighbour).
    pub labels: Vec<LabelField>,
    /// Ground-truth displacements `d_j` of `ψ_j = id + d_j`.
    pub displacements: Vec<VectorField>,
    /// Intensity level of each class, per modality (in `spec.modalities` order).
    pub codebooks: Vec<Vec<f64>>,
}

impl PhantomGroup {
    /// Nonzero labels of the undistorted anatomy.
    pub fn foreground(&self) -> Vec<bool> {
        self.anatomy.foreground()
    }
}

/// Label of a voxel in the polar checkerboard anatomy.
pub fn phantom_anatomy(spec: &PhantomSpec) -> Result<LabelField> {
    let grid = GridSpec::new(&spec.dims)?;
    if spec.sectors < 2 || !(spec.ring_width > 0.0) {
        return Err(Error::invalid("phantom needs >= 2 sectors and a positive ring width"));
    }
    let nx = spec.dims[0] as f64;
    let ny = spec.dims[1] as f64;
    let (ax, ay) = (0.42 * nx, 0.36 * ny);
    let az = spec.dims.get(2).map(|&n| 0.42 * n as f64);
    let core = 0.25;
    let ring = spec.ring_width / ax;
    let labels = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let x = (c[0] as f64 - (nx - 1.0) / 2.0) / ax;
            let y = (c[1] as f64 - (ny - 1.0) / 2.0) / ay;
            let z = az.map_or(0.0, |az| (c[2] as f64 - (spec.dims[2] as f64 - 1.0) / 2.0) / az);
            let rho = (x * x + y * y + z * z).sqrt();
            if rho > 1.0 {
                0
            } else if rho < core {
                1
            } else {
                let r = ((rho - core) / ring).floor() as usize;
                let theta = y.atan2(x) + PI;
                let s = ((theta / (2.0 * PI) * spec.sectors as f64).floor() as usize).min(spec.sectors - 1);
                2 + ((r + s) % 2) as u32
            }
        })
        .collect();
    LabelField::new(grid, PHANTOM_CLASSES as u32, labels)
}

/// Distinct level permutations, one per modality.
pub fn phantom_codebooks(modalities: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for m in 0..modalities {
        let mut levels = LEVELS.to_vec();
        if m > 0 {
            // distinct while we can be; 4! = 24 permutations exist
            for _ in 0..64 {
                levels.shuffle(&mut rng);
                if !out.contains(&levels) {
                    break;
                }
            }
        }
        out.push(levels);
    }
    out
}

/// Render a label field through a per-class intensity table.
pub fn render(labels: &LabelField, levels: &[f64]) -> ImageField {
    let values = labels.labels().iter().map(|&l| levels[l as usize]).collect();
    ImageField::new(labels.grid().clone(), values).expect("one value per voxel")
}

/// Build a phantom group: render, deform, add noise.
pub fn make_phantom_group(spec: &PhantomSpec) -> Result<PhantomGroup> {
    if spec.modalities.len() < 2 {
        return Err(Error::invalid("phantom groups need >= 2 modalities"));
    }
    if spec.images < 2 {
        return Err(Error::invalid("phantom groups need >= 2 images"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    let anatomy = phantom_anatomy(spec)?;
    let grid = anatomy.grid().clone();
    let codebooks = phantom_codebooks(spec.modalities.len(), spec.seed);
    let mut images = Vec::with_capacity(spec.images);
    let mut labels = Vec::with_capacity(spec.images);
    let mut displacements = Vec::with_capacity(spec.images);
    for j in 0..spec.images {
        let m = j % spec.modalities.len();
        let ffd = FfdSpec {
            spacing: spec.ffd_spacing,
            bound: spec.ffd_bound,
            seed: spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(j as u64 + 1),
        };
        let d = random_ffd(&ffd, &grid)?;
        // nearest-neighbour warping keeps image and label maps consistent
        let warped = anatomy.warp(&d)?;
        let mut values = render(&warped, &codebooks[m]).into_values();
        if spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(j as u64 + 1);
            let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
            values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        images.push(TaggedImage::new(spec.modalities[m].clone(), ImageField::new(grid.clone(), values)?));
        labels.push(warped);
        displacements.push(d);
    }
    Ok(PhantomGroup {
        anatomy,
        images,
        labels,
        displacements,
        codebooks,
    })
}
