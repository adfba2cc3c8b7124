//! Brute-force reference implementations and random instance generators.

#![allow(dead_code)]

use groupreg::grid::{CategoricalField, Field, GridSpec, ImageField, VectorField};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_simplex<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    // spread over several orders of magnitude so the logs are exercised
    let mut p: Vec<f64> = (0..k).map(|_| 10f64.powf(rng.gen_range(-3.0..0.0))).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

pub fn random_image<R: Rng>(grid: &GridSpec, lo: f64, hi: f64, rng: &mut R) -> ImageField {
    ImageField::new(grid.clone(), (0..grid.len()).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_categorical<R: Rng>(grid: &GridSpec, k: usize, rng: &mut R) -> CategoricalField {
    let probs = (0..grid.len()).flat_map(|_| random_simplex(k, rng)).collect();
    CategoricalField::new(grid.clone(), k, probs).unwrap()
}

/// Sum of random low-frequency sinusoids (0.5 to 2 periods across the grid), rescaled to `‖v‖∞ = amplitude`.
pub fn smooth_velocity<R: Rng>(grid: &GridSpec, amplitude: f64, rng: &mut R) -> VectorField {
    sinusoid_field(grid, amplitude, 0.5..2.0, rng)
}

/// Like [`smooth_velocity`] with a caller-chosen range of periods across the grid.
pub fn sinusoid_field<R: Rng>(grid: &GridSpec, amplitude: f64, periods: std::ops::Range<f64>, rng: &mut R) -> VectorField {
    let d = grid.ndim();
    let waves: Vec<(usize, [f64; 3], f64)> = (0..4 * d)
        .map(|i| {
            let mut freq = [0.0; 3];
            for f in freq.iter_mut().take(d) {
                *f = rng.gen_range(periods.clone()) * std::f64::consts::TAU / grid.dims()[0] as f64;
            }
            (i % d, freq, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let v = VectorField::from_fn(grid.clone(), |c| {
        let mut out = vec![0.0; d];
        for (comp, f, phase) in &waves {
            let arg: f64 = (0..d).map(|a| f[a] * c[a] as f64).sum::<f64>() + phase;
            out[*comp] += arg.sin();
        }
        out
    })
    .unwrap();
    let m = v.max_norm();
    v.scaled(amplitude / m)
}

pub fn bf_geometric_mean(views: &[Vec<f64>]) -> Vec<f64> {
    let n = views.len() as f64;
    let mut q: Vec<f64> = (0..views[0].len())
        .map(|k| views.iter().map(|v| v[k].ln()).sum::<f64>() / n)
        .map(f64::exp)
        .collect();
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    q
}

pub fn bf_arithmetic_mean(views: &[Vec<f64>]) -> Vec<f64> {
    (0..views[0].len())
        .map(|k| views.iter().map(|v| v[k]).sum::<f64>() / views.len() as f64)
        .collect()
}

pub fn bf_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Voxel sets of two masks: `2|A∩B|/(|A|+|B|)`, 1 for two empty sets.
pub fn bf_dice(a: &[bool], b: &[bool]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: std::collections::BTreeSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

pub fn bf_boundary(mask: &[bool], grid: &GridSpec) -> Vec<usize> {
    let dims = grid.dims();
    (0..grid.len())
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let c = grid.coords(i);
            (0..dims.len()).any(|a| {
                [-1i64, 1].iter().any(|&o| {
                    let x = c[a] as i64 + o;
                    if x < 0 || x >= dims[a] as i64 {
                        return false;
                    }
                    let mut n = c;
                    n[a] = x as usize;
                    !mask[grid.index(&n[..dims.len()])]
                })
            })
        })
        .collect()
}

fn dist(grid: &GridSpec, a: usize, b: usize) -> f64 {
    let (ca, cb) = (grid.coords(a), grid.coords(b));
    (0..grid.ndim())
        .map(|k| (ca[k] as f64 - cb[k] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn bf_assd(a: &[bool], b: &[bool], grid: &GridSpec) -> Option<f64> {
    let (ba, bb) = (bf_boundary(a, grid), bf_boundary(b, grid));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let near = |from: &[usize], to: &[usize]| -> f64 {
        from.iter()
            .map(|&i| to.iter().map(|&j| dist(grid, i, j)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    Some((near(&ba, &bb) + near(&bb, &ba)) / (ba.len() + bb.len()) as f64)
}

/// Clamp-to-edge bilinear sample of one component of a 2-D field.
pub fn bf_bilinear(f: &VectorField, comp: usize, x: f64, y: f64) -> f64 {
    let (nx, ny) = (f.grid().dims()[0], f.grid().dims()[1]);
    let x = x.clamp(0.0, (nx - 1) as f64);
    let y = y.clamp(0.0, (ny - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |i: usize, j: usize| f.vector(i + nx * j)[comp];
    (1.0 - tx) * (1.0 - ty) * at(x0, y0) + tx * (1.0 - ty) * at(x1, y0) + (1.0 - tx) * ty * at(x0, y1) + tx * ty * at(x1, y1)
}

/// `a ∘ b` for 2-D displacement fields, as plain vectors per voxel.
pub fn bf_compose(a: &VectorField, b: &VectorField) -> Vec<[f64; 2]> {
    let nx = a.grid().dims()[0];
    (0..a.grid().len())
        .map(|i| {
            let (x, y) = ((i % nx) as f64, (i / nx) as f64);
            let bv = b.vector(i);
            let (px, py) = (x + bv[0], y + bv[1]);
            [bf_bilinear(a, 0, px, py) + bv[0], bf_bilinear(a, 1, px, py) + bv[1]]
        })
        .collect()
}

/// gWI from its definition on 2-D grids.
pub fn bf_gwi(truth: &[VectorField], pred: &[VectorField], foreground: &[bool]) -> f64 {
    let grid = truth[0].grid();
    let (nx, ny) = (grid.dims()[0], grid.dims()[1]);
    let r: Vec<Vec<[f64; 2]>> = truth.iter().zip(pred).map(|(g, p)| bf_compose(g, p)).collect();
    let n = r.len() as f64;
    let mut sum = 0.0;
    for rj in &r {
        let (mut ss, mut count) = (0.0, 0usize);
        for i in 0..grid.len() {
            let (x, y) = ((i % nx) as f64 + rj[i][0], (i / nx) as f64 + rj[i][1]);
            let (rx, ry) = (x.round(), y.round());
            if rx < 0.0 || ry < 0.0 || rx > (nx - 1) as f64 || ry > (ny - 1) as f64 {
                continue;
            }
            if !foreground[rx as usize + nx * ry as usize] {
                continue;
            }
            let mx = r.iter().map(|v| v[i][0]).sum::<f64>() / n;
            let my = r.iter().map(|v| v[i][1]).sum::<f64>() / n;
            ss += (rj[i][0] - mx).powi(2) + (rj[i][1] - my).powi(2);
            count += 1;
        }
        sum += (ss / count as f64).sqrt();
    }
    sum / n
}

/// `½ (Σ_c λ μ_cᵀ L μ_c + Σ_r d (λ L_rr σ_r − ln σ_r))` with an explicitly assembled graph Laplacian.
pub fn dense_velocity_kl(mu: &VectorField, sigma: &[f64], lambda: f64) -> (f64, f64, f64) {
    let grid = mu.grid();
    let n = grid.len();
    let d = mu.dim();
    let mut lap = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && dist(grid, i, j) == 1.0 {
                lap[(i, j)] = -1.0;
                lap[(i, i)] += 1.0;
            }
        }
    }
    let mut quad = 0.0;
    for c in 0..d {
        let m = nalgebra::DVector::from_iterator(n, (0..n).map(|i| mu.vector(i)[c]));
        quad += lambda * m.dot(&(&lap * &m));
    }
    let trace: f64 = (0..n)
        .map(|i| d as f64 * (lambda * lap[(i, i)] * sigma[i] - sigma[i].ln()))
        .sum();
    (trace, quad, 0.5 * (trace + quad))
}
