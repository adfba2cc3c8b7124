//! Groupwise evaluation metrics.
//!
//! Pairwise measures (Dice, ASSD) are averaged over all unordered image
//! pairs. Surfaces are the mask voxels with at least one in-grid face
//! neighbour outside the mask; the grid border itself is not a surface.
//! Empty-vs-empty Dice counts as 1, empty-vs-non-empty as 0.

use rayon::prelude::*;

use crate::diffeo::compose;
use crate::error::{Error, Result};
use crate::grid::{check_same_grid, jacobian_determinant, Field, GridSpec, LabelField, VectorField};

fn check_labels(labels: &[LabelField]) -> Result<&GridSpec> {
    if labels.len() < 2 {
        return Err(Error::invalid("groupwise metrics need >= 2 label fields"));
    }
    for l in &labels[1..] {
        check_same_grid(labels[0].grid(), l.grid(), "groupwise metric")?;
    }
    Ok(labels[0].grid())
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// `2|A∩B| / (|A|+|B|)` with the empty-pair convention.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        sa += usize::from(x);
        sb += usize::from(y);
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

/// Pair-averaged Dice of one class, or of every foreground class
/// (`1..C`) averaged when `class` is `None`.
pub fn groupwise_dice(labels: &[LabelField], class: Option<u32>) -> Result<f64> {
    check_labels(labels)?;
    let classes: Vec<u32> = match class {
        Some(c) => vec![c],
        None => (1..labels.iter().map(LabelField::classes).max().unwrap_or(1)).collect(),
    };
    if classes.is_empty() {
        return Err(Error::invalid("no foreground classes to score"));
    }
    let pairs = pairs(labels.len());
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let masks: Vec<Vec<bool>> = labels.iter().map(|l| l.mask(c)).collect();
            pairs.iter().map(|&(a, b)| dice(&masks[a], &masks[b])).sum::<f64>() / pairs.len() as f64
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Mask voxels with an in-grid face neighbour outside the mask.
pub fn boundary(mask: &[bool], grid: &GridSpec) -> Vec<bool> {
    let s = grid.strides();
    (0..grid.len())
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let c = grid.coords(i);
            grid.dims().iter().enumerate().any(|(a, &n)| {
                (c[a] > 0 && !mask[i - s[a]]) || (c[a] + 1 < n && !mask[i + s[a]])
            })
        })
        .collect()
}

/// One pass of the lower-envelope squared distance transform on a line.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] = -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance (voxel units) to the nearest seed.
pub fn squared_distance_transform(seeds: &[bool], grid: &GridSpec) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let s = grid.strides();
    for (axis, &n) in grid.dims().iter().enumerate() {
        let starts: Vec<usize> = (0..grid.len()).filter(|&i| grid.coords(i)[axis] == 0).collect();
        let lines: Vec<(usize, Vec<f64>)> = starts
            .par_iter()
            .map(|&start| {
                let f: Vec<f64> = (0..n).map(|t| d[start + t * s[axis]]).collect();
                let mut out = vec![0.0; n];
                let mut v = vec![0usize; n];
                let mut z = vec![0.0; n + 1];
                edt_line(&f, &mut out, &mut v, &mut z);
                (start, out)
            })
            .collect();
        for (start, out) in lines {
            for (t, val) in out.into_iter().enumerate() {
                d[start + t * s[axis]] = val;
            }
        }
    }
    d
}

/// Symmetric mean surface distance of two masks; `None` if either surface
/// is empty.
pub fn assd(a: &[bool], b: &[bool], grid: &GridSpec) -> Option<f64> {
    let ba = boundary(a, grid);
    let bb = boundary(b, grid);
    let na = ba.iter().filter(|&&x| x).count();
    let nb = bb.iter().filter(|&&x| x).count();
    if na == 0 || nb == 0 {
        return None;
    }
    let da = squared_distance_transform(&ba, grid);
    let db = squared_distance_transform(&bb, grid);
    let sum_ab: f64 = (0..grid.len()).filter(|&i| ba[i]).map(|i| db[i].sqrt()).sum();
    let sum_ba: f64 = (0..grid.len()).filter(|&i| bb[i]).map(|i| da[i].sqrt()).sum();
    Some((sum_ab + sum_ba) / (na + nb) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssdReport {
    /// Average over the scored pairs (NaN if none were scored).
    pub mean: f64,
    /// Pairs skipped because a surface was empty.
    pub excluded: Vec<(usize, usize)>,
}

/// Pair-averaged ASSD of one class.
pub fn groupwise_assd(labels: &[LabelField], class: u32) -> Result<AssdReport> {
    let grid = check_labels(labels)?;
    let masks: Vec<Vec<bool>> = labels.iter().map(|l| l.mask(class)).collect();
    let results: Vec<((usize, usize), Option<f64>)> = pairs(labels.len())
        .into_par_iter()
        .map(|(a, b)| ((a, b), assd(&masks[a], &masks[b], grid)))
        .collect();
    let scored: Vec<f64> = results.iter().filter_map(|(_, v)| *v).collect();
    let excluded = results.iter().filter(|(_, v)| v.is_none()).map(|(p, _)| *p).collect();
    let mean = if scored.is_empty() {
        f64::NAN
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(AssdReport { mean, excluded })
}

fn inside(grid: &GridSpec, foreground: &[bool], p: &[f64]) -> bool {
    let mut idx = 0;
    let s = grid.strides();
    for (a, &n) in grid.dims().iter().enumerate() {
        let x = p[a].round();
        if !(x >= 0.0 && x <= (n - 1) as f64) {
            return false;
        }
        idx += x as usize * s[a];
    }
    foreground[idx]
}

/// Groupwise warping index.
///
/// `r_j = φ_j† ∘ φ̂_j - id` (displacement of the composition); residuals are
/// centred by their voxelwise group mean, and the RMS norm of the centred
/// residual over voxels whose composed position lands (nearest voxel) in
/// `foreground` is averaged over images.
pub fn groupwise_warping_index(ground_truth: &[VectorField], predicted: &[VectorField], foreground: &[bool]) -> Result<f64> {
    if ground_truth.len() < 2 || ground_truth.len() != predicted.len() {
        return Err(Error::invalid("gWI needs >= 2 matching transform pairs"));
    }
    let grid = ground_truth[0].grid();
    if foreground.len() != grid.len() {
        return Err(Error::invalid("foreground mask has the wrong length"));
    }
    let residuals = ground_truth
        .iter()
        .zip(predicted)
        .map(|(g, p)| {
            check_same_grid(grid, g.grid(), "gWI")?;
            compose(g, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = grid.ndim();
    let n = residuals.len() as f64;
    let mut mean = vec![0.0; grid.len() * d];
    for r in &residuals {
        for (m, v) in mean.iter_mut().zip(r.components()) {
            *m += v / n;
        }
    }
    let mut total = 0.0;
    for r in &residuals {
        let (mut ss, mut count) = (0.0, 0usize);
        for i in 0..grid.len() {
            let c = grid.coords(i);
            let v = r.vector(i);
            let mut p = [0.0; 3];
            for a in 0..d {
                p[a] = c[a] as f64 + v[a];
            }
            if !inside(grid, foreground, &p[..d]) {
                continue;
            }
            ss += (0..d).map(|a| (v[a] - mean[i * d + a]).powi(2)).sum::<f64>();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate("gWI effective foreground is empty".into()));
        }
        total += (ss / count as f64).sqrt();
    }
    Ok(total / n)
}

/// Percentage of foreground voxels with `det ∇φ ≤ 0`, averaged over
/// transforms; `None` scores every voxel.
pub fn negative_jacobian_fraction(transforms: &[VectorField], foreground: Option<&[bool]>) -> Result<f64> {
    if transforms.is_empty() {
        return Err(Error::invalid("no transforms given"));
    }
    let mut total = 0.0;
    for t in transforms {
        if let Some(f) = foreground {
            if f.len() != t.grid().len() {
                return Err(Error::invalid("foreground mask has the wrong length"));
            }
        }
        let det = jacobian_determinant(t);
        let (mut neg, mut count) = (0usize, 0usize);
        for (i, &v) in det.values().iter().enumerate() {
            if foreground.map_or(true, |f| f[i]) {
                count += 1;
                neg += usize::from(v <= 0.0);
            }
        }
        if count > 0 {
            total += 100.0 * neg as f64 / count as f64;
        }
    }
    Ok(total / transforms.len() as f64)
}
