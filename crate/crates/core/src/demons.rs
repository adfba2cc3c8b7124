//! Symmetric Demons force on probability maps.
//!
//! For a fixed map `F` and warped moving map `M` (both K channels), the
//! per-voxel difference `φ(0) = F - M` and symmetrised Jacobian
//! `J = -½(∇F + ∇M)` (K×d) give the update
//! `μ̃ = -(JᵀJ + σ²I + ridge·I)⁻¹ Jᵀ φ(0)`, rescaled so its largest norm is
//! `α`. Displacements follow the pull-back convention of
//! [`warp`](crate::grid::warp): if `M(x) = F(x - 1)` the force is `+1`-ward.

use rayon::prelude::*;

use crate::diffeo::{exponentiate, Steps};
use crate::error::{Error, Result};
use crate::grid::{check_same_grid, gradient, warp, CategoricalField, Field, FieldGradient, ImageField, InterpMode, VectorField};

/// Default ridge added to the normal matrix.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Magnitude cap `α₀ = 10 · 2^{l-L}` of pyramid level `level` (0 = coarsest)
/// out of `levels`.
pub fn alpha0_for_level(level: usize, levels: usize) -> f64 {
    10.0 * 2f64.powi(level as i32 + 1 - levels as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonsConfig {
    /// Maximum force norm after normalisation, in `(0, alpha0)`.
    pub alpha: f64,
    pub alpha0: f64,
    /// Gaussian fluid smoothing width in voxels.
    pub fluid_sigma: f64,
    pub ridge: f64,
}

impl DemonsConfig {
    /// Defaults for one pyramid level: `α = 0.4 α₀`, `σ_fluid = 3`.
    pub fn for_level(level: usize, levels: usize) -> Self {
        let alpha0 = alpha0_for_level(level, levels);
        Self {
            alpha: 0.4 * alpha0,
            alpha0,
            fluid_sigma: 3.0,
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < self.alpha0) {
            return Err(Error::invalid(format!(
                "alpha {} outside (0, {})",
                self.alpha, self.alpha0
            )));
        }
        if !(self.fluid_sigma >= 0.0) {
            return Err(Error::invalid("fluid_sigma must be >= 0"));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::invalid("ridge must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonsForceOutput {
    pub mu: VectorField,
    /// Sample variance of the difference vectors.
    pub sigma_phi_sq: f64,
    /// `max_ω ‖μ̃(ω)‖₂` before normalisation.
    pub max_norm: f64,
}

/// Solve `A x = b` for a symmetric positive-definite `d×d` matrix by Cholesky.
pub fn solve_spd(a: &[[f64; 3]; 3], b: &[f64; 3], d: usize) -> Result<[f64; 3]> {
    let mut l = [[0.0f64; 3]; 3];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Degenerate("matrix is not positive definite".into()));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Ok(x)
}

fn check_pair(fixed: &CategoricalField, moving: &CategoricalField) -> Result<()> {
    check_same_grid(fixed.grid(), moving.grid(), "demons")?;
    if fixed.k() != moving.k() {
        return Err(Error::invalid(format!(
            "class count mismatch: {} vs {}",
            fixed.k(),
            moving.k()
        )));
    }
    Ok(())
}

/// Symmetrised Jacobian entry `J[k][a]` at voxel `i`.
#[inline]
fn sym_jacobian(gf: &FieldGradient, gm: &FieldGradient, i: usize, k: usize, a: usize) -> f64 {
    -0.5 * (gf.at(i, k)[a] + gm.at(i, k)[a])
}

/// Unbiased sample variance of the difference vectors over the grid.
fn difference_variance(fixed: &CategoricalField, moving: &CategoricalField) -> f64 {
    let k = fixed.k();
    let n = fixed.grid().len();
    if n < 2 {
        return 0.0;
    }
    let mut mean = vec![0.0; k];
    for (f, m) in fixed.probs().chunks_exact(k).zip(moving.probs().chunks_exact(k)) {
        for c in 0..k {
            mean[c] += f[c] - m[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = fixed
        .probs()
        .chunks_exact(k)
        .zip(moving.probs().chunks_exact(k))
        .map(|(f, m)| (0..k).map(|c| (f[c] - m[c] - mean[c]).powi(2)).sum::<f64>())
        .sum();
    ss / (n - 1) as f64
}

/// Normalised symmetric Demons force, before fluid smoothing.
pub fn demons_force(fixed: &CategoricalField, moving_warped: &CategoricalField, cfg: &DemonsConfig) -> Result<DemonsForceOutput> {
    check_pair(fixed, moving_warped)?;
    let grid = fixed.grid();
    let d = grid.ndim();
    let k = fixed.k();
    let gf = gradient(fixed);
    let gm = gradient(moving_warped);
    let sigma_phi_sq = difference_variance(fixed, moving_warped);
    let damp = sigma_phi_sq + cfg.ridge;

    let mut raw = vec![0.0; grid.len() * d];
    raw.par_chunks_mut(d).enumerate().try_for_each(|(i, out)| -> Result<()> {
        let f = fixed.at(i);
        let m = moving_warped.at(i);
        let mut a = [[0.0f64; 3]; 3];
        let mut b = [0.0f64; 3];
        for c in 0..k {
            let diff = f[c] - m[c];
            let mut row = [0.0; 3];
            for (ax, r) in row.iter_mut().enumerate().take(d) {
                *r = sym_jacobian(&gf, &gm, i, c, ax);
            }
            for p in 0..d {
                b[p] += row[p] * diff;
                for q in 0..d {
                    a[p][q] += row[p] * row[q];
                }
            }
        }
        if b[..d].iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        for (p, row) in a.iter_mut().enumerate().take(d) {
            row[p] += damp;
        }
        let x = solve_spd(&a, &b, d)?;
        for p in 0..d {
            out[p] = -x[p];
        }
        Ok(())
    })?;

    let max_norm = raw
        .chunks_exact(d)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        let s = cfg.alpha / max_norm;
        raw.iter_mut().for_each(|v| *v *= s);
    }
    Ok(DemonsForceOutput {
        mu: VectorField::new(grid.clone(), raw)?,
        sigma_phi_sq,
        max_norm,
    })
}

/// Normalised discrete Gaussian truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian convolution of each component with clamped edges.
pub fn fluid_smooth(v: &VectorField, sigma: f64) -> VectorField {
    if !(sigma > 0.0) {
        return v.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let grid = v.grid().clone();
    let d = v.dim();
    let s = grid.strides();
    let mut data = v.components().to_vec();
    for axis in 0..grid.ndim() {
        let n = grid.dims()[axis] as i64;
        let src = data.clone();
        data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            let c = grid.coords(i);
            let base = i - c[axis] * s[axis];
            out.iter_mut().for_each(|o| *o = 0.0);
            for (t, &w) in kernel.iter().enumerate() {
                let x = (c[axis] as i64 + t as i64 - r).clamp(0, n - 1) as usize;
                let j = base + x * s[axis];
                for (o, &val) in out.iter_mut().zip(&src[j * d..(j + 1) * d]) {
                    *o += w * val;
                }
            }
        });
    }
    VectorField::new(grid, data).expect("shape preserved")
}

/// Heuristic per-voxel velocity variance `σ_base² / (1 + ‖J‖_F²)`.
pub fn estimate_velocity_variance(fixed: &CategoricalField, moving_warped: &CategoricalField, sigma_base: f64) -> Result<ImageField> {
    check_pair(fixed, moving_warped)?;
    if !(sigma_base > 0.0) {
        return Err(Error::invalid("sigma_base must be > 0"));
    }
    let gf = gradient(fixed);
    let gm = gradient(moving_warped);
    let d = fixed.grid().ndim();
    let k = fixed.k();
    let values = (0..fixed.grid().len())
        .into_par_iter()
        .map(|i| {
            let mut fro = 0.0;
            for c in 0..k {
                for a in 0..d {
                    fro += sym_jacobian(&gf, &gm, i, c, a).powi(2);
                }
            }
            sigma_base * sigma_base / (1.0 + fro)
        })
        .collect();
    ImageField::new(fixed.grid().clone(), values)
}

/// Sum of squared differences between `fixed` and `moving` warped by
/// `exp(velocity)`.
pub fn correspondence_energy(fixed: &CategoricalField, moving: &CategoricalField, velocity: &VectorField) -> Result<f64> {
    check_pair(fixed, moving)?;
    let u = exponentiate(velocity, Steps::Auto);
    let w = warp(moving, &u, InterpMode::Linear)?;
    Ok(fixed
        .probs()
        .iter()
        .zip(w.probs())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}
