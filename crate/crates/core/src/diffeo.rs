//! Stationary velocity field algebra.
//!
//! A diffeomorphism is stored as the displacement `u` of `φ = id + u`.
//! Exponentials use scaling and squaring, inverses are `exp(-v)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{check_same_grid, resample, sample_into, Field, GridSpec, VectorField};

/// Number of squarings used by [`exponentiate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Steps {
    /// Smallest count keeping the scaled field at or below half a voxel.
    #[default]
    Auto,
    Fixed(u32),
}

/// `max(2, ceil(log2(‖v‖∞ / 0.5)))`.
pub fn auto_steps(v: &VectorField) -> u32 {
    let m = v.max_norm();
    if m <= 0.0 {
        return 2;
    }
    let t = (m / 0.5).log2().ceil();
    if t.is_finite() && t > 2.0 {
        t as u32
    } else {
        2
    }
}

/// Displacement of `exp(v)` by scaling and squaring.
pub fn exponentiate(v: &VectorField, steps: Steps) -> VectorField {
    let t = match steps {
        Steps::Auto => auto_steps(v),
        Steps::Fixed(t) => t,
    };
    let mut u = v.scaled(0.5f64.powi(t as i32));
    for _ in 0..t {
        u = compose_unchecked(&u, &u);
    }
    u
}

fn compose_unchecked(a: &VectorField, b: &VectorField) -> VectorField {
    let grid = a.grid();
    let d = grid.ndim();
    let mut out = vec![0.0; grid.len() * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
        let c = grid.coords(i);
        let bv = b.vector(i);
        let mut p = [0.0; 3];
        for k in 0..d {
            p[k] = c[k] as f64 + bv[k];
        }
        sample_into(a, &p, o);
        for k in 0..d {
            o[k] += bv[k];
        }
    });
    a.rebuild(grid.clone(), out)
}

/// Displacement of `a ∘ b`: `(a ∘ b)(ω) = a(ω + b(ω)) + b(ω)`.
pub fn compose(a: &VectorField, b: &VectorField) -> Result<VectorField> {
    check_same_grid(a.grid(), b.grid(), "compose")?;
    Ok(compose_unchecked(a, b))
}

/// Subtract the voxelwise group mean so the fields sum to zero.
pub fn center_velocities(fields: &[VectorField]) -> Result<Vec<VectorField>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::invalid("cannot center an empty velocity list"))?;
    for f in &fields[1..] {
        check_same_grid(first.grid(), f.grid(), "center_velocities")?;
    }
    let n = fields.len() as f64;
    let len = first.components().len();
    let mut mean = vec![0.0; len];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f.components()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(fields
        .iter()
        .map(|f| {
            let data = f.components().iter().zip(&mean).map(|(v, m)| v - m).collect();
            f.rebuild(f.grid().clone(), data)
        })
        .collect())
}

/// Coarse-to-fine pyramid of grids; index 0 is the coarsest level and the
/// last entry is `finest`. Each level halves the one above it.
pub fn pyramid_grids(finest: &GridSpec, levels: usize) -> Result<Vec<GridSpec>> {
    if levels == 0 {
        return Err(Error::invalid("level count must be >= 1"));
    }
    let factor = 1usize << (levels - 1);
    if finest.dims().iter().any(|&n| n / factor < 2) {
        return Err(Error::invalid(format!(
            "grid {:?} is too small for {levels} pyramid levels",
            finest.dims()
        )));
    }
    Ok((0..levels)
        .map(|l| finest.coarsened(1 << (levels - 1 - l)))
        .collect())
}

/// Per-image, per-level velocity fields `v_j^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySet {
    levels: Vec<GridSpec>,
    fields: Vec<Vec<VectorField>>,
}

impl VelocitySet {
    /// All-zero velocities for `images` images on the given pyramid.
    pub fn zeros(levels: Vec<GridSpec>, images: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("velocity set needs at least one level"));
        }
        let fields = (0..images)
            .map(|_| levels.iter().cloned().map(VectorField::zeros).collect())
            .collect();
        Ok(Self { levels, fields })
    }

    /// Build from explicit fields; `fields[j][l]` must live on `levels[l]`.
    pub fn new(levels: Vec<GridSpec>, fields: Vec<Vec<VectorField>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("velocity set needs at least one level"));
        }
        for w in levels.windows(2) {
            if w[0].ndim() != w[1].ndim()
                || w[0].dims().iter().zip(w[1].dims()).any(|(a, b)| a > b)
            {
                return Err(Error::invalid("level grids do not form a coarse-to-fine pyramid"));
            }
        }
        for per_image in &fields {
            if per_image.len() != levels.len() {
                return Err(Error::invalid("every image needs one field per level"));
            }
            for (f, g) in per_image.iter().zip(&levels) {
                check_same_grid(f.grid(), g, "velocity level")?;
            }
        }
        Ok(Self { levels, fields })
    }

    pub fn levels(&self) -> &[GridSpec] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn image_count(&self) -> usize {
        self.fields.len()
    }

    pub fn finest(&self) -> &GridSpec {
        self.levels.last().expect("non-empty")
    }

    pub fn get(&self, image: usize, level: usize) -> &VectorField {
        &self.fields[image][level]
    }

    pub fn fields(&self) -> &[Vec<VectorField>] {
        &self.fields
    }

    /// Replace one level of every image; grids must match that level.
    pub fn set_level(&mut self, level: usize, fields: Vec<VectorField>) -> Result<()> {
        if fields.len() != self.fields.len() {
            return Err(Error::invalid("one field per image is required"));
        }
        for f in &fields {
            check_same_grid(f.grid(), &self.levels[level], "velocity level")?;
        }
        for (per_image, f) in self.fields.iter_mut().zip(fields) {
            per_image[level] = f;
        }
        Ok(())
    }

    /// Fields of one level across images.
    pub fn level(&self, level: usize) -> Vec<VectorField> {
        self.fields.iter().map(|f| f[level].clone()).collect()
    }
}

/// Total velocity `v_j⁺ = Σ_l v_j^l`, each level resampled (with vector
/// rescaling) to the finest grid before summation.
pub fn aggregate_levels(vset: &VelocitySet) -> Vec<VectorField> {
    let finest = vset.finest();
    vset.fields
        .par_iter()
        .map(|per_level| {
            let mut total = VectorField::zeros(finest.clone());
            for f in per_level {
                let up = if f.grid() == finest {
                    f.clone()
                } else {
                    resample(f, finest).expect("same dimensionality")
                };
                for (t, u) in total.components_mut().iter_mut().zip(up.components()) {
                    *t += u;
                }
            }
            total
        })
        .collect()
}

/// Forward and inverse displacements `φ_j = exp(v_j⁺)`, `φ_j⁻¹ = exp(-v_j⁺)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    pub forward: Vec<VectorField>,
    pub inverse: Vec<VectorField>,
}

impl TransformSet {
    pub fn from_totals(totals: &[VectorField], steps: Steps) -> Self {
        let pairs: Vec<(VectorField, VectorField)> = totals
            .par_iter()
            .map(|v| (exponentiate(v, steps), exponentiate(&v.scaled(-1.0), steps)))
            .collect();
        let (forward, inverse) = pairs.into_iter().unzip();
        Self { forward, inverse }
    }

    pub fn identity(grid: &GridSpec, images: usize) -> Self {
        Self {
            forward: vec![VectorField::zeros(grid.clone()); images],
            inverse: vec![VectorField::zeros(grid.clone()); images],
        }
    }
}
