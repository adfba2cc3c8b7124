//! Regular-grid field containers and the spatial primitives built on them.
//!
//! All fields store their values voxel-major with the first axis varying
//! fastest: voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`, and a field
//! with `c` channels stores channel `k` of that voxel at `idx * c + k`.
//!
//! Displacements are expressed in voxel units of the grid they live on.
//! Interpolation is multilinear with clamp-to-edge boundaries.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance on the per-voxel simplex constraint of [`CategoricalField`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Voxel counts and physical spacing of a 2-D or 3-D regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridSpec {
    /// Grid with unit spacing.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::invalid(format!(
                "grids must be 2-D or 3-D, got {} axes",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::invalid("spacing length differs from dims length"));
        }
        if let Some(n) = dims.iter().find(|&&n| n < 2) {
            return Err(Error::invalid(format!("every dim must be >= 2, got {n}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid("every spacing must be finite and > 0"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> [usize; 3] {
        let mut s = [0usize; 3];
        let mut acc = 1;
        for (a, &n) in self.dims.iter().enumerate() {
            s[a] = acc;
            acc *= n;
        }
        s
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        let s = self.strides();
        coords.iter().zip(s.iter()).map(|(c, s)| c * s).sum()
    }

    /// Integer coordinates of a linear voxel index (unused axes are zero).
    pub fn coords(&self, mut idx: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for (a, &n) in self.dims.iter().enumerate() {
            c[a] = idx % n;
            idx /= n;
        }
        c
    }

    /// Grid coarsened by an integer factor; dims are rounded up and kept >= 2.
    pub fn coarsened(&self, factor: usize) -> GridSpec {
        let dims: Vec<usize> = self
            .dims
            .iter()
            .map(|&n| n.div_ceil(factor).max(2))
            .collect();
        let spacing = self
            .spacing
            .iter()
            .zip(self.dims.iter().zip(dims.iter()))
            .map(|(s, (&n, &m))| s * n as f64 / m as f64)
            .collect::<Vec<_>>();
        GridSpec {
            dims,
            spacing,
        }
    }

    /// Distance, in voxels, from a voxel to the nearest face of the grid.
    pub fn boundary_distance(&self, idx: usize) -> usize {
        let c = self.coords(idx);
        self.dims
            .iter()
            .enumerate()
            .map(|(a, &n)| c[a].min(n - 1 - c[a]))
            .min()
            .unwrap_or(0)
    }
}

pub(crate) fn check_same_grid(a: &GridSpec, b: &GridSpec, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Common behaviour of multi-channel fields on a [`GridSpec`].
pub trait Field: Clone + Send + Sync {
    fn grid(&self) -> &GridSpec;
    /// Values per voxel.
    fn channels(&self) -> usize;
    fn data(&self) -> &[f64];

    /// Same kind of field on another grid, without re-validation.
    #[doc(hidden)]
    fn rebuild(&self, grid: GridSpec, data: Vec<f64>) -> Self;

    /// Called on samples that mixed more than one grid node.
    #[doc(hidden)]
    fn fix_sample(&self, _sample: &mut [f64]) {}

    /// Called on every voxel after resampling from `from` to `to`.
    #[doc(hidden)]
    fn rescale_sample(&self, _from: &GridSpec, _to: &GridSpec, _sample: &mut [f64]) {}

    /// Channel values of voxel `idx`.
    fn voxel(&self, idx: usize) -> &[f64] {
        let c = self.channels();
        &self.data()[idx * c..(idx + 1) * c]
    }
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ImageField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "image has {} values for {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self::new(grid, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl Field for ImageField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn channels(&self) -> usize {
        1
    }
    fn data(&self) -> &[f64] {
        &self.values
    }
    fn rebuild(&self, grid: GridSpec, data: Vec<f64>) -> Self {
        Self { grid, values: data }
    }
}

/// Per-voxel d-vector field in voxel units (displacements or velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        let d = grid.ndim();
        if data.len() != d * grid.len() {
            return Err(Error::invalid(format!(
                "vector field has {} components for {} voxels of dimension {d}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector components must be finite"));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len() * grid.ndim();
        Self {
            grid,
            data: vec![0.0; n],
        }
    }

    /// The same vector at every voxel.
    pub fn uniform(grid: GridSpec, vector: &[f64]) -> Result<Self> {
        if vector.len() != grid.ndim() {
            return Err(Error::invalid("uniform vector length differs from grid dimension"));
        }
        let data = vector
            .iter()
            .copied()
            .cycle()
            .take(grid.len() * grid.ndim())
            .collect();
        Self::new(grid, data)
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len() * grid.ndim());
        for i in 0..grid.len() {
            let v = f(grid.coords(i));
            if v.len() != grid.ndim() {
                return Err(Error::invalid("vector length differs from grid dimension"));
            }
            data.extend_from_slice(&v);
        }
        Self::new(grid, data)
    }

    pub fn dim(&self) -> usize {
        self.grid.ndim()
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        self.voxel(idx)
    }

    pub fn components(&self) -> &[f64] {
        &self.data
    }

    pub fn components_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_components(self) -> Vec<f64> {
        self.data
    }

    /// Largest Euclidean vector norm over the grid.
    pub fn max_norm(&self) -> f64 {
        self.data
            .chunks_exact(self.dim())
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Component-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &VectorField, scale: f64) -> Result<VectorField> {
        check_same_grid(&self.grid, &other.grid, "add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            data,
        })
    }

    pub fn scaled(&self, scale: f64) -> VectorField {
        Self {
            grid: self.grid.clone(),
            data: self.data.iter().map(|a| a * scale).collect(),
        }
    }
}

impl Field for VectorField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn channels(&self) -> usize {
        self.grid.ndim()
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn rebuild(&self, grid: GridSpec, data: Vec<f64>) -> Self {
        Self { grid, data }
    }
    fn rescale_sample(&self, from: &GridSpec, to: &GridSpec, sample: &mut [f64]) {
        for (a, v) in sample.iter_mut().enumerate() {
            *v *= to.dims()[a] as f64 / from.dims()[a] as f64;
        }
    }
}

/// Per-voxel probability vector over `k` latent classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    grid: GridSpec,
    k: usize,
    probs: Vec<f64>,
}

impl CategoricalField {
    pub fn new(grid: GridSpec, k: usize, probs: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("class count must be >= 2, got {k}")));
        }
        if probs.len() != k * grid.len() {
            return Err(Error::invalid(format!(
                "categorical field has {} values for {} voxels x {k} classes",
                probs.len(),
                grid.len()
            )));
        }
        for (i, p) in probs.chunks_exact(k).enumerate() {
            if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::invalid(format!("voxel {i}: probability outside [0, 1]")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("voxel {i}: probabilities sum to {s}")));
            }
        }
        Ok(Self { grid, k, probs })
    }

    /// Uniform distribution `1/k` everywhere.
    pub fn uniform(grid: GridSpec, k: usize) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, k, vec![1.0 / k as f64; n * k])
    }

    /// One-hot field from integer labels.
    pub fn one_hot(labels: &LabelField, k: usize) -> Result<Self> {
        if labels.classes() as usize > k {
            return Err(Error::invalid("label classes exceed categorical class count"));
        }
        let mut probs = vec![0.0; labels.grid().len() * k];
        for (i, &l) in labels.labels().iter().enumerate() {
            probs[i * k + l as usize] = 1.0;
        }
        Self::new(labels.grid().clone(), k, probs)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Probability vector of one voxel.
    pub fn at(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.k..(idx + 1) * self.k]
    }

    /// Most probable class per voxel (lowest index on ties).
    pub fn argmax(&self) -> LabelField {
        let labels = self
            .probs
            .chunks_exact(self.k)
            .map(|p| {
                let mut best = 0;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        LabelField {
            grid: self.grid.clone(),
            classes: self.k as u32,
            labels,
        }
    }
}

pub(crate) fn normalize_simplex(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        for v in p.iter_mut() {
            *v /= s;
        }
    } else {
        let u = 1.0 / p.len() as f64;
        p.iter_mut().for_each(|v| *v = u);
    }
}

impl Field for CategoricalField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn channels(&self) -> usize {
        self.k
    }
    fn data(&self) -> &[f64] {
        &self.probs
    }
    fn rebuild(&self, grid: GridSpec, data: Vec<f64>) -> Self {
        Self {
            grid,
            k: self.k,
            probs: data,
        }
    }
    fn fix_sample(&self, sample: &mut [f64]) {
        normalize_simplex(sample);
    }
}

/// Integer label map with labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    grid: GridSpec,
    classes: u32,
    labels: Vec<u32>,
}

impl LabelField {
    pub fn new(grid: GridSpec, classes: u32, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::invalid("label count differs from voxel count"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} >= class count {classes}")));
        }
        Ok(Self {
            grid,
            classes,
            labels,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Voxels carrying any non-zero label.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Nearest-neighbour pull-back `labels(ω + t(ω))`.
    pub fn warp(&self, transform: &VectorField) -> Result<LabelField> {
        check_same_grid(&self.grid, transform.grid(), "label warp")?;
        let labels = (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let p = displaced_point(&self.grid, i, transform.vector(i));
                self.labels[nearest_index(&self.grid, &p)]
            })
            .collect();
        Ok(LabelField {
            grid: self.grid.clone(),
            classes: self.classes,
            labels,
        })
    }
}

/// Interpolation scheme used by [`warp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Linear,
    Nearest,
}

fn displaced_point(grid: &GridSpec, idx: usize, disp: &[f64]) -> [f64; 3] {
    let c = grid.coords(idx);
    let mut p = [0.0; 3];
    for a in 0..grid.ndim() {
        p[a] = c[a] as f64 + disp[a];
    }
    p
}

fn nearest_index(grid: &GridSpec, p: &[f64; 3]) -> usize {
    let s = grid.strides();
    let mut idx = 0;
    for (a, &n) in grid.dims().iter().enumerate() {
        let x = p[a].round().clamp(0.0, (n - 1) as f64) as usize;
        idx += x * s[a];
    }
    idx
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Multilinear sample of raw channel data; returns whether nodes were mixed.
fn sample_linear(grid: &GridSpec, data: &[f64], ch: usize, p: &[f64; 3], out: &mut [f64]) -> bool {
    let nd = grid.ndim();
    let s = grid.strides();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut mixed = false;
    for a in 0..nd {
        let n = grid.dims()[a];
        let x = p[a].clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 1);
        let f = x - i0 as f64;
        lo[a] = i0;
        frac[a] = f;
        hi[a] = if f > 0.0 { i0 + 1 } else { i0 };
        mixed |= f > 0.0;
    }
    if !mixed {
        let idx: usize = (0..nd).map(|a| lo[a] * s[a]).sum();
        out.copy_from_slice(&data[idx * ch..(idx + 1) * ch]);
        return false;
    }
    let corners = 1usize << nd;
    let mut offs = [0usize; 8];
    for (c, off) in offs.iter_mut().enumerate().take(corners) {
        *off = (0..nd)
            .map(|a| if c >> a & 1 == 1 { hi[a] } else { lo[a] } * s[a])
            .sum::<usize>()
            * ch;
    }
    let mut buf = [0.0f64; 8];
    for (k, o) in out.iter_mut().enumerate() {
        for c in 0..corners {
            buf[c] = data[offs[c] + k];
        }
        let mut width = corners;
        for &t in frac.iter().take(nd) {
            width /= 2;
            for c in 0..width {
                buf[c] = lerp(buf[2 * c], buf[2 * c + 1], t);
            }
        }
        *o = buf[0];
    }
    true
}

/// Linear sample into `out` without allocation; `p` holds `ndim` coordinates.
pub(crate) fn sample_into<F: Field>(field: &F, p: &[f64; 3], out: &mut [f64]) {
    if sample_linear(field.grid(), field.data(), field.channels(), p, out) {
        field.fix_sample(out);
    }
}

/// Convert an arbitrary point to a fixed-size coordinate array.
fn to_point(grid: &GridSpec, point: &[f64]) -> Result<[f64; 3]> {
    if point.len() != grid.ndim() {
        return Err(Error::invalid(format!(
            "point has {} coordinates for a {}-D grid",
            point.len(),
            grid.ndim()
        )));
    }
    if point.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("interpolation point must be finite"));
    }
    let mut p = [0.0; 3];
    p[..point.len()].copy_from_slice(point);
    Ok(p)
}

/// Multilinear sample at a point in voxel coordinates, clamped to the grid.
/// Categorical samples are renormalised onto the simplex.
pub fn interpolate<F: Field>(field: &F, point: &[f64]) -> Result<Vec<f64>> {
    let p = to_point(field.grid(), point)?;
    let mut out = vec![0.0; field.channels()];
    if sample_linear(field.grid(), field.data(), field.channels(), &p, &mut out) {
        field.fix_sample(&mut out);
    }
    Ok(out)
}

/// Pull-back warp `out(ω) = field(ω + transform(ω))`.
pub fn warp<F: Field>(field: &F, transform: &VectorField, mode: InterpMode) -> Result<F> {
    let grid = field.grid();
    check_same_grid(grid, transform.grid(), "warp")?;
    let ch = field.channels();
    let mut out = vec![0.0; grid.len() * ch];
    out.par_chunks_mut(ch).enumerate().for_each(|(i, o)| {
        let p = displaced_point(grid, i, transform.vector(i));
        match mode {
            InterpMode::Linear => {
                if sample_linear(grid, field.data(), ch, &p, o) {
                    field.fix_sample(o);
                }
            }
            InterpMode::Nearest => {
                let j = nearest_index(grid, &p);
                o.copy_from_slice(field.voxel(j));
            }
        }
    });
    Ok(field.rebuild(grid.clone(), out))
}

/// Multilinear resampling onto another grid of the same dimensionality.
///
/// Grids are cell-centred: target voxel `i` samples source coordinate
/// `(i + 0.5) * n_src / n_tgt - 0.5` on each axis. Vector components are
/// multiplied by `n_tgt / n_src` so displacements keep their physical size.
pub fn resample<F: Field>(field: &F, target: &GridSpec) -> Result<F> {
    let src = field.grid();
    if src.ndim() != target.ndim() {
        return Err(Error::invalid(format!(
            "cannot resample a {}-D field onto a {}-D grid",
            src.ndim(),
            target.ndim()
        )));
    }
    let ch = field.channels();
    let nd = src.ndim();
    let ratio: Vec<f64> = (0..nd)
        .map(|a| src.dims()[a] as f64 / target.dims()[a] as f64)
        .collect();
    let mut out = vec![0.0; target.len() * ch];
    out.par_chunks_mut(ch).enumerate().for_each(|(i, o)| {
        let c = target.coords(i);
        let mut p = [0.0; 3];
        for a in 0..nd {
            p[a] = (c[a] as f64 + 0.5) * ratio[a] - 0.5;
        }
        if sample_linear(src, field.data(), ch, &p, o) {
            field.fix_sample(o);
        }
        field.rescale_sample(src, target, o);
    });
    Ok(field.rebuild(target.clone(), out))
}

/// Block-average downsampling by an integer factor (partial edge blocks
/// average the voxels they contain). Vector components are divided by the
/// factor; categorical voxels are renormalised.
pub fn downsample<F: Field>(field: &F, factor: usize) -> F {
    if factor <= 1 {
        return field.clone();
    }
    let src = field.grid();
    let target = src.coarsened(factor);
    let ch = field.channels();
    let nd = src.ndim();
    let mut out = vec![0.0; target.len() * ch];
    out.par_chunks_mut(ch).enumerate().for_each(|(i, o)| {
        let c = target.coords(i);
        let mut lo = [0usize; 3];
        let mut hi = [1usize; 3];
        for a in 0..nd {
            let n = src.dims()[a];
            lo[a] = (c[a] * factor).min(n - 1);
            hi[a] = ((c[a] + 1) * factor).min(n).max(lo[a] + 1);
        }
        let mut count = 0usize;
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let j = src.index(&[x, y, z][..nd]);
                    for (k, v) in o.iter_mut().enumerate() {
                        *v += field.data()[j * ch + k];
                    }
                    count += 1;
                }
            }
        }
        for v in o.iter_mut() {
            *v /= count as f64;
        }
        field.fix_sample(o);
        field.rescale_sample(src, &target, o);
    });
    field.rebuild(target, out)
}

/// Spatial derivatives of every channel of a field.
#[derive(Debug, Clone)]
pub struct FieldGradient {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl FieldGradient {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Gradient (length d) of channel `ch` at voxel `idx`.
    pub fn at(&self, idx: usize, ch: usize) -> &[f64] {
        let d = self.grid.ndim();
        let o = (idx * self.channels + ch) * d;
        &self.data[o..o + d]
    }

    /// All channel gradients of one voxel, channel-major (`channels * d`).
    pub fn voxel(&self, idx: usize) -> &[f64] {
        let w = self.channels * self.grid.ndim();
        &self.data[idx * w..(idx + 1) * w]
    }

    /// Single-channel gradient as a vector field.
    pub fn into_vector_field(self) -> Result<VectorField> {
        if self.channels != 1 {
            return Err(Error::invalid("only single-channel gradients form a vector field"));
        }
        VectorField::new(self.grid, self.data)
    }
}

/// Central differences in the interior, one-sided differences at the
/// boundary, in per-voxel units.
pub fn gradient<F: Field>(field: &F) -> FieldGradient {
    let grid = field.grid();
    let ch = field.channels();
    let nd = grid.ndim();
    let s = grid.strides();
    let data = field.data();
    let mut out = vec![0.0; grid.len() * ch * nd];
    out.par_chunks_mut(ch * nd).enumerate().for_each(|(i, o)| {
        let c = grid.coords(i);
        for a in 0..nd {
            let n = grid.dims()[a];
            let (lo, hi, h) = if c[a] == 0 {
                (i, i + s[a], 1.0)
            } else if c[a] == n - 1 {
                (i - s[a], i, 1.0)
            } else {
                (i - s[a], i + s[a], 2.0)
            };
            for k in 0..ch {
                o[k * nd + a] = (data[hi * ch + k] - data[lo * ch + k]) / h;
            }
        }
    });
    FieldGradient {
        grid: grid.clone(),
        channels: ch,
        data: out,
    }
}

pub(crate) fn det(m: &[[f64; 3]; 3], d: usize) -> f64 {
    if d == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// `det(I + ∇u)` per voxel of a displacement field.
pub fn jacobian_determinant(transform: &VectorField) -> ImageField {
    let g = gradient(transform);
    let d = transform.dim();
    let values = (0..transform.grid().len())
        .map(|i| {
            let mut m = [[0.0; 3]; 3];
            for (r, row) in m.iter_mut().enumerate().take(d) {
                let gr = g.at(i, r);
                for (c, v) in row.iter_mut().enumerate().take(d) {
                    *v = gr[c] + if r == c { 1.0 } else { 0.0 };
                }
            }
            det(&m, d)
        })
        .collect();
    ImageField {
        grid: transform.grid().clone(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g2(nx: usize, ny: usize) -> GridSpec {
        GridSpec::new(&[nx, ny]).unwrap()
    }

    #[test]
    fn grid_rejects_bad_dims() {
        assert!(GridSpec::new(&[1, 4]).is_err());
        assert!(GridSpec::new(&[4]).is_err());
        assert!(GridSpec::with_spacing(&[4, 4], &[1.0, 0.0]).is_err());
        assert!(GridSpec::with_spacing(&[4, 4], &[1.0]).is_err());
    }

    #[test]
    fn interpolation_on_nodes_and_midpoints() {
        let g = g2(4, 3);
        let img = ImageField::from_fn(g, |c| (c[0] + 10 * c[1]) as f64).unwrap();
        assert_eq!(interpolate(&img, &[2.0, 1.0]).unwrap(), vec![12.0]);
        let ramp = ImageField::from_fn(g2(2, 2), |c| c[0] as f64).unwrap();
        assert_eq!(interpolate(&ramp, &[0.5, 0.0]).unwrap(), vec![0.5]);
        // clamped 3 voxels outside
        assert_eq!(interpolate(&img, &[-3.0, 1.0]).unwrap(), vec![10.0]);
        assert_eq!(interpolate(&img, &[6.0, 5.0]).unwrap(), vec![23.0]);
        assert!(interpolate(&img, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn zero_warp_is_bit_exact_for_all_kinds() {
        let g = g2(5, 4);
        let img = ImageField::from_fn(g.clone(), |c| -0.0 + (c[0] as f64).sin() * 1e-3).unwrap();
        let zero = VectorField::zeros(g.clone());
        let w = warp(&img, &zero, InterpMode::Linear).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(w.values()), bits(img.values()));
        let vf = VectorField::from_fn(g.clone(), |c| vec![c[0] as f64 * 0.1, -(c[1] as f64) / 3.0])
            .unwrap();
        assert_eq!(warp(&vf, &zero, InterpMode::Linear).unwrap(), vf);
        let probs: Vec<f64> = (0..g.len())
            .flat_map(|i| {
                let a = (i as f64 * 0.37).fract() * 0.9 + 0.05;
                [a, 1.0 - a]
            })
            .collect();
        let cat = CategoricalField::new(g, 2, probs).unwrap();
        assert_eq!(warp(&cat, &zero, InterpMode::Linear).unwrap(), cat);
        assert_eq!(warp(&cat, &zero, InterpMode::Nearest).unwrap(), cat);
    }

    #[test]
    fn constants_survive_any_warp() {
        let g = g2(6, 6);
        let img = ImageField::constant(g.clone(), 0.7);
        let t = VectorField::from_fn(g.clone(), |c| vec![(c[1] as f64).cos() * 2.3, -1.7]).unwrap();
        let w = warp(&img, &t, InterpMode::Linear).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn ramp_shift_moves_one_column() {
        let g = g2(8, 8);
        let img = ImageField::from_fn(g.clone(), |c| (c[0] * 8 + c[1]) as f64).unwrap();
        let t = VectorField::uniform(g.clone(), &[1.0, 0.0]).unwrap();
        let w = warp(&img, &t, InterpMode::Linear).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                assert_eq!(w.values()[g.index(&[x, y])], img.values()[g.index(&[x + 1, y])]);
            }
        }
    }

    #[test]
    fn gradient_of_linear_and_bilinear_fields() {
        let g = g2(5, 5);
        let c = ImageField::constant(g.clone(), 3.0);
        assert!(gradient(&c).data.iter().all(|&v| v == 0.0));
        let ramp = ImageField::from_fn(g.clone(), |c| 2.0 * c[0] as f64).unwrap();
        let gr = gradient(&ramp);
        for i in 0..g.len() {
            assert_eq!(gr.at(i, 0), &[2.0, 0.0]);
        }
        let xy = ImageField::from_fn(g.clone(), |c| (c[0] * c[1]) as f64).unwrap();
        let gr = gradient(&xy);
        for x in 1..4 {
            for y in 1..4 {
                assert_eq!(gr.at(g.index(&[x, y]), 0), &[y as f64, x as f64]);
            }
        }
    }

    #[test]
    fn jacobian_determinants() {
        let g = g2(6, 6);
        let z = jacobian_determinant(&VectorField::zeros(g.clone()));
        assert!(z.values().iter().all(|&v| v == 1.0));
        let scale =
            VectorField::from_fn(g.clone(), |c| vec![0.1 * c[0] as f64, 0.1 * c[1] as f64]).unwrap();
        let j = jacobian_determinant(&scale);
        for x in 1..5 {
            for y in 1..5 {
                assert!((j.values()[g.index(&[x, y])] - 1.21).abs() < 1e-12);
            }
        }
        let fold = VectorField::from_fn(g.clone(), |c| vec![-2.0 * c[0] as f64, 0.0]).unwrap();
        let j = jacobian_determinant(&fold);
        assert!(j.values().iter().any(|&v| v < 0.0));
        assert!((j.values()[g.index(&[2, 2])] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn resample_rules() {
        let g = g2(4, 4);
        let img = ImageField::from_fn(g.clone(), |c| (c[0] * 3 + c[1]) as f64 * 0.25).unwrap();
        assert_eq!(resample(&img, &g).unwrap(), img);
        let c = ImageField::constant(g.clone(), 1.5);
        let up = resample(&c, &g2(8, 8)).unwrap();
        assert!(up.values().iter().all(|&v| v == 1.5));
        let shift = VectorField::uniform(g.clone(), &[1.0, 0.0]).unwrap();
        let up = resample(&shift, &g2(8, 8)).unwrap();
        for i in 0..64 {
            assert_eq!(up.vector(i), &[2.0, 0.0]);
        }
        let g3 = GridSpec::new(&[4, 4, 4]).unwrap();
        assert!(resample(&img, &g3).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let g = g2(4, 4);
        let img = ImageField::from_fn(g, |c| c[0] as f64).unwrap();
        let d = downsample(&img, 2);
        assert_eq!(d.grid().dims(), &[2, 2]);
        assert_eq!(d.values(), &[0.5, 2.5, 0.5, 2.5]);
        let v = VectorField::uniform(g2(8, 8), &[2.0, -4.0]).unwrap();
        let d = downsample(&v, 2);
        assert_eq!(d.vector(0), &[1.0, -2.0]);
    }

    #[test]
    fn categorical_validation() {
        let g = g2(2, 2);
        assert!(CategoricalField::new(g.clone(), 1, vec![1.0; 4]).is_err());
        assert!(CategoricalField::new(g.clone(), 2, vec![0.6; 8]).is_err());
        assert!(CategoricalField::uniform(g, 4).is_ok());
    }

    #[test]
    fn three_dimensional_interpolation() {
        let g = GridSpec::new(&[3, 3, 3]).unwrap();
        let img = ImageField::from_fn(g, |c| (c[0] + 2 * c[1] + 4 * c[2]) as f64).unwrap();
        let v = interpolate(&img, &[0.5, 1.5, 0.25]).unwrap();
        assert!((v[0] - (0.5 + 3.0 + 1.0)).abs() < 1e-12);
    }
}
