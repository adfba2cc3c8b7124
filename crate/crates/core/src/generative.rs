//! Decoder side of the model: intensity codebooks, Laplace likelihood,
//! velocity prior KL and ELBO bookkeeping.
//!
//! The decoder is a per-class intensity lookup `f_j(z)(ω) = Σ_k z_{ω,k} c_{j,k}`,
//! which is voxel-local and therefore commutes with any warp that does not
//! interpolate. Additive constants of the Laplace likelihood and the
//! Gaussian KL are dropped throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_same_grid, warp, CategoricalField, Field, GridSpec, ImageField, InterpMode, VectorField};

/// Per-class intensity levels of one image's decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCodebook {
    pub levels: Vec<f64>,
}

impl IntensityCodebook {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook levels must be finite and non-empty"));
        }
        Ok(Self { levels })
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }
}

/// Expected intensity `Σ_k z_k c_k` per voxel.
pub fn decode(z: &CategoricalField, codebook: &IntensityCodebook) -> Result<ImageField> {
    if z.k() != codebook.k() {
        return Err(Error::invalid(format!(
            "codebook has {} levels for {} classes",
            codebook.k(),
            z.k()
        )));
    }
    let values = z
        .probs()
        .chunks_exact(z.k())
        .map(|p| p.iter().zip(&codebook.levels).map(|(a, c)| a * c).sum())
        .collect();
    ImageField::new(z.grid().clone(), values)
}

/// Loss used when refitting a codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Weighted median, the maximiser of the Laplace likelihood.
    #[default]
    L1,
    /// Weighted mean.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFit {
    pub codebook: IntensityCodebook,
    /// Classes with zero total weight; they keep their previous level.
    pub empty_classes: Vec<usize>,
}

/// Smallest value whose cumulative weight reaches half the total; `order`
/// sorts `values` ascending.
fn weighted_median(values: &[f64], order: &[usize], weight: impl Fn(usize) -> f64, total: f64) -> f64 {
    let half = 0.5 * total;
    let mut acc = 0.0;
    for &i in order {
        acc += weight(i);
        if acc >= half {
            return values[i];
        }
    }
    values[*order.last().expect("non-empty")]
}

/// Closed-form decoder refit from common-space posteriors `z` and the image
/// warped into the common space.
pub fn fit_codebook(
    z: &CategoricalField,
    warped_image: &ImageField,
    mode: FitMode,
    previous: Option<&IntensityCodebook>,
) -> Result<CodebookFit> {
    check_same_grid(z.grid(), warped_image.grid(), "fit_codebook")?;
    let k = z.k();
    if let Some(p) = previous {
        if p.k() != k {
            return Err(Error::invalid("previous codebook has the wrong class count"));
        }
    }
    let x = warped_image.values();
    let order = match mode {
        FitMode::L1 => {
            let mut o: Vec<usize> = (0..x.len()).collect();
            o.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
            o
        }
        FitMode::L2 => Vec::new(),
    };
    let probs = z.probs();
    let mut levels = Vec::with_capacity(k);
    let mut empty_classes = Vec::new();
    for c in 0..k {
        let total: f64 = probs.iter().skip(c).step_by(k).sum();
        if !(total > 0.0) {
            empty_classes.push(c);
            levels.push(previous.map_or(0.0, |p| p.levels[c]));
            continue;
        }
        levels.push(match mode {
            FitMode::L2 => x.iter().enumerate().map(|(i, v)| probs[i * k + c] * v).sum::<f64>() / total,
            FitMode::L1 => weighted_median(x, &order, |i| probs[i * k + c], total),
        });
    }
    Ok(CodebookFit {
        codebook: IntensityCodebook { levels },
        empty_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodConfig {
    /// Laplace scale `b`.
    pub b: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self { b: 1.0 }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::invalid("Laplace scale b must be > 0"));
        }
        Ok(())
    }
}

/// `-Σ_ω |u - rec| / b`.
pub fn laplace_loglik(u: &ImageField, reconstruction: &ImageField, cfg: &LikelihoodConfig) -> Result<f64> {
    check_same_grid(u.grid(), reconstruction.grid(), "laplace_loglik")?;
    cfg.validate()?;
    Ok(-u
        .values()
        .iter()
        .zip(reconstruction.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / cfg.b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityPriorConfig {
    /// Laplacian precision scale `λ`.
    pub lambda: f64,
}

impl Default for VelocityPriorConfig {
    fn default() -> Self {
        Self { lambda: 10.0 }
    }
}

impl VelocityPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be > 0"));
        }
        Ok(())
    }
}

/// Terms of the velocity KL; `total = ½ (trace + quadratic)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityKl {
    /// `Σ_r Σ_c (λ deg(r) Σ_r - ln Σ_r)`.
    pub trace: f64,
    /// `(λ/2) Σ_r Σ_{q ∈ N(r)} ‖μ_r - μ_q‖²`, i.e. `λ μᵀ L μ`.
    pub quadratic: f64,
    pub total: f64,
}

/// Number of face neighbours of each voxel.
fn degree(grid: &GridSpec, idx: usize) -> usize {
    let c = grid.coords(idx);
    grid.dims()
        .iter()
        .enumerate()
        .map(|(a, &n)| usize::from(c[a] > 0) + usize::from(c[a] + 1 < n))
        .sum()
}

/// KL between the Gaussian velocity posterior `N(μ, diag Σ)` and the
/// Laplacian prior `N(0, (λL)⁻¹)` on the face-connected voxel graph, with
/// the variance `Σ` shared by all components of a voxel.
pub fn velocity_prior_kl(mu: &VectorField, sigma_diag: &ImageField, cfg: &VelocityPriorConfig) -> Result<VelocityKl> {
    check_same_grid(mu.grid(), sigma_diag.grid(), "velocity_prior_kl")?;
    cfg.validate()?;
    if sigma_diag.values().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("velocity variances must be > 0"));
    }
    let grid = mu.grid();
    let d = mu.dim();
    let s = grid.strides();
    let lambda = cfg.lambda;
    let mut trace = 0.0;
    let mut edges = 0.0;
    for i in 0..grid.len() {
        let sig = sigma_diag.values()[i];
        trace += d as f64 * (lambda * degree(grid, i) as f64 * sig - sig.ln());
        let c = grid.coords(i);
        let v = mu.vector(i);
        for (a, &n) in grid.dims().iter().enumerate() {
            if c[a] + 1 < n {
                let w = mu.vector(i + s[a]);
                edges += v.iter().zip(w).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
    }
    // every undirected edge appears twice in the neighbourhood double sum
    let quadratic = lambda / 2.0 * 2.0 * edges;
    Ok(VelocityKl {
        trace,
        quadratic,
        total: 0.5 * (trace + quadratic),
    })
}

/// Tempering weights of the three ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub structural: f64,
    pub regularization: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 120.0,
            structural: 160.0,
            regularization: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.reconstruction, self.structural, self.regularization];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Raw (unweighted) ELBO ingredients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ElboTerms {
    /// Laplace log-likelihood per image.
    pub loglik: Vec<f64>,
    /// Intrinsic distance per pyramid level.
    pub intrinsic: Vec<f64>,
    /// Velocity KL per image and level.
    pub velocity_kl: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    /// `w_rec Σ_j loglik_j`.
    pub reconstruction: f64,
    /// `-w_str Σ_l D̃^l`.
    pub structural: f64,
    /// `-w_reg Σ_{j,l} KL_v`.
    pub regularization: f64,
    /// `-w_str D̃^l` per level.
    pub structural_per_level: Vec<f64>,
}

/// `w_rec Σ loglik - w_str Σ_l D̃^l - w_reg Σ KL_v`, with levels weighted
/// equally.
pub fn assemble_elbo(terms: &ElboTerms, weights: &LossWeights) -> ElboBreakdown {
    let reconstruction = weights.reconstruction * terms.loglik.iter().sum::<f64>();
    let structural_per_level: Vec<f64> = terms.intrinsic.iter().map(|d| -weights.structural * d).collect();
    let structural = structural_per_level.iter().sum::<f64>();
    let regularization = -weights.regularization * terms.velocity_kl.iter().flatten().sum::<f64>();
    ElboBreakdown {
        total: reconstruction + structural + regularization,
        reconstruction,
        structural,
        regularization,
        structural_per_level,
    }
}

/// Factual and counterfactual decodings and their difference
/// (`counterfactual - factual`).
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    pub factual: ImageField,
    pub counterfactual: ImageField,
    pub difference: ImageField,
}

fn difference(factual: ImageField, counterfactual: ImageField) -> Counterfactual {
    let values = counterfactual
        .values()
        .iter()
        .zip(factual.values())
        .map(|(a, b)| a - b)
        .collect();
    let difference = ImageField::new(factual.grid().clone(), values).expect("same grid");
    Counterfactual {
        factual,
        counterfactual,
        difference,
    }
}

/// Intervention `do(z_k = 0)`: the remaining mass is renormalised per voxel;
/// voxels whose whole mass sat on `k` become uniform over the other classes.
pub fn counterfactual_zero_class(z: &CategoricalField, codebook: &IntensityCodebook, class: usize) -> Result<Counterfactual> {
    let k = z.k();
    if class >= k {
        return Err(Error::invalid(format!("class {class} out of range for K = {k}")));
    }
    if k < 2 {
        return Err(Error::invalid("zeroing a class needs K >= 2"));
    }
    let mut probs = z.probs().to_vec();
    for p in probs.chunks_exact_mut(k) {
        p[class] = 0.0;
        let s: f64 = p.iter().sum();
        if s > 0.0 {
            p.iter_mut().for_each(|v| *v /= s);
        } else {
            p.iter_mut().for_each(|v| *v = 1.0 / (k - 1) as f64);
            p[class] = 0.0;
        }
    }
    let zc = CategoricalField::new(z.grid().clone(), k, probs)?;
    Ok(difference(decode(z, codebook)?, decode(&zc, codebook)?))
}

/// Transform intervention: `factual = f(z) ∘ φ`, `counterfactual = f(z ∘ φ)`.
pub fn counterfactual_transform(
    z: &CategoricalField,
    codebook: &IntensityCodebook,
    transform: &VectorField,
    mode: InterpMode,
) -> Result<Counterfactual> {
    let factual = warp(&decode(z, codebook)?, transform, mode)?;
    let counterfactual = decode(&warp(z, transform, mode)?, codebook)?;
    Ok(difference(factual, counterfactual))
}
