//! Coarse-to-fine groupwise registration.
//!
//! Each image gets a single-view posterior from its modality's intensity
//! mixture once, up front. The loop then refines per-level velocities from
//! the coarsest level to the finest. One iteration at level `l`:
//!
//! 1. warp every finest posterior by its current `φ_j` and pool it to level `l`;
//! 2. fuse the pooled maps by their geometric mean;
//! 3. compute each image's Demons force against the fused map and smooth it;
//! 4. search a shared step size `α ≤ α₀^l` by halving until the objective
//!    decreases, add `α·u_j` to `v_j^l`, then subtract the group mean;
//! 5. refresh `φ_j = exp(v_j⁺)` and `φ_j⁻¹ = exp(-v_j⁺)`;
//! 6. refit the intensity codebooks, keeping the refit only if the objective
//!    does not increase.
//!
//! The objective is the negative tempered ELBO. The reconstruction is the
//! decoded fused finest posterior pulled back by `φ_j⁻¹`. The structural term
//! sums the intrinsic distance over all levels. The velocity term is the mean
//! part `½ λ μᵀLμ` of the prior KL. The variance-dependent trace part enters
//! only the reported [`GroupState::elbo`], with variances from the
//! gradient-confidence heuristic. A level stops early when the relative
//! objective change drops below the tolerance, or when no step size improves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demons::{alpha0_for_level, demons_force, estimate_velocity_variance, fluid_smooth, DemonsConfig, DEFAULT_RIDGE};
use crate::diffeo::{aggregate_levels, center_velocities, pyramid_grids, Steps, TransformSet, VelocitySet};
use crate::error::{Error, Result};
use crate::generative::{
    assemble_elbo, decode, fit_codebook, laplace_loglik, velocity_prior_kl, CodebookFit, ElboBreakdown, ElboTerms, FitMode,
    IntensityCodebook, LikelihoodConfig, LossWeights, VelocityPriorConfig,
};
use crate::grid::{check_same_grid, downsample, warp, CategoricalField, Field, GridSpec, ImageField, InterpMode, VectorField};
use crate::sampling::{sample_labels, GumbelRaoConfig};
use crate::structrep::{
    extract_posterior, fit_view_extractor, geometric_mean, intrinsic_distance, ExtractorOptions, TaggedImage,
    ViewExtractorParams, DEFAULT_EPSILON,
};

/// Step-size and smoothing settings shared by every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemonsSettings {
    /// Default `α / α₀^l`, used as the first line-search trial.
    pub alpha_fraction: f64,
    pub fluid_sigma: f64,
    pub ridge: f64,
    /// Search `α` per iteration; otherwise every step uses the default `α`.
    pub line_search: bool,
}

impl Default for DemonsSettings {
    fn default() -> Self {
        Self {
            alpha_fraction: 0.4,
            fluid_sigma: 3.0,
            ridge: DEFAULT_RIDGE,
            line_search: true,
        }
    }
}

impl DemonsSettings {
    pub fn for_level(&self, level: usize, levels: usize) -> DemonsConfig {
        let alpha0 = alpha0_for_level(level, levels);
        DemonsConfig {
            alpha: self.alpha_fraction * alpha0,
            alpha0,
            fluid_sigma: self.fluid_sigma,
            ridge: self.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Pyramid levels `L`.
    pub levels: usize,
    /// Structural classes `K`.
    pub k: usize,
    pub iters_per_level: usize,
    /// Relative objective change that ends a level.
    pub convergence_tol: f64,
    pub demons: DemonsSettings,
    pub prior: VelocityPriorConfig,
    pub likelihood: LikelihoodConfig,
    pub weights: LossWeights,
    pub codebook_mode: FitMode,
    /// Probability floor of the single-view posteriors.
    pub epsilon: f64,
    pub extractor_iters: usize,
    pub extractor_restarts: usize,
    /// Fixed squaring count; automatic when absent.
    pub squaring_steps: Option<u32>,
    /// `σ_base` of the velocity variance heuristic.
    pub velocity_sigma_base: f64,
    /// Reject groups with fewer than two distinct modalities.
    pub require_multimodal: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            k: 8,
            iters_per_level: 50,
            convergence_tol: 1e-4,
            demons: DemonsSettings::default(),
            prior: VelocityPriorConfig::default(),
            likelihood: LikelihoodConfig::default(),
            weights: LossWeights::default(),
            codebook_mode: FitMode::L1,
            epsilon: DEFAULT_EPSILON,
            extractor_iters: 200,
            extractor_restarts: 4,
            squaring_steps: None,
            velocity_sigma_base: 1.0,
            require_multimodal: false,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("levels must be >= 1"));
        }
        if self.k < 2 {
            return Err(Error::invalid("k must be >= 2"));
        }
        if self.iters_per_level == 0 {
            return Err(Error::invalid("iters_per_level must be >= 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::invalid("convergence_tol must be > 0"));
        }
        for l in 0..self.levels {
            self.demons.for_level(l, self.levels).validate()?;
        }
        self.prior.validate()?;
        self.likelihood.validate()?;
        self.weights.validate()?;
        if !(self.velocity_sigma_base > 0.0) {
            return Err(Error::invalid("velocity_sigma_base must be > 0"));
        }
        Ok(())
    }

    pub fn steps(&self) -> Steps {
        self.squaring_steps.map_or(Steps::Auto, Steps::Fixed)
    }

    pub fn extractor_options(&self) -> ExtractorOptions {
        ExtractorOptions {
            k: self.k,
            iters: self.extractor_iters,
            restarts: self.extractor_restarts,
            seed: self.seed,
            epsilon: self.epsilon,
            ..ExtractorOptions::default()
        }
    }
}

/// One row of the objective trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub level: usize,
    pub iteration: usize,
    /// Negative tempered ELBO (mean-only velocity term).
    pub objective: f64,
    /// Weighted terms: `w_rec Σ loglik`, `-w_str Σ D̃`, `-w_reg Σ ½λμᵀLμ`.
    pub reconstruction: f64,
    pub structural: f64,
    pub regularization: f64,
    /// Accepted step size (0 for the initial record and rejected steps).
    pub alpha: f64,
}

/// Everything the registration loop owns.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub config: EngineConfig,
    pub images: Vec<TaggedImage>,
    pub extractor: ViewExtractorParams,
    /// Single-view posteriors on the finest grid, in image space.
    pub posteriors: Vec<CategoricalField>,
    /// `level_posteriors[l][j]`: posterior `j` warped by `φ_j` and pooled to level `l`.
    pub level_posteriors: Vec<Vec<CategoricalField>>,
    pub velocities: VelocitySet,
    /// `v_j⁺` on the finest grid.
    pub totals: Vec<VectorField>,
    pub transforms: TransformSet,
    pub codebooks: Vec<IntensityCodebook>,
    pub trace: Vec<TraceRecord>,
}

impl GroupState {
    pub fn grid(&self) -> &GridSpec {
        self.velocities.finest()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// Fused geometric-mean posterior on the finest grid, in common space.
    pub fn fused(&self) -> Result<CategoricalField> {
        let finest = self.level_posteriors.last().expect("at least one level");
        geometric_mean(&finest.iter().collect::<Vec<_>>())
    }

    /// Reported ELBO, including the trace part of the velocity KL.
    pub fn elbo(&self) -> Result<ElboBreakdown> {
        let ctx = Context::from_state(self);
        let eval = ctx.evaluate(&self.velocities, &self.codebooks)?;
        let terms = ctx.full_terms(&self.velocities, &eval)?;
        Ok(assemble_elbo(&terms, &self.config.weights))
    }

    /// ELBO whose reconstruction term averages `samples` hard anatomies
    /// drawn from the fused posterior by Gumbel-Max.
    pub fn stochastic_elbo(&self, sampling: &GumbelRaoConfig) -> Result<ElboBreakdown> {
        sampling.validate()?;
        let ctx = Context::from_state(self);
        let eval = ctx.evaluate(&self.velocities, &self.codebooks)?;
        let mut terms = ctx.full_terms(&self.velocities, &eval)?;
        let fused = eval.fused_finest()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut acc = vec![0.0; self.images.len()];
        for _ in 0..sampling.samples {
            let z = CategoricalField::one_hot(&sample_labels(&fused, &mut rng), fused.k())?;
            for (j, a) in acc.iter_mut().enumerate() {
                *a += ctx.loglik(j, &z, &eval.transforms.inverse[j], &self.codebooks[j])?;
            }
        }
        terms.loglik = acc.iter().map(|a| a / sampling.samples as f64).collect();
        Ok(assemble_elbo(&terms, &self.config.weights))
    }
}

/// Inputs that stay fixed during optimisation.
struct Context<'a> {
    cfg: &'a EngineConfig,
    images: &'a [TaggedImage],
    posteriors: &'a [CategoricalField],
    levels: Vec<GridSpec>,
}

/// Derived quantities of one velocity set.
struct Evaluation {
    totals: Vec<VectorField>,
    transforms: TransformSet,
    /// `[l][j]`.
    pooled: Vec<Vec<CategoricalField>>,
    fused: Vec<CategoricalField>,
    intrinsic: Vec<f64>,
    loglik: Vec<f64>,
    objective: f64,
    breakdown: ElboBreakdown,
}

impl Evaluation {
    fn fused_finest(&self) -> Result<CategoricalField> {
        Ok(self.fused.last().expect("levels").clone())
    }
}

impl<'a> Context<'a> {
    fn from_state(state: &'a GroupState) -> Self {
        Self {
            cfg: &state.config,
            images: &state.images,
            posteriors: &state.posteriors,
            levels: state.velocities.levels().to_vec(),
        }
    }

    fn factor(&self, level: usize) -> usize {
        1 << (self.levels.len() - 1 - level)
    }

    fn loglik(&self, j: usize, z: &CategoricalField, inverse: &VectorField, cb: &IntensityCodebook) -> Result<f64> {
        let rec = warp(&decode(z, cb)?, inverse, InterpMode::Linear)?;
        laplace_loglik(&self.images[j].image, &rec, &self.cfg.likelihood)
    }

    fn evaluate(&self, velocities: &VelocitySet, codebooks: &[IntensityCodebook]) -> Result<Evaluation> {
        let totals = aggregate_levels(velocities);
        let transforms = TransformSet::from_totals(&totals, self.cfg.steps());
        let warped: Vec<CategoricalField> = self
            .posteriors
            .par_iter()
            .zip(&transforms.forward)
            .map(|(p, phi)| warp(p, phi, InterpMode::Linear))
            .collect::<Result<_>>()?;
        let mut pooled = Vec::with_capacity(self.levels.len());
        let mut fused = Vec::with_capacity(self.levels.len());
        let mut intrinsic = Vec::with_capacity(self.levels.len());
        for l in 0..self.levels.len() {
            let f = self.factor(l);
            let maps: Vec<CategoricalField> = warped.par_iter().map(|w| downsample(w, f)).collect();
            let refs: Vec<&CategoricalField> = maps.iter().collect();
            let q = geometric_mean(&refs)?;
            intrinsic.push(intrinsic_distance(&q, &refs)?.total);
            pooled.push(maps);
            fused.push(q);
        }
        let q_finest = fused.last().expect("levels");
        let loglik = (0..self.images.len())
            .into_par_iter()
            .map(|j| self.loglik(j, q_finest, &transforms.inverse[j], &codebooks[j]))
            .collect::<Result<Vec<_>>>()?;
        let mean_kl: Vec<Vec<f64>> = velocities
            .fields()
            .iter()
            .map(|per_level| per_level.iter().map(|v| self.mean_kl(v)).collect())
            .collect();
        let terms = ElboTerms {
            loglik: loglik.clone(),
            intrinsic: intrinsic.clone(),
            velocity_kl: mean_kl,
        };
        let breakdown = assemble_elbo(&terms, &self.cfg.weights);
        Ok(Evaluation {
            totals,
            transforms,
            pooled,
            fused,
            intrinsic,
            loglik,
            objective: -breakdown.total,
            breakdown,
        })
    }

    /// `½ λ μᵀ L μ`.
    fn mean_kl(&self, v: &VectorField) -> f64 {
        let unit = ImageField::constant(v.grid().clone(), 1.0);
        0.5 * velocity_prior_kl(v, &unit, &self.cfg.prior).expect("positive unit variance").quadratic
    }

    /// ELBO ingredients with the full velocity KL (heuristic variances).
    fn full_terms(&self, velocities: &VelocitySet, eval: &Evaluation) -> Result<ElboTerms> {
        let mut kl = Vec::with_capacity(velocities.image_count());
        for j in 0..velocities.image_count() {
            let mut per_level = Vec::with_capacity(self.levels.len());
            for l in 0..self.levels.len() {
                let var = estimate_velocity_variance(&eval.fused[l], &eval.pooled[l][j], self.cfg.velocity_sigma_base)?;
                per_level.push(velocity_prior_kl(velocities.get(j, l), &var, &self.cfg.prior)?.total);
            }
            kl.push(per_level);
        }
        Ok(ElboTerms {
            loglik: eval.loglik.clone(),
            intrinsic: eval.intrinsic.clone(),
            velocity_kl: kl,
        })
    }

    fn record(eval: &Evaluation, level: usize, iteration: usize, alpha: f64) -> TraceRecord {
        TraceRecord {
            level,
            iteration,
            objective: eval.objective,
            reconstruction: eval.breakdown.reconstruction,
            structural: eval.breakdown.structural,
            regularization: eval.breakdown.regularization,
            alpha,
        }
    }

    fn refit_codebooks(&self, eval: &Evaluation, previous: &[IntensityCodebook]) -> Result<Vec<IntensityCodebook>> {
        let q = eval.fused.last().expect("levels");
        self.images
            .par_iter()
            .zip(&eval.transforms.forward)
            .zip(previous)
            .map(|((t, phi), prev)| {
                let u = warp(&t.image, phi, InterpMode::Linear)?;
                let CodebookFit { codebook, .. } = fit_codebook(q, &u, self.cfg.codebook_mode, Some(prev))?;
                Ok(codebook)
            })
            .collect()
    }

    /// Smoothed unit-magnitude Demons directions at one level.
    fn directions(&self, eval: &Evaluation, level: usize) -> Result<Vec<VectorField>> {
        let dcfg = self.cfg.demons.for_level(level, self.levels.len()).with_alpha(1.0);
        let fixed = &eval.fused[level];
        eval.pooled[level]
            .par_iter()
            .map(|m| {
                let out = demons_force(fixed, m, &dcfg)?;
                Ok(fluid_smooth(&out.mu, dcfg.fluid_sigma))
            })
            .collect()
    }
}

fn check_group(images: &[TaggedImage], cfg: &EngineConfig) -> Result<GridSpec> {
    if images.len() < 2 {
        return Err(Error::invalid(format!("a group needs >= 2 images, got {}", images.len())));
    }
    let grid = images[0].image.grid().clone();
    for t in &images[1..] {
        check_same_grid(&grid, t.image.grid(), "group images")?;
    }
    if cfg.require_multimodal {
        let mut m: Vec<&str> = images.iter().map(|t| t.modality.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        if m.len() < 2 {
            return Err(Error::invalid("multi-modal registration needs >= 2 distinct modalities"));
        }
    }
    Ok(grid)
}

/// Fit extractors on the group itself, then register it.
pub fn register_group(images: &[TaggedImage], cfg: &EngineConfig) -> Result<GroupState> {
    cfg.validate()?;
    check_group(images, cfg)?;
    let (extractor, _) = fit_view_extractor(images, &cfg.extractor_options())?;
    register_group_scaled(images, &extractor, cfg)
}

/// Register a group of any size with previously fitted extractors.
pub fn register_group_scaled(images: &[TaggedImage], extractor: &ViewExtractorParams, cfg: &EngineConfig) -> Result<GroupState> {
    cfg.validate()?;
    let grid = check_group(images, cfg)?;
    if extractor.k() != cfg.k {
        return Err(Error::invalid(format!(
            "extractor has K = {} but the configuration asks for {}",
            extractor.k(),
            cfg.k
        )));
    }
    let posteriors = images
        .par_iter()
        .map(|t| extract_posterior(&t.image, extractor, &t.modality))
        .collect::<Result<Vec<_>>>()?;
    let levels = pyramid_grids(&grid, cfg.levels)?;
    let mut velocities = VelocitySet::zeros(levels.clone(), images.len())?;
    let ctx = Context {
        cfg,
        images,
        posteriors: &posteriors,
        levels,
    };

    let q0 = {
        let refs: Vec<&CategoricalField> = posteriors.iter().collect();
        geometric_mean(&refs)?
    };
    let mut codebooks = images
        .iter()
        .map(|t| Ok(fit_codebook(&q0, &t.image, cfg.codebook_mode, None)?.codebook))
        .collect::<Result<Vec<_>>>()?;
    let mut eval = ctx.evaluate(&velocities, &codebooks)?;
    let mut trace = vec![Context::record(&eval, 0, 0, 0.0)];

    let nlev = cfg.levels;
    for level in 0..nlev {
        let dcfg = cfg.demons.for_level(level, nlev);
        let mut alpha_last = dcfg.alpha / 2.0;
        for iteration in 1..=cfg.iters_per_level {
            let dirs = ctx.directions(&eval, level)?;
            let current = velocities.level(level);
            let propose = |alpha: f64| -> Result<VelocitySet> {
                let stepped = current
                    .iter()
                    .zip(&dirs)
                    .map(|(v, u)| v.add_scaled(u, alpha))
                    .collect::<Result<Vec<_>>>()?;
                let mut vs = velocities.clone();
                vs.set_level(level, center_velocities(&stepped)?)?;
                Ok(vs)
            };
            let mut accepted = None;
            if cfg.demons.line_search {
                let mut alpha = (2.0 * alpha_last).min(0.9 * dcfg.alpha0);
                let floor = dcfg.alpha0 * 1e-3;
                while alpha >= floor {
                    let vs = propose(alpha)?;
                    let e = ctx.evaluate(&vs, &codebooks)?;
                    if e.objective < eval.objective {
                        accepted = Some((alpha, vs, e));
                        break;
                    }
                    alpha *= 0.5;
                }
            } else {
                let vs = propose(dcfg.alpha)?;
                let e = ctx.evaluate(&vs, &codebooks)?;
                accepted = Some((dcfg.alpha, vs, e));
            }
            let Some((alpha, vs, e)) = accepted else {
                break;
            };
            alpha_last = alpha;
            let previous = eval.objective;
            velocities = vs;
            eval = e;
            let refit = ctx.refit_codebooks(&eval, &codebooks)?;
            let e = ctx.evaluate(&velocities, &refit)?;
            if e.objective <= eval.objective {
                codebooks = refit;
                eval = e;
            }
            trace.push(Context::record(&eval, level, iteration, alpha));
            let rel = (previous - eval.objective).abs() / previous.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.convergence_tol {
                break;
            }
        }
    }

    Ok(GroupState {
        config: cfg.clone(),
        images: images.to_vec(),
        extractor: extractor.clone(),
        posteriors,
        level_posteriors: eval.pooled,
        velocities,
        totals: eval.totals,
        transforms: eval.transforms,
        codebooks,
        trace,
    })
}
