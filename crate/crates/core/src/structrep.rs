//! Single-view structural posteriors and their fusion.
//!
//! Each modality gets a 1-D Gaussian intensity mixture fitted by EM; its
//! voxelwise responsibilities are the single-view posterior of that image.
//! Component indices are matched across modalities so that class `k` denotes
//! the same latent structure in every view. Fusion provides the normalised
//! geometric mean (the common anatomy), the arithmetic mean (the mixture
//! prior) and the intrinsic distance between them and the views.

use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{check_same_grid, CategoricalField, Field, GridSpec, ImageField};

/// Default probability floor applied to every single-view posterior.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// An image together with the name of the modality it was acquired with.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedImage {
    pub modality: String,
    pub image: ImageField,
}

impl TaggedImage {
    pub fn new(modality: impl Into<String>, image: ImageField) -> Self {
        Self {
            modality: modality.into(),
            image,
        }
    }
}

/// Fitted 1-D intensity mixture of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMixture {
    pub modality: String,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ModalityMixture {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    fn permuted(&self, order: &[usize]) -> Self {
        Self {
            modality: self.modality.clone(),
            means: order.iter().map(|&i| self.means[i]).collect(),
            variances: order.iter().map(|&i| self.variances[i]).collect(),
            weights: order.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Log of `w_k N(x; m_k, s_k)` for every component.
    fn log_joint(&self, x: f64, out: &mut [f64]) {
        const LN_2PI: f64 = 1.837_877_066_409_345_5;
        for k in 0..self.k() {
            let v = self.variances[k];
            let d = x - self.means[k];
            out[k] = self.weights[k].ln() - 0.5 * (LN_2PI + v.ln() + d * d / v);
        }
    }

    /// Posterior responsibilities of one intensity.
    pub fn responsibilities(&self, x: f64, out: &mut [f64]) {
        self.log_joint(x, out);
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in out.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in out.iter_mut() {
            *v /= s;
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 2 || self.variances.len() != k || self.weights.len() != k {
            return Err(Error::invalid(format!(
                "mixture `{}` must have K >= 2 equally sized parameter lists",
                self.modality
            )));
        }
        if self.variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("mixture `{}`: variances must be > 0", self.modality)));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture `{}`: weights must be positive and sum to 1",
                self.modality
            )));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid(format!("mixture `{}`: means must be finite", self.modality)));
        }
        Ok(())
    }
}

/// Per-modality mixtures sharing one class count, plus the probability floor.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewExtractorParams {
    pub epsilon: f64,
    pub mixtures: Vec<ModalityMixture>,
}

impl ViewExtractorParams {
    pub fn new(epsilon: f64, mixtures: Vec<ModalityMixture>) -> Result<Self> {
        let k = mixtures.first().map(ModalityMixture::k).unwrap_or(0);
        if mixtures.is_empty() {
            return Err(Error::invalid("extractor needs at least one modality"));
        }
        for m in &mixtures {
            m.validate()?;
            if m.k() != k {
                return Err(Error::invalid("all modalities must share the class count"));
            }
        }
        if !(epsilon > 0.0 && epsilon * k as f64 <= 0.5) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 0.5/K]")));
        }
        Ok(Self { epsilon, mixtures })
    }

    pub fn k(&self) -> usize {
        self.mixtures[0].k()
    }

    pub fn mixture(&self, modality: &str) -> Option<&ModalityMixture> {
        self.mixtures.iter().find(|m| m.modality == modality)
    }

    pub fn modalities(&self) -> impl Iterator<Item = &str> {
        self.mixtures.iter().map(|m| m.modality.as_str())
    }
}

/// EM settings for [`fit_view_extractor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorOptions {
    pub k: usize,
    pub iters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
}

impl Default for ExtractorOptions {
    fn default() -> Self {
        Self {
            k: 8,
            iters: 200,
            restarts: 4,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            tol: 1e-10,
        }
    }
}

/// Diagnostics from fitting: the total log-likelihood after each EM
/// iteration of the selected restart, per modality.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub loglik_traces: Vec<(String, Vec<f64>)>,
}

struct EmRun {
    mixture: ModalityMixture,
    trace: Vec<f64>,
}

fn em_fit(modality: &str, x: &[f64], init_means: Vec<f64>, opts: &ExtractorOptions, var_floor: f64) -> EmRun {
    let k = init_means.len();
    let (lo, hi) = min_max(x);
    let init_var = ((hi - lo) / k as f64).powi(2).max(var_floor);
    let mut mix = ModalityMixture {
        modality: modality.to_string(),
        means: init_means,
        variances: vec![init_var; k],
        weights: vec![1.0 / k as f64; k],
    };
    let mut trace = Vec::new();
    let mut lj = vec![0.0; k];
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..opts.iters.max(1) {
        let mut nk = vec![0.0; k];
        let mut sx = vec![0.0; k];
        let mut sxx = vec![0.0; k];
        let mut ll = 0.0;
        for &xi in x {
            mix.log_joint(xi, &mut lj);
            let m = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in lj.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            ll += m + s.ln();
            for c in 0..k {
                let r = lj[c] / s;
                nk[c] += r;
                sx[c] += r * xi;
                sxx[c] += r * xi * xi;
            }
        }
        // The log-likelihood belongs to the parameters before this M-step.
        trace.push(ll);
        let n = x.len() as f64;
        for c in 0..k {
            if nk[c] <= f64::MIN_POSITIVE {
                // An empty component keeps its mean and gets a tiny weight.
                mix.weights[c] = 1e-12;
                continue;
            }
            let mean = sx[c] / nk[c];
            let var = (sxx[c] / nk[c] - mean * mean).max(var_floor);
            mix.means[c] = mean;
            mix.variances[c] = var;
            mix.weights[c] = nk[c] / n;
        }
        let ws: f64 = mix.weights.iter().sum();
        mix.weights.iter_mut().for_each(|w| *w /= ws);
        if (ll - prev).abs() <= opts.tol * n {
            break;
        }
        prev = ll;
    }
    // final likelihood of the returned parameters
    trace.push(total_loglik(&mix, x));
    EmRun { mixture: mix, trace }
}

fn total_loglik(mix: &ModalityMixture, x: &[f64]) -> f64 {
    let mut lj = vec![0.0; mix.k()];
    x.iter()
        .map(|&xi| {
            mix.log_joint(xi, &mut lj);
            let m = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + lj.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .sum()
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// k-means++ seeding on a strided subsample.
fn kmeanspp_init(x: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let stride = (x.len() / 4096).max(1);
    let sample: Vec<f64> = x.iter().step_by(stride).copied().collect();
    let mut centers = vec![sample[rng.gen_range(0..sample.len())]];
    let mut d2: Vec<f64> = sample.iter().map(|&v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            sample[rng.gen_range(0..sample.len())]
        } else {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = sample.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            sample[pick]
        };
        centers.push(next);
        for (d, &v) in d2.iter_mut().zip(&sample) {
            *d = d.min((v - next).powi(2));
        }
    }
    centers.sort_by(f64::total_cmp);
    centers
}

fn fit_modality(modality: &str, x: &[f64], opts: &ExtractorOptions, rng: &mut ChaCha8Rng) -> Result<EmRun> {
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(format!(
            "modality `{modality}` has constant intensity"
        )));
    }
    if distinct.len() < opts.k {
        return Err(Error::Degenerate(format!(
            "modality `{modality}` has {} distinct intensities, fewer than K = {}",
            distinct.len(),
            opts.k
        )));
    }
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let var_floor = (1e-3 * (hi - lo)).powi(2);
    let even: Vec<f64> = (0..opts.k)
        .map(|c| lo + (c as f64 + 0.5) / opts.k as f64 * (hi - lo))
        .collect();
    let mut best = em_fit(modality, x, even, opts, var_floor);
    for _ in 1..opts.restarts.max(1) {
        let init = kmeanspp_init(x, opts.k, rng);
        let run = em_fit(modality, x, init, opts, var_floor);
        if run.trace.last() > best.trace.last() {
            best = run;
        }
    }
    let mut order: Vec<usize> = (0..opts.k).collect();
    order.sort_by(|&a, &b| best.mixture.means[a].total_cmp(&best.mixture.means[b]));
    best.mixture = best.mixture.permuted(&order);
    Ok(best)
}

/// Fit one intensity mixture per modality by EM, then match component
/// indices across modalities by maximising the voxelwise co-occurrence of
/// their responsibilities with the first (alphabetical) modality.
pub fn fit_view_extractor(images: &[TaggedImage], opts: &ExtractorOptions) -> Result<(ViewExtractorParams, FitReport)> {
    fit_view_extractor_masked(images, None, opts)
}

/// As [`fit_view_extractor`], restricting the EM fit to masked voxels.
pub fn fit_view_extractor_masked(
    images: &[TaggedImage],
    masks: Option<&[Vec<bool>]>,
    opts: &ExtractorOptions,
) -> Result<(ViewExtractorParams, FitReport)> {
    if opts.k < 2 {
        return Err(Error::invalid(format!("K must be >= 2, got {}", opts.k)));
    }
    if images.is_empty() {
        return Err(Error::invalid("no images to fit"));
    }
    if let Some(m) = masks {
        if m.len() != images.len() {
            return Err(Error::invalid("one mask per image is required"));
        }
    }
    let mut names: Vec<&str> = images.iter().map(|t| t.modality.as_str()).collect();
    names.sort_unstable();
    names.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mixtures = Vec::new();
    let mut report = FitReport::default();
    for name in &names {
        let mut x = Vec::new();
        for (j, t) in images.iter().enumerate().filter(|(_, t)| t.modality == *name) {
            match masks {
                Some(m) => x.extend(
                    t.image
                        .values()
                        .iter()
                        .zip(&m[j])
                        .filter(|(_, &keep)| keep)
                        .map(|(v, _)| *v),
                ),
                None => x.extend_from_slice(t.image.values()),
            }
        }
        let run = fit_modality(name, &x, opts, &mut rng)?;
        report.loglik_traces.push((name.to_string(), run.trace));
        mixtures.push(run.mixture);
    }
    let mut params = ViewExtractorParams::new(opts.epsilon, mixtures)?;
    align_classes(&mut params, images)?;
    Ok((params, report))
}

/// Summed responsibilities of all images of one modality.
fn summed_posteriors(params: &ViewExtractorParams, images: &[TaggedImage], modality: &str, grid: &GridSpec) -> Result<Vec<f64>> {
    let k = params.k();
    let mut acc = vec![0.0; grid.len() * k];
    for t in images.iter().filter(|t| t.modality == modality) {
        let p = extract_posterior(&t.image, params, modality)?;
        for (a, v) in acc.iter_mut().zip(p.probs()) {
            *a += v;
        }
    }
    Ok(acc)
}

fn align_classes(params: &mut ViewExtractorParams, images: &[TaggedImage]) -> Result<()> {
    if params.mixtures.len() < 2 {
        return Ok(());
    }
    let grid = images[0].image.grid().clone();
    if images.iter().any(|t| t.image.grid().dims() != grid.dims()) {
        // co-occurrence needs a common voxel lattice
        return Ok(());
    }
    let k = params.k();
    let reference = params.mixtures[0].modality.clone();
    let ref_post = summed_posteriors(params, images, &reference, &grid)?;
    for m in 1..params.mixtures.len() {
        let name = params.mixtures[m].modality.clone();
        let post = summed_posteriors(params, images, &name, &grid)?;
        let mut co = vec![0.0; k * k];
        for (r, p) in ref_post.chunks_exact(k).zip(post.chunks_exact(k)) {
            for a in 0..k {
                for b in 0..k {
                    co[a * k + b] += r[a] * p[b];
                }
            }
        }
        let max = co.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let weights = Matrix::from_vec(
            k,
            k,
            co.iter().map(|&c| (c / max * 1e12).round() as i64).collect(),
        )
        .map_err(|e| Error::invalid(format!("class matching: {e:?}")))?;
        let (_, assignment) = kuhn_munkres(&weights);
        params.mixtures[m] = params.mixtures[m].permuted(&assignment);
    }
    Ok(())
}

/// Apply the probability floor: `p ← ε + (1 - Kε) p`, which keeps every
/// entry at least `ε` and the vector on the simplex.
pub fn floor_probabilities(p: &mut [f64], epsilon: f64) {
    let k = p.len() as f64;
    for v in p.iter_mut() {
        *v = epsilon + (1.0 - k * epsilon) * *v;
    }
}

/// Voxelwise mixture responsibilities of an image under its modality's
/// mixture, floored at `ε`.
pub fn extract_posterior(image: &ImageField, params: &ViewExtractorParams, modality: &str) -> Result<CategoricalField> {
    let mix = params
        .mixture(modality)
        .ok_or_else(|| Error::invalid(format!("no extractor fitted for modality `{modality}`")))?;
    let k = mix.k();
    let mut probs = vec![0.0; image.grid().len() * k];
    for (&x, out) in image.values().iter().zip(probs.chunks_exact_mut(k)) {
        mix.responsibilities(x, out);
        floor_probabilities(out, params.epsilon);
    }
    Ok(CategoricalField::new(image.grid().clone(), k, probs).expect("responsibilities are on the simplex"))
}

fn check_views(views: &[&CategoricalField]) -> Result<(GridSpec, usize)> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("at least one view is required"))?;
    for v in &views[1..] {
        check_same_grid(first.grid(), v.grid(), "fusion")?;
        if v.k() != first.k() {
            return Err(Error::invalid(format!(
                "class count mismatch: {} vs {}",
                first.k(),
                v.k()
            )));
        }
    }
    Ok((first.grid().clone(), first.k()))
}

/// Sum of `values` in sorted order, so the result does not depend on view order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// The shared point when every view agrees at voxel `i`.
fn unanimous<'a>(views: &[&'a CategoricalField], i: usize) -> Option<&'a [f64]> {
    let first = views[0].at(i);
    views[1..].iter().all(|v| v.at(i) == first).then_some(first)
}

/// Normalised voxelwise geometric mean, computed in log space.
///
/// Exactly idempotent (agreeing views are returned unchanged) and exactly
/// invariant to the order of the views.
pub fn geometric_mean(views: &[&CategoricalField]) -> Result<CategoricalField> {
    let (grid, k) = check_views(views)?;
    let n = views.len() as f64;
    let mut probs = vec![0.0; grid.len() * k];
    let mut logs = vec![0.0; k];
    let mut column = vec![0.0; views.len()];
    for (i, out) in probs.chunks_exact_mut(k).enumerate() {
        if let Some(p) = unanimous(views, i) {
            out.copy_from_slice(p);
            continue;
        }
        for (c, l) in logs.iter_mut().enumerate() {
            for (x, v) in column.iter_mut().zip(views) {
                *x = v.at(i)[c].ln();
            }
            *l = ordered_sum(&mut column);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            // every class has a zero somewhere; fall back to uniform
            out.iter_mut().for_each(|o| *o = 1.0 / k as f64);
            continue;
        }
        let mut s = 0.0;
        for (o, &l) in out.iter_mut().zip(&logs) {
            *o = ((l - m) / n).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }
    Ok(CategoricalField::new(grid, k, probs).expect("normalised"))
}

/// Voxelwise average of the views, with the same exactness guarantees as
/// [`geometric_mean`].
pub fn arithmetic_mean(views: &[&CategoricalField]) -> Result<CategoricalField> {
    let (grid, k) = check_views(views)?;
    let n = views.len() as f64;
    let mut probs = vec![0.0; grid.len() * k];
    let mut column = vec![0.0; views.len()];
    for (i, out) in probs.chunks_exact_mut(k).enumerate() {
        if let Some(p) = unanimous(views, i) {
            out.copy_from_slice(p);
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            for (x, v) in column.iter_mut().zip(views) {
                *x = v.at(i)[c];
            }
            *o = ordered_sum(&mut column) / n;
        }
    }
    Ok(CategoricalField::new(grid, k, probs).expect("average of simplex points"))
}

/// `Σ_ω Σ_k p log(p / q)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &CategoricalField, q: &CategoricalField) -> Result<f64> {
    check_views(&[p, q])?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum())
}

/// Average KL divergence from a fused posterior to each view.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicDistance {
    /// `(1/N) Σ_j per_view[j]`.
    pub total: f64,
    /// `KL(fused ‖ view_j)` summed over voxels.
    pub per_view: Vec<f64>,
}

/// `(1/N) Σ_j Σ_ω Σ_k π*_k log(π*_k / π_{j,k})`; meant to be called with
/// `fused = geometric_mean(views)`.
pub fn intrinsic_distance(fused: &CategoricalField, views: &[&CategoricalField]) -> Result<IntrinsicDistance> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    let per_view = views
        .iter()
        .map(|v| kl_divergence(fused, v))
        .collect::<Result<Vec<_>>>()?;
    let total = per_view.iter().sum::<f64>() / views.len() as f64;
    Ok(IntrinsicDistance { total, per_view })
}

/// Diagonal Gaussian single-view posterior (one mean/variance per entry).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianView {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Precision-weighted fusion: `Σ* = N [Σ_j Σ_j⁻¹]⁻¹`,
/// `μ* = Σ*/N · Σ_j Σ_j⁻¹ μ_j`.
pub fn geometric_mean_gaussian(views: &[GaussianView]) -> Result<GaussianView> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("at least one view is required"))?;
    let len = first.means.len();
    for v in views {
        if v.means.len() != len || v.variances.len() != len {
            return Err(Error::invalid("Gaussian views differ in length"));
        }
        if v.variances.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("Gaussian variances must be > 0"));
        }
    }
    let n = views.len() as f64;
    let mut means = vec![0.0; len];
    let mut variances = vec![0.0; len];
    for i in 0..len {
        let prec: f64 = views.iter().map(|v| 1.0 / v.variances[i]).sum();
        let wsum: f64 = views.iter().map(|v| v.means[i] / v.variances[i]).sum();
        variances[i] = n / prec;
        means[i] = variances[i] / n * wsum;
    }
    Ok(GaussianView { means, variances })
}

/// Closed-form `KL(N(μ*, Σ*) ‖ N(μ_j, Σ_j))` for diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianView, q: &GaussianView) -> Result<f64> {
    if p.means.len() != q.means.len() {
        return Err(Error::invalid("Gaussian views differ in length"));
    }
    Ok((0..p.means.len())
        .map(|i| {
            let (sp, sq) = (p.variances[i], q.variances[i]);
            let d = q.means[i] - p.means[i];
            0.5 * ((sq / sp).ln() + sp / sq + d * d / sq - 1.0)
        })
        .sum())
}

/// Gaussian intrinsic distance `(1/N) Σ_j KL(q* ‖ q_j)`.
pub fn intrinsic_distance_gaussian(fused: &GaussianView, views: &[GaussianView]) -> Result<IntrinsicDistance> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    let per_view = views
        .iter()
        .map(|v| gaussian_kl(fused, v))
        .collect::<Result<Vec<_>>>()?;
    let total = per_view.iter().sum::<f64>() / views.len() as f64;
    Ok(IntrinsicDistance { total, per_view })
}

/// Outcome of [`variational_argmin_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArgminReport {
    pub at_optimum: f64,
    pub checked: usize,
    pub violations: usize,
    /// Smallest observed `D̃[q'] - D̃[q*]`.
    pub min_gap: f64,
}

/// Verify that no random simplex perturbation of the geometric mean has a
/// smaller intrinsic distance (beyond `1e-10`).
pub fn variational_argmin_check<R: Rng>(
    views: &[&CategoricalField],
    perturbations: usize,
    magnitude: f64,
    rng: &mut R,
) -> Result<ArgminReport> {
    let fused = geometric_mean(views)?;
    let at_optimum = intrinsic_distance(&fused, views)?.total;
    let k = fused.k();
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..perturbations {
        let mut probs = fused.probs().to_vec();
        for p in probs.chunks_exact_mut(k) {
            for v in p.iter_mut() {
                *v = (*v + magnitude * rng.gen_range(-1.0..=1.0)).max(1e-12);
            }
            crate::grid::normalize_simplex(p);
        }
        let q = CategoricalField::new(fused.grid().clone(), k, probs)?;
        let gap = intrinsic_distance(&q, views)?.total - at_optimum;
        if gap < -1e-10 {
            violations += 1;
        }
        min_gap = min_gap.min(gap);
    }
    Ok(ArgminReport {
        at_optimum,
        checked: perturbations,
        violations,
        min_gap,
    })
}

/// Intrinsic distance of an arbitrary candidate `q` against the views.
pub fn intrinsic_distance_of(candidate: &CategoricalField, views: &[&CategoricalField]) -> Result<f64> {
    Ok(intrinsic_distance(candidate, views)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn cat(probs: &[f64], k: usize) -> CategoricalField {
        let n = probs.len() / k;
        let g = GridSpec::new(&[n, 1 + 1]).unwrap();
        let mut p = probs.to_vec();
        p.extend_from_slice(probs);
        CategoricalField::new(g, k, p).unwrap()
    }

    #[test]
    fn symmetric_pair_fuses_to_uniform() {
        let a = cat(&[0.8, 0.2, 0.8, 0.2], 2);
        let b = cat(&[0.2, 0.8, 0.2, 0.8], 2);
        let g = geometric_mean(&[&a, &b]).unwrap();
        assert!(g.probs().iter().all(|&p| (p - 0.5).abs() < 1e-15));
        let m = arithmetic_mean(&[&cat(&[1.0, 0.0, 1.0, 0.0], 2), &cat(&[0.0, 1.0, 0.0, 1.0], 2)]).unwrap();
        assert!(m.probs().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn identical_views_have_zero_distance() {
        let a = cat(&[0.3, 0.7, 0.6, 0.4], 2);
        let g = geometric_mean(&[&a, &a, &a]).unwrap();
        for (x, y) in g.probs().iter().zip(a.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(intrinsic_distance(&g, &[&a, &a, &a]).unwrap().total.abs() < 1e-12);
    }

    #[test]
    fn two_opposed_views_match_hand_kl() {
        let a = cat(&[0.9, 0.1, 0.9, 0.1], 2);
        let b = cat(&[0.1, 0.9, 0.1, 0.9], 2);
        let g = geometric_mean(&[&a, &b]).unwrap();
        let d = intrinsic_distance(&g, &[&a, &b]).unwrap();
        // q* = (0.5, 0.5): KL = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) per voxel, 4 voxels
        let per_voxel = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((d.total - 4.0 * per_voxel).abs() < 1e-12);
        assert!(d.total > 0.0);
    }

    #[test]
    fn mismatched_views_rejected() {
        let a = cat(&[0.5, 0.5, 0.5, 0.5], 2);
        let b = cat(&[0.2, 0.3, 0.5, 0.1, 0.1, 0.8], 3);
        assert!(geometric_mean(&[&a, &b]).is_err());
        assert!(arithmetic_mean(&[]).is_err());
    }

    #[test]
    fn gaussian_fusion_closed_form() {
        let a = GaussianView { means: vec![1.0], variances: vec![1.0] };
        let b = GaussianView { means: vec![3.0], variances: vec![1.0] };
        let f = geometric_mean_gaussian(&[a.clone(), b]).unwrap();
        assert_eq!(f.means, vec![2.0]);
        assert_eq!(f.variances, vec![1.0]);
        assert_eq!(geometric_mean_gaussian(&[a.clone(), a.clone()]).unwrap(), a);
        let bad = GaussianView { means: vec![0.0], variances: vec![0.0] };
        assert!(geometric_mean_gaussian(&[a, bad]).is_err());
    }

    #[test]
    fn floor_keeps_simplex() {
        let mut p = vec![1.0, 0.0, 0.0];
        floor_probabilities(&mut p, 1e-6);
        assert!(p.iter().all(|&v| v >= 1e-6));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn two_level_image(n: usize) -> ImageField {
        let g = GridSpec::new(&[n, n]).unwrap();
        ImageField::from_fn(g, |c| if c[0] < n / 2 { 0.0 } else { 1.0 }).unwrap()
    }

    #[test]
    fn em_on_two_deltas() {
        let imgs = vec![TaggedImage::new("a", two_level_image(8))];
        let opts = ExtractorOptions { k: 2, ..Default::default() };
        let (p, _) = fit_view_extractor(&imgs, &opts).unwrap();
        let m = &p.mixtures[0].means;
        assert!(m[0].abs() < 1e-3 && (m[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn em_rejects_degenerate_inputs() {
        let g = GridSpec::new(&[4, 4]).unwrap();
        let flat = vec![TaggedImage::new("a", ImageField::constant(g, 0.3))];
        let opts = ExtractorOptions { k: 2, ..Default::default() };
        assert!(matches!(fit_view_extractor(&flat, &opts), Err(Error::Degenerate(_))));
        let imgs = vec![TaggedImage::new("a", two_level_image(8))];
        let k1 = ExtractorOptions { k: 1, ..Default::default() };
        assert!(matches!(fit_view_extractor(&imgs, &k1), Err(Error::InvalidInput(_))));
        let k3 = ExtractorOptions { k: 3, ..Default::default() };
        assert!(fit_view_extractor(&imgs, &k3).is_err());
    }

    #[test]
    fn extraction_requires_known_modality() {
        let imgs = vec![TaggedImage::new("a", two_level_image(8))];
        let (p, _) = fit_view_extractor(&imgs, &ExtractorOptions { k: 2, ..Default::default() }).unwrap();
        assert!(extract_posterior(&imgs[0].image, &p, "b").is_err());
        let post = extract_posterior(&imgs[0].image, &p, "a").unwrap();
        assert!(post.probs().iter().all(|&v| v >= p.epsilon));
    }

    #[test]
    fn uniform_mixture_gives_uniform_posterior() {
        let mix = ModalityMixture {
            modality: "a".into(),
            means: vec![0.5; 3],
            variances: vec![1.0; 3],
            weights: vec![1.0 / 3.0; 3],
        };
        let params = ViewExtractorParams::new(1e-6, vec![mix]).unwrap();
        let img = two_level_image(4);
        let post = extract_posterior(&img, &params, "a").unwrap();
        assert!(post.probs().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }
}
