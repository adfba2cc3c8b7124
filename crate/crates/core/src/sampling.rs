//! Gumbel-based sampling and gradient estimators for categorical latents.
//!
//! With logits `θ` and i.i.d. standard Gumbel noise `g`, the Gumbel-Max
//! trick draws `z = onehot(argmax(θ + g))`. The straight-through
//! Gumbel-Softmax (ST-GS) estimator backpropagates through
//! `y = softmax_τ(θ + g)`; the Gumbel-Rao (GR) estimator replaces the single
//! softmax Jacobian by the average over `S` perturbations drawn from the
//! Gumbel posterior given `z`.
//!
//! Conditional draws use the truncated-Gumbel construction. With
//! `U, U_i ~ Uniform(0, 1)` and realised class `k`:
//!
//! * `M = logsumexp(θ) - ln(-ln U)` (the maximum is Gumbel at `logsumexp θ`),
//! * `G_k = M`,
//! * `G_i = -ln(exp(-M) + exp(-θ_i)·(-ln U_i))` for `i ≠ k`, a Gumbel at
//!   `θ_i` truncated to lie below `M`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{CategoricalField, Field, LabelField};

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelRaoConfig {
    pub tau: f64,
    /// Inner Rao-Blackwellisation sample count `S`.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GumbelRaoConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            samples: 3,
            seed: 0,
        }
    }
}

impl GumbelRaoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be > 0"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("S must be >= 1"));
        }
        Ok(())
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("logits must be non-empty"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    Ok(())
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `softmax(x / τ)`.
pub fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = x.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= s);
    y
}

/// Transposed softmax-Jacobian product `Jᵀ g` with
/// `J = (diag(y) - y yᵀ) / τ` (symmetric).
pub fn softmax_vjp(y: &[f64], tau: f64, g: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot) / tau).collect()
}

/// Dense softmax Jacobian `(diag(y) - y yᵀ) / τ`, row-major.
pub fn softmax_jacobian(y: &[f64], tau: f64) -> Vec<f64> {
    let k = y.len();
    let mut j = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            j[a * k + b] = (if a == b { y[a] } else { 0.0 } - y[a] * y[b]) / tau;
        }
    }
    j
}

/// Standard Gumbel variate `-ln(-ln U)`.
pub fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn one_hot(k: usize, class: usize) -> Vec<f64> {
    let mut z = vec![0.0; k];
    z[class] = 1.0;
    z
}

/// `θ + g` for fresh standard Gumbel noise.
pub fn perturb<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Vec<f64> {
    logits.iter().map(|&t| t + standard_gumbel(rng)).collect()
}

/// One-hot Gumbel-Max sample.
pub fn gumbel_max_sample<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let g = perturb(logits, rng);
    Ok(one_hot(logits.len(), argmax(&g)))
}

/// Perturbed logits drawn from the Gumbel posterior given that `realized`
/// (one-hot) is the argmax.
pub fn conditional_gumbel_draw<R: Rng + ?Sized>(logits: &[f64], realized: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let k = realized_class(realized, logits.len())?;
    Ok(conditional_draw_class(logits, k, rng))
}

fn realized_class(realized: &[f64], k: usize) -> Result<usize> {
    if realized.len() != k
        || realized.iter().any(|&v| v != 0.0 && v != 1.0)
        || realized.iter().filter(|&&v| v == 1.0).count() != 1
    {
        return Err(Error::invalid("realised sample must be one-hot of the logit length"));
    }
    Ok(argmax(realized))
}

fn conditional_draw_class<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let top = logsumexp(logits) + standard_gumbel(rng);
    logits
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i == k {
                return top;
            }
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let e = -u.ln();
            let g = -((-top).exp() + (-t).exp() * e).ln();
            // guard the hard constraint against rounding at extreme logits
            if g < top {
                g
            } else {
                top - top.abs().max(1.0) * f64::EPSILON * 4.0
            }
        })
        .collect()
}

/// A forward one-hot sample and the gradient estimate w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub z: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Straight-through Gumbel-Softmax: one Gumbel draw gives both the hard
/// sample `z` and the relaxed `y` whose Jacobian carries `∂f/∂z`.
pub fn st_gs_gradient<R, F>(f_grad: F, logits: &[f64], tau: f64, rng: &mut R) -> Result<GradientSample>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> Vec<f64>,
{
    check_logits(logits)?;
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be > 0"));
    }
    let g = perturb(logits, rng);
    let z = one_hot(logits.len(), argmax(&g));
    let y = softmax(&g, tau);
    let grad = softmax_vjp(&y, tau, &f_grad(&z));
    Ok(GradientSample { z, grad })
}

/// Gumbel-Rao estimator: `∂f/∂z · (1/S) Σ_s J(softmax_τ(G^s))` with
/// `G^s ~ θ + g | z`.
pub fn gumbel_rao_gradient<R, F>(f_grad: F, logits: &[f64], cfg: &GumbelRaoConfig, rng: &mut R) -> Result<GradientSample>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> Vec<f64>,
{
    check_logits(logits)?;
    cfg.validate()?;
    let kk = logits.len();
    let class = argmax(&perturb(logits, rng));
    let z = one_hot(kk, class);
    let fg = f_grad(&z);
    let mut grad = vec![0.0; kk];
    for _ in 0..cfg.samples {
        let y = softmax(&conditional_draw_class(logits, class, rng), cfg.tau);
        for (g, v) in grad.iter_mut().zip(softmax_vjp(&y, cfg.tau, &fg)) {
            *g += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= cfg.samples as f64);
    Ok(GradientSample { z, grad })
}

/// Exact `∇_θ Σ_k softmax(θ)_k c_k` by enumeration of the K outcomes.
pub fn exact_linear_gradient(logits: &[f64], c: &[f64]) -> Vec<f64> {
    softmax_vjp(&softmax(logits, 1.0), 1.0, c)
}

/// Voxelwise Gumbel-Max draw of hard labels from a categorical field.
pub fn sample_labels<R: Rng + ?Sized>(field: &CategoricalField, rng: &mut R) -> LabelField {
    let k = field.k();
    let labels = (0..field.grid().len())
        .map(|i| {
            let logits: Vec<f64> = field.at(i).iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
            argmax(&perturb(&logits, rng)) as u32
        })
        .collect();
    LabelField::new(field.grid().clone(), k as u32, labels).expect("labels below k")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_max_respects_dominant_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000)
            .filter(|_| gumbel_max_sample(&[100.0, -100.0], &mut rng).unwrap()[0] == 1.0)
            .count();
        assert!(hits >= 9990);
        assert!(gumbel_max_sample(&[f64::NAN, 0.0], &mut rng).is_err());
    }

    #[test]
    fn seeded_draws_repeat() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..20)
                .map(|_| gumbel_max_sample(&[0.1, 0.5, -0.3], &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let x = [0.3, -1.2];
        let tau = 0.7;
        let y = softmax(&x, tau);
        let j = softmax_jacobian(&y, tau);
        let h = 1e-6;
        for b in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[b] += h;
            xm[b] -= h;
            let (yp, ym) = (softmax(&xp, tau), softmax(&xm, tau));
            for a in 0..2 {
                assert!(((yp[a] - ym[a]) / (2.0 * h) - j[a * 2 + b]).abs() < 1e-5);
            }
        }
        // columns sum to zero: the gradient of a constant shift vanishes
        assert!(softmax_vjp(&y, tau, &[1.0, 1.0]).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_downstream_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = st_gs_gradient(|_| vec![0.0; 3], &[0.1, 0.2, 0.3], 1.0, &mut rng).unwrap();
        assert!(s.grad.iter().all(|&v| v == 0.0));
        let s = st_gs_gradient(|_| vec![2.0; 3], &[0.1, 0.2, 0.3], 1.0, &mut rng).unwrap();
        assert!(s.grad.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn conditional_draw_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = [2.0, -1.0, 0.5, -30.0];
        for k in 0..4 {
            let z = one_hot(4, k);
            for _ in 0..2000 {
                let g = conditional_gumbel_draw(&logits, &z, &mut rng).unwrap();
                assert_eq!(argmax(&g), k);
            }
        }
        assert!(conditional_gumbel_draw(&logits, &[0.5, 0.5, 0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GumbelRaoConfig::default().validate().is_ok());
        assert!(GumbelRaoConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(GumbelRaoConfig { samples: 0, ..Default::default() }.validate().is_err());
    }
}
