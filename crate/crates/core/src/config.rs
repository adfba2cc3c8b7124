//! Run configuration: one TOML document with engine, synthesis, evaluation and sweep sections.
//!
//! Every field has a default, so an empty document is valid. The top-level `seed` is the
//! only source of randomness; it overrides any seed given inside a section. A run manifest
//! (which embeds the configuration under `[config]`) is accepted in place of a config file.
//!
//! ```toml
//! seed = 7
//! [engine]
//! levels = 3
//! k = 4
//! [engine.demons]
//! fluid_sigma = 3.0
//! [synth]
//! dims = [96, 96]
//! [sweep]
//! group_sizes = [2, 6, 12, 24]
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::synth::PhantomSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Classes reported individually; empty means every non-background class.
    pub classes: Vec<u32>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { classes: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Group sizes registered with one shared set of extractors.
    pub group_sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            group_sizes: vec![2, 6, 12, 24],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub engine: EngineConfig,
    pub synth: PhantomSpec,
    pub evaluate: EvaluateConfig,
    pub sweep: SweepConfig,
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(path, format!("must be a positive finite number, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(path, format!("must be a non-negative finite number, got {v}")))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(cfg_err(path, format!("must be >= {min}, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| cfg_err("<document>", e.message()))?;
        let table = match value.get("config") {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => value,
        };
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err("<document>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Engine settings with the run seed applied.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            seed: self.seed,
            ..self.engine.clone()
        }
    }

    /// Phantom settings with the run seed applied.
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Range checks; failures name the offending field as a dotted path.
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(cfg_err("seed", "must be < 2^63"));
        }
        let e = &self.engine;
        at_least("engine.levels", e.levels, 1)?;
        at_least("engine.k", e.k, 2)?;
        at_least("engine.iters_per_level", e.iters_per_level, 1)?;
        at_least("engine.extractor_iters", e.extractor_iters, 1)?;
        at_least("engine.extractor_restarts", e.extractor_restarts, 1)?;
        positive("engine.convergence_tol", e.convergence_tol)?;
        if !(e.demons.alpha_fraction > 0.0 && e.demons.alpha_fraction <= 1.0) {
            return Err(cfg_err("engine.demons.alpha_fraction", "must lie in (0, 1]"));
        }
        non_negative("engine.demons.fluid_sigma", e.demons.fluid_sigma)?;
        positive("engine.demons.ridge", e.demons.ridge)?;
        positive("engine.prior.lambda", e.prior.lambda)?;
        positive("engine.likelihood.b", e.likelihood.b)?;
        non_negative("engine.weights.reconstruction", e.weights.reconstruction)?;
        non_negative("engine.weights.structural", e.weights.structural)?;
        non_negative("engine.weights.regularization", e.weights.regularization)?;
        if !(e.epsilon > 0.0 && e.epsilon * e.k as f64 <= 0.5) {
            return Err(cfg_err("engine.epsilon", "must lie in (0, 0.5 / k]"));
        }
        if e.squaring_steps == Some(0) {
            return Err(cfg_err("engine.squaring_steps", "must be >= 1 when set"));
        }
        positive("engine.velocity_sigma_base", e.velocity_sigma_base)?;
        // Errors from the engine's own checks carry no path; surface them under the section.
        e.validate().map_err(|err| cfg_err("engine", err.to_string()))?;

        let s = &self.synth;
        if !(2..=3).contains(&s.dims.len()) {
            return Err(cfg_err("synth.dims", "must have 2 or 3 entries"));
        }
        let min_dim = 4usize << e.levels.saturating_sub(1).min(16);
        for (i, &d) in s.dims.iter().enumerate() {
            if d < min_dim {
                return Err(cfg_err(
                    &format!("synth.dims[{i}]"),
                    format!("must be >= {min_dim} for {} pyramid levels, got {d}", e.levels),
                ));
            }
        }
        let distinct: BTreeSet<&String> = s.modalities.iter().collect();
        if distinct.len() < 2 {
            return Err(cfg_err("synth.modalities", "a multi-modal group needs >= 2 distinct modalities"));
        }
        if distinct.len() != s.modalities.len() {
            return Err(cfg_err("synth.modalities", "modality names must be unique"));
        }
        if s.modalities.iter().any(|m| m.is_empty() || m.contains(char::is_whitespace)) {
            return Err(cfg_err("synth.modalities", "names must be non-empty without whitespace"));
        }
        at_least("synth.images", s.images, 2)?;
        at_least("synth.sectors", s.sectors, 2)?;
        positive("synth.ring_width", s.ring_width)?;
        non_negative("synth.noise_sigma", s.noise_sigma)?;
        if !(s.ffd_spacing >= 2.0 && s.ffd_spacing.is_finite()) {
            return Err(cfg_err("synth.ffd_spacing", "must be >= 2"));
        }
        if !(s.ffd_bound >= 0.0 && s.ffd_bound < s.ffd_spacing / 2.0) {
            return Err(cfg_err("synth.ffd_bound", "must lie in [0, ffd_spacing / 2)"));
        }

        if self.sweep.group_sizes.is_empty() {
            return Err(cfg_err("sweep.group_sizes", "must not be empty"));
        }
        for (i, &n) in self.sweep.group_sizes.iter().enumerate() {
            at_least(&format!("sweep.group_sizes[{i}]"), n, 2)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(text: &str) -> String {
        match RunConfig::from_toml(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sweep.group_sizes, vec![2, 6, 12, 24]);
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.engine.k = 4;
        cfg.engine.squaring_steps = Some(6);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_out_of_range_with_field_paths() {
        assert_eq!(path_of("[engine.demons]\nfluid_sigma = -1.0"), "engine.demons.fluid_sigma");
        assert_eq!(path_of("[engine.prior]\nlambda = 0.0"), "engine.prior.lambda");
        assert_eq!(path_of("[synth]\nmodalities = [\"t1\"]"), "synth.modalities");
        assert_eq!(path_of("[synth]\ndims = [96, 3]"), "synth.dims[1]");
        assert_eq!(path_of("[sweep]\ngroup_sizes = [2, 1]"), "sweep.group_sizes[1]");
        assert_eq!(path_of("[engine]\nbogus = 1"), "<document>");
    }

    #[test]
    fn accepts_a_manifest_with_embedded_config() {
        let manifest = "version = \"0.1.0\"\n[config]\nseed = 5\n[config.engine]\nk = 3\n";
        let cfg = RunConfig::from_toml(manifest).unwrap();
        assert_eq!((cfg.seed, cfg.engine.k), (5, 3));
        assert_eq!(cfg.engine_config().seed, 5);
        assert_eq!(cfg.phantom_spec().seed, 5);
    }
}
