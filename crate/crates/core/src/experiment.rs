//! Synthetic recovery experiments shared by the CLI and the test suites.

use crate::engine::{register_group, register_group_scaled, EngineConfig, GroupState};
use crate::error::Result;
use crate::grid::{Field, LabelField, VectorField};
use crate::metrics::{groupwise_dice, groupwise_warping_index, negative_jacobian_fraction};
use crate::structrep::{fit_view_extractor, ViewExtractorParams};
use crate::synth::{make_phantom_group, PhantomGroup, PhantomSpec};

/// Registration quality on a phantom group, before and after.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub images: usize,
    pub gwi_initial: f64,
    pub gwi_final: f64,
    /// Mean over non-background classes.
    pub dsc_initial: f64,
    pub dsc_final: f64,
    /// Percent of voxels with a non-positive Jacobian determinant.
    pub negative_jacobian: f64,
}

impl RecoveryReport {
    /// Relative gWI reduction in `[0, 1]` (negative if registration made it worse).
    pub fn gwi_reduction(&self) -> f64 {
        1.0 - self.gwi_final / self.gwi_initial
    }
}

/// Labels of each image pulled into the common space.
pub fn warped_labels(labels: &[LabelField], transforms: &[VectorField]) -> Result<Vec<LabelField>> {
    labels.iter().zip(transforms).map(|(l, t)| l.warp(t)).collect()
}

pub fn recovery_report(group: &PhantomGroup, state: &GroupState) -> Result<RecoveryReport> {
    let foreground = group.foreground();
    let identity: Vec<VectorField> = group
        .displacements
        .iter()
        .map(|d| VectorField::zeros(d.grid().clone()))
        .collect();
    let forward = &state.transforms.forward;
    Ok(RecoveryReport {
        images: group.images.len(),
        gwi_initial: groupwise_warping_index(&group.displacements, &identity, &foreground)?,
        gwi_final: groupwise_warping_index(&group.displacements, forward, &foreground)?,
        dsc_initial: groupwise_dice(&group.labels, None)?,
        dsc_final: groupwise_dice(&warped_labels(&group.labels, forward)?, None)?,
        negative_jacobian: negative_jacobian_fraction(forward, None)?,
    })
}

/// Synthesize one phantom group, register it, and score the result.
pub fn phantom_recovery(spec: &PhantomSpec, cfg: &EngineConfig) -> Result<(RecoveryReport, GroupState)> {
    let group = make_phantom_group(spec)?;
    let state = register_group(&group.images, cfg)?;
    Ok((recovery_report(&group, &state)?, state))
}

/// Fit extractors once on the base group described by `spec`, then register groups of each
/// size in `sizes` with those extractors and the same configuration.
pub fn group_size_sweep(
    spec: &PhantomSpec,
    cfg: &EngineConfig,
    sizes: &[usize],
) -> Result<(ViewExtractorParams, Vec<RecoveryReport>)> {
    let base = make_phantom_group(spec)?;
    let (extractor, _) = fit_view_extractor(&base.images, &cfg.extractor_options())?;
    let reports = sizes
        .iter()
        .map(|&n| {
            let group = make_phantom_group(&PhantomSpec {
                images: n,
                ..spec.clone()
            })?;
            let state = register_group_scaled(&group.images, &extractor, cfg)?;
            recovery_report(&group, &state)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((extractor, reports))
}

/// CSV with one row per group size.
pub fn sweep_csv(reports: &[RecoveryReport]) -> String {
    let mut s = String::from("images,gwi_initial,gwi_final,gwi_reduction,dsc_initial,dsc_final,negative_jacobian_percent\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.images,
            r.gwi_initial,
            r.gwi_final,
            r.gwi_reduction(),
            r.dsc_initial,
            r.dsc_final,
            r.negative_jacobian
        ));
    }
    s
}

/// Per-level, per-image velocity norms: `level,image,max_norm,rms_norm`.
pub fn velocity_norms_csv(state: &GroupState) -> String {
    let mut s = String::from("level,image,max_norm,rms_norm\n");
    for l in 0..state.velocities.level_count() {
        for j in 0..state.velocities.image_count() {
            let v = state.velocities.get(j, l);
            let n = v.grid().len();
            let sq: f64 = v.components().iter().map(|c| c * c).sum();
            s.push_str(&format!("{l},{j},{},{}\n", v.max_norm(), (sq / n as f64).sqrt()));
        }
    }
    s
}
