//! Registration error perception from mirrored registration.
//!
//! The pair is registered once as given (`phi`) and once with both images
//! mirrored (`phi_prime`). Mapping `phi_prime` back through the mirror gives
//! `Phi`, which a mirror-consistent registration would make equal to `phi`.
//! Their disagreement is the error map, converted to a confidence map by a
//! Gaussian transfer function.

use serde::Serialize;

use crate::error::{check_dims, Error, Result};
use crate::registration::{register, RegConfig, WeakLabels};
use crate::volume::{build_mirror_field, compose_tracked, DisplacementField, Mirror, Volume};

/// Below this spread the error map is treated as constant.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ConfidencePack {
    pub phi: DisplacementField,
    pub phi_prime: DisplacementField,
    pub composite: DisplacementField,
    pub error: Volume,
    pub confidence: Volume,
    pub sigma: f64,
    /// False where building `composite` had to clamp a sample at the border.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerceptionSummary {
    pub sigma: f64,
    pub mean_error: f64,
    pub max_error: f64,
    pub mean_confidence: f64,
    pub invalid_voxels: usize,
}

impl ConfidencePack {
    pub fn summary(&self) -> PerceptionSummary {
        let e = self.error.data();
        PerceptionSummary {
            sigma: self.sigma,
            mean_error: self.error.mean(),
            max_error: e.iter().copied().fold(0.0, f64::max),
            mean_confidence: self.confidence.mean(),
            invalid_voxels: self.valid.iter().filter(|v| !**v).count(),
        }
    }
}

/// `Phi = phi_mirr + (phi' + phi_mirr o phi') o phi_mirr`, with the border
/// validity of both compositions.
pub fn composite_mirror_field_tracked(phi_prime: &DisplacementField) -> Result<(DisplacementField, Vec<bool>)> {
    let mirr = build_mirror_field(phi_prime.dims(), phi_prime.spacing());
    let (inner, inner_valid) = compose_tracked(&mirr, phi_prime)?;
    let (outer, outer_valid) = compose_tracked(&inner, &mirr)?;
    // `outer` samples `inner` at the mirrored voxel, which is always on grid.
    let dims = phi_prime.dims();
    let valid = (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            outer_valid[i] && inner_valid[dims.index(dims.nx - 1 - x, y, z)]
        })
        .collect();
    Ok((outer, valid))
}

pub fn composite_mirror_field(phi_prime: &DisplacementField) -> Result<DisplacementField> {
    composite_mirror_field_tracked(phi_prime).map(|(f, _)| f)
}

/// `E(x) = |Phi(x) - phi(x)|` in voxels.
pub fn error_map(composite: &DisplacementField, phi: &DisplacementField) -> Result<Volume> {
    check_dims(composite.dims(), phi.dims())?;
    let data = (0..phi.dims().len())
        .map(|i| {
            let a = composite.at(i);
            let b = phi.at(i);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect();
    Volume::new(phi.dims(), phi.spacing(), data)
}

/// `C = exp(-E^2 / (2 sigma^2))` with `sigma` the population standard
/// deviation of `E`; `C = 1` everywhere when `sigma` is degenerate.
pub fn confidence_map(error: &Volume) -> Result<(Volume, f64)> {
    if let Some(v) = error.data().iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("error map must be non-negative, found {v}")));
    }
    let mean = error.mean();
    let n = error.data().len() as f64;
    let sigma = (error.data().iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sigma < SIGMA_FLOOR {
        return Ok((Volume::filled(error.dims(), error.spacing(), 1.0), sigma));
    }
    let denom = 2.0 * sigma * sigma;
    // Floored so errors hundreds of sigma out stay strictly positive instead of underflowing.
    Ok((error.map(|e| (-e * e / denom).exp().max(f64::MIN_POSITIVE)), sigma))
}

/// Register the pair in original and mirrored space and derive the error and
/// confidence maps. Both registrations use the same configuration; weak
/// labels, when given, are mirrored for the second one.
pub fn perceive(atlas: &Volume, unlabeled: &Volume, cfg: &RegConfig, weak: Option<WeakLabels<'_>>) -> Result<ConfidencePack> {
    check_dims(atlas.dims(), unlabeled.dims())?;
    let phi = register(atlas, unlabeled, cfg, weak).map_err(|e| e.in_stage("register"))?.phi;
    let mirrored_weak = weak.map(|w| (w.moving_labels.mirror(), w.fixed_pred.mirror()));
    let phi_prime = register(
        &atlas.mirror(),
        &unlabeled.mirror(),
        cfg,
        mirrored_weak.as_ref().map(|(m, f)| WeakLabels { moving_labels: m, fixed_pred: f }),
    )
    .map_err(|e| e.in_stage("register mirrored"))?
    .phi;
    let (composite, valid) = composite_mirror_field_tracked(&phi_prime)?;
    let error = error_map(&composite, &phi)?;
    let (confidence, sigma) = confidence_map(&error)?;
    Ok(ConfidencePack { phi, phi_prime, composite, error, confidence, sigma, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn zero_field_composite_is_zero() {
        let z = DisplacementField::zeros(Dims::new(7, 4, 3), [1.0; 3]);
        let (c, valid) = composite_mirror_field_tracked(&z).unwrap();
        assert!(c.components().iter().flatten().all(|v| *v == 0.0));
        assert!(valid.iter().all(|v| *v));
    }

    #[test]
    fn constant_shift_flips_sign() {
        let dims = Dims::new(12, 3, 3);
        let f = DisplacementField::constant(dims, [1.0; 3], [1.5, 0.0, 0.0]);
        let (c, valid) = composite_mirror_field_tracked(&f).unwrap();
        for i in 0..dims.len() {
            if valid[i] {
                assert!((c.at(i)[0] + 1.5).abs() < 1e-12);
            }
        }
        assert!(valid.iter().filter(|v| **v).count() > dims.len() / 2);
    }

    #[test]
    fn three_four_five() {
        let dims = Dims::new(2, 1, 1);
        let a = DisplacementField::constant(dims, [1.0; 3], [3.0, 4.0, 0.0]);
        let b = DisplacementField::zeros(dims, [1.0; 3]);
        assert_eq!(error_map(&a, &b).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn confidence_closed_forms() {
        let dims = Dims::new(2, 1, 1);
        let e = Volume::new(dims, [1.0; 3], vec![0.0, 2.0]).unwrap();
        let (c, sigma) = confidence_map(&e).unwrap();
        assert_eq!(sigma, 1.0);
        assert_eq!(c.data()[0], 1.0);
        assert!((c.data()[1] - (-2.0f64).exp()).abs() < 1e-15);
        let (c, _) = confidence_map(&Volume::zeros(dims)).unwrap();
        assert!(c.data().iter().all(|v| *v == 1.0));
    }
}
