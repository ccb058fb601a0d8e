//! Coarse-to-fine dense displacement field optimization.
//!
//! Each pyramid level runs first-order descent on the registration objective.
//! Gradients are RMS-normalized per parameter, Gaussian-smoothed, then applied.
//! The similarity term is evaluated on a seeded random subset of windows at
//! every step, so the optimizer is stochastic but reproducible per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::filter::gaussian_smooth;
use crate::objectives::{reg_objective, RegTerms, WeakInputs, NLCC_WINDOW};
use crate::optim::RmsScaler;
use crate::volume::{trilinear, Dims, DisplacementField, ProbVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub pyramid_levels: usize,
    pub steps_per_level: usize,
    /// Per-step displacement scale in voxels of the current level.
    pub step_size: f64,
    pub lambda_smo: f64,
    pub lambda_weak: f64,
    pub field_blur_sigma: f64,
    /// Similarity window side at the finest level.
    pub window: usize,
    /// Fraction of similarity windows drawn at each step (1 = all).
    pub window_fraction: f64,
    /// Final step size as a fraction of `step_size` (linear decay per level).
    pub final_step_fraction: f64,
    pub seed: u64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            steps_per_level: 150,
            step_size: 0.5,
            lambda_smo: 1.0,
            lambda_weak: 1.0,
            field_blur_sigma: 1.0,
            window: NLCC_WINDOW,
            window_fraction: 0.5,
            final_step_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::invalid("pyramid_levels must be >= 1"));
        }
        if !(self.step_size > 0.0) || !(self.field_blur_sigma > 0.0) {
            return Err(Error::invalid("step_size and field_blur_sigma must be positive"));
        }
        if self.lambda_smo < 0.0 || self.lambda_weak < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.window % 2 == 0 {
            return Err(Error::invalid("window must be odd"));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(Error::invalid("window_fraction must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.final_step_fraction) {
            return Err(Error::invalid("final_step_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    /// Similarity window used at pyramid `level` (0 = finest).
    pub fn window_at(&self, level: usize) -> usize {
        let mut w = self.window >> level;
        if w % 2 == 0 {
            w += 1;
        }
        w.max(3)
    }
}

/// One loss-trace row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub level: usize,
    pub total: f64,
    pub ic: f64,
    pub smo: f64,
    pub weak: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub phi: DisplacementField,
    pub loss_trace: Vec<TraceRow>,
    /// Relative loss change below 1e-5 over the last 10 steps.
    pub converged: bool,
}

impl RegistrationResult {
    pub const TRACE_HEADER: &'static str = "step,level,total,ic,smo,weak";

    pub fn trace_csv(&self) -> String {
        let mut s = String::from(Self::TRACE_HEADER);
        s.push('\n');
        for r in &self.loss_trace {
            s.push_str(&format!("{},{},{:.9},{:.9},{:.9},{:.9}\n", r.step, r.level, r.total, r.ic, r.smo, r.weak));
        }
        s
    }
}

/// Weak-supervision labels for registration from the second iteration on.
#[derive(Clone, Copy, Debug)]
pub struct WeakLabels<'a> {
    pub moving_labels: &'a ProbVolume,
    pub fixed_pred: &'a ProbVolume,
}

fn coarse_dims(d: Dims) -> Result<Dims> {
    if d.nx < 2 || d.ny < 2 || d.nz < 2 {
        return Err(Error::invalid(format!("cannot downsample {d}: every axis needs >= 2 voxels")));
    }
    Ok(Dims::new(d.nx.div_ceil(2), d.ny.div_ceil(2), d.nz.div_ceil(2)))
}

/// 2x average pooling of one x-fastest block; odd trailing cells average what exists.
fn pool(data: &[f64], dims: Dims, coarse: Dims) -> Vec<f64> {
    let mut out = vec![0.0; coarse.len()];
    for z in 0..coarse.nz {
        for y in 0..coarse.ny {
            for x in 0..coarse.nx {
                let mut s = 0.0;
                let mut c = 0usize;
                for zz in 2 * z..(2 * z + 2).min(dims.nz) {
                    for yy in 2 * y..(2 * y + 2).min(dims.ny) {
                        for xx in 2 * x..(2 * x + 2).min(dims.nx) {
                            s += data[dims.index(xx, yy, zz)];
                            c += 1;
                        }
                    }
                }
                out[coarse.index(x, y, z)] = s / c as f64;
            }
        }
    }
    out
}

fn coarse_spacing(s: [f64; 3]) -> [f64; 3] {
    s.map(|v| 2.0 * v)
}

/// Halve the resolution by 2x average pooling.
pub fn downsample(vol: &Volume) -> Result<Volume> {
    let coarse = coarse_dims(vol.dims())?;
    Ok(Volume::from_raw(coarse, coarse_spacing(vol.spacing()), pool(vol.data(), vol.dims(), coarse)))
}

/// Pooled vectors, halved to coarse voxel units.
pub fn downsample_field(phi: &DisplacementField) -> Result<DisplacementField> {
    let coarse = coarse_dims(phi.dims())?;
    let comps = [0, 1, 2].map(|c| pool(phi.component(c), phi.dims(), coarse).into_iter().map(|v| 0.5 * v).collect());
    Ok(DisplacementField::from_raw(coarse, coarse_spacing(phi.spacing()), comps))
}

pub fn downsample_prob(p: &ProbVolume) -> Result<ProbVolume> {
    let coarse = coarse_dims(p.dims())?;
    let data = (0..p.num_classes()).flat_map(|k| pool(p.channel(k), p.dims(), coarse)).collect();
    Ok(ProbVolume::from_raw(coarse, coarse_spacing(p.spacing()), p.num_classes(), data))
}

/// Trilinear (cell-centred) upsampling to `target` dims with vectors doubled.
pub fn upsample_field(phi: &DisplacementField, target: Dims) -> Result<DisplacementField> {
    target.validate()?;
    let src = phi.dims();
    let scale = [0, 1, 2].map(|a| src.as_array()[a] as f64 / target.as_array()[a] as f64);
    let mut spacing = phi.spacing();
    for a in 0..3 {
        spacing[a] *= scale[a];
    }
    let out = DisplacementField::from_fn(target, spacing, |x, y, z| {
        let pos = [x, y, z];
        let p = [0, 1, 2].map(|a| (pos[a] as f64 + 0.5) * scale[a] - 0.5);
        [0, 1, 2].map(|c| trilinear(phi.component(c), src, p) / scale[c])
    });
    Ok(out)
}

struct Level {
    moving: Volume,
    fixed: Volume,
    weak: Option<(ProbVolume, ProbVolume)>,
}

fn build_pyramid(moving: &Volume, fixed: &Volume, weak: Option<WeakLabels<'_>>, levels: usize) -> Result<Vec<Level>> {
    let mut out = vec![Level {
        moving: moving.clone(),
        fixed: fixed.clone(),
        weak: weak.map(|w| (w.moving_labels.clone(), w.fixed_pred.clone())),
    }];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let d = prev.moving.dims();
        if d.nx < 8 || d.ny < 8 || d.nz < 8 {
            break;
        }
        let weak = match &prev.weak {
            Some((m, f)) => Some((downsample_prob(m)?, downsample_prob(f)?)),
            None => None,
        };
        out.push(Level { moving: downsample(&prev.moving)?, fixed: downsample(&prev.fixed)?, weak });
    }
    Ok(out)
}

/// Register `moving` onto `fixed`: find `phi` with `warp(moving, phi) ~ fixed`.
///
/// When `weak` is given the weak-supervision term is active (second and
/// later training iterations).
pub fn register(moving: &Volume, fixed: &Volume, cfg: &RegConfig, weak: Option<WeakLabels<'_>>) -> Result<RegistrationResult> {
    cfg.validate()?;
    check_dims(moving.dims(), fixed.dims())?;
    if let Some(w) = weak {
        check_dims(moving.dims(), w.moving_labels.dims())?;
        check_dims(moving.dims(), w.fixed_pred.dims())?;
        if w.moving_labels.num_classes() != w.fixed_pred.num_classes() {
            return Err(Error::ClassMismatch { expected: w.moving_labels.num_classes(), found: w.fixed_pred.num_classes() });
        }
    }
    let iteration = weak.is_some() as usize;
    let pyramid = build_pyramid(moving, fixed, weak, cfg.pyramid_levels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(pyramid.len() * cfg.steps_per_level);
    let mut phi: Option<DisplacementField> = None;
    let mut step_index = 0;

    for (level, lv) in pyramid.iter().enumerate().rev() {
        let dims = lv.moving.dims();
        let mut field = match phi.take() {
            None => DisplacementField::zeros(dims, lv.moving.spacing()),
            Some(prev) => upsample_field(&prev, dims)?,
        };
        let base = RegTerms {
            moving: &lv.moving,
            fixed: &lv.fixed,
            window: cfg.window_at(level),
            lambda_smo: cfg.lambda_smo,
            lambda_weak: cfg.lambda_weak,
            weak: lv.weak.as_ref().map(|(m, f)| WeakInputs { moving_labels: m, fixed_pred: f }),
            window_weights: None,
        };
        let n = dims.len();
        let mut scaler = RmsScaler::new(3 * n);
        let mut weights = vec![0.0; n];
        let mut grad = vec![0.0; 3 * n];
        for step in 0..cfg.steps_per_level {
            let dropout = cfg.window_fraction < 1.0;
            if dropout {
                let keep = cfg.window_fraction;
                weights.iter_mut().for_each(|w| *w = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
            }
            let terms = RegTerms { window_weights: dropout.then_some(&weights[..]), ..base };
            let loss = reg_objective(iteration, &terms, &field).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at level {level}, step {step}")),
                other => other,
            })?;
            trace.push(TraceRow { step: step_index, level, total: loss.total, ic: loss.ic, smo: loss.smo, weak: loss.weak });
            step_index += 1;

            for c in 0..3 {
                grad[c * n..(c + 1) * n].copy_from_slice(loss.grad.component(c));
            }
            scaler.normalize(&mut grad);
            let progress = if cfg.steps_per_level > 1 { step as f64 / (cfg.steps_per_level - 1) as f64 } else { 0.0 };
            let lr = cfg.step_size * (1.0 - (1.0 - cfg.final_step_fraction) * progress);
            let comps = field.components_mut();
            for c in 0..3 {
                let smoothed = gaussian_smooth(&grad[c * n..(c + 1) * n], dims, cfg.field_blur_sigma);
                for (v, u) in comps[c].iter_mut().zip(&smoothed) {
                    *v -= lr * u;
                }
            }
        }
        phi = Some(field);
    }

    let phi = phi.expect("at least one level");
    let phi = DisplacementField::from_raw(phi.dims(), moving.spacing(), phi.into_components());
    if phi.components().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("registration field".into()));
    }
    let converged = trace.len() > 10 && {
        let last = trace[trace.len() - 1].total;
        let prev = trace[trace.len() - 11].total;
        (last - prev).abs() / prev.abs().max(1e-12) < 1e-5
    };
    Ok(RegistrationResult { phi, loss_trace: trace, converged })
}
