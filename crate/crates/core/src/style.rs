//! Fourier-domain style transfer between a warped atlas and a target image.
//!
//! The output keeps the phase spectrum of the warped atlas (its anatomy) and
//! mixes the amplitude spectra (appearance). With the phase fixed the mix is
//! linear in the strength `beta`, so one pair of spectra serves every beta:
//! `out = base + beta * delta`. The weighted variant picks beta per voxel
//! from a confidence map, damping the style where registration is unreliable.

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;
use std::sync::Arc;

use crate::error::{check_dims, Error, Result};
use crate::volume::{Dims, Spacing, Volume};

/// Default number of confidence bins.
pub const DEFAULT_BINS: usize = 10;
/// Largest tolerated imaginary residual relative to the real part (RMS).
pub const IMAG_TOLERANCE: f64 = 1e-3;

/// Complex 3D spectrum in x-fastest order.
#[derive(Clone, Debug)]
pub struct Spectrum {
    dims: Dims,
    spacing: Spacing,
    data: Vec<Complex64>,
}

impl Spectrum {
    /// Spectrum from polar form.
    pub fn from_polar(dims: Dims, spacing: Spacing, amplitude: &[f64], phase: &[f64]) -> Result<Self> {
        if amplitude.len() != dims.len() || phase.len() != dims.len() {
            return Err(Error::LengthMismatch(dims.len(), amplitude.len().min(phase.len())));
        }
        let data = amplitude.iter().zip(phase).map(|(a, p)| Complex64::from_polar(*a, *p)).collect();
        Ok(Self { dims, spacing, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Phase in `(-pi, pi]`.
    pub fn phase(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.arg()).collect()
    }
}

/// In-place DFT along every axis with unnormalized forward transforms.
fn transform(data: &mut [Complex64], dims: Dims, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let [nx, ny, nz] = dims.as_array();
    let plan = |n: usize, planner: &mut FftPlanner<f64>| -> Arc<dyn Fft<f64>> {
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    };
    // x lines are contiguous.
    let fx = plan(nx, &mut planner);
    data.par_chunks_mut(nx).for_each(|line| fx.process(line));
    // y and z lines are gathered per z-slice / per x-y column.
    let fy = plan(ny, &mut planner);
    data.par_chunks_mut(nx * ny).for_each(|slice| {
        let mut line = vec![Complex64::default(); ny];
        for x in 0..nx {
            for y in 0..ny {
                line[y] = slice[x + nx * y];
            }
            fy.process(&mut line);
            for y in 0..ny {
                slice[x + nx * y] = line[y];
            }
        }
    });
    if nz > 1 {
        let fz = plan(nz, &mut planner);
        let plane = nx * ny;
        let columns: Vec<Vec<Complex64>> = (0..plane)
            .into_par_iter()
            .map(|c| {
                let mut line: Vec<Complex64> = (0..nz).map(|z| data[c + plane * z]).collect();
                fz.process(&mut line);
                line
            })
            .collect();
        for (c, line) in columns.iter().enumerate() {
            for (z, v) in line.iter().enumerate() {
                data[c + plane * z] = *v;
            }
        }
    }
    if inverse {
        let scale = 1.0 / dims.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Forward transform of a real volume. The result is made exactly
/// Hermitian, so phases at `k` and `-k` cancel even where the coefficient is
/// only roundoff; otherwise such phases leak an imaginary part into any
/// spectrum rebuilt from them.
pub fn fft3(vol: &Volume) -> Spectrum {
    let dims = vol.dims();
    let mut data: Vec<Complex64> = vol.data().iter().map(|v| Complex64::new(*v, 0.0)).collect();
    transform(&mut data, dims, false);
    let [nx, ny, nz] = dims.as_array();
    let sym = (0..data.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let j = dims.index((nx - x) % nx, (ny - y) % ny, (nz - z) % nz);
            if i == j {
                Complex64::new(data[i].re, 0.0)
            } else {
                (data[i] + data[j].conj()) * 0.5
            }
        })
        .collect();
    Spectrum { dims, spacing: vol.spacing(), data: sym }
}

/// Inverse transform, full complex result.
pub fn ifft3_complex(spec: &Spectrum) -> Vec<Complex64> {
    let mut data = spec.data.clone();
    transform(&mut data, spec.dims, true);
    data
}

/// Inverse transform, real part.
pub fn ifft3(spec: &Spectrum) -> Volume {
    let data = ifft3_complex(spec).iter().map(|c| c.re).collect();
    Volume::from_raw(spec.dims, spec.spacing, data)
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

/// Precomputed style mix for one (warped atlas, target) pair:
/// `ist(beta) = base + beta * delta`, real parts of
/// `ifft(A_a e^{iP_a})` and `ifft((A_u - A_a) e^{iP_a})`.
#[derive(Clone, Debug)]
pub struct StyleMixer {
    dims: Dims,
    spacing: Spacing,
    base: Vec<f64>,
    delta: Vec<f64>,
    base_imag_rms: f64,
    delta_imag_rms: f64,
}

impl StyleMixer {
    pub fn new(warped_atlas: &Volume, unlabeled: &Volume) -> Result<Self> {
        check_dims(warped_atlas.dims(), unlabeled.dims())?;
        let fa = fft3(warped_atlas);
        let fu = fft3(unlabeled);
        let delta_spec: Vec<Complex64> = fa
            .data
            .iter()
            .zip(&fu.data)
            .map(|(a, u)| Complex64::from_polar(u.norm() - a.norm(), a.arg()))
            .collect();
        let base_c = ifft3_complex(&Spectrum { data: fa.data.iter().map(|a| Complex64::from_polar(a.norm(), a.arg())).collect(), ..fa.clone() });
        let delta_c = ifft3_complex(&Spectrum { data: delta_spec, ..fa });
        Ok(Self {
            dims: warped_atlas.dims(),
            spacing: warped_atlas.spacing(),
            base_imag_rms: rms(base_c.iter().map(|c| c.im)),
            delta_imag_rms: rms(delta_c.iter().map(|c| c.im)),
            base: base_c.iter().map(|c| c.re).collect(),
            delta: delta_c.iter().map(|c| c.re).collect(),
        })
    }

    /// One voxel of the mixed image.
    #[inline]
    fn mix_at(&self, i: usize, beta: f64) -> f64 {
        self.base[i] + beta * self.delta[i]
    }

    fn check_beta(beta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!("beta must be in [0, 1], got {beta}")));
        }
        Ok(())
    }

    /// Reject mixes whose discarded imaginary part is not negligible.
    fn check_imag(&self, beta: f64, real_rms: f64) -> Result<()> {
        let imag = self.base_imag_rms + beta * self.delta_imag_rms;
        if imag > IMAG_TOLERANCE * real_rms.max(f64::MIN_POSITIVE) {
            return Err(Error::NonFinite(format!(
                "style mix has imaginary residual {imag:e} against real RMS {real_rms:e}"
            )));
        }
        Ok(())
    }

    pub fn ist(&self, beta: f64) -> Result<Volume> {
        Self::check_beta(beta)?;
        let data: Vec<f64> = (0..self.base.len()).map(|i| self.mix_at(i, beta)).collect();
        self.check_imag(beta, rms(data.iter().copied()))?;
        Ok(Volume::from_raw(self.dims, self.spacing, data))
    }

    /// Per-voxel mix with the beta of each voxel's bin.
    pub fn weighted(&self, masks: &BinMasks, betas: &[f64]) -> Result<Volume> {
        check_dims(self.dims, masks.dims)?;
        if betas.len() != masks.bins {
            return Err(Error::LengthMismatch(masks.bins, betas.len()));
        }
        for &b in betas {
            Self::check_beta(b)?;
        }
        let data: Vec<f64> = masks.assignment.iter().enumerate().map(|(i, &n)| self.mix_at(i, betas[n as usize])).collect();
        let real_rms = rms(data.iter().copied());
        for &b in betas {
            self.check_imag(b, real_rms)?;
        }
        Ok(Volume::from_raw(self.dims, self.spacing, data))
    }
}

/// Image-aligned style transfer with strength `beta`.
pub fn ist(warped_atlas: &Volume, unlabeled: &Volume, beta: f64) -> Result<Volume> {
    StyleMixer::check_beta(beta)?;
    StyleMixer::new(warped_atlas, unlabeled)?.ist(beta)
}

/// Partition of the voxels into `bins` confidence bands.
#[derive(Clone, Debug, PartialEq)]
pub struct BinMasks {
    dims: Dims,
    spacing: Spacing,
    bins: usize,
    assignment: Vec<u16>,
}

impl BinMasks {
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Bin index of every voxel.
    pub fn assignment(&self) -> &[u16] {
        &self.assignment
    }

    /// Binary mask of bin `n`.
    pub fn mask(&self, n: usize) -> Volume {
        let data = self.assignment.iter().map(|&b| (b as usize == n) as u8 as f64).collect();
        Volume::from_raw(self.dims, self.spacing, data)
    }

    pub fn count(&self, n: usize) -> usize {
        self.assignment.iter().filter(|&&b| b as usize == n).count()
    }
}

/// Bin `n` holds `n/N <= C < (n+1)/N`; `C = 1` goes to the top bin.
pub fn confidence_bins(confidence: &Volume, bins: usize) -> Result<BinMasks> {
    if bins == 0 || bins > u16::MAX as usize {
        return Err(Error::invalid(format!("bin count must be in 1..={}, got {bins}", u16::MAX)));
    }
    let nf = bins as f64;
    let mut assignment = Vec::with_capacity(confidence.data().len());
    for &c in confidence.data() {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence must be in [0, 1], got {c}")));
        }
        // floor(C N) can be off by one through rounding; settle against the
        // exact bin edges.
        let mut n = ((c * nf).floor() as usize).min(bins - 1);
        while n > 0 && n as f64 / nf > c {
            n -= 1;
        }
        while n + 1 < bins && (n + 1) as f64 / nf <= c {
            n += 1;
        }
        assignment.push(n as u16);
    }
    Ok(BinMasks { dims: confidence.dims(), spacing: confidence.spacing(), bins, assignment })
}

/// Draw `beta_n ~ U[n/N, (n+1)/N)` in ascending bin order.
pub fn draw_betas(bins: usize, rng: &mut impl Rng) -> Vec<f64> {
    let nf = bins as f64;
    (0..bins).map(|n| rng.gen_range(n as f64 / nf..(n + 1) as f64 / nf)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct WistOutput {
    #[serde(skip)]
    pub image: Volume,
    pub betas: Vec<f64>,
}

/// Weighted style transfer: each confidence bin gets its own strength.
pub fn wist(warped_atlas: &Volume, unlabeled: &Volume, confidence: &Volume, bins: usize, rng: &mut impl Rng) -> Result<WistOutput> {
    check_dims(warped_atlas.dims(), confidence.dims())?;
    let masks = confidence_bins(confidence, bins)?;
    let betas = draw_betas(bins, rng);
    let mixer = StyleMixer::new(warped_atlas, unlabeled)?;
    let image = mixer.weighted(&masks, &betas)?;
    Ok(WistOutput { image, betas })
}
