//! Dense 3D grids, trilinear sampling, warping, mirroring and displacement
//! field composition.
//!
//! All grids are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Displacements are in voxel units and warping is a
//! pull-back: `out(x) = in(x + phi(x))`. Sampling clamps to the edge.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Physical voxel size in mm along x, y, z.
pub type Spacing = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let yz = i / self.nx;
        (x, yz % self.ny, yz / self.ny)
    }

    /// Voxels in one z-slice; the unit of parallel work.
    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::invalid(format!("dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

fn validate_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Fill `out` (one value per voxel) by evaluating `f` at every voxel, one
/// z-slice per task.
pub(crate) fn fill_voxels<T, F>(out: &mut [T], dims: Dims, f: F)
where
    T: Send,
    F: Fn(usize, usize, usize) -> T + Sync,
{
    debug_assert_eq!(out.len(), dims.len());
    out.par_chunks_mut(dims.slice_len())
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    slice[x + dims.nx * y] = f(x, y, z);
                }
            }
        });
}

/// Scalar volume: images, error maps, confidence maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        validate_spacing(spacing)?;
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch(data.len(), dims.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Self {
        Self { dims, spacing, data: vec![value; dims.len()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, [1.0; 3], 0.0)
    }

    pub fn from_fn<F>(dims: Dims, spacing: Spacing, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f64 + Sync,
    {
        let mut data = vec![0.0; dims.len()];
        fill_voxels(&mut data, dims, f);
        Self { dims, spacing, data }
    }

    pub(crate) fn from_raw(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume::from_raw(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Zero mean, unit (population) variance copy. Constant volumes map to zeros.
    pub fn standardized(&self) -> Volume {
        let mean = self.mean();
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.data.len() as f64;
        let sd = var.sqrt();
        if sd < 1e-12 {
            return self.map(|_| 0.0);
        }
        self.map(|v| (v - mean) / sd)
    }
}

/// Per-voxel class labels in `[0, num_classes)`; class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, num_classes: usize, data: Vec<u16>) -> Result<Self> {
        dims.validate()?;
        validate_spacing(spacing)?;
        if num_classes < 2 {
            return Err(Error::invalid("label volumes need at least 2 classes"));
        }
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch(data.len(), dims.len()));
        }
        if let Some(bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { dims, spacing, num_classes, data })
    }

    pub(crate) fn from_raw(dims: Dims, spacing: Spacing, num_classes: usize, data: Vec<u16>) -> Self {
        Self { dims, spacing, num_classes, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count(&self, class: u16) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    pub fn one_hot(&self) -> ProbVolume {
        let n = self.dims.len();
        let mut data = vec![0.0; n * self.num_classes];
        for (i, &l) in self.data.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        ProbVolume::from_raw(self.dims, self.spacing, self.num_classes, data)
    }
}

/// Per-voxel class probabilities; channel-major (`data[k * nvox + i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbVolume {
    pub const SUM_TOLERANCE: f64 = 1e-4;

    pub fn new(dims: Dims, spacing: Spacing, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        validate_spacing(spacing)?;
        let n = dims.len();
        if data.len() != n * num_classes {
            return Err(Error::LengthMismatch(data.len(), n * num_classes));
        }
        if data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        for i in 0..n {
            let s: f64 = (0..num_classes).map(|k| data[k * n + i]).sum();
            if (s - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::invalid(format!("channel sum {s} at voxel {i}")));
            }
        }
        Ok(Self { dims, spacing, num_classes, data })
    }

    pub(crate) fn from_raw(dims: Dims, spacing: Spacing, num_classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len() * num_classes);
        Self { dims, spacing, num_classes, data }
    }

    /// Uniform `1/K` everywhere.
    pub fn uniform(dims: Dims, spacing: Spacing, num_classes: usize) -> Self {
        Self::from_raw(dims, spacing, num_classes, vec![1.0 / num_classes as f64; dims.len() * num_classes])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.dims.len() + i]
    }

    /// Hard labels by argmax; ties resolve to the lower class.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.dims.len();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.num_classes {
                    if self.data[k * n + i] > self.data[best * n + i] {
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        LabelVolume::from_raw(self.dims, self.spacing, self.num_classes, labels)
    }

    /// One-hot encoding of the argmax.
    pub fn hardened(&self) -> ProbVolume {
        self.argmax().one_hot()
    }
}

/// Per-voxel displacement in voxel units, stored as three component blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: Spacing,
    comps: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: Spacing, comps: [Vec<f64>; 3]) -> Result<Self> {
        dims.validate()?;
        validate_spacing(spacing)?;
        for c in &comps {
            if c.len() != dims.len() {
                return Err(Error::LengthMismatch(c.len(), dims.len()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("displacement field".into()));
            }
        }
        Ok(Self { dims, spacing, comps })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        let n = dims.len();
        Self { dims, spacing, comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn constant(dims: Dims, spacing: Spacing, v: [f64; 3]) -> Self {
        let n = dims.len();
        Self { dims, spacing, comps: [vec![v[0]; n], vec![v[1]; n], vec![v[2]; n]] }
    }

    pub fn from_fn<F>(dims: Dims, spacing: Spacing, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> [f64; 3] + Sync,
    {
        let mut vecs = vec![[0.0; 3]; dims.len()];
        fill_voxels(&mut vecs, dims, f);
        Self::from_vectors(dims, spacing, &vecs)
    }

    pub(crate) fn from_raw(dims: Dims, spacing: Spacing, comps: [Vec<f64>; 3]) -> Self {
        Self { dims, spacing, comps }
    }

    fn from_vectors(dims: Dims, spacing: Spacing, vecs: &[[f64; 3]]) -> Self {
        let comps = [0, 1, 2].map(|c| vecs.iter().map(|v| v[c]).collect());
        Self { dims, spacing, comps }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.comps
    }

    pub fn components_mut(&mut self) -> &mut [Vec<f64>; 3] {
        &mut self.comps
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.comps
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    /// Per-voxel Euclidean length.
    pub fn magnitude(&self) -> Vec<f64> {
        (0..self.dims.len())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        let m = self.magnitude();
        m.iter().sum::<f64>() / m.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude().into_iter().fold(0.0, f64::max)
    }

    /// Mean per-voxel distance to `other` (endpoint error).
    pub fn mean_endpoint_error(&self, other: &DisplacementField) -> Result<f64> {
        check_dims(self.dims, other.dims)?;
        let n = self.dims.len();
        let total: f64 = (0..n)
            .map(|i| {
                let (a, b) = (self.at(i), other.at(i));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum();
        Ok(total / n as f64)
    }

    pub fn scaled(&self, s: f64) -> DisplacementField {
        let comps = [0, 1, 2].map(|c| self.comps[c].iter().map(|v| v * s).collect());
        Self::from_raw(self.dims, self.spacing, comps)
    }

    pub fn add(&self, other: &DisplacementField) -> Result<DisplacementField> {
        check_dims(self.dims, other.dims)?;
        let comps = [0, 1, 2].map(|c| {
            self.comps[c].iter().zip(&other.comps[c]).map(|(a, b)| a + b).collect()
        });
        Ok(Self::from_raw(self.dims, self.spacing, comps))
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Lower cell corner and fractional offset along one axis, clamp-to-edge.
#[inline]
fn axis_cell(p: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let hi = (n - 1) as f64;
    let pc = p.clamp(0.0, hi);
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64)
}

#[inline]
fn in_range(p: f64, n: usize) -> bool {
    n > 1 && p >= 0.0 && p <= (n - 1) as f64
}

/// Trilinear interpolation of raw x-fastest data at a continuous voxel point.
#[inline]
pub(crate) fn trilinear(data: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    let (x0, x1, tx) = axis_cell(p[0], dims.nx);
    let (y0, y1, ty) = axis_cell(p[1], dims.ny);
    let (z0, z1, tz) = axis_cell(p[2], dims.nz);
    let v = |x, y, z| data[dims.index(x, y, z)];
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    let c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), tx);
    let c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), tx);
    let c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), tx);
    let c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}

/// Trilinear value and its derivative with respect to the sample point.
/// The derivative along an axis is zero where that coordinate is clamped.
#[inline]
pub(crate) fn trilinear_grad(data: &[f64], dims: Dims, p: [f64; 3]) -> (f64, [f64; 3]) {
    let (x0, x1, tx) = axis_cell(p[0], dims.nx);
    let (y0, y1, ty) = axis_cell(p[1], dims.ny);
    let (z0, z1, tz) = axis_cell(p[2], dims.nz);
    let v = |x, y, z| data[dims.index(x, y, z)];
    let c = [
        [[v(x0, y0, z0), v(x0, y0, z1)], [v(x0, y1, z0), v(x0, y1, z1)]],
        [[v(x1, y0, z0), v(x1, y0, z1)], [v(x1, y1, z0), v(x1, y1, z1)]],
    ];
    let wx = [1.0 - tx, tx];
    let wy = [1.0 - ty, ty];
    let wz = [1.0 - tz, tz];
    let mut g = [0.0; 3];
    let sx = [-1.0, 1.0];
    for a in 0..2 {
        for b in 0..2 {
            for d in 0..2 {
                let cv = c[a][b][d];
                g[0] += sx[a] * wy[b] * wz[d] * cv;
                g[1] += wx[a] * sx[b] * wz[d] * cv;
                g[2] += wx[a] * wy[b] * sx[d] * cv;
            }
        }
    }
    if !in_range(p[0], dims.nx) {
        g[0] = 0.0;
    }
    if !in_range(p[1], dims.ny) {
        g[1] = 0.0;
    }
    if !in_range(p[2], dims.nz) {
        g[2] = 0.0;
    }
    (trilinear(data, dims, p), g)
}

/// Trilinear interpolation at a continuous voxel coordinate, clamp-to-edge.
pub fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> f64 {
    trilinear(&vol.data, vol.dims, p)
}

#[inline]
fn displaced(dims: Dims, phi: &DisplacementField, x: usize, y: usize, z: usize) -> [f64; 3] {
    let d = phi.at(dims.index(x, y, z));
    [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]
}

fn warp_raw(data: &[f64], dims: Dims, phi: &DisplacementField) -> Vec<f64> {
    let mut out = vec![0.0; dims.len()];
    fill_voxels(&mut out, dims, |x, y, z| trilinear(data, dims, displaced(dims, phi, x, y, z)));
    out
}

/// Pull-back warp: `out(x) = vol(x + phi(x))`.
pub fn warp(vol: &Volume, phi: &DisplacementField) -> Result<Volume> {
    check_dims(vol.dims, phi.dims)?;
    Ok(Volume::from_raw(vol.dims, vol.spacing, warp_raw(&vol.data, vol.dims, phi)))
}

/// Warped values plus the spatial gradient of the source at each sample point,
/// i.e. the derivative of the warped image with respect to `phi`.
pub(crate) fn warp_with_gradient(data: &[f64], dims: Dims, phi: &DisplacementField) -> (Vec<f64>, [Vec<f64>; 3]) {
    let mut packed = vec![(0.0, [0.0; 3]); dims.len()];
    fill_voxels(&mut packed, dims, |x, y, z| trilinear_grad(data, dims, displaced(dims, phi, x, y, z)));
    let values = packed.iter().map(|p| p.0).collect();
    let grads = [0, 1, 2].map(|c| packed.iter().map(|p| p.1[c]).collect());
    (values, grads)
}

const PROB_EPS: f64 = 1e-7;

/// Warp every channel, then renormalize so channels sum to one.
pub fn warp_prob(p: &ProbVolume, phi: &DisplacementField) -> Result<ProbVolume> {
    check_dims(p.dims, phi.dims)?;
    let n = p.dims.len();
    let k = p.num_classes;
    let mut data = Vec::with_capacity(n * k);
    for c in 0..k {
        data.extend(warp_raw(p.channel(c), p.dims, phi));
    }
    renormalize(&mut data, n, k);
    Ok(ProbVolume::from_raw(p.dims, p.spacing, k, data))
}

fn renormalize(data: &mut [f64], n: usize, k: usize) {
    for i in 0..n {
        let s: f64 = (0..k).map(|c| data[c * n + i]).sum();
        let s = s.max(PROB_EPS);
        for c in 0..k {
            data[c * n + i] /= s;
        }
    }
}

/// Warped probabilities with the pieces needed to backpropagate to `phi`:
/// the unnormalized channel sums and per-channel sampling gradients.
pub(crate) struct WarpedProb {
    pub probs: ProbVolume,
    pub sums: Vec<f64>,
    pub grads: Vec<[Vec<f64>; 3]>,
}

pub(crate) fn warp_prob_with_gradient(p: &ProbVolume, phi: &DisplacementField) -> Result<WarpedProb> {
    check_dims(p.dims, phi.dims)?;
    let n = p.dims.len();
    let k = p.num_classes;
    let mut data = Vec::with_capacity(n * k);
    let mut grads = Vec::with_capacity(k);
    for c in 0..k {
        let (v, g) = warp_with_gradient(p.channel(c), p.dims, phi);
        data.extend(v);
        grads.push(g);
    }
    let sums: Vec<f64> = (0..n).map(|i| (0..k).map(|c| data[c * n + i]).sum::<f64>().max(PROB_EPS)).collect();
    for c in 0..k {
        for i in 0..n {
            data[c * n + i] /= sums[i];
        }
    }
    Ok(WarpedProb { probs: ProbVolume::from_raw(p.dims, p.spacing, k, data), sums, grads })
}

/// Nearest-neighbour label warping.
pub fn warp_labels_nearest(labels: &LabelVolume, phi: &DisplacementField) -> Result<LabelVolume> {
    check_dims(labels.dims, phi.dims)?;
    let dims = labels.dims;
    let mut out = vec![0u16; dims.len()];
    fill_voxels(&mut out, dims, |x, y, z| {
        let p = displaced(dims, phi, x, y, z);
        let r = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
        labels.data[dims.index(r(p[0], dims.nx), r(p[1], dims.ny), r(p[2], dims.nz))]
    });
    Ok(LabelVolume::from_raw(dims, labels.spacing, labels.num_classes, out))
}

// ---------------------------------------------------------------------------
// Mirroring

/// Flip along the first (sagittal-normal) axis: `x -> nx - 1 - x`.
pub trait Mirror {
    fn mirror(&self) -> Self;
}

fn mirror_block<T: Copy>(src: &[T], dims: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            let row = dims.index(0, y, z);
            out.extend(src[row..row + dims.nx].iter().rev());
        }
    }
    out
}

impl Mirror for Volume {
    fn mirror(&self) -> Self {
        Volume::from_raw(self.dims, self.spacing, mirror_block(&self.data, self.dims))
    }
}

impl Mirror for LabelVolume {
    fn mirror(&self) -> Self {
        LabelVolume::from_raw(self.dims, self.spacing, self.num_classes, mirror_block(&self.data, self.dims))
    }
}

impl Mirror for ProbVolume {
    fn mirror(&self) -> Self {
        let data = (0..self.num_classes).flat_map(|k| mirror_block(self.channel(k), self.dims)).collect();
        ProbVolume::from_raw(self.dims, self.spacing, self.num_classes, data)
    }
}

impl Mirror for DisplacementField {
    /// Mirrored displacements point the mirrored way, so `dx` is negated.
    fn mirror(&self) -> Self {
        let mut dx = mirror_block(&self.comps[0], self.dims);
        dx.iter_mut().for_each(|v| *v = -*v);
        let dy = mirror_block(&self.comps[1], self.dims);
        let dz = mirror_block(&self.comps[2], self.dims);
        DisplacementField::from_raw(self.dims, self.spacing, [dx, dy, dz])
    }
}

/// The mirror as a pull-back field: `(nx - 1 - 2x, 0, 0)`.
pub fn build_mirror_field(dims: Dims, spacing: Spacing) -> DisplacementField {
    let nx = dims.nx as f64;
    DisplacementField::from_fn(dims, spacing, |x, _, _| [nx - 1.0 - 2.0 * x as f64, 0.0, 0.0])
}

// ---------------------------------------------------------------------------
// Composition

/// Single field equivalent to warping by `inner` and then by `outer`:
/// `out(x) = outer(x) + inner(x + outer(x))`.
pub fn compose(inner: &DisplacementField, outer: &DisplacementField) -> Result<DisplacementField> {
    compose_tracked(inner, outer).map(|(f, _)| f)
}

/// As [`compose`], also reporting for each voxel whether the resampling of
/// `inner` stayed inside the grid (no clamping).
pub fn compose_tracked(inner: &DisplacementField, outer: &DisplacementField) -> Result<(DisplacementField, Vec<bool>)> {
    check_dims(inner.dims, outer.dims)?;
    let dims = outer.dims;
    let mut packed = vec![([0.0; 3], true); dims.len()];
    fill_voxels(&mut packed, dims, |x, y, z| {
        let i = dims.index(x, y, z);
        let o = outer.at(i);
        let p = [x as f64 + o[0], y as f64 + o[1], z as f64 + o[2]];
        let inside = (0..3).all(|a| {
            let n = dims.as_array()[a];
            p[a] >= 0.0 && p[a] <= (n - 1) as f64
        });
        let v = [0, 1, 2].map(|c| o[c] + trilinear(&inner.comps[c], dims, p));
        (v, inside)
    });
    let valid = packed.iter().map(|p| p.1).collect();
    let vecs: Vec<[f64; 3]> = packed.into_iter().map(|p| p.0).collect();
    Ok((DisplacementField::from_vectors(dims, outer.spacing, &vecs), valid))
}
