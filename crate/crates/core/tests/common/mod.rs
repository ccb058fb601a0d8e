#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use mirrorseg::phantom::{make_phantom, PhantomSpec};
use mirrorseg::{Dims, DisplacementField, LabelVolume, ProbVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sum of a few random low-frequency cosines, roughly unit scaled.
pub fn smooth_volume(dims: Dims, seed: u64) -> Volume {
    band_limited_volume(dims, seed, 2.0)
}

/// Random cosines with at most `cycles` periods across each axis.
pub fn band_limited_volume(dims: Dims, seed: u64, cycles: f64) -> Volume {
    let mut r = rng(seed);
    let lo = cycles / 4.0;
    let modes: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let f = [r.gen_range(lo..cycles), r.gen_range(lo..cycles), r.gen_range(lo..cycles)];
            (f, r.gen_range(0.0..6.28), r.gen_range(0.3..1.0))
        })
        .collect();
    let n = dims.as_array().map(|v| v as f64);
    Volume::from_fn(dims, [1.0; 3], |x, y, z| {
        let u = [x as f64 / n[0], y as f64 / n[1], z as f64 / n[2]];
        modes
            .iter()
            .map(|(f, ph, a)| a * (std::f64::consts::TAU * (f[0] * u[0] + f[1] * u[1] + f[2] * u[2]) + ph).cos())
            .sum()
    })
}

/// Smooth random field of Gaussian blobs with max magnitude `amp` voxels.
pub fn smooth_field(dims: Dims, amp: f64, seed: u64) -> DisplacementField {
    let mut r = rng(seed);
    let n = dims.as_array().map(|v| v as f64);
    let blobs: Vec<([f64; 3], f64, [f64; 3])> = (0..4)
        .map(|_| {
            let c = [r.gen_range(0.0..n[0]), r.gen_range(0.0..n[1]), r.gen_range(0.0..n[2])];
            let w = r.gen_range(0.25..0.4) * n[0].min(n[1]).min(n[2]);
            (c, w, [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        })
        .collect();
    let raw = DisplacementField::from_fn(dims, [1.0; 3], |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let mut v = [0.0; 3];
        for (c, w, d) in &blobs {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let g = (-r2 / (2.0 * w * w)).exp();
            for a in 0..3 {
                v[a] += g * d[a];
            }
        }
        v
    });
    let m = raw.max_magnitude();
    raw.scaled(if m > 0.0 { amp / m } else { 0.0 })
}

/// Random strictly positive probabilities.
pub fn random_prob(dims: Dims, k: usize, seed: u64) -> ProbVolume {
    let mut r = rng(seed);
    let n = dims.len();
    let mut data = vec![0.0; k * n];
    for i in 0..n {
        let w: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        for c in 0..k {
            data[c * n + i] = w[c] / s;
        }
    }
    ProbVolume::new(dims, [1.0; 3], k, data).unwrap()
}

pub fn random_labels(dims: Dims, k: usize, seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    LabelVolume::new(dims, [1.0; 3], k, (0..dims.len()).map(|_| r.gen_range(0..k as u16)).collect()).unwrap()
}

pub fn phantom(n: usize) -> mirrorseg::phantom::Phantom {
    make_phantom(&PhantomSpec { dims: Dims::cube(n), ..PhantomSpec::default() }).unwrap()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let a = f(x);
    x[i] = orig - h;
    let b = f(x);
    x[i] = orig;
    (a - b) / (2.0 * h)
}

/// Relative error with a floor that keeps near-zero entries meaningful.
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale)
}

/// Indices spread evenly over `0..n`.
pub fn probe_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..count).map(|_| r.gen_range(0..n)).collect()
}
