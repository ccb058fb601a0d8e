//! Separable line filters on x-fastest grids: clamp-padded box sums (and
//! their exact adjoint) and Gaussian smoothing.

use rayon::prelude::*;

use crate::volume::Dims;

/// Apply `op(input_line, output_line)` to every line parallel to `axis`.
fn for_each_line<F>(data: &[f64], dims: Dims, axis: usize, op: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let [nx, ny, nz] = dims.as_array();
    let n = dims.as_array()[axis];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    // lines grouped by z-slice for axes 0 and 1, by y-row for axis 2
    let (outer, inner) = match axis {
        0 => (nz, ny),
        1 => (nz, nx),
        _ => (ny, nx),
    };
    let starts: Vec<Vec<usize>> = (0..outer)
        .map(|o| {
            (0..inner)
                .map(|i| match axis {
                    0 => dims.index(0, i, o),
                    1 => dims.index(i, 0, o),
                    _ => dims.index(i, o, 0),
                })
                .collect()
        })
        .collect();
    let lines: Vec<Vec<(usize, Vec<f64>)>> = starts
        .par_iter()
        .map(|group| {
            let mut src = vec![0.0; n];
            group
                .iter()
                .map(|&s| {
                    for (k, v) in src.iter_mut().enumerate() {
                        *v = data[s + k * stride];
                    }
                    let mut dst = vec![0.0; n];
                    op(&src, &mut dst);
                    (s, dst)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; data.len()];
    for group in lines {
        for (s, dst) in group {
            for (k, v) in dst.into_iter().enumerate() {
                out[s + k * stride] = v;
            }
        }
    }
    out
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// `out[c] = sum_{o=-r..=r} src[clamp(c + o)]`.
fn box_line(src: &[f64], dst: &mut [f64], r: usize) {
    let n = src.len();
    let w = 2 * r + 1;
    // prefix sums over the replicated-edge extension of `src`
    let mut prefix = Vec::with_capacity(n + w);
    prefix.push(0.0);
    let mut acc = 0.0;
    for k in 0..n + 2 * r {
        acc += src[clamp_index(k as isize - r as isize, n)];
        prefix.push(acc);
    }
    for c in 0..n {
        dst[c] = prefix[c + w] - prefix[c];
    }
}

/// Adjoint of [`box_line`]: scatter each `src[c]` onto the samples its window read.
fn box_line_adjoint(src: &[f64], dst: &mut [f64], r: usize) {
    let n = src.len();
    dst.iter_mut().for_each(|v| *v = 0.0);
    for (c, &s) in src.iter().enumerate() {
        for o in -(r as isize)..=(r as isize) {
            dst[clamp_index(c as isize + o, n)] += s;
        }
    }
}

/// Clamp-padded cubic box sum of side `2r + 1`, one window per voxel.
pub fn box_sum(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let a = for_each_line(data, dims, 0, |s, d| box_line(s, d, r));
    let b = for_each_line(&a, dims, 1, |s, d| box_line(s, d, r));
    for_each_line(&b, dims, 2, |s, d| box_line(s, d, r))
}

/// Exact adjoint of [`box_sum`].
pub fn box_sum_adjoint(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let a = for_each_line(data, dims, 2, |s, d| box_line_adjoint(s, d, r));
    let b = for_each_line(&a, dims, 1, |s, d| box_line_adjoint(s, d, r));
    for_each_line(&b, dims, 0, |s, d| box_line_adjoint(s, d, r))
}

/// Normalized Gaussian taps for `sigma` (in voxels), truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_line(src: &[f64], dst: &mut [f64], kernel: &[f64]) {
    let n = src.len();
    let r = (kernel.len() / 2) as isize;
    for c in 0..n {
        let mut acc = 0.0;
        for (t, &w) in kernel.iter().enumerate() {
            acc += w * src[clamp_index(c as isize + t as isize - r, n)];
        }
        dst[c] = acc;
    }
}

/// Separable Gaussian smoothing with clamp-to-edge; `sigma <= 0` is a copy.
pub fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let a = for_each_line(data, dims, 0, |s, d| convolve_line(s, d, &k));
    let b = for_each_line(&a, dims, 1, |s, d| convolve_line(s, d, &k));
    for_each_line(&b, dims, 2, |s, d| convolve_line(s, d, &k))
}
