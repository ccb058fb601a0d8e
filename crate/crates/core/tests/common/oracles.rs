//! Independent reference computations.

use std::collections::HashSet;

use super::rng;
use mirrorseg::{Dims, DisplacementField, LabelVolume, Volume};
use rand::Rng;

/// Random blobby mask: a few balls of random classes painted in order.
pub fn random_mask(dims: Dims, k: u16, seed: u64, spacing: [f64; 3]) -> LabelVolume {
    let mut r = rng(seed);
    let balls: Vec<([f64; 3], f64, u16)> = (0..5)
        .map(|_| ([r.gen_range(0.0..12.0), r.gen_range(0.0..12.0), r.gen_range(0.0..12.0)], r.gen_range(1.5..4.5), r.gen_range(1..k)))
        .collect();
    let mut data = vec![0u16; dims.len()];
    for (i, v) in data.iter_mut().enumerate() {
        let (x, y, z) = dims.coords(i);
        for (c, rad, l) in &balls {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
            if d2 <= rad * rad {
                *v = *l;
            }
        }
    }
    LabelVolume::new(dims, spacing, k as usize, data).unwrap()
}

pub fn brute_dice(a: &LabelVolume, b: &LabelVolume, class: u16) -> f64 {
    let sa: HashSet<usize> = (0..a.data().len()).filter(|&i| a.data()[i] == class).collect();
    let sb: HashSet<usize> = (0..b.data().len()).filter(|&i| b.data()[i] == class).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

pub fn brute_surface(l: &LabelVolume, class: u16) -> Vec<[i64; 3]> {
    let d = l.dims();
    let n = [d.nx as i64, d.ny as i64, d.nz as i64];
    let inside = |p: [i64; 3]| (0..3).all(|a| p[a] >= 0 && p[a] < n[a]);
    let member = |p: [i64; 3]| inside(p) && l.get(p[0] as usize, p[1] as usize, p[2] as usize) == class;
    let offsets = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    let mut out = Vec::new();
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        let p = [x as i64, y as i64, z as i64];
        if member(p) && offsets.iter().any(|o| !member([p[0] + o[0], p[1] + o[1], p[2] + o[2]])) {
            out.push(p);
        }
    }
    out
}

pub fn brute_directed(a: &[[i64; 3]], b: &[[i64; 3]], s: [f64; 3]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (0..3).map(|i| ((p[i] - q[i]) as f64 * s[i]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Voxels whose sample chains never touch the clamped border: the second
/// sample lands inside and every corner it reads was sampled inside.
pub fn unclamped(dims: Dims, phi1: &DisplacementField, phi2: &DisplacementField) -> Vec<bool> {
    let n = dims.as_array();
    let inside = |p: [f64; 3]| (0..3).all(|a| p[a] >= 0.0 && p[a] <= (n[a] - 1) as f64);
    let target = |phi: &DisplacementField, i: usize| {
        let (x, y, z) = dims.coords(i);
        let o = phi.at(i);
        [x as f64 + o[0], y as f64 + o[1], z as f64 + o[2]]
    };
    let first: Vec<bool> = (0..dims.len()).map(|i| inside(target(phi1, i))).collect();
    (0..dims.len())
        .map(|i| {
            let q = target(phi2, i);
            if !inside(q) {
                return false;
            }
            let lo = q.map(|c| c.floor() as usize);
            (0..8).all(|k| {
                let c = [0, 1, 2].map(|a| (lo[a] + (k >> a & 1)).min(n[a] - 1));
                first[dims.index(c[0], c[1], c[2])]
            })
        })
        .collect()
}

fn population_sigma(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Error map `[0 x 8, 1, w]` with `w` chosen by bisection so that
/// `w = k * sigma`.
pub fn map_with_multiple_of_sigma(k: f64) -> (Volume, usize) {
    let build = |w: f64| {
        let mut v = vec![0.0; 8];
        v.extend([1.0, w]);
        v
    };
    let (mut lo, mut hi) = (0.0, 3.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if population_sigma(&build(mid)) * k > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (Volume::new(Dims::new(10, 1, 1), [1.0; 3], build(lo)).unwrap(), 9)
}

/// Area under the ROC curve of `scores` for the positives `pos`
/// (Mann-Whitney rank statistic with tied ranks averaged).
pub fn auc(scores: &[f64], pos: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    let np = pos.iter().filter(|p| **p).count() as f64;
    let nn = pos.len() as f64 - np;
    let rank_sum: f64 = ranks.iter().zip(pos).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Little-endian NIfTI-1 single file built byte by byte.
pub fn nifti(dims: [i16; 3], datatype: i16, bitpix: i16, slope: f32, inter: f32, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (a, n) in dims.iter().enumerate() {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&n.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    for (a, s) in [0.9f32, 1.1, 2.5].iter().enumerate() {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&s.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}
