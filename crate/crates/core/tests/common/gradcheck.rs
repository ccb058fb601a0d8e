//! Analytic gradients against central finite differences. Each function
//! returns the worst relative error over its probes.

use super::{central_diff, probe_indices, random_prob, rel_err, rng, smooth_field, smooth_volume};
use mirrorseg::objectives::{
    cgd_loss, dice_loss, nlcc_loss, reg_objective, seg_objective, smoothness_loss, weak_loss, RegTerms, WeakInputs,
};
use mirrorseg::segmenter::{batch_loss_and_grad, params_of, with_params, TrainItem, VoxelNet};
use mirrorseg::{Dims, DisplacementField, ProbVolume, Volume};
use rand::Rng;

pub const TOL: f64 = 1e-3;

/// Worst relative error of `grad` against central differences of `f` at
/// the probed coordinates. Entries far below the gradient's scale are
/// compared against that scale instead of themselves.
pub fn check(x: &[f64], grad: &[f64], probes: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let floor = 1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut x = x.to_vec();
    probes
        .iter()
        .map(|&i| {
            let numeric = central_diff(&mut x, i, h, &mut f);
            rel_err(grad[i], numeric, floor)
        })
        .fold(0.0, f64::max)
}

pub fn noisy(dims: Dims, seed: u64) -> Volume {
    let base = smooth_volume(dims, seed);
    let mut r = rng(seed ^ 0xabc);
    Volume::new(dims, [1.0; 3], base.data().iter().map(|v| v + r.gen_range(-0.3..0.3)).collect()).unwrap()
}

pub fn nlcc(window: usize) -> f64 {
    let dims = Dims::new(12, 13, 14);
    let a = noisy(dims, 1);
    let b = noisy(dims, 2);
    let g = nlcc_loss(&a, &b, window).unwrap().grad.unwrap();
    let probes = probe_indices(dims.len(), 40, window as u64);
    check(a.data(), &g, &probes, 1e-3, |x| nlcc_loss(&Volume::new(dims, [1.0; 3], x.to_vec()).unwrap(), &b, window).unwrap().value)
}

fn field_from(dims: Dims, x: &[f64]) -> DisplacementField {
    let n = dims.len();
    DisplacementField::new(dims, [1.0; 3], [x[..n].to_vec(), x[n..2 * n].to_vec(), x[2 * n..].to_vec()]).unwrap()
}

fn flat(phi: &DisplacementField) -> Vec<f64> {
    phi.components().iter().flatten().copied().collect()
}

pub fn smoothness() -> f64 {
    let dims = Dims::cube(12);
    let phi = smooth_field(dims, 2.0, 4);
    let x = flat(&phi);
    let g = smoothness_loss(&phi).grad.unwrap();
    let probes = probe_indices(x.len(), 60, 5);
    check(&x, &g, &probes, 1e-3, |x| smoothness_loss(&field_from(dims, x)).value)
}

/// Probability entries: the step stays inside the channel-sum tolerance.
const PROB_STEP: f64 = 1e-5;

fn prob_from(dims: Dims, k: usize, x: &[f64]) -> ProbVolume {
    ProbVolume::new(dims, [1.0; 3], k, x.to_vec()).unwrap()
}

fn confidence(dims: Dims, seed: u64) -> Volume {
    let mut r = rng(seed);
    Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn soft_dice() -> f64 {
    let dims = Dims::cube(12);
    let p = random_prob(dims, 3, 1);
    let q = random_prob(dims, 3, 2);
    let g = dice_loss(&p, &q).unwrap().grad.unwrap();
    let probes = probe_indices(p.data().len(), 60, 3);
    check(p.data(), &g, &probes, PROB_STEP, |x| dice_loss(&prob_from(dims, 3, x), &q).unwrap().value)
}

pub fn weighted_dice() -> f64 {
    let dims = Dims::cube(12);
    let p = random_prob(dims, 4, 5);
    let q = random_prob(dims, 4, 6);
    let c = confidence(dims, 7);
    let g = cgd_loss(&c, &p, &q).unwrap().grad.unwrap();
    let probes = probe_indices(p.data().len(), 60, 8);
    check(p.data(), &g, &probes, PROB_STEP, |x| cgd_loss(&c, &prob_from(dims, 4, x), &q).unwrap().value)
}

pub fn weak() -> f64 {
    let dims = Dims::cube(12);
    let p = random_prob(dims, 3, 9);
    let q = random_prob(dims, 3, 10);
    let g = weak_loss(&p, &q).unwrap().grad.unwrap();
    let probes = probe_indices(p.data().len(), 60, 11);
    check(p.data(), &g, &probes, PROB_STEP, |x| weak_loss(&prob_from(dims, 3, x), &q).unwrap().value)
}

pub fn seg_total() -> f64 {
    let dims = Dims::cube(12);
    let p = random_prob(dims, 3, 12);
    let target = random_prob(dims, 3, 13);
    let pseudo = random_prob(dims, 3, 14);
    let c = confidence(dims, 15);
    let total = |p: &ProbVolume| seg_objective(&dice_loss(p, &target).unwrap(), &cgd_loss(&c, p, &pseudo).unwrap(), 0.5).unwrap();
    let g = total(&p).grad.unwrap();
    let probes = probe_indices(p.data().len(), 60, 16);
    check(p.data(), &g, &probes, PROB_STEP, |x| total(&prob_from(dims, 3, x)).value)
}

/// Coordinates whose sample position stays clear of trilinear cell
/// boundaries and the border while stepping by `h`.
fn smooth_probes(dims: Dims, phi: &DisplacementField, h: f64, count: usize, seed: u64) -> Vec<usize> {
    let n = dims.len();
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let j = r.gen_range(0..3 * n);
        let (c, i) = (j / n, j % n);
        let (x, y, z) = dims.coords(i);
        let pos = [x, y, z][c] as f64 + phi.component(c)[i];
        let frac = pos - pos.floor();
        let limit = (dims.as_array()[c] - 1) as f64;
        if frac > 4.0 * h && frac < 1.0 - 4.0 * h && pos > 0.0 && pos < limit {
            out.push(j);
        }
    }
    out
}

/// Registration objective for the step `iter` with the given term weights.
pub fn registration(iter: usize, lambda_smo: f64, lambda_weak: f64) -> f64 {
    let dims = Dims::cube(16);
    let moving = noisy(dims, 20);
    let fixed = noisy(dims, 21);
    let labels = random_prob(dims, 3, 22);
    let pred = random_prob(dims, 3, 23);
    let phi = smooth_field(dims, 1.7, 24);
    let x = flat(&phi);
    let h = 1e-4;
    let probes = smooth_probes(dims, &phi, h, 60, 25);
    let terms = RegTerms {
        moving: &moving,
        fixed: &fixed,
        window: 5,
        lambda_smo,
        lambda_weak,
        weak: Some(WeakInputs { moving_labels: &labels, fixed_pred: &pred }),
        window_weights: None,
    };
    let g = flat(&reg_objective(iter, &terms, &phi).unwrap().grad);
    check(&x, &g, &probes, h, |x| reg_objective(iter, &terms, &field_from(dims, x)).unwrap().total)
}

/// Only the weak term: identical flat images make the similarity term
/// constant.
pub fn weak_through_warp() -> f64 {
    let dims = Dims::cube(16);
    let flat_img = Volume::zeros(dims);
    let labels = random_prob(dims, 3, 30);
    let pred = random_prob(dims, 3, 31);
    let phi = smooth_field(dims, 2.0, 32);
    let terms = RegTerms {
        moving: &flat_img,
        fixed: &flat_img,
        window: 9,
        lambda_smo: 0.0,
        lambda_weak: 1.0,
        weak: Some(WeakInputs { moving_labels: &labels, fixed_pred: &pred }),
        window_weights: None,
    };
    let x = flat(&phi);
    let h = 1e-4;
    let g = flat(&reg_objective(1, &terms, &phi).unwrap().grad);
    let probes = smooth_probes(dims, &phi, h, 80, 33);
    check(&x, &g, &probes, h, |x| reg_objective(1, &terms, &field_from(dims, x)).unwrap().weak)
}

/// Every MLP parameter on a 6-voxel batch.
pub fn mlp(weighted: bool, background: bool) -> f64 {
    let dims = Dims::new(6, 5, 4);
    let image = noisy(dims, 40);
    let target = random_prob(dims, 3, 41).hardened();
    let item = TrainItem { image, target, confidence: Some(confidence(dims, 42)) };
    let net = VoxelNet::new(3, 8, 43).unwrap();
    // Non-zero output layer so every parameter block has signal.
    let mut params = params_of(&net);
    let mut r = rng(44);
    params.iter_mut().for_each(|p| *p += r.gen_range(-0.3..0.3));
    let net = with_params(&net, &params).unwrap();
    let voxels = [0, 7, 31, 64, 90, 119];
    let items = [item];
    let (_, g) = batch_loss_and_grad(&net, &items, &voxels, weighted, background).unwrap();
    let probes: Vec<usize> = (0..params.len()).collect();
    check(&params, &g, &probes, 1e-5, |x| {
        batch_loss_and_grad(&with_params(&net, x).unwrap(), &items, &voxels, weighted, background).unwrap().0
    })
}
