//! Differentiable losses: local correlation similarity, field smoothness,
//! soft and confidence-weighted Dice, and the composite registration and
//! segmentation objectives.

use crate::error::{check_dims, Error, Result};
use crate::filter::{box_sum, box_sum_adjoint};
use crate::volume::{warp_prob_with_gradient, warp_with_gradient, Dims, DisplacementField, ProbVolume, Volume};

/// Centered sums of squares below this make a correlation undefined (reported as 0).
pub const VARIANCE_EPS: f64 = 1e-5;
/// Additive smoothing in every Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Default local correlation window side.
pub const NLCC_WINDOW: usize = 9;

/// Loss value with an optional gradient laid out like the differentiated argument.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self { value, grad: None }
    }
}

/// Pearson correlation coefficient; 0 when either side is (near) constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx < VARIANCE_EPS || syy < VARIANCE_EPS {
        return Ok(0.0);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

fn check_window(window: usize) -> Result<usize> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    Ok(window / 2)
}

/// Local correlation loss `-(1/N) sum_c w_c rho_c^2` with one clamp-padded
/// window per voxel. `center_weights` (default 1) scales each window's term.
pub(crate) fn nlcc_raw(
    a: &[f64],
    b: &[f64],
    dims: Dims,
    window: usize,
    center_weights: Option<&[f64]>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let r = check_window(window)?;
    let n = dims.len();
    let count = (window * window * window) as f64;
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let sa = box_sum(a, dims, r);
    let sb = box_sum(b, dims, r);
    let sab = box_sum(&ab, dims, r);
    let saa = box_sum(&aa, dims, r);
    let sbb = box_sum(&bb, dims, r);

    let mut total = 0.0;
    let mut alpha = if want_grad { vec![0.0; n] } else { Vec::new() };
    let mut gamma = if want_grad { vec![0.0; n] } else { Vec::new() };
    let mut mean_a = if want_grad { vec![0.0; n] } else { Vec::new() };
    let mut mean_b = if want_grad { vec![0.0; n] } else { Vec::new() };
    for c in 0..n {
        let w = center_weights.map_or(1.0, |cw| cw[c]);
        if w == 0.0 {
            continue;
        }
        let cross = sab[c] - sa[c] * sb[c] / count;
        let va = saa[c] - sa[c] * sa[c] / count;
        let vb = sbb[c] - sb[c] * sb[c] / count;
        if va < VARIANCE_EPS || vb < VARIANCE_EPS {
            continue;
        }
        let denom = va * vb;
        total += w * cross * cross / denom;
        if want_grad {
            alpha[c] = w * cross / denom;
            gamma[c] = w * cross * cross / (denom * va);
            mean_a[c] = sa[c] / count;
            mean_b[c] = sb[c] / count;
        }
    }
    let value = -total / n as f64;
    if !want_grad {
        return Ok((value, None));
    }
    let alpha_mb: Vec<f64> = alpha.iter().zip(&mean_b).map(|(x, y)| x * y).collect();
    let gamma_ma: Vec<f64> = gamma.iter().zip(&mean_a).map(|(x, y)| x * y).collect();
    let adj_alpha = box_sum_adjoint(&alpha, dims, r);
    let adj_alpha_mb = box_sum_adjoint(&alpha_mb, dims, r);
    let adj_gamma = box_sum_adjoint(&gamma, dims, r);
    let adj_gamma_ma = box_sum_adjoint(&gamma_ma, dims, r);
    let scale = -2.0 / n as f64;
    let grad = (0..n)
        .map(|v| scale * (b[v] * adj_alpha[v] - adj_alpha_mb[v] - a[v] * adj_gamma[v] + adj_gamma_ma[v]))
        .collect();
    Ok((value, Some(grad)))
}

/// Local normalized cross-correlation loss in `[-1, 0]`, gradient with respect to `a`.
pub fn nlcc_loss(a: &Volume, b: &Volume, window: usize) -> Result<LossValue> {
    check_dims(a.dims(), b.dims())?;
    let (value, grad) = nlcc_raw(a.data(), b.data(), a.dims(), window, None, true)?;
    Ok(LossValue { value, grad })
}

/// Mean over voxels of the squared forward-difference Jacobian entries
/// (summed over the 3 components and 3 axes); differences leaving the grid are zero.
pub fn smoothness_loss(phi: &DisplacementField) -> LossValue {
    let (value, grad) = smoothness_raw(phi);
    LossValue { value, grad: Some(grad.into_iter().flatten().collect()) }
}

pub(crate) fn smoothness_raw(phi: &DisplacementField) -> (f64, [Vec<f64>; 3]) {
    let dims = phi.dims();
    let n = dims.len();
    let [nx, ny, nz] = dims.as_array();
    let strides = [1, nx, nx * ny];
    let lens = [nx, ny, nz];
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for c in 0..3 {
        let f = phi.component(c);
        let g = &mut grad[c];
        for i in 0..n {
            let (x, y, z) = dims.coords(i);
            let pos = [x, y, z];
            for axis in 0..3 {
                if pos[axis] + 1 >= lens[axis] {
                    continue;
                }
                let j = i + strides[axis];
                let d = f[j] - f[i];
                total += d * d;
                g[j] += 2.0 * scale * d;
                g[i] -= 2.0 * scale * d;
            }
        }
    }
    (total * scale, grad)
}

fn check_pair(p: &ProbVolume, q: &ProbVolume) -> Result<()> {
    check_dims(p.dims(), q.dims())?;
    if p.num_classes() != q.num_classes() {
        return Err(Error::ClassMismatch { expected: p.num_classes(), found: q.num_classes() });
    }
    Ok(())
}

fn check_weights(w: &Volume, dims: Dims) -> Result<()> {
    check_dims(dims, w.dims())?;
    if w.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("dice weights must lie in [0, 1]"));
    }
    Ok(())
}

/// Soft Dice over channel-major slices of `n` voxels, averaged over classes
/// `first..classes`. When `grad_p` is given it receives d(dice)/dp.
pub(crate) fn soft_dice_raw(
    p: &[f64],
    q: &[f64],
    n: usize,
    classes: usize,
    first: usize,
    weights: Option<&[f64]>,
    mut grad_p: Option<&mut [f64]>,
) -> f64 {
    let fg = (classes - first) as f64;
    let mut total = 0.0;
    if let Some(g) = grad_p.as_deref_mut() {
        g[..first * n].iter_mut().for_each(|v| *v = 0.0);
    }
    for k in first..classes {
        let pk = &p[k * n..(k + 1) * n];
        let qk = &q[k * n..(k + 1) * n];
        let (mut spq, mut spp, mut sqq) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            let w2 = w * w;
            spq += w2 * (pk[i] * qk[i]);
            spp += w2 * (pk[i] * pk[i]);
            sqq += w2 * (qk[i] * qk[i]);
        }
        let num = 2.0 * spq + DICE_EPS;
        let den = spp + sqq + DICE_EPS;
        total += num / den;
        if let Some(g) = grad_p.as_deref_mut() {
            let gk = &mut g[k * n..(k + 1) * n];
            for i in 0..n {
                let w = weights.map_or(1.0, |w| w[i]);
                let w2 = w * w;
                gk[i] = (2.0 * w2 * qk[i] * den - num * 2.0 * w2 * pk[i]) / (den * den) / fg;
            }
        }
    }
    total / fg
}

/// Soft Dice with squared-sum denominators, averaged over foreground classes.
pub fn soft_dice(p: &ProbVolume, q: &ProbVolume, weights: Option<&Volume>) -> Result<f64> {
    check_pair(p, q)?;
    if let Some(w) = weights {
        check_weights(w, p.dims())?;
    }
    Ok(soft_dice_raw(p.data(), q.data(), p.dims().len(), p.num_classes(), 1, weights.map(|w| w.data()), None))
}

/// Soft Dice averaged over every class including background.
pub fn soft_dice_all_classes(p: &ProbVolume, q: &ProbVolume, weights: Option<&Volume>) -> Result<f64> {
    check_pair(p, q)?;
    if let Some(w) = weights {
        check_weights(w, p.dims())?;
    }
    Ok(soft_dice_raw(p.data(), q.data(), p.dims().len(), p.num_classes(), 0, weights.map(|w| w.data()), None))
}

/// `-dice(p, q; w)` with its gradient with respect to `p`.
fn dice_loss_first(p: &ProbVolume, q: &ProbVolume, weights: Option<&Volume>) -> Result<LossValue> {
    check_pair(p, q)?;
    if let Some(w) = weights {
        check_weights(w, p.dims())?;
    }
    let mut grad = vec![0.0; p.data().len()];
    let d = soft_dice_raw(p.data(), q.data(), p.dims().len(), p.num_classes(), 1, weights.map(|w| w.data()), Some(&mut grad));
    grad.iter_mut().for_each(|g| *g = -*g);
    Ok(LossValue { value: -d, grad: Some(grad) })
}

/// Plain Dice loss `-dice(s_hat, s_target)`, gradient with respect to `s_hat`.
pub fn dice_loss(s_hat: &ProbVolume, s_target: &ProbVolume) -> Result<LossValue> {
    dice_loss_first(s_hat, s_target, None)
}

/// Confidence-guided Dice loss `-dice(C * s_hat_u, C * s_pseudo)`, gradient
/// with respect to `s_hat_u`.
pub fn cgd_loss(confidence: &Volume, s_hat_u: &ProbVolume, s_pseudo: &ProbVolume) -> Result<LossValue> {
    dice_loss_first(s_hat_u, s_pseudo, Some(confidence))
}

/// Weak-supervision loss `-dice(s_pseudo, s_hat_u)`, gradient with respect to `s_pseudo`.
pub fn weak_loss(s_pseudo: &ProbVolume, s_hat_u: &ProbVolume) -> Result<LossValue> {
    dice_loss_first(s_pseudo, s_hat_u, None)
}

/// Label inputs of the weak-supervision term.
#[derive(Clone, Copy, Debug)]
pub struct WeakInputs<'a> {
    /// Atlas labels (soft or one-hot), warped by the field.
    pub moving_labels: &'a ProbVolume,
    /// Frozen segmenter prediction on the fixed image.
    pub fixed_pred: &'a ProbVolume,
}

/// Everything the registration objective needs besides the field.
#[derive(Clone, Copy, Debug)]
pub struct RegTerms<'a> {
    pub moving: &'a Volume,
    pub fixed: &'a Volume,
    pub window: usize,
    pub lambda_smo: f64,
    pub lambda_weak: f64,
    pub weak: Option<WeakInputs<'a>>,
    /// Optional per-window weights for the similarity term.
    pub window_weights: Option<&'a [f64]>,
}

/// Registration objective value, its parts, and the gradient with respect to the field.
#[derive(Clone, Debug)]
pub struct RegLoss {
    pub total: f64,
    pub ic: f64,
    pub smo: f64,
    pub weak: f64,
    pub grad: DisplacementField,
}

/// `L_IC + lambda_smo * L_smo` at iteration 0, plus `lambda_weak * L_weak` from iteration 1 on.
pub fn reg_objective(iter: usize, terms: &RegTerms<'_>, phi: &DisplacementField) -> Result<RegLoss> {
    let dims = phi.dims();
    check_dims(dims, terms.moving.dims())?;
    check_dims(dims, terms.fixed.dims())?;
    let weak = if iter >= 1 {
        Some(terms.weak.ok_or_else(|| Error::invalid(format!("iteration {iter} requires weak-supervision inputs")))?)
    } else {
        None
    };

    let (warped, sample_grad) = warp_with_gradient(terms.moving.data(), dims, phi);
    let (ic, d_warped) = nlcc_raw(&warped, terms.fixed.data(), dims, terms.window, terms.window_weights, true)?;
    let d_warped = d_warped.expect("gradient requested");
    let mut grad: [Vec<f64>; 3] =
        [0, 1, 2].map(|c| d_warped.iter().zip(&sample_grad[c]).map(|(a, b)| a * b).collect());

    let (smo, smo_grad) = smoothness_raw(phi);
    for c in 0..3 {
        for (g, s) in grad[c].iter_mut().zip(&smo_grad[c]) {
            *g += terms.lambda_smo * s;
        }
    }

    let mut weak_value = 0.0;
    if let Some(w) = weak {
        check_pair(w.moving_labels, w.fixed_pred)?;
        check_dims(dims, w.moving_labels.dims())?;
        let warped = warp_prob_with_gradient(w.moving_labels, phi)?;
        let loss = weak_loss(&warped.probs, w.fixed_pred)?;
        weak_value = loss.value;
        let dl_dp = loss.grad.expect("gradient requested");
        let n = dims.len();
        let k = w.moving_labels.num_classes();
        let probs = warped.probs.data();
        for i in 0..n {
            let dot: f64 = (0..k).map(|j| dl_dp[j * n + i] * probs[j * n + i]).sum();
            for j in 0..k {
                let dl_dw = (dl_dp[j * n + i] - dot) / warped.sums[i];
                if dl_dw == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    grad[c][i] += terms.lambda_weak * dl_dw * warped.grads[j][c][i];
                }
            }
        }
    }

    let total = ic + terms.lambda_smo * smo + if weak.is_some() { terms.lambda_weak * weak_value } else { 0.0 };
    if !total.is_finite() {
        return Err(Error::NonFinite("registration objective".into()));
    }
    Ok(RegLoss {
        total,
        ic,
        smo,
        weak: weak_value,
        grad: DisplacementField::from_raw(dims, phi.spacing(), grad),
    })
}

/// `L_seg = L_d + lambda * L_cgd`, gradients combined elementwise.
pub fn seg_objective(l_d: &LossValue, l_cgd: &LossValue, lambda: f64) -> Result<LossValue> {
    let grad = match (&l_d.grad, &l_cgd.grad) {
        (Some(a), Some(b)) => {
            if a.len() != b.len() {
                return Err(Error::LengthMismatch(a.len(), b.len()));
            }
            Some(a.iter().zip(b).map(|(x, y)| x + lambda * y).collect())
        }
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.iter().map(|y| lambda * y).collect()),
        (None, None) => None,
    };
    Ok(LossValue { value: l_d.value + lambda * l_cgd.value, grad })
}
