//! Per-voxel MLP segmenter trained with batch soft Dice.
//!
//! Input features are the 3x3x3 neighbourhood of the standardized image plus
//! the voxel's coordinates scaled to `[-1, 1]`; one tanh hidden layer feeds a
//! K-way softmax.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::objectives::soft_dice_raw;
use crate::optim::MomentumRmsScaler;
use crate::volume::{ProbVolume, Volume};

pub const FEATURES: usize = 30;
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelNet {
    classes: usize,
    hidden: usize,
    /// `hidden x FEATURES`, row-major.
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    /// `classes x hidden`, row-major.
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: Vec<f64>,
}

impl VoxelNet {
    /// Hidden weights uniform in `+-sqrt(6 / (fan_in + fan_out))`; biases and
    /// the output layer start at zero, so the first prediction is uniform.
    pub fn new(classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        if classes < 2 || hidden == 0 {
            return Err(Error::invalid(format!("need >= 2 classes and >= 1 hidden unit, got {classes} and {hidden}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (FEATURES + hidden) as f64).sqrt();
        let w1 = (0..hidden * FEATURES).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self { classes, hidden, w1, b1: vec![0.0; hidden], w2: vec![0.0; classes * hidden], b2: vec![0.0; classes] })
    }

    /// Assemble from raw parameter arrays (the NET1 field order).
    pub fn from_parts(classes: usize, hidden: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let sizes = [(w1.len(), hidden * FEATURES), (b1.len(), hidden), (w2.len(), classes * hidden), (b2.len(), classes)];
        for (got, want) in sizes {
            if got != want {
                return Err(Error::LengthMismatch(want, got));
            }
        }
        if classes < 2 || hidden == 0 {
            return Err(Error::invalid("need >= 2 classes and >= 1 hidden unit"));
        }
        let net = Self { classes, hidden, w1, b1, w2, b2 };
        if net.params().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network weights".into()));
        }
        Ok(net)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }
    pub fn b1(&self) -> &[f64] {
        &self.b1
    }
    pub fn w2(&self) -> &[f64] {
        &self.w2
    }
    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flattened parameters in NET1 order.
    pub(crate) fn flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub(crate) fn set_flat(&mut self, flat: &[f64]) {
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    /// Hidden activations and class probabilities of one feature vector.
    fn forward(&self, f: &[f64; FEATURES], hidden: &mut [f64], probs: &mut [f64]) {
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * FEATURES..(j + 1) * FEATURES];
            *h = (self.b1[j] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
        for (k, p) in probs.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            *p = self.b2[k] + row.iter().zip(hidden.iter()).map(|(w, h)| w * h).sum::<f64>();
        }
        softmax(probs);
    }
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (2 * i) as f64 / (n - 1) as f64 - 1.0
    }
}

/// Feature vector of voxel `(x, y, z)`: clamp-padded 3x3x3 intensities of
/// `vol` (x-fastest within the patch) and the scaled coordinates. `vol` is
/// read as given; [`feature_matrix`] and [`predict`] standardize first.
pub fn features(vol: &Volume, x: usize, y: usize, z: usize) -> [f64; FEATURES] {
    let dims = vol.dims();
    let mut f = [0.0; FEATURES];
    let clamp = |v: usize, d: isize, n: usize| (v as isize + d).clamp(0, n as isize - 1) as usize;
    let mut c = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                f[c] = vol.get(clamp(x, dx, dims.nx), clamp(y, dy, dims.ny), clamp(z, dz, dims.nz));
                c += 1;
            }
        }
    }
    f[27] = unit_coord(x, dims.nx);
    f[28] = unit_coord(y, dims.ny);
    f[29] = unit_coord(z, dims.nz);
    f
}

/// Features of every voxel of the standardized image.
pub fn feature_matrix(vol: &Volume) -> Vec<[f64; FEATURES]> {
    let std = vol.standardized();
    let dims = vol.dims();
    (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            features(&std, x, y, z)
        })
        .collect()
}

pub fn predict(net: &VoxelNet, vol: &Volume) -> ProbVolume {
    let dims = vol.dims();
    let n = dims.len();
    let k = net.classes;
    let feats = feature_matrix(vol);
    let per_voxel: Vec<Vec<f64>> = feats
        .par_iter()
        .map_init(
            || vec![0.0; net.hidden],
            |hidden, f| {
                let mut p = vec![0.0; k];
                net.forward(f, hidden, &mut p);
                p
            },
        )
        .collect();
    let mut data = vec![0.0; k * n];
    for (i, p) in per_voxel.iter().enumerate() {
        for c in 0..k {
            data[c * n + i] = p[c];
        }
    }
    ProbVolume::from_raw(dims, vol.spacing(), k, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub epochs: usize,
    pub voxels_per_batch: usize,
    pub step_size: f64,
    /// Weight of the confidence-guided term.
    pub lambda: f64,
    pub hidden: usize,
    /// Average the Dice terms over all classes rather than foreground only.
    /// Without the background channel a class can settle on predicting
    /// background voxels, since nothing penalizes it there.
    pub include_background: bool,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { epochs: 30, voxels_per_batch: 8192, step_size: 1e-2, lambda: 0.5, hidden: DEFAULT_HIDDEN, include_background: true, seed: 0 }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.voxels_per_batch == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, voxels_per_batch and hidden must be positive".into()));
        }
        if !(self.step_size > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("step_size must be > 0 and lambda >= 0".into()));
        }
        Ok(())
    }
}

/// One training image with its target and optional confidence weights.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Volume,
    pub target: ProbVolume,
    pub confidence: Option<Volume>,
}

/// Training data of one epoch: `supervised` feeds the plain Dice term,
/// `weighted` the confidence-guided one.
#[derive(Clone, Debug, Default)]
pub struct EpochData {
    pub supervised: Vec<TrainItem>,
    pub weighted: Vec<TrainItem>,
}

/// Preprocessed pool of voxels: features, targets and weights.
struct Pool {
    feats: Vec<[f64; FEATURES]>,
    targets: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    include_background: bool,
}

impl Pool {
    fn build(items: &[TrainItem], classes: usize, weighted: bool, include_background: bool) -> Result<Self> {
        let mut pool =
            Pool { feats: Vec::new(), targets: Vec::new(), weights: weighted.then(Vec::new), include_background };
        for item in items {
            check_dims(item.image.dims(), item.target.dims())?;
            if item.target.num_classes() != classes {
                return Err(Error::ClassMismatch { expected: classes, found: item.target.num_classes() });
            }
            let n = item.image.dims().len();
            pool.feats.extend(feature_matrix(&item.image));
            pool.targets.extend((0..n).map(|i| (0..classes).map(|k| item.target.get(k, i)).collect()));
            if let Some(w) = pool.weights.as_mut() {
                let c = item.confidence.as_ref().ok_or_else(|| Error::invalid("weighted item without confidence map"))?;
                check_dims(item.image.dims(), c.dims())?;
                if c.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("confidence weights must be in [0, 1]"));
                }
                w.extend_from_slice(c.data());
            }
        }
        Ok(pool)
    }

    fn len(&self) -> usize {
        self.feats.len()
    }
}

/// Loss and parameter gradient of `-dice` over one batch of voxels.
/// The gradient is accumulated into `grad` scaled by `scale`.
fn batch_dice(net: &VoxelNet, pool: &Pool, idx: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
    let k = net.classes;
    let h = net.hidden;
    let n = idx.len();
    let mut hidden = vec![0.0; n * h];
    let mut p = vec![0.0; k * n];
    let mut q = vec![0.0; k * n];
    let mut probs = vec![0.0; k];
    for (b, &i) in idx.iter().enumerate() {
        net.forward(&pool.feats[i], &mut hidden[b * h..(b + 1) * h], &mut probs);
        for c in 0..k {
            p[c * n + b] = probs[c];
            q[c * n + b] = pool.targets[i][c];
        }
    }
    let w: Option<Vec<f64>> = pool.weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect());
    let mut dp = vec![0.0; k * n];
    let first = if pool.include_background { 0 } else { 1 };
    let dice = soft_dice_raw(&p, &q, n, k, first, w.as_deref(), Some(&mut dp));

    let (gw1, rest) = grad.split_at_mut(net.w1.len());
    let (gb1, rest) = rest.split_at_mut(net.b1.len());
    let (gw2, gb2) = rest.split_at_mut(net.w2.len());
    let mut dlogit = vec![0.0; k];
    let mut dhid = vec![0.0; h];
    for (b, &i) in idx.iter().enumerate() {
        // d(-dice)/dp through the softmax Jacobian.
        let dot: f64 = (0..k).map(|c| -dp[c * n + b] * p[c * n + b]).sum();
        for c in 0..k {
            dlogit[c] = scale * p[c * n + b] * (-dp[c * n + b] - dot);
        }
        let hb = &hidden[b * h..(b + 1) * h];
        dhid.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..k {
            gb2[c] += dlogit[c];
            let row = &net.w2[c * h..(c + 1) * h];
            for j in 0..h {
                gw2[c * h + j] += dlogit[c] * hb[j];
                dhid[j] += dlogit[c] * row[j];
            }
        }
        let f = &pool.feats[i];
        for j in 0..h {
            let dz = dhid[j] * (1.0 - hb[j] * hb[j]);
            gb1[j] += dz;
            let g = &mut gw1[j * FEATURES..(j + 1) * FEATURES];
            for (gv, x) in g.iter_mut().zip(f) {
                *gv += dz * x;
            }
        }
    }
    -dice
}

/// Per-batch training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SegTraceRow {
    pub epoch: usize,
    pub total: f64,
    pub dice: f64,
    pub cgd: f64,
}

/// Train on fresh data each epoch, `provider(epoch)`. Batches are drawn
/// without replacement from the supervised voxels; each is paired with an
/// equally sized batch of weighted voxels from an independent stream.
pub fn train_seg_with<F>(net: &VoxelNet, cfg: &SegConfig, mut provider: F) -> Result<(VoxelNet, Vec<SegTraceRow>)>
where
    F: FnMut(usize) -> Result<EpochData>,
{
    cfg.validate()?;
    let mut net = net.clone();
    let k = net.classes;
    let mut scaler = MomentumRmsScaler::new(net.param_count());
    let mut sup_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut wt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    wt_rng.set_stream(1);
    let mut trace = Vec::new();
    let mut params = net.flat();
    let mut grad = vec![0.0; params.len()];
    let mut wt_order: Vec<usize> = Vec::new();
    let mut wt_cursor = 0;

    for epoch in 0..cfg.epochs {
        let data = provider(epoch)?;
        if data.supervised.is_empty() {
            return Err(Error::invalid("segmenter training needs at least one supervised image"));
        }
        let sup = Pool::build(&data.supervised, k, false, cfg.include_background)?;
        let wt = Pool::build(&data.weighted, k, true, cfg.include_background)?;
        let full = cfg.voxels_per_batch >= sup.len();
        let mut order: Vec<usize> = (0..sup.len()).collect();
        if !full {
            order.shuffle(&mut sup_rng);
        }
        if wt.len() > 0 && wt_order.len() != wt.len() {
            wt_order = (0..wt.len()).collect();
            wt_cursor = wt.len();
        }
        for chunk in order.chunks(cfg.voxels_per_batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let dice = batch_dice(&net, &sup, chunk, 1.0, &mut grad);
            let mut cgd = 0.0;
            if wt.len() > 0 && cfg.lambda > 0.0 {
                let idx: Vec<usize> = if cfg.voxels_per_batch >= wt.len() {
                    (0..wt.len()).collect()
                } else {
                    let mut idx = Vec::with_capacity(chunk.len());
                    while idx.len() < chunk.len().min(wt.len()) {
                        if wt_cursor >= wt_order.len() {
                            wt_order.shuffle(&mut wt_rng);
                            wt_cursor = 0;
                        }
                        idx.push(wt_order[wt_cursor]);
                        wt_cursor += 1;
                    }
                    idx
                };
                cgd = batch_dice(&net, &wt, &idx, cfg.lambda, &mut grad);
            }
            let total = dice + cfg.lambda * cgd;
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("segmenter loss at epoch {epoch}")));
            }
            trace.push(SegTraceRow { epoch, total, dice, cgd });
            scaler.normalize(&mut grad);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.step_size * g;
            }
            net.set_flat(&params);
        }
    }
    Ok((net, trace))
}

/// Train on a fixed data set.
pub fn train_seg(
    net: &VoxelNet,
    supervised: &[TrainItem],
    weighted: &[TrainItem],
    cfg: &SegConfig,
) -> Result<(VoxelNet, Vec<SegTraceRow>)> {
    let data = EpochData { supervised: supervised.to_vec(), weighted: weighted.to_vec() };
    train_seg_with(net, cfg, |_| Ok(data.clone()))
}

/// Loss `-dice` of one batch and its flattened weight gradient, for
/// gradient checks.
pub fn batch_loss_and_grad(
    net: &VoxelNet,
    items: &[TrainItem],
    voxels: &[usize],
    weighted: bool,
    include_background: bool,
) -> Result<(f64, Vec<f64>)> {
    let pool = Pool::build(items, net.classes, weighted, include_background)?;
    if let Some(bad) = voxels.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::invalid(format!("voxel index {bad} out of range")));
    }
    let mut grad = vec![0.0; net.param_count()];
    let loss = batch_dice(net, &pool, voxels, 1.0, &mut grad);
    Ok((loss, grad))
}

/// Copy of `net` with flattened parameters replaced.
pub fn with_params(net: &VoxelNet, flat: &[f64]) -> Result<VoxelNet> {
    if flat.len() != net.param_count() {
        return Err(Error::LengthMismatch(net.param_count(), flat.len()));
    }
    let mut out = net.clone();
    out.set_flat(flat);
    Ok(out)
}

/// Flattened parameters in NET1 order (`w1, b1, w2, b2`).
pub fn params_of(net: &VoxelNet) -> Vec<f64> {
    net.flat()
}
