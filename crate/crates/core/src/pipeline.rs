//! The iterative one-shot training loop.
//!
//! Every iteration registers the atlas to each unlabeled image (with the
//! segmenter's previous predictions as weak supervision from the second
//! iteration on), derives confidence maps by mirrored registration, builds
//! style-transferred copies of the warped atlas, trains the segmenter and
//! evaluates both halves on the test set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::io;
use crate::metrics::MetricReport;
use crate::perception::{perceive, PerceptionSummary};
use crate::phantom::{affine_resample, AffineParams};
use crate::registration::{register, RegConfig, WeakLabels};
use crate::segmenter::{predict, train_seg_with, EpochData, SegConfig, TrainItem, VoxelNet};
use crate::style::{confidence_bins, draw_betas, BinMasks, StyleMixer, DEFAULT_BINS};
use crate::volume::{warp, warp_prob, LabelVolume, ProbVolume, Volume};

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed of item `index` of stage `stage`:
/// `splitmix64(splitmix64(master ^ fnv1a(stage)) ^ index)`.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(stage)) ^ index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StyleMode {
    #[default]
    Wist,
    Ist,
    None,
}

impl std::str::FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wist" => Ok(Self::Wist),
            "ist" => Ok(Self::Ist),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown style mode {other:?} (wist, ist, none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub style: StyleMode,
    pub bins: usize,
    /// Weight of the confidence-guided Dice term.
    pub lambda: f64,
    pub use_cgd: bool,
    /// Probability of an affine augmentation per training copy.
    pub augment_probability: f64,
    /// Also register the atlas to each test image and report label overlap.
    pub evaluate_registration: bool,
    pub reg: RegConfig,
    pub seg: SegConfig,
    pub atlas: Option<PathBuf>,
    pub atlas_labels: Option<PathBuf>,
    pub unlabeled: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub test_labels: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            style: StyleMode::Wist,
            bins: DEFAULT_BINS,
            lambda: 0.5,
            use_cgd: true,
            augment_probability: 0.5,
            evaluate_registration: true,
            reg: RegConfig::default(),
            seg: SegConfig::default(),
            atlas: None,
            atlas_labels: None,
            unlabeled: Vec::new(),
            test: Vec::new(),
            test_labels: Vec::new(),
            out: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(Error::Config("lambda must be >= 0 and augment_probability in [0, 1]".into()));
        }
        self.reg.validate().map_err(|e| Error::Config(format!("reg: {e}")))?;
        self.seg.validate().map_err(|e| Error::Config(format!("seg: {e}")))?;
        Ok(())
    }

    fn needs_confidence(&self) -> bool {
        self.use_cgd || self.style == StyleMode::Wist
    }
}

/// In-memory inputs of a run.
#[derive(Clone, Debug)]
pub struct PipelineData {
    pub atlas: Volume,
    pub atlas_labels: LabelVolume,
    pub unlabeled: Vec<Volume>,
    pub test: Vec<(Volume, LabelVolume)>,
}

impl PipelineData {
    /// Load the files named in `cfg`.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| Error::Config(format!("{what} path is required")));
        let atlas = io::read_any_volume(need(&cfg.atlas, "atlas")?)?;
        let atlas_labels = io::read_labels(need(&cfg.atlas_labels, "atlas_labels")?, None)?;
        let unlabeled = cfg.unlabeled.iter().map(io::read_any_volume).collect::<Result<Vec<_>>>()?;
        if cfg.test.len() != cfg.test_labels.len() {
            return Err(Error::Config(format!("{} test images but {} test label files", cfg.test.len(), cfg.test_labels.len())));
        }
        let test = cfg
            .test
            .iter()
            .zip(&cfg.test_labels)
            .map(|(i, l)| Ok((io::read_any_volume(i)?, io::read_labels(l, Some(atlas_labels.num_classes()))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { atlas, atlas_labels, unlabeled, test })
    }

    fn validate(&self) -> Result<()> {
        let dims = self.atlas.dims();
        check_dims(dims, self.atlas_labels.dims())?;
        if self.unlabeled.is_empty() {
            return Err(Error::invalid("the pipeline needs at least one unlabeled image"));
        }
        for u in &self.unlabeled {
            check_dims(dims, u.dims())?;
        }
        for (img, lab) in &self.test {
            check_dims(dims, img.dims())?;
            check_dims(dims, lab.dims())?;
        }
        Ok(())
    }
}

/// Means and per-case reports over a set of cases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SetMetrics {
    pub mean_dice: f64,
    pub mean_hd_sym_mm: Option<f64>,
    pub cases: Vec<MetricReport>,
}

impl SetMetrics {
    fn from_cases(cases: Vec<MetricReport>) -> Self {
        let n = cases.len().max(1) as f64;
        let mean_dice = cases.iter().map(|c| c.mean_dice).sum::<f64>() / n;
        let hd: Vec<f64> = cases.iter().filter_map(|c| c.mean_hd_sym_mm).collect();
        let mean_hd_sym_mm = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
        Self { mean_dice, mean_hd_sym_mm, cases }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub perception: Vec<PerceptionSummary>,
    /// Style strengths drawn per epoch and unlabeled image.
    pub betas: Vec<Vec<Vec<f64>>>,
    pub seg_final_loss: f64,
    pub reg_test: Option<SetMetrics>,
    pub seg_test: SetMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub iterations: Vec<IterationRecord>,
    /// Wall-clock seconds per stage; the only non-reproducible part.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Mean test Dice of the segmenter after the last iteration.
    pub fn final_seg_dice(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.seg_test.mean_dice)
    }
}

/// Per-image state of one iteration.
struct Subject {
    image: Volume,
    warped_atlas: Volume,
    pseudo: ProbVolume,
    pseudo_labels: LabelVolume,
    confidence: Option<Volume>,
    bins: Option<BinMasks>,
    mixer: Option<StyleMixer>,
}

/// Affine augmentation range: rotation (degrees), scale, shift (voxels).
const AUGMENT: (f64, f64, f64) = (5.0, 0.05, 2.0);

fn maybe_augment(image: Volume, labels: &LabelVolume, p: f64, rng: &mut ChaCha8Rng) -> Result<TrainItem> {
    if p > 0.0 && rng.gen_bool(p) {
        let params = AffineParams::random(rng, AUGMENT.0, AUGMENT.1, AUGMENT.2);
        let (img, lab) = affine_resample(&image, labels, &params)?;
        return Ok(TrainItem { image: img, target: lab.one_hot(), confidence: None });
    }
    Ok(TrainItem { image, target: labels.one_hot(), confidence: None })
}

pub fn run_pipeline(cfg: &PipelineConfig, data: &PipelineData) -> Result<RunManifest> {
    cfg.validate()?;
    data.validate()?;
    let k = data.atlas_labels.num_classes();
    let atlas_onehot = data.atlas_labels.one_hot();
    let mut seeds = BTreeMap::new();
    let mut seed = |stage: &str, index: u64| {
        let s = derive_seed(cfg.seed, stage, index);
        seeds.insert(format!("{stage}/{index}"), s);
        s
    };
    let mut timings = BTreeMap::new();
    let mut net = VoxelNet::new(k, cfg.seg.hidden, seed("seg-init", 0)).map_err(|e| e.in_stage("seg-init"))?;
    let mut prev_pred: Option<Vec<ProbVolume>> = None;
    let mut records = Vec::new();
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
    }

    for it in 0..cfg.iterations {
        let t_reg = Instant::now();
        let mut subjects = Vec::with_capacity(data.unlabeled.len());
        let mut perception = Vec::new();
        for (j, u) in data.unlabeled.iter().enumerate() {
            let reg_cfg = RegConfig { seed: seed(&format!("reg/{it}"), j as u64), ..cfg.reg.clone() };
            let weak = prev_pred.as_ref().map(|p| WeakLabels { moving_labels: &atlas_onehot, fixed_pred: &p[j] });
            let stage = format!("iteration {it}: register unlabeled {j}");
            let (phi, confidence) = if cfg.needs_confidence() {
                let pack = perceive(&data.atlas, u, &reg_cfg, weak).map_err(|e| e.in_stage(stage))?;
                perception.push(pack.summary());
                (pack.phi, Some(pack.confidence))
            } else {
                (register(&data.atlas, u, &reg_cfg, weak).map_err(|e| e.in_stage(stage))?.phi, None)
            };
            let warped_atlas = warp(&data.atlas, &phi)?;
            let pseudo = warp_prob(&atlas_onehot, &phi)?.hardened();
            let pseudo_labels = pseudo.argmax();
            let bins = match (&confidence, cfg.style) {
                (Some(c), StyleMode::Wist) => Some(confidence_bins(c, cfg.bins)?),
                _ => None,
            };
            let mixer = match cfg.style {
                StyleMode::None => None,
                _ => Some(StyleMixer::new(&warped_atlas, u).map_err(|e| e.in_stage("style"))?),
            };
            if let Some(out) = &cfg.out {
                let dir = out.join(format!("iter{it}"));
                std::fs::create_dir_all(&dir)?;
                io::write_field(dir.join(format!("phi_{j}.d3f")), &phi)?;
                io::write_labels(dir.join(format!("pseudo_{j}.v3d")), &pseudo_labels)?;
                if let Some(c) = &confidence {
                    io::write_volume(dir.join(format!("C_{j}.v3d")), c)?;
                }
            }
            subjects.push(Subject { image: u.clone(), warped_atlas, pseudo, pseudo_labels, confidence, bins, mixer });
        }
        timings.insert(format!("iter{it}/registration"), t_reg.elapsed().as_secs_f64());

        let t_seg = Instant::now();
        let style_seed = seed("style", it as u64);
        let aug_seed = seed("augment", it as u64);
        let weighted: Vec<TrainItem> = if cfg.use_cgd {
            subjects
                .iter()
                .map(|s| TrainItem { image: s.image.clone(), target: s.pseudo.clone(), confidence: s.confidence.clone() })
                .collect()
        } else {
            Vec::new()
        };
        let mut betas_log: Vec<Vec<Vec<f64>>> = Vec::new();
        let provider = |epoch: usize| -> Result<EpochData> {
            let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(style_seed, "epoch", epoch as u64));
            let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(aug_seed, "epoch", epoch as u64));
            let mut supervised = vec![maybe_augment(data.atlas.clone(), &data.atlas_labels, cfg.augment_probability, &mut aug_rng)?];
            let mut epoch_betas = Vec::new();
            for s in &subjects {
                let (copy, betas) = match (cfg.style, &s.mixer) {
                    (StyleMode::Wist, Some(m)) => {
                        let betas = draw_betas(cfg.bins, &mut style_rng);
                        (m.weighted(s.bins.as_ref().expect("bins for weighted style"), &betas)?, betas)
                    }
                    (StyleMode::Ist, Some(m)) => {
                        let beta = style_rng.gen_range(0.0..1.0);
                        (m.ist(beta)?, vec![beta])
                    }
                    _ => (s.warped_atlas.clone(), Vec::new()),
                };
                epoch_betas.push(betas);
                supervised.push(maybe_augment(copy, &s.pseudo_labels, cfg.augment_probability, &mut aug_rng)?);
            }
            betas_log.push(epoch_betas);
            Ok(EpochData { supervised, weighted: weighted.clone() })
        };
        let seg_cfg = SegConfig {
            lambda: if cfg.use_cgd { cfg.lambda } else { 0.0 },
            seed: seed("seg", it as u64),
            ..cfg.seg.clone()
        };
        let (trained, trace) = train_seg_with(&net, &seg_cfg, provider).map_err(|e| e.in_stage(format!("iteration {it}: train segmenter")))?;
        net = trained;
        timings.insert(format!("iter{it}/segmenter"), t_seg.elapsed().as_secs_f64());

        let t_eval = Instant::now();
        let seg_cases = data
            .test
            .iter()
            .map(|(img, lab)| MetricReport::evaluate(&predict(&net, img).argmax(), lab))
            .collect::<Result<Vec<_>>>()?;
        let reg_test = if cfg.evaluate_registration && !data.test.is_empty() {
            let mut cases = Vec::new();
            for (t, (img, lab)) in data.test.iter().enumerate() {
                let reg_cfg = RegConfig { seed: seed(&format!("reg-test/{it}"), t as u64), ..cfg.reg.clone() };
                let pred = (it > 0).then(|| predict(&net, img));
                let weak = pred.as_ref().map(|p| WeakLabels { moving_labels: &atlas_onehot, fixed_pred: p });
                let phi = register(&data.atlas, img, &reg_cfg, weak).map_err(|e| e.in_stage(format!("iteration {it}: register test {t}")))?.phi;
                cases.push(MetricReport::evaluate(&warp_prob(&atlas_onehot, &phi)?.argmax(), lab)?);
            }
            Some(SetMetrics::from_cases(cases))
        } else {
            None
        };
        timings.insert(format!("iter{it}/evaluation"), t_eval.elapsed().as_secs_f64());

        if let Some(out) = &cfg.out {
            io::write_net(out.join(format!("iter{it}")).join("segmenter.net"), &net)?;
        }
        prev_pred = Some(data.unlabeled.iter().map(|u| predict(&net, u)).collect());
        records.push(IterationRecord {
            iteration: it,
            perception,
            betas: betas_log,
            seg_final_loss: trace.last().map_or(f64::NAN, |r| r.total),
            reg_test,
            seg_test: SetMetrics::from_cases(seg_cases),
        });
    }

    let manifest = RunManifest { config: cfg.clone(), seeds, iterations: records, timings };
    if let Some(out) = &cfg.out {
        write_manifest(out, &manifest)?;
    }
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}
