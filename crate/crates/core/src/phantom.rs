//! Synthetic mirror-symmetric "brain-like" phantoms with controllable
//! deformations and intensity styles.
//!
//! Anatomy is evaluated analytically at `x + phi(x)`, so deformed phantoms
//! come with the exact ground-truth field. Style (gamma, bias field, noise)
//! is applied afterwards in image space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{fill_voxels, trilinear, Dims, DisplacementField, LabelVolume, Spacing, Volume};

/// Logistic scale giving a 10-90% edge rise of 1.5 voxels.
const EDGE_SCALE: f64 = 1.5 / (2.0 * 2.197_224_577_336_219_6);

/// An ellipsoid, or a mirrored pair of ellipsoids, sharing one label.
/// Centers and radii are in normalized coordinates (`[-1, 1]` per axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
    /// Also place the reflection across the mid-sagittal plane.
    pub mirrored_pair: bool,
}

impl Structure {
    const fn new(center: [f64; 3], radii: [f64; 3], intensity: f64, mirrored_pair: bool) -> Self {
        Self { center, radii, intensity, mirrored_pair }
    }
}

/// Default structure table; the first `num_structures` entries are used.
pub fn default_structures() -> Vec<Structure> {
    vec![
        Structure::new([0.0, 0.0, 0.0], [0.8, 0.85, 0.75], 0.45, false),
        Structure::new([0.42, 0.12, 0.05], [0.22, 0.32, 0.3], 0.85, true),
        Structure::new([0.34, -0.48, -0.1], [0.2, 0.2, 0.25], 0.25, true),
        Structure::new([0.0, 0.0, 0.0], [0.15, 0.3, 0.3], 0.98, false),
        Structure::new([0.45, -0.1, -0.45], [0.12, 0.15, 0.15], 0.65, true),
        Structure::new([0.0, 0.5, 0.4], [0.12, 0.12, 0.12], 0.12, false),
    ]
}

pub const BACKGROUND_INTENSITY: f64 = 0.08;
/// Peak of the anatomical intensity ramp along y and z (symmetric in x).
pub const BACKGROUND_RAMP: f64 = 0.06;
/// Amplitude of the fixed tissue texture; gives every region local
/// contrast so deformations are observable by local correlation.
pub const TEXTURE_AMPLITUDE: f64 = 0.05;

/// Texture modes `(frequency, phase)` per axis in normalized coordinates.
/// The x phase is zero so each mode is even about the mid-sagittal plane.
const TEXTURE_MODES: [[(f64, f64); 3]; 3] = [
    [(9.0, 0.0), (7.0, 0.4), (8.0, 1.1)],
    [(5.0, 0.0), (11.0, 2.0), (6.0, 0.3)],
    [(12.0, 0.0), (4.0, 1.3), (10.0, 2.6)],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Style {
    /// Gamma applied to base intensities, in `[0.5, 2]`.
    pub gamma: f64,
    /// Amplitude of the multiplicative low-frequency bias field.
    pub bias_amplitude: f64,
    /// Additive Gaussian noise standard deviation.
    pub noise_sigma: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self { gamma: 1.0, bias_amplitude: 0.0, noise_sigma: 0.0 }
    }
}

impl Style {
    /// Random style within the supported ranges.
    pub fn random(rng: &mut impl Rng, noise_sigma: f64) -> Self {
        let log_gamma = rng.gen_range(0.5f64.ln()..=2f64.ln());
        Self { gamma: log_gamma.exp().clamp(0.5, 2.0), bias_amplitude: rng.gen_range(0.0..0.2), noise_sigma }
    }
}

/// Localized deformation `amplitude * (1 - r^2)^2 * direction` for `r < 1`,
/// with `r = |x - center| / radius` in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 3],
    pub radius: f64,
    pub amplitude: f64,
    pub direction: [f64; 3],
}

impl Bump {
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let r2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>() / (self.radius * self.radius);
        if r2 >= 1.0 {
            return [0.0; 3];
        }
        let norm = self.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        let s = self.amplitude * (1.0 - r2).powi(2) / norm;
        self.direction.map(|d| s * d)
    }

    /// Voxels strictly inside the bump support.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>() < self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Foreground classes (K - 1); picks entries of [`default_structures`].
    pub num_structures: usize,
    /// Overrides the default table when set.
    pub structures: Option<Vec<Structure>>,
    /// Max magnitude (voxels) of the smooth global random deformation.
    pub deformation_amplitude: f64,
    pub bump: Option<Bump>,
    pub style: Style,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::cube(48),
            spacing: [1.0; 3],
            num_structures: 4,
            structures: None,
            deformation_amplitude: 0.0,
            bump: None,
            style: Style::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn structures(&self) -> Result<Vec<Structure>> {
        let s = match &self.structures {
            Some(s) => s.clone(),
            None => {
                let table = default_structures();
                if self.num_structures == 0 || self.num_structures > table.len() {
                    return Err(Error::invalid(format!(
                        "num_structures must be in 1..={}, got {}",
                        table.len(),
                        self.num_structures
                    )));
                }
                table[..self.num_structures].to_vec()
            }
        };
        if s.is_empty() {
            return Err(Error::invalid("phantom needs at least one structure"));
        }
        for st in &s {
            for a in 0..3 {
                let lo = st.center[a] - st.radii[a];
                let hi = st.center[a] + st.radii[a];
                let lo = if a == 0 && st.mirrored_pair { lo.min(-hi) } else { lo };
                if st.radii[a] <= 0.0 || lo < -1.0 || hi > 1.0 {
                    return Err(Error::invalid(format!("structure {st:?} lies outside the volume")));
                }
            }
        }
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.deformation_amplitude < 0.0 {
            return Err(Error::invalid("deformation amplitude must be >= 0"));
        }
        if let Some(b) = &self.bump {
            if b.amplitude < 0.0 || b.radius <= 0.0 || b.direction.iter().all(|d| *d == 0.0) {
                return Err(Error::invalid("bump needs amplitude >= 0, radius > 0 and a direction"));
            }
        }
        if !(0.5..=2.0).contains(&self.style.gamma) {
            return Err(Error::invalid("gamma must be in [0.5, 2]"));
        }
        if self.style.bias_amplitude < 0.0 || self.style.bias_amplitude >= 1.0 || self.style.noise_sigma < 0.0 {
            return Err(Error::invalid("bias amplitude must be in [0, 1) and noise sigma >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelVolume,
    /// Ground-truth pull-back field, present when a deformation was requested.
    pub field: Option<DisplacementField>,
}

/// Anatomy sampled in voxel-centred coordinates (`q - (n - 1) / 2`).
struct Anatomy {
    half: [f64; 3],
    structures: Vec<([f64; 3], [f64; 3], f64, bool)>,
}

impl Anatomy {
    fn new(dims: Dims, structures: &[Structure]) -> Self {
        let half = dims.as_array().map(|n| (n as f64 - 1.0) / 2.0);
        let structures = structures
            .iter()
            .map(|s| {
                let c = [0, 1, 2].map(|a| s.center[a] * half[a]);
                let r = [0, 1, 2].map(|a| (s.radii[a] * half[a]).max(0.5));
                (c, r, s.intensity, s.mirrored_pair)
            })
            .collect();
        Self { half, structures }
    }

    fn membership(rel: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
        let rho = (0..3).map(|a| ((rel[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt();
        let rmin = r[0].min(r[1]).min(r[2]);
        let signed = (rho - 1.0) * rmin;
        1.0 / (1.0 + (signed / EDGE_SCALE).exp())
    }

    /// Base intensity in `(0, 1]` and label at centred coordinates `rel`.
    fn eval(&self, rel: [f64; 3]) -> (f64, u16) {
        let u = [0, 1, 2].map(|a| rel[a] / self.half[a].max(0.5));
        let texture: f64 = TEXTURE_MODES
            .iter()
            .map(|m| (0..3).map(|a| (m[a].0 * u[a] + m[a].1).cos()).product::<f64>())
            .sum();
        let ramp = (u[1] + u[2] + 2.0) / 4.0;
        let mut intensity = BACKGROUND_INTENSITY + BACKGROUND_RAMP * ramp + TEXTURE_AMPLITUDE / 3.0 * texture;
        let mut label = 0u16;
        for (k, &(c, r, mu, pair)) in self.structures.iter().enumerate() {
            let mut m = Self::membership(rel, c, r);
            if pair {
                let mirrored = [-c[0], c[1], c[2]];
                m = m.max(Self::membership(rel, mirrored, r));
            }
            intensity += m * (mu - intensity);
            if m >= 0.5 {
                label = k as u16 + 1;
            }
        }
        (intensity, label)
    }
}

/// Smooth random field: a few Gaussian blobs, rescaled to `amplitude` max magnitude.
fn smooth_random_field(dims: Dims, spacing: Spacing, amplitude: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    let n = dims.as_array().map(|v| v as f64);
    let blobs: Vec<([f64; 3], f64, [f64; 3])> = (0..5)
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.gen_range(0.2..0.8) * (n[a] - 1.0));
            let s = rng.gen_range(0.18..0.3) * n[0].min(n[1]).min(n[2]);
            let v = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
            (c, s, v)
        })
        .collect();
    let raw = DisplacementField::from_fn(dims, spacing, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let mut out = [0.0; 3];
        for (c, s, v) in &blobs {
            let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let g = (-d2 / (2.0 * s * s)).exp();
            for a in 0..3 {
                out[a] += g * v[a];
            }
        }
        out
    });
    let peak = raw.max_magnitude();
    if peak < 1e-12 || amplitude == 0.0 {
        return DisplacementField::zeros(dims, spacing);
    }
    raw.scaled(amplitude / peak)
}

/// Multiplicative bias: product of one low-order cosine mode per axis.
/// The x mode is even about the mid-sagittal plane.
fn bias_field(dims: Dims, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phases = [0.0, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)];
    let freqs = [1.0, rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
    let mut out = vec![1.0; dims.len()];
    if amplitude == 0.0 {
        return out;
    }
    let arr = dims.as_array();
    fill_voxels(&mut out, dims, |x, y, z| {
        let pos = [x, y, z];
        (0..3)
            .map(|a| {
                let centred = (2 * pos[a]) as f64 - (arr[a] as f64 - 1.0);
                let u = centred / (arr[a] as f64 - 1.0).max(1.0);
                1.0 + amplitude * (std::f64::consts::PI * freqs[a] * u + phases[a]).cos()
            })
            .product()
    });
    out
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let structures = spec.structures()?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let field = if spec.deformation_amplitude > 0.0 || spec.bump.is_some() {
        let mut f = smooth_random_field(dims, spec.spacing, spec.deformation_amplitude, &mut rng);
        if let Some(b) = &spec.bump {
            let bump = DisplacementField::from_fn(dims, spec.spacing, |x, y, z| b.displacement([x as f64, y as f64, z as f64]));
            f = f.add(&bump)?;
        }
        Some(f)
    } else {
        None
    };

    let anatomy = Anatomy::new(dims, &structures);
    let arr = dims.as_array();
    let mut packed = vec![(0.0, 0u16); dims.len()];
    fill_voxels(&mut packed, dims, |x, y, z| {
        let pos = [x, y, z];
        let rel = match &field {
            None => [0, 1, 2].map(|a| ((2 * pos[a]) as f64 - (arr[a] as f64 - 1.0)) / 2.0),
            Some(f) => {
                let d = f.at(dims.index(x, y, z));
                [0, 1, 2].map(|a| pos[a] as f64 + d[a] - anatomy.half[a])
            }
        };
        anatomy.eval(rel)
    });

    let bias = bias_field(dims, spec.style.bias_amplitude, &mut rng);
    let gamma = spec.style.gamma;
    let mut data: Vec<f64> = packed.iter().zip(&bias).map(|(&(v, _), b)| v.powf(gamma) * b).collect();
    if spec.style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.style.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let labels = packed.iter().map(|p| p.1).collect();
    Ok(Phantom {
        image: Volume::new(dims, spec.spacing, data)?,
        labels: LabelVolume::new(dims, spec.spacing, structures.len() + 1, labels)?,
        field,
    })
}

/// Rotation (degrees, about x then y then z), per-axis scale and shift (voxels)
/// of an affine resampling about the volume centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: [f64; 3],
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self { rotation_deg: [0.0; 3], scale: [1.0; 3], shift: [0.0; 3] }
    }
}

impl AffineParams {
    pub fn random(rng: &mut impl Rng, max_rot_deg: f64, max_scale: f64, max_shift: f64) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        Self {
            rotation_deg: [sym(max_rot_deg), sym(max_rot_deg), sym(max_rot_deg)],
            scale: [1.0 + sym(max_scale), 1.0 + sym(max_scale), 1.0 + sym(max_scale)],
            shift: [sym(max_shift), sym(max_shift), sym(max_shift)],
        }
    }

    /// Linear part `Rz * Ry * Rx * diag(scale)`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            m
        };
        let mut m = mul(rz, mul(ry, rx));
        for row in m.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.scale[j];
            }
        }
        m
    }

    fn is_identity_linear(&self) -> bool {
        self.rotation_deg == [0.0; 3] && self.scale == [1.0; 3]
    }

    /// Pull-back sampling position of voxel `p`.
    fn source(&self, m: &[[f64; 3]; 3], centre: [f64; 3], p: [f64; 3]) -> [f64; 3] {
        if self.is_identity_linear() {
            return [0, 1, 2].map(|a| p[a] + self.shift[a]);
        }
        let d = [0, 1, 2].map(|a| p[a] - centre[a]);
        [0, 1, 2].map(|i| (0..3).map(|j| m[i][j] * d[j]).sum::<f64>() + centre[i] + self.shift[i])
    }
}

/// Shared affine resampling: trilinear for intensities, one-hot trilinear
/// plus argmax for labels.
pub fn affine_resample(vol: &Volume, labels: &LabelVolume, params: &AffineParams) -> Result<(Volume, LabelVolume)> {
    crate::error::check_dims(vol.dims(), labels.dims())?;
    let dims = vol.dims();
    let m = params.matrix();
    let centre = dims.as_array().map(|n| (n as f64 - 1.0) / 2.0);
    let image = Volume::from_fn(dims, vol.spacing(), |x, y, z| {
        trilinear(vol.data(), dims, params.source(&m, centre, [x as f64, y as f64, z as f64]))
    });
    let one_hot = labels.one_hot();
    let k = labels.num_classes();
    let mut out = vec![0u16; dims.len()];
    fill_voxels(&mut out, dims, |x, y, z| {
        let p = params.source(&m, centre, [x as f64, y as f64, z as f64]);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..k {
            let v = trilinear(one_hot.channel(c), dims, p);
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best as u16
    });
    Ok((image, LabelVolume::new(dims, labels.spacing(), k, out)?))
}

/// Random affine augmentation, deterministic per seed.
pub fn random_affine(
    vol: &Volume,
    labels: &LabelVolume,
    max_rot_deg: f64,
    max_scale: f64,
    max_shift: f64,
    seed: u64,
) -> Result<(Volume, LabelVolume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AffineParams::random(&mut rng, max_rot_deg, max_scale, max_shift);
    affine_resample(vol, labels, &params)
}

/// A set of subjects sharing one anatomy: an undeformed atlas plus
/// unlabeled and test subjects with random smooth deformations, random
/// styles and an asymmetric bump in one hemisphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    pub dims: Dims,
    pub num_structures: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub deformation_amplitude: f64,
    /// Peak bump displacement in voxels; 0 disables the bump.
    pub bump_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            dims: Dims::cube(32),
            num_structures: 4,
            unlabeled: 3,
            test: 3,
            deformation_amplitude: 2.0,
            bump_amplitude: 3.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Family {
    pub atlas: Phantom,
    pub unlabeled: Vec<Phantom>,
    pub test: Vec<Phantom>,
}

/// Bump inside one hemisphere with a random direction, sized to the grid.
pub fn random_bump(dims: Dims, amplitude: f64, rng: &mut impl Rng) -> Bump {
    let n = dims.as_array().map(|v| v as f64);
    let left = rng.gen::<bool>();
    let fx = rng.gen_range(0.25..0.35);
    let center = [
        if left { fx * (n[0] - 1.0) } else { (1.0 - fx) * (n[0] - 1.0) },
        rng.gen_range(0.4..0.6) * (n[1] - 1.0),
        rng.gen_range(0.4..0.6) * (n[2] - 1.0),
    ];
    let radius = 0.25 * n[0].min(n[1]).min(n[2]);
    let direction = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let direction = if direction.iter().all(|d: &f64| d.abs() < 1e-3) { [0.0, 1.0, 0.0] } else { direction };
    Bump { center, radius, amplitude, direction }
}

pub fn make_family(spec: &FamilySpec) -> Result<Family> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let atlas = make_phantom(&PhantomSpec {
        dims: spec.dims,
        num_structures: spec.num_structures,
        style: Style { noise_sigma: spec.noise_sigma, ..Style::default() },
        seed: rng.gen(),
        ..PhantomSpec::default()
    })?;
    let subject = |rng: &mut ChaCha8Rng| {
        let bump = (spec.bump_amplitude > 0.0).then(|| random_bump(spec.dims, spec.bump_amplitude, rng));
        make_phantom(&PhantomSpec {
            dims: spec.dims,
            num_structures: spec.num_structures,
            deformation_amplitude: spec.deformation_amplitude,
            bump,
            style: Style::random(rng, spec.noise_sigma),
            seed: rng.gen(),
            ..PhantomSpec::default()
        })
    };
    let unlabeled = (0..spec.unlabeled).map(|_| subject(&mut rng)).collect::<Result<Vec<_>>>()?;
    let test = (0..spec.test).map(|_| subject(&mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(Family { atlas, unlabeled, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Mirror;

    fn small() -> PhantomSpec {
        PhantomSpec { dims: Dims::new(21, 18, 16), ..PhantomSpec::default() }
    }

    #[test]
    fn symmetric_when_undeformed() {
        let p = make_phantom(&small()).unwrap();
        assert_eq!(p.image.mirror(), p.image);
        assert_eq!(p.labels.mirror(), p.labels);
        assert!(p.field.is_none());
        let even = make_phantom(&PhantomSpec { dims: Dims::new(20, 18, 16), ..PhantomSpec::default() }).unwrap();
        assert_eq!(even.image.mirror(), even.image);
    }

    #[test]
    fn symmetric_bias_keeps_mirror_symmetry() {
        let mut spec = small();
        spec.style.bias_amplitude = 0.15;
        spec.style.gamma = 1.4;
        let p = make_phantom(&spec).unwrap();
        assert_eq!(p.image.mirror(), p.image);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut spec = small();
        spec.deformation_amplitude = 2.0;
        spec.style.noise_sigma = 0.02;
        spec.seed = 11;
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.field, b.field);
    }

    #[test]
    fn bump_peak_at_center() {
        let mut spec = small();
        spec.bump = Some(Bump { center: [5.0, 9.0, 8.0], radius: 5.0, amplitude: 3.0, direction: [0.0, 1.0, 1.0] });
        let p = make_phantom(&spec).unwrap();
        let f = p.field.unwrap();
        let at = f.at(spec.dims.index(5, 9, 8));
        let mag = (at[0] * at[0] + at[1] * at[1] + at[2] * at[2]).sqrt();
        assert!((mag - 3.0).abs() < 1e-6);
        assert!((f.max_magnitude() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_bounds_structure_rejected() {
        let spec = PhantomSpec {
            structures: Some(vec![Structure::new([0.9, 0.0, 0.0], [0.3, 0.1, 0.1], 0.5, false)]),
            ..small()
        };
        assert!(make_phantom(&spec).is_err());
        assert!(make_phantom(&PhantomSpec { num_structures: 9, ..small() }).is_err());
    }

    #[test]
    fn identity_affine_and_integer_shift() {
        let p = make_phantom(&small()).unwrap();
        let (v, l) = affine_resample(&p.image, &p.labels, &AffineParams::default()).unwrap();
        assert_eq!(v, p.image);
        assert_eq!(l, p.labels);
        let shift = AffineParams { shift: [2.0, 0.0, -1.0], ..AffineParams::default() };
        let (v, l) = affine_resample(&p.image, &p.labels, &shift).unwrap();
        assert_eq!(v.get(3, 4, 5), p.image.get(5, 4, 4));
        assert_eq!(l.get(3, 4, 5), p.labels.get(5, 4, 4));
    }

    #[test]
    fn labels_detectable_against_noise() {
        let mut spec = small();
        spec.style.noise_sigma = 0.02;
        let p = make_phantom(&spec).unwrap();
        let k = p.labels.num_classes();
        let mean = |c: u16| {
            let v: Vec<f64> = p.image.data().iter().zip(p.labels.data()).filter(|(_, &l)| l == c).map(|(v, _)| *v).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let bg = mean(0);
        for c in 1..k as u16 {
            assert!((mean(c) - bg).abs() >= 3.0 * 0.02, "class {c}");
        }
    }
}
