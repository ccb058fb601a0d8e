mod common;

use common::rng;
use mirrorseg::perception::perceive;
use mirrorseg::phantom::{make_family, make_phantom, FamilySpec, PhantomSpec, Style};
use mirrorseg::registration::RegConfig;
use mirrorseg::style::{confidence_bins, fft3, ist, wist};
use mirrorseg::volume::warp;
use mirrorseg::{Dims, Volume};
use proptest::prelude::*;
use rand::Rng;

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

/// Same anatomy in two different appearances.
fn styled_pair(n: usize, seed: u64) -> (Volume, Volume) {
    let dims = Dims::cube(n);
    let a = make_phantom(&PhantomSpec { dims, seed, ..PhantomSpec::default() }).unwrap();
    let style = Style::random(&mut rng(seed ^ 0x5eed), 0.02);
    let u = make_phantom(&PhantomSpec { dims, style, deformation_amplitude: 2.0, seed: seed + 1, ..PhantomSpec::default() }).unwrap();
    (a.image, u.image)
}

#[test]
fn zero_strength_is_identity() {
    let (a, u) = styled_pair(20, 1);
    let out = ist(&a, &u, 0.0).unwrap();
    let err = rms(out.data().iter().zip(a.data()).map(|(x, y)| x - y)) / rms(a.data().iter().copied());
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn full_strength_takes_the_target_amplitude() {
    let (a, u) = styled_pair(20, 2);
    let out_amp = fft3(&ist(&a, &u, 1.0).unwrap()).amplitude();
    let target = fft3(&u).amplitude();
    let err = rms(out_amp.iter().zip(&target).map(|(x, y)| x - y)) / rms(target.iter().copied());
    assert!(err <= 1e-3, "{err}");
}

fn wrapped(d: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = d.rem_euclid(t);
    r.min(t - r)
}

#[test]
fn phase_comes_from_the_warped_atlas() {
    let (a, u) = styled_pair(18, 3);
    let pa = fft3(&a).phase();
    for beta in [0.3, 0.7, 1.0] {
        let spec = fft3(&ist(&a, &u, beta).unwrap());
        let amp = spec.amplitude();
        let max = amp.iter().copied().fold(0.0, f64::max);
        let po = spec.phase();
        for i in (0..amp.len()).filter(|i| amp[*i] > 1e-6 * max) {
            assert!(wrapped(po[i] - pa[i]) <= 1e-3, "beta {beta} freq {i}");
        }
    }
}

#[test]
fn amplitude_is_the_linear_mix() {
    let (a, u) = styled_pair(16, 4);
    let (aa, au) = (fft3(&a).amplitude(), fft3(&u).amplitude());
    let beta = 0.4;
    let out = fft3(&ist(&a, &u, beta).unwrap()).amplitude();
    let scale = au.iter().copied().fold(0.0, f64::max);
    for i in 0..out.len() {
        assert!((out[i] - ((1.0 - beta) * aa[i] + beta * au[i])).abs() <= 1e-9 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identical_inputs_are_reproduced(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let v = common::smooth_volume(Dims::new(9, 8, 7), seed);
        let out = ist(&v, &v, beta).unwrap();
        for (x, y) in out.data().iter().zip(v.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn bins_partition_the_volume(seed in any::<u64>(), n in 1usize..12) {
        let dims = Dims::new(7, 6, 5);
        let mut r = rng(seed);
        let c = Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
        let masks = confidence_bins(&c, n).unwrap();
        let total: usize = (0..n).map(|b| masks.count(b)).sum();
        prop_assert_eq!(total, dims.len());
        for (i, &b) in masks.assignment().iter().enumerate() {
            let v = c.data()[i];
            prop_assert!(b as f64 / n as f64 <= v);
            prop_assert!(v < (b + 1) as f64 / n as f64 || (v == 1.0 && b as usize == n - 1));
        }
    }
}

#[test]
fn weighted_transfer_is_per_bin_transfer() {
    let (a, u) = styled_pair(16, 5);
    let dims = a.dims();
    let mut r = rng(6);
    let c = Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
    let out = wist(&a, &u, &c, 10, &mut rng(7)).unwrap();
    let masks = confidence_bins(&c, 10).unwrap();
    for (n, beta) in out.betas.iter().enumerate() {
        assert!((n as f64 / 10.0..(n + 1) as f64 / 10.0).contains(beta));
        let single = ist(&a, &u, *beta).unwrap();
        for i in (0..dims.len()).filter(|i| masks.assignment()[*i] as usize == n) {
            assert_eq!(out.image.data()[i], single.data()[i]);
        }
    }
}

#[test]
fn single_bin_and_full_confidence_collapse_to_plain_transfer() {
    let (a, u) = styled_pair(16, 8);
    let dims = a.dims();
    let mut r = rng(9);
    let c = Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
    let one = wist(&a, &u, &c, 1, &mut rng(10)).unwrap();
    assert_eq!(one.betas.len(), 1);
    assert_eq!(one.image, ist(&a, &u, one.betas[0]).unwrap());

    let full = wist(&a, &u, &Volume::filled(dims, [1.0; 3], 1.0), 10, &mut rng(11)).unwrap();
    assert!(full.betas[9] >= 0.9 && full.betas[9] < 1.0);
    assert_eq!(full.image, ist(&a, &u, full.betas[9]).unwrap());
}

#[test]
fn weighted_transfer_is_deterministic() {
    let (a, u) = styled_pair(16, 12);
    let c = Volume::from_fn(a.dims(), [1.0; 3], |x, y, _| ((x + y) as f64 / 30.0).min(1.0));
    let first = wist(&a, &u, &c, 10, &mut rng(13)).unwrap();
    let second = wist(&a, &u, &c, 10, &mut rng(13)).unwrap();
    assert_eq!(first.image, second.image);
    assert_eq!(first.betas, second.betas);
}

#[test]
fn low_confidence_regions_stay_close_to_the_atlas() {
    let mut low_voxels = 0;
    for seed in 0..10u64 {
        let fam = make_family(&FamilySpec { dims: Dims::cube(20), unlabeled: 1, test: 0, seed, ..FamilySpec::default() }).unwrap();
        let (atlas, subject) = (&fam.atlas.image, &fam.unlabeled[0].image);
        let cfg = RegConfig { steps_per_level: 20, seed, ..RegConfig::default() };
        let pack = perceive(atlas, subject, &cfg, None).unwrap();
        let warped = warp(atlas, &pack.phi).unwrap();
        let mut r = rng(seed);
        let w = wist(&warped, subject, &pack.confidence, 10, &mut r).unwrap();
        let strong = ist(&warped, subject, r.gen_range(0.9..1.0)).unwrap();
        let low: Vec<usize> = (0..warped.data().len()).filter(|i| pack.confidence.data()[*i] < 0.3).collect();
        low_voxels += low.len();
        let dev = |v: &Volume| rms(low.iter().map(|&i| v.data()[i] - warped.data()[i]));
        assert!(dev(&w.image) <= dev(&strong), "seed {seed}");
    }
    assert!(low_voxels > 0);
}
