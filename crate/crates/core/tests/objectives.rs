mod common;

use common::{random_labels, random_prob, rng, smooth_volume};
use mirrorseg::metrics::dice_score;
use mirrorseg::objectives::{cgd_loss, dice_loss, nlcc_loss, pearson, smoothness_loss, soft_dice, weak_loss, NLCC_WINDOW};
use mirrorseg::volume::build_mirror_field;
use mirrorseg::{Dims, DisplacementField, Volume};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn nlcc_self_similarity_on_phantom() {
    let p = common::phantom(24);
    let v = nlcc_loss(&p.image, &p.image, NLCC_WINDOW).unwrap().value;
    assert!((v + 1.0).abs() <= 1e-6, "{v}");
    let affine = p.image.map(|x| 2.5 * x - 0.7);
    let w = nlcc_loss(&p.image, &affine, NLCC_WINDOW).unwrap().value;
    assert!((w + 1.0).abs() <= 1e-6, "{w}");
}

#[test]
fn nlcc_of_independent_noise_is_small() {
    let dims = Dims::cube(64);
    let mut r = rng(3);
    let mut noise = || {
        let data: Vec<f64> = (0..dims.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    };
    let (a, b) = (noise(), noise());
    let v = nlcc_loss(&a, &b, NLCC_WINDOW).unwrap().value;
    assert!(v > -0.05 && v < 0.0, "{v}");
}

#[test]
fn nlcc_affine_invariance() {
    let dims = Dims::cube(16);
    let a = smooth_volume(dims, 1);
    let b = smooth_volume(dims, 2);
    let base = nlcc_loss(&a, &b, 5).unwrap().value;
    let scaled = nlcc_loss(&a.map(|x| 3.0 * x + 1.0), &b.map(|x| 0.5 * x - 2.0), 5).unwrap().value;
    assert!((base - scaled).abs() <= 1e-6);
    assert!((-1.0..=0.0).contains(&base));
}

#[test]
fn smoothness_closed_forms() {
    let dims = Dims::new(10, 6, 5);
    let s = 0.3;
    let phi = DisplacementField::from_fn(dims, [1.0; 3], |x, _, _| [s * x as f64, 0.0, 0.0]);
    let expected = s * s * (dims.nx - 1) as f64 / dims.nx as f64;
    assert!((smoothness_loss(&phi).value - expected).abs() < 1e-12);
    let mirror = build_mirror_field(dims, [1.0; 3]);
    let expected = 4.0 * (dims.nx - 1) as f64 / dims.nx as f64;
    assert!((smoothness_loss(&mirror).value - expected).abs() < 1e-12);
    assert_eq!(smoothness_loss(&DisplacementField::constant(dims, [1.0; 3], [1.0, 2.0, 3.0])).value, 0.0);
}

#[test]
fn cgd_with_unit_confidence_is_plain_dice_bit_exact() {
    let dims = Dims::cube(8);
    let p = random_prob(dims, 4, 1);
    let q = random_prob(dims, 4, 2);
    let ones = Volume::filled(dims, [1.0; 3], 1.0);
    assert_eq!(cgd_loss(&ones, &p, &q).unwrap(), dice_loss(&p, &q).unwrap());
}

#[test]
fn hard_set_half_overlap() {
    let dims = Dims::new(4, 1, 1);
    let a = mirrorseg::LabelVolume::new(dims, [1.0; 3], 2, vec![1, 1, 0, 0]).unwrap().one_hot();
    let b = mirrorseg::LabelVolume::new(dims, [1.0; 3], 2, vec![0, 1, 1, 0]).unwrap().one_hot();
    assert!((soft_dice(&a, &b, None).unwrap() - 0.5).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_ranges(seed in any::<u64>(), k in 2usize..5) {
        let dims = Dims::new(5, 4, 3);
        let p = random_prob(dims, k, seed);
        let q = random_prob(dims, k, seed ^ 7);
        let mut r = rng(seed);
        let c = Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let d = soft_dice(&p, &q, None).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
        let cgd = cgd_loss(&c, &p, &q).unwrap().value;
        prop_assert!((-1.0..0.0).contains(&cgd));
        let weak = weak_loss(&p, &q).unwrap().value;
        prop_assert!((-1.0..0.0).contains(&weak));
    }

    #[test]
    fn soft_dice_is_symmetric(seed in any::<u64>()) {
        let dims = Dims::new(4, 4, 3);
        let p = random_prob(dims, 3, seed);
        let q = random_prob(dims, 3, seed ^ 9);
        let mut r = rng(seed);
        let w = Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        prop_assert_eq!(soft_dice(&p, &q, Some(&w)).unwrap(), soft_dice(&q, &p, Some(&w)).unwrap());
    }

    #[test]
    fn nlcc_range(seed in any::<u64>()) {
        let dims = Dims::cube(7);
        let mut r = rng(seed);
        let mut vol = || Volume::new(dims, [1.0; 3], (0..dims.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let (a, b) = (vol(), vol());
        let v = nlcc_loss(&a, &b, 3).unwrap().value;
        prop_assert!((-1.0..=0.0).contains(&v));
    }

    #[test]
    fn pearson_affine(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-9);
        let z: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn hard_dice_matches_soft_on_one_hot(seed in any::<u64>()) {
        let dims = Dims::cube(6);
        let a = random_labels(dims, 3, seed);
        let b = random_labels(dims, 3, seed ^ 5);
        let hard = (1..3u16).map(|c| dice_score(&a, &b, c).unwrap()).sum::<f64>() / 2.0;
        let soft = soft_dice(&a.one_hot(), &b.one_hot(), None).unwrap();
        prop_assert!((hard - soft).abs() <= 1e-4);
    }
}
