mod common;

use common::phantom;
use mirrorseg::phantom::{affine_resample, make_family, make_phantom, random_bump, AffineParams, FamilySpec, PhantomSpec};
use mirrorseg::volume::warp_labels_nearest;
use mirrorseg::{Dims, LabelVolume, Mirror, Volume};

fn label_centroid(l: &LabelVolume, class: u16) -> [f64; 3] {
    let d = l.dims();
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for i in 0..d.len() {
        if l.data()[i] == class {
            let (x, y, z) = d.coords(i);
            s = [s[0] + x as f64, s[1] + y as f64, s[2] + z as f64];
            n += 1.0;
        }
    }
    s.map(|v| v / n)
}

fn weighted_centroid(v: &Volume) -> [f64; 3] {
    let d = v.dims();
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        let w = v.data()[i];
        s = [s[0] + w * x as f64, s[1] + w * y as f64, s[2] + w * z as f64];
        n += w;
    }
    s.map(|c| c / n)
}

#[test]
fn affine_moves_labels_and_intensities_together() {
    let p = phantom(32);
    let params = AffineParams { rotation_deg: [6.0, -4.0, 9.0], scale: [1.05, 0.95, 1.0], shift: [1.5, -0.7, 0.4] };
    let (_, lab) = affine_resample(&p.image, &p.labels, &params).unwrap();
    let one_hot = p.labels.one_hot();
    for class in 1..p.labels.num_classes() as u16 {
        // The class indicator sent through the intensity path.
        let indicator = Volume::new(p.image.dims(), p.image.spacing(), one_hot.channel(class as usize).to_vec()).unwrap();
        let (img, _) = affine_resample(&indicator, &p.labels, &params).unwrap();
        let a = label_centroid(&lab, class);
        let b = weighted_centroid(&img);
        let d = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 0.5, "class {class}: {d}");
        // The structure actually moved.
        let before = label_centroid(&p.labels, class);
        assert!((0..3).map(|k| (a[k] - before[k]).abs()).fold(0.0, f64::max) > 0.3);
    }
}

#[test]
fn symmetric_phantoms_are_mirror_fixed_points() {
    for n in [17, 24] {
        let p = phantom(n);
        assert_eq!(p.image.mirror(), p.image);
        assert_eq!(p.labels.mirror(), p.labels);
    }
}

#[test]
fn deformed_labels_follow_the_returned_field() {
    let dims = Dims::cube(32);
    let base = make_phantom(&PhantomSpec { dims, seed: 3, ..PhantomSpec::default() }).unwrap();
    let bump = random_bump(dims, 3.0, &mut common::rng(4));
    let deformed =
        make_phantom(&PhantomSpec { dims, deformation_amplitude: 2.0, bump: Some(bump), seed: 3, ..PhantomSpec::default() }).unwrap();
    let field = deformed.field.expect("field returned");
    assert!(field.max_magnitude() > 1.0);
    let warped = warp_labels_nearest(&base.labels, &field).unwrap();
    let agree = warped.data().iter().zip(deformed.labels.data()).filter(|(a, b)| a == b).count();
    assert!(agree as f64 >= 0.97 * dims.len() as f64, "{agree}");
}

#[test]
fn families_are_deterministic_and_shaped() {
    let spec = FamilySpec { dims: Dims::cube(16), unlabeled: 2, test: 3, seed: 11, ..FamilySpec::default() };
    let a = make_family(&spec).unwrap();
    let b = make_family(&spec).unwrap();
    assert_eq!(a.unlabeled.len(), 2);
    assert_eq!(a.test.len(), 3);
    assert_eq!(a.atlas.image, b.atlas.image);
    for (x, y) in a.test.iter().zip(&b.test) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.labels, y.labels);
    }
    let c = make_family(&FamilySpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a.unlabeled[0].image, c.unlabeled[0].image);
}
