//! Hard-mask evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::volume::LabelVolume;

/// Set Dice `2|A n B| / (|A| + |B|)` for one class; 1 when both are empty.
pub fn dice_score(a: &LabelVolume, b: &LabelVolume, class: u16) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (la == class, lb == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HausdorffMode {
    /// `max_a min_b |a - b|`, surfaces of `a` against `b`.
    Directed,
    /// Max of both directed distances.
    #[default]
    Symmetric,
}

/// Surface voxels of `class`: members with at least one 6-neighbour outside
/// the class; the volume border counts as outside.
pub fn surface_voxels(labels: &LabelVolume, class: u16) -> Vec<[usize; 3]> {
    let dims = labels.dims();
    let [nx, ny, nz] = dims.as_array();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels.get(x, y, z) != class {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let exposed = border
                    || labels.get(x - 1, y, z) != class
                    || labels.get(x + 1, y, z) != class
                    || labels.get(x, y - 1, z) != class
                    || labels.get(x, y + 1, z) != class
                    || labels.get(x, y, z - 1) != class
                    || labels.get(x, y, z + 1) != class;
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn sq_dist_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let d = (a[i] as f64 - b[i] as f64) * spacing[i];
            d * d
        })
        .sum()
}

/// Directed surface distance with early exit: once a point of `from` is
/// within the running maximum of some point of `to`, it cannot raise it.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut worst = 0.0f64;
    for &a in from {
        let mut best = f64::INFINITY;
        for &b in to {
            let d = sq_dist_mm(a, b, spacing);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Hausdorff distance in mm between the class surfaces of two masks.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume, class: u16, mode: HausdorffMode) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let sa = surface_voxels(a, class);
    let sb = surface_voxels(b, class);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptySet(class as usize));
    }
    let spacing = a.spacing();
    let ab = directed(&sa, &sb, spacing);
    Ok(match mode {
        HausdorffMode::Directed => ab,
        HausdorffMode::Symmetric => ab.max(directed(&sb, &sa, spacing)),
    })
}

/// Per-class metrics of one case. Hausdorff entries are `None` where a class
/// is missing from either mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: Vec<f64>,
    pub hd_sym_mm: Vec<Option<f64>>,
    pub hd_dir_mm: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_hd_sym_mm: Option<f64>,
}

impl MetricReport {
    /// Evaluate foreground classes `1..K` of `pred` against `truth`.
    pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        check_dims(pred.dims(), truth.dims())?;
        let k = truth.num_classes().max(pred.num_classes());
        let mut dice = Vec::new();
        let mut hd_sym_mm = Vec::new();
        let mut hd_dir_mm = Vec::new();
        for class in 1..k as u16 {
            dice.push(dice_score(pred, truth, class)?);
            hd_sym_mm.push(hausdorff(pred, truth, class, HausdorffMode::Symmetric).ok());
            hd_dir_mm.push(hausdorff(pred, truth, class, HausdorffMode::Directed).ok());
        }
        let mean_dice = dice.iter().sum::<f64>() / dice.len().max(1) as f64;
        let defined: Vec<f64> = hd_sym_mm.iter().flatten().copied().collect();
        let mean_hd_sym_mm = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self { dice, hd_sym_mm, hd_dir_mm, mean_dice, mean_hd_sym_mm })
    }

    /// CSV rows `case,class,dice,hd_sym_mm,hd_dir_mm` (no header).
    pub fn csv_rows(&self, case: &str) -> Vec<String> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        (0..self.dice.len())
            .map(|i| format!("{case},{},{:.6},{},{}", i + 1, self.dice[i], fmt(self.hd_sym_mm[i]), fmt(self.hd_dir_mm[i])))
            .collect()
    }
}

pub const METRICS_CSV_HEADER: &str = "case,class,dice,hd_sym_mm,hd_dir_mm";

/// Mean foreground Dice of one case.
pub fn mean_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    check_dims(pred.dims(), truth.dims())?;
    let k = truth.num_classes();
    let mut s = 0.0;
    for class in 1..k as u16 {
        s += dice_score(pred, truth, class)?;
    }
    Ok(s / (k - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn mask(dims: Dims, on: &[[usize; 3]]) -> LabelVolume {
        let mut d = vec![0u16; dims.len()];
        for p in on {
            d[dims.index(p[0], p[1], p[2])] = 1;
        }
        LabelVolume::new(dims, [1.0; 3], 2, d).unwrap()
    }

    #[test]
    fn dice_cases() {
        let dims = Dims::new(4, 1, 1);
        let a = mask(dims, &[[0, 0, 0], [1, 0, 0]]);
        let b = mask(dims, &[[1, 0, 0], [2, 0, 0]]);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let c = mask(dims, &[[3, 0, 0]]);
        assert_eq!(dice_score(&a, &c, 1).unwrap(), 0.0);
        let e = mask(dims, &[]);
        assert_eq!(dice_score(&e, &e, 1).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_single_voxels() {
        let dims = Dims::cube(6);
        let a = mask(dims, &[[1, 2, 2]]);
        let b = mask(dims, &[[4, 2, 2]]);
        assert_eq!(hausdorff(&a, &b, 1, HausdorffMode::Symmetric).unwrap(), 3.0);
        assert_eq!(hausdorff(&a, &a, 1, HausdorffMode::Symmetric).unwrap(), 0.0);
        let e = mask(dims, &[]);
        assert!(matches!(hausdorff(&a, &e, 1, HausdorffMode::Directed), Err(Error::EmptySet(1))));
    }

    #[test]
    fn hausdorff_uses_spacing() {
        let dims = Dims::cube(6);
        let mut a = mask(dims, &[[1, 2, 2]]);
        let mut b = mask(dims, &[[4, 2, 2]]);
        a = LabelVolume::new(dims, [2.0, 1.0, 1.0], 2, a.data().to_vec()).unwrap();
        b = LabelVolume::new(dims, [2.0, 1.0, 1.0], 2, b.data().to_vec()).unwrap();
        assert_eq!(hausdorff(&a, &b, 1, HausdorffMode::Directed).unwrap(), 6.0);
    }

    #[test]
    fn report_rows() {
        let dims = Dims::cube(4);
        let a = mask(dims, &[[1, 1, 1], [2, 1, 1]]);
        let r = MetricReport::evaluate(&a, &a).unwrap();
        assert_eq!(r.dice, vec![1.0]);
        assert_eq!(r.csv_rows("c0"), vec!["c0,1,1.000000,0.000000,0.000000".to_string()]);
    }
}
