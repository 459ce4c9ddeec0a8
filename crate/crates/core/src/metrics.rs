//! Overlap, boundary and volume metrics for binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::distance_sq_3d;
use crate::volume_io::{Mask, RecistAnnotation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Precision and recall; an empty denominator scores 1 only when the
    /// other mask is empty too.
    pub fn precision_recall(&self) -> (f64, f64) {
        let ratio = |num: u64, denom: u64, other_empty: bool| {
            if denom > 0 {
                num as f64 / denom as f64
            } else if other_empty {
                1.0
            } else {
                0.0
            }
        };
        let gt_empty = self.tp + self.fn_ == 0;
        let pred_empty = self.tp + self.fp == 0;
        (
            ratio(self.tp, self.tp + self.fp, gt_empty),
            ratio(self.tp, self.tp + self.fn_, pred_empty),
        )
    }

    /// `1 - (FN - FP) / (2TP + FP + FN)`; may exceed 1 when over-segmenting.
    pub fn volumetric_similarity(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            1.0 - (self.fn_ as f64 - self.fp as f64) / denom as f64
        }
    }
}

fn check_dims(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

pub fn precision_recall(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    Ok(confusion(pred, gt)?.precision_recall())
}

pub fn volumetric_similarity(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.volumetric_similarity())
}

/// Foreground voxels with a background face neighbor. Neighbors outside the
/// grid count as background; the z neighbors only exist for volumes with
/// more than one slice.
pub fn boundary(mask: &Mask) -> Vec<bool> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let mut out = vec![false; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(x, y, z);
                if data[i] == 0 {
                    continue;
                }
                let bg = |x: Option<usize>, y: Option<usize>, z: Option<usize>| match (x, y, z) {
                    (Some(x), Some(y), Some(z)) if x < nx && y < ny && z < nz => data[idx(x, y, z)] == 0,
                    _ => true,
                };
                let mut edge = bg(x.checked_sub(1), Some(y), Some(z))
                    || bg(Some(x + 1), Some(y), Some(z))
                    || bg(Some(x), y.checked_sub(1), Some(z))
                    || bg(Some(x), Some(y + 1), Some(z));
                if nz > 1 {
                    edge = edge || bg(Some(x), Some(y), z.checked_sub(1)) || bg(Some(x), Some(y), Some(z + 1));
                }
                out[i] = edge;
            }
        }
    }
    out
}

fn directed_mean(from: &[bool], to_dist_sq: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&b, &d) in from.iter().zip(to_dist_sq) {
        if b {
            sum += d.sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

/// Averaged Hausdorff distance in mm: the larger of the two directed mean
/// boundary-to-boundary distances.
pub fn avg_hausdorff(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<f64> {
    check_dims(pred, gt)?;
    if pred.count() == 0 {
        return Err(Error::AvdUndefined("prediction"));
    }
    if gt.count() == 0 {
        return Err(Error::AvdUndefined("ground truth"));
    }
    let dims = pred.dims();
    let bp = boundary(pred);
    let bg = boundary(gt);
    let to_gt = distance_sq_3d(&bg, dims, spacing);
    let to_pred = distance_sq_3d(&bp, dims, spacing);
    Ok(directed_mean(&bp, &to_gt).max(directed_mean(&bg, &to_pred)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub volumetric_similarity: f64,
    /// `None` when either mask is empty.
    pub avd_mm: Option<f64>,
}

pub fn score(pred: &Mask, gt: &Mask) -> Result<SegmentationScores> {
    let c = confusion(pred, gt)?;
    let (precision, recall) = c.precision_recall();
    let avd_mm = match avg_hausdorff(pred, gt, gt.spacing_mm()) {
        Ok(v) => Some(v),
        Err(Error::AvdUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SegmentationScores {
        dice: c.dice(),
        precision,
        recall,
        volumetric_similarity: c.volumetric_similarity(),
        avd_mm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation; NaN for an empty sample.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
        n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub volumetric_similarity: MeanStd,
    /// Over the cases where AVD is defined.
    pub avd_mm: MeanStd,
}

pub fn summarize(scores: &[SegmentationScores]) -> ScoreSummary {
    let col = |f: fn(&SegmentationScores) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>());
    ScoreSummary {
        dice: col(|s| s.dice),
        precision: col(|s| s.precision),
        recall: col(|s| s.recall),
        volumetric_similarity: col(|s| s.volumetric_similarity),
        avd_mm: mean_std(&scores.iter().filter_map(|s| s.avd_mm).collect::<Vec<_>>()),
    }
}

/// `pi * L * W^2 / 6` for diameters in mm.
pub fn ellipsoid_volume_from_lengths(long_mm: f64, short_mm: f64) -> Result<f64> {
    if !(long_mm >= 0.0) || !(short_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lengths must be non-negative, got {long_mm} and {short_mm}"
        )));
    }
    Ok(std::f64::consts::PI * long_mm * short_mm * short_mm / 6.0)
}

pub fn ellipsoid_volume(annotation: &RecistAnnotation, spacing: [f64; 3]) -> Result<f64> {
    ellipsoid_volume_from_lengths(
        annotation.long_length_mm(spacing),
        annotation.short_length_mm(spacing),
    )
}

/// Voxel count times voxel volume.
pub fn mask_volume(mask: &Mask) -> f64 {
    let [sx, sy, sz] = mask.spacing_mm();
    mask.count() as f64 * sx * sy * sz
}

#[derive(Clone, Debug)]
pub enum Measurement {
    Mask(Mask),
    Recist {
        annotation: RecistAnnotation,
        spacing_mm: [f64; 3],
    },
}

impl Measurement {
    pub fn volume_mm3(&self) -> Result<f64> {
        match self {
            Measurement::Mask(m) => Ok(mask_volume(m)),
            Measurement::Recist {
                annotation,
                spacing_mm,
            } => ellipsoid_volume(annotation, *spacing_mm),
        }
    }
}

/// One follow-up case: baseline and follow-up measured by the method under
/// test and by the reference.
#[derive(Clone, Debug)]
pub struct VolumeCase {
    pub id: String,
    pub method: (Measurement, Measurement),
    pub reference: (Measurement, Measurement),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeChangeRow {
    pub id: String,
    pub method_baseline_mm3: f64,
    pub method_followup_mm3: f64,
    pub method_delta_mm3: f64,
    pub reference_baseline_mm3: f64,
    pub reference_followup_mm3: f64,
    pub reference_delta_mm3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeChangeReport {
    pub rows: Vec<VolumeChangeRow>,
    /// Method deltas regressed on reference deltas.
    pub fit: LineFit,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} x values, {} y values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidParameter(
            "a line fit needs at least 2 pairs".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidParameter(
            "reference values are all equal; slope undefined".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (slope * a + intercept);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LineFit {
        slope,
        intercept,
        r_squared,
    })
}

pub fn volume_change_report(cases: &[VolumeCase]) -> Result<VolumeChangeReport> {
    if cases.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "volume change needs at least 2 pairs, got {}",
            cases.len()
        )));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let mb = c.method.0.volume_mm3()?;
        let mf = c.method.1.volume_mm3()?;
        let rb = c.reference.0.volume_mm3()?;
        let rf = c.reference.1.volume_mm3()?;
        rows.push(VolumeChangeRow {
            id: c.id.clone(),
            method_baseline_mm3: mb,
            method_followup_mm3: mf,
            method_delta_mm3: mf - mb,
            reference_baseline_mm3: rb,
            reference_followup_mm3: rf,
            reference_delta_mm3: rf - rb,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.reference_delta_mm3).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.method_delta_mm3).collect();
    let fit = fit_line(&x, &y)?;
    Ok(VolumeChangeReport { rows, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask2d(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut data = vec![0u8; w * h];
        for &(x, y) in on {
            data[y * w + x] = 1;
        }
        Mask::new([w, h, 1], [1.0, 1.0, 1.0], data).unwrap()
    }

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn formula_examples() {
        assert!((counts(50, 10, 10).dice() - 100.0 / 120.0).abs() < 1e-15);
        assert!((counts(50, 0, 20).volumetric_similarity() - (1.0 - 20.0 / 120.0)).abs() < 1e-15);
        assert!((counts(100, 20, 0).volumetric_similarity() - (1.0 + 20.0 / 220.0)).abs() < 1e-15);
        assert_eq!(counts(30, 7, 7).volumetric_similarity(), 1.0);
    }

    #[test]
    fn empty_conventions() {
        let e = mask2d(4, 4, &[]);
        let a = mask2d(4, 4, &[(1, 1)]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(precision_recall(&e, &e).unwrap(), (1.0, 1.0));
        assert_eq!(volumetric_similarity(&e, &e).unwrap(), 1.0);
        assert_eq!(precision_recall(&e, &a).unwrap(), (0.0, 0.0));
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert!(matches!(avg_hausdorff(&e, &a, [1.0; 3]), Err(Error::AvdUndefined(_))));
        assert!(format!("{}", avg_hausdorff(&a, &e, [1.0; 3]).unwrap_err()).contains("AVD undefined"));
    }

    #[test]
    fn disjoint_and_mismatched() {
        let a = mask2d(4, 4, &[(0, 0)]);
        let b = mask2d(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert!(dice(&a, &mask2d(5, 4, &[])).is_err());
    }

    #[test]
    fn single_voxels_three_mm_apart() {
        let a = mask2d(8, 1, &[(1, 0)]);
        let b = mask2d(8, 1, &[(4, 0)]);
        assert!((avg_hausdorff(&a, &b, [1.0; 3]).unwrap() - 3.0).abs() < 1e-12);
        let a = Mask::new([1, 1, 4], [1.0, 1.0, 1.5], vec![1, 0, 0, 0]).unwrap();
        let b = Mask::new([1, 1, 4], [1.0, 1.0, 1.5], vec![0, 0, 1, 0]).unwrap();
        assert!((avg_hausdorff(&a, &b, [1.0, 1.0, 1.5]).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(avg_hausdorff(&a, &a, [1.0, 1.0, 1.5]).unwrap(), 0.0);
    }

    #[test]
    fn boundary_of_square() {
        let on: Vec<_> = (1..5).flat_map(|y| (1..5).map(move |x| (x, y))).collect();
        let m = mask2d(6, 6, &on);
        assert_eq!(boundary(&m).iter().filter(|&&b| b).count(), 12);
    }

    #[test]
    fn ellipsoid_examples() {
        assert!((ellipsoid_volume_from_lengths(6.0, 4.0).unwrap() - 16.0 * std::f64::consts::PI).abs() < 1e-9);
        assert_eq!(ellipsoid_volume_from_lengths(0.0, 0.0).unwrap(), 0.0);
        let r = 3.0;
        let sphere = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        assert!((ellipsoid_volume_from_lengths(2.0 * r, 2.0 * r).unwrap() - sphere).abs() < 1e-9);
        assert!(ellipsoid_volume_from_lengths(-1.0, 2.0).is_err());
    }

    #[test]
    fn line_fit_identity_and_errors() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let f = fit_line(&x, &x).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.intercept.abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_line(&[1.0], &[1.0]).is_err());
        let m = |n: usize| Measurement::Mask(Mask::new([n.max(1), 1, 1], [1.0; 3], vec![1; n.max(1)]).unwrap());
        let one = VolumeCase {
            id: "a".into(),
            method: (m(1), m(2)),
            reference: (m(1), m(2)),
        };
        assert!(volume_change_report(std::slice::from_ref(&one)).is_err());
        let two = VolumeCase {
            id: "b".into(),
            method: (m(1), m(5)),
            reference: (m(1), m(5)),
        };
        let rep = volume_change_report(&[one, two]).unwrap();
        assert!((rep.fit.slope - 1.0).abs() < 1e-12);
    }

    fn naive(pred: &[u8], gt: &[u8]) -> (f64, f64, f64, f64) {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..pred.len() {
            if pred[i] == 1 && gt[i] == 1 {
                tp += 1.0;
            }
            if pred[i] == 1 && gt[i] == 0 {
                fp += 1.0;
            }
            if pred[i] == 0 && gt[i] == 1 {
                fn_ += 1.0;
            }
        }
        let d = 2.0 * tp + fp + fn_;
        if d == 0.0 {
            return (1.0, 1.0, 1.0, 1.0);
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        (2.0 * tp / d, p, r, 1.0 - (fn_ - fp) / d)
    }

    proptest! {
        #[test]
        fn counting_metrics_match_naive(
            (dims, pred, gt) in (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(x, y, z)| {
                let n = x * y * z;
                (Just([x, y, z]), proptest::collection::vec(0u8..2, n), proptest::collection::vec(0u8..2, n))
            })
        ) {
            let p = Mask::new(dims, [1.0; 3], pred.clone()).unwrap();
            let g = Mask::new(dims, [1.0; 3], gt.clone()).unwrap();
            let (d, pr, rc, vs) = naive(&pred, &gt);
            let c = confusion(&p, &g).unwrap();
            prop_assert_eq!(c.total() as usize, pred.len());
            prop_assert!((c.dice() - d).abs() < 1e-12);
            let (pp, rr) = c.precision_recall();
            prop_assert!((pp - pr).abs() < 1e-12 && (rr - rc).abs() < 1e-12);
            prop_assert!((c.volumetric_similarity() - vs).abs() < 1e-12);
            prop_assert_eq!(dice(&p, &g).unwrap(), dice(&g, &p).unwrap());
            prop_assert!((0.0..=1.0).contains(&c.dice()));
            if p.count() > 0 && g.count() > 0 {
                let a = avg_hausdorff(&p, &g, [1.0; 3]).unwrap();
                prop_assert_eq!(a, avg_hausdorff(&g, &p, [1.0; 3]).unwrap());
                prop_assert_eq!(avg_hausdorff(&p, &p, [1.0; 3]).unwrap(), 0.0);
            }
        }
    }
}
