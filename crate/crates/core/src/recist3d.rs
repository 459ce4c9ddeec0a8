//! Off-slice RECIST estimates by Pythagorean projection.
//!
//! The lesion is treated as locally spherical around each long-axis endpoint:
//! an endpoint at in-plane distance `a` (mm) from the axis intersection sits
//! at `sqrt(a^2 - (tau * s_z)^2)` on the slice `tau` away. The short axis keeps
//! the original short/long ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::RecistAnnotation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recist3D {
    center: [f64; 2],
    extent: usize,
    slices: BTreeMap<i64, RecistAnnotation>,
}

#[derive(Serialize)]
struct OffsetEntry<'a> {
    offset: i64,
    long_length_mm: f64,
    short_length_mm: f64,
    annotation: &'a RecistAnnotation,
}

impl Recist3D {
    /// Annotation estimated for slice offset `tau`, if it was requested and
    /// lands on a non-negative slice index.
    pub fn at(&self, tau: i64) -> Option<&RecistAnnotation> {
        self.slices.get(&tau)
    }

    pub fn offsets(&self) -> impl Iterator<Item = (i64, &RecistAnnotation)> {
        self.slices.iter().map(|(&t, a)| (t, a))
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    /// Largest `|tau|` whose long axis is still positive.
    pub fn extent_len(&self) -> usize {
        self.extent
    }

    /// `(-e, e)` with `e` the largest `|tau|` of positive long-axis length.
    pub fn extent(&self) -> (i64, i64) {
        (-(self.extent as i64), self.extent as i64)
    }

    pub fn within_extent(&self, tau: i64) -> bool {
        tau.unsigned_abs() as usize <= self.extent
    }

    /// JSON-friendly listing of every offset with its physical lengths.
    pub fn report(&self, spacing: [f64; 3]) -> serde_json::Value {
        let rows: Vec<OffsetEntry> = self
            .slices
            .iter()
            .map(|(&offset, a)| OffsetEntry {
                offset,
                long_length_mm: a.long_length_mm(spacing),
                short_length_mm: a.short_length_mm(spacing),
                annotation: a,
            })
            .collect();
        serde_json::to_value(rows).expect("plain data serializes")
    }
}

fn physical_distance(p: [f64; 2], c: [f64; 2], spacing: [f64; 3]) -> f64 {
    ((p[0] - c[0]) * spacing[0]).hypot((p[1] - c[1]) * spacing[1])
}

fn shrink(p: [f64; 2], c: [f64; 2], factor: f64) -> [f64; 2] {
    [c[0] + (p[0] - c[0]) * factor, c[1] + (p[1] - c[1]) * factor]
}

fn projected(a: f64, dz: f64) -> f64 {
    (a * a - dz * dz).max(0.0).sqrt()
}

/// Estimate annotations for every offset in `-max_offset..=max_offset`.
pub fn estimate(
    annotation: &RecistAnnotation,
    spacing: [f64; 3],
    max_offset: usize,
) -> Result<Recist3D> {
    if !(spacing[2] > 0.0) || !(spacing[0] > 0.0) || !(spacing[1] > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    let long0 = annotation.long_length_px();
    if !(long0 > 0.0) || !long0.is_finite() {
        return Err(Error::DegenerateAxis("zero-length long axis".into()));
    }
    let c = annotation.intersection();
    let a = annotation
        .long_axis
        .map(|p| physical_distance(p, c, spacing));
    let a_max = a[0].max(a[1]);

    let mut extent = 0usize;
    while projected(a_max, (extent + 1) as f64 * spacing[2]) > 0.0 {
        extent += 1;
    }

    let mut slices = BTreeMap::new();
    for tau in -(max_offset as i64)..=max_offset as i64 {
        let Some(slice_index) = annotation.slice_index.checked_add_signed(tau as isize) else {
            continue;
        };
        if tau == 0 {
            slices.insert(0, annotation.clone());
            continue;
        }
        let dz = tau as f64 * spacing[2];
        let mut long_axis = annotation.long_axis;
        for (p, &ai) in long_axis.iter_mut().zip(&a) {
            let factor = if ai > 0.0 { projected(ai, dz) / ai } else { 0.0 };
            *p = shrink(*p, c, factor);
        }
        let ratio = (long_axis[1][0] - long_axis[0][0]).hypot(long_axis[1][1] - long_axis[0][1]) / long0;
        let short_axis = annotation.short_axis.map(|p| shrink(p, c, ratio));
        slices.insert(
            tau,
            RecistAnnotation {
                slice_index,
                long_axis,
                short_axis,
                ..annotation.clone()
            },
        );
    }
    Ok(Recist3D {
        center: c,
        extent,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(long: [[f64; 2]; 2], short: [[f64; 2]; 2]) -> RecistAnnotation {
        RecistAnnotation {
            slice_index: 10,
            long_axis: long,
            short_axis: short,
            window: [-160.0, 240.0],
            lesion_id: "l".into(),
            patient_id: "p".into(),
        }
    }

    #[test]
    fn pythagorean_shrink() {
        let a = ann([[10.0, 10.0], [20.0, 10.0]], [[15.0, 7.0], [15.0, 13.0]]);
        let r = estimate(&a, [1.0, 1.0, 3.0], 3).unwrap();
        let t1 = r.at(1).unwrap();
        assert!((t1.long_axis[0][0] - 11.0).abs() < 1e-9);
        assert!((t1.long_axis[1][0] - 19.0).abs() < 1e-9);
        assert!((t1.long_length_mm([1.0, 1.0, 3.0]) - 8.0).abs() < 1e-9);
        assert_eq!(t1.slice_index, 11);
        assert_eq!(r.at(-1).unwrap().slice_index, 9);
        assert_eq!(r.extent(), (-1, 1));
        assert_eq!(r.at(2).unwrap().long_length_px(), 0.0);
        assert_eq!(r.at(0).unwrap(), &a);
    }

    #[test]
    fn small_lesion_has_zero_extent() {
        let a = ann([[10.0, 10.0], [14.0, 10.0]], [[12.0, 9.0], [12.0, 11.0]]);
        assert_eq!(estimate(&a, [1.0, 1.0, 3.0], 2).unwrap().extent_len(), 0);
    }

    #[test]
    fn off_center_intersection_shrinks_each_end() {
        // intersection at x=12: endpoints 2 mm and 8 mm away
        let a = ann([[10.0, 10.0], [20.0, 10.0]], [[12.0, 8.0], [12.0, 12.0]]);
        let r = estimate(&a, [1.0, 1.0, 3.0], 3).unwrap();
        let t1 = r.at(1).unwrap();
        assert!((t1.long_axis[0][0] - 12.0).abs() < 1e-12);
        assert!((t1.long_axis[1][0] - (12.0 + 55f64.sqrt())).abs() < 1e-9);
        // the far end survives to tau = 2 (sqrt(64 - 36) > 0)
        assert_eq!(r.extent_len(), 2);
    }

    #[test]
    fn negative_slices_are_omitted() {
        let mut a = ann([[10.0, 10.0], [20.0, 10.0]], [[15.0, 7.0], [15.0, 13.0]]);
        a.slice_index = 1;
        let r = estimate(&a, [1.0, 1.0, 1.0], 3).unwrap();
        assert!(r.at(-2).is_none());
        assert!(r.at(-1).is_some());
    }

    #[test]
    fn rejects_degenerate_input() {
        let a = ann([[10.0, 10.0], [10.0, 10.0]], [[15.0, 7.0], [15.0, 13.0]]);
        assert!(estimate(&a, [1.0, 1.0, 1.0], 1).is_err());
        let a = ann([[10.0, 10.0], [20.0, 10.0]], [[15.0, 7.0], [15.0, 13.0]]);
        assert!(estimate(&a, [1.0, 1.0, 0.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn shrink_ratio_and_center_invariants(
            cx in 20.0f64..40.0, cy in 20.0f64..40.0,
            angle in 0.0f64..std::f64::consts::PI,
            l0 in 1.0f64..15.0, l1 in 1.0f64..15.0,
            frac in 0.1f64..1.0, s0 in 0.2f64..0.8,
            sx in 0.5f64..1.5, sz in 0.5f64..5.0,
        ) {
            let (dx, dy) = (angle.cos(), angle.sin());
            let long = [[cx - l0 * dx, cy - l0 * dy], [cx + l1 * dx, cy + l1 * dy]];
            let sl = frac * (l0 + l1) / 2.0;
            let short = [
                [cx + s0 * sl * dy, cy - s0 * sl * dx],
                [cx - (1.0 - s0) * sl * dy, cy + (1.0 - s0) * sl * dx],
            ];
            let a = ann(long, short);
            let spacing = [sx, sx, sz];
            let r = estimate(&a, spacing, 8).unwrap();
            let c0 = r.center();
            let ratio0 = a.short_length_px() / a.long_length_px();
            let mut prev = f64::INFINITY;
            for tau in 0..=8i64 {
                for t in [tau, -tau] {
                    let e = r.at(t).unwrap();
                    let long = e.long_length_px();
                    prop_assert!(long <= prev + 1e-12);
                    prop_assert_eq!(long > 0.0, r.within_extent(t));
                    if long > 0.0 {
                        prop_assert!((e.short_length_px() / long - ratio0).abs() < 1e-9);
                        let c = e.intersection();
                        prop_assert!((c[0] - c0[0]).abs() < 1e-9 && (c[1] - c0[1]).abs() < 1e-9);
                    }
                }
                prev = r.at(tau).unwrap().long_length_px();
            }
        }
    }
}
