//! Four-region trimaps (FG / PFG / PBG / BG) that initialize GrabCut.
//!
//! Trimaps come from RECIST geometry alone ([`trimap_from_recist`]), from the
//! bounding-box variants used as baselines ([`trimap_from_bbox`]), or from an
//! appearance-model probability map guided by (estimated) RECIST diameters
//! ([`trimap_from_model`], [`fallback_labels`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::raster::{connected_components, dilate, distance_sq_2d, line_pixels};
use crate::volume_io::RecistAnnotation;

/// Raster value marking pixels excluded from training.
pub const IGNORE: u8 = 255;

/// Mean-probability ceiling for a region to count as confident background.
pub const DEFAULT_P_BG: f64 = 0.2;

/// Fraction of the ROI outside the central rectangle, labelled background.
pub const OUTER_BG_FRACTION: f64 = 0.5;
/// Fraction of the ROI covered by the dilated RECIST foreground.
pub const FG_FRACTION: f64 = 0.1;
/// Total padding added to the tight RECIST box, as a fraction of its size.
pub const BBOX_PADDING: f64 = 0.25;
/// Area fraction of the bounding box used by the inner-box and dilate-only
/// variants.
pub const INNER_FRACTION: f64 = 0.2;
/// A model whose coverage threshold falls below this has not found the
/// lesion along the diameters.
pub const MIN_COVER_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Bg = 0,
    Fg = 1,
    Pbg = 2,
    Pfg = 3,
}

impl Label {
    pub fn is_foreground(self) -> bool {
        matches!(self, Label::Fg | Label::Pfg)
    }

    pub fn is_clamped(self) -> bool {
        matches!(self, Label::Fg | Label::Bg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimapMode {
    /// RECIST-driven trimap (outer background ring, dilated-diameter foreground).
    RecistR,
    /// Padded RECIST box: outside background, inside probable foreground.
    BboxPlain,
    /// Padded RECIST box with its central 20% as foreground.
    BboxInner,
    /// Diameters dilated to 20% of the box as foreground, outside background,
    /// everything else ignored.
    RecistDilateOnly,
}

impl TrimapMode {
    pub const ALL: [TrimapMode; 4] = [
        TrimapMode::RecistR,
        TrimapMode::BboxInner,
        TrimapMode::BboxPlain,
        TrimapMode::RecistDilateOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrimapMode::RecistR => "recist-r",
            TrimapMode::BboxPlain => "bbox-plain",
            TrimapMode::BboxInner => "bbox-inner",
            TrimapMode::RecistDilateOnly => "recist-dilate",
        }
    }
}

impl std::str::FromStr for TrimapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrimapMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown trimap mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trimap {
    labels: Grid<Label>,
    ignore: Grid<bool>,
}

impl Trimap {
    pub fn new(labels: Grid<Label>) -> Self {
        let (w, h) = labels.dims();
        Trimap {
            labels,
            ignore: Grid::filled(w, h, false),
        }
    }

    pub fn labels(&self) -> &Grid<Label> {
        &self.labels
    }

    pub fn ignore(&self) -> &Grid<bool> {
        &self.ignore
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        *self.labels.get(x, y)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.as_slice().iter().filter(|&&l| l == label).count()
    }

    /// Export raster: 0 = BG, 1 = FG, 2 = PBG, 3 = PFG, 255 = ignore.
    pub fn to_raster(&self) -> Grid<u8> {
        Grid::from_fn(self.labels.width(), self.labels.height(), |x, y| {
            if *self.ignore.get(x, y) {
                IGNORE
            } else {
                *self.labels.get(x, y) as u8
            }
        })
    }

    /// Training labels: foreground 1, background 0, ignored pixels 255.
    /// Probable labels follow their side.
    pub fn training_labels(&self) -> Grid<u8> {
        Grid::from_fn(self.labels.width(), self.labels.height(), |x, y| {
            if *self.ignore.get(x, y) {
                IGNORE
            } else {
                self.labels.get(x, y).is_foreground() as u8
            }
        })
    }
}

fn check_dims(dims: (usize, usize)) -> Result<()> {
    if dims.0 < 4 || dims.1 < 4 {
        return Err(Error::InvalidParameter(format!(
            "ROI {}x{} is smaller than 4x4",
            dims.0, dims.1
        )));
    }
    Ok(())
}

/// Both RECIST diameters as 1-pixel-wide lines.
pub fn rasterize_recist(annotation: &RecistAnnotation, dims: (usize, usize)) -> Result<Grid<bool>> {
    let (w, h) = dims;
    let mut out = Grid::filled(w, h, false);
    for seg in [annotation.long_axis, annotation.short_axis] {
        for (x, y) in line_pixels(seg[0], seg[1]) {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                return Err(Error::InvalidAnnotation(format!(
                    "RECIST endpoint rasterizes to ({x}, {y}) outside {w}x{h}"
                )));
            }
            out.set(x as usize, y as usize, true);
        }
    }
    Ok(out)
}

/// Grow `seed` to exactly `target` pixels (or the whole grid). Whole 3x3
/// dilation rings are added while they fit; the final partial ring is filled
/// in order of Euclidean distance to the seed, ties in raster order.
pub fn grow_to_area(seed: &Grid<bool>, target: usize) -> Grid<bool> {
    let mut mask = seed.clone();
    let mut area = mask.count();
    let target = target.min(mask.len());
    if area == 0 {
        return mask;
    }
    while area < target {
        let next = dilate(&mask);
        let next_area = next.count();
        if next_area <= target {
            mask = next;
            area = next_area;
            continue;
        }
        let dist = distance_sq_2d(seed);
        let mut ring: Vec<usize> = (0..mask.len())
            .filter(|&i| next.as_slice()[i] && !mask.as_slice()[i])
            .collect();
        ring.sort_by(|&a, &b| dist.as_slice()[a].total_cmp(&dist.as_slice()[b]).then(a.cmp(&b)));
        for &i in ring.iter().take(target - area) {
            mask.as_mut_slice()[i] = true;
        }
        break;
    }
    mask
}

/// Label every pixel not yet assigned (`None`) as PFG when it is at least as
/// close to the foreground set as to the background set, else PBG.
fn split_uncertain(assigned: Grid<Option<Label>>) -> Grid<Label> {
    let fg = assigned.map(|l| *l == Some(Label::Fg));
    let bg = assigned.map(|l| *l == Some(Label::Bg));
    let d_fg = distance_sq_2d(&fg);
    let d_bg = distance_sq_2d(&bg);
    let (w, h) = assigned.dims();
    Grid::from_fn(w, h, |x, y| match assigned.get(x, y) {
        Some(l) => *l,
        None => {
            if d_fg.get(x, y) <= d_bg.get(x, y) {
                Label::Pfg
            } else {
                Label::Pbg
            }
        }
    })
}

/// Centered box with each side scaled by `sqrt(fraction)`; returns
/// `[x0, y0, x1, y1)` inside `[bx0, by0, bx1, by1)`.
fn scaled_box(b: [usize; 4], fraction: f64) -> [usize; 4] {
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let s = fraction.sqrt();
    let iw = ((bw as f64 * s).round() as usize).clamp(1, bw);
    let ih = ((bh as f64 * s).round() as usize).clamp(1, bh);
    let x0 = b[0] + (bw - iw) / 2;
    let y0 = b[1] + (bh - ih) / 2;
    [x0, y0, x0 + iw, y0 + ih]
}

#[inline]
fn in_box(b: [usize; 4], x: usize, y: usize) -> bool {
    x >= b[0] && x < b[2] && y >= b[1] && y < b[3]
}

/// The `[2w, 2h]` window around the tight box `[w, h]` of the diameter
/// endpoints, centered on that box and clipped to `dims`; always contains the
/// rasterized diameters. Returns `[x0, y0, x1, y1)`.
pub fn recist_window(annotation: &RecistAnnotation, dims: (usize, usize)) -> Result<[usize; 4]> {
    let raster = rasterize_recist(annotation, dims)?;
    let pts = annotation.endpoints();
    let span = |k: usize| {
        let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0 - (hi - lo)..(lo + hi) / 2.0 + (hi - lo)
    };
    let (sx, sy) = (span(0), span(1));
    let (w, h) = dims;
    let mut b = [
        sx.start.round().max(0.0) as usize,
        sy.start.round().max(0.0) as usize,
        (sx.end.round().max(0.0) as usize).min(w),
        (sy.end.round().max(0.0) as usize).min(h),
    ];
    for y in 0..h {
        for x in 0..w {
            if *raster.get(x, y) {
                b = [b[0].min(x), b[1].min(y), b[2].max(x + 1), b[3].max(y + 1)];
            }
        }
    }
    // keep at least 4 px per side where the ROI allows it
    for (lo, hi, n) in [(0, 2, w), (1, 3, h)] {
        while b[hi] - b[lo] < 4.min(n) {
            if b[hi] < n {
                b[hi] += 1;
            } else {
                b[lo] -= 1;
            }
        }
    }
    Ok(b)
}

/// Geometry-only trimap on the [`recist_window`]: background outside the
/// centered rectangle holding half the window area (and everywhere outside
/// the window), foreground grown from the rasterized diameters to 10% of the
/// window, the rest split between PFG and PBG by distance.
pub fn trimap_from_recist(annotation: &RecistAnnotation, dims: (usize, usize)) -> Result<Trimap> {
    check_dims(dims)?;
    let (w, h) = dims;
    let raster = rasterize_recist(annotation, dims)?;
    let window = recist_window(annotation, dims)?;
    let n = (window[2] - window[0]) * (window[3] - window[1]);
    let inner = scaled_box(window, 1.0 - OUTER_BG_FRACTION);
    let fg = grow_to_area(&raster, (FG_FRACTION * n as f64).ceil() as usize);
    let assigned = Grid::from_fn(w, h, |x, y| {
        if *fg.get(x, y) {
            Some(Label::Fg)
        } else if !in_box(inner, x, y) {
            Some(Label::Bg)
        } else {
            None
        }
    });
    Ok(Trimap::new(split_uncertain(assigned)))
}

/// Tight box around the rasterized diameters, padded by 25% of its size in
/// total and clipped to the ROI.
pub fn recist_bbox(annotation: &RecistAnnotation, dims: (usize, usize)) -> Result<[usize; 4]> {
    let raster = rasterize_recist(annotation, dims)?;
    let (w, h) = dims;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if *raster.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let pad_x = ((x1 - x0 + 1) as f64 * BBOX_PADDING / 2.0).round() as usize;
    let pad_y = ((y1 - y0 + 1) as f64 * BBOX_PADDING / 2.0).round() as usize;
    Ok([
        x0.saturating_sub(pad_x),
        y0.saturating_sub(pad_y),
        (x1 + 1 + pad_x).min(w),
        (y1 + 1 + pad_y).min(h),
    ])
}

/// Bounding-box baselines.
pub fn trimap_from_bbox(
    annotation: &RecistAnnotation,
    dims: (usize, usize),
    mode: TrimapMode,
) -> Result<Trimap> {
    check_dims(dims)?;
    let (w, h) = dims;
    let bbox = recist_bbox(annotation, dims)?;
    match mode {
        TrimapMode::BboxPlain => Ok(Trimap::new(Grid::from_fn(w, h, |x, y| {
            if in_box(bbox, x, y) {
                Label::Pfg
            } else {
                Label::Bg
            }
        }))),
        TrimapMode::BboxInner => {
            let inner = scaled_box(bbox, INNER_FRACTION);
            let assigned = Grid::from_fn(w, h, |x, y| {
                if in_box(inner, x, y) {
                    Some(Label::Fg)
                } else if !in_box(bbox, x, y) {
                    Some(Label::Bg)
                } else {
                    None
                }
            });
            Ok(Trimap::new(split_uncertain(assigned)))
        }
        TrimapMode::RecistDilateOnly => {
            let raster = rasterize_recist(annotation, dims)?;
            let area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1]);
            let fg = grow_to_area(&raster, (INNER_FRACTION * area as f64).ceil() as usize);
            let labels = Grid::from_fn(w, h, |x, y| {
                if *fg.get(x, y) {
                    Label::Fg
                } else if !in_box(bbox, x, y) {
                    Label::Bg
                } else {
                    Label::Pbg
                }
            });
            let ignore = labels.map(|l| *l == Label::Pbg);
            Ok(Trimap { labels, ignore })
        }
        TrimapMode::RecistR => Err(Error::InvalidParameter(
            "recist-r is not a bounding-box mode; use trimap_from_recist".into(),
        )),
    }
}

/// Trimap for any mode.
pub fn build_trimap(
    annotation: &RecistAnnotation,
    dims: (usize, usize),
    mode: TrimapMode,
) -> Result<Trimap> {
    match mode {
        TrimapMode::RecistR => trimap_from_recist(annotation, dims),
        other => trimap_from_bbox(annotation, dims, other),
    }
}

/// Binarize a probability map at the largest threshold that still keeps at
/// least half of the RECIST pixels. Fails with [`Error::ModelFoundNothing`]
/// when that threshold is zero.
pub fn binarize_to_cover(
    prob: &Grid<f64>,
    annotation: &RecistAnnotation,
) -> Result<(Grid<bool>, f64)> {
    let raster = rasterize_recist(annotation, prob.dims())?;
    let mut on_recist: Vec<f64> = prob
        .as_slice()
        .iter()
        .zip(raster.as_slice())
        .filter(|(_, &r)| r)
        .map(|(&p, _)| p)
        .collect();
    on_recist.sort_by(|a, b| b.total_cmp(a));
    let need = on_recist.len().div_ceil(2);
    let t = on_recist[need - 1];
    if !(t > 0.0) {
        return Err(Error::ModelFoundNothing);
    }
    Ok((prob.map(|&p| p >= t), t))
}

/// Components of `mask` that touch any pixel of `guide`.
fn components_touching(mask: &Grid<bool>, guide: &Grid<bool>) -> Grid<bool> {
    let (labels, n) = connected_components(mask);
    let mut hit = vec![false; n + 1];
    for (l, &g) in labels.as_slice().iter().zip(guide.as_slice()) {
        if g && *l != 0 {
            hit[*l as usize] = true;
        }
    }
    labels.map(|&l| l != 0 && hit[l as usize])
}

/// Confident background: components of `{prob < p_bg}` containing no guide
/// pixel, minus `fg`.
fn confident_background(prob: &Grid<f64>, guide: &Grid<bool>, fg: &Grid<bool>, p_bg: f64) -> Grid<bool> {
    let low = prob.map(|&p| p < p_bg);
    let touching = components_touching(&low, guide);
    let (w, h) = prob.dims();
    Grid::from_fn(w, h, |x, y| *low.get(x, y) && !*touching.get(x, y) && !*fg.get(x, y))
}

/// Foreground from a binarized model map: components overlapping the guide
/// diameters, plus the diameters themselves.
fn model_foreground(binary: &Grid<bool>, guide: &Grid<bool>) -> Grid<bool> {
    let comps = components_touching(binary, guide);
    let (w, h) = guide.dims();
    Grid::from_fn(w, h, |x, y| *comps.get(x, y) || *guide.get(x, y))
}

/// Trimap from model output. `estimated` is the RECIST estimate for this slice;
/// on the annotated slice pass `None` and the actual `recist` guides instead.
pub fn trimap_from_model(
    prob: &Grid<f64>,
    estimated: Option<&RecistAnnotation>,
    recist: &RecistAnnotation,
    p_bg: f64,
) -> Result<Trimap> {
    let guide_ann = estimated.unwrap_or(recist);
    let guide = rasterize_recist(guide_ann, prob.dims())?;
    let (binary, t) = binarize_to_cover(prob, guide_ann)?;
    if t < MIN_COVER_THRESHOLD {
        return Err(Error::ModelFoundNothing);
    }
    let fg = model_foreground(&binary, &guide);
    let bg = confident_background(prob, &guide, &fg, p_bg);
    let (w, h) = prob.dims();
    let assigned = Grid::from_fn(w, h, |x, y| {
        if *fg.get(x, y) {
            Some(Label::Fg)
        } else if *bg.get(x, y) {
            Some(Label::Bg)
        } else {
            None
        }
    });
    Ok(Trimap::new(split_uncertain(assigned)))
}

/// Training labels when GrabCut fails or the model finds nothing: model
/// components overlapping the estimate plus the estimate itself are
/// foreground, confident background away from it is background, and every
/// other pixel is ignored.
pub fn fallback_labels(prob: &Grid<f64>, estimated: &RecistAnnotation, p_bg: f64) -> Result<Trimap> {
    let guide = rasterize_recist(estimated, prob.dims())?;
    let fg = match binarize_to_cover(prob, estimated) {
        Ok((binary, t)) if t >= MIN_COVER_THRESHOLD => model_foreground(&binary, &guide),
        Ok(_) | Err(Error::ModelFoundNothing) => guide.clone(),
        Err(e) => return Err(e),
    };
    let bg = confident_background(prob, &guide, &fg, p_bg);
    let (w, h) = prob.dims();
    let labels = Grid::from_fn(w, h, |x, y| {
        if *fg.get(x, y) {
            Label::Fg
        } else if *bg.get(x, y) {
            Label::Bg
        } else {
            Label::Pbg
        }
    });
    let ignore = labels.map(|l| *l == Label::Pbg);
    Ok(Trimap { labels, ignore })
}
