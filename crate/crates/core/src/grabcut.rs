//! GrabCut segmentation seeded by a four-region trimap.
//!
//! Each iteration cuts with the current colour models and then refits them.
//! FG/BG trimap pixels are hard-clamped through infinite terminal links;
//! PFG/PBG only set the initial labeling.
//!
//! The models are refit by warm-started EM rather than hard component
//! re-assignment. Both half-steps then minimize the same objective
//! `sum_p -ln p(z_p | theta_{alpha_p}) + smoothness(alpha)`, so the energy
//! recorded after each iteration never increases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, GaussianMixture};
use crate::graphcut::{build_grid, max_flow, Side, INFINITE_CAPACITY, OFFSETS_4, OFFSETS_8};
use crate::grid::{Grid, Image};
use crate::trimap::{Label, Trimap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrabCutParams {
    pub k_components: usize,
    pub gamma: f64,
    pub connectivity: u8,
    pub max_iters: usize,
    /// Stop once fewer than this fraction of pixels change label.
    pub convergence: f64,
    /// EM updates per model fit.
    pub em_iters: usize,
    pub seed: u64,
}

impl Default for GrabCutParams {
    fn default() -> Self {
        GrabCutParams {
            k_components: 5,
            gamma: 50.0,
            connectivity: 8,
            max_iters: 5,
            convergence: 1e-3,
            em_iters: 5,
            seed: 0,
        }
    }
}

impl GrabCutParams {
    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.k_components == 0 || self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "k_components and max_iters must be >= 1".into(),
            ));
        }
        if !matches!(self.connectivity, 4 | 8) {
            return Err(Error::InvalidParameter(format!(
                "connectivity must be 4 or 8, got {}",
                self.connectivity
            )));
        }
        Ok(())
    }

    fn offsets(&self) -> &'static [(i64, i64)] {
        if self.connectivity == 4 {
            &OFFSETS_4
        } else {
            &OFFSETS_8
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub data_term: f64,
    pub smoothness_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct GrabCutResult {
    /// 1 = foreground, 0 = background.
    pub mask: Grid<u8>,
    /// Energy of the initial labeling followed by one entry per iteration,
    /// each evaluated after the model refit.
    pub energies: Vec<EnergyBreakdown>,
    pub iterations: usize,
    pub fg_model: GaussianMixture,
    pub bg_model: GaussianMixture,
}

/// Contrast-sensitive pairwise weights, one plane per neighbor offset:
/// `gamma * exp(-beta * |z_p - z_q|^2) / dist(p, q)` with
/// `beta = 1 / (2 <|z_p - z_q|^2>)` over all neighbor pairs.
fn pairwise_planes(image: &Image, params: &GrabCutParams) -> (f64, Vec<Vec<f64>>) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let n = image.pixel_count();
    let offsets = params.offsets();
    let sq = |p: usize, q: usize| -> f64 {
        image
            .pixel(p)
            .iter()
            .zip(image.pixel(q))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let neighbor = |x: i64, y: i64, (dx, dy): (i64, i64)| -> Option<usize> {
        let (qx, qy) = (x + dx, y + dy);
        (qx >= 0 && qy >= 0 && qx < w && qy < h).then(|| (qy * w + qx) as usize)
    };
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            for &off in offsets {
                if let Some(q) = neighbor(x, y, off) {
                    sum += sq(p, q);
                    pairs += 1;
                }
            }
        }
    }
    let mean = if pairs > 0 { sum / pairs as f64 } else { 0.0 };
    let beta = if mean > 0.0 { 1.0 / (2.0 * mean) } else { 0.0 };
    let planes = offsets
        .iter()
        .map(|&off| {
            let dist = ((off.0 * off.0 + off.1 * off.1) as f64).sqrt();
            let mut plane = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    let p = (y * w + x) as usize;
                    if let Some(q) = neighbor(x, y, off) {
                        plane[p] = params.gamma * (-beta * sq(p, q)).exp() / dist;
                    }
                }
            }
            plane
        })
        .collect();
    (beta, planes)
}

fn check_inputs(image: &Image, dims: (usize, usize)) -> Result<()> {
    if (image.width(), image.height()) != dims {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, labels are {}x{}",
            image.width(),
            image.height(),
            dims.0,
            dims.1
        )));
    }
    if !(1..=3).contains(&image.channels()) {
        return Err(Error::InvalidParameter(format!(
            "GrabCut takes 1 to 3 channels, got {}",
            image.channels()
        )));
    }
    Ok(())
}

fn samples(image: &Image, alpha: &[bool], want: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, &a) in alpha.iter().enumerate() {
        if a == want {
            out.extend_from_slice(image.pixel(i));
        }
    }
    out
}

fn energy_of(
    image: &Image,
    alpha: &[bool],
    fg: &GaussianMixture,
    bg: &GaussianMixture,
    planes: &[Vec<f64>],
    params: &GrabCutParams,
) -> EnergyBreakdown {
    let data_term: f64 = alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if a {
                fg.neg_log_density(image.pixel(i))
            } else {
                bg.neg_log_density(image.pixel(i))
            }
        })
        .sum();
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut smoothness_term = 0.0;
    for (d, &(dx, dy)) in params.offsets().iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (qx, qy) = (x + dx, y + dy);
                if qx < 0 || qy < 0 || qx >= w || qy >= h {
                    continue;
                }
                let p = (y * w + x) as usize;
                let q = (qy * w + qx) as usize;
                if alpha[p] != alpha[q] {
                    smoothness_term += planes[d][p];
                }
            }
        }
    }
    EnergyBreakdown {
        data_term,
        smoothness_term,
        total: data_term + smoothness_term,
    }
}

/// The objective minimized by the cut for fixed colour models.
pub fn energy(
    image: &Image,
    labeling: &Grid<u8>,
    fg_model: &GaussianMixture,
    bg_model: &GaussianMixture,
    params: &GrabCutParams,
) -> Result<EnergyBreakdown> {
    check_inputs(image, labeling.dims())?;
    params.validate()?;
    let (_, planes) = pairwise_planes(image, params);
    let alpha: Vec<bool> = labeling.as_slice().iter().map(|&v| v != 0).collect();
    Ok(energy_of(image, &alpha, fg_model, bg_model, &planes, params))
}

fn cut(
    image: &Image,
    trimap: &Trimap,
    fg: &GaussianMixture,
    bg: &GaussianMixture,
    planes: &[Vec<f64>],
    params: &GrabCutParams,
) -> Result<Vec<bool>> {
    let n = image.pixel_count();
    let mut src = vec![0.0; n];
    let mut snk = vec![0.0; n];
    for (i, label) in trimap.labels().as_slice().iter().enumerate() {
        match label {
            Label::Fg => src[i] = INFINITE_CAPACITY,
            Label::Bg => snk[i] = INFINITE_CAPACITY,
            _ => {
                let z = image.pixel(i);
                let d_fg = fg.neg_log_density(z);
                let d_bg = bg.neg_log_density(z);
                let m = d_fg.min(d_bg);
                // a source-side (foreground) pixel pays its sink link
                src[i] = d_bg - m;
                snk[i] = d_fg - m;
            }
        }
    }
    let net = build_grid(trimap.dims(), &src, &snk, planes, params.connectivity)?;
    let flow = max_flow(&net)?;
    Ok(flow.sides.iter().map(|s| *s == Side::Source).collect())
}

/// Minimum-energy labeling for fixed colour models, respecting the clamps.
pub fn optimal_labeling(
    image: &Image,
    trimap: &Trimap,
    fg_model: &GaussianMixture,
    bg_model: &GaussianMixture,
    params: &GrabCutParams,
) -> Result<Grid<u8>> {
    check_inputs(image, trimap.dims())?;
    params.validate()?;
    let (_, planes) = pairwise_planes(image, params);
    let alpha = cut(image, trimap, fg_model, bg_model, &planes, params)?;
    let (w, h) = trimap.dims();
    Grid::from_vec(w, h, alpha.into_iter().map(u8::from).collect())
}

/// Run GrabCut on a 1- or 3-channel image in `[0, 1]`.
pub fn run(image: &Image, trimap: &Trimap, params: &GrabCutParams) -> Result<GrabCutResult> {
    check_inputs(image, trimap.dims())?;
    params.validate()?;
    let n = image.pixel_count();
    let c = image.channels();
    let mut alpha: Vec<bool> = trimap
        .labels()
        .as_slice()
        .iter()
        .map(|l| l.is_foreground())
        .collect();
    let fg_samples = samples(image, &alpha, true);
    let bg_samples = samples(image, &alpha, false);
    if fg_samples.is_empty() {
        return Err(Error::EmptyMask("trimap has no foreground or probable foreground".into()));
    }
    if bg_samples.is_empty() {
        return Err(Error::EmptyMask("trimap has no background or probable background".into()));
    }
    let mut fg = gmm::fit(&fg_samples, c, params.k_components, params.em_iters, params.seed)?;
    let mut bg = gmm::fit(
        &bg_samples,
        c,
        params.k_components,
        params.em_iters,
        params.seed.wrapping_add(1),
    )?;
    let (_, planes) = pairwise_planes(image, params);
    let mut energies = vec![energy_of(image, &alpha, &fg, &bg, &planes, params)];
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        let next = cut(image, trimap, &fg, &bg, &planes, params)?;
        let changed = next.iter().zip(&alpha).filter(|(a, b)| a != b).count();
        alpha = next;
        let fg_samples = samples(image, &alpha, true);
        if !fg_samples.is_empty() {
            fg = fg.refine(&fg_samples, params.em_iters).model;
        }
        let bg_samples = samples(image, &alpha, false);
        if !bg_samples.is_empty() {
            bg = bg.refine(&bg_samples, params.em_iters).model;
        }
        energies.push(energy_of(image, &alpha, &fg, &bg, &planes, params));
        if (changed as f64) < params.convergence * n as f64 {
            break;
        }
    }
    let (w, h) = trimap.dims();
    Ok(GrabCutResult {
        mask: Grid::from_vec(w, h, alpha.into_iter().map(u8::from).collect())?,
        energies,
        iterations,
        fg_model: fg,
        bg_model: bg,
    })
}
