//! Self-paced expansion from the RECIST slice to the whole lesion volume.
//!
//! Round 0 trains the appearance model on GrabCut labels of every RECIST
//! slice. Round `k` predicts on slices `r - k ..= r + k`, turns the
//! predictions into trimaps, re-runs GrabCut and retrains from the previous
//! round's parameters on the harvested slices plus the RECIST-slice anchors.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{self, AppearanceModel, FeatureConfig, TrainItem, TrainParams};
use crate::enhance::classical_enhance;
use crate::error::{Error, Result};
use crate::grabcut::{self, GrabCutParams};
use crate::grid::{Grid, Image};
use crate::harness::Phantom;
use crate::raster::connected_components;
use crate::recist3d::{self, Recist3D};
use crate::trimap::{
    build_trimap, fallback_labels, rasterize_recist, trimap_from_model, trimap_from_recist, TrimapMode,
    DEFAULT_P_BG,
};
use crate::volume_io::{
    crop_and_window, crop_square, read_mask, read_volume, LesionRecord, Mask, RecistAnnotation, Roi, Volume,
};

/// GrabCut results with fewer foreground pixels count as failures.
pub const MIN_FG_PX: usize = 10;

/// A lesion loaded into memory.
#[derive(Clone, Debug)]
pub struct Lesion {
    pub id: String,
    /// Raw HU volume.
    pub volume: Volume,
    pub annotation: RecistAnnotation,
    pub ground_truth: Option<Mask>,
}

impl Lesion {
    pub fn from_phantom(p: &Phantom) -> Lesion {
        Lesion {
            id: p.annotation.lesion_id.clone(),
            volume: p.volume.clone(),
            annotation: p.annotation.clone(),
            ground_truth: Some(p.ground_truth.clone()),
        }
    }

    pub fn from_record(record: &LesionRecord) -> Result<Lesion> {
        let volume = read_volume(&record.volume)?;
        record.annotation.validate(volume.dims(), volume.spacing_mm())?;
        let ground_truth = match &record.ground_truth {
            Some(p) => {
                let m = read_mask(p)?;
                if m.dims() != volume.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "ground truth {:?} vs volume {:?}",
                        m.dims(),
                        volume.dims()
                    )));
                }
                Some(m)
            }
            None => None,
        };
        let id = if record.annotation.lesion_id.is_empty() {
            record.volume.display().to_string()
        } else {
            record.annotation.lesion_id.clone()
        };
        Ok(Lesion {
            id,
            volume,
            annotation: record.annotation.clone(),
            ground_truth,
        })
    }
}

/// Load every record, logging and skipping the ones that fail.
pub fn load_lesions(records: &[LesionRecord]) -> Vec<Lesion> {
    records
        .iter()
        .filter_map(|r| match Lesion::from_record(r) {
            Ok(l) => Some(l),
            Err(e) => {
                log::warn!("skipping lesion {}: {e}", r.volume.display());
                None
            }
        })
        .collect()
}

/// What to do with slices past the estimated lesion extent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeyondExtent {
    #[default]
    Skip,
    /// Threshold the model at 0.5, keeping components that overlap the
    /// neighboring slice's mask.
    ModelOnly,
}

impl FromStr for BeyondExtent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(BeyondExtent::Skip),
            "model-only" => Ok(BeyondExtent::ModelOnly),
            other => Err(Error::InvalidParameter(format!(
                "unknown beyond-extent policy {other:?} (skip, model-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfPacedConfig {
    /// Outer rounds K; round k harvests offsets up to k.
    pub rounds: usize,
    pub features: FeatureConfig,
    pub train: TrainParams,
    pub grabcut: GrabCutParams,
    pub p_bg: f64,
    pub min_fg_px: usize,
    pub beyond_extent: BeyondExtent,
    /// Skip GrabCut at inference and threshold the model output.
    pub no_gc: bool,
    /// Feed the (original, denoised, enhanced) stack instead of the raw slice.
    pub enhance: bool,
    pub seed: u64,
}

impl Default for SelfPacedConfig {
    fn default() -> Self {
        SelfPacedConfig {
            rounds: 2,
            features: FeatureConfig::default(),
            train: TrainParams::default(),
            grabcut: GrabCutParams::default(),
            p_bg: DEFAULT_P_BG,
            min_fg_px: MIN_FG_PX,
            beyond_extent: BeyondExtent::Skip,
            no_gc: false,
            enhance: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// GrabCut on the RECIST trimap (round 0).
    Recist,
    /// The round-0 RECIST-slice pair carried into a later round.
    Anchor,
    /// GrabCut on a model-derived trimap.
    Model,
    /// Model foreground and confident background only, the rest ignored.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestEntry {
    pub lesion: String,
    pub round: usize,
    pub offset: i64,
    pub slice: usize,
    pub source: LabelSource,
    /// Final GrabCut energy, when GrabCut produced the labels.
    pub energy: Option<f64>,
    pub fg_pixels: usize,
    pub bg_pixels: usize,
    pub ignored_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HarvestLog {
    pub entries: Vec<HarvestEntry>,
}

impl HarvestLog {
    pub fn round(&self, k: usize) -> impl Iterator<Item = &HarvestEntry> {
        self.entries.iter().filter(move |e| e.round == k)
    }
}

#[derive(Clone, Debug)]
pub struct SelfPacedResult {
    /// `theta^0 ..= theta^K`.
    pub models: Vec<AppearanceModel>,
    pub log: HarvestLog,
    /// Lesions dropped because their RECIST slice could not be processed.
    pub skipped: Vec<String>,
}

impl SelfPacedResult {
    pub fn final_model(&self) -> &AppearanceModel {
        self.models.last().expect("at least round 0")
    }
}

fn mix(seed: u64, a: u64, b: i64, c: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b as u64, c] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(23);
    }
    h
}

/// ROI slice `z` as a GrabCut/model input.
pub fn roi_image(roi: &Roi, z: usize, enhance: bool) -> Image {
    let g = roi.volume.slice(z);
    if enhance {
        classical_enhance(&g).to_image()
    } else {
        Image::from_gray(&g)
    }
}

fn label_counts(labels: &Grid<u8>) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for &v in labels.as_slice() {
        match v {
            1 => c.0 += 1,
            0 => c.1 += 1,
            _ => c.2 += 1,
        }
    }
    c
}

/// Fixed-ROI state of one lesion plus its round-0 anchor pair.
#[derive(Clone, Debug)]
pub struct LesionContext {
    pub roi: Roi,
    /// Off-slice estimates in ROI coordinates.
    pub estimate: Recist3D,
    pub anchor: TrainItem,
    pub anchor_entry: HarvestEntry,
}

/// Crop the lesion and label its RECIST slice with GrabCut.
pub fn prepare_lesion(lesion: &Lesion, index: usize, config: &SelfPacedConfig) -> Result<LesionContext> {
    let roi = crop_and_window(&lesion.volume, &lesion.annotation)?;
    let nz = lesion.volume.dims()[2];
    let estimate = recist3d::estimate(&roi.annotation, lesion.volume.spacing_mm(), nz)?;
    let r = lesion.annotation.slice_index;
    let image = roi_image(&roi, r, config.enhance);
    let trimap = trimap_from_recist(&roi.annotation, (roi.width(), roi.height()))?;
    let params = GrabCutParams {
        seed: mix(config.seed, index as u64, 0, 0),
        ..config.grabcut.clone()
    };
    let gc = grabcut::run(&image, &trimap, &params)?;
    let (fg, bg, ig) = label_counts(&gc.mask);
    let anchor_entry = HarvestEntry {
        lesion: lesion.id.clone(),
        round: 0,
        offset: 0,
        slice: r,
        source: LabelSource::Recist,
        energy: gc.energies.last().map(|e| e.total),
        fg_pixels: fg,
        bg_pixels: bg,
        ignored_pixels: ig,
    };
    Ok(LesionContext {
        roi,
        estimate,
        anchor: TrainItem::new(image, gc.mask)?,
        anchor_entry,
    })
}

/// Labels for one off-RECIST slice from model output.
fn harvest_slice(
    image: &Image,
    model: &AppearanceModel,
    estimated: &RecistAnnotation,
    config: &SelfPacedConfig,
    seed: u64,
) -> Result<(Grid<u8>, LabelSource, Option<f64>)> {
    let prob = model.predict_map(image)?;
    let attempt = match trimap_from_model(&prob, Some(estimated), estimated, config.p_bg) {
        Ok(t) => {
            let params = GrabCutParams {
                seed,
                ..config.grabcut.clone()
            };
            match grabcut::run(image, &t, &params) {
                Ok(r) if r.mask.count_nonzero() >= config.min_fg_px => {
                    Some((r.mask, r.energies.last().map(|e| e.total)))
                }
                Ok(_) => None,
                Err(e) => {
                    log::debug!("GrabCut failed on harvested slice: {e}");
                    None
                }
            }
        }
        Err(Error::ModelFoundNothing) => None,
        Err(e) => return Err(e),
    };
    Ok(match attempt {
        Some((mask, energy)) => (mask, LabelSource::Model, energy),
        None => {
            let t = fallback_labels(&prob, estimated, config.p_bg)?;
            (t.training_labels(), LabelSource::Fallback, None)
        }
    })
}

/// Training pairs of one lesion for round `round >= 1`: the anchor plus every
/// offset `0 < |tau| <= round` inside the estimated extent and the volume.
pub fn harvest_round(
    lesion: &Lesion,
    ctx: &LesionContext,
    index: usize,
    model: &AppearanceModel,
    round: usize,
    config: &SelfPacedConfig,
) -> Result<Vec<(TrainItem, HarvestEntry)>> {
    let r = lesion.annotation.slice_index as i64;
    let nz = lesion.volume.dims()[2] as i64;
    let mut out = Vec::new();
    for tau in -(round as i64)..=round as i64 {
        if tau == 0 {
            let entry = HarvestEntry {
                round,
                source: LabelSource::Anchor,
                ..ctx.anchor_entry.clone()
            };
            out.push((ctx.anchor.clone(), entry));
            continue;
        }
        let z = r + tau;
        if !ctx.estimate.within_extent(tau) || z < 0 || z >= nz {
            continue;
        }
        let Some(est) = ctx.estimate.at(tau) else {
            continue;
        };
        let image = roi_image(&ctx.roi, z as usize, config.enhance);
        let seed = mix(config.seed, index as u64, tau, round as u64);
        let (labels, source, energy) = harvest_slice(&image, model, est, config, seed)?;
        let (fg, bg, ig) = label_counts(&labels);
        out.push((
            TrainItem::new(image, labels)?,
            HarvestEntry {
                lesion: lesion.id.clone(),
                round,
                offset: tau,
                slice: z as usize,
                source,
                energy,
                fg_pixels: fg,
                bg_pixels: bg,
                ignored_pixels: ig,
            },
        ));
    }
    Ok(out)
}

fn train_params(config: &SelfPacedConfig, round: usize) -> TrainParams {
    TrainParams {
        seed: mix(config.seed, u64::MAX, -1, round as u64),
        ..config.train.clone()
    }
}

/// Run all rounds over the lesions, training one model jointly.
pub fn run(lesions: &[Lesion], config: &SelfPacedConfig) -> Result<SelfPacedResult> {
    if lesions.is_empty() {
        return Err(Error::InvalidParameter("no lesions to train on".into()));
    }
    let prepared: Vec<Result<LesionContext>> = lesions
        .par_iter()
        .enumerate()
        .map(|(i, l)| prepare_lesion(l, i, config))
        .collect();
    let mut active = Vec::new();
    let mut skipped = Vec::new();
    for (i, (l, p)) in lesions.iter().zip(prepared).enumerate() {
        match p {
            Ok(ctx) => active.push((i, l, ctx)),
            Err(e) => {
                log::warn!("skipping lesion {}: {e}", l.id);
                skipped.push(l.id.clone());
            }
        }
    }
    if active.is_empty() {
        return Err(Error::InvalidParameter("every lesion failed on its RECIST slice".into()));
    }
    let mut log = HarvestLog::default();
    let anchors: Vec<TrainItem> = active.iter().map(|(_, _, c)| c.anchor.clone()).collect();
    log.entries.extend(active.iter().map(|(_, _, c)| c.anchor_entry.clone()));
    let mut model = appearance::train(&anchors, &config.features, &train_params(config, 0), None)?;
    let mut models = vec![model.clone()];
    for round in 1..=config.rounds {
        let harvested: Vec<Result<Vec<(TrainItem, HarvestEntry)>>> = active
            .par_iter()
            .map(|(i, l, ctx)| harvest_round(l, ctx, *i, &model, round, config))
            .collect();
        let mut items = Vec::new();
        for ((_, l, _), h) in active.iter().zip(harvested) {
            match h {
                Ok(pairs) => {
                    for (item, entry) in pairs {
                        items.push(item);
                        log.entries.push(entry);
                    }
                }
                Err(e) => log::warn!("round {round}: lesion {} not harvested: {e}", l.id),
            }
        }
        log::info!("round {round}: training on {} slices", items.len());
        model = appearance::train(&items, &config.features, &train_params(config, round), Some(&model))?;
        models.push(model.clone());
    }
    Ok(SelfPacedResult { models, log, skipped })
}

fn threshold_components(prob: &Grid<f64>, keep_touching: Option<&Grid<u8>>) -> Grid<u8> {
    let bin = prob.map(|&p| p >= 0.5);
    let Some(guide) = keep_touching else {
        return bin.map(|&b| b as u8);
    };
    let (labels, n) = connected_components(&bin);
    let mut hit = vec![false; n + 1];
    for (l, &g) in labels.as_slice().iter().zip(guide.as_slice()) {
        if g != 0 && *l != 0 {
            hit[*l as usize] = true;
        }
    }
    labels.map(|&l| (l != 0 && hit[l as usize]) as u8)
}

/// Segment the whole lesion volume with a trained model.
pub fn segment_volume(lesion: &Lesion, model: &AppearanceModel, config: &SelfPacedConfig) -> Result<Mask> {
    let roi = crop_and_window(&lesion.volume, &lesion.annotation)?;
    let [_, _, nz] = lesion.volume.dims();
    let estimate = recist3d::estimate(&roi.annotation, lesion.volume.spacing_mm(), nz)?;
    let mut mask = Mask::empty(lesion.volume.dims(), lesion.volume.spacing_mm())?;
    let r = lesion.annotation.slice_index as i64;
    let mut slices: Vec<Option<Grid<u8>>> = vec![None; nz];
    // walk outwards so a slice's inner neighbor is already done
    let mut order = vec![0i64];
    for d in 1..nz as i64 {
        order.push(d);
        order.push(-d);
    }
    for tau in order {
        let z = r + tau;
        if z < 0 || z >= nz as i64 {
            continue;
        }
        let image = roi_image(&roi, z as usize, config.enhance);
        let prob = model.predict_map(&image)?;
        let seg = if estimate.within_extent(tau) {
            let est = estimate.at(tau).unwrap_or(&roi.annotation);
            if config.no_gc {
                threshold_components(&prob, None)
            } else {
                let guide = if tau == 0 { None } else { Some(est) };
                // inference fallback is the model alone along the estimate, so it may be empty
                let fallback = || -> Result<Grid<u8>> {
                    let g = rasterize_recist(est, prob.dims())?.map(|&b| b as u8);
                    Ok(threshold_components(&prob, Some(&g)))
                };
                match trimap_from_model(&prob, guide, &roi.annotation, config.p_bg) {
                    Ok(t) => {
                        let params = GrabCutParams {
                            seed: mix(config.seed, 0, tau, u64::MAX),
                            ..config.grabcut.clone()
                        };
                        match grabcut::run(&image, &t, &params) {
                            Ok(g) if g.mask.count_nonzero() >= config.min_fg_px => g.mask,
                            _ => fallback()?,
                        }
                    }
                    Err(Error::ModelFoundNothing) => fallback()?,
                    Err(e) => return Err(e),
                }
            }
        } else {
            match config.beyond_extent {
                BeyondExtent::Skip => continue,
                BeyondExtent::ModelOnly => {
                    let inner = (z - tau.signum()) as usize;
                    match &slices[inner] {
                        Some(prev) if prev.count_nonzero() > 0 => threshold_components(&prob, Some(prev)),
                        _ => continue,
                    }
                }
            }
        };
        roi.paste(&mut mask, z as usize, &seg)?;
        slices[z as usize] = Some(seg);
    }
    Ok(mask)
}

/// Non-learning baseline: per-slice GrabCut from the geometric RECIST
/// estimate, with each slice's ROI sized by its own estimated long axis.
pub fn grabcut_3de(lesion: &Lesion, config: &SelfPacedConfig) -> Result<Mask> {
    let [_, _, nz] = lesion.volume.dims();
    let spacing = lesion.volume.spacing_mm();
    let estimate = recist3d::estimate(&lesion.annotation, spacing, nz)?;
    let mut mask = Mask::empty(lesion.volume.dims(), spacing)?;
    for (tau, ann) in estimate.offsets() {
        let z = ann.slice_index;
        if !estimate.within_extent(tau) || z >= nz {
            continue;
        }
        let side = ((2.0 * ann.long_length_px()).round() as usize).max(1);
        let roi = crop_square(&lesion.volume, ann, estimate.center(), side)?;
        let image = roi_image(&roi, z, config.enhance);
        let trimap = match trimap_from_recist(&roi.annotation, (roi.width(), roi.height())) {
            Ok(t) => t,
            Err(e) => {
                log::debug!("{}: no trimap at offset {tau}: {e}", lesion.id);
                continue;
            }
        };
        let params = GrabCutParams {
            seed: mix(config.seed, 1, tau, u64::MAX),
            ..config.grabcut.clone()
        };
        match grabcut::run(&image, &trimap, &params) {
            Ok(g) => roi.paste(&mut mask, z, &g.mask)?,
            Err(e) => log::debug!("{}: GrabCut failed at offset {tau}: {e}", lesion.id),
        }
    }
    Ok(mask)
}

/// GrabCut on the RECIST slice with a trimap of the given mode; returns the
/// ROI and its mask.
pub fn segment_recist_slice(
    volume: &Volume,
    annotation: &RecistAnnotation,
    mode: TrimapMode,
    params: &GrabCutParams,
    enhance: bool,
) -> Result<(Roi, grabcut::GrabCutResult)> {
    let roi = crop_and_window(volume, annotation)?;
    let image = roi_image(&roi, annotation.slice_index, enhance);
    let trimap = build_trimap(&roi.annotation, (roi.width(), roi.height()), mode)?;
    let result = grabcut::run(&image, &trimap, params)?;
    Ok((roi, result))
}
