//! Synthetic lesion phantoms, patient-level fold splits and the experiment
//! runner.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::enhance::gaussian_blur;
use crate::grabcut::GrabCutParams;
use crate::grid::Grid;
use crate::metrics::{mean_std, volume_change_report, MeanStd, Measurement, VolumeCase, VolumeChangeReport};
use crate::selfpaced::{
    self, grabcut_3de, load_lesions, segment_recist_slice, segment_volume, Lesion, SelfPacedConfig, SelfPacedResult,
};
use crate::trimap::{build_trimap, Label, TrimapMode};
use crate::volume_io::{
    crop_and_window, mask_to_recist, read_lesion_records, Mask, RecistAnnotation, Volume, VoxelData, DEFAULT_WINDOW,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PhantomShape {
    Ellipsoid,
    Superellipsoid { exponent: f64 },
    /// Ellipsoid whose radius is modulated by `lobes` azimuthal bumps of
    /// relative size `amplitude`.
    Blob { amplitude: f64, lobes: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: PhantomShape,
    /// Semi-axes (x, y, z) in mm before rotation.
    pub semi_axes_mm: [f64; 3],
    /// In-plane rotation of the lesion in degrees.
    pub rotation_deg: f64,
    /// Intensities after windowing, in `[0, 1]`.
    pub lesion_intensity: f64,
    pub background_intensity: f64,
    /// Additive Gaussian noise in windowed units.
    pub noise_std: f64,
    /// In-plane Gaussian blur (std, mm) of the clean image, mimicking the
    /// scanner's partial-volume edges. 0 keeps edges sharp.
    pub edge_blur_mm: f64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Lesion center in voxel coordinates; the volume center when absent.
    pub center_vox: Option<[f64; 3]>,
    pub window: [f64; 2],
    pub lesion_id: String,
    pub patient_id: String,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: PhantomShape::Ellipsoid,
            semi_axes_mm: [8.0, 6.0, 6.0],
            rotation_deg: 0.0,
            lesion_intensity: 0.7,
            background_intensity: 0.3,
            noise_std: 0.05,
            edge_blur_mm: 0.0,
            dims: [64, 64, 24],
            spacing_mm: [1.0, 1.0, 2.0],
            center_vox: None,
            window: DEFAULT_WINDOW,
            lesion_id: "phantom".into(),
            patient_id: "phantom".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// Int16 HU volume.
    pub volume: Volume,
    pub ground_truth: Mask,
    pub annotation: RecistAnnotation,
}

impl PhantomSpec {
    fn center(&self) -> [f64; 3] {
        self.center_vox.unwrap_or_else(|| {
            // snap to a voxel center so the mid slice is the unique maximum
            self.dims.map(|n| ((n - 1) / 2) as f64)
        })
    }

    fn bounding_radius(&self) -> f64 {
        match self.shape {
            PhantomShape::Blob { amplitude, .. } => 1.0 + amplitude.abs(),
            _ => 1.0,
        }
    }

    /// Whether the point (mm offsets from the center) lies inside the lesion.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // rotate into the lesion frame
        let x = c * p[0] + s * p[1];
        let y = -s * p[0] + c * p[1];
        let [a, b, cz] = self.semi_axes_mm;
        let (u, v, w) = (x / a, y / b, p[2] / cz);
        match self.shape {
            PhantomShape::Ellipsoid => u * u + v * v + w * w <= 1.0,
            PhantomShape::Superellipsoid { exponent } => {
                u.abs().powf(exponent) + v.abs().powf(exponent) + w.abs().powf(exponent) <= 1.0
            }
            PhantomShape::Blob { amplitude, lobes } => {
                let rho = (u * u + v * v + w * w).sqrt();
                if rho == 0.0 {
                    return true;
                }
                let phi = v.atan2(u);
                let planar = (1.0 - (w / rho) * (w / rho)).max(0.0).sqrt();
                let phase = (self.seed % 628) as f64 / 100.0;
                rho <= 1.0 + amplitude * (lobes as f64 * phi + phase).sin() * planar
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.semi_axes_mm.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidParameter("semi-axes must be positive".into()));
        }
        if let PhantomShape::Superellipsoid { exponent } = self.shape {
            if !(exponent > 0.0) {
                return Err(Error::InvalidParameter("superellipsoid exponent must be > 0".into()));
            }
        }
        if let PhantomShape::Blob { amplitude, .. } = self.shape {
            if !(0.0..1.0).contains(&amplitude) {
                return Err(Error::InvalidParameter("blob amplitude must be in [0, 1)".into()));
            }
        }
        for v in [self.lesion_intensity, self.background_intensity] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("intensity {v} outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0) || !(self.edge_blur_mm >= 0.0) || !(self.window[0] < self.window[1]) {
            return Err(Error::InvalidParameter("bad noise or window".into()));
        }
        let c = self.center();
        let reach = self.bounding_radius();
        let max_axis = self.semi_axes_mm.iter().cloned().fold(0.0, f64::max) * reach;
        for d in 0..3 {
            let r = max_axis / self.spacing_mm[d];
            if c[d] - r < 0.0 || c[d] + r > (self.dims[d] - 1) as f64 {
                return Err(Error::InvalidParameter(format!(
                    "lesion exceeds the volume along axis {d}"
                )));
            }
        }
        Ok(())
    }
}

/// Rasterize the lesion, add noise and measure its RECIST diameters.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let c = spec.center();
    let mut truth = vec![0u8; nx * ny * nz];
    let mut clean = vec![0.0; nx * ny * nz];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [
                    (x as f64 - c[0]) * spec.spacing_mm[0],
                    (y as f64 - c[1]) * spec.spacing_mm[1],
                    (z as f64 - c[2]) * spec.spacing_mm[2],
                ];
                let inside = spec.contains(p);
                truth[i] = inside as u8;
                clean[i] = if inside {
                    spec.lesion_intensity
                } else {
                    spec.background_intensity
                };
                i += 1;
            }
        }
    }
    if spec.edge_blur_mm > 0.0 {
        let sigma_px = spec.edge_blur_mm / (0.5 * (spec.spacing_mm[0] + spec.spacing_mm[1]));
        for plane in clean.chunks_exact_mut(nx * ny) {
            let g = Grid::from_vec(nx, ny, plane.to_vec())?;
            plane.copy_from_slice(gaussian_blur(&g, sigma_px).as_slice());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let [lo, hi] = spec.window;
    let hu: Vec<i16> = clean
        .iter()
        .map(|&v| {
            let v = if spec.noise_std > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            };
            (lo + v * (hi - lo)).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    let ground_truth = Mask::new(spec.dims, spec.spacing_mm, truth)?;
    let mut annotation = mask_to_recist(&ground_truth)?;
    annotation.window = spec.window;
    annotation.lesion_id = spec.lesion_id.clone();
    annotation.patient_id = spec.patient_id.clone();
    Ok(Phantom {
        volume: Volume::new(spec.dims, spec.spacing_mm, VoxelData::Int16(hu))?,
        ground_truth,
        annotation,
    })
}

/// Patient-level folds: patients are shuffled by `seed` and dealt round-robin,
/// so fold sizes differ by at most one patient. Returns the fold of every
/// entry of `patient_ids`.
pub fn kfold_split(patient_ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {k}")));
    }
    let unique: Vec<&String> = patient_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < k {
        return Err(Error::InvalidParameter(format!(
            "{} patients cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut order = unique.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of = |p: &String| order.iter().position(|q| *q == p).expect("known patient") % k;
    Ok(patient_ids.iter().map(fold_of).collect())
}

/// A random lesion spec drawn around the given shape; used by the experiments.
pub fn random_spec(shape: PhantomShape, index: usize, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let a = rng.random_range(7.0..11.0);
    let b = a * rng.random_range(0.6..0.95);
    PhantomSpec {
        shape,
        semi_axes_mm: [a, b, rng.random_range(5.0..8.0)],
        rotation_deg: rng.random_range(0.0..180.0),
        lesion_intensity: rng.random_range(0.6..0.75),
        background_intensity: rng.random_range(0.25..0.4),
        noise_std: 0.05,
        edge_blur_mm: 0.0,
        dims: [64, 64, 16],
        spacing_mm: [1.0, 1.0, 2.0],
        center_vox: None,
        window: DEFAULT_WINDOW,
        lesion_id: format!("lesion{index:03}"),
        patient_id: format!("patient{:03}", index / 2),
        seed: rng.random(),
    }
}

/// Superellipsoid lesion elongated along z, so the spherical off-slice
/// estimate is far too small a few slices away from the RECIST slice.
pub fn offset_spec(index: usize, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    let a = rng.random_range(9.0..12.0);
    PhantomSpec {
        shape: PhantomShape::Superellipsoid { exponent: 4.0 },
        semi_axes_mm: [a, a * rng.random_range(0.75..0.95), rng.random_range(14.0..17.0)],
        rotation_deg: rng.random_range(0.0..90.0),
        lesion_intensity: rng.random_range(0.62..0.72),
        background_intensity: rng.random_range(0.28..0.38),
        noise_std: 0.05,
        edge_blur_mm: 0.0,
        dims: [64, 64, 17],
        spacing_mm: [1.0, 1.0, 2.5],
        center_vox: None,
        window: DEFAULT_WINDOW,
        lesion_id: format!("lesion{index:03}"),
        patient_id: format!("patient{:03}", index / 2),
        seed: rng.random(),
    }
}

/// Baseline and follow-up of one lesion; the follow-up grows more along z
/// than in-plane, which diameters on the axial slice cannot see.
pub fn growth_pair(index: usize, seed: u64) -> (PhantomSpec, PhantomSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9407 ^ (index as u64).wrapping_mul(0x94d0_49bb_1331_11eb));
    let a = rng.random_range(6.0..9.0);
    let base = PhantomSpec {
        shape: PhantomShape::Superellipsoid { exponent: 3.0 },
        semi_axes_mm: [a, a * rng.random_range(0.7..0.95), a * rng.random_range(1.0..1.5)],
        rotation_deg: rng.random_range(0.0..90.0),
        noise_std: 0.03,
        dims: [56, 56, 24],
        spacing_mm: [1.0, 1.0, 2.0],
        lesion_id: format!("lesion{index:03}"),
        patient_id: format!("patient{index:03}"),
        seed: rng.random(),
        ..Default::default()
    };
    let g_xy = rng.random_range(0.9..1.25);
    let g_z = rng.random_range(1.0..1.6);
    let [x, y, z] = base.semi_axes_mm;
    let follow = PhantomSpec {
        semi_axes_mm: [x * g_xy, y * g_xy, z * g_z],
        lesion_id: format!("lesion{index:03}-followup"),
        seed: rng.random(),
        ..base.clone()
    };
    (base, follow)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `trimap-modes`, `offsets` or `volume-change`.
    pub experiment: String,
    /// Number of phantom lesions (or pairs); the experiment's default when absent.
    pub lesions: Option<usize>,
    pub seed: u64,
    /// Largest slice offset reported by `offsets`.
    pub max_offset: i64,
    pub self_paced: SelfPacedConfig,
    /// Lesion records with ground truth to use instead of phantoms.
    pub records: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "trimap-modes".into(),
            lesions: None,
            seed: 0,
            max_offset: 6,
            self_paced: SelfPacedConfig::default(),
            records: None,
        }
    }
}

pub const EXPERIMENTS: [&str; 3] = ["trimap-modes", "offsets", "volume-change"];

fn dice2d(pred: &Grid<u8>, gt: &Grid<u8>) -> Result<f64> {
    let p = Mask::from_grid(pred, [1.0; 3])?;
    let g = Mask::from_grid(gt, [1.0; 3])?;
    crate::metrics::dice(&p, &g)
}

fn phantom_lesions(n: usize, spec: impl Fn(usize) -> PhantomSpec + Sync) -> Result<Vec<Lesion>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_phantom(&spec(i)).map(|p| Lesion::from_phantom(&p)))
        .collect()
}

fn lesions_for(config: &ExperimentConfig, default_n: usize, spec: impl Fn(usize) -> PhantomSpec + Sync) -> Result<Vec<Lesion>> {
    match &config.records {
        Some(path) => {
            let records = read_lesion_records(path)?;
            let lesions: Vec<Lesion> = load_lesions(&records)
                .into_iter()
                .filter(|l| l.ground_truth.is_some())
                .collect();
            if lesions.is_empty() {
                return Err(Error::InvalidParameter(
                    "no lesion with ground truth in the records".into(),
                ));
            }
            Ok(lesions)
        }
        None => phantom_lesions(config.lesions.unwrap_or(default_n), spec),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimapModeRow {
    pub lesion: String,
    pub mode: TrimapMode,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// GrabCut on every RECIST slice with each trimap mode, DICE against the
/// ground-truth slice. `RecistDilateOnly` is scored on its dilated diameters
/// without GrabCut.
pub fn trimap_mode_study(lesions: &[Lesion], params: &GrabCutParams) -> Result<Vec<TrimapModeRow>> {
    let per_lesion: Vec<Result<Vec<TrimapModeRow>>> = lesions
        .par_iter()
        .map(|l| {
            let gt = l
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("{} has no ground truth", l.id)))?;
            let z = l.annotation.slice_index;
            let gt_slice = Mask::from_grid(&gt.slice(z), [1.0; 3])?;
            TrimapMode::ALL
                .iter()
                .map(|&mode| {
                    let (roi, labels) = if mode == TrimapMode::RecistDilateOnly {
                        // the dilated diameters are the label themselves
                        let roi = crop_and_window(&l.volume, &l.annotation)?;
                        let t = build_trimap(&roi.annotation, (roi.width(), roi.height()), mode)?;
                        let fg = t.labels().map(|&lab| (lab == Label::Fg) as u8);
                        (roi, fg)
                    } else {
                        let (roi, r) = segment_recist_slice(&l.volume, &l.annotation, mode, params, false)?;
                        (roi, r.mask)
                    };
                    let mut full = Mask::empty(l.volume.dims(), l.volume.spacing_mm())?;
                    roi.paste(&mut full, z, &labels)?;
                    let pred = Mask::from_grid(&full.slice(z), [1.0; 3])?;
                    let c = crate::metrics::confusion(&pred, &gt_slice)?;
                    let (precision, recall) = c.precision_recall();
                    Ok(TrimapModeRow {
                        lesion: l.id.clone(),
                        mode,
                        dice: c.dice(),
                        precision,
                        recall,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_lesion {
        rows.extend(r?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetRow {
    pub lesion: String,
    pub offset: i64,
    /// Self-paced model followed by GrabCut.
    pub wsss: f64,
    /// Self-paced model output thresholded, no GrabCut.
    pub wsss_no_gc: f64,
    pub grabcut_3de: f64,
}

#[derive(Clone, Debug)]
pub struct OffsetStudy {
    pub rows: Vec<OffsetRow>,
    pub volume_dice: Vec<(String, f64, f64)>,
    pub training: SelfPacedResult,
}

/// Self-paced training over all lesions, then per-offset slice DICE of the
/// volumetric segmentation against GrabCut-3DE.
pub fn offset_study(lesions: &[Lesion], config: &SelfPacedConfig, max_offset: i64) -> Result<OffsetStudy> {
    let training = selfpaced::run(lesions, config)?;
    let model = training.final_model();
    let no_gc = SelfPacedConfig {
        no_gc: true,
        ..config.clone()
    };
    let per_lesion: Vec<Result<(Vec<OffsetRow>, (String, f64, f64))>> = lesions
        .par_iter()
        .map(|l| {
            let gt = l
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("{} has no ground truth", l.id)))?;
            let wsss = segment_volume(l, model, config)?;
            let hnn = segment_volume(l, model, &no_gc)?;
            let gc3 = grabcut_3de(l, config)?;
            let r = l.annotation.slice_index as i64;
            let nz = l.volume.dims()[2] as i64;
            let mut rows = Vec::new();
            for tau in -max_offset..=max_offset {
                let z = r + tau;
                if z < 0 || z >= nz {
                    continue;
                }
                let g = gt.slice(z as usize);
                rows.push(OffsetRow {
                    lesion: l.id.clone(),
                    offset: tau,
                    wsss: dice2d(&wsss.slice(z as usize), &g)?,
                    wsss_no_gc: dice2d(&hnn.slice(z as usize), &g)?,
                    grabcut_3de: dice2d(&gc3.slice(z as usize), &g)?,
                });
            }
            let vol = (
                l.id.clone(),
                crate::metrics::dice(&wsss, gt)?,
                crate::metrics::dice(&gc3, gt)?,
            );
            Ok((rows, vol))
        })
        .collect();
    let mut rows = Vec::new();
    let mut volume_dice = Vec::new();
    for r in per_lesion {
        let (rs, v) = r?;
        rows.extend(rs);
        volume_dice.push(v);
    }
    Ok(OffsetStudy {
        rows,
        volume_dice,
        training,
    })
}

/// Mean DICE per offset for rows whose `|offset|` is in `offsets`.
pub fn mean_over_offsets(rows: &[OffsetRow], offsets: &[i64], f: impl Fn(&OffsetRow) -> f64) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| offsets.contains(&r.offset.abs()))
        .map(f)
        .collect();
    mean_std(&vals).mean
}

/// Volume changes by RECIST ellipsoid and by GrabCut-3DE against the true
/// mask volumes.
pub fn volume_change_study(
    pairs: &[(Phantom, Phantom)],
    config: &SelfPacedConfig,
) -> Result<(VolumeChangeReport, VolumeChangeReport)> {
    let cases: Vec<Result<(VolumeCase, VolumeCase)>> = pairs
        .par_iter()
        .map(|(b, f)| {
            let truth = (Measurement::Mask(b.ground_truth.clone()), Measurement::Mask(f.ground_truth.clone()));
            let recist = (
                Measurement::Recist {
                    annotation: b.annotation.clone(),
                    spacing_mm: b.volume.spacing_mm(),
                },
                Measurement::Recist {
                    annotation: f.annotation.clone(),
                    spacing_mm: f.volume.spacing_mm(),
                },
            );
            let seg = (
                Measurement::Mask(grabcut_3de(&Lesion::from_phantom(b), config)?),
                Measurement::Mask(grabcut_3de(&Lesion::from_phantom(f), config)?),
            );
            let id = b.annotation.lesion_id.clone();
            Ok((
                VolumeCase {
                    id: id.clone(),
                    method: recist,
                    reference: truth.clone(),
                },
                VolumeCase {
                    id,
                    method: seg,
                    reference: truth,
                },
            ))
        })
        .collect();
    let mut recist = Vec::new();
    let mut seg = Vec::new();
    for c in cases {
        let (r, s) = c?;
        recist.push(r);
        seg.push(s);
    }
    Ok((volume_change_report(&recist)?, volume_change_report(&seg)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
struct ModeSummary {
    mode: TrimapMode,
    n: usize,
    dice: MeanStd,
    precision: MeanStd,
    recall: MeanStd,
}

#[derive(Clone, Debug, Serialize)]
struct OffsetSummary {
    offset: i64,
    n: usize,
    wsss: MeanStd,
    wsss_no_gc: MeanStd,
    grabcut_3de: MeanStd,
}

/// Run a named experiment and write its reports into `out_dir`. Returns the
/// written files in order.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let seed = config.seed;
    let sp = SelfPacedConfig {
        seed,
        ..config.self_paced.clone()
    };
    let mut files = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        write_text(&p, &text)?;
        files.push(p);
        Ok(())
    };
    let json = |v: &dyn erased::Json| v.to_pretty();
    match config.experiment.as_str() {
        "trimap-modes" => {
            let lesions = lesions_for(config, 50, |i| random_spec(PhantomShape::Ellipsoid, i, seed))?;
            let params = GrabCutParams {
                seed,
                ..sp.grabcut.clone()
            };
            let rows = trimap_mode_study(&lesions, &params)?;
            let mut csv = String::from("lesion,mode,dice,precision,recall\n");
            for r in &rows {
                csv += &format!("{},{},{:.6},{:.6},{:.6}\n", r.lesion, r.mode.name(), r.dice, r.precision, r.recall);
            }
            emit("trimap_modes.csv", csv)?;
            let summary: Vec<ModeSummary> = TrimapMode::ALL
                .iter()
                .map(|&mode| {
                    let sel: Vec<&TrimapModeRow> = rows.iter().filter(|r| r.mode == mode).collect();
                    let col = |f: fn(&TrimapModeRow) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                    ModeSummary {
                        mode,
                        n: sel.len(),
                        dice: col(|r| r.dice),
                        precision: col(|r| r.precision),
                        recall: col(|r| r.recall),
                    }
                })
                .collect();
            let mut csv = String::from("mode,n,dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std\n");
            for s in &summary {
                csv += &format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    s.mode.name(),
                    s.n,
                    s.dice.mean,
                    s.dice.std,
                    s.precision.mean,
                    s.precision.std,
                    s.recall.mean,
                    s.recall.std
                );
            }
            emit("trimap_modes_summary.csv", csv)?;
            emit("trimap_modes_summary.json", json(&summary))?;
        }
        "offsets" => {
            let lesions = lesions_for(config, 20, |i| offset_spec(i, seed))?;
            let study = offset_study(&lesions, &sp, config.max_offset)?;
            let mut csv = String::from("lesion,offset,wsss,wsss_no_gc,grabcut_3de\n");
            for r in &study.rows {
                csv += &format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    r.lesion, r.offset, r.wsss, r.wsss_no_gc, r.grabcut_3de
                );
            }
            emit("offsets.csv", csv)?;
            let summary: Vec<OffsetSummary> = (-config.max_offset..=config.max_offset)
                .map(|offset| {
                    let sel: Vec<&OffsetRow> = study.rows.iter().filter(|r| r.offset == offset).collect();
                    let col = |f: fn(&OffsetRow) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                    OffsetSummary {
                        offset,
                        n: sel.len(),
                        wsss: col(|r| r.wsss),
                        wsss_no_gc: col(|r| r.wsss_no_gc),
                        grabcut_3de: col(|r| r.grabcut_3de),
                    }
                })
                .collect();
            let mut csv = String::from("offset,n,wsss_mean,wsss_std,wsss_no_gc_mean,wsss_no_gc_std,grabcut_3de_mean,grabcut_3de_std\n");
            for s in &summary {
                csv += &format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    s.offset,
                    s.n,
                    s.wsss.mean,
                    s.wsss.std,
                    s.wsss_no_gc.mean,
                    s.wsss_no_gc.std,
                    s.grabcut_3de.mean,
                    s.grabcut_3de.std
                );
            }
            emit("offsets_summary.csv", csv)?;
            emit("offsets_summary.json", json(&summary))?;
            let mut csv = String::from("lesion,wsss_volume_dice,grabcut_3de_volume_dice\n");
            for (id, a, b) in &study.volume_dice {
                csv += &format!("{id},{a:.6},{b:.6}\n");
            }
            emit("offsets_volume_dice.csv", csv)?;
            emit("harvest_log.json", json(&study.training.log))?;
        }
        "volume-change" => {
            if config.records.is_some() {
                return Err(Error::InvalidParameter(
                    "volume-change runs on generated follow-up pairs only".into(),
                ));
            }
            let n = config.lesions.unwrap_or(20);
            let pairs: Vec<(Phantom, Phantom)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let (b, f) = growth_pair(i, seed);
                    Ok((generate_phantom(&b)?, generate_phantom(&f)?))
                })
                .collect::<Result<_>>()?;
            let (recist, seg) = volume_change_study(&pairs, &sp)?;
            let mut csv = String::from(
                "lesion,true_delta_mm3,recist_delta_mm3,grabcut_3de_delta_mm3\n",
            );
            for (r, s) in recist.rows.iter().zip(&seg.rows) {
                csv += &format!(
                    "{},{:.3},{:.3},{:.3}\n",
                    r.id, r.reference_delta_mm3, r.method_delta_mm3, s.method_delta_mm3
                );
            }
            emit("volume_change.csv", csv)?;
            let fits = serde_json::json!({
                "recist": recist.fit,
                "grabcut_3de": seg.fit,
            });
            emit("volume_change_fit.json", json(&fits))?;
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown experiment {other:?}; expected one of {}",
                EXPERIMENTS.join(", ")
            )))
        }
    }
    Ok(files)
}

mod erased {
    pub trait Json {
        fn to_pretty(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_pretty(&self) -> String {
            serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_volume_and_diameter() {
        let spec = PhantomSpec {
            semi_axes_mm: [5.0, 5.0, 5.0],
            dims: [24, 24, 24],
            spacing_mm: [1.0, 1.0, 1.0],
            noise_std: 0.0,
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 125.0;
        let count = p.ground_truth.count() as f64;
        assert!((count - analytic).abs() / analytic < 0.05, "{count} vs {analytic}");
        let long = p.annotation.long_length_mm(spec.spacing_mm);
        assert!((long - 10.0).abs() <= 1.0, "long {long}");
        assert_eq!(p.annotation.slice_index, 11);
    }

    #[test]
    fn noiseless_image_has_two_levels() {
        let spec = PhantomSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        let levels: BTreeSet<i16> = match p.volume.data() {
            VoxelData::Int16(v) => v.iter().cloned().collect(),
            _ => unreachable!(),
        };
        assert_eq!(levels.into_iter().collect::<Vec<_>>(), vec![-40, 120]);
    }

    #[test]
    fn oversized_lesion_rejected() {
        let spec = PhantomSpec {
            semi_axes_mm: [40.0, 6.0, 6.0],
            ..Default::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn shapes_differ_off_center() {
        let sq = PhantomSpec {
            shape: PhantomShape::Superellipsoid { exponent: 4.0 },
            ..Default::default()
        };
        let el = PhantomSpec::default();
        // the corner direction separates the two
        let p = [6.0, 4.8, 0.0];
        assert!(sq.contains(p) && !el.contains(p));
        let blob = PhantomSpec {
            shape: PhantomShape::Blob {
                amplitude: 0.2,
                lobes: 3,
            },
            ..Default::default()
        };
        assert!(generate_phantom(&blob).unwrap().ground_truth.count() > 0);
    }

    #[test]
    fn phantoms_are_seeded() {
        let s = PhantomSpec::default();
        let a = generate_phantom(&s).unwrap();
        let b = generate_phantom(&s).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.annotation, b.annotation);
    }

    #[test]
    fn folds_partition_patients() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let f = kfold_split(&ids, 5, 7).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 2);
        }
        assert_eq!(f, kfold_split(&ids, 5, 7).unwrap());
        let mut lesions: Vec<String> = Vec::new();
        for i in 0..7 {
            for _ in 0..=(i % 3) {
                lesions.push(format!("p{i}"));
            }
        }
        let f = kfold_split(&lesions, 3, 1).unwrap();
        for (i, a) in lesions.iter().enumerate() {
            for (j, b) in lesions.iter().enumerate() {
                if a == b {
                    assert_eq!(f[i], f[j]);
                }
            }
        }
        assert!(kfold_split(&ids[..3], 5, 0).is_err());
        assert!(kfold_split(&ids, 1, 0).is_err());
    }

    #[test]
    fn edge_blur_softens_but_keeps_truth() {
        let sharp = PhantomSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let soft = PhantomSpec {
            edge_blur_mm: 1.0,
            ..sharp.clone()
        };
        let a = generate_phantom(&sharp).unwrap();
        let b = generate_phantom(&soft).unwrap();
        assert_eq!(a.ground_truth, b.ground_truth);
        let levels = |p: &Phantom| -> BTreeSet<i16> {
            match p.volume.data() {
                VoxelData::Int16(v) => v.iter().cloned().collect(),
                _ => unreachable!(),
            }
        };
        assert!(levels(&b).len() > 2);
        // far from the lesion nothing changes
        assert_eq!(a.volume.value(0, 0, 0), b.volume.value(0, 0, 0));
    }

    #[test]
    fn trimap_experiment_shape_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            lesions: Some(4),
            seed: 9,
            ..Default::default()
        };
        let files = run_experiment(&cfg, &dir.path().join("a")).unwrap();
        run_experiment(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(dir.path().join("b").join(name)).unwrap());
        }
        let summary = fs::read_to_string(dir.path().join("a/trimap_modes_summary.csv")).unwrap();
        // header plus one row per mode
        assert_eq!(summary.lines().count(), 1 + TrimapMode::ALL.len());
        let rows = fs::read_to_string(dir.path().join("a/trimap_modes.csv")).unwrap();
        assert_eq!(rows.lines().count(), 1 + 4 * TrimapMode::ALL.len());
    }

    #[test]
    fn offsets_experiment_covers_all_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            experiment: "offsets".into(),
            lesions: Some(2),
            ..Default::default()
        };
        cfg.self_paced.rounds = 1;
        cfg.self_paced.train.epochs = 3;
        run_experiment(&cfg, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("offsets_summary.csv")).unwrap();
        let offsets: Vec<i64> = summary
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(offsets, (-6..=6).collect::<Vec<_>>());
        assert!(dir.path().join("harvest_log.json").exists());
    }

    #[test]
    fn volume_change_experiment_writes_fit() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            experiment: "volume-change".into(),
            lesions: Some(4),
            ..Default::default()
        };
        run_experiment(&cfg, dir.path()).unwrap();
        let fit: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("volume_change_fit.json")).unwrap()).unwrap();
        assert!(fit["recist"]["slope"].is_number());
        assert!(fit["grabcut_3de"]["slope"].is_number());
    }

    #[test]
    fn unknown_experiment_rejected() {
        let cfg = ExperimentConfig {
            experiment: "nope".into(),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_experiment(&cfg, dir.path()), Err(Error::InvalidParameter(_))));
    }
}
