//! Volumes, masks and RECIST annotations, plus their on-disk formats.
//!
//! A volume is stored as a JSON header (`<name>.vol.json`) next to a raw
//! little-endian payload (`<name>.raw`) holding voxels in z-major order.
//! Annotations are JSON arrays of [`RecistAnnotation`] records
//! (`<name>.recist.json`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Default soft-tissue window in HU, used when an annotation carries none.
pub const DEFAULT_WINDOW: [f64; 2] = [-160.0, 240.0];

/// Maximum distance in pixels between the two RECIST segments.
pub const INTERSECTION_EPS_PX: f64 = 0.5;

/// Allowed deviation from perpendicular for the short axis, in degrees.
pub const SHORT_AXIS_TOLERANCE_DEG: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int16,
    Float32,
    Uint8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Int16 => 2,
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

/// Sidecar header of a raw volume file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
    /// Number of stacked channels along z (enhancement stacks); absent for
    /// ordinary volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

impl VolumeHeader {
    fn validate(&self) -> Result<()> {
        if self.order != "zyx" {
            return Err(Error::InvalidHeader(format!(
                "unsupported voxel order {:?}, expected \"zyx\"",
                self.order
            )));
        }
        validate_geometry(self.dims, self.spacing_mm)
    }

    fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }
}

fn validate_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidHeader(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidHeader(format!(
            "non-positive spacing {spacing:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    Int16(Vec<i16>),
    Float32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Int16(v) => v.len(),
            VoxelData::Float32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            VoxelData::Int16(v) => v[i] as f64,
            VoxelData::Float32(v) => v[i] as f64,
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            VoxelData::Int16(_) => Dtype::Int16,
            VoxelData::Float32(_) => Dtype::Float32,
        }
    }
}

/// 3D scalar grid with physical spacing. Voxel `(x, y, z)` lives at index
/// `(z * ny + y) * nx + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: VoxelData,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: VoxelData) -> Result<Self> {
        validate_geometry(dims, spacing_mm)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Volume {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        let [nx, ny, _] = self.dims;
        self.data.get((z * ny + y) * nx + x)
    }

    /// Axial slice `z` as real values.
    pub fn slice(&self, z: usize) -> Grid<f64> {
        let [nx, ny, _] = self.dims;
        Grid::from_fn(nx, ny, |x, y| self.value(x, y, z))
    }

    /// Build a float volume from axial slices of identical size.
    pub fn from_slices(slices: &[Grid<f64>], spacing_mm: [f64; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidParameter("no slices".into()))?;
        let (nx, ny) = first.dims();
        let mut data = Vec::with_capacity(nx * ny * slices.len());
        for s in slices {
            if s.dims() != (nx, ny) {
                return Err(Error::ShapeMismatch("slices differ in size".into()));
            }
            data.extend(s.as_slice().iter().map(|&v| v as f32));
        }
        Volume::new(
            [nx, ny, slices.len()],
            spacing_mm,
            VoxelData::Float32(data),
        )
    }
}

/// Binary voxel mask sharing a volume's geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<u8>) -> Result<Self> {
        validate_geometry(dims, spacing_mm)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidHeader(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(Mask {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn empty(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        Mask::new(dims, spacing_mm, vec![0; dims.iter().product()])
    }

    /// A single-slice mask from a 2D raster.
    pub fn from_grid(grid: &Grid<u8>, spacing_mm: [f64; 3]) -> Result<Self> {
        Mask::new(
            [grid.width(), grid.height(), 1],
            spacing_mm,
            grid.as_slice().iter().map(|&v| (v != 0) as u8).collect(),
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let [nx, ny, _] = self.dims;
        self.data[(z * ny + y) * nx + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn slice(&self, z: usize) -> Grid<u8> {
        let [nx, ny, _] = self.dims;
        let start = z * nx * ny;
        Grid::from_vec(nx, ny, self.data[start..start + nx * ny].to_vec())
            .expect("slice has the in-plane shape")
    }

    pub fn set_slice(&mut self, z: usize, slice: &Grid<u8>) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if slice.dims() != (nx, ny) || z >= nz {
            return Err(Error::ShapeMismatch(format!(
                "cannot place {}x{} slice at z={} in {:?} mask",
                slice.width(),
                slice.height(),
                z,
                self.dims
            )));
        }
        let start = z * nx * ny;
        for (d, &s) in self.data[start..start + nx * ny]
            .iter_mut()
            .zip(slice.as_slice())
        {
            *d = (s != 0) as u8;
        }
        Ok(())
    }
}

/// RECIST measurement: long and short diameters on one axial slice, with
/// endpoints in subpixel `(x, y)` coordinates (pixel centers at integers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecistAnnotation {
    pub slice_index: usize,
    pub long_axis: [[f64; 2]; 2],
    pub short_axis: [[f64; 2]; 2],
    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default)]
    pub lesion_id: String,
    #[serde(default)]
    pub patient_id: String,
}

fn default_window() -> [f64; 2] {
    DEFAULT_WINDOW
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm_px(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn norm_mm(v: [f64; 2], spacing: [f64; 3]) -> f64 {
    (v[0] * spacing[0]).hypot(v[1] * spacing[1])
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return norm_px(sub(p, a));
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    norm_px(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

/// Minimum distance between two closed segments in the plane.
pub fn segment_distance(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    let cross = |o: [f64; 2], p: [f64; 2], q: [f64; 2]| {
        (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])
    };
    let d1 = cross(b[0], b[1], a[0]);
    let d2 = cross(b[0], b[1], a[1]);
    let d3 = cross(a[0], a[1], b[0]);
    let d4 = cross(a[0], a[1], b[1]);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return 0.0;
    }
    point_segment_distance(a[0], b[0], b[1])
        .min(point_segment_distance(a[1], b[0], b[1]))
        .min(point_segment_distance(b[0], a[0], a[1]))
        .min(point_segment_distance(b[1], a[0], a[1]))
}

impl RecistAnnotation {
    pub fn long_length_px(&self) -> f64 {
        norm_px(sub(self.long_axis[1], self.long_axis[0]))
    }

    pub fn short_length_px(&self) -> f64 {
        norm_px(sub(self.short_axis[1], self.short_axis[0]))
    }

    pub fn long_length_mm(&self, spacing: [f64; 3]) -> f64 {
        norm_mm(sub(self.long_axis[1], self.long_axis[0]), spacing)
    }

    pub fn short_length_mm(&self, spacing: [f64; 3]) -> f64 {
        norm_mm(sub(self.short_axis[1], self.short_axis[0]), spacing)
    }

    /// Crossing point of the two diameters' supporting lines. Falls back to the
    /// long-axis midpoint when the axes are parallel or degenerate.
    pub fn intersection(&self) -> [f64; 2] {
        let [p0, p1] = self.long_axis;
        let [q0, q1] = self.short_axis;
        let r = sub(p1, p0);
        let s = sub(q1, q0);
        let denom = r[0] * s[1] - r[1] * s[0];
        let scale = norm_px(r) * norm_px(s);
        if scale == 0.0 || denom.abs() <= 1e-12 * scale {
            return [(p0[0] + p1[0]) / 2.0, (p0[1] + p1[1]) / 2.0];
        }
        let qp = sub(q0, p0);
        let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
        [p0[0] + t * r[0], p0[1] + t * r[1]]
    }

    pub fn endpoints(&self) -> [[f64; 2]; 4] {
        [
            self.long_axis[0],
            self.long_axis[1],
            self.short_axis[0],
            self.short_axis[1],
        ]
    }

    /// The same annotation shifted by `(-dx, -dy)`, e.g. into ROI coordinates.
    pub fn translated(&self, dx: f64, dy: f64) -> RecistAnnotation {
        let mv = |p: [f64; 2]| [p[0] - dx, p[1] - dy];
        RecistAnnotation {
            long_axis: [mv(self.long_axis[0]), mv(self.long_axis[1])],
            short_axis: [mv(self.short_axis[0]), mv(self.short_axis[1])],
            ..self.clone()
        }
    }

    /// Check the annotation against a volume geometry.
    pub fn validate(&self, dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
        if self.slice_index >= dims[2] {
            return Err(Error::InvalidAnnotation(format!(
                "slice index {} outside volume depth {}",
                self.slice_index, dims[2]
            )));
        }
        for p in self.endpoints() {
            if !point_in_plane(p, dims) {
                return Err(Error::InvalidAnnotation(format!(
                    "endpoint ({:.2}, {:.2}) outside {}x{} slice",
                    p[0], p[1], dims[0], dims[1]
                )));
            }
        }
        let long = self.long_length_mm(spacing);
        let short = self.short_length_mm(spacing);
        if long + 1e-9 < short {
            return Err(Error::InvalidAnnotation(format!(
                "long axis {long:.3} mm shorter than short axis {short:.3} mm"
            )));
        }
        if segment_distance(self.long_axis, self.short_axis) > INTERSECTION_EPS_PX {
            return Err(Error::InvalidAnnotation(
                "long and short axes do not intersect".into(),
            ));
        }
        Ok(())
    }
}

fn point_in_plane(p: [f64; 2], dims: [usize; 3]) -> bool {
    p[0].is_finite()
        && p[1].is_finite()
        && p[0] >= -0.5
        && p[1] >= -0.5
        && p[0] < dims[0] as f64 - 0.5
        && p[1] < dims[1] as f64 - 0.5
}

/// One lesion of a study: where its data lives and which fold it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub volume: PathBuf,
    pub annotation: RecistAnnotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

/// Payload path paired with a header path: `a/b.vol.json` -> `a/b.raw`.
pub fn payload_path(header: &Path) -> PathBuf {
    let name = header
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".vol.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    header.with_file_name(format!("{stem}.raw"))
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    header.validate()?;
    Ok(header)
}

fn read_payload(path: &Path, header: &VolumeHeader) -> Result<Vec<u8>> {
    let raw_path = payload_path(path);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.voxel_count() * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn write_raw(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let bytes = read_payload(path, &header)?;
    let data = match header.dtype {
        Dtype::Int16 => VoxelData::Int16(
            bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        Dtype::Float32 => VoxelData::Float32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::Uint8 => VoxelData::Int16(bytes.iter().map(|&b| b as i16).collect()),
    };
    Volume::new(header.dims, header.spacing_mm, data)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_with_channels(volume, path, None)
}

/// Write a volume whose z axis stacks `channels` co-registered planes.
pub fn write_volume_with_channels(
    volume: &Volume,
    path: impl AsRef<Path>,
    channels: Option<usize>,
) -> Result<()> {
    let header = VolumeHeader {
        dims: volume.dims,
        spacing_mm: volume.spacing_mm,
        dtype: volume.data.dtype(),
        order: "zyx".into(),
        channels,
    };
    let payload: Vec<u8> = match &volume.data {
        VoxelData::Int16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VoxelData::Float32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    write_raw(path.as_ref(), &header, &payload)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (header, data) = read_label_raster(path)?;
    Mask::new(header.dims, header.spacing_mm, data)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_label_raster(mask.dims, mask.spacing_mm, &mask.data, path)
}

/// Read an unsigned 8-bit label raster (masks, exported trimaps).
pub fn read_label_raster(path: impl AsRef<Path>) -> Result<(VolumeHeader, Vec<u8>)> {
    let path = path.as_ref();
    let header = read_header(path)?;
    if header.dtype != Dtype::Uint8 {
        return Err(Error::InvalidHeader(format!(
            "label raster must be uint8, found {:?}",
            header.dtype
        )));
    }
    let data = read_payload(path, &header)?;
    Ok((header, data))
}

pub fn write_label_raster(
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: &[u8],
    path: impl AsRef<Path>,
) -> Result<()> {
    validate_geometry(dims, spacing_mm)?;
    let n: usize = dims.iter().product();
    if data.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            actual: data.len(),
        });
    }
    let header = VolumeHeader {
        dims,
        spacing_mm,
        dtype: Dtype::Uint8,
        order: "zyx".into(),
        channels: None,
    };
    write_raw(path.as_ref(), &header, data)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<RecistAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_annotations(annotations: &[RecistAnnotation], path: impl AsRef<Path>) -> Result<()> {
    write_json(annotations, path)
}

pub fn read_lesion_records(path: impl AsRef<Path>) -> Result<Vec<LesionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<LesionRecord> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    // relative paths are taken relative to the record file
    if let Some(dir) = path.parent() {
        for r in &mut records {
            if r.volume.is_relative() {
                r.volume = dir.join(&r.volume);
            }
            if let Some(gt) = r.ground_truth.as_mut().filter(|g| g.is_relative()) {
                *gt = dir.join(&*gt);
            }
        }
    }
    Ok(records)
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Affine HU window to `[0, 1]`, clipped.
#[inline]
pub fn window_value(hu: f64, lo: f64, hi: f64) -> f64 {
    ((hu - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Axial region of interest cut from a volume, with its placement.
#[derive(Clone, Debug)]
pub struct Roi {
    /// Windowed intensities in `[0, 1]`, all slices of the source volume.
    pub volume: Volume,
    /// In-plane offset `(x0, y0)` of the ROI inside the source volume.
    pub origin: [usize; 2],
    /// The annotation expressed in ROI pixel coordinates.
    pub annotation: RecistAnnotation,
}

impl Roi {
    pub fn width(&self) -> usize {
        self.volume.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.volume.dims()[1]
    }

    /// Paste a 2D ROI raster into a full-size slice of `mask`.
    pub fn paste(&self, mask: &mut Mask, z: usize, roi_slice: &Grid<u8>) -> Result<()> {
        let [nx, ny, _] = mask.dims();
        let mut full = mask.slice(z);
        for y in 0..roi_slice.height() {
            for x in 0..roi_slice.width() {
                let (gx, gy) = (x + self.origin[0], y + self.origin[1]);
                if gx < nx && gy < ny {
                    full.set(gx, gy, *roi_slice.get(x, y));
                }
            }
        }
        mask.set_slice(z, &full)
    }

    /// Cut the ROI footprint out of a full-size slice.
    pub fn crop_slice<T: Clone>(&self, full: &Grid<T>) -> Grid<T> {
        Grid::from_fn(self.width(), self.height(), |x, y| {
            full.get(x + self.origin[0], y + self.origin[1]).clone()
        })
    }
}

/// In-plane window `[start, end)` of length `side` centered at `center`,
/// clamped to `[0, n)`.
fn centered_span(center: f64, side: usize, n: usize) -> (usize, usize) {
    let start = (center - side as f64 / 2.0).round() as i64;
    let end = (start + side as i64).clamp(1, n as i64) as usize;
    let start = start.clamp(0, end as i64 - 1) as usize;
    (start, end)
}

/// Square axial ROI of side twice the long-axis length, centered at the axis
/// intersection, with intensities windowed to `[0, 1]`.
pub fn crop_and_window(volume: &Volume, annotation: &RecistAnnotation) -> Result<Roi> {
    let [lo, hi] = annotation.window;
    if !(lo < hi) {
        return Err(Error::DegenerateWindow { lo, hi });
    }
    let long = annotation.long_length_px();
    if !(long > 1e-9) {
        return Err(Error::DegenerateAxis("zero-length long axis".into()));
    }
    annotation.validate(volume.dims(), volume.spacing_mm())?;
    let side = ((2.0 * long).round() as usize).max(1);
    let c = annotation.intersection();
    crop_square(volume, annotation, c, side)
}

/// Square ROI of the given side centered at `center`; shared by the fixed-ROI
/// and per-slice-ROI paths.
pub(crate) fn crop_square(
    volume: &Volume,
    annotation: &RecistAnnotation,
    center: [f64; 2],
    side: usize,
) -> Result<Roi> {
    let [lo, hi] = annotation.window;
    if !(lo < hi) {
        return Err(Error::DegenerateWindow { lo, hi });
    }
    let [nx, ny, nz] = volume.dims();
    let (x0, x1) = centered_span(center[0], side, nx);
    let (y0, y1) = centered_span(center[1], side, ny);
    let (w, h) = (x1 - x0, y1 - y0);
    let mut data = Vec::with_capacity(w * h * nz);
    for z in 0..nz {
        for y in y0..y1 {
            for x in x0..x1 {
                data.push(window_value(volume.value(x, y, z), lo, hi) as f32);
            }
        }
    }
    let roi = Volume::new([w, h, nz], volume.spacing_mm(), VoxelData::Float32(data))?;
    Ok(Roi {
        volume: roi,
        origin: [x0, y0],
        annotation: annotation.translated(x0 as f64, y0 as f64),
    })
}

/// Foreground pixels with a 4-neighbor outside the mask (or the grid edge).
pub(crate) fn boundary_pixels(slice: &Grid<u8>) -> Vec<(usize, usize)> {
    let (w, h) = slice.dims();
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *slice.get(x as usize, y as usize) != 0
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if *slice.get(x, y) == 0 {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            if !inside(xi - 1, yi) || !inside(xi + 1, yi) || !inside(xi, yi - 1) || !inside(xi, yi + 1) {
                out.push((x, y));
            }
        }
    }
    out
}

fn chord_inside(slice: &Grid<u8>, a: (usize, usize), b: (usize, usize)) -> bool {
    let (ax, ay) = (a.0 as f64, a.1 as f64);
    let (bx, by) = (b.0 as f64, b.1 as f64);
    let len = (bx - ax).hypot(by - ay);
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    (0..=steps).all(|i| {
        let t = i as f64 / steps as f64;
        let x = (ax + t * (bx - ax)).round() as usize;
        let y = (ay + t * (by - ay)).round() as usize;
        *slice.get(x, y) != 0
    })
}

/// Measure RECIST diameters from a segmentation: the axial slice of maximal
/// area (lowest index on ties), its longest boundary-to-boundary chord, and
/// the longest in-mask chord crossing it within 5 degrees of perpendicular.
pub fn mask_to_recist(mask: &Mask) -> Result<RecistAnnotation> {
    let [_, _, nz] = mask.dims();
    let spacing = mask.spacing_mm();
    let mut best: Option<(usize, usize)> = None;
    for z in 0..nz {
        let area = mask.slice(z).count_nonzero();
        if area > 0 && best.is_none_or(|(_, a)| area > a) {
            best = Some((z, area));
        }
    }
    let (z, area) = best.ok_or_else(|| Error::EmptyMask("no foreground voxels".into()))?;
    if area < 2 {
        return Err(Error::EmptyMask("single-pixel cross-section".into()));
    }
    let slice = mask.slice(z);
    let boundary = boundary_pixels(&slice);
    let dist_mm = |a: (usize, usize), b: (usize, usize)| {
        let dx = (a.0 as f64 - b.0 as f64) * spacing[0];
        let dy = (a.1 as f64 - b.1 as f64) * spacing[1];
        dx.hypot(dy)
    };

    let mut long = (boundary[0], boundary[0], -1.0);
    for (i, &a) in boundary.iter().enumerate() {
        for &b in &boundary[i + 1..] {
            let d = dist_mm(a, b);
            if d > long.2 {
                long = (a, b, d);
            }
        }
    }
    let to_pt = |p: (usize, usize)| [p.0 as f64, p.1 as f64];
    let long_seg = [to_pt(long.0), to_pt(long.1)];
    let long_dir = [
        (long_seg[1][0] - long_seg[0][0]) * spacing[0],
        (long_seg[1][1] - long_seg[0][1]) * spacing[1],
    ];
    let long_norm = long_dir[0].hypot(long_dir[1]);
    let max_cos = SHORT_AXIS_TOLERANCE_DEG.to_radians().sin();

    let mut short: Option<((usize, usize), (usize, usize), f64)> = None;
    for (i, &a) in boundary.iter().enumerate() {
        for &b in &boundary[i + 1..] {
            let d = dist_mm(a, b);
            if d <= short.map_or(0.0, |s| s.2) {
                continue;
            }
            let dir = [
                (b.0 as f64 - a.0 as f64) * spacing[0],
                (b.1 as f64 - a.1 as f64) * spacing[1],
            ];
            let cos = (dir[0] * long_dir[0] + dir[1] * long_dir[1]).abs() / (d * long_norm);
            if cos > max_cos {
                continue;
            }
            if segment_distance(long_seg, [to_pt(a), to_pt(b)]) > INTERSECTION_EPS_PX {
                continue;
            }
            if !chord_inside(&slice, a, b) {
                continue;
            }
            short = Some((a, b, d));
        }
    }
    let short_axis = match short {
        Some((a, b, _)) => [to_pt(a), to_pt(b)],
        None => {
            let mid = [
                (long_seg[0][0] + long_seg[1][0]) / 2.0,
                (long_seg[0][1] + long_seg[1][1]) / 2.0,
            ];
            [mid, mid]
        }
    };
    Ok(RecistAnnotation {
        slice_index: z,
        long_axis: long_seg,
        short_axis,
        window: DEFAULT_WINDOW,
        lesion_id: String::new(),
        patient_id: String::new(),
    })
}

fn scale_about(seg: [[f64; 2]; 2], c: [f64; 2], f: f64) -> [[f64; 2]; 2] {
    seg.map(|p| [c[0] + f * (p[0] - c[0]), c[1] + f * (p[1] - c[1])])
}

/// Perturb both diameters by independent multiplicative factors drawn from
/// `U[1 - max_fraction, 1 + max_fraction]`, scaling each endpoint about the
/// axis intersection so the crossing point stays put.
pub fn inject_recist_noise(
    annotation: &RecistAnnotation,
    max_fraction: f64,
    seed: u64,
) -> Result<RecistAnnotation> {
    if !(0.0..1.0).contains(&max_fraction) {
        return Err(Error::InvalidParameter(format!(
            "max_fraction must be in [0, 1), got {max_fraction}"
        )));
    }
    if max_fraction == 0.0 {
        return Ok(annotation.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_long = rng.random_range(1.0 - max_fraction..=1.0 + max_fraction);
    let f_short = rng.random_range(1.0 - max_fraction..=1.0 + max_fraction);
    let c = annotation.intersection();
    let clamp = |len: f64, f: f64| {
        if len > 0.0 && len * f < 1.0 {
            1.0 / len
        } else {
            f
        }
    };
    let f_long = clamp(annotation.long_length_px(), f_long);
    let f_short = clamp(annotation.short_length_px(), f_short);
    let mut out = RecistAnnotation {
        long_axis: scale_about(annotation.long_axis, c, f_long),
        short_axis: scale_about(annotation.short_axis, c, f_short),
        ..annotation.clone()
    };
    // independent factors can invert the ordering; relabel so long >= short
    let unit = [1.0, 1.0, 1.0];
    if out.short_length_mm(unit) > out.long_length_mm(unit) {
        std::mem::swap(&mut out.long_axis, &mut out.short_axis);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(long: [[f64; 2]; 2], short: [[f64; 2]; 2]) -> RecistAnnotation {
        RecistAnnotation {
            slice_index: 0,
            long_axis: long,
            short_axis: short,
            window: [-100.0, 200.0],
            lesion_id: "l".into(),
            patient_id: "p".into(),
        }
    }

    #[test]
    fn zero_volume_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.vol.json");
        let v = Volume::new([4, 4, 2], [1.0, 1.0, 2.5], VoxelData::Int16(vec![0; 32])).unwrap();
        write_volume(&v, &p).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
        assert!(dir.path().join("z.raw").exists());
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol.json");
        let v = Volume::new([4, 4, 2], [1.0, 1.0, 1.0], VoxelData::Int16(vec![0; 32])).unwrap();
        write_volume(&v, &p).unwrap();
        fs::write(dir.path().join("bad.raw"), vec![0u8; 31 * 2]).unwrap();
        let err = read_volume(&p).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn non_positive_spacing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vol.json");
        fs::write(
            &p,
            r#"{"dims":[1,1,1],"spacing_mm":[1,0,1],"dtype":"int16","order":"zyx"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), [0u8, 0]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::InvalidHeader(_))));
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(Mask::new([2, 1, 1], [1.0; 3], vec![0, 2]).is_err());
    }

    #[test]
    fn annotation_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.recist.json");
        let a = vec![ann([[1.0, 2.0], [9.5, 2.0]], [[5.0, 0.0], [5.0, 4.0]])];
        write_annotations(&a, &p).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), a);
    }

    #[test]
    fn roi_is_twice_long_axis_centered_on_intersection() {
        let v = Volume::new([512, 512, 1], [0.8, 0.8, 5.0], VoxelData::Int16(vec![0; 512 * 512]))
            .unwrap();
        let a = ann([[80.0, 100.0], [120.0, 100.0]], [[100.0, 90.0], [100.0, 110.0]]);
        let roi = crop_and_window(&v, &a).unwrap();
        assert_eq!(roi.origin, [60, 60]);
        assert_eq!((roi.width(), roi.height()), (80, 80));
        assert_eq!(roi.annotation.intersection(), [40.0, 40.0]);
    }

    #[test]
    fn roi_clamps_to_volume_bounds() {
        let v = Volume::new([50, 50, 1], [1.0; 3], VoxelData::Int16(vec![0; 2500])).unwrap();
        let a = ann([[0.0, 10.0], [30.0, 10.0]], [[15.0, 0.0], [15.0, 20.0]]);
        let roi = crop_and_window(&v, &a).unwrap();
        assert_eq!(roi.origin, [0, 0]);
        assert_eq!((roi.width(), roi.height()), (45, 40));
    }

    #[test]
    fn window_endpoints_map_to_unit_interval() {
        assert_eq!(window_value(-100.0, -100.0, 200.0), 0.0);
        assert_eq!(window_value(200.0, -100.0, 200.0), 1.0);
        assert_eq!(window_value(500.0, -100.0, 200.0), 1.0);
        assert_eq!(window_value(-900.0, -100.0, 200.0), 0.0);
    }

    #[test]
    fn degenerate_window_and_axis_rejected() {
        let v = Volume::new([20, 20, 1], [1.0; 3], VoxelData::Int16(vec![0; 400])).unwrap();
        let mut a = ann([[5.0, 10.0], [15.0, 10.0]], [[10.0, 8.0], [10.0, 12.0]]);
        a.window = [50.0, 50.0];
        let err = crop_and_window(&v, &a).unwrap_err();
        assert!(err.to_string().contains("degenerate window"));
        let b = ann([[5.0, 10.0], [5.0, 10.0]], [[5.0, 10.0], [5.0, 10.0]]);
        assert!(matches!(crop_and_window(&v, &b), Err(Error::DegenerateAxis(_))));
    }

    #[test]
    fn intersection_of_crossing_axes() {
        let a = ann([[0.0, 0.0], [10.0, 10.0]], [[0.0, 10.0], [10.0, 0.0]]);
        let c = a.intersection();
        assert!((c[0] - 5.0).abs() < 1e-12 && (c[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_has_no_recist() {
        let m = Mask::empty([8, 8, 2], [1.0; 3]).unwrap();
        assert!(matches!(mask_to_recist(&m), Err(Error::EmptyMask(_))));
        let mut one = vec![0u8; 64];
        one[10] = 1;
        let m = Mask::new([8, 8, 1], [1.0; 3], one).unwrap();
        assert!(mask_to_recist(&m).is_err());
    }

    #[test]
    fn recist_picks_lowest_index_among_equal_areas() {
        let mut data = vec![0u8; 10 * 10 * 3];
        for z in [1usize, 2] {
            for y in 3..6 {
                for x in 2..8 {
                    data[(z * 10 + y) * 10 + x] = 1;
                }
            }
        }
        let m = Mask::new([10, 10, 3], [1.0; 3], data).unwrap();
        let r = mask_to_recist(&m).unwrap();
        assert_eq!(r.slice_index, 1);
        assert!(r.long_length_mm(m.spacing_mm()) >= r.short_length_mm(m.spacing_mm()));
    }

    #[test]
    fn zero_noise_is_identity_and_seeded_noise_repeats() {
        let a = ann([[10.0, 20.0], [30.0, 20.0]], [[20.0, 15.0], [20.0, 25.0]]);
        assert_eq!(inject_recist_noise(&a, 0.0, 7).unwrap(), a);
        assert_eq!(
            inject_recist_noise(&a, 0.2, 7).unwrap(),
            inject_recist_noise(&a, 0.2, 7).unwrap()
        );
        assert!(inject_recist_noise(&a, 1.0, 7).is_err());
    }

    #[test]
    fn noise_scales_endpoints_about_intersection() {
        // independent recomputation: a 10 mm axis scaled by 1.2 is 12 mm and
        // keeps its crossing point
        let a = ann([[0.0, 0.0], [10.0, 0.0]], [[4.0, -2.0], [4.0, 2.0]]);
        let c = a.intersection();
        let scaled = scale_about(a.long_axis, c, 1.2);
        let len = (scaled[1][0] - scaled[0][0]).hypot(scaled[1][1] - scaled[0][1]);
        assert!((len - 12.0).abs() < 1e-12);
        let mut b = a.clone();
        b.long_axis = scaled;
        let c2 = b.intersection();
        assert!((c2[0] - c[0]).abs() < 1e-12 && (c2[1] - c[1]).abs() < 1e-12);
    }
}
