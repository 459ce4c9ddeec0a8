//! Synthetic degradations for enhancement training pairs, and a classical
//! enhancer producing the (original, denoised, enhanced) input stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::volume_io::{Volume, VoxelData};

pub const DENOISE_CROP: usize = 32;
pub const ENHANCE_CROP: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Noise standard deviation on a 0-255 intensity scale.
    pub noise_sigma: f64,
    pub scale: f64,
    pub blur_sigma: f64,
    pub contrast_kappa: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            noise_sigma: 10.0,
            scale: 2.0,
            blur_sigma: 1.0,
            contrast_kappa: 1.5,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{what} out of range: {v}")))
            }
        };
        check(self.noise_sigma > 0.0 && self.noise_sigma <= 50.0, "noise_sigma (0, 50]", self.noise_sigma)?;
        check((1.0..=4.0).contains(&self.scale), "scale [1, 4]", self.scale)?;
        check(self.blur_sigma > 0.0 && self.blur_sigma <= 3.0, "blur_sigma (0, 3]", self.blur_sigma)?;
        check(
            (1.0..=3.0).contains(&self.contrast_kappa),
            "contrast_kappa [1, 3]",
            self.contrast_kappa,
        )
    }
}

fn random_crop(image: &Grid<f64>, side: usize, rng: &mut ChaCha8Rng) -> Result<Grid<f64>> {
    let (w, h) = image.dims();
    if w < side || h < side {
        return Err(Error::InvalidParameter(format!(
            "image {w}x{h} is smaller than the {side}x{side} crop"
        )));
    }
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    Ok(Grid::from_fn(side, side, |x, y| *image.get(x0 + x, y0 + y)))
}

/// `(noisy, clean)` 32x32 crops; noise is white Gaussian with standard
/// deviation `noise_sigma / 255`, clipped to `[0, 1]`.
pub fn make_denoise_pair(image: &Grid<f64>, params: &DegradeParams) -> Result<(Grid<f64>, Grid<f64>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let clean = random_crop(image, DENOISE_CROP, &mut rng)?;
    let noise = Normal::new(0.0, params.noise_sigma / 255.0).expect("positive sigma");
    let noisy = clean.map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    Ok((noisy, clean))
}

/// `(degraded, clean)` 128x128 crops: area downsampling by `scale`, Gaussian
/// blur, contrast compression toward 0.5, bicubic upsampling back.
pub fn make_enhance_pair(image: &Grid<f64>, params: &DegradeParams) -> Result<(Grid<f64>, Grid<f64>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let clean = random_crop(image, ENHANCE_CROP, &mut rng)?;
    Ok((degrade(&clean, params), clean))
}

/// The deterministic part of the enhancement degradation.
pub fn degrade(clean: &Grid<f64>, params: &DegradeParams) -> Grid<f64> {
    let (w, h) = clean.dims();
    let small_w = ((w as f64 / params.scale).round() as usize).max(1);
    let small_h = ((h as f64 / params.scale).round() as usize).max(1);
    let small = downsample_area(clean, small_w, small_h);
    let blurred = gaussian_blur(&small, params.blur_sigma);
    let compressed = compress_contrast(&blurred, params.contrast_kappa);
    upsample_bicubic(&compressed, w, h).map(|v| v.clamp(0.0, 1.0))
}

/// `0.5 + (v - 0.5) / kappa`.
pub fn compress_contrast(image: &Grid<f64>, kappa: f64) -> Grid<f64> {
    image.map(|&v| 0.5 + (v - 0.5) / kappa)
}

/// Overlap weights of each output cell with the input cells along one axis.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * step, (o + 1) as f64 * step);
            let mut row = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n_in {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((i, overlap / step));
                }
                i += 1;
            }
            row
        })
        .collect()
}

/// Box-filter resampling: every output pixel averages the input area it covers.
pub fn downsample_area(image: &Grid<f64>, out_w: usize, out_h: usize) -> Grid<f64> {
    let (w, h) = image.dims();
    let wx = area_weights(w, out_w);
    let wy = area_weights(h, out_h);
    let rows = Grid::from_fn(out_w, h, |x, y| wx[x].iter().map(|&(i, a)| a * image.get(i, y)).sum());
    Grid::from_fn(out_w, out_h, |x, y| wy[y].iter().map(|&(j, a)| a * rows.get(x, j)).sum())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_separable(image: &Grid<f64>, kernel: &[f64]) -> Grid<f64> {
    let (w, h) = image.dims();
    let r = (kernel.len() / 2) as i64;
    let clampx = |x: i64| x.clamp(0, w as i64 - 1) as usize;
    let clampy = |y: i64| y.clamp(0, h as i64 - 1) as usize;
    let rows = Grid::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, c)| c * image.get(clampx(x as i64 + k as i64 - r), y))
            .sum()
    });
    Grid::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, c)| c * rows.get(x, clampy(y as i64 + k as i64 - r)))
            .sum()
    })
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(image: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if !(sigma > 0.0) {
        return image.clone();
    }
    convolve_separable(image, &gaussian_kernel(sigma))
}

/// Keys cubic convolution kernel, a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let mut taps = [(0usize, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let i = base as i64 + k as i64 - 1;
                *tap = (i.clamp(0, n_in as i64 - 1) as usize, cubic(src - i as f64));
            }
            taps
        })
        .collect()
}

/// Bicubic resampling with pixel centers aligned; exact identity at equal size.
pub fn upsample_bicubic(image: &Grid<f64>, out_w: usize, out_h: usize) -> Grid<f64> {
    let (w, h) = image.dims();
    let tx = cubic_taps(w, out_w);
    let ty = cubic_taps(h, out_h);
    let rows = Grid::from_fn(out_w, h, |x, y| tx[x].iter().map(|&(i, c)| c * image.get(i, y)).sum());
    Grid::from_fn(out_w, out_h, |x, y| ty[y].iter().map(|&(j, c)| c * rows.get(x, j)).sum())
}

/// Original, denoised and enhanced versions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceStack {
    pub original: Grid<f64>,
    pub denoised: Grid<f64>,
    pub enhanced: Grid<f64>,
}

impl EnhanceStack {
    pub fn to_image(&self) -> Image {
        Image::from_planes(&[&self.original, &self.denoised, &self.enhanced])
            .expect("stack channels share dims")
    }
}

pub const BILATERAL_SPATIAL_SIGMA: f64 = 1.5;
pub const BILATERAL_RANGE_SIGMA: f64 = 0.05;
pub const UNSHARP_AMOUNT: f64 = 0.8;
pub const UNSHARP_RADIUS: f64 = 1.5;
pub const STRETCH_PERCENTILES: [f64; 2] = [1.0, 99.0];

pub fn bilateral(image: &Grid<f64>, spatial_sigma: f64, range_sigma: f64) -> Grid<f64> {
    let (w, h) = image.dims();
    let r = (3.0 * spatial_sigma).ceil() as i64;
    let mut spatial = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            spatial.push((dx, dy, (-((dx * dx + dy * dy) as f64) / (2.0 * spatial_sigma * spatial_sigma)).exp()));
        }
    }
    let inv_range = 1.0 / (2.0 * range_sigma * range_sigma);
    Grid::from_fn(w, h, |x, y| {
        let c = *image.get(x, y);
        let mut num = 0.0;
        let mut den = 0.0;
        for &(dx, dy, ws) in &spatial {
            let qx = x as i64 + dx;
            let qy = y as i64 + dy;
            if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                continue;
            }
            let v = *image.get(qx as usize, qy as usize);
            let wgt = ws * (-(v - c) * (v - c) * inv_range).exp();
            num += wgt * v;
            den += wgt;
        }
        num / den
    })
}

/// Nearest-rank percentile of the values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Bilateral smoothing, then unsharp masking and a [1, 99] percentile stretch.
pub fn classical_enhance(image: &Grid<f64>) -> EnhanceStack {
    let original = image.map(|v| v.clamp(0.0, 1.0));
    let denoised = bilateral(&original, BILATERAL_SPATIAL_SIGMA, BILATERAL_RANGE_SIGMA);
    let blurred = gaussian_blur(&denoised, UNSHARP_RADIUS);
    let mut sharp = denoised.clone();
    for (s, b) in sharp.as_mut_slice().iter_mut().zip(blurred.as_slice()) {
        *s += UNSHARP_AMOUNT * (*s - b);
    }
    let mut sorted = sharp.as_slice().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, STRETCH_PERCENTILES[0]);
    let hi = percentile(&sorted, STRETCH_PERCENTILES[1]);
    let enhanced = if hi - lo > 1e-9 {
        sharp.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        sharp.map(|v| v.clamp(0.0, 1.0))
    };
    EnhanceStack {
        original,
        denoised: denoised.map(|v| v.clamp(0.0, 1.0)),
        enhanced,
    }
}

/// Enhance every slice of a windowed volume. The result stacks the three
/// channels of slice `z` at `3z`, `3z + 1`, `3z + 2`.
pub fn enhance_volume(windowed: &Volume) -> Result<Volume> {
    let [_, _, nz] = windowed.dims();
    let mut planes = Vec::with_capacity(3 * nz);
    for z in 0..nz {
        let s = classical_enhance(&windowed.slice(z));
        planes.push(s.original);
        planes.push(s.denoised);
        planes.push(s.enhanced);
    }
    Volume::from_slices(&planes, windowed.spacing_mm())
}

/// Map raw HU values of a whole volume into `[0, 1]` through a window.
pub fn window_volume(volume: &Volume, window: [f64; 2]) -> Result<Volume> {
    let [lo, hi] = window;
    if !(lo < hi) {
        return Err(Error::DegenerateWindow { lo, hi });
    }
    let [nx, ny, nz] = volume.dims();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.push(crate::volume_io::window_value(volume.value(x, y, z), lo, hi) as f32);
            }
        }
    }
    Volume::new(volume.dims(), volume.spacing_mm(), VoxelData::Float32(data))
}
