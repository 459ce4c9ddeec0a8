//! Pixel-wise foreground probability model `f(X; theta)`.
//!
//! Logistic regression over local intensity statistics, trained on the
//! per-image-normalized cross-entropy
//! `L = 1/N sum_i 1/|Y_i| sum_m H(y_hat, y)` with ignored pixels left out.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::trimap::IGNORE;
use crate::volume_io::write_json;

pub const PROB_CLIP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub radii: Vec<usize>,
    pub include_raw: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            radii: vec![1, 2, 4],
            include_raw: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.first().is_some_and(|&r| r == 0) || self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "radii must be >= 1 and strictly increasing, got {:?}",
                self.radii
            )));
        }
        if self.radii.is_empty() && !self.include_raw {
            return Err(Error::InvalidParameter("feature set is empty".into()));
        }
        Ok(())
    }

    pub fn dim(&self, channels: usize) -> usize {
        channels * (self.include_raw as usize + 2 * self.radii.len())
    }
}

/// Row-major per-pixel feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per channel: raw value, then box mean and standard deviation for each
/// radius with edge-replicated borders.
pub fn extract_features(image: &Image, config: &FeatureConfig) -> Result<Features> {
    config.validate()?;
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let dim = config.dim(c);
    let mut data = vec![0.0; w * h * dim];
    let mut col = 0;
    for ch in 0..c {
        let plane = image.plane(ch);
        let v = plane.as_slice();
        if config.include_raw {
            for (i, &x) in v.iter().enumerate() {
                data[i * dim + col] = x;
            }
            col += 1;
        }
        for &r in &config.radii {
            let r = r as i64;
            let count = ((2 * r + 1) * (2 * r + 1)) as f64;
            let at = |x: i64, y: i64| {
                let cx = x.clamp(0, w as i64 - 1) as usize;
                let cy = y.clamp(0, h as i64 - 1) as usize;
                v[cy * w + cx]
            };
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut sum = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            sum += at(x + dx, y + dy);
                        }
                    }
                    let mean = sum / count;
                    let mut ss = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let d = at(x + dx, y + dy) - mean;
                            ss += d * d;
                        }
                    }
                    let i = y as usize * w + x as usize;
                    data[i * dim + col] = mean;
                    data[i * dim + col + 1] = (ss / count).sqrt();
                }
            }
            col += 2;
        }
    }
    Ok(Features {
        dim,
        width: w,
        height: h,
        data,
    })
}

/// One training pair: an ROI image and its labels (0, 1, or 255 = ignore).
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Image,
    pub labels: Grid<u8>,
}

impl TrainItem {
    pub fn new(image: Image, labels: Grid<u8>) -> Result<Self> {
        if (image.width(), image.height()) != labels.dims() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs labels {}x{}",
                image.width(),
                image.height(),
                labels.width(),
                labels.height()
            )));
        }
        if let Some(bad) = labels.as_slice().iter().find(|&&v| v > 1 && v != IGNORE) {
            return Err(Error::InvalidParameter(format!("label value {bad} is not 0, 1 or 255")));
        }
        if labels.as_slice().iter().all(|&v| v == IGNORE) {
            return Err(Error::EmptyMask("training item has every pixel ignored".into()));
        }
        Ok(TrainItem { image, labels })
    }

    /// Labels from a binary mask and a separate ignore mask.
    pub fn with_ignore(image: Image, mask: &Grid<u8>, ignore: &Grid<bool>) -> Result<Self> {
        if !mask.same_dims(ignore) {
            return Err(Error::ShapeMismatch("mask and ignore mask differ in size".into()));
        }
        let labels = Grid::from_vec(
            mask.width(),
            mask.height(),
            mask.as_slice()
                .iter()
                .zip(ignore.as_slice())
                .map(|(&m, &ig)| if ig { IGNORE } else { (m != 0) as u8 })
                .collect(),
        )?;
        TrainItem::new(image, labels)
    }
}

pub type TrainSet = Vec<TrainItem>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Lower bound on SGD steps per epoch, so small sets still train.
    pub min_steps_per_epoch: usize,
    /// Draw equal numbers of foreground and background pixels per batch.
    pub balance: bool,
    /// One exact-gradient step per epoch instead of sampled batches.
    pub full_batch: bool,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 30,
            batch: 4096,
            min_steps_per_epoch: 50,
            balance: true,
            full_batch: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    /// Loss on the training set before training and after every epoch.
    pub loss_curve: Vec<f64>,
    pub seed: u64,
    pub warm_started: bool,
    pub initial_params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    pub config: FeatureConfig,
    pub channels: usize,
    /// Standardization applied to raw features before the linear layer.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub metadata: TrainingMetadata,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn cross_entropy(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

impl AppearanceModel {
    /// Zero weights with identity standardization.
    pub fn zeros(config: FeatureConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        let d = config.dim(channels);
        Ok(AppearanceModel {
            config,
            channels,
            feature_mean: vec![0.0; d],
            feature_scale: vec![1.0; d],
            weights: vec![0.0; d],
            bias: 0.0,
            metadata: TrainingMetadata::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `theta = weights ++ [bias]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.dim() + 1,
                theta.len()
            )));
        }
        let d = self.dim();
        self.weights.copy_from_slice(&theta[..d]);
        self.bias = theta[d];
        Ok(())
    }

    fn standardize(&self, f: &Features) -> Vec<f64> {
        let d = self.dim();
        let mut z = f.data.clone();
        for row in z.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.feature_mean[j]) / self.feature_scale[j];
            }
        }
        z
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} channels ({} features), image has {}",
                self.channels,
                self.dim(),
                image.channels()
            )));
        }
        Ok(())
    }

    fn logit(&self, z: &[f64]) -> f64 {
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Foreground probability per pixel, strictly inside `(0, 1)`.
    pub fn predict_map(&self, image: &Image) -> Result<Grid<f64>> {
        self.check_image(image)?;
        let f = extract_features(image, &self.config)?;
        let z = self.standardize(&f);
        let probs = z
            .chunks(self.dim())
            .map(|row| sigmoid(self.logit(row)).clamp(PROB_CLIP, 1.0 - PROB_CLIP))
            .collect();
        Grid::from_vec(image.width(), image.height(), probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: AppearanceModel = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        model.config.validate()?;
        let d = model.config.dim(model.channels);
        if model.weights.len() != d || model.feature_mean.len() != d || model.feature_scale.len() != d {
            return Err(Error::InvalidHeader(format!(
                "model parameters do not match feature dimension {d}"
            )));
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidHeader("non-finite model parameters".into()));
        }
        Ok(model)
    }
}

/// Standardized features and labels of one training item.
struct Prepared {
    z: Vec<f64>,
    labels: Vec<u8>,
    valid: Vec<usize>,
}

fn prepare(model: &AppearanceModel, set: &[TrainItem]) -> Result<Vec<Prepared>> {
    if set.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    set.par_iter()
        .map(|item| {
            model.check_image(&item.image)?;
            let f = extract_features(&item.image, &model.config)?;
            let labels = item.labels.as_slice().to_vec();
            let valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE).collect();
            if valid.is_empty() {
                return Err(Error::EmptyMask("training item has every pixel ignored".into()));
            }
            Ok(Prepared {
                z: model.standardize(&f),
                labels,
                valid,
            })
        })
        .collect()
}

fn loss_prepared(model: &AppearanceModel, items: &[Prepared]) -> f64 {
    let d = model.dim();
    let per_item: Vec<f64> = items
        .par_iter()
        .map(|it| {
            let s: f64 = it
                .valid
                .iter()
                .map(|&m| cross_entropy(sigmoid(model.logit(&it.z[m * d..(m + 1) * d])), it.labels[m]))
                .sum();
            s / it.valid.len() as f64
        })
        .collect();
    per_item.iter().sum::<f64>() / items.len() as f64
}

fn grad_prepared(model: &AppearanceModel, items: &[Prepared]) -> Vec<f64> {
    let d = model.dim();
    let per_item: Vec<Vec<f64>> = items
        .par_iter()
        .map(|it| {
            let mut g = vec![0.0; d + 1];
            for &m in &it.valid {
                let z = &it.z[m * d..(m + 1) * d];
                let p = sigmoid(model.logit(z));
                // the clipped loss is flat where the probability saturates
                if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                    continue;
                }
                let r = p - it.labels[m] as f64;
                for j in 0..d {
                    g[j] += r * z[j];
                }
                g[d] += r;
            }
            let n = it.valid.len() as f64;
            g.iter_mut().for_each(|v| *v /= n);
            g
        })
        .collect();
    let mut g = vec![0.0; d + 1];
    for gi in &per_item {
        for (a, b) in g.iter_mut().zip(gi) {
            *a += b;
        }
    }
    let n = items.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

/// The training objective on `set`.
pub fn loss(model: &AppearanceModel, set: &[TrainItem]) -> Result<f64> {
    Ok(loss_prepared(model, &prepare(model, set)?))
}

/// Exact gradient of [`loss`] with respect to `weights ++ [bias]`.
pub fn grad(model: &AppearanceModel, set: &[TrainItem]) -> Result<Vec<f64>> {
    Ok(grad_prepared(model, &prepare(model, set)?))
}

/// Mean and standard deviation of every feature over the non-ignored pixels.
fn feature_stats(config: &FeatureConfig, set: &[TrainItem]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = set[0].image.channels();
    let d = config.dim(c);
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0.0;
    for item in set {
        if item.image.channels() != c {
            return Err(Error::ShapeMismatch("training images differ in channel count".into()));
        }
        let f = extract_features(&item.image, config)?;
        for (i, &l) in item.labels.as_slice().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            for (j, &v) in f.pixel(i).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / n - m * m).max(0.0).sqrt();
            if sd > 1e-8 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, scale))
}

/// Fit the model on `set`, starting from `init` when given (its feature
/// configuration and standardization are kept) or from zero weights.
pub fn train(
    set: &[TrainItem],
    config: &FeatureConfig,
    params: &TrainParams,
    init: Option<&AppearanceModel>,
) -> Result<AppearanceModel> {
    if set.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if !(params.learning_rate > 0.0) || !(0.0..1.0).contains(&params.momentum) || params.batch == 0 {
        return Err(Error::InvalidParameter(format!(
            "bad optimizer settings: lr {}, momentum {}, batch {}",
            params.learning_rate, params.momentum, params.batch
        )));
    }
    let mut model = match init {
        Some(m) => {
            if &m.config != config || m.channels != set[0].image.channels() {
                return Err(Error::ShapeMismatch(
                    "warm-start model has a different feature layout".into(),
                ));
            }
            m.clone()
        }
        None => {
            let mut m = AppearanceModel::zeros(config.clone(), set[0].image.channels())?;
            let (mean, scale) = feature_stats(config, set)?;
            m.feature_mean = mean;
            m.feature_scale = scale;
            m
        }
    };
    let items = prepare(&model, set)?;
    let d = model.dim();
    let initial = loss_prepared(&model, &items);
    model.metadata = TrainingMetadata {
        epochs: params.epochs,
        loss_curve: vec![initial],
        seed: params.seed,
        warm_started: init.is_some(),
        initial_params: model.params(),
    };
    if params.epochs == 0 {
        return Ok(model);
    }

    // sampling pools: (item, pixel) pairs by class
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (k, it) in items.iter().enumerate() {
        for &m in &it.valid {
            if it.labels[m] == 1 {
                fg.push((k, m));
            } else {
                bg.push((k, m));
            }
        }
    }
    let total = fg.len() + bg.len();
    let steps = total.div_ceil(params.batch).max(params.min_steps_per_epoch).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut theta = model.params();
    let mut velocity = vec![0.0; d + 1];
    let mut g = vec![0.0; d + 1];
    for epoch in 0..params.epochs {
        if params.full_batch {
            g = grad_prepared(&model, &items);
            step(&mut theta, &mut velocity, &g, params);
            model.set_params(&theta)?;
        } else {
            for _ in 0..steps {
                g.iter_mut().for_each(|v| *v = 0.0);
                for b in 0..params.batch {
                    let (k, m) = if params.balance && !fg.is_empty() && !bg.is_empty() {
                        let pool = if b % 2 == 0 { &fg } else { &bg };
                        pool[rng.random_range(0..pool.len())]
                    } else {
                        let k = rng.random_range(0..items.len());
                        let v = &items[k].valid;
                        (k, v[rng.random_range(0..v.len())])
                    };
                    let it = &items[k];
                    let z = &it.z[m * d..(m + 1) * d];
                    let r = sigmoid(model.logit(z)) - it.labels[m] as f64;
                    for j in 0..d {
                        g[j] += r * z[j];
                    }
                    g[d] += r;
                }
                let inv = 1.0 / params.batch as f64;
                g.iter_mut().for_each(|v| *v *= inv);
                step(&mut theta, &mut velocity, &g, params);
                model.set_params(&theta)?;
            }
        }
        let l = loss_prepared(&model, &items);
        if !l.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "loss became {l} at epoch {} (lr {})",
                epoch + 1,
                params.learning_rate
            )));
        }
        model.metadata.loss_curve.push(l);
        log::debug!("epoch {}: loss {l:.6}", epoch + 1);
    }
    Ok(model)
}

fn step(theta: &mut [f64], velocity: &mut [f64], g: &[f64], params: &TrainParams) {
    for ((t, v), gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(g) {
        *v = params.momentum * *v - params.learning_rate * gi;
        *t += *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_gray(&Grid::from_fn(w, h, f))
    }

    /// Bright square on a dark background with mild noise.
    fn square_item(seed: u64) -> TrainItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.03).unwrap();
        let (w, h) = (24, 24);
        let inside = |x: usize, y: usize| (7..17).contains(&x) && (6..16).contains(&y);
        let img = Grid::from_fn(w, h, |x, y| {
            (if inside(x, y) { 0.75f64 } else { 0.3 } + n.sample(&mut rng)).clamp(0.0, 1.0)
        });
        let labels = Grid::from_fn(w, h, |x, y| inside(x, y) as u8);
        TrainItem::new(Image::from_gray(&img), labels).unwrap()
    }

    #[test]
    fn constant_image_features() {
        let f = extract_features(&gray(7, 5, |_, _| 0.4), &FeatureConfig::default()).unwrap();
        assert_eq!(f.dim, 7);
        for row in f.data.chunks(7) {
            assert!((row[0] - 0.4).abs() < 1e-15);
            for k in 0..3 {
                assert!((row[1 + 2 * k] - 0.4).abs() < 1e-12);
                assert!(row[2 + 2 * k].abs() < 1e-12);
            }
        }
        let three = Image::new(3, 3, 3, vec![0.2; 27]).unwrap();
        assert_eq!(extract_features(&three, &FeatureConfig::default()).unwrap().dim, 21);
    }

    #[test]
    fn bright_pixel_window_means() {
        let img = gray(9, 9, |x, y| if (x, y) == (4, 4) { 1.0 } else { 0.0 });
        let cfg = FeatureConfig {
            radii: vec![1],
            include_raw: true,
        };
        let f = extract_features(&img, &cfg).unwrap();
        let mean = |x: usize, y: usize| f.pixel(y * 9 + x)[1];
        assert!((mean(4, 4) - 1.0 / 9.0).abs() < 1e-15);
        assert!((mean(3, 3) - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(mean(2, 4), 0.0);
        // 3x3 window with one 1: std = sqrt(1/9 - 1/81)
        assert!((f.pixel(4 * 9 + 4)[2] - (8.0f64 / 81.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn edge_replication() {
        let img = gray(3, 1, |x, _| x as f64);
        let cfg = FeatureConfig {
            radii: vec![1],
            include_raw: false,
        };
        let f = extract_features(&img, &cfg).unwrap();
        // window at x=0 sees 0,0,1 in each of three replicated rows
        assert!((f.pixel(0)[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = FeatureConfig {
            radii: vec![2, 1],
            include_raw: true,
        };
        assert!(bad.validate().is_err());
        let bad = FeatureConfig {
            radii: vec![0],
            include_raw: true,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_examples() {
        let item = square_item(1);
        let model = AppearanceModel::zeros(FeatureConfig::default(), 1).unwrap();
        let l = loss(&model, std::slice::from_ref(&item)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // a second item with a different loss averages
        let mut strong = model.clone();
        strong.bias = 3.0;
        let la = loss(&strong, std::slice::from_ref(&item)).unwrap();
        let other = square_item(2);
        let lb = loss(&strong, std::slice::from_ref(&other)).unwrap();
        let both = loss(&strong, &[item, other]).unwrap();
        assert!((both - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let img = gray(2, 1, |_, _| 0.5);
        let item = TrainItem::new(img.clone(), Grid::from_vec(2, 1, vec![1, IGNORE]).unwrap()).unwrap();
        let mut model = AppearanceModel::zeros(FeatureConfig::default(), 1).unwrap();
        model.bias = 2.0;
        let l = loss(&model, &[item]).unwrap();
        assert!((l + sigmoid(2.0).ln()).abs() < 1e-12);
        assert!(TrainItem::new(img, Grid::from_vec(2, 1, vec![IGNORE, IGNORE]).unwrap()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = vec![square_item(5), square_item(6)];
        let mut model = train(&set, &FeatureConfig::default(), &TrainParams { epochs: 0, ..Default::default() }, None).unwrap();
        let theta: Vec<f64> = (0..model.dim() + 1).map(|_| rng.random_range(-0.5..0.5)).collect();
        model.set_params(&theta).unwrap();
        let g = grad(&model, &set).unwrap();
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut p = model.clone();
            let mut t = theta.clone();
            t[j] += h;
            p.set_params(&t).unwrap();
            let up = loss(&p, &set).unwrap();
            t[j] -= 2.0 * h;
            p.set_params(&t).unwrap();
            let down = loss(&p, &set).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {j}: analytic {} vs numeric {fd}", g[j]);
        }
        let doubled = vec![set[0].clone(), set[1].clone(), set[0].clone(), set[1].clone()];
        let g2 = grad(&model, &doubled).unwrap();
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_predicts_half() {
        let model = AppearanceModel::zeros(FeatureConfig::default(), 1).unwrap();
        let p = model.predict_map(&gray(4, 4, |x, _| x as f64 / 4.0)).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.5));
        let rgb = Image::new(4, 4, 3, vec![0.1; 48]).unwrap();
        assert!(model.predict_map(&rgb).is_err());
    }

    #[test]
    fn training_separates_square() {
        let set: Vec<_> = (0..3).map(square_item).collect();
        let params = TrainParams::default();
        let model = train(&set, &FeatureConfig::default(), &params, None).unwrap();
        let curve = &model.metadata.loss_curve;
        assert_eq!(curve.len(), params.epochs + 1);
        assert!(*curve.last().unwrap() <= 0.8 * curve[0]);
        let held = square_item(99);
        let p = model.predict_map(&held.image).unwrap();
        let correct = p
            .as_slice()
            .iter()
            .zip(held.labels.as_slice())
            .filter(|(&q, &l)| (q > 0.5) == (l == 1))
            .count();
        assert!(correct as f64 / p.len() as f64 >= 0.95);
        assert!(p.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        let again = train(&set, &FeatureConfig::default(), &params, None).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let set = vec![square_item(1)];
        let params = TrainParams {
            epochs: 0,
            ..Default::default()
        };
        let m = train(&set, &FeatureConfig::default(), &params, None).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0) && m.bias == 0.0);
        let warm = train(&set, &FeatureConfig::default(), &params, Some(&m)).unwrap();
        assert!(warm.metadata.warm_started);
        assert_eq!(warm.metadata.initial_params, m.params());
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let set: Vec<_> = (0..2).map(square_item).collect();
        let params = TrainParams {
            learning_rate: 0.05,
            momentum: 0.0,
            epochs: 40,
            full_batch: true,
            ..Default::default()
        };
        let m = train(&set, &FeatureConfig::default(), &params, None).unwrap();
        for w in m.metadata.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", m.metadata.loss_curve);
        }
    }

    #[test]
    fn json_round_trip() {
        let set = vec![square_item(1)];
        let m = train(&set, &FeatureConfig::default(), &TrainParams { epochs: 2, ..Default::default() }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(AppearanceModel::load(&path).unwrap(), m);
    }
}
