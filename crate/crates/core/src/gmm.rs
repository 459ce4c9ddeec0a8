//! Gaussian mixture models over low-dimensional pixel features, fit by EM.
//!
//! Covariances are full `C x C` matrices (C <= 3) whose eigenvalues are
//! clamped to [`COV_FLOOR`]. Clamping the eigenvalues of the weighted sample
//! covariance is the exact constrained maximizer of the M-step objective, so
//! EM keeps its monotone log-likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Eigenvalue floor of every component covariance.
pub const COV_FLOOR: f64 = 1e-6;

/// Relative log-likelihood change below which EM stops.
pub const REL_TOL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and column-major eigenvectors.
fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    precision: Vec<f64>,
    /// `-0.5 * (C ln 2pi + ln det cov)`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: Vec<f64>, raw_cov: &[f64]) -> Self {
        let n = mean.len();
        let mut sym = raw_cov.to_vec();
        for i in 0..n {
            for j in i + 1..n {
                let avg = 0.5 * (sym[i * n + j] + sym[j * n + i]);
                sym[i * n + j] = avg;
                sym[j * n + i] = avg;
            }
        }
        let (vals, vecs) = symmetric_eigen(&sym, n);
        let vals: Vec<f64> = vals
            .iter()
            .map(|&l| if l.is_finite() { l.max(COV_FLOOR) } else { COV_FLOOR })
            .collect();
        let mut cov = vec![0.0; n * n];
        let mut precision = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (mut c, mut p) = (0.0, 0.0);
                for (k, &l) in vals.iter().enumerate() {
                    let prod = vecs[i * n + k] * vecs[j * n + k];
                    c += prod * l;
                    p += prod / l;
                }
                cov[i * n + j] = c;
                precision[i * n + j] = p;
            }
        }
        let log_det: f64 = vals.iter().map(|l| l.ln()).sum();
        Component {
            weight,
            mean,
            cov,
            precision,
            log_norm: -0.5 * (n as f64 * LN_2PI + log_det),
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major covariance matrix.
    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    #[inline]
    fn log_gauss(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        let mut d = [0.0f64; 3];
        for i in 0..n {
            d[i] = x[i] - self.mean[i];
        }
        let mut maha = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.precision[i * n + j] * d[j];
            }
            maha += d[i] * row;
        }
        self.log_norm - 0.5 * maha
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

/// Log-likelihood trace of an EM run; entry `i` is evaluated at the
/// parameters after `i` EM updates.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: GaussianMixture,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

fn check_dim(samples: &[f64], dim: usize) -> Result<usize> {
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidParameter(format!(
            "feature dimension must be 1..=3, got {dim}"
        )));
    }
    if samples.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not split into {dim}-dimensional samples",
            samples.len()
        )));
    }
    Ok(samples.len() / dim)
}

#[inline]
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Fit a `k`-component mixture by EM from a k-means++ start.
pub fn fit(samples: &[f64], dim: usize, k: usize, max_iter: usize, seed: u64) -> Result<GaussianMixture> {
    Ok(fit_traced(samples, dim, k, max_iter, seed)?.model)
}

pub fn fit_traced(
    samples: &[f64],
    dim: usize,
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<FitReport> {
    let n = check_dim(samples, dim)?;
    if n == 0 {
        return Err(Error::InvalidParameter("cannot fit a mixture to zero samples".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("component count must be >= 1".into()));
    }
    let k = if n < k {
        log::warn!("only {n} samples for {k} components; reducing k to {n}");
        n
    } else {
        k
    };
    let init = kmeans_pp_init(samples, dim, k, seed);
    Ok(init.refine(samples, max_iter))
}

fn kmeans_pp_init(samples: &[f64], dim: usize, k: usize, seed: u64) -> GaussianMixture {
    let n = samples.len() / dim;
    let x = |i: usize| &samples[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(x(i), x(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every sample coincides with a chosen center
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(x(i), x(next)));
        }
    }

    // hard assignment to the nearest center (lowest index on ties)
    let mut resp = vec![0.0; n * k];
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &ci) in centers.iter().enumerate() {
            let d = dist2(x(i), x(ci));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        resp[i * k + best] = 1.0;
    }
    let placeholder = GaussianMixture {
        dim,
        components: centers
            .iter()
            .map(|&c| Component::new(1.0 / k as f64, x(c).to_vec(), &identity(dim)))
            .collect(),
    };
    placeholder.m_step(samples, &resp)
}

fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

impl GaussianMixture {
    /// Build a mixture from explicit parameters. Weights are renormalized;
    /// covariances are symmetrized and eigenvalue-clamped.
    pub fn from_parts(weights: &[f64], means: &[Vec<f64>], covariances: &[Vec<f64>]) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidParameter("inconsistent component counts".into()));
        }
        let dim = means[0].len();
        if !(1..=3).contains(&dim)
            || means.iter().any(|m| m.len() != dim)
            || covariances.iter().any(|c| c.len() != dim * dim)
        {
            return Err(Error::ShapeMismatch("component shapes disagree".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be non-negative with positive sum".into()));
        }
        Ok(GaussianMixture {
            dim,
            components: (0..k)
                .map(|i| Component::new(weights[i] / total, means[i].clone(), &covariances[i]))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    #[inline]
    fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = if c.weight > 0.0 {
                c.weight.ln() + c.log_gauss(x)
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    /// `-ln sum_k w_k N(x; mu_k, Sigma_k)`.
    pub fn neg_log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components.len()];
        self.log_joint(x, &mut buf);
        -log_sum_exp(&buf)
    }

    /// Total log-likelihood of a flat sample buffer.
    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components.len()];
        samples
            .chunks_exact(self.dim)
            .map(|x| {
                self.log_joint(x, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }

    /// Most responsible component per sample; ties go to the lowest index.
    pub fn assign_components(&self, samples: &[f64]) -> Vec<usize> {
        let mut buf = vec![0.0; self.components.len()];
        samples
            .chunks_exact(self.dim)
            .map(|x| {
                self.log_joint(x, &mut buf);
                let mut best = 0;
                for (i, &v) in buf.iter().enumerate() {
                    if v > buf[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    fn m_step(&self, samples: &[f64], resp: &[f64]) -> GaussianMixture {
        let dim = self.dim;
        let k = self.components.len();
        let n = samples.len() / dim;
        let components = (0..k)
            .map(|c| {
                let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
                let prev = &self.components[c];
                if !(nk > 0.0) {
                    return Component {
                        weight: 0.0,
                        ..prev.clone()
                    };
                }
                let mut mean = vec![0.0; dim];
                for i in 0..n {
                    let r = resp[i * k + c];
                    if r == 0.0 {
                        continue;
                    }
                    for d in 0..dim {
                        mean[d] += r * samples[i * dim + d];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nk);
                let mut cov = vec![0.0; dim * dim];
                for i in 0..n {
                    let r = resp[i * k + c];
                    if r == 0.0 {
                        continue;
                    }
                    let x = &samples[i * dim..(i + 1) * dim];
                    for a in 0..dim {
                        for b in 0..dim {
                            cov[a * dim + b] += r * (x[a] - mean[a]) * (x[b] - mean[b]);
                        }
                    }
                }
                cov.iter_mut().for_each(|v| *v /= nk);
                Component::new(nk / n as f64, mean, &cov)
            })
            .collect();
        GaussianMixture { dim, components }
    }

    /// E-step: responsibilities and the log-likelihood at current parameters.
    fn e_step(&self, samples: &[f64], resp: &mut [f64]) -> f64 {
        let k = self.components.len();
        let mut ll = 0.0;
        for (x, r) in samples.chunks_exact(self.dim).zip(resp.chunks_exact_mut(k)) {
            self.log_joint(x, r);
            let lse = log_sum_exp(r);
            ll += lse;
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        ll
    }

    /// Continue EM from the current parameters on (possibly new) samples for
    /// at most `max_iter` updates. The log-likelihood on `samples` never
    /// decreases.
    pub fn refine(&self, samples: &[f64], max_iter: usize) -> FitReport {
        let n = samples.len() / self.dim;
        let k = self.components.len();
        let mut model = self.clone();
        let mut resp = vec![0.0; n * k];
        let mut ll = model.e_step(samples, &mut resp);
        let mut trace = vec![ll];
        let mut converged = false;
        for _ in 0..max_iter {
            let next = model.m_step(samples, &resp);
            let next_ll = next.e_step(samples, &mut resp);
            trace.push(next_ll);
            model = next;
            let change = (next_ll - ll).abs();
            ll = next_ll;
            if change <= REL_TOL * ll.abs().max(1e-300) {
                converged = true;
                break;
            }
        }
        FitReport {
            model,
            log_likelihood: trace,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_gaussian_is_biased_mle() {
        let g = fit(&[0.0, 2.0], 1, 1, 10, 0).unwrap();
        let c = &g.components()[0];
        assert!((c.mean()[0] - 1.0).abs() < 1e-12);
        assert!((c.covariance()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        for i in 0..400 {
            let centre = if i % 2 == 0 { 0.0 } else { 100.0 };
            data.push(centre + noise.sample(&mut rng));
        }
        let (a, b): (Vec<f64>, Vec<f64>) = data.iter().partition(|&&v| v < 50.0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let g = fit(&data, 1, 2, 100, 11).unwrap();
        let mut means: Vec<f64> = g.components().iter().map(|c| c.mean()[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] - mean(&a)).abs() < 0.5);
        assert!((means[1] - mean(&b)).abs() < 0.5);
    }

    #[test]
    fn identical_samples_clamp_covariance() {
        let data = vec![0.3; 3 * 50];
        let g = fit(&data, 3, 4, 20, 1).unwrap();
        for c in g.components() {
            assert!(c.covariance().iter().all(|v| v.is_finite()));
        }
        let nll = g.neg_log_density(&[0.3, 0.3, 0.3]);
        assert!(nll.is_finite());
        let w: f64 = g.weights().iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_reduces_k() {
        let g = fit(&[1.0, 2.0], 1, 5, 10, 0).unwrap();
        assert_eq!(g.k(), 2);
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let g = GaussianMixture::from_parts(&[1.0], &[vec![0.0]], &[vec![1.0]]).unwrap();
        assert!((g.neg_log_density(&[0.0]) - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn density_at_mean_is_normalizer() {
        let cov = vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.5];
        let g = GaussianMixture::from_parts(&[1.0], &[vec![1.0, 2.0, 3.0]], &[cov]).unwrap();
        // det = 0.5 * (2*1 - 0.25)
        let det: f64 = 0.5 * 1.75;
        let expected = 0.5 * ((2.0 * std::f64::consts::PI).powi(3) * det).ln();
        assert!((g.neg_log_density(&[1.0, 2.0, 3.0]) - expected).abs() < 1e-10);
    }

    #[test]
    fn far_points_are_finite_and_monotone() {
        let g = GaussianMixture::from_parts(
            &[0.5, 0.5],
            &[vec![0.0], vec![1.0]],
            &[vec![0.01], vec![0.02]],
        )
        .unwrap();
        let a = g.neg_log_density(&[50.0]);
        let b = g.neg_log_density(&[500.0]);
        assert!(a.is_finite() && b.is_finite());
        assert!(b > a);
    }

    #[test]
    fn assignment_ties_and_posteriors() {
        let g = GaussianMixture::from_parts(
            &[0.5, 0.5],
            &[vec![-1.0], vec![1.0]],
            &[vec![1.0], vec![1.0]],
        )
        .unwrap();
        assert_eq!(g.assign_components(&[0.0]), vec![0]);
        assert_eq!(g.assign_components(&[1.0]), vec![1]);
        assert!(g.assign_components(&[]).is_empty());
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let data: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let a = fit(&data, 3, 3, 50, 42).unwrap();
        let b = fit(&data, 3, 3, 50, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for k in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i * 3 + j] * vecs[j * 3 + k]).sum();
                assert!((av - vals[k] * vecs[i * 3 + k]).abs() < 1e-10);
            }
        }
    }
}
