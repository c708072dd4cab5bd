//! Sample-quality and cost metrics for low-dimensional targets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::Trajectory;
use crate::target::GaussianMixture;

/// Additive per-bin smoothing applied to histograms before normalization.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-6;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of `|a_i - b_j|` over all pairs; rows are summed in parallel and
/// combined in a fixed order so the result does not depend on thread count.
fn cross_sum(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = a.par_iter().map(|x| b.iter().map(|y| distance(x, y)).sum()).collect();
    rows.iter().sum()
}

/// Sum of `|a_i - a_j|` over `i < j`.
fn within_sum(a: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| a[i + 1..].iter().map(|y| distance(&a[i], y)).sum())
        .collect();
    rows.iter().sum()
}

fn check_samples(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<()> {
    if x.len() < 2 || y.len() < 2 {
        return Err(invalid("energy distance needs at least two samples per set"));
    }
    let d = x[0].len();
    if let Some(bad) = x.iter().chain(y).find(|v| v.len() != d) {
        return Err(Error::ShapeMismatch { expected: d, actual: bad.len() });
    }
    Ok(())
}

fn canonical<'a>(x: &'a [Vec<f64>], y: &'a [Vec<f64>]) -> (&'a [Vec<f64>], &'a [Vec<f64>]) {
    let key = |s: &[Vec<f64>]| (s.len(), s.iter().flatten().map(|v| v.to_bits()).collect::<Vec<u64>>());
    if key(x) <= key(y) {
        (x, y)
    } else {
        (y, x)
    }
}

/// Unbiased energy distance `2 E|x - y| - E|x - x'| - E|y - y'|`.
///
/// Arguments are put in a canonical order first, so swapping them gives a
/// bit-identical result.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_samples(x, y)?;
    let (x, y) = canonical(x, y);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let cross = cross_sum(x, y) / (n * m);
    let wx = within_sum(x) / (n * (n - 1.0) / 2.0);
    let wy = within_sum(y) / (m * (m - 1.0) / 2.0);
    Ok(2.0 * cross - wx - wy)
}

/// Plug-in (V-statistic) energy distance; exactly zero for identical multisets.
pub fn energy_distance_v(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_samples(x, y)?;
    let (x, y) = canonical(x, y);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let cross = cross_sum(x, y) / (n * m);
    let wx = cross_sum(x, x) / (n * n);
    let wy = cross_sum(y, y) / (m * m);
    Ok((2.0 * cross - wx - wy).max(0.0))
}

/// Regular axis-aligned binning grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl HistogramGrid {
    pub fn uniform(dim: usize, lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo: vec![lo; dim], hi: vec![hi; dim], bins }
    }

    pub fn num_cells(&self) -> usize {
        self.bins.pow(self.lo.len() as u32)
    }

    /// Cell index; points outside the grid fall into the nearest edge cell.
    pub fn cell(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (d, v) in x.iter().enumerate() {
            let u = (v - self.lo[d]) / (self.hi[d] - self.lo[d]);
            let b = ((u * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1);
            idx = idx * self.bins + b;
        }
        idx
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.bins == 0 || self.lo.len() != dim || self.hi.len() != dim {
            return Err(invalid("histogram grid does not match the sample dimension"));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l)) {
            return Err(invalid("histogram grid needs hi > lo in every dimension"));
        }
        Ok(())
    }

    /// Smoothed, normalized histogram of `x`.
    pub fn histogram(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(invalid("cannot histogram an empty sample set"));
        }
        self.validate(x[0].len())?;
        let mut counts = vec![0.0; self.num_cells()];
        for v in x {
            counts[self.cell(v)] += 1.0;
        }
        let n = x.len() as f64;
        let mut h: Vec<f64> = counts.iter().map(|c| c / n + HISTOGRAM_SMOOTHING).collect();
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= total);
        Ok(h)
    }
}

/// `KL(hist(x) || hist(y))` on a shared grid.
pub fn histogram_kl(x: &[Vec<f64>], y: &[Vec<f64>], grid: &HistogramGrid) -> Result<f64> {
    let p = grid.histogram(x)?;
    let q = grid.histogram(y)?;
    Ok(discrete_kl(&p, &q))
}

pub(crate) fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Mean class posterior at `sigma = 0` over the samples.
pub fn class_histogram(target: &GaussianMixture, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(invalid("cannot build a class histogram from zero samples"));
    }
    let mut acc = vec![0.0; target.num_components()];
    for v in x {
        for (a, p) in acc.iter_mut().zip(target.class_posterior(v, 0.0)?) {
            *a += p;
        }
    }
    let n = x.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Total variation `0.5 * |p - q|_1`.
pub fn class_tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch { expected: p.len(), actual: q.len() });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

pub fn mean_nfe(trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(invalid("mean NFE of zero trajectories"));
    }
    Ok(trajectories.iter().map(|t| t.total_nfe as f64).sum::<f64>() / trajectories.len() as f64)
}

pub fn final_samples(trajectories: &[Trajectory]) -> Vec<Vec<f64>> {
    trajectories.iter().map(|t| t.final_state().x.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub histogram_kl: f64,
    pub class_tv: f64,
    pub mean_nfe: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "energy_distance,histogram_kl,class_tv,mean_nfe,n_samples";

    /// Compares the trajectories' final samples against expert samples and target class weights.
    pub fn evaluate(trajectories: &[Trajectory], expert: &[Vec<f64>], target: &GaussianMixture, grid: &HistogramGrid) -> Result<Self> {
        let samples = final_samples(trajectories);
        let classes = class_histogram(target, &samples)?;
        let report = Self {
            energy_distance: energy_distance(&samples, expert)?,
            histogram_kl: histogram_kl(&samples, expert, grid)?,
            class_tv: class_tv(&classes, target.weights())?,
            mean_nfe: mean_nfe(trajectories)?,
            n_samples: samples.len(),
        };
        if ![report.energy_distance, report.histogram_kl, report.class_tv, report.mean_nfe].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("metric report".into()));
        }
        Ok(report)
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.energy_distance, self.histogram_kl, self.class_tv, self.mean_nfe, self.n_samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, n: usize, mean: f64, sd: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                vec![mean + sd * z]
            })
            .collect()
    }

    #[test]
    fn energy_distance_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal(&mut rng, 500, 0.0, 1.0);
        let y = normal(&mut rng, 400, 0.3, 1.0);
        assert_eq!(energy_distance(&x, &y).unwrap(), energy_distance(&y, &x).unwrap());
        assert_eq!(energy_distance_v(&x, &x).unwrap(), 0.0);
        let mut shuffled = x.clone();
        shuffled.reverse();
        let a = energy_distance(&x, &y).unwrap();
        let b = energy_distance(&shuffled, &y).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(energy_distance(&x[..1], &y).is_err());
    }

    #[test]
    fn energy_distance_separates_shifted_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let a = normal(&mut rng, n, 0.0, 1.0);
        let b = normal(&mut rng, n, 0.0, 1.0);
        let c = normal(&mut rng, n, 5.0, 1.0);
        let same = energy_distance(&a, &b).unwrap().abs();
        let far = energy_distance(&a, &c).unwrap();
        assert!(far > 5.0 * same.max(1e-12));
        assert!(far > 5.0);
    }

    fn binned_normal(sd: f64, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
        let pdf = |x: f64| (-0.5 * (x / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let w = (hi - lo) / bins as f64;
        let mut mass: Vec<f64> = (0..bins)
            .map(|b| {
                // Simpson's rule on 64 panels
                let a = lo + b as f64 * w;
                let k = 64;
                let h = w / k as f64;
                let mut s = pdf(a) + pdf(a + w);
                for i in 1..k {
                    s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(a + i as f64 * h);
                }
                s * h / 3.0
            })
            .collect();
        // tails fold into the edge bins like the histogram does
        let inside: f64 = mass.iter().sum();
        let tail = 0.5 * (1.0 - inside);
        mass[0] += tail;
        mass[bins - 1] += tail;
        mass
    }

    #[test]
    fn histogram_kl_matches_binned_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let x = normal(&mut rng, n, 0.0, 1.0);
        let y = normal(&mut rng, n, 0.0, 2f64.sqrt());
        let grid = HistogramGrid::uniform(1, -5.0, 5.0, 50);
        let est = histogram_kl(&x, &y, &grid).unwrap();
        let oracle = discrete_kl(&binned_normal(1.0, -5.0, 5.0, 50), &binned_normal(2f64.sqrt(), -5.0, 5.0, 50));
        let analytic = 0.5 * (2f64.ln() - 1.0 + 0.5);
        assert!((oracle - analytic).abs() < 0.2 * analytic);
        assert!((est - oracle).abs() < 0.2 * oracle, "{est} vs {oracle}");
        assert!(histogram_kl(&x, &x, &grid).unwrap().abs() < 1e-12);
    }

    #[test]
    fn disjoint_histograms_stay_finite() {
        let x = vec![vec![-4.0]; 10];
        let y = vec![vec![4.0]; 10];
        let kl = histogram_kl(&x, &y, &HistogramGrid::uniform(1, -5.0, 5.0, 10)).unwrap();
        assert!(kl.is_finite() && kl > 0.0 && kl < (1.0 / HISTOGRAM_SMOOTHING).ln() + 1.0);
    }

    #[test]
    fn class_histogram_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = GaussianMixture::new(vec![0.7, 0.3], vec![vec![-1.0], vec![1.0]], vec![vec![0.3], vec![0.3]]).unwrap();
        let x: Vec<Vec<f64>> = (0..100_000).map(|_| m.sample_labeled(&mut rng).0).collect();
        let h = class_histogram(&m, &x).unwrap();
        assert!((h[0] - 0.7).abs() < 0.01 && (h[1] - 0.3).abs() < 0.01);
        assert!(class_tv(&h, m.weights()).unwrap() <= 0.02);
        let single = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        assert_eq!(class_histogram(&single, &[vec![rng.random::<f64>()]]).unwrap(), vec![1.0]);
        let sym = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![0.3], vec![0.3]]).unwrap();
        let mid = class_histogram(&sym, &[vec![0.0], vec![0.0]]).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tv_and_nfe() {
        assert!((class_tv(&[0.5, 0.5], &[0.8, 0.2]).unwrap() - 0.3).abs() < 1e-15);
        assert!(mean_nfe(&[]).is_err());
    }
}
