//! Initialization strategies for Newton-EM.
//!
//! The regular strategy draws K random lines through data-point pairs, runs a
//! K-means clustering with distances along the Y axis, builds mixture
//! parameters from the per-cluster regression fits (gates start at zero) and
//! races a few Newton-EM steps, keeping the best of `n_trials` raced
//! likelihoods. The naive strategy skips the clustering and the tournament;
//! the clever one pre-clusters standardized (x, y) pairs with an overfactored
//! K-means and draws the initial lines among the surviving cluster
//! regressions.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Mixture};
use crate::newton_em::{fit, variance_floor, FitConfig, VarianceFloorMode};
use crate::polybasis::PolyFn;
use crate::selection::ModelSpec;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Regular,
    Naive,
    Clever,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub strategy: InitStrategy,
    pub n_trials: usize,
    /// Newton-EM steps raced per trial.
    pub race_steps: usize,
    /// Steps suggested for the final fixed-step fit after initialization.
    pub final_steps: usize,
    /// Cluster overfactor of the clever strategy.
    pub kmeans_overfactor: usize,
    pub seed: u64,
    #[serde(default)]
    pub variance_floor: VarianceFloorMode,
    #[serde(default = "default_newton_steps")]
    pub newton_steps: usize,
}

fn default_newton_steps() -> usize {
    5
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            strategy: InitStrategy::Regular,
            n_trials: 50,
            race_steps: 3,
            final_steps: 10,
            kmeans_overfactor: 5,
            seed: 0,
            variance_floor: VarianceFloorMode::default(),
            newton_steps: default_newton_steps(),
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.race_steps == 0 {
            return Err(Error::InvalidConfig("n_trials and race_steps must be at least 1".into()));
        }
        if self.kmeans_overfactor == 0 {
            return Err(Error::InvalidConfig("kmeans_overfactor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Affine function `x ↦ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

impl Line {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    fn through(p0: (f64, f64), p1: (f64, f64)) -> Option<Line> {
        let dx = p1.0 - p0.0;
        if dx == 0.0 {
            return None;
        }
        let slope = (p1.1 - p0.1) / dx;
        Some(Line { intercept: p0.1 - slope * p0.0, slope })
    }
}

/// Draws K lines, each through two distinct observations (pairs may repeat
/// across lines; vertical pairs are redrawn up to 100 times).
pub fn random_lines(data: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Line>> {
    if data.covariate_dim() != 1 || data.response_dim() != 1 {
        return Err(Error::UnsupportedDimension {
            what: "line-based initialization",
            d: data.covariate_dim(),
            p: data.response_dim(),
        });
    }
    let n = data.len();
    if n < 2 * k {
        return Err(Error::TooFewPoints { needed: 2 * k, have: n });
    }
    let mut lines = Vec::with_capacity(k);
    for _ in 0..k {
        let mut line = None;
        for _ in 0..100 {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let p0 = (data.x_row(i)[0], data.y_row(i)[0]);
            let p1 = (data.x_row(j)[0], data.y_row(j)[0]);
            if let Some(l) = Line::through(p0, p1) {
                line = Some(l);
                break;
            }
        }
        lines.push(line.ok_or(Error::TooFewPoints { needed: 2 * k, have: n })?);
    }
    Ok(lines)
}

/// Per-cluster output of the Y-distance K-means.
#[derive(Debug, Clone)]
pub struct YKmeans {
    pub assignment: Vec<usize>,
    pub lines: Vec<Line>,
    /// Empirical residual variance per cluster, floored.
    pub variances: Vec<f64>,
}

fn ols_line(points: &[(f64, f64)]) -> Option<Line> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 * (n * sxx).max(1.0) {
        return None;
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    Some(Line { intercept, slope })
}

/// Lloyd iterations with the distance `|y_i − line_k(x_i)|`; after each
/// assignment every line is refit by least squares on its cluster. Stops at
/// an assignment fixed point or `max_iters`. Empty clusters are re-seeded
/// through two random points of the largest cluster.
pub fn y_axis_kmeans(
    data: &Dataset,
    lines: &[Line],
    max_iters: usize,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<YKmeans> {
    if data.covariate_dim() != 1 || data.response_dim() != 1 {
        return Err(Error::UnsupportedDimension {
            what: "y-axis k-means",
            d: data.covariate_dim(),
            p: data.response_dim(),
        });
    }
    let n = data.len();
    let k = lines.len();
    let mut lines = lines.to_vec();
    let mut assignment = vec![0usize; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (x, y) = (data.x_row(i)[0], data.y_row(i)[0]);
            let mut best = (f64::INFINITY, 0usize);
            for (c, line) in lines.iter().enumerate() {
                let dist = (y - line.eval(x)).abs();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if assignment[i] != best.1 {
                assignment[i] = best.1;
                changed = true;
            }
        }
        // refit each line on its cluster
        let mut clusters: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
        for i in 0..n {
            clusters[assignment[i]].push((data.x_row(i)[0], data.y_row(i)[0]));
        }
        for c in 0..k {
            match ols_line(&clusters[c]) {
                Some(l) => lines[c] = l,
                None => {
                    // empty (or collinear-in-x) cluster: re-seed through two
                    // random points of the largest cluster
                    let largest = (0..k).max_by_key(|&j| clusters[j].len()).unwrap();
                    let pts = &clusters[largest];
                    if pts.len() < 2 {
                        return Err(Error::TooFewPoints { needed: 2, have: pts.len() });
                    }
                    for _ in 0..100 {
                        let a = rng.random_range(0..pts.len());
                        let mut b = rng.random_range(0..pts.len() - 1);
                        if b >= a {
                            b += 1;
                        }
                        if let Some(l) = Line::through(pts[a], pts[b]) {
                            lines[c] = l;
                            break;
                        }
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut variances = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let (x, y) = (data.x_row(i)[0], data.y_row(i)[0]);
        let r = y - lines[assignment[i]].eval(x);
        variances[assignment[i]] += r * r;
        counts[assignment[i]] += 1;
    }
    for c in 0..k {
        variances[c] = if counts[c] > 0 {
            (variances[c] / counts[c] as f64).max(floor)
        } else {
            floor
        };
    }
    Ok(YKmeans { assignment, lines, variances })
}

/// Embeds an affine fit into a mean polynomial of the spec's degree: the
/// intercept/slope occupy the first coefficients, higher degrees start at
/// zero; a degree-0 model takes the line's value at the mean covariate.
fn line_to_mean_poly(line: &Line, spec: &ModelSpec, x_bar: f64) -> PolyFn {
    let mut poly = PolyFn::zero(spec.d, spec.d_upsilon);
    if spec.d_upsilon == 0 {
        poly.coeffs[0] = line.eval(x_bar);
    } else {
        poly.coeffs[0] = line.intercept;
        poly.coeffs[1] = line.slope;
    }
    poly
}

fn params_from_lines(lines: &[Line], variances: &[f64], spec: &ModelSpec, x_bar: f64) -> Result<Mixture> {
    let weights = vec![PolyFn::zero(spec.d, spec.d_w); spec.k];
    let means = lines
        .iter()
        .map(|l| vec![line_to_mean_poly(l, spec, x_bar)])
        .collect();
    let covs = variances
        .iter()
        .map(|&v| DMatrix::from_element(1, 1, v))
        .collect();
    Mixture::new(weights, means, covs)
}

/// Plain Lloyd K-means on 2-D points, used by the clever strategy's
/// overfactored pre-clustering.
fn lloyd_2d(points: &[(f64, f64)], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    let mut centers: Vec<(f64, f64)> = rand::seq::index::sample(rng, n, k)
        .iter()
        .map(|i| points[i])
        .collect();
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, &(x, y)) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, &(cx, cy)) in centers.iter().enumerate() {
                let d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assignment[i] != best.1 {
                assignment[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (i, &(x, y)) in points.iter().enumerate() {
            let s = &mut sums[assignment[i]];
            s.0 += x;
            s.1 += y;
            s.2 += 1;
        }
        for c in 0..k {
            if sums[c].2 > 0 {
                centers[c] = (sums[c].0 / sums[c].2 as f64, sums[c].1 / sums[c].2 as f64);
            }
        }
        if !changed {
            break;
        }
    }
    assignment
}

/// Regression-line pool of the clever strategy: standardize, overcluster,
/// keep clusters with more than two points.
fn clever_line_pool(data: &Dataset, k: usize, overfactor: usize, rng: &mut ChaCha8Rng) -> Vec<Line> {
    let n = data.len();
    let xs: Vec<f64> = data.x_rows().map(|x| x[0]).collect();
    let ys: Vec<f64> = data.y_rows().map(|y| y[0]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let stdev = |v: &[f64], m: f64| {
        (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64)
            .sqrt()
            .max(1e-12)
    };
    let (mx, my) = (mean(&xs), mean(&ys));
    let (sx, sy) = (stdev(&xs, mx), stdev(&ys, my));
    let scaled: Vec<(f64, f64)> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| ((x - mx) / sx, (y - my) / sy))
        .collect();
    let assignment = lloyd_2d(&scaled, k * overfactor, 50, rng);
    let mut clusters: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k * overfactor];
    for i in 0..n {
        clusters[assignment[i]].push((xs[i], ys[i]));
    }
    clusters
        .iter()
        .filter(|c| c.len() > 2)
        .filter_map(|c| ols_line(c))
        .collect()
}

/// Builds initial mixture parameters for one model spec.
///
/// Deterministic given `(seed, data, spec, cfg)`; never inspects the penalty
/// or the generating density.
pub fn initialize(data: &Dataset, spec: &ModelSpec, cfg: &InitConfig) -> Result<Mixture> {
    cfg.validate()?;
    spec.validate()?;
    let floor = variance_floor(&cfg.variance_floor, data, spec.k)?;
    let race_cfg = FitConfig {
        newton_steps: cfg.newton_steps,
        variance_floor: cfg.variance_floor,
        ..FitConfig::default()
    }
    .fixed_steps(cfg.race_steps);
    let x_bar = data.x_rows().map(|x| x[0]).sum::<f64>() / data.len() as f64;

    let n_trials = match cfg.strategy {
        InitStrategy::Naive => 1,
        _ => cfg.n_trials,
    };
    let line_pool = match cfg.strategy {
        InitStrategy::Clever => {
            let mut rng = rng_for(cfg.seed, u64::MAX);
            Some(clever_line_pool(data, spec.k, cfg.kmeans_overfactor, &mut rng))
        }
        _ => None,
    };

    let mut best: Option<(f64, Mixture)> = None;
    let mut consecutive_failures = 0usize;
    for trial in 0..n_trials {
        let mut rng = rng_for(cfg.seed, trial as u64);
        let attempt = init_trial(data, spec, cfg, &race_cfg, floor, x_bar, line_pool.as_deref(), &mut rng);
        match attempt {
            Ok((raced_ll, params)) => {
                consecutive_failures = 0;
                // ties broken toward the lowest trial index
                if best.as_ref().map_or(true, |(ll, _)| raced_ll > *ll) {
                    best = Some((raced_ll, params));
                }
            }
            Err(Error::DegenerateComponent { .. } | Error::TooFewPoints { .. }) => {
                consecutive_failures += 1;
                if consecutive_failures >= 10 {
                    return Err(Error::InitFailure(consecutive_failures));
                }
            }
            Err(other) => return Err(other),
        }
    }
    best.map(|(_, p)| p).ok_or(Error::InitFailure(n_trials))
}

#[allow(clippy::too_many_arguments)]
fn init_trial(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &InitConfig,
    race_cfg: &FitConfig,
    floor: f64,
    x_bar: f64,
    line_pool: Option<&[Line]>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Mixture)> {
    let start = match cfg.strategy {
        InitStrategy::Regular => {
            let lines = random_lines(data, spec.k, rng)?;
            let km = y_axis_kmeans(data, &lines, 20, floor, rng)?;
            params_from_lines(&km.lines, &km.variances, spec, x_bar)?
        }
        InitStrategy::Naive => {
            // random lines and a pooled common variance used directly
            let lines = random_lines(data, spec.k, rng)?;
            let mut pooled = 0.0;
            for i in 0..data.len() {
                let (x, y) = (data.x_row(i)[0], data.y_row(i)[0]);
                let r = lines
                    .iter()
                    .map(|l| (y - l.eval(x)).abs())
                    .fold(f64::INFINITY, f64::min);
                pooled += r * r;
            }
            pooled = (pooled / data.len() as f64).max(floor);
            let variances = vec![pooled; spec.k];
            params_from_lines(&lines, &variances, spec, x_bar)?
        }
        InitStrategy::Clever => {
            let pool = line_pool.expect("clever pool built above");
            let lines: Vec<Line> = if pool.len() >= spec.k {
                rand::seq::index::sample(rng, pool.len(), spec.k)
                    .iter()
                    .map(|i| pool[i])
                    .collect()
            } else if pool.is_empty() {
                random_lines(data, spec.k, rng)?
            } else {
                (0..spec.k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
            };
            let km = y_axis_kmeans(data, &lines, 20, floor, rng)?;
            params_from_lines(&km.lines, &km.variances, spec, x_bar)?
        }
    };
    let raced = fit(data, spec, &start, race_cfg)?;
    Ok((raced.final_loglik(), raced.params))
}
