//! Entropy/penalty constants, complexity bounds and a numerical verifier for
//! the Gaussian bracket construction.
//!
//! Everything here evaluates closed-form quantities: the polynomial-family
//! entropy constants, the structure-dependent dimension counts of the
//! covariance decomposition, the root `σ_m` of `φ_m(σ)/σ = √n·σ` together
//! with its `nσ_m²` bound, the theoretical penalty shapes, and a grid check
//! that the two-sided Gaussian bracket actually contains its target density
//! with the advertised Hellinger width.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::log_gaussian;
use crate::polybasis::{binom, PolyFn};
use crate::selection::{model_dim, BoxBounds, ModelSpec, Star};

/// Smallest admissible curvature parameter of the bracket proposition.
pub const KAPPA_MIN: f64 = 17.0 / 29.0;

/// `γ_κ = 25(κ − 1/2) / (49(1 + 2κ/5))`.
pub fn gamma_kappa(kappa: f64) -> f64 {
    25.0 * (kappa - 0.5) / (49.0 * (1.0 + 2.0 * kappa / 5.0))
}

/// Kraft mass of the weight family `x_m = K`: `Σ_{K≥1} e^{-K} = 1/(e−1)`.
pub fn kraft_xi() -> f64 {
    1.0 / (std::f64::consts::E - 1.0)
}

/// Entropy and penalty constants of one model collection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyConstants {
    pub c_w: f64,
    pub c_upsilon: f64,
    /// The structure-dependent sum written `𝒞₁` in the derivation.
    pub c1: f64,
    /// Uniform bracketing-entropy constant `𝔠 = C_W + ln(20√(K_max−1)/(3√3)) + 𝒞₁`.
    pub frak_c: f64,
    /// Penalty constant `C = 2(√𝔠 + √π)²`.
    pub c_penalty: f64,
    pub gamma_kappa: f64,
    pub kappa: f64,
    /// Covering constant of SO(p), unspecified in closed form; configurable.
    pub c_u: f64,
}

/// Evaluates the entropy constants for a polynomial model collection with
/// component counts up to `k_max`.
///
/// `C_W = ln(√2 + T_W·binom(d_W+d, d))`,
/// `C_Υ = ln(√2 + √p·binom(d_Υ+d, d)·T_Υ)`; `𝒞₁` collects the five summand
/// groups of the polynomial-case display.
pub fn entropy_constants(spec: &ModelSpec, k_max: usize, kappa: f64, c_u: f64) -> Result<EntropyConstants> {
    spec.validate()?;
    if k_max < 2 {
        return Err(Error::InvalidConfig("k_max must be at least 2".into()));
    }
    if kappa < KAPPA_MIN {
        return Err(Error::InvalidConfig(format!("kappa must be at least 17/29 ≈ {KAPPA_MIN:.6}")));
    }
    if !(c_u > 0.0) {
        return Err(Error::InvalidConfig("c_u must be positive".into()));
    }
    let b = &spec.box_bounds;
    let p = spec.p as f64;
    let (l_min, l_max) = (b.l_min, b.l_max);
    let (lam_min, lam_max) = (b.lambda_min, b.lambda_max);
    let c_w = (2f64.sqrt() + spec.t_w * binom(spec.d_w + spec.d, spec.d) as f64).ln();
    let c_upsilon =
        (2f64.sqrt() + p.sqrt() * binom(spec.d_upsilon + spec.d, spec.d) as f64 * spec.t_upsilon).ln();
    let gk = gamma_kappa(kappa);
    let cosh_term = kappa * kappa * (2.0 * kappa / 5.0).cosh() + 0.5;
    let c1 = c_upsilon
        + 0.5 * (25.0 * p * lam_max * cosh_term / (gk * l_min * lam_min * lam_min)).ln()
        + (5.0 * p * cosh_term.sqrt()).ln()
        + 2.0 / (p * (p + 1.0))
            * (c_u.ln()
                + ((4.0 + 129.0 * (l_max / l_min).ln()) / 10.0).ln()
                + (p - 1.0) * (0.8 + 52.0 * lam_max / (5.0 * lam_min) * (lam_max / lam_min).ln()).ln())
        + (p - 1.0) / (p + 1.0) * (10.0 * lam_max / lam_min).ln();
    let frak_c = c_w + (20.0 * ((k_max - 1) as f64).sqrt() / (3.0 * 3f64.sqrt())).ln() + c1;
    if !(frak_c > 0.0) {
        return Err(Error::InvalidBox(
            "entropy constant is not positive for these bounds".into(),
        ));
    }
    let c_penalty = 2.0 * (frak_c.sqrt() + std::f64::consts::PI.sqrt()).powi(2);
    Ok(EntropyConstants { c_w, c_upsilon, c1, frak_c, c_penalty, gamma_kappa: gk, kappa, c_u })
}

/// Dimension counts of the covariance structure tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureDims {
    pub z_upsilon: usize,
    pub z_l: usize,
    pub z_d: usize,
    pub z_a: usize,
    /// `𝒟 = Z_υ + Z_L + p(p−1)/2·Z_D + (p−1)·Z_A`.
    pub d_script: usize,
}

/// Dimension counts for a spec's covariance structure and the given freedom
/// of the means (`Z_{·,0} = 0`, `Z_{·,c} = 1`, `Z_{·,K} = K`).
pub fn structure_dims(spec: &ModelSpec, mean_star: Star) -> StructureDims {
    let qu = binom(spec.d_upsilon + spec.d, spec.d);
    let z_upsilon = match mean_star {
        Star::Fixed => 0,
        Star::Common => spec.p * qu,
        Star::Free => spec.p * spec.k * qu,
    };
    let count = |s: Star| match s {
        Star::Fixed => 0,
        Star::Common => 1,
        Star::Free => spec.k,
    };
    let z_l = count(spec.cov_structure.vol);
    let z_d = count(spec.cov_structure.rot);
    let z_a = count(spec.cov_structure.eig);
    let d_script = z_upsilon + z_l + spec.p * (spec.p - 1) / 2 * z_d + (spec.p - 1) * z_a;
    StructureDims { z_upsilon, z_l, z_d, z_a, d_script }
}

/// Root and bound of the complexity fixed point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SigmaMBound {
    pub sigma_m: f64,
    pub n_sigma_sq: f64,
    /// `D_m(2(√C_m+√π)² + (ln(n/((√C_m+√π)²·D_m)))₊)`.
    pub bound: f64,
    /// Bisection residual `|φ_m(σ)/σ − √n·σ|`.
    pub residual: f64,
}

/// Solves `φ_m(σ)/σ = √n·σ` for
/// `φ_m(σ) = σ√D_m(√C_m + √π + √ln(1/(σ∧1)))` by bisection (the left side
/// over σ is non-increasing, so the root is unique) and evaluates the
/// `nσ_m²` bound.
pub fn sigma_m_bound(d_m: usize, c_m: f64, n: usize) -> Result<SigmaMBound> {
    if d_m == 0 || n == 0 || !(c_m > 0.0) {
        return Err(Error::InvalidConfig("need D_m ≥ 1, n ≥ 1 and C_m > 0".into()));
    }
    let (dm, nf) = (d_m as f64, n as f64);
    let sqrt_c_pi = c_m.sqrt() + std::f64::consts::PI.sqrt();
    let phi_over_sigma = |sigma: f64| dm.sqrt() * (sqrt_c_pi + (1.0 / sigma.min(1.0)).ln().max(0.0).sqrt());
    let g = |sigma: f64| phi_over_sigma(sigma) - nf.sqrt() * sigma;
    let mut lo = 1e-12;
    let mut hi = 2f64.sqrt() * (c_m / nf).powf(0.25).max(1.0);
    let mut expansions = 0;
    while g(hi) > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::InvalidConfig("sigma_m bracket expansion failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    let sigma_m = 0.5 * (lo + hi);
    let n_sigma_sq = nf * sigma_m * sigma_m;
    let bound = dm * (2.0 * sqrt_c_pi * sqrt_c_pi + (nf / (sqrt_c_pi * sqrt_c_pi * dm)).ln().max(0.0));
    let residual = (phi_over_sigma(sigma_m) - nf.sqrt() * sigma_m).abs() * sigma_m;
    debug_assert!(n_sigma_sq <= bound * (1.0 + 1e-9), "nσ² = {n_sigma_sq} > bound = {bound}");
    Ok(SigmaMBound { sigma_m, n_sigma_sq, bound, residual })
}

/// Theoretical penalty `κ·((C + ln n)·dim(S_m) + K)` with `C` from the
/// entropy constants and Kraft weights `x_m = K`.
pub fn theoretical_penalty(spec: &ModelSpec, n: usize, consts: &EntropyConstants, kappa_mult: f64) -> f64 {
    kappa_mult * ((consts.c_penalty + (n as f64).ln()) * model_dim(spec) as f64 + spec.k as f64)
}

/// Milder penalty variant
/// `κ·(2·D·C'² + D·(ln(n/(C'²·D)))₊ + K)` with `C' = √𝔠 + √π`.
pub fn milder_theoretical_penalty(
    spec: &ModelSpec,
    n: usize,
    consts: &EntropyConstants,
    kappa_mult: f64,
) -> f64 {
    let d = model_dim(spec) as f64;
    let c_sq = (consts.frak_c.sqrt() + std::f64::consts::PI.sqrt()).powi(2);
    kappa_mult * (2.0 * d * c_sq + d * ((n as f64) / (c_sq * d)).ln().max(0.0) + spec.k as f64)
}

/// One Gaussian regression component in decomposed form `(υ, L, A, D)` with
/// `Σ = L·D·A·D'`.
#[derive(Debug, Clone)]
pub struct GaussParams {
    /// Mean coordinates as polynomials on `[0,1]^d`.
    pub mean: Vec<PolyFn>,
    /// Volume `L = |Σ|^{1/p}`.
    pub vol: f64,
    /// Diagonal of `A`; determinant one.
    pub eig: Vec<f64>,
    /// Rotation `D ∈ SO(p)`.
    pub rot: DMatrix<f64>,
}

impl GaussParams {
    pub fn response_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.mean.len();
        if p == 0 {
            return Err(Error::InvalidModel("empty mean tuple".into()));
        }
        if self.eig.len() != p || self.rot.nrows() != p || self.rot.ncols() != p {
            return Err(Error::InvalidModel("decomposition shape mismatch".into()));
        }
        if !(self.vol > 0.0) {
            return Err(Error::InvalidModel("volume must be positive".into()));
        }
        let det_a: f64 = self.eig.iter().product();
        if (det_a - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidModel(format!("|A| = {det_a}, expected 1")));
        }
        let gram = self.rot.transpose() * &self.rot;
        let err = (&gram - DMatrix::identity(p, p)).abs().max();
        if err > 1e-10 {
            return Err(Error::InvalidModel("rotation is not orthonormal".into()));
        }
        if self.rot.determinant() < 0.0 {
            return Err(Error::InvalidModel("rotation must have determinant +1".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let p = self.eig.len();
        let a = DMatrix::from_diagonal(&DVector::from_iterator(p, self.eig.iter().cloned()));
        (&self.rot * a * self.rot.transpose()) * self.vol
    }

    pub fn mean_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mean.iter().map(|f| f.eval(x)).collect()
    }
}

/// Cap `δ/(5p√(κ²cosh(2κ/5)+1/2))` on the covariance perturbation scale.
pub fn delta_sigma_cap(delta: f64, kappa: f64, p: usize) -> f64 {
    delta / (5.0 * p as f64 * (kappa * kappa * (2.0 * kappa / 5.0).cosh() + 0.5).sqrt())
}

/// Closed-form squared Hellinger size of the bracket
/// `(1+κδ_Σ)^{−p} + (1+κδ_Σ)^p − 2·2^{p/2}((1+δ_Σ)+(1+δ_Σ)^{−1})^{−p/2}`.
pub fn bracket_size_sq(p: usize, kappa: f64, delta_sigma: f64) -> f64 {
    let a = 1.0 + kappa * delta_sigma;
    let pf = p as f64;
    a.powf(-pf) + a.powf(pf)
        - 2.0 * 2f64.powf(pf / 2.0) * ((1.0 + delta_sigma) + 1.0 / (1.0 + delta_sigma)).powf(-pf / 2.0)
}

/// Grid/quadrature settings of the bracket verifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketConfig {
    /// Covariance perturbation scale; defaults to its cap.
    pub delta_sigma: Option<f64>,
    /// Covariate grid points.
    pub n_x: usize,
    /// Response grid points per axis.
    pub n_y_per_axis: usize,
    /// Half-width of the response grid in standard deviations.
    pub y_span_stds: f64,
    /// When false, failed closeness conditions are recorded instead of
    /// aborting, and containment is still tested (falsification mode).
    pub enforce_preconditions: bool,
}

impl Default for BracketConfig {
    fn default() -> Self {
        Self {
            delta_sigma: None,
            n_x: 20,
            n_y_per_axis: 500,
            y_span_stds: 8.0,
            enforce_preconditions: true,
        }
    }
}

/// One closeness condition of the proposition with its observed slack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

impl ConditionCheck {
    fn new(name: &str, lhs: f64, rhs: f64, ok: bool) -> Self {
        Self { name: name.into(), lhs, rhs, ok }
    }
}

/// Verifier output: condition slacks, bracket size and containment summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketReport {
    pub delta: f64,
    pub kappa: f64,
    pub delta_sigma: f64,
    pub conditions: Vec<ConditionCheck>,
    pub size_sq: f64,
    pub size_limit_sq: f64,
    pub size_ok: bool,
    /// Number of `(x, y)` grid points tested for containment; zero when the
    /// response dimension exceeds two.
    pub containment_points: usize,
    pub ok: bool,
}

fn x_grid(d: usize, n_x: usize) -> Vec<Vec<f64>> {
    if d == 1 {
        return (0..n_x)
            .map(|i| vec![i as f64 / (n_x - 1).max(1) as f64])
            .collect();
    }
    let mut rng = crate::seeding::rng_for(0x6e1d, d as u64);
    (0..n_x)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect()
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Numerically verifies the Gaussian bracket proposition: under the four
/// closeness conditions, `t^± = (1+κδ_Σ)^{∓p} Φ_{ṽ,(1+δ_Σ)^{∓1}Σ̃}` straddle
/// `Φ_{υ,Σ}` pointwise and form a `δ/5` Hellinger bracket.
///
/// Containment is tested on a dense grid for `p ≤ 2`; the size inequality is
/// evaluated in closed form for any `p`.
pub fn verify_gaussian_bracket(
    base: &GaussParams,
    tilde: &GaussParams,
    delta: f64,
    kappa: f64,
    bounds: &BoxBounds,
    cfg: &BracketConfig,
) -> Result<BracketReport> {
    base.validate()?;
    tilde.validate()?;
    bounds.validate()?;
    let p = base.response_dim();
    if tilde.response_dim() != p {
        return Err(Error::InvalidModel("dimension mismatch between params".into()));
    }
    if !(delta > 0.0 && delta <= 2f64.sqrt()) {
        return Err(Error::InvalidConfig("delta must lie in (0, sqrt(2)]".into()));
    }
    if kappa < KAPPA_MIN {
        return Err(Error::InvalidConfig("kappa must be at least 17/29".into()));
    }
    let cap = delta_sigma_cap(delta, kappa, p);
    let ds = cfg.delta_sigma.unwrap_or(cap);
    if ds > cap * (1.0 + 1e-12) || ds <= 0.0 {
        return Err(Error::PreconditionViolated(format!(
            "delta_sigma = {ds} exceeds its cap {cap}"
        )));
    }

    let d = base.mean[0].d;
    let xs = x_grid(d, cfg.n_x.max(2));
    let gk = gamma_kappa(kappa);
    let mean_rhs = p as f64 * gk * bounds.l_min * bounds.lambda_min * (bounds.lambda_min / bounds.lambda_max)
        * ds
        * ds;
    let mut mean_lhs: f64 = 0.0;
    for x in &xs {
        let mu = base.mean_at(x)?;
        let mt = tilde.mean_at(x)?;
        let gap: f64 = mu.iter().zip(&mt).map(|(a, b)| (a - b) * (a - b)).sum();
        mean_lhs = mean_lhs.max(gap);
    }
    let vol_lo = tilde.vol / (1.0 + 0.08 * ds);
    let eig_gap = (0..p)
        .map(|i| (1.0 / base.eig[i] - 1.0 / tilde.eig[i]).abs())
        .fold(0.0, f64::max);
    let rot_gap = operator_norm(&(&base.rot - &tilde.rot));
    let slack = 1.0 + 1e-12;
    let conditions = vec![
        ConditionCheck::new("mean_gap", mean_lhs, mean_rhs, mean_lhs <= mean_rhs * slack),
        ConditionCheck::new(
            "volume_sandwich",
            base.vol,
            tilde.vol,
            base.vol <= tilde.vol * slack && base.vol * slack >= vol_lo,
        ),
        ConditionCheck::new(
            "eigenvalue_gap",
            eig_gap,
            0.1 * ds / bounds.lambda_max,
            eig_gap <= 0.1 * ds / bounds.lambda_max * slack,
        ),
        ConditionCheck::new(
            "rotation_gap",
            rot_gap,
            0.1 * (bounds.lambda_min / bounds.lambda_max) * ds,
            rot_gap <= 0.1 * (bounds.lambda_min / bounds.lambda_max) * ds * slack,
        ),
    ];
    if cfg.enforce_preconditions {
        if let Some(c) = conditions.iter().find(|c| !c.ok) {
            return Err(Error::PreconditionViolated(format!(
                "{}: {} > {}",
                c.name, c.lhs, c.rhs
            )));
        }
    }

    let size_sq = bracket_size_sq(p, kappa, ds);
    let size_limit_sq = (delta / 5.0) * (delta / 5.0);
    let size_ok = size_sq <= size_limit_sq * (1.0 + 1e-12);
    if !size_ok && cfg.enforce_preconditions {
        return Err(Error::PreconditionViolated(format!(
            "bracket size {size_sq} exceeds (delta/5)^2 = {size_limit_sq}"
        )));
    }

    // pointwise containment on a grid, log-space comparison
    let mut containment_points = 0usize;
    if p <= 2 {
        let sigma = base.sigma();
        let sigma_tilde = tilde.sigma();
        let sig_lo = &sigma_tilde / (1.0 + ds);
        let sig_hi = &sigma_tilde * (1.0 + ds);
        let ln_lo_fac = -(p as f64) * (1.0 + kappa * ds).ln();
        let ln_hi_fac = (p as f64) * (1.0 + kappa * ds).ln();
        let spread = sigma
            .diagonal()
            .iter()
            .chain(sig_hi.diagonal().iter())
            .fold(0.0f64, |acc, &v| acc.max(v))
            .sqrt();
        let ny = cfg.n_y_per_axis.max(2);
        let tol = 1e-9;
        for x in &xs {
            let mu = base.mean_at(x)?;
            let mt = tilde.mean_at(x)?;
            let lo: Vec<f64> = (0..p)
                .map(|j| mu[j].min(mt[j]) - cfg.y_span_stds * spread)
                .collect();
            let hi: Vec<f64> = (0..p)
                .map(|j| mu[j].max(mt[j]) + cfg.y_span_stds * spread)
                .collect();
            let total = if p == 1 { ny } else { ny * ny };
            for t in 0..total {
                let y: Vec<f64> = if p == 1 {
                    vec![lo[0] + (hi[0] - lo[0]) * t as f64 / (ny - 1) as f64]
                } else {
                    let (i, j) = (t / ny, t % ny);
                    vec![
                        lo[0] + (hi[0] - lo[0]) * i as f64 / (ny - 1) as f64,
                        lo[1] + (hi[1] - lo[1]) * j as f64 / (ny - 1) as f64,
                    ]
                };
                let ln_phi = log_gaussian(&y, &mu, &sigma)?;
                let ln_lower = ln_lo_fac + log_gaussian(&y, &mt, &sig_lo)?;
                let ln_upper = ln_hi_fac + log_gaussian(&y, &mt, &sig_hi)?;
                containment_points += 1;
                if ln_lower > ln_phi + tol {
                    return Err(Error::BracketViolated { x: x.clone(), y, side: "lower" });
                }
                if ln_phi > ln_upper + tol {
                    return Err(Error::BracketViolated { x: x.clone(), y, side: "upper" });
                }
            }
        }
    }

    let ok = size_ok && conditions.iter().all(|c| c.ok);
    Ok(BracketReport {
        delta,
        kappa,
        delta_sigma: ds,
        conditions,
        size_sq,
        size_limit_sq,
        size_ok,
        containment_points,
        ok,
    })
}

/// Draws a random scalar-response bracket instance. With `mean_gap_factor`
/// below one the instance satisfies every closeness condition; larger values
/// inflate the squared mean gap past its bound (falsification instances use
/// a factor of ten and volumes near the box floor so the violation is
/// detectable).
pub fn random_bracket_instance(
    delta: f64,
    kappa: f64,
    bounds: &BoxBounds,
    mean_gap_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(GaussParams, GaussParams)> {
    let ds = delta_sigma_cap(delta, kappa, 1);
    let gk = gamma_kappa(kappa);
    let gap_bound = gk * bounds.l_min * bounds.lambda_min * (bounds.lambda_min / bounds.lambda_max) * ds * ds;
    let adversarial = mean_gap_factor > 1.0;
    let vol = if adversarial {
        // keep the variance near the box floor so the inflated gap bites
        bounds.l_min * rng.random_range(1.0..1.2)
    } else {
        rng.random_range(bounds.l_min..=bounds.l_max)
    };
    let vol_tilde = (vol * (1.0 + rng.random_range(0.0..0.99) * 0.08 * ds)).min(bounds.l_max.max(vol));
    let coeffs = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let mean = PolyFn::new(1, 1, coeffs.clone())?;
    let gap = if adversarial {
        (mean_gap_factor * gap_bound).sqrt()
    } else {
        (rng.random_range(0.05..0.99) * gap_bound).sqrt()
    };
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut tilde_coeffs = coeffs;
    tilde_coeffs[0] += sign * gap;
    let mean_tilde = PolyFn::new(1, 1, tilde_coeffs)?;
    let one = DMatrix::identity(1, 1);
    Ok((
        GaussParams { mean: vec![mean], vol, eig: vec![1.0], rot: one.clone() },
        GaussParams { mean: vec![mean_tilde], vol: vol_tilde, eig: vec![1.0], rot: one },
    ))
}
