//! Newton-EM: EM with closed-form mean/covariance maximization and damped
//! Newton sub-iterations for the logistic weight polynomials.
//!
//! The only departure from classical EM is the weight substep: there is no
//! closed formula for the gate maximizer, so a few Newton iterations (five by
//! default) are run on the concave surrogate `Q_w = Σ_i Σ_k τ_ik ln π_k(x_i)`,
//! each step halved until the surrogate does not decrease. Covariance
//! eigenvalues are floored to keep EM away from degenerate perfect-fit
//! maximizers.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::model::{logsumexp, Dataset, Mixture};
use crate::polybasis::{basis_vector, binom, PolyFn};
use crate::selection::ModelSpec;

/// Slack under which the observed log-likelihood is treated as non-decreasing.
const MONOTONE_EPS: f64 = 1e-9;

/// Effective-mass guard: a component with `Σ_i τ_ik` below this fraction of n
/// is degenerate.
const MASS_GUARD: f64 = 1e-8;

/// Lower bound policy for covariance eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceFloorMode {
    /// The 10/n floor used throughout the reference experiments.
    FixedTenOverN,
    /// Min-spacing/χ² bound, scalar responses only.
    DataDriven { alpha: f64 },
    /// A caller-chosen positive floor.
    Explicit(f64),
}

impl Default for VarianceFloorMode {
    fn default() -> Self {
        VarianceFloorMode::FixedTenOverN
    }
}

/// Knobs of one Newton-EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_em_iters: usize,
    /// Relative log-likelihood change below which EM stops. Zero disables the
    /// test and runs exactly `max_em_iters` iterations (fixed-step mode).
    pub em_rel_tol: f64,
    pub newton_steps: usize,
    pub variance_floor: VarianceFloorMode,
    /// Projection mode: clamp coefficients into the spec's boxes after each
    /// substep. Off by default; the fitting algorithm never projects, while
    /// the compactness assumptions of the theory require the option.
    pub enforce_coeff_bounds: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 200,
            em_rel_tol: 1e-6,
            newton_steps: 5,
            variance_floor: VarianceFloorMode::default(),
            enforce_coeff_bounds: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.newton_steps == 0 {
            return Err(Error::InvalidConfig("newton_steps must be at least 1".into()));
        }
        if self.em_rel_tol < 0.0 || !self.em_rel_tol.is_finite() {
            return Err(Error::InvalidConfig("em_rel_tol must be non-negative".into()));
        }
        if self.max_em_iters == 0 {
            return Err(Error::InvalidConfig("max_em_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Fixed-step variant used by the initialization races.
    pub fn fixed_steps(mut self, steps: usize) -> Self {
        self.max_em_iters = steps;
        self.em_rel_tol = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Tol,
    MaxIters,
}

/// Fitted parameters plus the per-iteration likelihood trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Mixture,
    /// Observed log-likelihood, one entry for the initial parameters and one
    /// per EM iteration; non-decreasing within 1e-8.
    pub loglik_trace: Vec<f64>,
    pub n_iters: usize,
    pub terminated_by: TerminatedBy,
    /// Last-step improvement of the log-likelihood: the achieved slack in the
    /// η-minimizer sense.
    pub eta_slack: f64,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("non-empty trace")
    }
}

/// Covariance eigenvalue floor for the requested mode.
///
/// `fixed` is `10/n`; `data_driven` is
/// `min_{i<j}(Y_i−Y_j)² / (2 χ²_{n−2K+1}((1−α)^{1/K}))` for scalar responses,
/// with the χ² quantile obtained by bisection on the regularized incomplete
/// gamma function.
pub fn variance_floor(mode: &VarianceFloorMode, data: &Dataset, k: usize) -> Result<f64> {
    match *mode {
        VarianceFloorMode::FixedTenOverN => Ok(10.0 / data.len() as f64),
        VarianceFloorMode::Explicit(v) => {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidConfig("explicit variance floor must be positive".into()))
            }
        }
        VarianceFloorMode::DataDriven { alpha } => {
            if data.response_dim() != 1 {
                return Err(Error::UnsupportedDimension {
                    what: "data-driven variance floor",
                    d: data.covariate_dim(),
                    p: data.response_dim(),
                });
            }
            if !(0.0 < alpha && alpha < 1.0) {
                return Err(Error::InvalidConfig("alpha must be in (0,1)".into()));
            }
            let n = data.len();
            if n < 2 * k {
                return Err(Error::TooFewPoints { needed: 2 * k, have: n });
            }
            let mut ys: Vec<f64> = data.y_rows().map(|y| y[0]).collect();
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let min_gap = ys
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min);
            if min_gap <= 0.0 {
                return Err(Error::InvalidConfig(
                    "data-driven floor degenerates on tied responses".into(),
                ));
            }
            let dof = (n - 2 * k + 1) as f64;
            let prob = (1.0 - alpha).powf(1.0 / k as f64);
            let q = chi_square_quantile(dof, prob);
            Ok(min_gap * min_gap / (2.0 * q))
        }
    }
}

/// χ² quantile by bisection on `P(dof/2, x/2)`.
pub fn chi_square_quantile(dof: f64, prob: f64) -> f64 {
    assert!(dof > 0.0 && (0.0..1.0).contains(&prob));
    let cdf = |x: f64| gamma_lr(dof / 2.0, x / 2.0);
    let mut hi = dof + 10.0 * (2.0 * dof).sqrt() + 10.0;
    while cdf(hi) < prob {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Design matrix of monomials for one polynomial degree, stored `q × n` so
/// each point's basis vector is a contiguous column.
struct Design {
    q: usize,
    mat: DMatrix<f64>,
}

impl Design {
    fn build(data: &Dataset, degree: usize) -> Result<Self> {
        let d = data.covariate_dim();
        let q = binom(degree + d, d);
        let mut cols = Vec::with_capacity(data.len() * q);
        for x in data.x_rows() {
            cols.extend(basis_vector(d, degree, x)?);
        }
        Ok(Self { q, mat: DMatrix::from_column_slice(q, data.len(), &cols) })
    }

    #[inline]
    fn point(&self, i: usize) -> &[f64] {
        &self.mat.as_slice()[i * self.q..(i + 1) * self.q]
    }
}

/// Dense parameter view used by the inner loops: weight coefficients as a
/// `q_W × K` matrix (first column zero), mean coefficients as `q_Υ × p` per
/// component.
#[derive(Clone)]
struct ParamSet {
    wcoef: DMatrix<f64>,
    mcoef: Vec<DMatrix<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl ParamSet {
    fn from_mixture(mix: &Mixture, spec: &ModelSpec) -> Result<Self> {
        if mix.k() != spec.k || mix.covariate_dim() != spec.d || mix.response_dim() != spec.p {
            return Err(Error::InvalidModel("initial parameters do not match the model spec".into()));
        }
        let qw = binom(spec.d_w + spec.d, spec.d);
        let qu = binom(spec.d_upsilon + spec.d, spec.d);
        let mut wcoef = DMatrix::zeros(qw, spec.k);
        for (k, w) in mix.weights().iter().enumerate() {
            if w.degree > spec.d_w {
                return Err(Error::InvalidModel(format!(
                    "weight polynomial degree {} exceeds spec degree {}",
                    w.degree, spec.d_w
                )));
            }
            // degree-sorted enumeration makes lower-degree coefficient vectors
            // a prefix of higher-degree ones
            for (r, &c) in w.coeffs.iter().enumerate() {
                wcoef[(r, k)] = c;
            }
        }
        let mut mcoef = Vec::with_capacity(spec.k);
        for m in mix.means() {
            let mut mk = DMatrix::zeros(qu, spec.p);
            for (j, f) in m.iter().enumerate() {
                if f.degree > spec.d_upsilon {
                    return Err(Error::InvalidModel(format!(
                        "mean polynomial degree {} exceeds spec degree {}",
                        f.degree, spec.d_upsilon
                    )));
                }
                for (r, &c) in f.coeffs.iter().enumerate() {
                    mk[(r, j)] = c;
                }
            }
            mcoef.push(mk);
        }
        Ok(Self { wcoef, mcoef, covs: mix.covs().to_vec() })
    }

    fn into_mixture(self, spec: &ModelSpec) -> Result<Mixture> {
        let k = spec.k;
        let weights = (0..k)
            .map(|c| PolyFn::new(spec.d, spec.d_w, self.wcoef.column(c).iter().cloned().collect()))
            .collect::<Result<Vec<_>>>()?;
        let means = self
            .mcoef
            .iter()
            .map(|mk| {
                (0..spec.p)
                    .map(|j| PolyFn::new(spec.d, spec.d_upsilon, mk.column(j).iter().cloned().collect()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Mixture::new(weights, means, self.covs)
    }

    fn clamp_means(&mut self, bound: f64) {
        for mk in &mut self.mcoef {
            for v in mk.iter_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
    }

    fn clamp_weights(&mut self, bound: f64) {
        let k = self.wcoef.ncols();
        for c in 1..k {
            for r in 0..self.wcoef.nrows() {
                self.wcoef[(r, c)] = self.wcoef[(r, c)].clamp(-bound, bound);
            }
        }
    }
}

/// Per-component Gaussian evaluation constants for one EM iteration:
/// flattened row-major precision matrices and log normalizers.
struct CompEval {
    p: usize,
    prec: Vec<f64>,
    ln_norm: Vec<f64>,
}

impl CompEval {
    fn new(covs: &[DMatrix<f64>]) -> Result<Self> {
        let p = covs[0].nrows();
        let mut prec = Vec::with_capacity(covs.len() * p * p);
        let mut ln_norm = Vec::with_capacity(covs.len());
        for c in covs {
            let chol = Cholesky::new(c.clone()).ok_or(Error::NotSpd)?;
            let ln_det: f64 = (0..p).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
            ln_norm.push(-0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det));
            let inv = chol.inverse();
            for i in 0..p {
                for j in 0..p {
                    prec.push(inv[(i, j)]);
                }
            }
        }
        Ok(Self { p, prec, ln_norm })
    }

    #[inline]
    fn quad(&self, c: usize, resid: &[f64]) -> f64 {
        let p = self.p;
        let prec = &self.prec[c * p * p..(c + 1) * p * p];
        let mut quad = 0.0;
        for a in 0..p {
            let mut acc = 0.0;
            for b in 0..p {
                acc += prec[a * p + b] * resid[b];
            }
            quad += resid[a] * acc;
        }
        quad
    }
}

/// Shared core of the E-step and likelihood evaluation. If `tau` is given it
/// receives the responsibility rows. Gate logits and component means come
/// from two matrix products; the point loop only exponentiates.
fn pass(
    ps: &ParamSet,
    data: &Dataset,
    bw: &Design,
    bu: &Design,
    mut tau: Option<&mut DMatrix<f64>>,
) -> Result<f64> {
    let n = data.len();
    let k = ps.wcoef.ncols();
    let p = data.response_dim();
    let comps = CompEval::new(&ps.covs)?;
    // k×n logits and p×n means per component; column i belongs to point i
    let wlog = ps.wcoef.transpose() * &bw.mat;
    let mus: Vec<DMatrix<f64>> = ps.mcoef.iter().map(|m| m.transpose() * &bu.mat).collect();
    let ws = wlog.as_slice();
    let mut terms = vec![0.0; k];
    let mut resid = vec![0.0; p];
    let mut ll = 0.0;
    for i in 0..n {
        let y = data.y_row(i);
        let wcol = &ws[i * k..(i + 1) * k];
        let lse_w = logsumexp(wcol);
        for (c, t) in terms.iter_mut().enumerate() {
            let mu = &mus[c].as_slice()[i * p..(i + 1) * p];
            for j in 0..p {
                resid[j] = y[j] - mu[j];
            }
            *t = wcol[c] - lse_w + comps.ln_norm[c] - 0.5 * comps.quad(c, &resid);
        }
        let lse = logsumexp(&terms);
        ll += lse;
        if let Some(tau) = tau.as_deref_mut() {
            for (c, t) in terms.iter().enumerate() {
                tau[(i, c)] = (t - lse).exp();
            }
        }
    }
    Ok(ll)
}

/// Responsibility matrix: row `i` holds the posterior component probabilities
/// of observation `i`. Rows sum to one within 1e-12.
pub fn e_step(params: &Mixture, data: &Dataset) -> Result<DMatrix<f64>> {
    let spec = ModelSpec::free(
        params.k(),
        params.weights().iter().map(|w| w.degree).max().unwrap_or(0),
        params.means().iter().flatten().map(|f| f.degree).max().unwrap_or(0),
        params.covariate_dim(),
        params.response_dim(),
    );
    let ps = ParamSet::from_mixture(params, &spec)?;
    let bw = Design::build(data, spec.d_w)?;
    let bu = Design::build(data, spec.d_upsilon)?;
    let mut tau = DMatrix::zeros(data.len(), params.k());
    pass(&ps, data, &bw, &bu, Some(&mut tau))?;
    Ok(tau)
}

/// Weighted least-squares means and floored covariance update.
///
/// For component `k` and output coordinate `j` the coefficients solve the
/// `τ_k`-weighted normal equations of `y_j` on the degree-`d_upsilon` monomial
/// basis; the covariance is the `τ_k`-weighted residual scatter with its
/// eigenvalues floored.
pub fn m_step_means_covs(
    data: &Dataset,
    tau: &DMatrix<f64>,
    d_upsilon: usize,
    floor: f64,
) -> Result<(Vec<Vec<PolyFn>>, Vec<DMatrix<f64>>)> {
    let bu = Design::build(data, d_upsilon)?;
    let (mcoef, covs) = m_step_internal(data, &bu, tau, floor)?;
    let d = data.covariate_dim();
    let p = data.response_dim();
    let means = mcoef
        .iter()
        .map(|mk| {
            (0..p)
                .map(|j| PolyFn::new(d, d_upsilon, mk.column(j).iter().cloned().collect()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((means, covs))
}

fn m_step_internal(
    data: &Dataset,
    bu: &Design,
    tau: &DMatrix<f64>,
    floor: f64,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let n = data.len();
    let k = tau.ncols();
    let p = data.response_dim();
    let q = bu.q;
    let mut mcoef = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let wsum: f64 = (0..n).map(|i| tau[(i, c)]).sum();
        if !(wsum > MASS_GUARD * n as f64) {
            return Err(Error::DegenerateComponent { component: c, iteration: 0 });
        }
        let mut a = DMatrix::zeros(q, q);
        let mut rhs = DMatrix::zeros(q, p);
        for i in 0..n {
            let t = tau[(i, c)];
            if t == 0.0 {
                continue;
            }
            let b = bu.point(i);
            let y = data.y_row(i);
            for r in 0..q {
                let tbr = t * b[r];
                for s in r..q {
                    a[(r, s)] += tbr * b[s];
                }
                for j in 0..p {
                    rhs[(r, j)] += tbr * y[j];
                }
            }
        }
        for r in 0..q {
            for s in 0..r {
                a[(r, s)] = a[(s, r)];
            }
        }
        let coef = solve_spd_with_ridge(&a, &rhs)
            .ok_or(Error::DegenerateComponent { component: c, iteration: 0 })?;
        // weighted residual scatter
        let mut scatter = DMatrix::zeros(p, p);
        let mut mu = vec![0.0; p];
        for i in 0..n {
            let t = tau[(i, c)];
            if t == 0.0 {
                continue;
            }
            let b = bu.point(i);
            let y = data.y_row(i);
            for (j, m) in mu.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, &br) in b.iter().enumerate() {
                    acc += br * coef[(r, j)];
                }
                *m = y[j] - acc;
            }
            for a_ in 0..p {
                for b_ in a_..p {
                    scatter[(a_, b_)] += t * mu[a_] * mu[b_];
                }
            }
        }
        for a_ in 0..p {
            for b_ in 0..a_ {
                scatter[(a_, b_)] = scatter[(b_, a_)];
            }
        }
        scatter /= wsum;
        covs.push(floor_eigenvalues(&scatter, floor));
        mcoef.push(coef);
    }
    Ok((mcoef, covs))
}

/// Cholesky solve with escalating ridge rescue (`1e-10·tr/dim`, ×10 per try).
fn solve_spd_with_ridge(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let q = a.nrows();
    let base = 1e-10 * a.trace().max(f64::MIN_POSITIVE) / q as f64;
    for attempt in 0..8 {
        let m = if attempt == 0 {
            a.clone()
        } else {
            let ridge = base * 10f64.powi(attempt - 1);
            a + DMatrix::identity(q, q) * ridge
        };
        if let Some(chol) = Cholesky::new(m) {
            return Some(chol.solve(rhs));
        }
    }
    None
}

/// Clamps the eigenvalues of a symmetric matrix from below.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let p = m.nrows();
    if p == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(floor));
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let vals = DVector::from_iterator(p, eig.eigenvalues.iter().map(|&v| v.max(floor)));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    // symmetrize against round-off
    (&out + out.transpose()) * 0.5
}

/// Damped Newton update of the weight polynomials on the concave surrogate
/// `Q_w = Σ_i Σ_k τ_ik ln π_{w,k}(x_i)`, first component pinned at zero.
///
/// Returns the updated polynomials and the surrogate value trace (initial
/// value plus one entry per Newton step).
pub fn newton_weight_update(
    params: &Mixture,
    data: &Dataset,
    tau: &DMatrix<f64>,
    steps: usize,
) -> Result<(Vec<PolyFn>, Vec<f64>)> {
    if steps == 0 {
        return Err(Error::InvalidConfig("newton steps must be at least 1".into()));
    }
    let d_w = params.weights().iter().map(|w| w.degree).max().unwrap_or(0);
    let spec = ModelSpec::free(params.k(), d_w, 0, params.covariate_dim(), params.response_dim());
    let qw = binom(d_w + spec.d, spec.d);
    let mut wcoef = DMatrix::zeros(qw, spec.k);
    for (k, w) in params.weights().iter().enumerate() {
        for (r, &c) in w.coeffs.iter().enumerate() {
            wcoef[(r, k)] = c;
        }
    }
    let bw = Design::build(data, d_w)?;
    let trace = newton_internal(&mut wcoef, &bw, tau, steps);
    let weights = (0..spec.k)
        .map(|c| PolyFn::new(spec.d, d_w, wcoef.column(c).iter().cloned().collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((weights, trace))
}

/// Surrogate value `Q_w = Σ_i Σ_k τ_ik (w_k(x_i) − lse_i)` for the logits
/// `wcoef' · bw`.
fn q_surrogate(wcoef: &DMatrix<f64>, bw: &Design, tau: &DMatrix<f64>) -> f64 {
    let n = tau.nrows();
    let k = wcoef.ncols();
    let wlog = wcoef.transpose() * &bw.mat;
    let ws = wlog.as_slice();
    let mut lses = vec![0.0; n];
    for (i, l) in lses.iter_mut().enumerate() {
        *l = logsumexp(&ws[i * k..(i + 1) * k]);
    }
    let mut q = 0.0;
    for c in 0..k {
        let tcol = tau.column(c);
        for i in 0..n {
            q += tcol[i] * (ws[i * k + c] - lses[i]);
        }
    }
    q
}

fn newton_internal(
    wcoef: &mut DMatrix<f64>,
    bw: &Design,
    tau: &DMatrix<f64>,
    steps: usize,
) -> Vec<f64> {
    let n = tau.nrows();
    let k = wcoef.ncols();
    let qw = bw.q;
    let mut trace = vec![q_surrogate(wcoef, bw, tau)];
    if k == 1 {
        // no free weights
        return trace;
    }
    let dim = (k - 1) * qw;
    // k×n gate probabilities, column i contiguous
    let mut pis = vec![0.0; k * n];
    for _ in 0..steps {
        let q_cur = *trace.last().unwrap();
        // gate probabilities and the gradient G = B_W (τ − π)
        let wlog = wcoef.transpose() * &bw.mat;
        let ws = wlog.as_slice();
        for i in 0..n {
            let wcol = &ws[i * k..(i + 1) * k];
            let lse = logsumexp(wcol);
            for c in 0..k {
                pis[i * k + c] = (wcol[c] - lse).exp();
            }
        }
        let mut r_mat = DMatrix::zeros(n, k);
        for c in 0..k {
            let mut rcol = r_mat.column_mut(c);
            let tcol = tau.column(c);
            for i in 0..n {
                rcol[i] = tcol[i] - pis[i * k + c];
            }
        }
        let g_all = &bw.mat * &r_mat;
        let mut grad = DVector::zeros(dim);
        for c in 1..k {
            for r in 0..qw {
                grad[(c - 1) * qw + r] = g_all[(r, c)];
            }
        }
        // stationary: the remaining steps would not move
        if grad.amax() <= 1e-10 * (1.0 + q_cur.abs()) {
            break;
        }
        // negated Hessian blocks for components 2..K
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let b = bw.point(i);
            let pi = &pis[i * k..(i + 1) * k];
            for c in 1..k {
                let row0 = (c - 1) * qw;
                for l in c..k {
                    let pc = pi[c];
                    let hfac = if c == l { pc * (1.0 - pc) } else { -pc * pi[l] };
                    let col0 = (l - 1) * qw;
                    for (r, &br) in b.iter().enumerate() {
                        for (s, &bs) in b.iter().enumerate() {
                            hess[(row0 + r, col0 + s)] += hfac * br * bs;
                        }
                    }
                }
            }
        }
        // mirror the upper block triangle
        for c in 1..k {
            for l in (c + 1)..k {
                for r in 0..qw {
                    for s in 0..qw {
                        hess[((l - 1) * qw + s, (c - 1) * qw + r)] =
                            hess[((c - 1) * qw + r, (l - 1) * qw + s)];
                    }
                }
            }
        }
        // Newton direction; ridge rescue, then plain gradient ascent if the
        // Hessian stays singular (ill-conditioned design)
        let delta = solve_spd_with_ridge(&hess, &DMatrix::from_column_slice(dim, 1, grad.as_slice()))
            .map(|m| DVector::from_column_slice(m.as_slice()))
            .unwrap_or_else(|| grad.clone());
        // halving backtrack until the surrogate does not decrease
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let mut cand = wcoef.clone();
            for c in 1..k {
                for r in 0..qw {
                    cand[(r, c)] += t * delta[(c - 1) * qw + r];
                }
            }
            let q_new = q_surrogate(&cand, bw, tau);
            if q_new >= q_cur {
                accepted = Some((cand, q_new));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, q_new)) => {
                *wcoef = cand;
                trace.push(q_new);
                if q_new - q_cur <= 1e-12 * (1.0 + q_cur.abs()) {
                    break;
                }
            }
            None => break,
        }
    }
    trace
}

fn interpolate_toward(dst: &mut DMatrix<f64>, src: &DMatrix<f64>, t: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s + t * (*d - *s);
    }
}

/// Fits one model by Newton-EM from the given initial parameters.
///
/// Alternates E-step, weighted-LS mean/covariance update and the damped
/// Newton weight update until the relative log-likelihood change drops below
/// `em_rel_tol` or `max_em_iters` is reached. The observed log-likelihood is
/// non-decreasing across iterations (within 1e-8); both maximization substeps
/// fall back to step halving toward the previous parameters if rounding ever
/// produces a decrease.
pub fn fit(data: &Dataset, spec: &ModelSpec, init: &Mixture, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    spec.validate()?;
    let floor = variance_floor(&cfg.variance_floor, data, spec.k)?;
    let bw = Design::build(data, spec.d_w)?;
    let bu = Design::build(data, spec.d_upsilon)?;
    let mut ps = ParamSet::from_mixture(init, spec)?;
    for c in &mut ps.covs {
        *c = floor_eigenvalues(c, floor);
    }
    if cfg.enforce_coeff_bounds {
        ps.clamp_means(spec.t_upsilon);
        ps.clamp_weights(spec.t_w);
    }
    let n = data.len();
    let k = spec.k;
    let mut tau = DMatrix::zeros(n, k);
    let mut ll = pass(&ps, data, &bw, &bu, Some(&mut tau))?;
    let mut trace = vec![ll];
    let mut terminated = TerminatedBy::MaxIters;
    for iter in 1..=cfg.max_em_iters {
        // M-substep 1: means and covariances, closed form given tau
        let (mcoef, covs) = m_step_internal(data, &bu, &tau, floor).map_err(|e| match e {
            Error::DegenerateComponent { component, .. } => {
                Error::DegenerateComponent { component, iteration: iter }
            }
            other => other,
        })?;
        let mut cand = ps.clone();
        cand.mcoef = mcoef;
        cand.covs = covs;
        if cfg.enforce_coeff_bounds {
            cand.clamp_means(spec.t_upsilon);
        }
        // M-substep 2: Newton on the weight polynomials, same tau
        let before_weights = cand.wcoef.clone();
        newton_internal(&mut cand.wcoef, &bw, &tau, cfg.newton_steps);
        if cfg.enforce_coeff_bounds {
            cand.clamp_weights(spec.t_w);
        }
        let mut tau_new = DMatrix::zeros(n, k);
        let mut ll_new = pass(&cand, data, &bw, &bu, Some(&mut tau_new))?;
        if ll_new < ll - MONOTONE_EPS {
            // rounding produced a decrease: backtrack each substep by halving
            // toward the previous parameters
            cand.wcoef = before_weights.clone();
            let mut ll_mid = pass(&cand, data, &bw, &bu, None)?;
            let mut halvings = 0;
            while ll_mid < ll - MONOTONE_EPS && halvings < 20 {
                for (dst, src) in cand.mcoef.iter_mut().zip(&ps.mcoef) {
                    interpolate_toward(dst, src, 0.5);
                }
                for (dst, src) in cand.covs.iter_mut().zip(&ps.covs) {
                    interpolate_toward(dst, src, 0.5);
                }
                ll_mid = pass(&cand, data, &bw, &bu, None)?;
                halvings += 1;
            }
            if ll_mid < ll - MONOTONE_EPS {
                cand.mcoef = ps.mcoef.clone();
                cand.covs = ps.covs.clone();
                ll_mid = ll;
            }
            newton_internal(&mut cand.wcoef, &bw, &tau, cfg.newton_steps);
            if cfg.enforce_coeff_bounds {
                cand.clamp_weights(spec.t_w);
            }
            ll_new = pass(&cand, data, &bw, &bu, Some(&mut tau_new))?;
            let mut halvings = 0;
            while ll_new < ll_mid - MONOTONE_EPS && halvings < 20 {
                interpolate_toward(&mut cand.wcoef, &before_weights, 0.5);
                ll_new = pass(&cand, data, &bw, &bu, Some(&mut tau_new))?;
                halvings += 1;
            }
            if ll_new < ll_mid - MONOTONE_EPS {
                cand.wcoef = before_weights;
                ll_new = pass(&cand, data, &bw, &bu, Some(&mut tau_new))?;
            }
        }
        ps = cand;
        tau = tau_new;
        let prev = ll;
        ll = ll_new;
        trace.push(ll);
        if cfg.em_rel_tol > 0.0 && (ll - prev).abs() / (1.0 + ll.abs()) < cfg.em_rel_tol {
            terminated = TerminatedBy::Tol;
            break;
        }
    }
    let eta_slack = if trace.len() >= 2 {
        (trace[trace.len() - 1] - trace[trace.len() - 2]).max(0.0)
    } else {
        0.0
    };
    Ok(FitResult {
        params: ps.into_mixture(spec)?,
        n_iters: trace.len() - 1,
        loglik_trace: trace,
        terminated_by: terminated,
        eta_slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polybasis::PolyFn;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn line_data(n: usize, a: f64, b: f64, noise: f64, seed: u64) -> Dataset {
        let mut rng = crate::seeding::rng_for(seed, 0);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.random();
            let eps: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            xs.push(x);
            ys.push(a + b * x + noise * eps);
        }
        Dataset::new(1, 1, xs, ys).unwrap()
    }

    fn spec_1d(k: usize, d_w: usize, d_u: usize) -> ModelSpec {
        ModelSpec::free(k, d_w, d_u, 1, 1)
    }

    #[test]
    fn variance_floor_modes() {
        let data = line_data(2000, 0.0, 1.0, 0.1, 1);
        let f = variance_floor(&VarianceFloorMode::FixedTenOverN, &data, 2).unwrap();
        assert_abs_diff_eq!(f, 0.005, epsilon = 1e-15);
        let e = variance_floor(&VarianceFloorMode::Explicit(0.01), &data, 2).unwrap();
        assert_abs_diff_eq!(e, 0.01, epsilon = 1e-15);
        assert!(variance_floor(&VarianceFloorMode::Explicit(0.0), &data, 2).is_err());
    }

    #[test]
    fn data_driven_floor_matches_quadrature_quantile() {
        let data = line_data(100, 0.0, 2.0, 0.3, 7);
        let k = 2;
        let alpha = 0.05;
        let floor = variance_floor(&VarianceFloorMode::DataDriven { alpha }, &data, k).unwrap();

        // oracle: chi-square quantile from trapezoid integration of the
        // unnormalized density, so no gamma-function code is shared
        let dof = (100 - 2 * k + 1) as f64;
        let prob = (1.0 - alpha).powf(1.0 / k as f64);
        let hi = dof + 30.0 * (2.0 * dof).sqrt();
        let m = 400_000;
        let h = hi / m as f64;
        let dens = |x: f64| if x <= 0.0 { 0.0 } else { ((dof / 2.0 - 1.0) * x.ln() - x / 2.0).exp() };
        let mut cum = vec![0.0; m + 1];
        for i in 1..=m {
            let x0 = (i - 1) as f64 * h;
            let x1 = i as f64 * h;
            cum[i] = cum[i - 1] + 0.5 * (dens(x0) + dens(x1)) * h;
        }
        let total = cum[m];
        let target = prob * total;
        let idx = cum.partition_point(|&c| c < target);
        let q_oracle = idx as f64 * h;

        let q_impl = chi_square_quantile(dof, prob);
        assert!((q_impl - q_oracle).abs() < 1e-3 * q_oracle, "{q_impl} vs {q_oracle}");

        let mut ys: Vec<f64> = data.y_rows().map(|y| y[0]).collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap = ys.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(floor, gap * gap / (2.0 * q_impl), epsilon = 1e-15);
    }

    #[test]
    fn data_driven_floor_rejects_multivariate() {
        let data = Dataset::new(1, 2, vec![0.1, 0.9], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            variance_floor(&VarianceFloorMode::DataDriven { alpha: 0.05 }, &data, 1),
            Err(Error::UnsupportedDimension { .. })
        ));
    }

    #[test]
    fn e_step_k1_and_identical_components() {
        let data = line_data(50, 1.0, 2.0, 0.2, 3);
        let single = Mixture::constant_gaussian(1, &[0.0], DMatrix::identity(1, 1)).unwrap();
        let tau = e_step(&single, &data).unwrap();
        assert!(tau.iter().all(|&t| (t - 1.0).abs() < 1e-15));

        let twin = Mixture::new(
            vec![PolyFn::zero(1, 1); 2],
            vec![vec![PolyFn::constant(1, 0.5)]; 2],
            vec![DMatrix::identity(1, 1); 2],
        )
        .unwrap();
        let tau2 = e_step(&twin, &data).unwrap();
        for i in 0..data.len() {
            assert_abs_diff_eq!(tau2[(i, 0)], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(tau2[(i, 1)], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn e_step_rows_match_responsibilities() {
        let data = line_data(50, -1.0, 3.0, 0.5, 11);
        let params = crate::experiment::truth_density(crate::experiment::ExampleModel::P);
        let tau = e_step(&params, &data).unwrap();
        for i in 0..data.len() {
            let row = params.responsibilities(data.x_row(i), data.y_row(i)).unwrap();
            let sum: f64 = (0..2).map(|c| tau[(i, c)]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            for c in 0..2 {
                assert_abs_diff_eq!(tau[(i, c)], row[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn m_step_recovers_noiseless_line() {
        let data = line_data(60, 1.0, 2.0, 0.0, 5);
        let tau = DMatrix::from_element(60, 1, 1.0);
        let floor = 10.0 / 60.0;
        let (means, covs) = m_step_means_covs(&data, &tau, 1, floor).unwrap();
        assert_abs_diff_eq!(means[0][0].coeffs[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(means[0][0].coeffs[1], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(covs[0][(0, 0)], floor, epsilon = 1e-12);
    }

    #[test]
    fn m_step_matches_direct_normal_equations() {
        let data = line_data(80, 0.3, -1.2, 0.4, 9);
        let tau = DMatrix::from_element(80, 1, 1.0);
        let (means, _) = m_step_means_covs(&data, &tau, 1, 1e-3).unwrap();
        // direct dense solve of X'X beta = X'y
        let (mut sxx, mut sx, mut sy, mut sxy, n) = (0.0, 0.0, 0.0, 0.0, 80.0);
        for i in 0..80 {
            let (x, y) = (data.x_row(i)[0], data.y_row(i)[0]);
            sxx += x * x;
            sx += x;
            sy += y;
            sxy += x * y;
        }
        let det = n * sxx - sx * sx;
        let b0 = (sxx * sy - sx * sxy) / det;
        let b1 = (n * sxy - sx * sy) / det;
        assert_abs_diff_eq!(means[0][0].coeffs[0], b0, epsilon = 1e-9);
        assert_abs_diff_eq!(means[0][0].coeffs[1], b1, epsilon = 1e-9);
    }

    #[test]
    fn m_step_degenerate_guard() {
        let data = line_data(40, 0.0, 1.0, 0.1, 13);
        let mut tau = DMatrix::from_element(40, 2, 0.0);
        for i in 0..40 {
            tau[(i, 0)] = 1.0;
            tau[(i, 1)] = 1e-12;
        }
        assert!(matches!(
            m_step_means_covs(&data, &tau, 1, 1e-3),
            Err(Error::DegenerateComponent { component: 1, .. })
        ));
    }

    #[test]
    fn newton_fixed_point_when_tau_equals_pi() {
        let data = line_data(60, 0.0, 1.0, 0.3, 17);
        let params = crate::experiment::truth_density(crate::experiment::ExampleModel::P);
        // tau exactly equal to the current gate probabilities
        let mut tau = DMatrix::zeros(60, 2);
        for i in 0..60 {
            let lw = params.log_weights(data.x_row(i)).unwrap();
            tau[(i, 0)] = lw[0].exp();
            tau[(i, 1)] = lw[1].exp();
        }
        let (weights, trace) = newton_weight_update(&params, &data, &tau, 5).unwrap();
        assert_eq!(weights[1].coeffs, params.weights()[1].coeffs);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn newton_surrogate_increases_on_separable_tau() {
        let data = line_data(100, 0.0, 1.0, 0.3, 19);
        let params = Mixture::new(
            vec![PolyFn::zero(1, 1); 2],
            vec![vec![PolyFn::constant(1, 0.0)]; 2],
            vec![DMatrix::identity(1, 1); 2],
        )
        .unwrap();
        let mut tau = DMatrix::zeros(100, 2);
        for i in 0..100 {
            let hot = usize::from(data.x_row(i)[0] > 0.5);
            tau[(i, hot)] = 1.0;
        }
        let (weights, trace) = newton_weight_update(&params, &data, &tau, 5).unwrap();
        assert!(trace.last().unwrap() > &trace[0]);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "surrogate decreased: {trace:?}");
        }
        // the gate should separate at x = 0.5: positive slope
        assert!(weights[1].coeffs[1] > 0.0);
    }

    #[test]
    fn newton_zero_steps_rejected() {
        let data = line_data(10, 0.0, 1.0, 0.1, 23);
        let params = crate::experiment::truth_density(crate::experiment::ExampleModel::P);
        let tau = DMatrix::from_element(10, 2, 0.5);
        assert!(newton_weight_update(&params, &data, &tau, 0).is_err());
    }

    #[test]
    fn newton_handles_singular_design() {
        // every covariate identical: the Hessian is rank-deficient and must
        // go through ridge rescue without panicking or decreasing Q
        let n = 30;
        let xs = vec![0.5; n];
        let ys: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let data = Dataset::new(1, 1, xs, ys).unwrap();
        let params = Mixture::new(
            vec![PolyFn::zero(1, 1); 2],
            vec![vec![PolyFn::constant(1, -1.0)], vec![PolyFn::constant(1, 1.0)]],
            vec![DMatrix::from_element(1, 1, 0.5); 2],
        )
        .unwrap();
        let tau = e_step(&params, &data).unwrap();
        let (_, trace) = newton_weight_update(&params, &data, &tau, 5).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn fit_k1_recovers_line_within_three_standard_errors() {
        let (a, b, sigma) = (1.0, 2.0, 0.5);
        let n = 400;
        let data = line_data(n, a, b, sigma, 29);
        let init = Mixture::new(
            vec![PolyFn::zero(1, 0)],
            vec![vec![PolyFn::new(1, 1, vec![0.0, 0.0]).unwrap()]],
            vec![DMatrix::identity(1, 1)],
        )
        .unwrap();
        let res = fit(&data, &spec_1d(1, 0, 1), &init, &FitConfig::default()).unwrap();
        // weighted-LS standard errors at the true parameters
        let (mut sxx, mut sx) = (0.0, 0.0);
        for i in 0..n {
            let x = data.x_row(i)[0];
            sxx += x * x;
            sx += x;
        }
        let nf = n as f64;
        let det = nf * sxx - sx * sx;
        let se0 = sigma * (sxx / det).sqrt();
        let se1 = sigma * (nf / det).sqrt();
        let coeffs = &res.params.means()[0][0].coeffs;
        assert!((coeffs[0] - a).abs() < 3.0 * se0, "intercept {} vs {a} (se {se0})", coeffs[0]);
        assert!((coeffs[1] - b).abs() < 3.0 * se1, "slope {} vs {b} (se {se1})", coeffs[1]);
    }

    #[test]
    fn fit_trace_is_monotone_on_random_data() {
        let mut rng = crate::seeding::rng_for(0xabcd, 0);
        for trial in 0..20 {
            let n = 150;
            let truth = crate::experiment::truth_density(if trial % 2 == 0 {
                crate::experiment::ExampleModel::P
            } else {
                crate::experiment::ExampleModel::NP
            });
            let data = truth.sample(n, rng.random()).unwrap();
            let k = 1 + (trial % 3);
            let init = crate::init::initialize(
                &data,
                &spec_1d(k, 1, 1),
                &crate::init::InitConfig {
                    n_trials: 5,
                    seed: rng.random(),
                    ..Default::default()
                },
            )
            .unwrap();
            let res = fit(&data, &spec_1d(k, 1, 1), &init, &FitConfig::default()).unwrap();
            for w in res.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "trace decreased: {:?}", res.loglik_trace);
            }
        }
    }

    #[test]
    fn fit_respects_variance_floor() {
        let data = line_data(200, 0.0, 1.0, 0.01, 31);
        let init = Mixture::new(
            vec![PolyFn::zero(1, 1); 2],
            vec![vec![PolyFn::constant(1, -0.2)], vec![PolyFn::constant(1, 0.2)]],
            vec![DMatrix::identity(1, 1); 2],
        )
        .unwrap();
        let cfg = FitConfig::default();
        let res = fit(&data, &spec_1d(2, 1, 1), &init, &cfg).unwrap();
        let floor = 10.0 / 200.0;
        for c in res.params.covs() {
            assert!(c[(0, 0)] >= floor - 1e-12);
        }
    }

    #[test]
    fn em_fixed_point_changes_loglik_below_1e9() {
        // identical components at the pooled weighted-LS optimum form an
        // exact stationary point: tau = pi rows, means/covs already optimal
        let data = line_data(120, 0.5, 1.5, 0.3, 37);
        let tau = DMatrix::from_element(120, 1, 1.0);
        let (means, covs) = m_step_means_covs(&data, &tau, 1, 1e-4).unwrap();
        let stationary = Mixture::new(
            vec![PolyFn::zero(1, 1); 2],
            vec![means[0].clone(), means[0].clone()],
            vec![covs[0].clone(), covs[0].clone()],
        )
        .unwrap();
        let cfg = FitConfig {
            variance_floor: VarianceFloorMode::Explicit(1e-4),
            ..FitConfig::default()
        }
        .fixed_steps(1);
        let res = fit(&data, &spec_1d(2, 1, 1), &stationary, &cfg).unwrap();
        assert!(
            (res.loglik_trace[1] - res.loglik_trace[0]).abs() < 1e-9,
            "trace: {:?}",
            res.loglik_trace
        );
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let truth = crate::experiment::truth_density(crate::experiment::ExampleModel::P);
        let data = truth.sample(300, 41).unwrap();
        let init = crate::init::initialize(
            &data,
            &spec_1d(2, 1, 1),
            &crate::init::InitConfig { n_trials: 3, seed: 4, ..Default::default() },
        )
        .unwrap();
        let relabeled = init.relabeled(&[1, 0]).unwrap();
        let cfg = FitConfig::default().fixed_steps(5);
        let a = fit(&data, &spec_1d(2, 1, 1), &init, &cfg).unwrap();
        let b = fit(&data, &spec_1d(2, 1, 1), &relabeled, &cfg).unwrap();
        for (x, y) in a.loglik_trace.iter().zip(&b.loglik_trace) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
        // fitted means swap with the relabeling
        let ma = &a.params.means()[0][0].coeffs;
        let mb = &b.params.means()[1][0].coeffs;
        for (x, y) in ma.iter().zip(mb) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }

    #[test]
    fn projection_mode_keeps_coefficients_bounded() {
        let truth = crate::experiment::truth_density(crate::experiment::ExampleModel::P);
        let data = truth.sample(300, 43).unwrap();
        let mut spec = spec_1d(2, 1, 1);
        spec.t_w = 2.0;
        spec.t_upsilon = 2.0;
        let init = crate::init::initialize(
            &data,
            &spec,
            &crate::init::InitConfig { n_trials: 3, seed: 6, ..Default::default() },
        )
        .unwrap();
        let cfg = FitConfig { enforce_coeff_bounds: true, ..FitConfig::default() };
        let res = fit(&data, &spec, &init, &cfg).unwrap();
        for w in res.params.weights() {
            assert!(w.coeffs.iter().all(|c| c.abs() <= 2.0 + 1e-12));
        }
        for m in res.params.means().iter().flatten() {
            assert!(m.coeffs.iter().all(|c| c.abs() <= 2.0 + 1e-12));
        }
        for w in res.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }
}
