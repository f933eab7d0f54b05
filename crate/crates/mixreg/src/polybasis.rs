//! Multivariate monomial basis on the covariate hypercube `[0,1]^d`.
//!
//! Weight functions and mean coordinates are polynomials `x ↦ Σ_{|r|≤D} α_r x^r`
//! over a fixed enumeration of multi-indices, sorted by total order then
//! lexicographically. The enumeration of `{r : |r| ≤ D}` has exactly
//! `binom(D+d, d)` elements, which is what the model dimension formulas count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for covariates nominally inside `[0,1]^d`.
pub const DOMAIN_TOL: f64 = 1e-12;

/// Exponent tuple of a single monomial `x^r`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    /// Total order `|r|`.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Evaluates the monomial `x^r`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.0.len(), x.len());
        self.0
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

/// Binomial coefficient with exact integer arithmetic.
pub fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// All multi-indices with `|r| ≤ max_degree` in `d` variables, sorted by
/// `(|r|, lexicographic exponents)`. Length is `binom(max_degree+d, d)`.
pub fn enumerate_multiindices(d: usize, max_degree: usize) -> Vec<MultiIndex> {
    assert!(d >= 1, "covariate dimension must be at least 1");
    let mut out = Vec::with_capacity(binom(max_degree + d, d));
    let mut cur = vec![0u32; d];
    for total in 0..=max_degree as u32 {
        push_order(&mut out, &mut cur, 0, total);
    }
    out
}

fn push_order(out: &mut Vec<MultiIndex>, cur: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = remaining;
        out.push(MultiIndex(cur.clone()));
        return;
    }
    for e in 0..=remaining {
        cur[pos] = e;
        push_order(out, cur, pos + 1, remaining - e);
    }
}

fn check_domain(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::InvalidModel(format!(
            "point has dimension {}, expected {}",
            x.len(),
            d
        )));
    }
    for (i, &xi) in x.iter().enumerate() {
        if !((-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&xi)) {
            return Err(Error::Domain { index: i, value: xi });
        }
    }
    Ok(())
}

/// Vector of monomials `x^r` in [`enumerate_multiindices`] order.
///
/// For any polynomial with coefficients in the same order,
/// `eval == dot(coeffs, basis_vector)`.
pub fn basis_vector(d: usize, max_degree: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_domain(x, d)?;
    let mut out = Vec::with_capacity(binom(max_degree + d, d));
    walk_monomials(x, max_degree, &mut |m| out.push(m));
    Ok(out)
}

/// Streams the monomials `x^r` in enumeration order without allocating.
/// The domain is not re-checked.
pub fn walk_monomials(x: &[f64], max_degree: usize, sink: &mut impl FnMut(f64)) {
    for total in 0..=max_degree as u32 {
        push_monomials(x, 0, total, 1.0, sink);
    }
}

fn push_monomials(x: &[f64], pos: usize, remaining: u32, prod: f64, sink: &mut impl FnMut(f64)) {
    if pos + 1 == x.len() {
        sink(prod * x[pos].powi(remaining as i32));
        return;
    }
    let mut pw = 1.0;
    for e in 0..=remaining {
        if e > 0 {
            pw *= x[pos];
        }
        push_monomials(x, pos + 1, remaining - e, prod * pw, sink);
    }
}

/// Polynomial on `[0,1]^d` with coefficients indexed by the multi-index
/// enumeration. `bound` is the sup-norm box on the coefficients, enforced
/// only when projection mode is active; construction never clamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFn {
    pub d: usize,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound: Option<f64>,
}

impl PolyFn {
    pub fn new(d: usize, degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        let expected = binom(degree + d, d);
        if coeffs.len() != expected {
            return Err(Error::InvalidModel(format!(
                "polynomial of degree {degree} in {d} variables needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidModel("non-finite polynomial coefficient".into()));
        }
        Ok(Self { d, degree, coeffs, bound: None })
    }

    /// The zero polynomial of the given shape.
    pub fn zero(d: usize, degree: usize) -> Self {
        Self { d, degree, coeffs: vec![0.0; binom(degree + d, d)], bound: None }
    }

    /// Constant polynomial of degree 0.
    pub fn constant(d: usize, value: f64) -> Self {
        Self { d, degree: 0, coeffs: vec![value], bound: None }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Clamps every coefficient into `[-bound, bound]` (projection mode).
    pub fn clamp_coeffs(&mut self, bound: f64) {
        for c in &mut self.coeffs {
            *c = c.clamp(-bound, bound);
        }
    }

    /// Evaluates `Σ_r α_r x^r` by walking the multi-index enumeration.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_domain(x, self.d)?;
        let idx = enumerate_multiindices(self.d, self.degree);
        Ok(idx
            .iter()
            .zip(&self.coeffs)
            .map(|(r, &a)| a * r.monomial(x))
            .sum())
    }
}
