//! Approximate moments of the frame-discretized 4-state model.
//!
//! The discretized cluster has no tractable closed-form law, so the fitting
//! objective uses approximations that replace the per-visit rounding errors by
//! the midpoints of their ranges. They become exact as the frame length goes
//! to zero.
//!
//! The characteristic function of the within-cluster lag distribution is
//! assembled as `(A + B C) / D`. Written naively, `A` and `B C` are ratios of
//! quantities vanishing like `v^2`; the forms below are algebraically
//! rearranged so that no first-order cancellation remains.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kinetics::KineticRates;
use crate::summaries::Curve;
use crate::{par, stats};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// e^{i theta} - 1
fn expm1_i(theta: f64) -> Complex64 {
    let s = (0.5 * theta).sin();
    Complex64::new(-2.0 * s * s, theta.sin())
}

/// e^{i theta} - 1 - i theta
fn expm1_minus_linear_i(theta: f64) -> Complex64 {
    let s = (0.5 * theta).sin();
    let im = if theta.abs() < 0.1 {
        let t2 = theta * theta;
        // sin(t) - t
        -theta * t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)))
    } else {
        theta.sin() - theta
    };
    Complex64::new(-2.0 * s * s, im)
}

/// The pieces of the approximate characteristic function at one `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiTerms {
    /// Pairs from the same fluorescent visit.
    pub a: Complex64,
    /// Pairs from different visits: the dark-time factor.
    pub b: Complex64,
    /// Pairs from different visits: the discretization factor.
    pub c: Complex64,
    /// Normalizer, E[G(G-1)] / 2 up to the frame-rounding approximation.
    pub d: f64,
}

impl PhiTerms {
    pub fn value(&self) -> Complex64 {
        (self.a + self.b * self.c) / self.d
    }
}

fn check_frame(frame_length: f64) -> Result<()> {
    if !(frame_length.is_finite() && frame_length > 0.0) {
        return Err(invalid("frame length must be positive"));
    }
    Ok(())
}

/// Normalizer `D`.
pub fn phi_normalizer(rates: &KineticRates, frame_length: f64) -> f64 {
    let m = rates.mean_on_time() / frame_length;
    rates.visits_second_moment() * (m + 0.5).powi(2) + rates.mean_visits() * (m * m - m - 0.5)
}

/// Evaluates `A`, `B`, `C`, `D` at `v != 0`. `B` and `C` individually blow up
/// or vanish as `v -> 0`; use [`phi`] for the (finite) combination.
pub fn phi_terms(rates: &KineticRates, frame_length: f64, v: f64) -> PhiTerms {
    let p = rates.bleach_probability();
    let q = 1.0 - p;
    let en = rates.mean_visits();
    let m = rates.mean_on_time() / frame_length;
    let m_r = rates.mean_dark_time() / frame_length;
    let x = v * frame_length;
    let y = I * x;

    let one_minus_ym = 1.0 - y * m;
    let phi_f = 1.0 / one_minus_ym;
    let phi_r = 1.0 / (1.0 - y * m_r);
    let w = phi_f * phi_r - 1.0;

    let e_half = expm1_i(-0.5 * x);
    let e_full = expm1_i(-x);
    let num_a = m * (y * y * m / one_minus_ym + 2.0 * expm1_minus_linear_i(-0.5 * x))
        + e_half * y * m / one_minus_ym
        + (m - 0.5) * e_half * e_half;
    let a = 2.0 * en * num_a / (e_full * e_full);

    let b = phi_r * q * w * w / (p * (p - q * w));
    let lead = (expm1_i(0.5 * x) + y * m) / one_minus_ym;
    let c = 2.0 * (-2.0 * y).exp() / (e_full * e_full) * (lead / w).powi(2);
    PhiTerms { a, b, c, d: phi_normalizer(rates, frame_length) }
}

/// Approximate characteristic function of the lag |m_j1 - m_j2| between two
/// distinct localizations of one cluster. `phi(0) = 1`.
pub fn phi(rates: &KineticRates, frame_length: f64, v: f64) -> Complex64 {
    if v == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let p = rates.bleach_probability();
    let q = 1.0 - p;
    let en = rates.mean_visits();
    let m = rates.mean_on_time() / frame_length;
    let m_r = rates.mean_dark_time() / frame_length;
    let x = v * frame_length;
    let y = I * x;

    let one_minus_ym = 1.0 - y * m;
    let phi_r = 1.0 / (1.0 - y * m_r);
    let w = phi_r / one_minus_ym - 1.0;

    let e_half = expm1_i(-0.5 * x);
    let e_full2 = expm1_i(-x).powi(2);
    let num_a = m * (y * y * m / one_minus_ym + 2.0 * expm1_minus_linear_i(-0.5 * x))
        + e_half * y * m / one_minus_ym
        + (m - 0.5) * e_half * e_half;
    let a = 2.0 * en * num_a / e_full2;

    // B C with the common factor w^2 cancelled
    let lead = (expm1_i(0.5 * x) + y * m) / one_minus_ym;
    let bc = phi_r * q / (p * (p - q * w)) * 2.0 * (-2.0 * y).exp() * lead * lead / e_full2;

    (a + bc) / phi_normalizer(rates, frame_length)
}

/// E[z^N] for N geometric on {1, 2, ...} with success probability `p`.
pub fn geometric_pgf(p: f64, z: Complex64) -> Complex64 {
    p * z / (1.0 - (1.0 - p) * z)
}

/// Truncated series for [`geometric_pgf`]; used to verify the closed form.
pub fn geometric_pgf_series(p: f64, z: Complex64, terms: usize) -> Complex64 {
    let q = 1.0 - p;
    let mut acc = Complex64::new(0.0, 0.0);
    let mut zn = z;
    let mut qn = 1.0;
    for _ in 0..terms {
        acc += p * qn * zn;
        zn *= z;
        qn *= q;
    }
    acc
}

/// Quadrature settings for CDF inversion: midpoint nodes `(k + 1/2) h` for
/// `(k + 1/2) h < v_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionGrid {
    pub step: f64,
    pub v_max: f64,
}

impl InversionGrid {
    /// Step `pi / (4 u_max)`: the quadrature aliases mass from `8 u_max` away.
    pub fn for_span(u_max: f64, v_max: f64) -> Result<Self> {
        if !(u_max.is_finite() && u_max > 0.0) {
            return Err(invalid("inversion span must be positive"));
        }
        if !(v_max.is_finite() && v_max > 0.0) {
            return Err(invalid("inversion cutoff must be positive"));
        }
        Ok(Self { step: PI / (4.0 * u_max), v_max })
    }

    /// Grid for the lag law of a model with frame length `frame_length`. The
    /// approximation has poles at multiples of `2 pi / frame_length`, so the
    /// integral stops at `pi / frame_length`.
    pub fn for_lags(u_max: f64, frame_length: f64) -> Result<Self> {
        check_frame(frame_length)?;
        Self::for_span(u_max, PI / frame_length)
    }

    fn nodes(&self) -> usize {
        ((self.v_max / self.step - 0.5).floor() as usize + 1).max(1)
    }
}

/// Inverts a characteristic function to CDF values at `us` with the
/// midpoint rule for Gil-Pelaez's formula. Raw values: no clamping.
pub fn invert_cf<F>(cf: F, us: &[f64], grid: InversionGrid) -> Vec<f64>
where
    F: Fn(f64) -> Complex64,
{
    let nodes: Vec<(f64, Complex64)> = (0..grid.nodes())
        .map(|k| {
            let kk = k as f64 + 0.5;
            (kk, cf(kk * grid.step))
        })
        .collect();
    us.iter()
        .map(|&u| {
            let s: f64 = nodes
                .iter()
                .map(|&(kk, c)| {
                    let (sin, cos) = (kk * grid.step * u).sin_cos();
                    // Im[e^{-i v u} c]
                    (cos * c.im - sin * c.re) / kk
                })
                .sum();
            0.5 - s / PI
        })
        .collect()
}

/// Clamps CDF values to [0, 1] and makes them nondecreasing.
pub fn to_valid_cdf(values: &[f64]) -> Vec<f64> {
    stats::isotonic_increasing(values).into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Cached evaluator of the within-cluster lag CDF on a fixed lag grid.
/// The trigonometric table depends only on the grid, so it is shared across
/// the many rate vectors visited by the optimizer.
#[derive(Debug, Clone)]
pub struct Gamma1Evaluator {
    us: Vec<f64>,
    frame_length: f64,
    v: Vec<f64>,
    weight: Vec<f64>,
    /// sin(v_k u_j), cos(v_k u_j), row-major by u.
    trig: Vec<(f64, f64)>,
}

impl Gamma1Evaluator {
    pub fn new(us: &[f64], frame_length: f64) -> Result<Self> {
        if us.is_empty() || us.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(invalid("lag grid must be nonempty and nonnegative"));
        }
        let u_max = us.iter().cloned().fold(0.0, f64::max).max(frame_length);
        let grid = InversionGrid::for_lags(u_max, frame_length)?;
        let n = grid.nodes();
        let v: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) * grid.step).collect();
        let weight = (0..n).map(|k| 1.0 / (PI * (k as f64 + 0.5))).collect();
        let trig = us.iter().flat_map(|&u| v.iter().map(move |&vk| (vk * u).sin_cos())).collect();
        Ok(Self { us: us.to_vec(), frame_length, v, weight, trig })
    }

    pub fn lags(&self) -> &[f64] {
        &self.us
    }

    /// Raw inversion values, before projection onto valid CDFs.
    pub fn raw(&self, rates: &KineticRates) -> Vec<f64> {
        let cf: Vec<Complex64> = self
            .v
            .iter()
            .zip(&self.weight)
            .map(|(&v, &w)| w * phi(rates, self.frame_length, v))
            .collect();
        let n = self.v.len();
        (0..self.us.len())
            .map(|j| {
                let row = &self.trig[j * n..(j + 1) * n];
                let s: f64 = row.iter().zip(&cf).map(|(&(sin, cos), c)| cos * c.im - sin * c.re).sum();
                0.5 - s
            })
            .collect()
    }

    /// CDF values at the lag grid.
    pub fn evaluate(&self, rates: &KineticRates) -> Vec<f64> {
        to_valid_cdf(&self.raw(rates))
    }

    /// Size of the last quadrature term, a rough measure of the truncation
    /// error.
    pub fn tail_estimate(&self, rates: &KineticRates) -> f64 {
        let k = self.v.len() - 1;
        self.weight[k] * phi(rates, self.frame_length, self.v[k]).norm()
    }
}

/// CDF of the within-cluster lag at each u in `us`, as a curve over `us`
/// (ascending, distinct).
pub fn gamma1_pu(rates: &KineticRates, frame_length: f64, us: &[f64]) -> Result<Curve> {
    rates.validate()?;
    let eval = Gamma1Evaluator::new(us, frame_length)?;
    Curve::new(us.to_vec(), eval.evaluate(rates))
}

/// Approximate moments of the cluster size G.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GMoments {
    pub mean: f64,
    pub second_moment: f64,
    /// E[G^2] / E[G] - 1
    pub nc: f64,
    /// E[(1 - X) 1(X <= 1)], X the dark time in frames.
    pub mu_r1: f64,
    /// E[(1 - X)^2 1(X <= 1)]
    pub mu_r2: f64,
}

/// First two truncated moments of `1 - X`, X ~ Exp(rho), on X <= 1.
pub fn dark_rounding_moments(rho: f64) -> (f64, f64) {
    if rho < 1e-3 {
        let mu1 = rho / 2.0 - rho * rho / 6.0 + rho.powi(3) / 24.0 - rho.powi(4) / 120.0;
        let mu2 = rho / 3.0 - rho * rho / 12.0 + rho.powi(3) / 60.0 - rho.powi(4) / 360.0;
        (mu1, mu2)
    } else {
        let mu1 = 1.0 + (-rho).exp_m1() / rho;
        (mu1, 1.0 - 2.0 * mu1 / rho)
    }
}

pub fn g_moments(rates: &KineticRates, frame_length: f64) -> Result<GMoments> {
    rates.validate()?;
    check_frame(frame_length)?;
    let en = rates.mean_visits();
    let en2 = rates.visits_second_moment();
    let enn1 = rates.visits_factorial_moment();
    let m = rates.mean_on_time() / frame_length;
    let (mu1, mu2) = dark_rounding_moments(rates.dark_return * frame_length);
    let mean = en * (m + 1.0) - (en - 1.0) * mu1;
    let second = en2 * (m + 1.0).powi(2) + en * m * m + (en2 - 2.0 * en + 1.0) * mu1 * mu1
        + (en - 1.0) * (mu2 - mu1 * mu1)
        - 2.0 * enn1 * (m + 1.0) * mu1;
    Ok(GMoments { mean, second_moment: second, nc: second / mean - 1.0, mu_r1: mu1, mu_r2: mu2 })
}

/// Limit of `frame_length * nc` as the frame length goes to zero (seconds).
pub fn nc_asymptotic(rates: &KineticRates) -> Result<f64> {
    rates.validate()?;
    let en = rates.mean_visits();
    let ew = rates.mean_on_time();
    Ok((en * rates.on_time_second_moment() + rates.visits_factorial_moment() * ew * ew) / (en * ew))
}

/// The two correction terms (seconds) relating the mean localization time of
/// a cluster to its activation time: E[W_I] ~ E[T] - A2 - B2.
pub fn a2_b2(rates: &KineticRates, frame_length: f64) -> Result<(f64, f64)> {
    rates.validate()?;
    check_frame(frame_length)?;
    let ew = rates.mean_on_time();
    let m = ew / frame_length;
    let en = rates.mean_visits();
    let a2 = (rates.on_time_second_moment() / (2.0 * frame_length) + ew + 3.0 * frame_length / 8.0) / (m + 0.5);
    let b2 = (m + 0.5) * (0.5 * rates.visits_factorial_moment() * (ew + rates.mean_dark_time()) + en * frame_length / 2.0)
        / (en * (m + 0.5));
    if !(a2.is_finite() && b2.is_finite()) {
        return Err(Error::DegenerateFit(format!("non-finite time corrections at {rates:?}")));
    }
    Ok((a2, b2))
}

/// Evaluates [`phi`] on a grid, e.g. for export.
pub fn phi_curve(rates: &KineticRates, frame_length: f64, vs: &[f64]) -> Vec<Complex64> {
    par::map_slice(vs, |&v| phi(rates, frame_length, v))
}
