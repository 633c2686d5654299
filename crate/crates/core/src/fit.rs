//! Stepwise estimation of the blinking rates from a localization table.
//!
//! 1. signal fraction from the background-only regions,
//! 2. localization-error autoconvolution from the recorded uncertainties,
//! 3. distance grid, pair correlation and lag-threshold mark statistics,
//! 4. per-lag cluster weights by projection onto the autoconvolution,
//! 5. minimum-contrast fit of (dark entry, dark return, bleach) on a wide
//!    lag grid, then again on a grid adapted to the provisional fit,
//! 6. activation rate from the mean arrival time, with a correction for
//!    recordings stopped before every fluorophore activated,
//! 7. derived descriptors.
//!
//! Every stage is a pure function of the dataset, the configuration and the
//! seed.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kinetics::{lifetime_quantiles, BlinkModel, KineticRates};
use crate::moments::{a2_b2, g_moments, Gamma1Evaluator};
use crate::optimize::{latin_hypercube, nelder_mead, Minimum, NelderMeadOptions};
use crate::spatial_sim::{autoconv_from_pairs, Dataset, SigmaSampler};
use crate::summaries::{
    gamma2_hat_many, gamma2o_hat_many, min_nn_distance, mz1_hat, stoyan_bandwidth, Curve, EdgeCorrection, PairTable,
};
use crate::summaries::gamma2d_hat;
use crate::{par, rng, stats};

/// How the upper end of the distance grid is found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RThreshold {
    /// First r where the autoconvolution drops below this fraction of its
    /// value at 0.
    Relative(f64),
    /// First r where the autoconvolution drops below this density (1/nm^2).
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Kernel half-width (nm); the rule-of-thumb value when absent.
    pub bandwidth: Option<f64>,
    pub edge_correction: EdgeCorrection,
    /// Common box for the three fitted rates (1/s).
    pub rate_lower: f64,
    pub rate_upper: f64,
    /// Upper limit on frame_length * (dark_entry + bleach).
    pub max_frame_exit: f64,
    pub initial_u_max: f64,
    pub initial_u_points: usize,
    pub final_u_points: usize,
    /// The final lag grid ends where the fitted lag CDF first exceeds this.
    pub final_u_level: f64,
    pub r_threshold: RThreshold,
    pub max_r_points: usize,
    pub autoconv_pairs: usize,
    pub multistarts: usize,
    pub optimizer: NelderMeadOptions,
    pub quantile_samples: usize,
    /// Below this raw signal fraction the fit is declared degenerate.
    pub min_eta: f64,
    /// Lower clamp for the signal fraction used in divisions.
    pub eta_floor: f64,
    /// Fewer window points than this triggers a low-power warning.
    pub low_power_count: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            bandwidth: None,
            edge_correction: EdgeCorrection::Translation,
            rate_lower: 1e-3,
            rate_upper: 50.0,
            max_frame_exit: 2.0,
            initial_u_max: 60.0,
            initial_u_points: 30,
            final_u_points: 50,
            final_u_level: 0.99,
            r_threshold: RThreshold::Relative(1e-3),
            max_r_points: 2000,
            autoconv_pairs: 100_000,
            multistarts: 8,
            optimizer: NelderMeadOptions { max_evaluations: 1500, f_tolerance: 1e-10, x_tolerance: 1e-6, initial_step: 0.1 },
            quantile_samples: 100_000,
            min_eta: 0.05,
            eta_floor: 0.01,
            low_power_count: 200,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(bw) = self.bandwidth {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(invalid("bandwidth must be positive"));
            }
        }
        if !(self.rate_lower > 0.0 && self.rate_upper > self.rate_lower && self.rate_upper.is_finite()) {
            return Err(invalid("rate bounds must satisfy 0 < lower < upper"));
        }
        if !(self.max_frame_exit > 0.0) {
            return Err(invalid("max_frame_exit must be positive"));
        }
        if !(self.initial_u_max > 0.0) {
            return Err(invalid("initial lag span must be positive"));
        }
        if self.initial_u_points < 3 || self.final_u_points < 3 {
            return Err(invalid("lag grids need at least 3 points"));
        }
        if !(self.final_u_level > 0.0 && self.final_u_level < 1.0) {
            return Err(invalid("final_u_level must be in (0, 1)"));
        }
        let t = match self.r_threshold {
            RThreshold::Relative(t) | RThreshold::Absolute(t) => t,
        };
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid("r threshold must be positive"));
        }
        if matches!(self.r_threshold, RThreshold::Relative(t) if t >= 1.0) {
            return Err(invalid("relative r threshold must be below 1"));
        }
        if self.max_r_points < 2 || self.autoconv_pairs == 0 || self.multistarts == 0 {
            return Err(invalid("grid sizes, pair count and multistarts must be positive"));
        }
        if self.quantile_samples < 10_000 {
            return Err(invalid("quantile_samples must be at least 10^4"));
        }
        if !(self.eta_floor > 0.0 && self.eta_floor <= 1.0 && self.min_eta >= 0.0) {
            return Err(invalid("eta guards must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Signal-fraction estimate and the intensities it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    /// Clamped to [0, 1].
    pub eta: f64,
    pub raw: f64,
    pub lambda_o: f64,
    pub lambda_e: f64,
    pub warning: Option<String>,
}

/// Signal fraction 1 - lambda_E / lambda_O from the noise regions.
pub fn estimate_eta(dataset: &Dataset) -> Result<EtaEstimate> {
    let lambda_o = dataset.roi_count() as f64 / dataset.window.area();
    if lambda_o <= 0.0 {
        return Err(Error::InsufficientData("no localizations in the window".into()));
    }
    let area = dataset.noise_area();
    if area <= 0.0 {
        return Ok(EtaEstimate {
            eta: 1.0,
            raw: 1.0,
            lambda_o,
            lambda_e: 0.0,
            warning: Some("no noise region; signal fraction set to 1".into()),
        });
    }
    let lambda_e = dataset.noise_count() as f64 / area;
    let raw = 1.0 - lambda_e / lambda_o;
    Ok(EtaEstimate { eta: raw.clamp(0.0, 1.0), raw, lambda_o, lambda_e, warning: None })
}

/// Monte Carlo estimate of the localization-error autoconvolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoconvolution {
    sum_squares: Vec<f64>,
}

impl Autoconvolution {
    /// Draws `pairs` uncertainty pairs with replacement from `sigmas`.
    pub fn from_sigmas(sigmas: &[f64], pairs: usize, seed: u64) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::InsufficientData("need at least 2 uncertainties".into()));
        }
        if sigmas.iter().all(|s| *s == 0.0) {
            return Err(invalid("all uncertainties are zero"));
        }
        let sampler = SigmaSampler::Empirical { values: sigmas.to_vec() };
        let sum_squares = crate::spatial_sim::sigma_pair_sum_squares(&sampler, pairs, seed)?;
        Ok(Self { sum_squares })
    }

    pub fn at(&self, rs: &[f64]) -> Vec<f64> {
        autoconv_from_pairs(&self.sum_squares, rs)
    }

    pub fn curve(&self, rs: &[f64]) -> Result<Curve> {
        Curve::new(rs.to_vec(), self.at(rs))
    }

    /// Root mean of the summed variances, a length scale for searches.
    fn scale(&self) -> f64 {
        stats::mean(&self.sum_squares).sqrt()
    }
}

/// Autoconvolution curve on `rs` from `pairs` random uncertainty pairs.
pub fn estimate_autoconv(sigmas: &[f64], rs: &[f64], pairs: usize, seed: u64) -> Result<Curve> {
    Autoconvolution::from_sigmas(sigmas, pairs, seed)?.curve(rs)
}

/// Distance grid with any warning raised while building it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RGrid {
    pub grid: Vec<f64>,
    pub crossing: Option<f64>,
    pub warning: Option<String>,
}

/// First r at which the decreasing function `f` drops below `level`, found
/// by doubling from `scale` then bisecting.
fn first_crossing(f: &dyn Fn(f64) -> f64, level: f64, scale: f64) -> Option<f64> {
    if f(0.0) < level {
        return None;
    }
    let mut hi = scale;
    let mut lo = 0.0;
    let mut steps = 0;
    while f(hi) >= level {
        lo = hi;
        hi *= 2.0;
        steps += 1;
        if steps > 200 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= level {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Some(hi)
}

/// Evenly spaced grid from `2 * bandwidth` to the autoconvolution threshold
/// crossing, with step `nn_step` (coarsened to at most `max_points`).
pub fn select_r(
    bandwidth: f64,
    nn_step: f64,
    autoconv: &dyn Fn(f64) -> f64,
    scale: f64,
    threshold: RThreshold,
    max_points: usize,
) -> Result<RGrid> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(invalid("bandwidth must be positive"));
    }
    let level = match threshold {
        RThreshold::Relative(t) => t * autoconv(0.0),
        RThreshold::Absolute(t) => t,
    };
    let lower = 2.0 * bandwidth;
    let crossing = first_crossing(autoconv, level, scale.max(bandwidth));
    let (lo, hi, warning) = match crossing {
        Some(c) if c > lower => (lower, c, None),
        _ => (
            lower,
            4.0 * bandwidth,
            Some(format!(
                "autoconvolution threshold crossing {crossing:?} is not above 2 * bandwidth = {lower}; using [2bw, 4bw]"
            )),
        ),
    };
    let mut step = if nn_step > 0.0 && nn_step.is_finite() { nn_step } else { (hi - lo) / 500.0 };
    let mut count = ((hi - lo) / step * (1.0 + 1e-12)).floor() as usize + 1;
    if count > max_points {
        step = (hi - lo) / (max_points - 1) as f64;
        count = max_points;
    }
    let grid = (0..count).map(|k| lo + k as f64 * step).collect();
    Ok(RGrid { grid, crossing, warning })
}

/// Least-squares weight of the autoconvolution in the residual
/// `K - gamma2 (g - 1) - gamma2o`, scaled by lambda_o / eta.
#[allow(clippy::too_many_arguments)]
pub fn zeta_hat(
    k_curve: &[f64],
    pcf: &[f64],
    autoconv: &[f64],
    gamma2: f64,
    gamma2o: f64,
    lambda_o: f64,
    eta: f64,
) -> Result<f64> {
    if k_curve.len() != pcf.len() || pcf.len() != autoconv.len() {
        return Err(invalid("curves must share the distance grid"));
    }
    let denom: f64 = autoconv.iter().map(|h| h * h).sum();
    if !(denom > 0.0) {
        return Err(Error::DegenerateFit("autoconvolution vanishes on the distance grid".into()));
    }
    let num: f64 = k_curve
        .iter()
        .zip(pcf)
        .zip(autoconv)
        .map(|((k, g), h)| (k - gamma2 * (g - 1.0) - gamma2o) * h)
        .sum();
    Ok(lambda_o / eta * num / denom)
}

/// Everything the rate objective needs for one lag grid.
#[derive(Debug, Clone)]
pub struct ZetaData {
    pub us: Vec<f64>,
    pub zeta: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub gamma2o: Vec<f64>,
}

/// Fitted (dark entry, dark return, bleach) with optimizer details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub dark_entry: f64,
    pub dark_return: f64,
    pub bleach: f64,
    pub objective: f64,
    pub starts: usize,
    pub converged_starts: usize,
    pub evaluations: usize,
    pub best_start: usize,
}

impl RateFit {
    pub fn rates(&self, activation: f64) -> KineticRates {
        KineticRates { activation, dark_entry: self.dark_entry, dark_return: self.dark_return, bleach: self.bleach }
    }
}

/// The minimum-contrast objective on one lag grid.
pub struct RateObjective<'a> {
    data: &'a ZetaData,
    gamma1: Gamma1Evaluator,
    frame_length: f64,
    max_frame_exit: f64,
}

impl<'a> RateObjective<'a> {
    pub fn new(data: &'a ZetaData, frame_length: f64, max_frame_exit: f64) -> Result<Self> {
        if data.us.len() < 3 {
            return Err(invalid("rate fit needs at least 3 lags"));
        }
        Ok(Self { data, gamma1: Gamma1Evaluator::new(&data.us, frame_length)?, frame_length, max_frame_exit })
    }

    /// Model weights (gamma1 - gamma2) * nc at `rates`.
    pub fn model(&self, rates: &KineticRates) -> Result<Vec<f64>> {
        let nc = g_moments(rates, self.frame_length)?.nc;
        Ok(self.gamma1.evaluate(rates).iter().zip(&self.data.gamma2).map(|(g1, g2)| (g1 - g2) * nc).collect())
    }

    pub fn value(&self, rates: &KineticRates) -> f64 {
        let excess = self.frame_length * rates.fluorescent_exit_rate() - self.max_frame_exit;
        if excess > 0.0 {
            return 1e12 * (1.0 + excess);
        }
        match self.model(rates) {
            Ok(m) => m.iter().zip(&self.data.zeta).map(|(m, z)| (z - m).powi(2)).sum(),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn gamma1(&self, rates: &KineticRates) -> Vec<f64> {
        self.gamma1.evaluate(rates)
    }
}

fn rates_from_log(theta: &[f64]) -> KineticRates {
    KineticRates { activation: 1.0, dark_entry: theta[0].exp(), dark_return: theta[1].exp(), bleach: theta[2].exp() }
}

/// Minimizes the contrast between the per-lag weights and the model over
/// the rate box, from `config.multistarts` Latin-hypercube starts in log
/// space.
pub fn fit_rates(data: &ZetaData, frame_length: f64, config: &FitConfig, seed: u64) -> Result<RateFit> {
    config.validate()?;
    let objective = RateObjective::new(data, frame_length, config.max_frame_exit)?;
    let lo = config.rate_lower.ln();
    let hi = config.rate_upper.ln();
    let lower = [lo; 3];
    let upper = [hi; 3];
    let mut r = rng::stream(seed, 0);
    let starts: Vec<Vec<f64>> = latin_hypercube(config.multistarts, 3, &mut r)
        .into_iter()
        .map(|u| {
            let mut theta: Vec<f64> = u.iter().map(|x| lo + x * (hi - lo)).collect();
            // pull infeasible starts back inside the frame-rate constraint
            let exit = theta[0].exp() + theta[2].exp();
            let cap = 0.9 * config.max_frame_exit / frame_length;
            if exit > cap {
                let shift = (cap / exit).ln();
                theta[0] = (theta[0] + shift).max(lo);
                theta[2] = (theta[2] + shift).max(lo);
            }
            theta
        })
        .collect();
    let runs: Vec<Result<Minimum>> = par::map_slice(&starts, |s| {
        nelder_mead(|t| objective.value(&rates_from_log(t)), s, &lower, &upper, &config.optimizer)
    });
    let mut best: Option<(usize, Minimum)> = None;
    let mut evaluations = 0;
    let mut converged = 0;
    for (i, run) in runs.into_iter().enumerate() {
        let m = run?;
        evaluations += m.evaluations;
        converged += m.converged as usize;
        if !m.value.is_finite() || m.value >= 1e12 {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| m.value < b.value) {
            best = Some((i, m));
        }
    }
    let (best_start, m) = best.ok_or_else(|| Error::Optimizer("no start reached a feasible finite objective".into()))?;
    let r = rates_from_log(&m.x);
    Ok(RateFit {
        dark_entry: r.dark_entry,
        dark_return: r.dark_return,
        bleach: r.bleach,
        objective: m.value,
        starts: config.multistarts,
        converged_starts: converged,
        evaluations,
        best_start,
    })
}

/// Mean of Exp(x) conditioned on being at most `b`.
fn truncated_exp_mean(x: f64, b: f64) -> f64 {
    let y = x * b;
    if y < 1e-4 {
        b * (0.5 - y / 12.0 + y.powi(3) / 720.0)
    } else {
        1.0 / x - b / y.exp_m1()
    }
}

/// Activation rate whose waiting time, conditioned on falling inside a
/// recording of length `b`, has mean `1 / rf`. Bisection on [1e-8, 10].
pub fn censoring_corrected_rate(rf: f64, b: f64) -> Result<(f64, Option<String>)> {
    if !(rf > 0.0 && b > 0.0) {
        return Err(invalid("activation rate and duration must be positive"));
    }
    let target = 1.0 / rf;
    let (mut lo, mut hi) = (1e-8, 10.0);
    if truncated_exp_mean(lo, b) <= target {
        return Ok((lo, Some("mean activation time at or beyond b / 2; corrected rate at lower bracket".into())));
    }
    if truncated_exp_mean(hi, b) >= target {
        return Ok((hi, Some("corrected activation rate at upper bracket".into())));
    }
    while hi - lo > 1e-8 * lo {
        let mid = 0.5 * (lo + hi);
        if truncated_exp_mean(mid, b) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi), None))
}

/// Raw and censoring-corrected activation rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEstimate {
    pub rate: f64,
    pub corrected: f64,
    pub mean_time: f64,
    pub a2: f64,
    pub b2: f64,
    pub warning: Option<String>,
}

pub fn estimate_rf(
    times: &[f64],
    eta: f64,
    fitted: &KineticRates,
    frame_length: f64,
    duration: f64,
) -> Result<ActivationEstimate> {
    let mean_time = gamma2d_hat(times, eta, duration)?;
    let (a2, b2) = a2_b2(fitted, frame_length)?;
    let wait = mean_time - a2 - b2;
    if !(wait > 0.0) {
        return Err(Error::DegenerateFit(format!(
            "mean arrival time {mean_time} does not exceed the within-cluster offset {}",
            a2 + b2
        )));
    }
    let rate = 1.0 / wait;
    let (corrected, warning) = censoring_corrected_rate(rate, duration)?;
    Ok(ActivationEstimate { rate, corrected, mean_time, a2, b2, warning })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    pub mean_cluster_size: f64,
    pub bleach_probability: f64,
    /// Activation-to-bleach time quantiles at 0.25, 0.5, 0.75, 0.99 (s).
    pub lifetime_quantiles: [f64; 4],
    /// Proteins seen in the window during the recording.
    pub proteins_observed: f64,
    /// Proteins in the window including those never activated.
    pub proteins_total: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn derived_descriptors(
    rates: &KineticRates,
    corrected_rf: f64,
    eta: f64,
    lambda_o: f64,
    area: f64,
    duration: f64,
    frame_length: f64,
    quantile_samples: usize,
    seed: u64,
) -> Result<Descriptors> {
    let g = g_moments(rates, frame_length)?;
    if !(g.mean > 0.0) {
        return Err(Error::DegenerateFit("non-positive mean cluster size".into()));
    }
    let exposure = corrected_rf * duration;
    if !(exposure > 0.0) {
        return Err(invalid("corrected activation rate times duration must be positive"));
    }
    let observed = eta * lambda_o * area / g.mean;
    Ok(Descriptors {
        mean_cluster_size: g.mean,
        bleach_probability: rates.bleach_probability(),
        lifetime_quantiles: lifetime_quantiles(&BlinkModel::FourState(*rates), quantile_samples, seed)?,
        proteins_observed: observed,
        proteins_total: observed / -(-exposure).exp_m1(),
    })
}

/// A lag grid with its per-lag weights and the fitted model values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagStage {
    pub us: Vec<f64>,
    pub zeta: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub gamma2o: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub model: Vec<f64>,
    pub fit: RateFit,
}

/// Intermediate results, filled in as the pipeline advances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub roi_count: usize,
    pub noise_count: usize,
    pub eta: Option<EtaEstimate>,
    pub bandwidth: Option<f64>,
    pub min_nn_distance: Option<f64>,
    pub r_grid: Option<RGrid>,
    pub autoconv: Option<Curve>,
    pub pcf: Option<Curve>,
    pub initial: Option<LagStage>,
    pub u_star: Option<f64>,
    pub final_stage: Option<LagStage>,
    /// Pearson correlation of the final weights with the fitted model.
    pub model_correlation: Option<f64>,
    pub gamma1_tail: Option<f64>,
    pub activation: Option<ActivationEstimate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub eta: f64,
    pub lambda_o: f64,
    pub activation_rate: f64,
    pub activation_rate_corrected: f64,
    pub dark_entry: f64,
    pub dark_return: f64,
    pub bleach: f64,
    pub descriptors: Descriptors,
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    /// Fitted rates with the censoring-corrected activation rate.
    pub fn rates(&self) -> KineticRates {
        KineticRates {
            activation: self.activation_rate_corrected,
            dark_entry: self.dark_entry,
            dark_return: self.dark_return,
            bleach: self.bleach,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStage {
    Config,
    SignalFraction,
    Autoconvolution,
    DistanceGrid,
    PairStatistics,
    InitialFit,
    FinalFit,
    ActivationRate,
    Descriptors,
}

/// A pipeline failure with the stage it happened in and whatever was
/// computed before.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub stage: FitStage,
    pub error: Error,
    pub partial: Box<Diagnostics>,
}

impl std::fmt::Display for FitFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fit failed at {:?}: {}", self.stage, self.error)
    }
}

impl std::error::Error for FitFailure {}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Everything computed from the dataset before any rates are fitted:
/// signal fraction, autoconvolution, distance grid, pair table, pair
/// correlation and the signal arrival-time CDF.
pub struct SummaryContext {
    pub eta: EtaEstimate,
    /// Signal fraction used in divisions (clamped away from 0).
    pub eta_used: f64,
    pub bandwidth: f64,
    pub r_grid: RGrid,
    pub autoconv: Curve,
    pub pcf: Curve,
    table: PairTable,
    times: Vec<f64>,
    cdf: crate::summaries::StepCdf,
}

impl SummaryContext {
    /// Runs the rate-free stages. On success the returned diagnostics hold
    /// the intermediate curves and any warnings so far.
    pub fn build(
        dataset: &Dataset,
        config: &FitConfig,
        seed: u64,
    ) -> std::result::Result<(Self, Diagnostics), FitFailure> {
        let mut diag =
            Diagnostics { roi_count: dataset.roi_count(), noise_count: dataset.noise_count(), ..Default::default() };
        macro_rules! stage {
            ($stage:expr, $e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(error) => return Err(FitFailure { stage: $stage, error, partial: Box::new(diag) }),
                }
            };
        }
        stage!(FitStage::Config, config.validate().and_then(|_| dataset.validate()));

        let eta = stage!(FitStage::SignalFraction, estimate_eta(dataset));
        diag.eta = Some(eta.clone());
        if let Some(w) = &eta.warning {
            diag.warnings.push(w.clone());
        }
        if diag.roi_count < config.low_power_count {
            diag.warnings.push(format!("only {} localizations in the window; estimates will be noisy", diag.roi_count));
        }
        if eta.raw < config.min_eta {
            stage!(
                FitStage::SignalFraction,
                Err(Error::DegenerateFit(format!("signal fraction {:.4} is below {}", eta.raw, config.min_eta)))
            );
        }
        let eta_used = eta.eta.clamp(config.eta_floor, 1.0);

        let roi: Vec<crate::Localization> = dataset.roi().copied().collect();
        if roi.len() < 2 {
            stage!(
                FitStage::SignalFraction,
                Err(Error::InsufficientData("fewer than 2 localizations in the window".into()))
            );
        }
        let sigmas: Vec<f64> = roi.iter().map(|l| l.sigma).collect();
        let ac = stage!(
            FitStage::Autoconvolution,
            Autoconvolution::from_sigmas(&sigmas, config.autoconv_pairs, rng::derive_seed(seed, 0))
        );

        let bandwidth = config.bandwidth.unwrap_or_else(|| stoyan_bandwidth(roi.len(), dataset.window.area()));
        diag.bandwidth = Some(bandwidth);
        let points: Vec<[f64; 2]> = roi.iter().map(|l| [l.x, l.y]).collect();
        let nn = stage!(FitStage::DistanceGrid, min_nn_distance(&points));
        diag.min_nn_distance = Some(nn);
        let f = |r: f64| ac.at(&[r])[0];
        let r_grid = stage!(
            FitStage::DistanceGrid,
            select_r(bandwidth, nn, &f, ac.scale(), config.r_threshold, config.max_r_points)
        );
        if let Some(w) = &r_grid.warning {
            diag.warnings.push(w.clone());
        }
        diag.r_grid = Some(r_grid.clone());
        let rs = r_grid.grid.clone();
        let autoconv = stage!(FitStage::Autoconvolution, ac.curve(&rs));
        diag.autoconv = Some(autoconv.clone());

        let r_max = rs.iter().cloned().fold(f64::MIN, f64::max);
        let table = stage!(
            FitStage::PairStatistics,
            PairTable::build(&roi, &dataset.window, r_max + bandwidth, config.edge_correction)
        );
        let pcf = stage!(FitStage::PairStatistics, table.pcf(&rs, bandwidth));
        diag.pcf = Some(pcf.clone());
        let times: Vec<f64> = roi.iter().map(|l| l.t).collect();
        let cdf = stage!(FitStage::PairStatistics, mz1_hat(&times, eta_used, dataset.duration));
        Ok((Self { eta, eta_used, bandwidth, r_grid, autoconv, pcf, table, times, cdf }, diag))
    }

    /// Lag-threshold mark statistics, one curve over the distance grid per u.
    pub fn lag_markstats(&self, us: &[f64]) -> Result<Vec<Curve>> {
        self.table.lag_markstats(us, &self.r_grid.grid, self.bandwidth)
    }

    /// Per-lag cluster weights and the rate-free lag terms on `us`.
    pub fn zeta_data(&self, us: &[f64]) -> Result<ZetaData> {
        let ks = self.lag_markstats(us)?;
        let gamma2 = gamma2_hat_many(&self.cdf, us);
        let gamma2o = gamma2o_hat_many(&self.times, us)?;
        let zeta = ks
            .iter()
            .zip(gamma2.iter().zip(&gamma2o))
            .map(|(k, (&g2, &g2o))| {
                zeta_hat(&k.values, &self.pcf.values, &self.autoconv.values, g2, g2o, self.eta.lambda_o, self.eta_used)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(ZetaData { us: us.to_vec(), zeta, gamma2, gamma2o })
    }

    /// Window arrival times.
    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

fn lag_stage(data: ZetaData, frame_length: f64, config: &FitConfig, seed: u64) -> Result<LagStage> {
    let fit = fit_rates(&data, frame_length, config, seed)?;
    let objective = RateObjective::new(&data, frame_length, config.max_frame_exit)?;
    let rates = fit.rates(1.0);
    let gamma1 = objective.gamma1(&rates);
    let model = objective.model(&rates)?;
    Ok(LagStage { us: data.us, zeta: data.zeta, gamma2: data.gamma2, gamma2o: data.gamma2o, gamma1, model, fit })
}

/// First lag at which the model lag CDF exceeds `level`, searched on a
/// 400-point grid whose span doubles from `span` (at most 6 times).
fn lag_cdf_crossing(rates: &KineticRates, frame_length: f64, level: f64, span: f64) -> Result<(f64, bool)> {
    let mut span = span;
    for _ in 0..6 {
        let us = linspace(0.0, span, 401);
        let g = Gamma1Evaluator::new(&us, frame_length)?.evaluate(rates);
        if let Some(k) = g.iter().position(|&v| v > level) {
            return Ok((us[k].max(us[1]), true));
        }
        span *= 2.0;
    }
    Ok((span / 2.0, false))
}

/// Runs the whole pipeline on `dataset`.
pub fn select_u_and_fit(dataset: &Dataset, config: &FitConfig, seed: u64) -> std::result::Result<FitResult, FitFailure> {
    let (ctx, mut diag) = SummaryContext::build(dataset, config, seed)?;
    macro_rules! stage {
        ($stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(FitFailure { stage: $stage, error, partial: Box::new(diag) }),
            }
        };
    }
    let frame = dataset.frame_length;
    let u0 = linspace(0.0, config.initial_u_max, config.initial_u_points);
    let data0 = stage!(FitStage::PairStatistics, ctx.zeta_data(&u0));
    let initial = stage!(FitStage::InitialFit, lag_stage(data0, frame, config, rng::derive_seed(seed, 1)));
    let provisional = initial.fit.rates(1.0);
    diag.initial = Some(initial);

    let (u_star, reached) =
        stage!(FitStage::FinalFit, lag_cdf_crossing(&provisional, frame, config.final_u_level, config.initial_u_max));
    if !reached {
        diag.warnings.push(format!("fitted lag CDF never exceeded {}; final grid ends at {u_star}", config.final_u_level));
    }
    diag.u_star = Some(u_star);
    let u1 = linspace(0.0, u_star, config.final_u_points);
    let data1 = stage!(FitStage::PairStatistics, ctx.zeta_data(&u1));
    let fin = stage!(FitStage::FinalFit, lag_stage(data1, frame, config, rng::derive_seed(seed, 2)));
    let fitted = fin.fit.rates(1.0);
    diag.model_correlation = Some(stats::pearson(&fin.zeta, &fin.model));
    diag.gamma1_tail = Some(stage!(FitStage::FinalFit, Gamma1Evaluator::new(&u1, frame)).tail_estimate(&fitted));
    let objective = fin.fit.objective;
    diag.final_stage = Some(fin);

    let act =
        stage!(FitStage::ActivationRate, estimate_rf(ctx.times(), ctx.eta_used, &fitted, frame, dataset.duration));
    if let Some(w) = &act.warning {
        diag.warnings.push(w.clone());
    }
    diag.activation = Some(act.clone());
    let rates = KineticRates { activation: act.corrected, ..fitted };
    let descriptors = stage!(
        FitStage::Descriptors,
        derived_descriptors(
            &rates,
            act.corrected,
            ctx.eta_used,
            ctx.eta.lambda_o,
            dataset.window.area(),
            dataset.duration,
            frame,
            config.quantile_samples,
            rng::derive_seed(seed, 3),
        )
    );
    Ok(FitResult {
        eta: ctx.eta.eta,
        lambda_o: ctx.eta.lambda_o,
        activation_rate: act.rate,
        activation_rate_corrected: act.corrected,
        dark_entry: rates.dark_entry,
        dark_return: rates.dark_return,
        bleach: rates.bleach,
        descriptors,
        objective,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::presets;
    use crate::moments::gamma1_pu;
    use crate::spatial_sim::{gaussian_difference_density, Localization, Window};
    use std::f64::consts::PI;

    fn window() -> Window {
        Window::new(0.0, 1000.0, 0.0, 1000.0).unwrap()
    }

    fn dataset_with_counts(roi: usize, noise: usize, noise_area: f64) -> Dataset {
        let mut ls: Vec<Localization> =
            (0..roi).map(|i| Localization { x: 1.0 + (i % 900) as f64, y: 5.0, t: 1.0, sigma: 10.0 }).collect();
        let side = noise_area.sqrt();
        let region = Window::new(2000.0, 2000.0 + side, 0.0, side).unwrap();
        ls.extend((0..noise).map(|_| Localization { x: 2000.0 + side / 2.0, y: side / 2.0, t: 1.0, sigma: 10.0 }));
        Dataset::new(ls, window(), 10.0, 0.04, vec![region]).unwrap()
    }

    #[test]
    fn eta_reference_example() {
        // noise intensity set to 2% of the window intensity
        let noise_area = 1097.0 / (0.02 * 3924.0 / 1e6);
        let e = estimate_eta(&dataset_with_counts(3924, 1097, noise_area)).unwrap();
        assert!((e.eta - 0.980).abs() < 1e-9, "{}", e.eta);
    }

    #[test]
    fn eta_edge_cases() {
        let e = estimate_eta(&dataset_with_counts(100, 0, 1e6)).unwrap();
        assert_eq!(e.eta, 1.0);
        let e = estimate_eta(&dataset_with_counts(100, 100, 1e6)).unwrap();
        assert_eq!(e.eta, 0.0);
        let mut ds = dataset_with_counts(10, 0, 1e6);
        ds.noise_regions.clear();
        let e = estimate_eta(&ds).unwrap();
        assert_eq!(e.eta, 1.0);
        assert!(e.warning.is_some());
        assert!(estimate_eta(&dataset_with_counts(0, 5, 1e6)).is_err());
    }

    #[test]
    fn autoconv_equal_sigmas_is_closed_form() {
        let rs = [0.0, 10.0, 25.0, 60.0];
        let c = estimate_autoconv(&[7.0; 20], &rs, 1000, 1).unwrap();
        for (r, v) in rs.iter().zip(&c.values) {
            let exact = (-r * r / (4.0 * 49.0)).exp() / (4.0 * PI * 49.0);
            assert!((v / exact - 1.0).abs() < 1e-12);
        }
        assert!(estimate_autoconv(&[0.0, 0.0], &rs, 10, 1).is_err());
        assert!(estimate_autoconv(&[1.0], &rs, 10, 1).is_err());
    }

    #[test]
    fn autoconv_matches_all_pairs() {
        use rand_distr::{Distribution, Gamma};
        let g = Gamma::new(6.5, 1.0 / 0.375).unwrap();
        let mut r = rng::stream(2, 0);
        let sigmas: Vec<f64> = (0..500).map(|_| g.sample(&mut r)).collect();
        let rs: Vec<f64> = (0..=20).map(|k| k as f64 * 5.0).collect();
        let c = estimate_autoconv(&sigmas, &rs, 100_000, 3).unwrap();
        for (r, v) in rs.iter().zip(&c.values) {
            let mut acc = 0.0;
            for i in 0..500 {
                for j in 0..500 {
                    if i != j {
                        acc += gaussian_difference_density(sigmas[i], sigmas[j], *r);
                    }
                }
            }
            let brute = acc / (500.0 * 499.0);
            assert!((v / brute - 1.0).abs() < 0.01, "r {r}: {v} vs {brute}");
        }
    }

    #[test]
    fn r_grid_rule_application() {
        // crossing of a step-like function at exactly 100
        let f = |r: f64| if r < 100.0 { 1.0 } else { 0.0 };
        let g = select_r(5.0, 1.0, &f, 10.0, RThreshold::Absolute(0.5), 2000).unwrap();
        let expect: Vec<f64> = (10..=100).map(|k| k as f64).collect();
        assert_eq!(g.grid, expect);
        assert!(g.warning.is_none());
        // duplicate points: min nn distance 0
        let g = select_r(5.0, 0.0, &f, 10.0, RThreshold::Absolute(0.5), 2000).unwrap();
        assert_eq!(g.grid.len(), 501);
        assert!((g.grid[1] - g.grid[0] - 90.0 / 500.0).abs() < 1e-12);
        // coarsening
        let g = select_r(5.0, 0.01, &f, 10.0, RThreshold::Absolute(0.5), 2000).unwrap();
        assert_eq!(g.grid.len(), 2000);
        assert!((g.grid[1999] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn r_grid_gaussian_crossings() {
        let xi: f64 = 2.0;
        let f = |r: f64| gaussian_difference_density(xi, xi, r);
        let g = select_r(0.5, 0.1, &f, 2.0, RThreshold::Absolute(0.001), 2000).unwrap();
        let exact = (4.0 * xi * xi * (1.0 / (0.001 * 4.0 * PI * xi * xi)).ln()).sqrt();
        assert!((g.crossing.unwrap() - exact).abs() < 1e-9, "{:?} vs {exact}", g.crossing);
        assert_eq!(g.grid[0], 1.0);
        assert!(*g.grid.last().unwrap() <= exact && *g.grid.last().unwrap() > exact - 0.1);

        let xi: f64 = 20.0;
        let f = |r: f64| gaussian_difference_density(xi, xi, r);
        // in nm the absolute rule has no crossing above 2 * bandwidth
        let g = select_r(5.0, 1.0, &f, 20.0, RThreshold::Absolute(0.001), 2000).unwrap();
        assert!(g.warning.is_some());
        assert_eq!((g.grid[0], *g.grid.last().unwrap()), (10.0, 20.0));
        let g = select_r(5.0, 1.0, &f, 20.0, RThreshold::Relative(0.001), 2000).unwrap();
        let exact = 2.0 * xi * 1000f64.ln().sqrt();
        assert!((g.crossing.unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn zeta_projection_identities() {
        let h = [1.0, 2.0, 3.0];
        let g = [1.2, 1.1, 1.0];
        let (g2, g2o) = (0.3, 0.25);
        let c = 0.7;
        let k: Vec<f64> = h.iter().zip(&g).map(|(h, g)| c * h + g2 * (g - 1.0) + g2o).collect();
        let z = zeta_hat(&k, &g, &h, g2, g2o, 2.0, 0.5).unwrap();
        assert!((z - c * 2.0 / 0.5).abs() < 1e-12);
        // residual orthogonal to h
        let resid = [3.0, 0.0, -1.0];
        let k: Vec<f64> = resid.iter().zip(&g).map(|(e, g)| e + g2 * (g - 1.0) + g2o).collect();
        assert!(zeta_hat(&k, &g, &h, g2, g2o, 2.0, 0.5).unwrap().abs() < 1e-12);
        assert!(zeta_hat(&k, &g, &[0.0; 3], g2, g2o, 2.0, 0.5).is_err());
    }

    fn synthetic(rates: &KineticRates, frame: f64) -> ZetaData {
        let us = linspace(0.0, 20.0, 50);
        let g1 = gamma1_pu(rates, frame, &us).unwrap().values;
        let nc = g_moments(rates, frame).unwrap().nc;
        let gamma2: Vec<f64> = us.iter().map(|u| 1.0 - (-u / 500.0f64).exp()).collect();
        let zeta = g1.iter().zip(&gamma2).map(|(a, b)| (a - b) * nc).collect();
        ZetaData { us, zeta, gamma2o: gamma2.clone(), gamma2 }
    }

    #[test]
    fn recovers_rates_from_noiseless_weights() {
        let truth = presets::short_lived();
        let data = synthetic(&truth, 0.04);
        let fit = fit_rates(&data, 0.04, &FitConfig::default(), 1).unwrap();
        assert!((fit.dark_entry / 6.0 - 1.0).abs() < 0.01, "{fit:?}");
        assert!((fit.dark_return / 1.0 - 1.0).abs() < 0.01, "{fit:?}");
        assert!((fit.bleach / 3.0 - 1.0).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn truth_beats_perturbed_rates() {
        let truth = presets::short_lived();
        let data = synthetic(&truth, 0.04);
        let obj = RateObjective::new(&data, 0.04, 2.0).unwrap();
        let at_truth = obj.value(&truth);
        let doubled = KineticRates { dark_entry: 12.0, dark_return: 2.0, bleach: 6.0, ..truth };
        assert!(at_truth <= obj.value(&doubled));
        assert!(at_truth < 1e-12);
    }

    #[test]
    fn censoring_vanishes_for_long_recordings() {
        let rf = 0.004;
        let (c, w) = censoring_corrected_rate(rf, 1e6 / rf).unwrap();
        assert!(w.is_none());
        assert!((c / rf - 1.0).abs() < 1e-4);
        // solution satisfies the defining equation
        let b = 1000.0;
        let (c, _) = censoring_corrected_rate(0.004, b).unwrap();
        let lhs = ((c * b).exp() - c * b - 1.0) / (c * ((c * b).exp() - 1.0));
        assert!((lhs * 0.004 - 1.0).abs() < 1e-7);
        assert!(c < 0.004);
    }

    #[test]
    fn table_estimates_descriptors() {
        let r = KineticRates { activation: 0.00375, dark_entry: 6.307, dark_return: 0.703, bleach: 3.156 };
        let d = derived_descriptors(&r, 0.004, 1.0, 1e-4, 1e6, 1e7, 0.04, 10_000, 1).unwrap();
        assert!((d.mean_cluster_size - 10.893).abs() < 0.05, "{}", d.mean_cluster_size);
        assert!((d.bleach_probability - 0.333).abs() < 0.001);
        assert!((d.proteins_total / d.proteins_observed - 1.0).abs() < 1e-12);
        let d = derived_descriptors(&r, 2f64.ln() / 1000.0, 1.0, 1e-4, 1e6, 1000.0, 0.04, 10_000, 1).unwrap();
        assert!((d.proteins_total / d.proteins_observed - 2.0).abs() < 1e-12);
        assert!(derived_descriptors(&r, 0.0, 1.0, 1e-4, 1e6, 1000.0, 0.04, 10_000, 1).is_err());
    }

    #[test]
    fn negative_waiting_time_is_degenerate() {
        let r = presets::short_lived();
        let e = estimate_rf(&[0.04, 0.08], 1.0, &r, 0.04, 100.0).unwrap_err();
        assert!(matches!(e, Error::DegenerateFit(_)));
    }
}
