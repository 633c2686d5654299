//! Continuous-time photophysics of a single photo-switchable fluorophore and
//! its discretization to camera frames.
//!
//! A fluorophore starts inactive, activates after an exponential waiting
//! time, and then alternates between the fluorescent state and one of its
//! dark states until it bleaches. Every visit to the fluorescent state
//! produces one interval of emission; a camera frame records a localization
//! whenever emission overlaps it for a positive amount of time.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::{par, rng, stats};

/// Lifetime quantile levels reported by [`ground_truth_descriptors`].
pub const LIFETIME_LEVELS: [f64; 4] = [0.25, 0.50, 0.75, 0.99];

/// Rates (1/s) of the 4-state model: inactive -> fluorescent, fluorescent ->
/// dark, dark -> fluorescent, fluorescent -> bleached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticRates {
    pub activation: f64,
    pub dark_entry: f64,
    pub dark_return: f64,
    pub bleach: f64,
}

impl KineticRates {
    pub fn new(activation: f64, dark_entry: f64, dark_return: f64, bleach: f64) -> Result<Self> {
        let rates = Self { activation, dark_entry, dark_return, bleach };
        rates.validate()?;
        Ok(rates)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("activation", self.activation),
            ("dark_entry", self.dark_entry),
            ("dark_return", self.dark_return),
            ("bleach", self.bleach),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("rate {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Rate of leaving the fluorescent state.
    pub fn fluorescent_exit_rate(&self) -> f64 {
        self.dark_entry + self.bleach
    }

    /// Probability that a fluorescent visit ends in bleaching.
    pub fn bleach_probability(&self) -> f64 {
        self.bleach / self.fluorescent_exit_rate()
    }

    /// E[N], N the (geometric, support 1..) number of fluorescent visits.
    pub fn mean_visits(&self) -> f64 {
        1.0 / self.bleach_probability()
    }

    /// E[N^2] = (2 - p) / p^2.
    pub fn visits_second_moment(&self) -> f64 {
        let p = self.bleach_probability();
        (2.0 - p) / (p * p)
    }

    /// E[N (N - 1)] = 2 (1 - p) / p^2.
    pub fn visits_factorial_moment(&self) -> f64 {
        let p = self.bleach_probability();
        2.0 * (1.0 - p) / (p * p)
    }

    /// Mean duration of one fluorescent visit.
    pub fn mean_on_time(&self) -> f64 {
        1.0 / self.fluorescent_exit_rate()
    }

    /// Second moment of one fluorescent visit duration.
    pub fn on_time_second_moment(&self) -> f64 {
        2.0 / self.fluorescent_exit_rate().powi(2)
    }

    pub fn mean_dark_time(&self) -> f64 {
        1.0 / self.dark_return
    }

    pub fn mean_activation_time(&self) -> f64 {
        1.0 / self.activation
    }

    /// Mean time from activation to bleaching.
    pub fn mean_lifetime(&self) -> f64 {
        let n = self.mean_visits();
        n * self.mean_on_time() + (n - 1.0) * self.mean_dark_time()
    }
}

/// One dark state of a [`MultiDarkModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkState {
    /// Rate of entering this state from the fluorescent state.
    pub entry_rate: f64,
    /// Rate of returning from this state to the fluorescent state.
    pub return_rate: f64,
}

/// Fluorophore with several dark states of different lifetimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiDarkModel {
    pub activation: f64,
    pub bleach: f64,
    pub dark_states: Vec<DarkState>,
}

impl MultiDarkModel {
    pub fn new(activation: f64, bleach: f64, dark_states: Vec<DarkState>) -> Result<Self> {
        let model = Self { activation, bleach, dark_states };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dark_states.is_empty() {
            return Err(invalid("multi-dark model needs at least one dark state"));
        }
        let rates = [self.activation, self.bleach]
            .into_iter()
            .chain(self.dark_states.iter().flat_map(|d| [d.entry_rate, d.return_rate]));
        for v in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("rates must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn fluorescent_exit_rate(&self) -> f64 {
        self.bleach + self.dark_states.iter().map(|d| d.entry_rate).sum::<f64>()
    }

    pub fn bleach_probability(&self) -> f64 {
        self.bleach / self.fluorescent_exit_rate()
    }
}

/// Any photophysical model that can be simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlinkModel {
    FourState(KineticRates),
    MultiDark(MultiDarkModel),
}

impl From<KineticRates> for BlinkModel {
    fn from(r: KineticRates) -> Self {
        BlinkModel::FourState(r)
    }
}

impl From<MultiDarkModel> for BlinkModel {
    fn from(m: MultiDarkModel) -> Self {
        BlinkModel::MultiDark(m)
    }
}

impl BlinkModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            BlinkModel::FourState(r) => r.validate(),
            BlinkModel::MultiDark(m) => m.validate(),
        }
    }

    pub fn activation_rate(&self) -> f64 {
        match self {
            BlinkModel::FourState(r) => r.activation,
            BlinkModel::MultiDark(m) => m.activation,
        }
    }

    pub fn bleach_probability(&self) -> f64 {
        match self {
            BlinkModel::FourState(r) => r.bleach_probability(),
            BlinkModel::MultiDark(m) => m.bleach_probability(),
        }
    }

    /// Simulates one trace by exact jump-chain simulation.
    pub fn simulate_trace<R: Rng + ?Sized>(&self, rng: &mut R) -> ContinuousTrace {
        let activation = exp_sample(rng, self.activation_rate());
        self.simulate_from(activation, rng)
    }

    /// Simulates the fluorescent/dark alternation starting at `activation`.
    pub fn simulate_from<R: Rng + ?Sized>(&self, activation: f64, rng: &mut R) -> ContinuousTrace {
        let mut intervals = Vec::new();
        let mut t = activation;
        match self {
            BlinkModel::FourState(r) => {
                let exit = r.fluorescent_exit_rate();
                loop {
                    let on = exp_sample(rng, exit);
                    intervals.push((t, t + on));
                    t += on;
                    if rng.random::<f64>() * exit < r.bleach {
                        break;
                    }
                    t += exp_sample(rng, r.dark_return);
                }
            }
            BlinkModel::MultiDark(m) => {
                let exit = m.fluorescent_exit_rate();
                loop {
                    let on = exp_sample(rng, exit);
                    intervals.push((t, t + on));
                    t += on;
                    let mut u = rng.random::<f64>() * exit;
                    if u < m.bleach {
                        break;
                    }
                    u -= m.bleach;
                    let mut chosen = m.dark_states.len() - 1;
                    for (i, d) in m.dark_states.iter().enumerate() {
                        if u < d.entry_rate {
                            chosen = i;
                            break;
                        }
                        u -= d.entry_rate;
                    }
                    t += exp_sample(rng, m.dark_states[chosen].return_rate);
                }
            }
        }
        ContinuousTrace { intervals }
    }
}

fn exp_sample<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Simulates a trace from `seed` alone.
pub fn simulate_trace(model: &BlinkModel, seed: u64) -> ContinuousTrace {
    model.simulate_trace(&mut rng::stream(seed, 0))
}

/// Emission intervals `(t_on, t_off)` of one fluorophore, in seconds. The
/// last `t_off` is the bleaching time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrace {
    intervals: Vec<(f64, f64)>,
}

impl ContinuousTrace {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(invalid("trace needs at least one fluorescent interval"));
        }
        if intervals[0].0 <= 0.0 {
            return Err(invalid("first activation must be after time 0"));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for &(on, off) in &intervals {
            if !(on.is_finite() && off.is_finite()) || off <= on || on <= prev_end {
                return Err(invalid("intervals must be finite, nonempty, disjoint and increasing"));
            }
            prev_end = off;
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Number of visits to the fluorescent state.
    pub fn visits(&self) -> usize {
        self.intervals.len()
    }

    pub fn activation_time(&self) -> f64 {
        self.intervals[0].0
    }

    pub fn bleach_time(&self) -> f64 {
        self.intervals[self.intervals.len() - 1].1
    }

    /// Time from activation to bleaching.
    pub fn lifetime(&self) -> f64 {
        self.bleach_time() - self.activation_time()
    }

    pub fn total_on_time(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    /// Camera frames (1-based) overlapping emission with positive measure.
    pub fn active_frames(&self, frame_length: f64) -> Vec<u64> {
        let mut frames: Vec<u64> = Vec::new();
        for &(on, off) in &self.intervals {
            let first = (on / frame_length).floor() as u64 + 1;
            let last = ((off / frame_length).ceil() as u64).max(first);
            for k in first..=last {
                let lo = ((k - 1) as f64 * frame_length).max(on);
                let hi = (k as f64 * frame_length).min(off);
                if hi > lo && frames.last() != Some(&k) {
                    frames.push(k);
                }
            }
        }
        frames
    }
}

/// The observed record of one fluorophore: the frames on which it was
/// localized. Observation times are `frame * frame_length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlinkCluster {
    frames: Vec<u64>,
    frame_length: f64,
}

impl BlinkCluster {
    pub fn frames(&self) -> &[u64] {
        &self.frames
    }

    pub fn frame_length(&self) -> f64 {
        self.frame_length
    }

    /// Number of observed frames.
    pub fn size(&self) -> usize {
        self.frames.len()
    }

    /// First observation time.
    pub fn first_time(&self) -> f64 {
        self.frames[0] as f64 * self.frame_length
    }

    /// Offsets of the observations from the first one (the first is 0).
    pub fn offsets(&self) -> Vec<f64> {
        let f0 = self.frames[0];
        self.frames.iter().map(|&f| (f - f0) as f64 * self.frame_length).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|&f| f as f64 * self.frame_length).collect()
    }
}

/// Discretizes a trace to frames of length `frame_length`. Returns `None` if
/// no frame is active.
pub fn discretize_trace(trace: &ContinuousTrace, frame_length: f64) -> Result<Option<BlinkCluster>> {
    if !(frame_length.is_finite() && frame_length > 0.0) {
        return Err(invalid("frame length must be positive"));
    }
    let frames = trace.active_frames(frame_length);
    Ok(if frames.is_empty() {
        None
    } else {
        Some(BlinkCluster { frames, frame_length })
    })
}

/// Monte Carlo summary of the blinking behaviour of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mean_cluster_size: f64,
    pub bleach_probability: f64,
    /// Lifetime quantiles at [`LIFETIME_LEVELS`].
    pub lifetime_quantiles: [f64; 4],
}

const MC_CHUNK: usize = 4096;

/// Estimates E[G] and the lifetime quantiles by simulating `n_samples`
/// traces. The bleaching probability is analytic.
pub fn ground_truth_descriptors(
    model: &BlinkModel,
    frame_length: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GroundTruth> {
    model.validate()?;
    if n_samples < 10_000 {
        return Err(invalid("ground truth needs at least 10^4 samples"));
    }
    if !(frame_length.is_finite() && frame_length > 0.0) {
        return Err(invalid("frame length must be positive"));
    }
    let chunks = par::map_chunks(n_samples, MC_CHUNK, |range| {
        let mut rng = rng::stream(seed, (range.start / MC_CHUNK) as u64);
        let mut size_sum = 0u64;
        let mut lifetimes = Vec::with_capacity(range.len());
        for _ in range {
            let trace = model.simulate_trace(&mut rng);
            size_sum += trace.active_frames(frame_length).len() as u64;
            lifetimes.push(trace.lifetime());
        }
        (size_sum, lifetimes)
    });
    let size_sum: u64 = chunks.iter().map(|c| c.0).sum();
    let mut lifetimes: Vec<f64> = chunks.into_iter().flat_map(|c| c.1).collect();
    lifetimes.sort_by(f64::total_cmp);
    Ok(GroundTruth {
        mean_cluster_size: size_sum as f64 / n_samples as f64,
        bleach_probability: model.bleach_probability(),
        lifetime_quantiles: LIFETIME_LEVELS.map(|q| stats::quantile_sorted(&lifetimes, q)),
    })
}

/// Lifetime quantiles at [`LIFETIME_LEVELS`] from `n_samples` simulated traces.
pub fn lifetime_quantiles(model: &BlinkModel, n_samples: usize, seed: u64) -> Result<[f64; 4]> {
    model.validate()?;
    if n_samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let chunks = par::map_chunks(n_samples, MC_CHUNK, |range| {
        let mut rng = rng::stream(seed, (range.start / MC_CHUNK) as u64);
        range
            .map(|_| model.simulate_from(0.0, &mut rng).lifetime())
            .collect::<Vec<_>>()
    });
    let mut lifetimes: Vec<f64> = chunks.into_iter().flatten().collect();
    lifetimes.sort_by(f64::total_cmp);
    Ok(LIFETIME_LEVELS.map(|q| stats::quantile_sorted(&lifetimes, q)))
}

/// Within-cluster lag statistics of simulated clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagHistogram {
    pub frame_length: f64,
    /// `counts[k]`: ordered pairs of distinct localizations `k` frames apart.
    pub counts: Vec<u64>,
    pub clusters: u64,
    pub size_sum: u64,
    pub size_square_sum: u64,
}

impl LagHistogram {
    pub fn total_pairs(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Empirical characteristic function of the lag at `v`.
    pub fn cf(&self, v: f64) -> (f64, f64) {
        let total = self.total_pairs() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, &c) in self.counts.iter().enumerate() {
            let (s, co) = (v * k as f64 * self.frame_length).sin_cos();
            re += c as f64 * co;
            im += c as f64 * s;
        }
        (re / total, im / total)
    }

    /// Empirical CDF of the lag at `u` (seconds).
    pub fn cdf(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        let k = ((u / self.frame_length) + 1e-9).floor() as usize;
        let upto: u64 = self.counts.iter().take(k + 1).sum();
        upto as f64 / self.total_pairs() as f64
    }

    pub fn mean_size(&self) -> f64 {
        self.size_sum as f64 / self.clusters as f64
    }

    /// E[G^2] / E[G] - 1
    pub fn nc(&self) -> f64 {
        self.size_square_sum as f64 / self.size_sum as f64 - 1.0
    }
}

/// Simulates `n_clusters` clusters and tabulates their pairwise lags.
pub fn lag_histogram(model: &BlinkModel, frame_length: f64, n_clusters: usize, seed: u64) -> Result<LagHistogram> {
    model.validate()?;
    if !(frame_length.is_finite() && frame_length > 0.0) {
        return Err(invalid("frame length must be positive"));
    }
    let parts = par::map_chunks(n_clusters, MC_CHUNK, |range| {
        let mut rng = rng::stream(seed, (range.start / MC_CHUNK) as u64);
        let mut counts: Vec<u64> = Vec::new();
        let (mut s1, mut s2) = (0u64, 0u64);
        for _ in range {
            let frames = model.simulate_trace(&mut rng).active_frames(frame_length);
            let g = frames.len() as u64;
            s1 += g;
            s2 += g * g;
            for i in 0..frames.len() {
                for j in i + 1..frames.len() {
                    let k = (frames[j] - frames[i]) as usize;
                    if k >= counts.len() {
                        counts.resize(k + 1, 0);
                    }
                    counts[k] += 2;
                }
            }
        }
        (counts, s1, s2)
    });
    let mut hist = LagHistogram {
        frame_length,
        counts: Vec::new(),
        clusters: n_clusters as u64,
        size_sum: 0,
        size_square_sum: 0,
    };
    for (counts, s1, s2) in parts {
        if counts.len() > hist.counts.len() {
            hist.counts.resize(counts.len(), 0);
        }
        for (a, b) in hist.counts.iter_mut().zip(counts) {
            *a += b;
        }
        hist.size_sum += s1;
        hist.size_square_sum += s2;
    }
    Ok(hist)
}

/// Models used in the simulation studies.
pub mod presets {
    use super::*;

    /// Fast-bleaching fluorophore: r_D = 6, r_R = 1, r_B = 3 (1/s).
    pub fn short_lived() -> KineticRates {
        KineticRates { activation: 0.004, dark_entry: 6.0, dark_return: 1.0, bleach: 3.0 }
    }

    /// Fluorophore with long dark periods: r_D = 12, r_R = 0.5, r_B = 3.
    pub fn long_lived() -> KineticRates {
        KineticRates { activation: 0.004, dark_entry: 12.0, dark_return: 0.5, bleach: 3.0 }
    }

    /// Three equally likely dark states with mean durations 4 s, 1 s and 0.1 s.
    pub fn three_dark_states() -> MultiDarkModel {
        MultiDarkModel {
            activation: 0.004,
            bleach: 2.5,
            dark_states: vec![
                DarkState { entry_rate: 4.0, return_rate: 0.25 },
                DarkState { entry_rate: 4.0, return_rate: 1.0 },
                DarkState { entry_rate: 4.0, return_rate: 10.0 },
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FRAME: f64 = 0.04;

    fn traces(model: &BlinkModel, n: usize, seed: u64) -> Vec<ContinuousTrace> {
        let mut rng = rng::stream(seed, 0);
        (0..n).map(|_| model.simulate_trace(&mut rng)).collect()
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(KineticRates::new(0.004, 6.0, 0.0, 3.0).is_err());
        assert!(KineticRates::new(f64::NAN, 6.0, 1.0, 3.0).is_err());
        assert!(MultiDarkModel::new(0.004, 2.5, vec![]).is_err());
    }

    #[test]
    fn mean_visit_count_matches_geometric_mean() {
        let model = BlinkModel::from(presets::short_lived());
        let ts = traces(&model, 100_000, 1);
        let mean = ts.iter().map(|t| t.visits() as f64).sum::<f64>() / ts.len() as f64;
        assert!((mean - 3.0).abs() < 0.03, "mean visits {mean}");
    }

    #[test]
    fn visit_counts_follow_geometric_law() {
        // chi-squared over bins 1..=10 and 11+, df = 10, critical value at 0.01.
        let model = BlinkModel::from(presets::short_lived());
        let n = 100_000;
        let ts = traces(&model, n, 2);
        let mut observed = [0usize; 11];
        for t in &ts {
            observed[(t.visits() - 1).min(10)] += 1;
        }
        let p: f64 = 1.0 / 3.0;
        let mut chi2 = 0.0;
        for (k, &obs) in observed.iter().enumerate() {
            let prob = if k < 10 { p * (1.0 - p).powi(k as i32) } else { (1.0 - p).powi(10) };
            let expected = prob * n as f64;
            chi2 += (obs as f64 - expected).powi(2) / expected;
        }
        assert!(chi2 < 23.209, "chi2 = {chi2}");
    }

    #[test]
    fn negligible_dark_entry_gives_single_visit() {
        let model = BlinkModel::from(KineticRates::new(0.004, 1e-12, 1.0, 3.0).unwrap());
        assert!(traces(&model, 10_000, 3).iter().all(|t| t.visits() == 1));
    }

    #[test]
    fn mean_lifetime_short_lived() {
        // 3 * (1/9) + 2 * 1
        let rates = presets::short_lived();
        assert!((rates.mean_lifetime() - 7.0 / 3.0).abs() < 1e-12);
        let ts = traces(&rates.into(), 100_000, 4);
        let mean = ts.iter().map(|t| t.lifetime()).sum::<f64>() / ts.len() as f64;
        assert!((mean / (7.0 / 3.0) - 1.0).abs() < 0.01, "mean lifetime {mean}");
    }

    #[test]
    fn same_seed_same_trace() {
        let model = BlinkModel::from(presets::three_dark_states());
        assert_eq!(simulate_trace(&model, 99), simulate_trace(&model, 99));
        assert_ne!(simulate_trace(&model, 99), simulate_trace(&model, 100));
    }

    #[test]
    fn multi_dark_branching_is_proportional() {
        let model = MultiDarkModel::new(
            1.0,
            1.0,
            vec![
                DarkState { entry_rate: 1.0, return_rate: 1e6 },
                DarkState { entry_rate: 2.0, return_rate: 1e-6 },
            ],
        )
        .unwrap();
        // The slow state parks the trace far in the future, so count how many
        // traces have a dark gap longer than 1000 s.
        let model = BlinkModel::from(model);
        let ts = traces(&model, 20_000, 5);
        let mut slow = 0usize;
        let mut total = 0usize;
        for t in &ts {
            for w in t.intervals().windows(2) {
                total += 1;
                if w[1].0 - w[0].1 > 1000.0 {
                    slow += 1;
                }
            }
        }
        let frac = slow as f64 / total as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.02, "slow fraction {frac}");
    }

    #[test]
    fn discretizes_two_blink_example() {
        // emission overlapping frames 1,2 and 5..=8
        let trace = ContinuousTrace::new(vec![(0.5 * FRAME, 1.5 * FRAME), (4.2 * FRAME, 7.3 * FRAME)]).unwrap();
        let c = discretize_trace(&trace, FRAME).unwrap().unwrap();
        assert_eq!(c.frames(), &[1, 2, 5, 6, 7, 8]);
        assert_eq!(c.size(), 6);
        assert!((c.first_time() - FRAME).abs() < 1e-15);
        let expect = [0.0, 1.0, 4.0, 5.0, 6.0, 7.0].map(|k| k * FRAME);
        for (w, e) in c.offsets().iter().zip(expect) {
            assert!((w - e).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_and_straddle() {
        let t = ContinuousTrace::new(vec![(0.3 * FRAME, 0.4 * FRAME)]).unwrap();
        let c = discretize_trace(&t, FRAME).unwrap().unwrap();
        assert_eq!(c.frames(), &[1]);
        assert_eq!(c.offsets(), vec![0.0]);
        let t = ContinuousTrace::new(vec![(0.9 * FRAME, 1.1 * FRAME)]).unwrap();
        assert_eq!(discretize_trace(&t, FRAME).unwrap().unwrap().frames(), &[1, 2]);
    }

    #[test]
    fn boundary_touch_is_inactive() {
        // [1, 2] with unit frames: frame 2 is (1, 2], frames 1 and 3 touch at a point
        let t = ContinuousTrace::new(vec![(1.0, 2.0)]).unwrap();
        assert_eq!(discretize_trace(&t, 1.0).unwrap().unwrap().frames(), &[2]);
    }

    #[test]
    fn shared_frames_merge() {
        let t = ContinuousTrace::new(vec![(0.1, 0.2), (0.5, 0.6), (1.2, 1.3)]).unwrap();
        assert_eq!(discretize_trace(&t, 1.0).unwrap().unwrap().frames(), &[1, 2]);
    }

    #[test]
    fn rejects_invalid_traces_and_frames() {
        assert!(ContinuousTrace::new(vec![]).is_err());
        assert!(ContinuousTrace::new(vec![(0.0, 1.0)]).is_err());
        assert!(ContinuousTrace::new(vec![(1.0, 2.0), (1.5, 3.0)]).is_err());
        let t = ContinuousTrace::new(vec![(1.0, 2.0)]).unwrap();
        assert!(discretize_trace(&t, 0.0).is_err());
    }

    #[test]
    fn ground_truth_short_lived() {
        let gt = ground_truth_descriptors(&presets::short_lived().into(), FRAME, 100_000, 11).unwrap();
        assert!((gt.mean_cluster_size - 11.294).abs() < 0.1, "E[G] {}", gt.mean_cluster_size);
        assert!((gt.bleach_probability - 1.0 / 3.0).abs() < 1e-12);
        // Upper three quantiles against the reference values within 5%; the
        // lower quartile is checked against the analytic lifetime law in
        // tests/oracles.rs.
        for (q, r) in gt.lifetime_quantiles[1..].iter().zip([1.120, 3.360, 13.800]) {
            assert!((q / r - 1.0).abs() < 0.05, "quantile {q} vs {r}");
        }
    }

    #[test]
    fn ground_truth_long_lived() {
        let gt = ground_truth_descriptors(&presets::long_lived().into(), FRAME, 100_000, 12).unwrap();
        assert!((gt.mean_cluster_size - 13.294).abs() < 0.1, "E[G] {}", gt.mean_cluster_size);
        assert!((gt.lifetime_quantiles[3] / 45.480 - 1.0).abs() < 0.05);
    }

    #[test]
    fn single_visit_lifetime_is_exponential() {
        let model = KineticRates::new(0.004, 1e-12, 1.0, 3.0).unwrap().into();
        let q = lifetime_quantiles(&model, 100_000, 13).unwrap();
        let median = std::f64::consts::LN_2 / 3.0;
        assert!((q[1] / median - 1.0).abs() < 0.02, "median {} vs {median}", q[1]);
    }

    #[test]
    fn ground_truth_needs_enough_samples() {
        assert!(ground_truth_descriptors(&presets::short_lived().into(), FRAME, 100, 1).is_err());
    }

    proptest! {
        #[test]
        fn frame_count_bounds(
            starts in proptest::collection::vec(0.001f64..5.0, 1..8),
            lens in proptest::collection::vec(0.0005f64..0.5, 8),
            frame in 0.01f64..0.2,
        ) {
            let mut t = 0.0;
            let mut intervals = Vec::new();
            for (gap, len) in starts.iter().zip(&lens) {
                let on = t + gap;
                intervals.push((on, on + len));
                t = on + len;
            }
            let trace = ContinuousTrace::new(intervals.clone()).unwrap();
            let frames = trace.active_frames(frame);
            // strictly increasing, each frame genuinely overlapped
            prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
            for &k in &frames {
                let (lo, hi) = ((k - 1) as f64 * frame, k as f64 * frame);
                prop_assert!(intervals.iter().any(|&(a, b)| b.min(hi) > a.max(lo)));
            }
            let need = (trace.total_on_time() / frame).ceil() as i64 - intervals.len() as i64;
            prop_assert!(frames.len() as i64 >= need);
            let max = intervals.iter().map(|(a, b)| ((b - a) / frame).ceil() as usize + 1).sum::<usize>();
            prop_assert!(frames.len() <= max);
        }
    }
}
