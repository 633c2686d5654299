//! Second-order summary statistics of a localization pattern.
//!
//! The spatial estimators share one [`PairTable`]: all unordered pairs of
//! window points closer than the largest distance of interest plus the kernel
//! half-width, found with a cell grid and sorted by distance. Each curve value
//! is then a sequential sum over a contiguous slice of that table, which makes
//! the estimates independent of the number of threads.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spatial_sim::{Dataset, Localization, Window};
use crate::{par, stats};

/// A function sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(invalid("curve grid and values differ in length"));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|g| !g.is_finite()) {
            return Err(invalid("curve grid must be finite and strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("curve values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Mark function applied to the time stamps of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkFunction {
    /// 1(|t1 - t2| <= u)
    Threshold { u: f64 },
    /// t1 + t2
    Sum,
    Constant,
}

impl MarkFunction {
    fn eval(&self, dt: f64, tsum: f64) -> f64 {
        match *self {
            MarkFunction::Threshold { u } => {
                if dt <= u {
                    1.0
                } else {
                    0.0
                }
            }
            MarkFunction::Sum => tsum,
            MarkFunction::Constant => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MarkFunction::Threshold { u } if !(*u >= 0.0) => Err(invalid("threshold must be nonnegative")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCorrection {
    /// Translation-correction weights |W| / |W ∩ (W + o_i - o_j)|.
    #[default]
    Translation,
    /// Unit weights.
    None,
}

/// Epanechnikov kernel with half-width `h`.
pub fn epanechnikov(x: f64, h: f64) -> f64 {
    let z = x / h;
    if z.abs() < 1.0 {
        0.75 * (1.0 - z * z) / h
    } else {
        0.0
    }
}

/// Rule-of-thumb bandwidth 0.15 / sqrt(intensity).
pub fn stoyan_bandwidth(n: usize, area: f64) -> f64 {
    0.15 / (n as f64 / area).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pair {
    d: f64,
    weight: f64,
    dt: f64,
    tsum: f64,
}

/// Close pairs of the window points of a dataset, sorted by distance.
#[derive(Debug, Clone)]
pub struct PairTable {
    pairs: Vec<Pair>,
    n: usize,
    area: f64,
    max_distance: f64,
}

const POINT_CHUNK: usize = 1024;
const MAX_CELLS_PER_AXIS: usize = 4096;

impl PairTable {
    /// Collects all pairs of `points` (assumed inside `window`) closer than
    /// `max_distance`.
    pub fn build(points: &[Localization], window: &Window, max_distance: f64, edge: EdgeCorrection) -> Result<Self> {
        window.validate()?;
        if !(max_distance.is_finite() && max_distance > 0.0) {
            return Err(invalid("pair distance cutoff must be positive"));
        }
        let cell = max_distance
            .max(window.width() / MAX_CELLS_PER_AXIS as f64)
            .max(window.height() / MAX_CELLS_PER_AXIS as f64);
        let nx = ((window.width() / cell).ceil() as usize).max(1);
        let ny = ((window.height() / cell).ceil() as usize).max(1);
        let cell_of = |p: &Localization| {
            let cx = (((p.x - window.x_min) / cell) as usize).min(nx - 1);
            let cy = (((p.y - window.y_min) / cell) as usize).min(ny - 1);
            (cx, cy)
        };
        // counting sort of point indices by cell
        let mut starts = vec![0usize; nx * ny + 1];
        for p in points {
            let (cx, cy) = cell_of(p);
            starts[cy * nx + cx + 1] += 1;
        }
        for i in 1..starts.len() {
            starts[i] += starts[i - 1];
        }
        let mut fill = starts.clone();
        let mut members = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = cell_of(p);
            members[fill[cy * nx + cx]] = i as u32;
            fill[cy * nx + cx] += 1;
        }

        let (ww, wh) = (window.width(), window.height());
        let area = window.area();
        let chunks = par::map_chunks(points.len(), POINT_CHUNK, |range| {
            let mut out: Vec<(u32, u32, Pair)> = Vec::new();
            for i in range {
                let a = &points[i];
                let (cx, cy) = cell_of(a);
                for gy in cy.saturating_sub(1)..=(cy + 1).min(ny - 1) {
                    for gx in cx.saturating_sub(1)..=(cx + 1).min(nx - 1) {
                        let c = gy * nx + gx;
                        for &j in &members[starts[c]..starts[c + 1]] {
                            if (j as usize) <= i {
                                continue;
                            }
                            let b = &points[j as usize];
                            let (dx, dy) = ((a.x - b.x).abs(), (a.y - b.y).abs());
                            let d = dx.hypot(dy);
                            if d >= max_distance {
                                continue;
                            }
                            let weight = match edge {
                                EdgeCorrection::Translation => area / ((ww - dx) * (wh - dy)),
                                EdgeCorrection::None => 1.0,
                            };
                            let pair = Pair { d, weight, dt: (a.t - b.t).abs(), tsum: a.t + b.t };
                            out.push((i as u32, j, pair));
                        }
                    }
                }
            }
            out
        });
        let mut keyed: Vec<(u32, u32, Pair)> = chunks.into_iter().flatten().collect();
        keyed.sort_unstable_by(|x, y| x.2.d.total_cmp(&y.2.d).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        Ok(Self { pairs: keyed.into_iter().map(|k| k.2).collect(), n: points.len(), area, max_distance })
    }

    /// Pair table of the window points of `dataset`.
    pub fn from_dataset(dataset: &Dataset, max_distance: f64, edge: EdgeCorrection) -> Result<Self> {
        let roi: Vec<Localization> = dataset.roi().copied().collect();
        Self::build(&roi, &dataset.window, max_distance, edge)
    }

    pub fn point_count(&self) -> usize {
        self.n
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    fn check(&self, rs: &[f64], bandwidth: f64) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InsufficientData("pair statistics need at least 2 points".into()));
        }
        if rs.is_empty() {
            return Err(invalid("empty distance grid"));
        }
        if rs.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(invalid("distance grid must be positive"));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(invalid("bandwidth must be positive"));
        }
        let r_max = rs.iter().cloned().fold(f64::MIN, f64::max);
        if r_max + bandwidth > self.max_distance {
            return Err(invalid(format!(
                "grid reaches {} but pairs were collected only up to {}",
                r_max + bandwidth,
                self.max_distance
            )));
        }
        Ok(())
    }

    fn range(&self, r: f64, h: f64) -> &[Pair] {
        let lo = self.pairs.partition_point(|p| p.d <= r - h);
        let hi = self.pairs.partition_point(|p| p.d < r + h);
        &self.pairs[lo..hi.max(lo)]
    }

    /// c(r) times two, turning the unordered-pair sum into the ordered one.
    fn scale(&self, r: f64) -> f64 {
        2.0 * self.area / (2.0 * PI * r * (self.n as f64).powi(2))
    }

    /// Kernel estimate of the f-weighted pair correlation function.
    pub fn markstat(&self, f: MarkFunction, rs: &[f64], bandwidth: f64) -> Result<Curve> {
        self.check(rs, bandwidth)?;
        f.validate()?;
        let values = par::map_slice(rs, |&r| {
            let s: f64 = self
                .range(r, bandwidth)
                .iter()
                .map(|p| f.eval(p.dt, p.tsum) * epanechnikov(p.d - r, bandwidth) * p.weight)
                .sum();
            self.scale(r) * s
        });
        Curve::new(rs.to_vec(), values)
    }

    /// Kernel estimate of the pair correlation function.
    pub fn pcf(&self, rs: &[f64], bandwidth: f64) -> Result<Curve> {
        self.markstat(MarkFunction::Constant, rs, bandwidth)
    }

    /// Threshold mark statistics for every lag in `us` (ascending) at once.
    pub fn lag_markstats(&self, us: &[f64], rs: &[f64], bandwidth: f64) -> Result<Vec<Curve>> {
        self.check(rs, bandwidth)?;
        if us.windows(2).any(|w| w[0] > w[1]) || us.iter().any(|u| !(*u >= 0.0)) {
            return Err(invalid("lags must be nonnegative and ascending"));
        }
        let columns = par::map_slice(rs, |&r| {
            let mut buckets = vec![0.0; us.len()];
            for p in self.range(r, bandwidth) {
                let k = us.partition_point(|&u| u < p.dt);
                if k < us.len() {
                    buckets[k] += epanechnikov(p.d - r, bandwidth) * p.weight;
                }
            }
            let c = self.scale(r);
            let mut acc = 0.0;
            buckets
                .into_iter()
                .map(|b| {
                    acc += b;
                    c * acc
                })
                .collect::<Vec<f64>>()
        });
        (0..us.len())
            .map(|k| Curve::new(rs.to_vec(), columns.iter().map(|col| col[k]).collect()))
            .collect()
    }
}

/// Pair correlation function of the window points of `dataset`.
pub fn estimate_pcf(dataset: &Dataset, rs: &[f64], bandwidth: f64, edge: EdgeCorrection) -> Result<Curve> {
    estimate_markstat(dataset, MarkFunction::Constant, rs, bandwidth, edge)
}

/// f-weighted pair correlation function of the window points of `dataset`.
pub fn estimate_markstat(
    dataset: &Dataset,
    f: MarkFunction,
    rs: &[f64],
    bandwidth: f64,
    edge: EdgeCorrection,
) -> Result<Curve> {
    if rs.is_empty() {
        return Err(invalid("empty distance grid"));
    }
    let r_max = rs.iter().cloned().fold(f64::MIN, f64::max);
    let table = PairTable::from_dataset(dataset, r_max + bandwidth, edge)?;
    table.markstat(f, rs, bandwidth)
}

/// Fraction of ordered pairs of distinct points with |t_i - t_j| <= u, for
/// each u in `us`.
pub fn gamma2o_hat_many(times: &[f64], us: &[f64]) -> Result<Vec<f64>> {
    if times.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 time points".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(par::map_slice(us, |&u| {
        let mut lo = 0usize;
        let mut close = 0u64;
        for (j, &t) in sorted.iter().enumerate() {
            while t - sorted[lo] > u {
                lo += 1;
            }
            close += (j - lo) as u64;
        }
        2.0 * close as f64 / (n * (n - 1.0))
    }))
}

pub fn gamma2o_hat(times: &[f64], u: f64) -> Result<f64> {
    Ok(gamma2o_hat_many(times, &[u])?[0])
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid(format!("signal fraction must be in (0, 1], got {eta}")));
    }
    Ok(())
}

/// Noise-corrected empirical CDF value at `u`, before any projection.
pub fn mz1_raw(times: &[f64], eta: f64, duration: f64, u: f64) -> Result<f64> {
    check_eta(eta)?;
    if times.is_empty() {
        return Err(Error::InsufficientData("no time points".into()));
    }
    let ecdf = times.iter().filter(|&&t| t <= u).count() as f64 / times.len() as f64;
    Ok((ecdf - (1.0 - eta) * u / duration) / eta)
}

/// A distribution on finitely many time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCdf {
    /// Strictly increasing support points.
    pub support: Vec<f64>,
    /// CDF value at each support point; the last one is 1.
    pub cdf: Vec<f64>,
}

impl StepCdf {
    /// F(x).
    pub fn at(&self, x: f64) -> f64 {
        let k = self.support.partition_point(|&s| s <= x);
        if k == 0 {
            0.0
        } else {
            self.cdf[k - 1]
        }
    }

    /// F(x-).
    pub fn before(&self, x: f64) -> f64 {
        let k = self.support.partition_point(|&s| s < x);
        if k == 0 {
            0.0
        } else {
            self.cdf[k - 1]
        }
    }

    pub fn masses(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cdf
            .iter()
            .map(|&c| {
                let m = c - prev;
                prev = c;
                m
            })
            .collect()
    }

    pub fn point_mass(at: f64) -> Self {
        Self { support: vec![at], cdf: vec![1.0] }
    }
}

/// Estimated arrival-time CDF of signal localizations.
///
/// The noise-corrected empirical CDF is evaluated at the distinct observed
/// times, projected onto nondecreasing sequences and clamped to [0, 1]. Any
/// mass still missing at the last time is put at `duration`.
pub fn mz1_hat(times: &[f64], eta: f64, duration: f64) -> Result<StepCdf> {
    check_eta(eta)?;
    if times.is_empty() {
        return Err(Error::InsufficientData("no time points".into()));
    }
    if !(duration > 0.0) {
        return Err(invalid("duration must be positive"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut support = Vec::new();
    let mut raw = Vec::new();
    for (i, &t) in sorted.iter().enumerate() {
        if i + 1 < sorted.len() && sorted[i + 1] == t {
            continue;
        }
        support.push(t);
        raw.push((((i + 1) as f64 / n) - (1.0 - eta) * t / duration) / eta);
    }
    let mut cdf: Vec<f64> = stats::isotonic_increasing(&raw).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let last = *cdf.last().unwrap();
    if last < 1.0 {
        if *support.last().unwrap() < duration {
            support.push(duration);
            cdf.push(1.0);
        } else {
            *cdf.last_mut().unwrap() = 1.0;
        }
    }
    Ok(StepCdf { support, cdf })
}

/// P(|T1 - T2| <= u) for independent T1, T2 with the given step CDF, for
/// each u in `us`.
pub fn gamma2_hat_many(cdf: &StepCdf, us: &[f64]) -> Vec<f64> {
    let masses = cdf.masses();
    par::map_slice(us, |&u| {
        cdf.support
            .iter()
            .zip(&masses)
            .map(|(&t, &m)| m * (cdf.at(t + u) - cdf.before(t - u)))
            .sum()
    })
}

pub fn gamma2_hat(cdf: &StepCdf, u: f64) -> f64 {
    gamma2_hat_many(cdf, &[u])[0]
}

/// Noise-corrected mean arrival time of signal localizations.
pub fn gamma2d_hat(times: &[f64], eta: f64, duration: f64) -> Result<f64> {
    check_eta(eta)?;
    if times.is_empty() {
        return Err(Error::InsufficientData("no time points".into()));
    }
    Ok((stats::mean(times) - (1.0 - eta) * duration / 2.0) / eta)
}

/// Smallest distance between two distinct points (sweep over x-sorted points).
pub fn min_nn_distance(points: &[[f64; 2]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 points".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut best = f64::INFINITY;
    for i in 1..sorted.len() {
        let p = sorted[i];
        for q in sorted[..i].iter().rev() {
            if p[0] - q[0] >= best {
                break;
            }
            best = best.min((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    Ok(best)
}
