//! Simulation of complete localization datasets: protein layouts, blinking
//! clusters with Gaussian localization error, and Poisson background noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kinetics::{discretize_trace, BlinkModel};
use crate::{par, rng};

/// Axis-aligned rectangle in nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Window {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let w = Self { x_min, x_max, y_min, y_max };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(invalid(format!("window {self:?} has no area")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.x_min < other.x_max && other.x_min < self.x_max && self.y_min < other.y_max && other.y_min < self.y_max
    }

    pub fn scaled(&self, s: f64) -> Window {
        Window { x_min: self.x_min * s, x_max: self.x_max * s, y_min: self.y_min * s, y_max: self.y_max * s }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            self.x_min + self.width() * rng.random::<f64>(),
            self.y_min + self.height() * rng.random::<f64>(),
        ]
    }
}

/// One localization: position (nm), time (s) and reported uncertainty (nm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub sigma: f64,
}

/// A localization table over `window x [0, duration]`, with optional
/// background-only regions used to estimate the noise intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub localizations: Vec<Localization>,
    pub window: Window,
    pub duration: f64,
    pub frame_length: f64,
    pub noise_regions: Vec<Window>,
}

impl Dataset {
    pub fn new(
        localizations: Vec<Localization>,
        window: Window,
        duration: f64,
        frame_length: f64,
        noise_regions: Vec<Window>,
    ) -> Result<Self> {
        let ds = Self { localizations, window, duration, frame_length, noise_regions };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid("duration must be positive"));
        }
        if !(self.frame_length.is_finite() && self.frame_length > 0.0) {
            return Err(invalid("frame length must be positive"));
        }
        for (i, r) in self.noise_regions.iter().enumerate() {
            r.validate()?;
            if r.overlaps(&self.window) {
                return Err(invalid(format!("noise region {i} overlaps the window")));
            }
        }
        for (i, l) in self.localizations.iter().enumerate() {
            if !(l.x.is_finite() && l.y.is_finite() && l.t.is_finite()) {
                return Err(invalid(format!("localization {i} is not finite")));
            }
            if !(l.sigma.is_finite() && l.sigma > 0.0) {
                return Err(invalid(format!("localization {i} has non-positive uncertainty")));
            }
            if !(l.t > 0.0 && l.t <= self.duration) {
                return Err(invalid(format!("localization {i} time {} outside (0, {}]", l.t, self.duration)));
            }
            if !self.in_observed_area(l.x, l.y) {
                return Err(invalid(format!("localization {i} outside window and noise regions")));
            }
        }
        Ok(())
    }

    fn in_observed_area(&self, x: f64, y: f64) -> bool {
        self.window.contains(x, y) || self.noise_regions.iter().any(|r| r.contains(x, y))
    }

    /// Localizations inside the analysis window.
    pub fn roi(&self) -> impl Iterator<Item = &Localization> {
        self.localizations.iter().filter(|l| self.window.contains(l.x, l.y))
    }

    pub fn roi_count(&self) -> usize {
        self.roi().count()
    }

    /// Number of localizations in the noise regions.
    pub fn noise_count(&self) -> usize {
        self.localizations
            .iter()
            .filter(|l| !self.window.contains(l.x, l.y) && self.noise_regions.iter().any(|r| r.contains(l.x, l.y)))
            .count()
    }

    pub fn noise_area(&self) -> f64 {
        self.noise_regions.iter().map(Window::area).sum()
    }

    /// Drops localizations at or before `start` and shifts the rest so the
    /// recording begins at time 0.
    pub fn trim_start(&self, start: f64) -> Result<Dataset> {
        if !(start.is_finite() && start >= 0.0 && start < self.duration) {
            return Err(invalid(format!("trim start {start} outside [0, {})", self.duration)));
        }
        let localizations = self
            .localizations
            .iter()
            .filter(|l| l.t > start)
            .map(|l| Localization { t: l.t - start, ..*l })
            .collect();
        Ok(Dataset { localizations, duration: self.duration - start, ..self.clone() })
    }

    /// Multiplies every spatial quantity by `s`.
    pub fn scaled(&self, s: f64) -> Dataset {
        Dataset {
            localizations: self
                .localizations
                .iter()
                .map(|l| Localization { x: l.x * s, y: l.y * s, sigma: l.sigma * s, ..*l })
                .collect(),
            window: self.window.scaled(s),
            noise_regions: self.noise_regions.iter().map(|w| w.scaled(s)).collect(),
            ..self.clone()
        }
    }
}

/// Distribution of the per-localization uncertainty (nm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSampler {
    Fixed { value: f64 },
    /// Gamma with shape/rate parameterization.
    Gamma { shape: f64, rate: f64 },
    /// Resampling with replacement from observed uncertainties.
    Empirical { values: Vec<f64> },
}

impl SigmaSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SigmaSampler::Fixed { value } => value.is_finite() && *value > 0.0,
            SigmaSampler::Gamma { shape, rate } => shape.is_finite() && rate.is_finite() && *shape > 0.0 && *rate > 0.0,
            SigmaSampler::Empirical { values } => {
                !values.is_empty() && values.iter().all(|v| v.is_finite() && *v > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid sigma sampler {self:?}")))
        }
    }

    /// Returns a sampling closure.
    pub fn sampler(&self) -> Result<impl Fn(&mut rng::SimRng) -> f64 + Sync + '_> {
        self.validate()?;
        let gamma = match self {
            SigmaSampler::Gamma { shape, rate } => Some(Gamma::new(*shape, 1.0 / rate).map_err(|e| invalid(e.to_string()))?),
            _ => None,
        };
        Ok(move |r: &mut rng::SimRng| match self {
            SigmaSampler::Fixed { value } => *value,
            SigmaSampler::Gamma { .. } => gamma.as_ref().map(|g| g.sample(r)).unwrap_or(f64::NAN),
            SigmaSampler::Empirical { values } => values[r.random_range(0..values.len())],
        })
    }
}

/// Spatial arrangement of the proteins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProteinLayout {
    /// `n` independent uniform points.
    Csr { n: usize },
    /// Uniform background plus Gaussian clusters around uniform centers.
    GaussianClusters { background: usize, clusters: usize, per_cluster: usize, sd: f64 },
    /// Points uniform by arc length along polylines plus uniform background.
    /// An empty polyline list asks for three seeded random-walk fibers.
    Fibers {
        on_fibers: usize,
        background: usize,
        #[serde(default)]
        polylines: Vec<Vec<[f64; 2]>>,
    },
    /// Exactly `n` uniform points (a Poisson process conditioned on its count).
    ConditionedPoisson { n: usize },
}

impl ProteinLayout {
    pub fn count(&self) -> usize {
        match self {
            ProteinLayout::Csr { n } | ProteinLayout::ConditionedPoisson { n } => *n,
            ProteinLayout::GaussianClusters { background, clusters, per_cluster, .. } => background + clusters * per_cluster,
            ProteinLayout::Fibers { on_fibers, background, .. } => on_fibers + background,
        }
    }
}

/// Draws protein positions. Cluster offspring falling outside the window are
/// redrawn so the count is always [`ProteinLayout::count`].
pub fn sample_proteins(layout: &ProteinLayout, window: &Window, seed: u64) -> Result<Vec<[f64; 2]>> {
    window.validate()?;
    let mut rng = rng::stream(seed, 0);
    let mut points = Vec::with_capacity(layout.count());
    match layout {
        ProteinLayout::Csr { n } | ProteinLayout::ConditionedPoisson { n } => {
            points.extend((0..*n).map(|_| window.sample(&mut rng)));
        }
        ProteinLayout::GaussianClusters { background, clusters, per_cluster, sd } => {
            if !(sd.is_finite() && *sd > 0.0) {
                return Err(invalid("cluster sd must be positive"));
            }
            let normal = Normal::new(0.0, *sd).map_err(|e| invalid(e.to_string()))?;
            points.extend((0..*background).map(|_| window.sample(&mut rng)));
            for _ in 0..*clusters {
                let c = window.sample(&mut rng);
                for _ in 0..*per_cluster {
                    loop {
                        let p = [c[0] + normal.sample(&mut rng), c[1] + normal.sample(&mut rng)];
                        if window.contains(p[0], p[1]) {
                            points.push(p);
                            break;
                        }
                    }
                }
            }
        }
        ProteinLayout::Fibers { on_fibers, background, polylines } => {
            let generated;
            let lines = if polylines.is_empty() {
                generated = random_fibers(window, 3, &mut rng);
                &generated
            } else {
                polylines
            };
            let segments: Vec<([f64; 2], [f64; 2], f64)> = lines
                .iter()
                .flat_map(|l| l.windows(2).map(|s| (s[0], s[1], (s[1][0] - s[0][0]).hypot(s[1][1] - s[0][1]))))
                .filter(|s| s.2 > 0.0)
                .collect();
            if *on_fibers > 0 && segments.is_empty() {
                return Err(invalid("fiber layout needs at least one segment of positive length"));
            }
            let mut cumulative = Vec::with_capacity(segments.len());
            let mut total = 0.0;
            for s in &segments {
                total += s.2;
                cumulative.push(total);
            }
            for _ in 0..*on_fibers {
                let target = rng.random::<f64>() * total;
                let i = cumulative.partition_point(|&c| c < target).min(segments.len() - 1);
                let (a, b, len) = segments[i];
                let start = if i == 0 { 0.0 } else { cumulative[i - 1] };
                let f = ((target - start) / len).clamp(0.0, 1.0);
                points.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            }
            points.extend((0..*background).map(|_| window.sample(&mut rng)));
        }
    }
    Ok(points)
}

/// Smooth random walks reflected at the window edges.
fn random_fibers<R: Rng + ?Sized>(window: &Window, count: usize, rng: &mut R) -> Vec<Vec<[f64; 2]>> {
    let step = window.width().min(window.height()) / 100.0;
    let turn = Normal::new(0.0, 0.1).expect("fixed sd");
    (0..count)
        .map(|_| {
            let mut p = window.sample(rng);
            let mut heading = rng.random::<f64>() * 2.0 * PI;
            let mut line = vec![p];
            for _ in 0..150 {
                heading += turn.sample(rng);
                let mut q = [p[0] + step * heading.cos(), p[1] + step * heading.sin()];
                if q[0] < window.x_min || q[0] > window.x_max {
                    heading = PI - heading;
                    q[0] = q[0].clamp(window.x_min, window.x_max);
                }
                if q[1] < window.y_min || q[1] > window.y_max {
                    heading = -heading;
                    q[1] = q[1].clamp(window.y_min, window.y_max);
                }
                line.push(q);
                p = q;
            }
            line
        })
        .collect()
}

/// Settings of one simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionParams {
    pub model: BlinkModel,
    pub frame_length: f64,
    pub duration: f64,
    pub window: Window,
    pub noise_regions: Vec<Window>,
    pub sigma: SigmaSampler,
    /// Background intensity per nm^2 over the whole recording.
    pub noise_intensity: f64,
    /// If set, proteins activating after `duration - margin` are discarded.
    pub activation_margin: Option<f64>,
}

/// A simulated dataset together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    /// Protein index of each localization, -1 for noise.
    pub membership: Vec<i64>,
    pub proteins: Vec<[f64; 2]>,
}

/// Simulates localizations for `proteins` under `params`.
///
/// Each protein uses its own random stream, so the result does not depend on
/// how the work is scheduled. Localizations displaced outside the window are
/// lost, as they would be on a camera.
pub fn sample_ibcpp(proteins: &[[f64; 2]], params: &AcquisitionParams, seed: u64) -> Result<SimulatedDataset> {
    params.model.validate()?;
    params.window.validate()?;
    if !(params.duration.is_finite() && params.duration > 0.0) {
        return Err(invalid("duration must be positive"));
    }
    if !(params.frame_length.is_finite() && params.frame_length > 0.0) {
        return Err(invalid("frame length must be positive"));
    }
    if !(params.noise_intensity.is_finite() && params.noise_intensity >= 0.0) {
        return Err(invalid("noise intensity must be nonnegative"));
    }
    let draw_sigma = params.sigma.sampler()?;
    let cutoff = params.duration - params.activation_margin.unwrap_or(0.0);
    let normal = rand_distr::StandardNormal;

    let per_protein: Vec<Result<Vec<(Localization, i64)>>> = par::map_indexed(proteins.len(), |k| {
        let mut rng = rng::stream(seed, k as u64);
        let trace = params.model.simulate_trace(&mut rng);
        if trace.activation_time() > cutoff {
            return Ok(Vec::new());
        }
        let Some(cluster) = discretize_trace(&trace, params.frame_length)? else {
            return Ok(Vec::new());
        };
        let [px, py] = proteins[k];
        let mut out = Vec::new();
        for t in cluster.times() {
            if t > params.duration {
                break;
            }
            let sigma = draw_sigma(&mut rng);
            let dx: f64 = rng.sample(normal);
            let dy: f64 = rng.sample(normal);
            let (x, y) = (px + sigma * dx, py + sigma * dy);
            if params.window.contains(x, y) {
                out.push((Localization { x, y, t, sigma }, k as i64));
            }
        }
        Ok(out)
    });

    let mut rows = Vec::new();
    for r in per_protein {
        rows.extend(r?);
    }

    let mut noise_rng = rng::stream(seed, u64::MAX);
    for region in std::iter::once(&params.window).chain(&params.noise_regions) {
        let mean = params.noise_intensity * region.area();
        if mean <= 0.0 {
            continue;
        }
        let count = Poisson::new(mean).map_err(|e| invalid(e.to_string()))?.sample(&mut noise_rng) as u64;
        for _ in 0..count {
            let [x, y] = region.sample(&mut noise_rng);
            // (0, b]: 1 - U avoids an exact zero
            let t = params.duration * (1.0 - noise_rng.random::<f64>());
            let sigma = draw_sigma(&mut noise_rng);
            rows.push((Localization { x, y, t, sigma }, -1));
        }
    }

    rows.sort_by(|a, b| {
        a.0.t
            .total_cmp(&b.0.t)
            .then(a.0.x.total_cmp(&b.0.x))
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.1.cmp(&b.1))
    });
    let (localizations, membership) = rows.into_iter().unzip();
    let dataset = Dataset::new(
        localizations,
        params.window,
        params.duration,
        params.frame_length,
        params.noise_regions.clone(),
    )?;
    Ok(SimulatedDataset { dataset, membership, proteins: proteins.to_vec() })
}

/// Density at distance `r` of the difference of two independent isotropic
/// Gaussian errors with standard deviations `xi1` and `xi2`.
pub fn gaussian_difference_density(xi1: f64, xi2: f64, r: f64) -> f64 {
    let s2 = xi1 * xi1 + xi2 * xi2;
    (-r * r / (2.0 * s2)).exp() / (2.0 * PI * s2)
}

/// Averages [`gaussian_difference_density`] over the uncertainty pairs
/// (stored as the sums of squares) for every r in `rs`.
pub fn autoconv_from_pairs(sum_squares: &[f64], rs: &[f64]) -> Vec<f64> {
    let inv: Vec<(f64, f64)> = sum_squares.iter().map(|s2| (-0.5 / s2, 1.0 / (2.0 * PI * s2))).collect();
    let n = sum_squares.len() as f64;
    par::map_slice(rs, |&r| {
        let r2 = r * r;
        inv.iter().map(|&(a, c)| c * (a * r2).exp()).sum::<f64>() / n
    })
}

/// Draws `n_pairs` independent uncertainty pairs and returns their sums of
/// squares.
pub fn sigma_pair_sum_squares(sampler: &SigmaSampler, n_pairs: usize, seed: u64) -> Result<Vec<f64>> {
    let draw = sampler.sampler()?;
    let mut rng = rng::stream(seed, 0);
    Ok((0..n_pairs)
        .map(|_| {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            a * a + b * b
        })
        .collect())
}

/// Autoconvolution of the localization error density at distances `rs`.
/// Exact for a fixed uncertainty, Monte Carlo over `n_pairs` seeded pairs
/// otherwise.
pub fn autoconv_exact(sampler: &SigmaSampler, rs: &[f64], n_pairs: usize, seed: u64) -> Result<Vec<f64>> {
    if rs.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(invalid("distances must be nonnegative"));
    }
    match sampler {
        SigmaSampler::Fixed { value } => {
            sampler.validate()?;
            Ok(rs.iter().map(|&r| gaussian_difference_density(*value, *value, r)).collect())
        }
        _ => {
            if n_pairs == 0 {
                return Err(invalid("need at least one sigma pair"));
            }
            Ok(autoconv_from_pairs(&sigma_pair_sum_squares(sampler, n_pairs, seed)?, rs))
        }
    }
}
