//! The subcommands. Each one reads a config, writes files into an output
//! directory and prints nothing to stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use palm_blink::fit::{select_u_and_fit, FitFailure, FitResult, FitStage, SummaryContext};
use palm_blink::kinetics::{ground_truth_descriptors, GroundTruth};
use palm_blink::moments::{a2_b2, g_moments, gamma1_pu, nc_asymptotic};
use palm_blink::spatial_sim::{sample_ibcpp, sample_proteins, AcquisitionParams, SimulatedDataset};
use palm_blink::{rng, stats, BlinkModel, Dataset, Error};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{resolve, Mode, RunConfig};
use crate::output::{
    write_curve, write_file, write_json, FailureDoc, GroundTruthDocument, Header, ReplicateFailure, ResultDocument, Spread,
    StudySummary,
};
use crate::table::{read_localizations_file, write_localizations};
use crate::CliError;

/// Monte Carlo sample size for ground-truth descriptors.
const TRUTH_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub config: PathBuf,
    pub trim_start: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: PathBuf,
}

/// Loads the config, applies overrides and runs `mode` on a pool of the
/// requested size.
pub fn run(mode: Mode, opts: &Options) -> Result<(), CliError> {
    let mut config = RunConfig::load(&opts.config)?;
    if let Some(s) = opts.seed {
        config.seed = s;
    }
    if let Some(t) = opts.threads {
        config.threads = Some(t);
    }
    config.validate_for(mode)?;
    if let Some(s) = opts.trim_start {
        if !(s.is_finite() && s >= 0.0) {
            return Err(CliError::Config(format!("--trim-start {s} must be a nonnegative number of seconds")));
        }
    }
    std::fs::create_dir_all(&opts.out)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", opts.out.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    pool.install(|| match mode {
        Mode::Simulate => simulate(&config, opts),
        Mode::Fit => fit(&config, opts),
        Mode::Summaries => summaries(&config, opts),
        Mode::RefitStudy => refit_study(&config, opts),
        Mode::Moments => moments(&config, opts),
    })
}

fn trim(dataset: Dataset, start: Option<f64>) -> Result<Dataset, CliError> {
    match start {
        Some(s) if s > 0.0 => dataset.trim_start(s).map_err(|e| CliError::Data(e.to_string())),
        _ => Ok(dataset),
    }
}

fn acquisition(config: &RunConfig) -> AcquisitionParams {
    let sim = config.simulation.as_ref().expect("validated");
    let rec = &config.recording;
    AcquisitionParams {
        model: sim.model.clone(),
        frame_length: rec.frame_length,
        duration: rec.duration.expect("validated"),
        window: rec.window,
        noise_regions: rec.noise_regions.clone(),
        sigma: sim.sigma.clone(),
        noise_intensity: sim.noise_intensity,
        activation_margin: sim.activation_margin,
    }
}

/// One simulated recording, a pure function of the config and `seed`.
pub fn simulate_dataset(config: &RunConfig, seed: u64) -> Result<SimulatedDataset, CliError> {
    let sim = config.simulation.as_ref().ok_or_else(|| CliError::Config("missing [simulation] section".into()))?;
    let proteins = sample_proteins(&sim.layout, &config.recording.window, rng::derive_seed(seed, 0))
        .map_err(|e| CliError::Config(format!("simulation.layout: {e}")))?;
    sample_ibcpp(&proteins, &acquisition(config), rng::derive_seed(seed, 1))
        .map_err(|e| CliError::Config(format!("simulation: {e}")))
}

fn truth(config: &RunConfig) -> Result<(BlinkModel, GroundTruth), CliError> {
    let model = config.simulation.as_ref().expect("validated").model.clone();
    let gt = ground_truth_descriptors(&model, config.recording.frame_length, TRUTH_SAMPLES, rng::derive_seed(config.seed, 7))
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok((model, gt))
}

fn simulate(config: &RunConfig, opts: &Options) -> Result<(), CliError> {
    let sim = simulate_dataset(config, config.seed)?;
    let (dataset, membership) = match opts.trim_start {
        Some(s) if s > 0.0 => {
            let keep: Vec<bool> = sim.dataset.localizations.iter().map(|l| l.t > s).collect();
            let membership = sim.membership.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| *m).collect();
            (trim(sim.dataset, Some(s))?, membership)
        }
        _ => (sim.dataset, sim.membership),
    };
    let mut csv = Vec::new();
    write_localizations(&mut csv, &dataset)?;
    write_file(&opts.out.join("localizations.csv"), &csv)?;
    let (model, descriptors) = truth(config)?;
    let doc = GroundTruthDocument {
        header: Header::new(Mode::Simulate.name(), config, opts.trim_start),
        model,
        descriptors,
        proteins: sim.proteins,
        membership,
    };
    write_json(&opts.out.join("ground_truth.json"), &doc)
}

fn load_data(config: &RunConfig, opts: &Options) -> Result<(Dataset, crate::table::ReadReport, String), CliError> {
    let path = resolve(&opts.config, &config.data.as_ref().expect("validated").path);
    let bytes =
        std::fs::read(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let sha = hex::encode(Sha256::digest(&bytes));
    let (dataset, report) = read_localizations_file(&path, &config.recording)?;
    Ok((trim(dataset, opts.trim_start)?, report, sha))
}

/// Exit status for a failed fit.
pub fn failure_error(f: &FitFailure) -> CliError {
    let msg = f.to_string();
    match (&f.error, f.stage) {
        (_, FitStage::Config) => CliError::Config(msg),
        (Error::InvalidParameter(_), _) => CliError::Internal(msg),
        _ => CliError::Degenerate(msg),
    }
}

fn write_fit_curves(out: &Path, diag: &palm_blink::fit::Diagnostics) -> Result<(), CliError> {
    if let Some(c) = &diag.pcf {
        write_curve(&out.join("pcf.csv"), "r", &c.grid, &c.values)?;
    }
    if let Some(c) = &diag.autoconv {
        write_curve(&out.join("autoconv.csv"), "r", &c.grid, &c.values)?;
    }
    if let Some(s) = &diag.initial {
        write_curve(&out.join("zeta_initial.csv"), "u", &s.us, &s.zeta)?;
    }
    if let Some(s) = &diag.final_stage {
        write_curve(&out.join("zeta.csv"), "u", &s.us, &s.zeta)?;
        write_curve(&out.join("zeta_model.csv"), "u", &s.us, &s.model)?;
        write_curve(&out.join("gamma1_model.csv"), "u", &s.us, &s.gamma1)?;
    }
    Ok(())
}

fn warn(diag: &palm_blink::fit::Diagnostics) {
    for w in &diag.warnings {
        eprintln!("warning: {w}");
    }
}

fn fit(config: &RunConfig, opts: &Options) -> Result<(), CliError> {
    let (dataset, report, sha) = load_data(config, opts)?;
    let outcome = select_u_and_fit(&dataset, &config.fit, config.seed);
    let mut doc = ResultDocument {
        header: Header::new(Mode::Fit.name(), config, opts.trim_start),
        config: config.echo(),
        input_sha256: sha,
        input: report,
        result: None,
        failure: None,
    };
    let status = match outcome {
        Ok(r) => {
            warn(&r.diagnostics);
            write_fit_curves(&opts.out, &r.diagnostics)?;
            doc.result = Some(r);
            Ok(())
        }
        Err(f) => {
            warn(&f.partial);
            write_fit_curves(&opts.out, &f.partial)?;
            let e = failure_error(&f);
            doc.failure = Some(FailureDoc::from(f));
            Err(e)
        }
    };
    write_json(&opts.out.join("result.json"), &doc)?;
    status
}

fn summaries(config: &RunConfig, opts: &Options) -> Result<(), CliError> {
    let (dataset, _, _) = load_data(config, opts)?;
    let fitted = select_u_and_fit(&dataset, &config.fit, config.seed);
    let diag = match &fitted {
        Ok(r) => &r.diagnostics,
        Err(f) => &f.partial,
    };
    warn(diag);
    write_fit_curves(&opts.out, diag)?;
    let r = fitted.map_err(|f| failure_error(&f))?;
    let (ctx, _) = SummaryContext::build(&dataset, &config.fit, config.seed).map_err(|f| failure_error(&f))?;
    let us = &r.diagnostics.final_stage.as_ref().expect("successful fit has a final stage").us;
    let curves = ctx.lag_markstats(us).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut text = String::from("u,r,value\n");
    for (u, c) in us.iter().zip(&curves) {
        for (r, v) in c.grid.iter().zip(&c.values) {
            text.push_str(&format!("{u},{r},{v}\n"));
        }
    }
    write_file(&opts.out.join("markstats.csv"), text.as_bytes())
}

/// Per-replicate outcome of a refit study.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub outcome: Result<FitResult, (FitStage, Error)>,
}

/// Estimates reported per replicate, in column order.
pub const STUDY_COLUMNS: [&str; 14] = [
    "activation_rate_x1000",
    "activation_rate_corrected_x1000",
    "dark_entry",
    "dark_return",
    "bleach",
    "mean_cluster_size",
    "bleach_probability",
    "q25",
    "q50",
    "q75",
    "q99",
    "eta",
    "proteins_observed",
    "proteins_total",
];

pub fn study_values(r: &FitResult) -> [f64; 14] {
    let d = &r.descriptors;
    [
        r.activation_rate * 1e3,
        r.activation_rate_corrected * 1e3,
        r.dark_entry,
        r.dark_return,
        r.bleach,
        d.mean_cluster_size,
        d.bleach_probability,
        d.lifetime_quantiles[0],
        d.lifetime_quantiles[1],
        d.lifetime_quantiles[2],
        d.lifetime_quantiles[3],
        r.eta,
        d.proteins_observed,
        d.proteins_total,
    ]
}

/// Simulates and refits replicate `index`.
pub fn run_replicate(config: &RunConfig, index: usize, trim_start: Option<f64>) -> ReplicateRecord {
    let seed = rng::derive_seed(config.seed, index as u64);
    let outcome = simulate_dataset(config, seed)
        .map_err(|e| (FitStage::Config, Error::InvalidParameter(e.to_string())))
        .and_then(|sim| {
            trim(sim.dataset, trim_start).map_err(|e| (FitStage::Config, Error::InvalidParameter(e.to_string())))
        })
        .and_then(|ds| select_u_and_fit(&ds, &config.fit, rng::derive_seed(seed, 2)).map_err(|f| (f.stage, f.error)));
    ReplicateRecord { replicate: index, seed, outcome }
}

/// Average and sample standard deviation of each estimate over the
/// successful replicates.
pub fn summarize(records: &[ReplicateRecord]) -> (usize, Vec<ReplicateFailure>, BTreeMap<String, Spread>) {
    let ok: Vec<[f64; 14]> = records.iter().filter_map(|r| r.outcome.as_ref().ok()).map(study_values).collect();
    let failures = records
        .iter()
        .filter_map(|r| match &r.outcome {
            Err((stage, error)) => Some(ReplicateFailure { replicate: r.replicate, stage: *stage, error: error.clone() }),
            Ok(_) => None,
        })
        .collect();
    let mut params = BTreeMap::new();
    if !ok.is_empty() {
        for (j, name) in STUDY_COLUMNS.iter().enumerate() {
            let xs: Vec<f64> = ok.iter().map(|v| v[j]).collect();
            let sd = (xs.len() >= 2).then(|| stats::sample_sd(&xs));
            params.insert(name.to_string(), Spread { avg: stats::mean(&xs), sd });
        }
    }
    (ok.len(), failures, params)
}

fn replicate_csv(records: &[ReplicateRecord]) -> String {
    let mut text = format!("replicate,seed,status,{},stage,message\n", STUDY_COLUMNS.join(","));
    for r in records {
        match &r.outcome {
            Ok(fit) => {
                let vals: Vec<String> = study_values(fit).iter().map(|v| v.to_string()).collect();
                text.push_str(&format!("{},{},ok,{},,\n", r.replicate, r.seed, vals.join(",")));
            }
            Err((stage, e)) => {
                let blanks = ",".repeat(STUDY_COLUMNS.len() - 1);
                let stage = serde_json::to_string(stage).expect("stage serializes");
                let msg = e.to_string().replace('"', "'");
                text.push_str(&format!(
                    "{},{},failed,{blanks},{},\"{msg}\"\n",
                    r.replicate,
                    r.seed,
                    stage.trim_matches('"')
                ));
            }
        }
    }
    text
}

/// Runs every replicate of the study; records are in replicate order.
pub fn run_study(config: &RunConfig, trim_start: Option<f64>) -> Vec<ReplicateRecord> {
    let n = config.study.as_ref().map(|s| s.replicates).unwrap_or(0);
    (0..n).into_par_iter().map(|i| run_replicate(config, i, trim_start)).collect()
}

fn refit_study(config: &RunConfig, opts: &Options) -> Result<(), CliError> {
    let records = run_study(config, opts.trim_start);
    write_file(&opts.out.join("replicates.csv"), replicate_csv(&records).as_bytes())?;
    let (used, failures, parameters) = summarize(&records);
    let (model, truth) = truth(config)?;
    let summary = StudySummary {
        header: Header::new(Mode::RefitStudy.name(), config, opts.trim_start),
        model,
        truth,
        replicates: records.len(),
        used,
        failed: failures.len(),
        failures,
        parameters,
    };
    write_json(&opts.out.join("summary.json"), &summary)?;
    if used == 0 {
        return Err(CliError::Degenerate("every replicate failed".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MomentsDocument {
    #[serde(flatten)]
    header: Header,
    rates: palm_blink::KineticRates,
    frame_length: f64,
    mean_cluster_size: f64,
    cluster_size_second_moment: f64,
    nc: f64,
    nc_limit: f64,
    bleach_probability: f64,
    a2: f64,
    b2: f64,
}

fn moments(config: &RunConfig, opts: &Options) -> Result<(), CliError> {
    let rates = match &config.simulation.as_ref().expect("validated").model {
        BlinkModel::FourState(r) => *r,
        BlinkModel::MultiDark(_) => {
            return Err(CliError::Config("moments are available for the four-state model only".into()))
        }
    };
    let delta = config.recording.frame_length;
    let internal = |e: Error| CliError::Internal(e.to_string());
    let g = g_moments(&rates, delta).map_err(internal)?;
    let (a2, b2) = a2_b2(&rates, delta).map_err(internal)?;
    let doc = MomentsDocument {
        header: Header::new(Mode::Moments.name(), config, None),
        rates,
        frame_length: delta,
        mean_cluster_size: g.mean,
        cluster_size_second_moment: g.second_moment,
        nc: g.nc,
        nc_limit: nc_asymptotic(&rates).map_err(internal)? / delta,
        bleach_probability: rates.bleach_probability(),
        a2,
        b2,
    };
    write_json(&opts.out.join("moments.json"), &doc)?;
    let m = &config.moments;
    let us: Vec<f64> = (0..m.lag_points).map(|k| m.lag_span * k as f64 / (m.lag_points - 1) as f64).collect();
    let c = gamma1_pu(&rates, delta, &us).map_err(internal)?;
    write_curve(&opts.out.join("gamma1.csv"), "u", &c.grid, &c.values)
}
