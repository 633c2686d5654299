//! Hot paths of the estimator, run on one worker and on the default pool.
//!
//! Built without the `parallel` feature (`cargo bench --no-default-features`)
//! everything runs on plain iterators and the thread count is ignored.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use palm_blink::fit::{fit_rates, FitConfig, SummaryContext};
use palm_blink::kinetics::presets;
use palm_blink::moments::Gamma1Evaluator;
use palm_blink::spatial_sim::{sample_ibcpp, sample_proteins, AcquisitionParams, ProteinLayout, SigmaSampler};
use palm_blink::summaries::{EdgeCorrection, PairTable};
use palm_blink::{Dataset, Window};

fn dataset() -> Dataset {
    let window = Window::new(0.0, 5000.0, 0.0, 5000.0).unwrap();
    let proteins = sample_proteins(&ProteinLayout::Csr { n: 500 }, &window, 1).unwrap();
    let params = AcquisitionParams {
        model: presets::short_lived().into(),
        frame_length: 0.04,
        duration: 3000.0,
        window,
        noise_regions: vec![],
        sigma: SigmaSampler::Gamma { shape: 6.5, rate: 0.375 },
        noise_intensity: 0.0,
        activation_margin: None,
    };
    sample_ibcpp(&proteins, &params, 1).unwrap().dataset
}

fn thread_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if cfg!(feature = "parallel") && all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn label(threads: usize) -> String {
    if cfg!(feature = "parallel") {
        format!("rayon-{threads}")
    } else {
        "sequential".into()
    }
}

fn benches(c: &mut Criterion) {
    let ds = dataset();
    let config = FitConfig::default();
    let (ctx, _) = SummaryContext::build(&ds, &config, 1).unwrap();
    let us: Vec<f64> = (0..50).map(|k| k as f64 * 0.3).collect();
    let data = ctx.zeta_data(&us).unwrap();
    let roi: Vec<_> = ds.roi().copied().collect();
    let r_max = *ctx.r_grid.grid.last().unwrap() + ctx.bandwidth;
    let rates = presets::short_lived();
    let quick = FitConfig { multistarts: 2, ..FitConfig::default() };

    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    for threads in thread_counts() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let id = label(threads);
        group.bench_function(BenchmarkId::new("pair_table", &id), |b| {
            b.iter(|| pool.install(|| PairTable::build(&roi, &ds.window, r_max, EdgeCorrection::Translation).unwrap()))
        });
        group.bench_function(BenchmarkId::new("lag_markstats_50", &id), |b| {
            b.iter(|| pool.install(|| ctx.lag_markstats(&us).unwrap()))
        });
        group.bench_function(BenchmarkId::new("gamma1_50_lags", &id), |b| {
            let eval = Gamma1Evaluator::new(&us, 0.04).unwrap();
            b.iter(|| pool.install(|| eval.evaluate(&rates)))
        });
        group.bench_function(BenchmarkId::new("rate_fit_2_starts", &id), |b| {
            b.iter(|| pool.install(|| fit_rates(&data, 0.04, &quick, 1).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(estimator_benches, benches);
criterion_main!(estimator_benches);
