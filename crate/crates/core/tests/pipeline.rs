//! End-to-end checks of the estimation pipeline on simulated data.

use palm_blink::fit::{select_u_and_fit, FitConfig, FitStage, SummaryContext};
use palm_blink::kinetics::presets;
use palm_blink::moments::g_moments;
use palm_blink::spatial_sim::{
    sample_ibcpp, sample_proteins, AcquisitionParams, ProteinLayout, SigmaSampler, SimulatedDataset,
};
use palm_blink::summaries::{gamma2_hat, mz1_hat};
use palm_blink::{stats, BlinkModel, Dataset, Error, KineticRates, Localization, Window};

fn window() -> Window {
    Window::new(0.0, 5000.0, 0.0, 5000.0).unwrap()
}

fn simulate(model: BlinkModel, seed: u64) -> SimulatedDataset {
    let proteins = sample_proteins(&ProteinLayout::Csr { n: 500 }, &window(), seed).unwrap();
    let params = AcquisitionParams {
        model,
        frame_length: 0.04,
        duration: 3000.0,
        window: window(),
        noise_regions: vec![],
        sigma: SigmaSampler::Gamma { shape: 6.5, rate: 0.375 },
        noise_intensity: 0.0,
        activation_margin: None,
    };
    sample_ibcpp(&proteins, &params, seed).unwrap()
}

#[test]
fn short_lived_fit_is_sane_and_reproducible() {
    let sim = simulate(presets::short_lived().into(), 11);
    let config = FitConfig::default();
    let fit = select_u_and_fit(&sim.dataset, &config, 5).unwrap();
    let d = &fit.diagnostics;

    assert!((fit.dark_entry / 6.0 - 1.0).abs() < 0.5, "{fit:?}");
    assert!((fit.dark_return - 1.0).abs() < 0.4);
    assert!((fit.bleach / 3.0 - 1.0).abs() < 0.3);
    assert!((fit.activation_rate_corrected * 1e3 - 4.0).abs() < 0.8);
    assert!(d.model_correlation.unwrap() >= 0.8);
    assert_eq!(d.final_stage.as_ref().unwrap().us.len(), 50);
    assert_eq!(d.initial.as_ref().unwrap().us.len(), 30);
    assert!(fit.descriptors.proteins_total >= fit.descriptors.proteins_observed);
    assert!((fit.descriptors.proteins_observed / 500.0 - 1.0).abs() < 0.25);
    // no noise region in this dataset
    assert_eq!(fit.eta, 1.0);
    assert!(d.warnings.iter().any(|w| w.contains("noise region")));

    let again = select_u_and_fit(&sim.dataset, &config, 5).unwrap();
    assert_eq!(fit, again);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let threaded = pool.install(|| select_u_and_fit(&sim.dataset, &config, 5).unwrap());
    assert_eq!(fit, threaded);
}

#[test]
fn rate_estimates_do_not_depend_on_spatial_units() {
    let sim = simulate(presets::short_lived().into(), 12);
    let config = FitConfig::default();
    let a = select_u_and_fit(&sim.dataset, &config, 1).unwrap();
    let b = select_u_and_fit(&sim.dataset.scaled(2.0), &config, 1).unwrap();
    for (x, y) in [
        (a.dark_entry, b.dark_entry),
        (a.dark_return, b.dark_return),
        (a.bleach, b.bleach),
        (a.activation_rate, b.activation_rate),
    ] {
        assert!((x / y - 1.0).abs() < 1e-6, "{x} vs {y}");
    }
    assert!((a.lambda_o / b.lambda_o - 4.0).abs() < 1e-12);
}

#[test]
fn pure_noise_is_degenerate_before_fitting() {
    let w = Window::new(0.0, 1000.0, 0.0, 1000.0).unwrap();
    let noise = Window::new(2000.0, 3000.0, 0.0, 1000.0).unwrap();
    let mut r = palm_blink::rng::stream(3, 0);
    use rand::Rng;
    let mut ls = Vec::new();
    for (win, n) in [(w, 400), (noise, 400)] {
        for _ in 0..n {
            ls.push(Localization {
                x: r.random_range(win.x_min..win.x_max),
                y: r.random_range(win.y_min..win.y_max),
                t: r.random_range(0.001..100.0),
                sigma: 15.0,
            });
        }
    }
    let ds = Dataset::new(ls, w, 100.0, 0.04, vec![noise]).unwrap();
    let err = select_u_and_fit(&ds, &FitConfig::default(), 1).unwrap_err();
    assert_eq!(err.stage, FitStage::SignalFraction);
    assert!(matches!(err.error, Error::DegenerateFit(_)));
    assert!(err.partial.eta.is_some());
    assert!(err.partial.initial.is_none());
}

// At lags beyond every cluster's duration the weight is (1 - gamma2) * nc.
#[test]
fn cluster_weight_at_large_lag() {
    let rates = presets::short_lived();
    let nc = g_moments(&rates, 0.04).unwrap().nc;
    let u = 200.0;
    let diffs: Vec<f64> = (0..20)
        .map(|rep| {
            let sim = simulate(rates.into(), 100 + rep);
            let (ctx, _) = SummaryContext::build(&sim.dataset, &FitConfig::default(), rep).unwrap();
            let z = ctx.zeta_data(&[u]).unwrap();
            let cdf = mz1_hat(ctx.times(), 1.0, sim.dataset.duration).unwrap();
            z.zeta[0] - (1.0 - gamma2_hat(&cdf, u)) * nc
        })
        .collect();
    let m = stats::mean(&diffs);
    let se = stats::sample_sd(&diffs) / 20f64.sqrt();
    assert!(m.abs() <= 3.0 * se, "mean difference {m}, standard error {se}");
}

#[test]
fn activation_rate_in_observed_data_regime() {
    let rates = KineticRates { activation: 3.749e-3, dark_entry: 6.307, dark_return: 0.703, bleach: 3.156 };
    let sim = simulate(rates.into(), 21);
    let fit = select_u_and_fit(&sim.dataset, &FitConfig::default(), 2).unwrap();
    let rf = fit.activation_rate_corrected * 1e3;
    assert!((3.0..=4.5).contains(&rf), "{rf}");
}

#[test]
fn trimmed_data_starts_at_zero() {
    let sim = simulate(presets::short_lived().into(), 13);
    let trimmed = sim.dataset.trim_start(300.0).unwrap();
    assert!(trimmed.localizations.iter().all(|l| l.t > 0.0));
    assert_eq!(trimmed.duration, 2700.0);
    let kept = sim.dataset.localizations.iter().filter(|l| l.t > 300.0).count();
    assert_eq!(trimmed.localizations.len(), kept);
}
