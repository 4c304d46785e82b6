use ndarray::Array2;
use proptest::prelude::*;
use qcpr::detector::{add_twin_shot_noise, detect, DetectorModel, NoiseKey};
use qcpr::optics::BeamTriples;
use qcpr::quantumcorr::*;
use qcpr::wavefield::GridSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_pair() -> (Array2<f64>, Array2<f64>) {
    let spec = GridSpec::new(512, 6e-4, 6.4e-7).unwrap();
    let set = detect(&BeamTriples::flat(spec, 1e-5, 4.0), &DetectorModel::default()).unwrap();
    (set.probe[1].values().clone(), set.reference[1].values().clone())
}

fn independent_pair(mean: f64, n: usize) -> (Array2<f64>, Array2<f64>) {
    let m = Array2::from_elem((n, n), mean);
    let (p, _) = add_twin_shot_noise(&m, &m, 0.0, NoiseKey { seed: 1, plane: 0 }).unwrap();
    let (r, _) = add_twin_shot_noise(&m, &m, 0.0, NoiseKey { seed: 2, plane: 0 }).unwrap();
    (p.to_f64(), r.to_f64())
}

#[test]
fn eta_c_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..20 {
        let d = rng.random_range(0.2..10.0);
        let eps = rng.random_range(0.0..1.0);
        for spread in [0.0, DEFAULT_TWIN_SPREAD] {
            let analytic = eta_c_analytic(d, eps, spread).unwrap();
            let (mc, se) = eta_c_monte_carlo(d, eps, spread, 200_000, i);
            assert!(
                (analytic - mc).abs() <= 3.0 * se.max(1e-4),
                "d {d} ε {eps} σ {spread}: analytic {analytic} vs MC {mc} ± {se}"
            );
        }
    }
}

#[test]
fn eta_c_monotone_on_grid() {
    for spread in [0.0, 0.3, DEFAULT_TWIN_SPREAD] {
        let ds: Vec<f64> = (0..50).map(|i| 0.1 * 1.12f64.powi(i)).collect();
        let eps: Vec<f64> = (0..50).map(|i| i as f64 * 0.04).collect();
        for &e in &[0.0, 0.25, 0.5, 1.0] {
            let v: Vec<f64> = ds.iter().map(|&d| eta_c_analytic(d, e, spread).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[1] >= w[0] - 1e-12), "σ {spread} ε {e}: {v:?}");
        }
        for &d in &[0.5, 1.0, 2.0, 4.0] {
            let v: Vec<f64> = eps.iter().map(|&e| eta_c_analytic(d, e, spread).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-12), "σ {spread} d {d}: {v:?}");
        }
    }
}

#[test]
fn eta_c_large_and_small_cells() {
    assert!(eta_c_analytic(200.0, 0.0, DEFAULT_TWIN_SPREAD).unwrap() > 0.99);
    assert!(eta_c_analytic(0.01, 0.0, DEFAULT_TWIN_SPREAD).unwrap() < 0.01);
}

#[test]
fn eta_c_at_unit_cell_and_quarter_shift() {
    // With a one-pixel shift at five pixels per coherence length the
    // simulated misalignment is 0.2, giving 0.64 exactly.
    assert!((eta_c_analytic(1.0, 0.2, 0.0).unwrap() - 0.64).abs() < 1e-12);
    // The nominal quarter shift itself.
    assert!((eta_c_analytic(1.0, 0.25, 0.0).unwrap() - 0.5625).abs() < 1e-12);
    let m = DetectorModel::default();
    let eta = eta_c_analytic(m.scale(), m.effective_misalignment(), m.twin_spread).unwrap();
    assert!((eta - 0.64).abs() <= 0.02);
}

#[test]
fn independent_frames_have_unit_nrf_and_zero_gain() {
    let (p, r) = independent_pair(30.0, 200);
    let nrf = nrf_empirical(&p, &r).unwrap();
    assert!((nrf.value - 1.0).abs() < 3.0 * nrf.std_error, "{nrf:?}");
    let k = k_opt_estimate(&p, &r).unwrap();
    assert!(k.value.abs() < 3.0 * k.std_error, "{k:?}");
    assert_eq!(k.samples, 180 * 180);
}

#[test]
fn default_pipeline_nrf_gain_and_residual() {
    let (p, r) = default_pair();
    let nrf = nrf_empirical(&p, &r).unwrap();
    assert!((nrf.value - 0.40).abs() <= 0.05, "NRF {nrf:?}");
    let k = k_opt_estimate(&p, &r).unwrap();
    assert!((k.value - 0.608).abs() <= 0.03, "k {k:?}");
    let res = residual_ratio(&p, &r, k.value).unwrap();
    assert!((res.value - 0.63).abs() <= 0.05, "residual {res:?}");
    let report = noise_report(&p, &r, &CorrelationParams::new(0.95, 0.64)).unwrap();
    assert_eq!(report.k_opt_empirical, k);
    assert!((report.nrf_analytic - 0.392).abs() < 1e-12);
}

#[test]
fn k_scan_minimum_sits_at_k_opt() {
    let (p, r) = default_pair();
    let k = k_opt_estimate(&p, &r).unwrap().value;
    let grid: Vec<f64> = (0..=60).map(|i| i as f64 * 0.02).collect();
    let residuals: Vec<f64> = grid
        .iter()
        .map(|&g| residual_ratio(&p, &r, g).unwrap().value)
        .collect();
    let best = grid[residuals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0];
    assert!((best - k).abs() <= 0.02, "scan minimum {best}, k_opt {k}");
}

#[test]
fn residual_matches_explicit_subtraction() {
    let (p, r) = default_pair();
    let cleaned = subtract_noise(&p, &r, 0.6).unwrap();
    let interior = qcpr::wavefield::crop_border(&cleaned, BORDER_FRACTION);
    let probe = qcpr::wavefield::crop_border(&p, BORDER_FRACTION);
    let n = interior.len() as f64;
    let mean = interior.sum() / n;
    let var = interior.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let direct = var / (probe.sum() / n);
    let res = residual_ratio(&p, &r, 0.6).unwrap().value;
    assert!((direct / res - 1.0).abs() < 1e-3, "{direct} vs {res}");
}

#[test]
fn perfectly_correlated_pair_cancels() {
    let m = Array2::from_elem((100, 100), 50.0);
    let (p, r) = add_twin_shot_noise(&m, &m, 0.0, NoiseKey { seed: 3, plane: 0 }).unwrap();
    let res = residual_ratio(&p.to_f64(), &r.to_f64(), 1.0).unwrap();
    assert!(res.value <= 0.02);
}

#[test]
fn pooled_statistics_agree_with_single_frames() {
    let (p, r) = independent_pair(10.0, 120);
    let single = nrf_empirical(&p, &r).unwrap();
    let pooled = nrf_pooled(&[(&p, &r), (&p, &r)], 1).unwrap();
    assert!((single.value / pooled.value - 1.0).abs() < 1e-3);
    assert_eq!(pooled.samples, 2 * single.samples);
    // A constant offset on one frame must not leak into pooled moments.
    let shifted = p.mapv(|v| v + 100.0);
    let r2 = r.mapv(|v| v + 100.0);
    let a = k_opt_pooled(&[(&p, &r), (&shifted, &r2)]).unwrap();
    let b = k_opt_estimate(&p, &r).unwrap();
    assert!((a.value - b.value).abs() < 1e-9);
    assert!(nrf_pooled(&[], 1).is_err());
}

#[test]
fn nrf_at_scale_matches_block_sums() {
    let (p, r) = default_pair();
    let k = 3;
    let filtered_p = qcpr::detector::averaging_filter(&p, k).unwrap();
    let filtered_r = qcpr::detector::averaging_filter(&r, k).unwrap();
    let scaled = nrf_at_scale(&filtered_p, &filtered_r, k).unwrap().value;
    let unfiltered = nrf_empirical(&p, &r).unwrap().value;
    // Averaging improves the correlated fraction: the filtered NRF drops.
    assert!(scaled < unfiltered, "{scaled} vs {unfiltered}");
    let d = 3.0;
    let analytic = 1.0 - 0.95 * eta_c_analytic(d, 0.2, 0.0).unwrap();
    assert!((scaled - analytic).abs() < 0.05, "{scaled} vs {analytic}");
}

proptest! {
    #[test]
    fn eta_c_in_unit_interval_and_symmetric(d in 0.05f64..20.0, eps in 0.0f64..3.0, spread in 0.0f64..2.0) {
        let a = eta_c_analytic(d, eps, spread).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let b = eta_c_analytic(d, -eps, spread).unwrap();
        prop_assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn nrf_model_bounds(eta0 in 0.01f64..=1.0, eta_c in 0.0f64..=1.0) {
        let p = CorrelationParams::new(eta0, eta_c);
        let nrf = nrf_model(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&nrf));
        prop_assert!((p.residual_ratio() - (1.0 - p.k_opt().powi(2))).abs() < 1e-15);
    }

    #[test]
    fn subtraction_preserves_probe_mean(k in -2.0f64..2.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..10.0));
        let r = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..10.0));
        let out = subtract_noise(&p, &r, k).unwrap();
        prop_assert!((out.mean().unwrap() - p.mean().unwrap()).abs() < 1e-10);
    }
}
