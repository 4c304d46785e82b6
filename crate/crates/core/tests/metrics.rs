use ndarray::Array2;
use proptest::prelude::*;
use qcpr::detector::{detect, detect_expected, DetectorModel};
use qcpr::metrics::*;
use qcpr::optics::{simulate_stack, sweep_planes, PhaseMap};
use qcpr::quantumcorr::nrf_pooled;
use qcpr::scenario::ExperimentConfig;
use qcpr::tie::{Solver, TieOptions};
use qcpr::wavefield::{GridSpec, RadialBin, RadialSpectrum};

fn small() -> ExperimentConfig {
    let text = include_str!("data/small_sweep.json");
    ExperimentConfig::from_json(text).unwrap()
}

fn map(values: Array2<f64>) -> PhaseMap {
    let n = values.nrows();
    PhaseMap::new(GridSpec::new(n, n as f64 * 1e-6, 6.4e-7).unwrap(), values).unwrap()
}

fn pattern(n: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(r, c)| {
        let x = (r * 131 + c * 71 + seed as usize * 17) % 97;
        (x as f64).sin() + 0.01 * r as f64
    })
}

#[test]
fn correlation_of_identical_and_negated_maps() {
    let a = map(pattern(40, 1));
    assert!((correlation_coefficient(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = map(a.values().mapv(|v| -v));
    assert!((correlation_coefficient(&neg, &a).unwrap() + 1.0).abs() < 1e-12);
    let flat = map(Array2::from_elem((40, 40), 2.0));
    assert!(correlation_coefficient(&flat, &a).is_err());
    assert!(correlation_coefficient(&map(pattern(20, 1)), &a).is_err());
}

#[test]
fn log_log_slope_of_power_law() {
    let bins: Vec<RadialBin> = (1..30)
        .map(|i| {
            let q = i as f64 * 100.0;
            RadialBin { q_lower: q - 50.0, q_center: q, q_upper: q + 50.0, mean_power: 3.0 * q.powf(-4.0), count: 4 }
        })
        .collect();
    let s = RadialSpectrum { bins };
    assert!((log_log_slope(&s, 150.0, 2500.0).unwrap() + 4.0).abs() < 1e-10);
    assert!(log_log_slope(&s, 150.0, 250.0).is_err());
}

#[test]
fn sweep_records_every_mode_and_point() {
    let config = small();
    let pipeline = config.pipeline().unwrap();
    let dzs = [3e-5, 1e-4, 2e-4];
    let report = sweep_defocus(&pipeline, &dzs, &NoiseMode::ALL).unwrap();
    assert_eq!(report.records.len(), 12);
    assert_eq!(report.maps.len(), 12);
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!(r.delta_z_m, dzs[i / 4]);
        assert_eq!(r.mode, NoiseMode::ALL[i % 4]);
        assert_eq!(r.status, "ok");
        let c = r.correlation.unwrap();
        assert!((-1.0..=1.0).contains(&c));
    }
    // Shot and quantum at one point share the detector realization.
    for point in report.records.chunks(4) {
        assert_eq!(point[1].seed, point[2].seed);
        assert!(point[2].nrf.is_some() && point[2].gain.is_some() && point[2].nrf_model.is_some());
        assert_eq!(point[3].gain, Some(1.0));
    }
    assert_ne!(report.records[0].seed, report.records[4].seed);
    assert_eq!(report.optima.len(), 4);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 13);
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let pipeline = small().pipeline().unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sweep_defocus(&pipeline, &[5e-5, 1.5e-4], &NoiseMode::ALL).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a, b);
}

#[test]
fn shot_mode_uses_the_raw_probe_and_quantum_the_subtracted_one() {
    let config = small();
    let pipeline = config.pipeline().unwrap();
    let dz = 1e-4;
    let report = sweep_defocus(&pipeline, &[dz], &[NoiseMode::Shot, NoiseMode::Noiseless]).unwrap();
    let triples = simulate_stack(&pipeline.source, pipeline.focal_length, &pipeline.object, &sweep_planes(&[dz]), pipeline.mean_photons)
        .unwrap()
        .triple(dz)
        .unwrap();
    let model = DetectorModel { seed: report.records[0].seed, ..pipeline.detector };
    let set = detect(&triples, &model).unwrap();
    let phase = qcpr::tie::retrieve_phase(
        &qcpr::tie::TieInput { focus: &set.probe[1], plus: &set.probe[2], minus: &set.probe[0], delta_z: dz },
        &pipeline.tie,
    )
    .unwrap();
    assert_eq!(report.maps[0].as_ref().unwrap(), &phase);
    let expected = detect_expected(&triples, &model).unwrap();
    let noiseless = qcpr::tie::retrieve_phase(
        &qcpr::tie::TieInput { focus: &expected.probe[1], plus: &expected.probe[2], minus: &expected.probe[0], delta_z: dz },
        &pipeline.tie,
    )
    .unwrap();
    assert_eq!(report.maps[1].as_ref().unwrap(), &noiseless);
}

#[test]
fn failing_points_are_recorded_and_the_sweep_continues() {
    let mut config = small();
    // Dim light leaves empty detector pixels, which the Teague solver rejects.
    config.detector.mean_photons_per_detection_pixel = 0.5;
    config.tie = TieOptions { solver: Solver::Teague, alpha: 10.0 };
    let report = sweep_defocus(&config.pipeline().unwrap(), &[1e-4], &[NoiseMode::Shot, NoiseMode::Noiseless]).unwrap();
    assert!(report.records[0].correlation.is_none());
    assert!(report.records[0].status.contains("non-positive"), "{}", report.records[0].status);
    assert!(report.maps[0].is_none());
    assert_eq!(report.records[1].status, "ok");
    assert_eq!(report.optima.len(), 1);
}

#[test]
fn invalid_sweeps_are_rejected() {
    let pipeline = small().pipeline().unwrap();
    assert!(sweep_defocus(&pipeline, &[], &NoiseMode::ALL).is_err());
    assert!(sweep_defocus(&pipeline, &[-1e-5], &NoiseMode::ALL).is_err());
    assert!(sweep_defocus(&pipeline, &[1e-4], &[]).is_err());
    // Beyond the aliasing limit of the 128-pixel grid.
    assert!(matches!(sweep_defocus(&pipeline, &[1e-3], &NoiseMode::ALL), Err(qcpr::Error::Aliasing { .. })));
    assert!(averaging_filter_study(&pipeline, 1e-4, &[0], &NoiseMode::ALL).is_err());
}

#[test]
fn unit_filter_reproduces_the_unfiltered_pipeline_exactly() {
    let pipeline = small().pipeline().unwrap();
    let modes = [NoiseMode::Shot, NoiseMode::Quantum];
    let sweep = sweep_defocus(&pipeline, &[1e-4], &modes).unwrap();
    let study = averaging_filter_study(&pipeline, 1e-4, &[1], &modes).unwrap();
    assert_eq!(sweep.records, study.records);
    assert_eq!(sweep.maps, study.maps);
}

#[test]
fn filtering_lowers_the_nrf() {
    let mut config = small();
    config.detector.efficiency = 0.8;
    config.detector.twin_spread = std::f64::consts::FRAC_1_SQRT_2;
    let report = averaging_filter_study(&config.pipeline().unwrap(), 1e-4, &[1, 2, 4, 6], &[NoiseMode::Quantum]).unwrap();
    let nrf: Vec<f64> = report.records.iter().map(|r| r.nrf.unwrap()).collect();
    assert!(nrf.windows(2).all(|w| w[1] < w[0]), "{nrf:?}");
    let model: Vec<f64> = report.records.iter().map(|r| r.nrf_model.unwrap()).collect();
    assert!(model.windows(2).all(|w| w[1] < w[0]), "{model:?}");
    assert_eq!(report.records.iter().map(|r| r.avg_k).collect::<Vec<_>>(), [1, 2, 4, 6]);
}

#[test]
fn filtered_nrf_uses_block_scaled_normalization() {
    // Uncorrelated white noise: filtering by k divides the variance by k², so
    // the k²-scaled NRF stays at 1.
    let config = small();
    let pipeline = config.pipeline().unwrap();
    let triples = qcpr::optics::BeamTriples::flat(*pipeline.object.spec(), 1e-4, 50.0);
    let model = DetectorModel { efficiency: 1.0, misalignment: 0.0, avg_k: 3, ..pipeline.detector };
    let a = detect(&triples, &DetectorModel { seed: 1, ..model }).unwrap();
    let b = detect(&triples, &DetectorModel { seed: 2, ..model }).unwrap();
    let pairs: Vec<_> = (0..3).map(|p| (a.probe[p].values(), b.reference[p].values())).collect();
    let nrf = nrf_pooled(&pairs, 3).unwrap();
    // Edge clipping of the filter leaves a little extra variance.
    assert!((nrf.value - 1.0).abs() < 0.15, "{nrf:?}");
}

#[test]
fn analytic_nrf_model_follows_the_effective_scale() {
    let m = DetectorModel { efficiency: 0.8, twin_spread: std::f64::consts::FRAC_1_SQRT_2, ..DetectorModel::default() };
    let base = nrf_model(&m).unwrap();
    assert!((base - 0.822).abs() < 0.005, "{base}");
    let k4 = nrf_model(&DetectorModel { avg_k: 4, ..m }).unwrap();
    assert!((k4 - 0.417).abs() < 0.005, "{k4}");
    assert!(nrf_model(&DetectorModel { efficiency: 0.0, ..m }).is_err());
}

proptest! {
    #[test]
    fn correlation_is_affine_invariant(a in 0.01f64..100.0, b in -50.0f64..50.0, seed in 0u64..20) {
        let x = map(pattern(32, seed));
        let y = map(pattern(32, seed + 1));
        let scaled = map(x.values().mapv(|v| a * v + b));
        let c0 = correlation_coefficient(&x, &y).unwrap();
        let c1 = correlation_coefficient(&scaled, &y).unwrap();
        let c2 = correlation_coefficient(&y, &scaled).unwrap();
        prop_assert!((c0 - c1).abs() <= 1e-12);
        prop_assert!((c0 - c2).abs() <= 1e-12);
    }
}
