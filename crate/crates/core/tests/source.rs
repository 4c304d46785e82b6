use std::f64::consts::TAU;

use ndarray::{s, Array2};
use qcpr::detector::{add_twin_shot_noise, NoiseKey};
use qcpr::optics::lens_far_field;
use qcpr::source::*;
use qcpr::wavefield::{intensity, ComplexField, GridSpec};
use rayon::prelude::*;

const F: f64 = 1e-2;
const LAMBDA: f64 = 6.4e-7;
const L_C: f64 = 7.2e-6;

/// Object grid with the reference pitch (6e-4 m over 512 pixels), halved.
fn object_grid() -> GridSpec {
    GridSpec::new(256, 3e-4, LAMBDA).unwrap()
}

fn source(modes: usize, seed: u64) -> SourceModel {
    let spec = source_grid(&object_grid(), F).unwrap();
    let w = waist_for_coherence_length(F, LAMBDA, L_C).unwrap();
    SourceModel::new(spec, w, modes, seed).unwrap()
}

fn far_field_modes(model: &SourceModel) -> Vec<ComplexField> {
    (0..model.modes())
        .into_par_iter()
        .map(|i| lens_far_field(&generate_mode(model, i).unwrap(), F).unwrap())
        .collect()
}

fn summed_intensity(modes: &[ComplexField]) -> Array2<f64> {
    let mut sum = Array2::zeros(modes[0].values().dim());
    for m in modes {
        sum += intensity(m).values();
    }
    sum
}

fn mean_var<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn far_field_coherence_width() {
    let modes = far_field_modes(&source(500, 3));
    let report = estimate_coherence(&modes, L_C).unwrap();
    assert_eq!(report.gamma[0], 1.0);
    assert!(report.gamma.iter().all(|&g| g <= 1.0 + 1e-12));
    assert!(!report.low_confidence);
    assert!(
        report.relative_width_error() < 0.10,
        "fitted {} vs target {L_C}",
        report.fitted_width
    );
    // Separations beyond three coherence lengths are decorrelated.
    for (r, g) in report.separations.iter().zip(&report.gamma) {
        if *r > 3.0 * L_C {
            assert!(*g < 0.1, "γ({r}) = {g}");
        }
    }
}

#[test]
fn few_modes_are_flagged() {
    let modes = far_field_modes(&source(10, 1));
    assert!(estimate_coherence(&modes, L_C).unwrap().low_confidence);
    assert!(estimate_coherence(&[], L_C).is_err());
    assert!(estimate_coherence(&modes, 0.0).is_err());
}

#[test]
fn averaged_far_field_is_flat() {
    let modes = far_field_modes(&source(400, 5));
    let sum = summed_intensity(&modes);
    let n = sum.nrows();
    let central = sum.slice(s![n / 4..3 * n / 4, n / 4..3 * n / 4]);
    let (mean, var) = mean_var(central.iter());
    let flatness = var.sqrt() / mean;
    assert!(flatness <= 0.07, "std/mean = {flatness}");
}

#[test]
fn single_mode_is_fully_developed_speckle() {
    let modes = far_field_modes(&source(8, 9));
    let contrasts: Vec<f64> = modes
        .iter()
        .map(|m| {
            let i = intensity(m);
            let (mean, var) = mean_var(i.values().iter());
            var / (mean * mean)
        })
        .collect();
    let c = contrasts.iter().sum::<f64>() / contrasts.len() as f64;
    assert!((c - 1.0).abs() <= 0.1, "variance/mean² = {c} ({contrasts:?})");
}

#[test]
fn multithermal_counting_statistics() {
    let l = 100;
    let photons = 100.0;
    let sum = summed_intensity(&far_field_modes(&source(l, 17)));
    let scale = photons / sum.mean().unwrap();
    let expected = sum.mapv(|v| v * scale);
    let (counts, _) =
        add_twin_shot_noise(&expected, &expected, 0.0, NoiseKey { seed: 4, plane: 0 }).unwrap();
    let counts = counts.to_f64();
    let (mean, var) = mean_var(counts.iter());
    let predicted = mean + mean * mean / l as f64;
    assert!(
        (var / predicted - 1.0).abs() <= 0.15,
        "Var {var} vs ⟨n⟩ + ⟨n⟩²/L = {predicted}"
    );
}

#[test]
fn phases_are_uniform() {
    let spec = source_grid(&GridSpec::new(512, 6e-4, LAMBDA).unwrap(), F).unwrap();
    let w = waist_for_coherence_length(F, LAMBDA, L_C).unwrap();
    let model = SourceModel::new(spec, w, 1, 21).unwrap();
    let mode = generate_mode(&model, 0).unwrap();
    const BINS: usize = 64;
    let mut hist = [0usize; BINS];
    for v in mode.values() {
        let phase = v.arg().rem_euclid(TAU);
        hist[((phase / TAU * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let expected = mode.values().len() as f64 / BINS as f64;
    let chi2: f64 = hist
        .iter()
        .map(|&h| (h as f64 - expected).powi(2) / expected)
        .sum();
    // 99th percentile of χ² with 63 degrees of freedom.
    assert!(chi2 < 92.01, "χ² = {chi2}");
}

#[test]
fn mode_index_out_of_range() {
    let model = source(3, 0);
    assert!(matches!(
        generate_mode(&model, 3),
        Err(qcpr::Error::ModeIndex { index: 3, modes: 3 })
    ));
}
