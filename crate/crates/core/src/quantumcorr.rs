//! Twin-beam correlation model and the matching empirical estimators.
//!
//! The conditional efficiency η_c is the probability that the twin of a
//! photon detected in one cell lands in the corresponding cell of the other
//! channel. Photons are uniform within a square cell of side `d` and twins
//! are displaced by the misalignment `ε` plus a Gaussian of width `σ` per
//! axis (all lengths in coherence lengths). The probability factorizes over
//! the axes, `η_c = f(d, ε)²`, with the closed form
//!
//! `f(d, ε) = [Ψ(ε + d) + Ψ(ε − d) − 2Ψ(ε)] / d`,
//! `Ψ(x) = x Φ(x/σ) + σ φ(x/σ)`,
//!
//! which reduces to the cell overlap `max(0, 1 − |ε|/d)` as `σ → 0`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, domain};
use crate::wavefield::{check_same_shape, crop_border};

/// Border fraction excluded from all frame statistics.
pub const BORDER_FRACTION: f64 = 0.05;

/// Default cross-correlation width in coherence lengths: the width of the
/// intensity correlation `|γ|²` of a Gaussian coherence function.
pub const DEFAULT_TWIN_SPREAD: f64 = FRAC_1_SQRT_2;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Per-axis collection probability `f(d, ε)`.
pub fn axis_efficiency(d: f64, eps: f64, spread: f64) -> f64 {
    let eps = eps.abs();
    if spread == 0.0 {
        return (1.0 - eps / d).max(0.0);
    }
    let psi = |x: f64| x * std_normal_cdf(x / spread) + spread * std_normal_pdf(x / spread);
    let f = (psi(eps + d) + psi(eps - d) - 2.0 * psi(eps)) / d;
    f.clamp(0.0, 1.0)
}

/// Conditional efficiency for cells of side `d` shifted by `ε` on both
/// axes, with twin spread `spread` (all in coherence lengths).
pub fn eta_c_analytic(d: f64, eps: f64, spread: f64) -> Result<f64> {
    if !(d.is_finite() && d > 0.0) {
        return Err(invalid("d", format!("must be positive, got {d}")));
    }
    if !eps.is_finite() {
        return Err(invalid("misalignment", format!("must be finite, got {eps}")));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(invalid("twin_spread", format!("must be non-negative, got {spread}")));
    }
    Ok(axis_efficiency(d, eps, spread).powi(2))
}

/// Brute-force estimate of η_c: sample photons uniformly in a `d × d` cell,
/// displace their twins by `(ε, ε)` plus Gaussian noise, and count the twins
/// that land in the cell. Returns the estimate and its standard error.
pub fn eta_c_monte_carlo(d: f64, eps: f64, spread: f64, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng::stream(seed, &[domain::ORACLE], 0);
    let mut hits = 0usize;
    for _ in 0..samples {
        let mut inside = true;
        for _ in 0..2 {
            let x = rng.random::<f64>() * d;
            let t = x + eps + spread * rng.sample::<f64, _>(StandardNormal);
            inside &= (0.0..d).contains(&t);
        }
        hits += inside as usize;
    }
    let p = hits as f64 / samples as f64;
    (p, (p * (1.0 - p) / samples as f64).sqrt())
}

/// Parameters of the analytic noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationParams {
    /// Single-channel efficiency η₀.
    pub efficiency: f64,
    /// Conditional efficiency η_c.
    pub eta_c: f64,
    /// Object transmission τ (1 for pure phase objects).
    pub transmission: f64,
    /// Mean detected photons per detection pixel.
    pub mean_photons: f64,
    /// Number of modes per detection pixel for the excess-noise term.
    pub modes: f64,
}

impl CorrelationParams {
    pub fn new(efficiency: f64, eta_c: f64) -> Self {
        Self {
            efficiency,
            eta_c,
            transmission: 1.0,
            mean_photons: 0.0,
            modes: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(invalid("efficiency", format!("must lie in (0, 1], got {}", self.efficiency)));
        }
        if !(0.0..=1.0).contains(&self.eta_c) {
            return Err(invalid("eta_c", format!("must lie in [0, 1], got {}", self.eta_c)));
        }
        if !(self.transmission > 0.0 && self.transmission <= 1.0) {
            return Err(invalid(
                "transmission",
                format!("must lie in (0, 1], got {}", self.transmission),
            ));
        }
        if !(self.mean_photons >= 0.0) {
            return Err(invalid("mean_photons", "must be non-negative"));
        }
        if !(self.modes > 0.0) {
            return Err(invalid("modes", "must be positive"));
        }
        Ok(())
    }

    /// Noise reduction factor including the multithermal excess term.
    pub fn nrf(&self) -> f64 {
        let excess = if self.modes.is_infinite() {
            0.0
        } else {
            self.mean_photons / self.modes * (1.0 - self.eta_c)
        };
        self.nrf_shot_limited() + excess
    }

    /// `1 − η₀ η_c`, valid when the excess-noise term is negligible.
    pub fn nrf_shot_limited(&self) -> f64 {
        1.0 - self.efficiency * self.eta_c
    }

    /// Gain minimizing the residual variance, `τ η_c η₀`.
    pub fn k_opt(&self) -> f64 {
        self.transmission * self.eta_c * self.efficiency
    }

    /// Residual variance after optimal subtraction over the mean probe
    /// counts, `1 − (τ η_c η₀)²`.
    pub fn residual_ratio(&self) -> f64 {
        1.0 - self.k_opt().powi(2)
    }
}

/// Convenience form of [`CorrelationParams::nrf`].
pub fn nrf_model(p: &CorrelationParams) -> Result<f64> {
    p.validate()?;
    Ok(p.nrf())
}

/// A sample statistic with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

const MIN_PIXELS: usize = 1000;

/// A probe frame and its reference frame.
pub type FramePair<'a> = (&'a Array2<f64>, &'a Array2<f64>);

type Views<'a> = Vec<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)>;

fn interior_pairs<'a>(pairs: &[FramePair<'a>]) -> Result<Views<'a>> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no frames supplied".into()));
    }
    pairs
        .iter()
        .map(|&(p, r)| {
            check_same_shape(p.dim(), r.dim())?;
            let (p, r) = (crop_border(p, BORDER_FRACTION), crop_border(r, BORDER_FRACTION));
            if p.is_empty() {
                return Err(Error::Degenerate("empty region".into()));
            }
            Ok((p, r))
        })
        .collect()
}

/// Second moments pooled over frame pairs, each centered on its own means.
struct Moments {
    n: f64,
    mean_p: f64,
    mean_r: f64,
    var_p: f64,
    var_r: f64,
    cov: f64,
}

fn moments(views: &Views<'_>) -> Moments {
    let (mut n, mut sum_p, mut sum_r) = (0.0, 0.0, 0.0);
    let (mut var_p, mut var_r, mut cov) = (0.0, 0.0, 0.0);
    for (p, r) in views {
        let m = p.len() as f64;
        let (mp, mr) = (p.sum() / m, r.sum() / m);
        Zip::from(p).and(r).for_each(|&a, &b| {
            let (da, db) = (a - mp, b - mr);
            var_p += da * da;
            var_r += db * db;
            cov += da * db;
        });
        n += m;
        sum_p += mp * m;
        sum_r += mr * m;
    }
    let dof = (n - views.len() as f64).max(1.0);
    Moments {
        n,
        mean_p: sum_p / n,
        mean_r: sum_r / n,
        var_p: var_p / dof,
        var_r: var_r / dof,
        cov: cov / dof,
    }
}

/// Regression gain `⟨δP δR⟩ / ⟨δ²R⟩` over the frame interior.
pub fn k_opt_estimate(probe: &Array2<f64>, reference: &Array2<f64>) -> Result<Estimate> {
    k_opt_pooled(&[(probe, reference)])
}

/// [`k_opt_estimate`] pooled over several frame pairs.
pub fn k_opt_pooled(pairs: &[FramePair<'_>]) -> Result<Estimate> {
    let views = interior_pairs(pairs)?;
    let samples: usize = views.iter().map(|(p, _)| p.len()).sum();
    if samples < MIN_PIXELS {
        return Err(Error::Degenerate(format!(
            "{samples} pixels are too few for a gain estimate (need {MIN_PIXELS})"
        )));
    }
    let m = moments(&views);
    if !(m.var_r > 0.0) {
        return Err(Error::Degenerate("reference frame has zero variance".into()));
    }
    let k = m.cov / m.var_r;
    let residual = (m.var_p - k * m.cov).max(0.0);
    Ok(Estimate {
        value: k,
        std_error: (residual / ((m.n - 2.0).max(1.0) * m.var_r)).sqrt(),
        samples,
    })
}

/// `probe − k (reference − mean(reference))`, which keeps the probe mean.
pub fn subtract_noise(probe: &Array2<f64>, reference: &Array2<f64>, k: f64) -> Result<Array2<f64>> {
    check_same_shape(probe.dim(), reference.dim())?;
    let mean = reference.mean().unwrap_or(0.0);
    let mut out = probe.clone();
    Zip::from(&mut out)
        .and(reference)
        .for_each(|o, &r| *o -= k * (r - mean));
    Ok(out)
}

/// `Var(P − R) / ⟨P + R⟩` over the frame interior.
pub fn nrf_empirical(probe: &Array2<f64>, reference: &Array2<f64>) -> Result<Estimate> {
    nrf_pooled(&[(probe, reference)], 1)
}

/// NRF of frames that went through a `k × k` averaging filter, referred to
/// the shot noise of the filtered frames: `k² Var(P − R) / ⟨P + R⟩`. This
/// equals the NRF of `k × k` block sums, i.e. of cells of side `k d`.
pub fn nrf_at_scale(probe: &Array2<f64>, reference: &Array2<f64>, k: usize) -> Result<Estimate> {
    nrf_pooled(&[(probe, reference)], k)
}

/// [`nrf_at_scale`] pooled over several frame pairs.
pub fn nrf_pooled(pairs: &[FramePair<'_>], k: usize) -> Result<Estimate> {
    let m = moments(&interior_pairs(pairs)?);
    let sum = m.mean_p + m.mean_r;
    if !(sum > 0.0) {
        return Err(Error::Degenerate("frames carry no photons".into()));
    }
    let value = (k * k) as f64 * (m.var_p + m.var_r - 2.0 * m.cov) / sum;
    Ok(Estimate {
        value,
        std_error: value * (2.0 / (m.n - 1.0).max(1.0)).sqrt(),
        samples: m.n as usize,
    })
}

/// Residual variance of the subtracted frame over the mean probe counts.
pub fn residual_ratio(probe: &Array2<f64>, reference: &Array2<f64>, k: f64) -> Result<Estimate> {
    residual_pooled(&[(probe, reference)], k)
}

/// [`residual_ratio`] pooled over several frame pairs.
pub fn residual_pooled(pairs: &[FramePair<'_>], k: f64) -> Result<Estimate> {
    let m = moments(&interior_pairs(pairs)?);
    if !(m.mean_p > 0.0) {
        return Err(Error::Degenerate("probe carries no photons".into()));
    }
    let value = (m.var_p - 2.0 * k * m.cov + k * k * m.var_r) / m.mean_p;
    Ok(Estimate {
        value,
        std_error: value * (2.0 / (m.n - 1.0).max(1.0)).sqrt(),
        samples: m.n as usize,
    })
}

/// Empirical and analytic noise figures of one probe/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseReport {
    pub nrf_empirical: Estimate,
    pub nrf_analytic: f64,
    pub k_opt_empirical: Estimate,
    pub k_opt_analytic: f64,
    pub residual_empirical: Estimate,
    pub residual_analytic: f64,
}

pub fn noise_report(
    probe: &Array2<f64>,
    reference: &Array2<f64>,
    params: &CorrelationParams,
) -> Result<NoiseReport> {
    params.validate()?;
    let k = k_opt_estimate(probe, reference)?;
    Ok(NoiseReport {
        nrf_empirical: nrf_empirical(probe, reference)?,
        nrf_analytic: params.nrf(),
        k_opt_empirical: k,
        k_opt_analytic: params.k_opt(),
        residual_empirical: residual_ratio(probe, reference, k.value)?,
        residual_analytic: params.residual_ratio(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn axis_efficiency_limits() {
        assert_eq!(axis_efficiency(1.0, 0.2, 0.0), 0.8);
        assert_eq!(axis_efficiency(1.0, 1.5, 0.0), 0.0);
        assert_relative_eq!(axis_efficiency(1.0, 0.2, 1e-9), 0.8, max_relative = 1e-9);
        assert_relative_eq!(
            axis_efficiency(2.0, 0.3, 0.5),
            axis_efficiency(2.0, -0.3, 0.5),
            max_relative = 1e-14
        );
    }

    #[test]
    fn eta_c_extremes() {
        assert!(eta_c_analytic(1e4, 0.0, DEFAULT_TWIN_SPREAD).unwrap() > 0.999);
        assert!(eta_c_analytic(1e-3, 0.0, DEFAULT_TWIN_SPREAD).unwrap() < 1e-3);
        // Perfect pixel correlation with a one-pixel shift at five pixels per
        // coherence length.
        assert_relative_eq!(eta_c_analytic(1.0, 0.2, 0.0).unwrap(), 0.64, max_relative = 1e-14);
        assert!(eta_c_analytic(0.0, 0.0, 0.1).is_err());
        assert!(eta_c_analytic(1.0, f64::NAN, 0.1).is_err());
        assert!(eta_c_analytic(1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn nrf_model_examples() {
        let p = CorrelationParams::new(0.95, 0.64);
        assert_relative_eq!(nrf_model(&p).unwrap(), 0.392, max_relative = 1e-12);
        assert_relative_eq!(p.k_opt(), 0.608, max_relative = 1e-12);
        assert_relative_eq!(p.residual_ratio(), 1.0 - 0.608 * 0.608, max_relative = 1e-12);
        assert_eq!(nrf_model(&CorrelationParams::new(1.0, 1.0)).unwrap(), 0.0);
        let thermal = CorrelationParams {
            mean_photons: 10.0,
            modes: 4.0,
            ..CorrelationParams::new(0.9, 0.0)
        };
        assert_relative_eq!(nrf_model(&thermal).unwrap(), 1.0 + 2.5);
        assert!(nrf_model(&CorrelationParams::new(0.0, 0.5)).is_err());
        assert!(nrf_model(&CorrelationParams::new(0.5, 1.5)).is_err());
    }

    #[test]
    fn subtraction_basics() {
        let p = Array2::from_shape_fn((40, 40), |(r, c)| ((r * 7 + c * 13) % 17) as f64);
        let r = Array2::from_shape_fn((40, 40), |(r, c)| ((r * 3 + c * 5) % 11) as f64);
        assert_eq!(subtract_noise(&p, &r, 0.0).unwrap(), p);
        let out = subtract_noise(&p, &r, 0.7).unwrap();
        assert_relative_eq!(out.mean().unwrap(), p.mean().unwrap(), max_relative = 1e-12);
        assert!(subtract_noise(&p, &Array2::zeros((3, 3)), 1.0).is_err());
    }

    #[test]
    fn self_gain_and_identical_nrf() {
        let p = Array2::from_shape_fn((40, 40), |(r, c)| ((r * 7 + c * 13) % 17) as f64 + 1.0);
        let k = k_opt_estimate(&p, &p).unwrap();
        assert_relative_eq!(k.value, 1.0, max_relative = 1e-12);
        assert_eq!(nrf_empirical(&p, &p).unwrap().value, 0.0);
        let flat = Array2::from_elem((40, 40), 2.0);
        assert!(k_opt_estimate(&p, &flat).is_err());
        let small = Array2::from_elem((10, 10), 2.0);
        assert!(k_opt_estimate(&small, &small).is_err());
        assert!(nrf_empirical(&Array2::zeros((40, 40)), &Array2::zeros((40, 40))).is_err());
    }
}
