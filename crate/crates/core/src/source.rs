//! Partially coherent source: an ensemble of independent modes sharing one
//! Gaussian envelope, each carrying a delta-correlated random phase.

use std::f64::consts::{PI, SQRT_2, TAU};

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, domain};
use crate::wavefield::{ComplexField, GridSpec};

/// Transverse coherence length in the focal plane of a lens of focal length
/// `f` illuminated by a random-phase source of waist `w`.
///
/// The waist is the Gaussian amplitude parameter, `|A(x)| = exp(-x²/(2w²))`;
/// with that convention the far-field coherence function is
/// `exp(-r²/(2 l_c²))` with `l_c = fλ/(√2 π w)`.
pub fn coherence_length(f: f64, wavelength: f64, waist: f64) -> Result<f64> {
    for (name, v) in [("f", f), ("wavelength", wavelength), ("waist", waist)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(name, format!("must be positive, got {v}")));
        }
    }
    Ok(f * wavelength / (SQRT_2 * PI * waist))
}

/// Inverse of [`coherence_length`] in the waist.
pub fn waist_for_coherence_length(f: f64, wavelength: f64, l_c: f64) -> Result<f64> {
    // The relation is symmetric in (w, l_c).
    coherence_length(f, wavelength, l_c)
}

/// Source-plane grid whose lens far field is `object`.
///
/// An f-f lens maps pitch `p` to `λf/(n p)`, so the source extent is
/// `λ f n / extent_object`.
pub fn source_grid(object: &GridSpec, f: f64) -> Result<GridSpec> {
    object.far_field(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceModel {
    spec: GridSpec,
    waist: f64,
    modes: usize,
    seed: u64,
}

impl SourceModel {
    pub fn new(spec: GridSpec, waist: f64, modes: usize, seed: u64) -> Result<Self> {
        if !(waist.is_finite() && waist > 0.0) {
            return Err(invalid("waist", format!("must be positive, got {waist}")));
        }
        if waist >= spec.extent() / 4.0 {
            return Err(invalid(
                "waist",
                format!(
                    "{waist:e} m does not fit the source grid of extent {:e} m (need w < extent/4)",
                    spec.extent()
                ),
            ));
        }
        if waist < spec.pitch() {
            return Err(invalid(
                "waist",
                format!(
                    "{waist:e} m is below the source pitch {:e} m",
                    spec.pitch()
                ),
            ));
        }
        if modes == 0 {
            return Err(invalid("modes", "at least one mode is required"));
        }
        Ok(Self {
            spec,
            waist,
            modes,
            seed,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn waist(&self) -> f64 {
        self.waist
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same source with a different number of modes.
    pub fn with_modes(&self, modes: usize) -> Result<Self> {
        Self::new(self.spec, self.waist, modes, self.seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    /// Shared amplitude envelope, centered at index `n / 2`.
    pub fn envelope(&self) -> Array2<f64> {
        let n = self.spec.n();
        let p = self.spec.pitch();
        let c = (n / 2) as f64;
        let inv = 1.0 / (2.0 * self.waist * self.waist);
        let axis: Vec<f64> = (0..n)
            .map(|i| {
                let x = (i as f64 - c) * p;
                (-x * x * inv).exp()
            })
            .collect();
        Array2::from_shape_fn((n, n), |(r, c)| axis[r] * axis[c])
    }
}

/// Mode `index` of the ensemble: the shared envelope times an independent
/// uniform phase per pixel. Row `r` draws from its own stream, so the result
/// does not depend on thread count.
pub fn generate_mode(model: &SourceModel, index: usize) -> Result<ComplexField> {
    if index >= model.modes {
        return Err(Error::ModeIndex {
            index,
            modes: model.modes,
        });
    }
    let envelope = model.envelope();
    Ok(mode_with_envelope(model, &envelope, index))
}

pub(crate) fn mode_with_envelope(
    model: &SourceModel,
    envelope: &Array2<f64>,
    index: usize,
) -> ComplexField {
    let n = model.spec.n();
    let mut values = Array2::<Complex64>::zeros((n, n));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            let mut rng = rng::stream(
                model.seed,
                &[domain::SOURCE_PHASE, index as u64],
                r as u64,
            );
            for (c, v) in row.iter_mut().enumerate() {
                let phase: f64 = rng.random::<f64>() * TAU;
                *v = Complex64::from_polar(envelope[[r, c]], phase);
            }
        });
    ComplexField::new(model.spec, values).expect("shape built from spec")
}

/// Ensemble estimate of the far-field degree of coherence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceReport {
    /// Separations in meters, starting at 0.
    pub separations: Vec<f64>,
    /// `|γ(r)|`, averaged over both axes.
    pub gamma: Vec<f64>,
    /// Width `l` of the best fit `exp(-r²/(2 l²))`.
    pub fitted_width: f64,
    pub target: f64,
    pub modes_used: usize,
    /// Set when fewer than 100 modes were supplied.
    pub low_confidence: bool,
}

impl CoherenceReport {
    pub fn relative_width_error(&self) -> f64 {
        (self.fitted_width - self.target).abs() / self.target
    }
}

const MIN_CONFIDENT_MODES: usize = 100;

/// Estimate `γ(r) = ⟨u*(x) u(x+r)⟩ / √(⟨I(x)⟩⟨I(x+r)⟩)` by averaging over the
/// supplied modes and over positions in the central half of the grid, for
/// separations along both axes up to four target coherence lengths.
pub fn estimate_coherence(modes: &[ComplexField], l_c_target: f64) -> Result<CoherenceReport> {
    let first = modes
        .first()
        .ok_or_else(|| Error::Degenerate("no modes supplied".into()))?;
    if !(l_c_target.is_finite() && l_c_target > 0.0) {
        return Err(invalid("l_c_target", format!("must be positive, got {l_c_target}")));
    }
    let spec = *first.spec();
    if modes.iter().any(|m| !m.spec().matches(&spec)) {
        return Err(Error::GridMismatch("coherence-estimate modes"));
    }
    let n = spec.n();
    let pitch = spec.pitch();
    let max_shift = ((4.0 * l_c_target / pitch).ceil() as usize).clamp(2, n / 4);
    let lo = n / 4;
    let hi = lo + n / 2;

    // Per mode: Σ u*(x) u(x+r) over both axes, and the intensity sums at
    // both ends so that normalization uses ensemble means.
    let per_mode: Vec<ShiftSums> = modes.par_iter().map(|m| shift_sums(m, lo, hi, max_shift)).collect();
    let mut total = ShiftSums::zeros(max_shift);
    for s in &per_mode {
        total.add(s);
    }
    let gamma: Vec<f64> = (0..=max_shift)
        .map(|s| total.cross[s].norm() / (total.head[s] * total.tail[s]).sqrt())
        .collect();
    let separations: Vec<f64> = (0..=max_shift).map(|s| s as f64 * pitch).collect();

    // Fit ln γ = -r²/(2 l²) through the origin over the well-measured part.
    let (mut num, mut den) = (0.0, 0.0);
    for (&r, &g) in separations.iter().zip(&gamma).skip(1) {
        if g > 0.05 {
            num += r * r * g.ln();
            den += r.powi(4);
        }
    }
    let fitted_width = if num < 0.0 && den > 0.0 {
        (-den / (2.0 * num)).sqrt()
    } else {
        f64::NAN
    };
    Ok(CoherenceReport {
        separations,
        gamma,
        fitted_width,
        target: l_c_target,
        modes_used: modes.len(),
        low_confidence: modes.len() < MIN_CONFIDENT_MODES,
    })
}

struct ShiftSums {
    cross: Vec<Complex64>,
    head: Vec<f64>,
    tail: Vec<f64>,
}

impl ShiftSums {
    fn zeros(max_shift: usize) -> Self {
        Self {
            cross: vec![Complex64::default(); max_shift + 1],
            head: vec![0.0; max_shift + 1],
            tail: vec![0.0; max_shift + 1],
        }
    }

    fn add(&mut self, other: &Self) {
        for s in 0..self.cross.len() {
            self.cross[s] += other.cross[s];
            self.head[s] += other.head[s];
            self.tail[s] += other.tail[s];
        }
    }
}

fn shift_sums(mode: &ComplexField, lo: usize, hi: usize, max_shift: usize) -> ShiftSums {
    let u = mode.values();
    let mut sums = ShiftSums::zeros(max_shift);
    for s in 0..=max_shift {
        for r in lo..hi {
            for c in lo..hi {
                let a = u[[r, c]];
                let (bx, by) = (u[[r, c + s]], u[[r + s, c]]);
                sums.cross[s] += a.conj() * (bx + by);
                sums.head[s] += 2.0 * a.norm_sqr();
                sums.tail[s] += bx.norm_sqr() + by.norm_sqr();
            }
        }
    }
    sums
}
