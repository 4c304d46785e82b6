//! Phase retrieval from a defocus triple via the transport-of-intensity
//! equation `−k ∂I/∂z = ∇·(I ∇φ)`, solved spectrally with periodic
//! boundaries.

use std::f64::consts::{PI, SQRT_2};

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optics::PhaseMap;
use crate::wavefield::{check_same_shape, fft2_real, frequency_index, ifft2_real, RealField};

/// Which form of the TIE to invert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// `I ≈ Ī₀` on the right-hand side: a single inverse Laplacian.
    #[default]
    Uniform,
    /// Two inverse Laplacians around a pointwise division by `I₀`.
    Teague,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieOptions {
    #[serde(default)]
    pub solver: Solver,
    /// Tikhonov weight in units of `q_min⁴`; 0 disables regularization.
    #[serde(default)]
    pub alpha: f64,
}

impl TieOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid("alpha", format!("must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// On-focus intensity and the two defocused frames at `±δz`.
#[derive(Debug, Clone, Copy)]
pub struct TieInput<'a> {
    pub focus: &'a RealField,
    pub plus: &'a RealField,
    pub minus: &'a RealField,
    pub delta_z: f64,
}

impl TieInput<'_> {
    fn validate(&self) -> Result<()> {
        if !(self.delta_z.is_finite() && self.delta_z > 0.0) {
            return Err(invalid("delta_z", format!("must be positive, got {}", self.delta_z)));
        }
        let spec = self.focus.spec();
        for f in [self.plus, self.minus] {
            check_same_shape(spec.shape(), f.spec().shape())?;
            if !f.spec().matches(spec) {
                return Err(Error::GridMismatch("TIE input frames"));
            }
        }
        Ok(())
    }
}

/// Central finite difference `(I₊ − I₋) / (2δz)`.
pub fn axial_derivative(plus: &Array2<f64>, minus: &Array2<f64>, delta_z: f64) -> Result<Array2<f64>> {
    check_same_shape(plus.dim(), minus.dim())?;
    if !(delta_z.is_finite() && delta_z > 0.0) {
        return Err(invalid("delta_z", format!("must be positive, got {delta_z}")));
    }
    let scale = 1.0 / (2.0 * delta_z);
    let mut out = plus.clone();
    Zip::from(&mut out).and(minus).for_each(|o, &m| *o = (*o - m) * scale);
    Ok(out)
}

/// Frequency axis (cycles per meter) in FFT order.
fn axis(n: usize, pitch: f64) -> Vec<f64> {
    (0..n)
        .map(|j| frequency_index(j, n) as f64 / (n as f64 * pitch))
        .collect()
}

fn check_pitch(pitch: f64) -> Result<()> {
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(invalid("pitch", format!("must be positive, got {pitch}")));
    }
    Ok(())
}

/// Solve `∇²ψ = map` on a periodic square grid of the given pitch. The DC
/// term is dropped, so the result has zero mean. With `alpha > 0` the
/// kernel `−1/(4π²|q|²)` becomes `−|q|²/(4π²(|q|⁴ + α q_min⁴))`.
pub fn inverse_laplacian(map: &Array2<f64>, pitch: f64, alpha: f64) -> Result<Array2<f64>> {
    check_pitch(pitch)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(invalid("alpha", format!("must be non-negative, got {alpha}")));
    }
    let n = map.nrows();
    let mut spectrum = fft2_real(map)?;
    let q = axis(n, pitch);
    let q_min4 = (1.0 / (n as f64 * pitch)).powi(4);
    for ((r, c), v) in spectrum.indexed_iter_mut() {
        let q2 = q[r] * q[r] + q[c] * q[c];
        *v *= if q2 == 0.0 {
            0.0
        } else {
            -q2 / (4.0 * PI * PI * (q2 * q2 + alpha * q_min4))
        };
    }
    ifft2_real(spectrum)
}

/// Frequency axis for first derivatives: the Nyquist term of an even grid
/// has no real derivative and is dropped.
fn derivative_axis(n: usize, pitch: f64) -> Vec<f64> {
    let mut q = axis(n, pitch);
    if n.is_multiple_of(2) {
        q[n / 2] = 0.0;
    }
    q
}

/// Spectral gradient `(∂/∂row, ∂/∂col)`.
fn gradient(map: &Array2<f64>, pitch: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let spectrum = fft2_real(map)?;
    let q = derivative_axis(map.nrows(), pitch);
    let mut dr = spectrum.clone();
    let mut dc = spectrum;
    for ((r, c), v) in dr.indexed_iter_mut() {
        *v *= Complex64::new(0.0, 2.0 * PI * q[r]);
        dc[[r, c]] *= Complex64::new(0.0, 2.0 * PI * q[c]);
    }
    Ok((ifft2_real(dr)?, ifft2_real(dc)?))
}

fn divergence(fr: &Array2<f64>, fc: &Array2<f64>, pitch: f64) -> Result<Array2<f64>> {
    let q = derivative_axis(fr.nrows(), pitch);
    let mut sr = fft2_real(fr)?;
    let sc = fft2_real(fc)?;
    for ((r, c), v) in sr.indexed_iter_mut() {
        *v = Complex64::new(0.0, 2.0 * PI) * (q[r] * *v + q[c] * sc[[r, c]]);
    }
    ifft2_real(sr)
}

/// Recover the phase at the focal plane. The result has zero mean.
pub fn retrieve_phase(input: &TieInput<'_>, opts: &TieOptions) -> Result<PhaseMap> {
    input.validate()?;
    opts.validate()?;
    let spec = *input.focus.spec();
    let pitch = spec.pitch();
    let k = spec.wavenumber();
    let derivative = axial_derivative(input.plus.values(), input.minus.values(), input.delta_z)?;
    let rhs = derivative.mapv(|v| -k * v);
    let phase = match opts.solver {
        Solver::Uniform => {
            let mean = input.focus.mean();
            if !(mean > 0.0) {
                return Err(Error::NonPositiveIntensity { row: 0, col: 0 });
            }
            inverse_laplacian(&rhs.mapv(|v| v / mean), pitch, opts.alpha)?
        }
        Solver::Teague => {
            let focus = input.focus.values();
            if let Some(((row, col), _)) = focus.indexed_iter().find(|(_, &v)| !(v > 0.0)) {
                return Err(Error::NonPositiveIntensity { row, col });
            }
            // I ∇φ = ∇ψ with ∇²ψ = rhs; then ∇²φ = ∇·(∇ψ / I).
            let psi = inverse_laplacian(&rhs, pitch, opts.alpha)?;
            let (mut gr, mut gc) = gradient(&psi, pitch)?;
            Zip::from(&mut gr).and(&mut gc).and(focus).for_each(|a, b, &i| {
                *a /= i;
                *b /= i;
            });
            inverse_laplacian(&divergence(&gr, &gc, pitch)?, pitch, opts.alpha)?
        }
    };
    PhaseMap::new(spec, phase)
}

/// Spectral amplitude of the phase artifact produced by white intensity
/// noise of level `sigma` (counts) on both defocused frames:
/// `k σ / (4π² √2 I₀ δz |q|²)`.
pub fn noise_artifact_amplitude(sigma: f64, i0: f64, delta_z: f64, q: f64, k: f64) -> Result<f64> {
    if !(q.is_finite() && q > 0.0) {
        return Err(invalid("q", format!("must be positive, got {q}")));
    }
    if !(i0 > 0.0 && delta_z > 0.0 && sigma >= 0.0 && k > 0.0) {
        return Err(invalid(
            "noise_artifact_amplitude",
            "requires σ ≥ 0 and positive I₀, δz and k",
        ));
    }
    Ok(k * sigma / (4.0 * PI * PI * SQRT_2 * i0 * delta_z * q * q))
}
