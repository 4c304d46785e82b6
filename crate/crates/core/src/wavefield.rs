//! Square sampling grids, complex and real fields on them, and the unitary
//! two-dimensional DFT shared by propagation and reconstruction.
//!
//! Arrays are stored in natural DFT order: the zero frequency sits at index
//! 0 of a spectrum. Spatial fields are stored with the optical axis at index
//! `n / 2`. Use [`fftshift`] / [`ifftshift`] to move between the two views.

use std::cell::RefCell;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_SIDE: usize = 1 << 14;

/// Physical sampling of a square `n × n` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
    extent: f64,
    wavelength: f64,
}

impl GridSpec {
    pub fn new(n: usize, extent: f64, wavelength: f64) -> Result<Self> {
        if n < 8 {
            return Err(Error::InvalidGrid(format!(
                "n = {n} is below the minimum side of 8 pixels"
            )));
        }
        if n > MAX_SIDE {
            return Err(Error::InvalidGrid(format!(
                "n = {n} exceeds the supported maximum of {MAX_SIDE}"
            )));
        }
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "extent must be positive and finite, got {extent}"
            )));
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "wavelength must be positive and finite, got {wavelength}"
            )));
        }
        if wavelength >= extent {
            return Err(Error::InvalidGrid(format!(
                "wavelength {wavelength:e} m is not smaller than the grid extent {extent:e} m"
            )));
        }
        Ok(Self {
            n,
            extent,
            wavelength,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn pitch(&self) -> f64 {
        self.extent / self.n as f64
    }

    pub fn wavenumber(&self) -> f64 {
        std::f64::consts::TAU / self.wavelength
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.n)
    }

    /// Spacing of the frequency grid, `1 / extent` (cycles per meter).
    pub fn frequency_spacing(&self) -> f64 {
        1.0 / self.extent
    }

    /// Largest frequency magnitude along one axis, `n / (2 extent)`.
    pub fn max_frequency(&self) -> f64 {
        self.n as f64 / (2.0 * self.extent)
    }

    pub fn frequencies(&self) -> FrequencyGrid {
        FrequencyGrid::new(self)
    }

    /// Grid at the back focal plane of a lens of focal length `f` in an
    /// f-f configuration: the output pitch is `λ f / extent`.
    pub fn far_field(&self, focal_length: f64) -> Result<Self> {
        if !(focal_length.is_finite() && focal_length > 0.0) {
            return Err(crate::error::invalid(
                "focal_length",
                format!("must be positive, got {focal_length}"),
            ));
        }
        let pitch = self.wavelength * focal_length / self.extent;
        Self::new(self.n, pitch * self.n as f64, self.wavelength)
    }

    /// Grid of `bins × bins` super-pixels, each `bin` pixels of this grid wide.
    pub fn binned(&self, bin: usize, bins: usize) -> Result<Self> {
        Self::new(bins, bins as f64 * bin as f64 * self.pitch(), self.wavelength)
    }

    /// True when both grids describe the same sampling up to roundoff.
    pub fn matches(&self, other: &Self) -> bool {
        self.n == other.n
            && rel_eq(self.extent, other.extent)
            && rel_eq(self.wavelength, other.wavelength)
    }
}

fn rel_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Signed DFT index of position `j` on an axis of length `n`.
pub fn frequency_index(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Frequency coordinates of a grid, in natural DFT order.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    spacing: f64,
    axis: Vec<f64>,
}

impl FrequencyGrid {
    fn new(spec: &GridSpec) -> Self {
        let n = spec.n();
        let spacing = spec.frequency_spacing();
        let axis = (0..n)
            .map(|j| frequency_index(j, n) as f64 * spacing)
            .collect();
        Self { spacing, axis }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Frequency along either axis for array index `j` (zero frequency at 0).
    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    /// Axis reordered so that zero frequency sits at index `n / 2`.
    pub fn centered_axis(&self) -> Vec<f64> {
        let n = self.axis.len();
        (0..n).map(|i| self.axis[(i + n - n / 2) % n]).collect()
    }

    /// `|q|²` at array position `(row, col)`.
    pub fn q_squared(&self, row: usize, col: usize) -> f64 {
        let (qy, qx) = (self.axis[row], self.axis[col]);
        qx * qx + qy * qy
    }

    pub fn q_squared_map(&self) -> Array2<f64> {
        let n = self.axis.len();
        Array2::from_shape_fn((n, n), |(r, c)| self.q_squared(r, c))
    }

    pub fn max_abs(&self) -> f64 {
        self.axis.iter().fold(0.0_f64, |m, q| m.max(q.abs()))
    }
}

/// Complex scalar field sampled on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    spec: GridSpec,
    values: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(spec: GridSpec, values: Array2<Complex64>) -> Result<Self> {
        check_shape(&spec, values.dim())?;
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: Array2::zeros(spec.shape()),
        }
    }

    pub fn from_fn(spec: GridSpec, f: impl FnMut((usize, usize)) -> Complex64) -> Self {
        Self {
            values: Array2::from_shape_fn(spec.shape(), f),
            spec,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<Complex64> {
        self.values
    }

    /// Total power `Σ|u|² · pitch²`.
    pub fn power(&self) -> f64 {
        let p = self.spec.pitch();
        self.values.iter().map(|u| u.norm_sqr()).sum::<f64>() * p * p
    }
}

/// Real scalar field sampled on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    spec: GridSpec,
    values: Array2<f64>,
}

impl RealField {
    pub fn new(spec: GridSpec, values: Array2<f64>) -> Result<Self> {
        check_shape(&spec, values.dim())?;
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: Array2::zeros(spec.shape()),
        }
    }

    pub fn from_fn(spec: GridSpec, f: impl FnMut((usize, usize)) -> f64) -> Self {
        Self {
            values: Array2::from_shape_fn(spec.shape(), f),
            spec,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            spec: self.spec,
            values: self.values.mapv(f),
        }
    }

    pub(crate) fn with_values(&self, values: Array2<f64>) -> Self {
        debug_assert_eq!(values.dim(), self.values.dim());
        Self {
            spec: self.spec,
            values,
        }
    }
}

pub(crate) fn check_shape(spec: &GridSpec, dim: (usize, usize)) -> Result<()> {
    if dim != spec.shape() {
        return Err(Error::ShapeMismatch {
            expected: spec.shape(),
            actual: dim,
        });
    }
    Ok(())
}

pub(crate) fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn plan(n: usize, direction: Direction) -> Arc<dyn Fft<f64>> {
    let mut planner = planner().lock().unwrap_or_else(|e| e.into_inner());
    match direction {
        Direction::Forward => planner.plan_fft_forward(n),
        Direction::Inverse => planner.plan_fft_inverse(n),
    }
}

const ROWS_PER_TASK: usize = 32;

fn transform_rows(fft: &dyn Fft<f64>, buf: &mut [Complex64], n: usize) {
    buf.par_chunks_mut(n * ROWS_PER_TASK).for_each(|chunk| {
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(chunk, &mut scratch);
    });
}

thread_local! {
    static POOL: RefCell<Vec<Vec<Complex64>>> = const { RefCell::new(Vec::new()) };
}

/// Scratch buffers are recycled per thread; the pool never hands out the
/// same buffer twice, so nested parallel calls are safe.
fn take_buffer(len: usize) -> Vec<Complex64> {
    let mut v = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    v.resize(len, Complex64::default());
    v
}

fn give_buffer(v: Vec<Complex64>) {
    POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < 4 {
            pool.push(v);
        }
    });
}

fn into_buffer(a: Array2<Complex64>) -> Vec<Complex64> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    let (v, offset) = a.into_raw_vec_and_offset();
    debug_assert_eq!(offset.unwrap_or(0), 0);
    v
}

/// Row transforms followed by an out-of-place transpose.
fn rows_then_transpose(mut buf: Vec<Complex64>, n: usize, fft: &dyn Fft<f64>) -> Vec<Complex64> {
    transform_rows(fft, &mut buf, n);
    let mut out = take_buffer(n * n);
    transpose::transpose(&buf, &mut out, n, n);
    give_buffer(buf);
    out
}

fn square_side(dim: (usize, usize)) -> Result<usize> {
    if dim.0 != dim.1 {
        return Err(Error::ShapeMismatch {
            expected: (dim.0, dim.0),
            actual: dim,
        });
    }
    Ok(dim.0)
}

/// Unitary 2-D DFT of a square array, in place.
///
/// Both directions carry a `1/n` factor, so `Σ|u|²` is preserved.
pub fn fft2_in_place(data: &mut Array2<Complex64>, direction: Direction) -> Result<()> {
    let n = square_side(data.dim())?;
    let fft = plan(n, direction);
    let a = std::mem::take(data);
    let once = rows_then_transpose(into_buffer(a), n, fft.as_ref());
    let mut twice = rows_then_transpose(once, n, fft.as_ref());
    let scale = 1.0 / n as f64;
    twice.par_iter_mut().for_each(|v| *v *= scale);
    *data = Array2::from_shape_vec((n, n), twice).expect("length n²");
    Ok(())
}

/// Forward unitary DFT returned in transposed layout: element `[c, r]`
/// holds the coefficient for row frequency `r` and column frequency `c`.
///
/// Pointwise multiplication by a transfer function that depends only on
/// `|q|²` commutes with the transposition, which saves two transposes per
/// propagation.
pub(crate) fn spectrum_transposed(values: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = square_side(values.dim())?;
    let fft = plan(n, Direction::Forward);
    let mut buf = take_buffer(n * n);
    buf.copy_from_slice(
        values
            .as_slice()
            .expect("fields are stored in standard layout"),
    );
    let mut out = rows_then_transpose(buf, n, fft.as_ref());
    transform_rows(fft.as_ref(), &mut out, n);
    let scale = 1.0 / n as f64;
    out.par_iter_mut().for_each(|v| *v *= scale);
    Ok(Array2::from_shape_vec((n, n), out).expect("length n²"))
}

/// `acc += |IDFT(spectrum_t · kernel)|²`, with `spectrum_t` in the layout
/// of [`spectrum_transposed`] and `kernel` symmetric under transposition.
pub(crate) fn accumulate_filtered_intensity(
    acc: &mut Array2<f64>,
    spectrum_t: &Array2<Complex64>,
    kernel: &Array2<Complex64>,
) -> Result<()> {
    let n = square_side(spectrum_t.dim())?;
    check_same_shape(spectrum_t.dim(), kernel.dim())?;
    check_same_shape(spectrum_t.dim(), acc.dim())?;
    let fft = plan(n, Direction::Inverse);
    let scale = 1.0 / n as f64;
    let mut buf = take_buffer(n * n);
    let (s, k) = (
        spectrum_t.as_slice().expect("standard layout"),
        kernel.as_slice().expect("standard layout"),
    );
    buf.par_chunks_mut(n * ROWS_PER_TASK)
        .zip(s.par_chunks(n * ROWS_PER_TASK))
        .zip(k.par_chunks(n * ROWS_PER_TASK))
        .for_each(|((b, s), k)| {
            for ((b, s), k) in b.iter_mut().zip(s).zip(k) {
                *b = s * k * scale;
            }
        });
    let mut out = rows_then_transpose(buf, n, fft.as_ref());
    let acc = acc.as_slice_mut().expect("standard layout");
    out.par_chunks_mut(n * ROWS_PER_TASK)
        .zip(acc.par_chunks_mut(n * ROWS_PER_TASK))
        .for_each(|(chunk, acc)| {
            let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
            fft.process_with_scratch(chunk, &mut scratch);
            for (a, u) in acc.iter_mut().zip(chunk.iter()) {
                *a += u.norm_sqr();
            }
        });
    give_buffer(out);
    Ok(())
}

/// Unitary 2-D DFT of a field. The grid spec is carried over unchanged.
pub fn unitary_fft(mut field: ComplexField, direction: Direction) -> Result<ComplexField> {
    fft2_in_place(&mut field.values, direction)?;
    Ok(field)
}

/// Forward unitary DFT of a real array.
pub fn fft2_real(values: &Array2<f64>) -> Result<Array2<Complex64>> {
    let mut spectrum = values.mapv(|v| Complex64::new(v, 0.0));
    fft2_in_place(&mut spectrum, Direction::Forward)?;
    Ok(spectrum)
}

/// Inverse unitary DFT, keeping the real part.
pub fn ifft2_real(mut spectrum: Array2<Complex64>) -> Result<Array2<f64>> {
    fft2_in_place(&mut spectrum, Direction::Inverse)?;
    Ok(spectrum.mapv(|v| v.re))
}

/// Pointwise `|u|²`.
pub fn intensity(field: &ComplexField) -> RealField {
    RealField {
        spec: field.spec,
        values: field.values.mapv(|u| u.norm_sqr()),
    }
}

fn roll<T: Clone>(a: &Array2<T>, shift: usize) -> Array2<T> {
    let (rows, cols) = a.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        a[[(r + rows - shift % rows) % rows, (c + cols - shift % cols) % cols]].clone()
    })
}

/// Move index 0 to the center (`n / 2`).
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    roll(a, a.nrows() / 2)
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let n = a.nrows();
    roll(a, n - n / 2)
}

/// One annulus of a [`RadialSpectrum`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialBin {
    pub q_lower: f64,
    pub q_center: f64,
    pub q_upper: f64,
    /// Mean of `|F(q)|² / N` over the samples in the annulus, with `F` the
    /// unitary DFT and `N` the number of pixels.
    pub mean_power: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialSpectrum {
    pub bins: Vec<RadialBin>,
}

impl RadialSpectrum {
    /// `Σ mean_power · count`, equal to the spatial variance of the input.
    pub fn total(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| b.mean_power * b.count as f64)
            .sum()
    }
}

/// Azimuthally averaged power spectrum of the mean-subtracted map.
///
/// Annuli are one frequency spacing wide and centered on integer multiples
/// of it.
pub fn radial_power_spectrum(map: &RealField) -> Result<RadialSpectrum> {
    let n = map.spec.n();
    let mean = map.mean();
    let spectrum = fft2_real(&map.values.mapv(|v| v - mean))?;
    let dq = map.spec.frequency_spacing();
    let total = (n * n) as f64;

    let index_of = |r: usize, c: usize| {
        let (ky, kx) = (frequency_index(r, n) as f64, frequency_index(c, n) as f64);
        (kx * kx + ky * ky).sqrt().round() as usize
    };
    let max_bin = index_of(n / 2, n / 2);
    let mut sums = vec![0.0; max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    for ((r, c), v) in spectrum.indexed_iter() {
        let m = index_of(r, c);
        sums[m] += v.norm_sqr() / total;
        counts[m] += 1;
    }
    let bins = sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (_, count))| *count > 0)
        .map(|(m, (sum, count))| RadialBin {
            q_lower: ((m as f64 - 0.5) * dq).max(0.0),
            q_center: m as f64 * dq,
            q_upper: (m as f64 + 0.5) * dq,
            mean_power: sum / count as f64,
            count,
        })
        .collect();
    Ok(RadialSpectrum { bins })
}

/// Pixels excluded on each side by a border crop of `fraction` of the side.
pub fn border_pixels(side: usize, fraction: f64) -> usize {
    ((side as f64 * fraction).round() as usize).min(side.saturating_sub(1) / 2)
}

/// View of `a` without a border of `fraction` of its side on every edge.
pub fn crop_border(a: &Array2<f64>, fraction: f64) -> ndarray::ArrayView2<'_, f64> {
    let (rows, cols) = a.dim();
    let (br, bc) = (border_pixels(rows, fraction), border_pixels(cols, fraction));
    a.slice(ndarray::s![br..rows - br, bc..cols - bc])
}

/// Apply `f` elementwise to pairs of equally shaped arrays.
pub(crate) fn zip_map(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64 + Sync + Send,
) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out)
        .and(a)
        .and(b)
        .par_for_each(|o, &x, &y| *o = f(x, y));
    out
}
