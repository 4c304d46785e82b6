//! Propagation of the source ensemble through the far-field lens, the phase
//! object and the defocused imaging planes, with incoherent accumulation of
//! probe and reference intensities over modes.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::PathBuf;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster;
use crate::source::{mode_with_envelope, SourceModel};
use crate::wavefield::{
    accumulate_filtered_intensity, fft2_in_place, fftshift, ifftshift,
    spectrum_transposed, ComplexField, Direction, GridSpec, RealField,
};

/// Real phase map in radians. Values are finite; comparisons between maps
/// are meaningful only up to a global constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap(RealField);

impl PhaseMap {
    pub fn new(spec: GridSpec, values: Array2<f64>) -> Result<Self> {
        Self::from_field(RealField::new(spec, values)?)
    }

    pub fn from_field(field: RealField) -> Result<Self> {
        if let Some(((r, c), v)) = field.values().indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(
                "phase",
                format!("non-finite value {v} at pixel ({r}, {c})"),
            ));
        }
        Ok(Self(field))
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self(RealField::zeros(spec))
    }

    pub fn spec(&self) -> &GridSpec {
        self.0.spec()
    }

    pub fn values(&self) -> &Array2<f64> {
        self.0.values()
    }

    pub fn as_field(&self) -> &RealField {
        &self.0
    }

    pub fn into_field(self) -> RealField {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }

    /// Point reflection through the optical axis, as produced by the imaging
    /// system.
    pub fn inverted(&self) -> Self {
        Self(self.0.with_values(invert_image(self.0.values())))
    }
}

/// Built-in phase objects. Regions are binary: phase `h` inside, 0 outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectDescriptor {
    /// Three-by-three grid of squares of side `n/10`, spaced by twice their
    /// side, spanning the central half of the grid.
    NineSquares,
    /// Centered square whose side is `side_fraction · n`.
    Square { side_fraction: f64 },
    /// Centered disk of radius `radius_fraction · n`.
    Disk { radius_fraction: f64 },
    /// Constant phase `h` everywhere (a pure piston).
    Uniform,
    /// Half-plane step: phase `h` for columns at or right of the axis. On the
    /// periodic grid this also produces an edge at the wrap boundary.
    Step,
    /// Greyscale P5 mask, normalized by its maximum value and resampled by
    /// nearest neighbour to fit the central half of the grid.
    Raster { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseObject {
    map: PhaseMap,
    descriptor: ObjectDescriptor,
    height: f64,
}

impl PhaseObject {
    pub fn map(&self) -> &PhaseMap {
        &self.map
    }

    pub fn descriptor(&self) -> &ObjectDescriptor {
        &self.descriptor
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn spec(&self) -> &GridSpec {
        self.map.spec()
    }
}

pub fn make_phase_object(
    descriptor: &ObjectDescriptor,
    spec: GridSpec,
    height: f64,
) -> Result<PhaseObject> {
    if !height.is_finite() {
        return Err(invalid("h", format!("phase height must be finite, got {height}")));
    }
    let mask = object_mask(descriptor, spec.n())?;
    let map = PhaseMap::new(spec, mask.mapv(|m| m * height))?;
    Ok(PhaseObject {
        map,
        descriptor: descriptor.clone(),
        height,
    })
}

fn object_mask(descriptor: &ObjectDescriptor, n: usize) -> Result<Array2<f64>> {
    let center = (n / 2) as i64;
    let in_box = |r: usize, c: usize, cy: i64, cx: i64, side: i64| {
        let (y0, x0) = (cy - side / 2, cx - side / 2);
        let (r, c) = (r as i64, c as i64);
        r >= y0 && r < y0 + side && c >= x0 && c < x0 + side
    };
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let mask = match descriptor {
        ObjectDescriptor::NineSquares => {
            let side = (n / 10).max(1) as i64;
            Array2::from_shape_fn((n, n), |(r, c)| {
                let hit = (-1..=1).any(|i| {
                    (-1..=1).any(|j| {
                        in_box(r, c, center + 2 * side * i, center + 2 * side * j, side)
                    })
                });
                indicator(hit)
            })
        }
        ObjectDescriptor::Square { side_fraction } => {
            check_fraction("side_fraction", *side_fraction, 1.0)?;
            let side = (side_fraction * n as f64).round() as i64;
            Array2::from_shape_fn((n, n), |(r, c)| indicator(in_box(r, c, center, center, side)))
        }
        ObjectDescriptor::Disk { radius_fraction } => {
            check_fraction("radius_fraction", *radius_fraction, 0.5)?;
            let rad = radius_fraction * n as f64;
            Array2::from_shape_fn((n, n), |(r, c)| {
                let (dy, dx) = (r as f64 - center as f64, c as f64 - center as f64);
                indicator(dy * dy + dx * dx <= rad * rad)
            })
        }
        ObjectDescriptor::Uniform => Array2::ones((n, n)),
        ObjectDescriptor::Step => {
            Array2::from_shape_fn((n, n), |(_, c)| indicator(c as i64 >= center))
        }
        ObjectDescriptor::Raster { path } => {
            let image = raster::read_pgm(path)?;
            let (h, w) = image.dim();
            if h > n || w > n {
                return Err(Error::Raster {
                    path: path.clone(),
                    reason: format!("{w}×{h} mask exceeds the {n}×{n} grid"),
                });
            }
            place_centered(&image, n)
        }
    };
    Ok(mask)
}

fn check_fraction(name: &'static str, v: f64, max: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0 && v <= max) {
        return Err(invalid(name, format!("must lie in (0, {max}], got {v}")));
    }
    Ok(())
}

/// Nearest-neighbour resample so the longer side spans `n / 2`, centered.
fn place_centered(image: &Array2<f64>, n: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    let scale = (n / 2) as f64 / h.max(w) as f64;
    let (th, tw) = (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    );
    let (y0, x0) = (n / 2 - th / 2, n / 2 - tw / 2);
    let mut out = Array2::zeros((n, n));
    for r in 0..th {
        let sr = ((r as f64 + 0.5) / scale).floor().min((h - 1) as f64) as usize;
        for c in 0..tw {
            let sc = ((c as f64 + 0.5) / scale).floor().min((w - 1) as f64) as usize;
            out[[y0 + r, x0 + c]] = image[[sr, sc]];
        }
    }
    out
}

/// `u → u·e^{iφ}`.
pub fn apply_phase_object(field: &ComplexField, obj: &PhaseObject) -> Result<ComplexField> {
    if !field.spec().matches(obj.spec()) {
        return Err(Error::GridMismatch("field and phase object"));
    }
    let mut out = field.clone();
    Zip::from(out.values_mut())
        .and(obj.map.values())
        .for_each(|u, &phi| *u *= Complex64::from_polar(1.0, phi));
    Ok(out)
}

/// Field at the back focal plane of a lens in f-f configuration.
///
/// The spatial field is centered at `n/2`; the transform is unitary up to
/// the factor `pitch_in / pitch_out` that keeps `Σ|u|²·pitch²` invariant.
pub fn lens_far_field(field: &ComplexField, f: f64) -> Result<ComplexField> {
    let spec = field.spec().far_field(f)?;
    let mut values = ifftshift(field.values());
    lens_in_place(&mut values, field.spec().pitch() / spec.pitch())?;
    ComplexField::new(spec, values)
}

fn lens_in_place(values: &mut Array2<Complex64>, scale: f64) -> Result<()> {
    fft2_in_place(values, Direction::Forward)?;
    *values = fftshift(values);
    values.mapv_inplace(|v| v * scale);
    Ok(())
}

/// Largest `|z|` for which the Fresnel transfer function is sampled without
/// aliasing: `λ|z| q_max < extent/2`, i.e. `|z| < extent² / (λ n)`.
pub fn max_safe_distance(spec: &GridSpec) -> f64 {
    spec.extent() * spec.extent() / (spec.wavelength() * spec.n() as f64)
}

/// Precomputed transfer function `exp(−iπλz|q|²)` on a grid.
#[derive(Debug, Clone)]
pub struct FresnelKernel {
    z: f64,
    values: Array2<Complex64>,
}

impl FresnelKernel {
    pub fn new(spec: &GridSpec, z: f64) -> Result<Self> {
        if !z.is_finite() {
            return Err(invalid("z", format!("must be finite, got {z}")));
        }
        let max_safe = max_safe_distance(spec);
        if z.abs() >= max_safe {
            return Err(Error::Aliasing { z: z.abs(), max_safe });
        }
        let q = spec.frequencies();
        let a = -PI * spec.wavelength() * z;
        let values = Array2::from_shape_fn(spec.shape(), |(r, c)| {
            Complex64::from_polar(1.0, a * q.q_squared(r, c))
        });
        Ok(Self { z, values })
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }
}

/// Paraxial free-space propagation by `z` (transfer-function method,
/// periodic boundaries).
pub fn fresnel_propagate(field: &ComplexField, z: f64) -> Result<ComplexField> {
    let kernel = FresnelKernel::new(field.spec(), z)?;
    if z == 0.0 {
        return Ok(field.clone());
    }
    let mut values = field.values().clone();
    fft2_in_place(&mut values, Direction::Forward)?;
    values *= kernel.values();
    fft2_in_place(&mut values, Direction::Inverse)?;
    ComplexField::new(*field.spec(), values)
}

/// Point reflection `i → (n − i) mod n` on both axes, fixing index `n/2`.
pub fn invert_image<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (rows, cols) = a.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        a[[(rows - r) % rows, (cols - c) % cols]].clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalTrain {
    pub focal_length: f64,
    pub delta_z: f64,
}

impl OpticalTrain {
    pub fn new(focal_length: f64, delta_z: f64) -> Result<Self> {
        if !(focal_length.is_finite() && focal_length > 0.0) {
            return Err(invalid("focal_length", format!("must be positive, got {focal_length}")));
        }
        if !(delta_z.is_finite() && delta_z >= 0.0) {
            return Err(invalid("delta_z", format!("must be non-negative, got {delta_z}")));
        }
        Ok(Self {
            focal_length,
            delta_z,
        })
    }
}

/// Everything needed to push modes through the optics for a set of planes.
pub struct StackSetup<'a> {
    source: &'a SourceModel,
    object: &'a PhaseObject,
    planes: Vec<f64>,
    kernels: Vec<Option<FresnelKernel>>,
    transmission: Array2<Complex64>,
    envelope: Array2<f64>,
    lens_scale: f64,
}

impl<'a> StackSetup<'a> {
    /// Validates grids and the aliasing bound for every plane up front.
    pub fn new(
        source: &'a SourceModel,
        focal_length: f64,
        object: &'a PhaseObject,
        planes: &[f64],
    ) -> Result<Self> {
        let object_spec = source.spec().far_field(focal_length)?;
        if !object_spec.matches(object.spec()) {
            return Err(Error::GridMismatch(
                "phase object and the lens far field of the source",
            ));
        }
        if planes.is_empty() {
            return Err(invalid("planes", "at least one plane is required"));
        }
        let kernels = planes
            .iter()
            .map(|&z| {
                let kernel = FresnelKernel::new(&object_spec, z)?;
                Ok((z != 0.0).then_some(kernel))
            })
            .collect::<Result<Vec<_>>>()?;
        let transmission = object.map.values().mapv(|phi| Complex64::from_polar(1.0, phi));
        Ok(Self {
            source,
            object,
            planes: planes.to_vec(),
            kernels,
            transmission,
            envelope: source.envelope(),
            lens_scale: source.spec().pitch() / object_spec.pitch(),
        })
    }

    pub fn planes(&self) -> &[f64] {
        &self.planes
    }

    pub fn empty_sums(&self) -> RawStack {
        let n = self.object.spec().n();
        let zeros = || vec![Array2::zeros((n, n)); self.planes.len()];
        RawStack {
            probe: zeros(),
            reference: zeros(),
            modes: 0,
        }
    }

    /// Add the intensities of modes `range` (in order) to `sums`.
    pub fn accumulate(&self, sums: &mut RawStack, range: Range<usize>) -> Result<()> {
        for index in range {
            self.add_mode(sums, index).map_err(|e| Error::ModePropagation {
                index,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    fn add_mode(&self, sums: &mut RawStack, index: usize) -> Result<()> {
        if index >= self.source.modes() {
            return Err(Error::ModeIndex {
                index,
                modes: self.source.modes(),
            });
        }
        let mode = mode_with_envelope(self.source, &self.envelope, index);
        let mut field = ifftshift(mode.values());
        lens_in_place(&mut field, self.lens_scale)?;

        let needs_spectrum = self.kernels.iter().any(Option::is_some);
        let spectra = if needs_spectrum {
            let probe = &field * &self.transmission;
            Some((spectrum_transposed(&probe)?, spectrum_transposed(&field)?))
        } else {
            None
        };

        let focus = field.mapv(|u| u.norm_sqr());
        sums.probe
            .par_iter_mut()
            .zip(sums.reference.par_iter_mut())
            .zip(self.kernels.par_iter())
            .try_for_each(|((probe, reference), kernel)| -> Result<()> {
                match (kernel, &spectra) {
                    (Some(kernel), Some((sp, sr))) => {
                        accumulate_filtered_intensity(probe, sp, kernel.values())?;
                        accumulate_filtered_intensity(reference, sr, kernel.values())?;
                    }
                    _ => {
                        // A pure phase object leaves the in-focus intensity
                        // unchanged, so both channels see |u|².
                        *probe += &focus;
                        *reference += &focus;
                    }
                }
                Ok(())
            })?;
        sums.modes += 1;
        Ok(())
    }

    /// Run all modes of the source and normalize.
    pub fn run(&self, mean_photons: f64) -> Result<BeamStack> {
        let mut sums = self.empty_sums();
        self.accumulate(&mut sums, 0..self.source.modes())?;
        sums.finish(self, mean_photons)
    }
}

/// Unnormalized per-plane intensity sums over the modes added so far, in
/// object-plane orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStack {
    pub probe: Vec<Array2<f64>>,
    pub reference: Vec<Array2<f64>>,
    pub modes: usize,
}

impl RawStack {
    /// Image (invert) and scale so that the mean reference intensity equals
    /// `mean_photons` per pixel. One factor is shared by all frames.
    pub fn finish(self, setup: &StackSetup<'_>, mean_photons: f64) -> Result<BeamStack> {
        if !(mean_photons.is_finite() && mean_photons > 0.0) {
            return Err(invalid("mean_photons", format!("must be positive, got {mean_photons}")));
        }
        if self.modes == 0 {
            return Err(Error::Degenerate("no modes accumulated".into()));
        }
        let spec = *setup.object.spec();
        let mean = self.reference[0].mean().unwrap_or(0.0);
        if !(mean > 0.0) {
            return Err(Error::Degenerate("reference intensity is zero".into()));
        }
        let scale = mean_photons / mean;
        let image = |frames: Vec<Array2<f64>>| -> Result<Vec<RealField>> {
            frames
                .into_iter()
                .map(|a| RealField::new(spec, invert_image(&a).mapv(|v| v * scale)))
                .collect()
        };
        Ok(BeamStack {
            planes: setup.planes.clone(),
            probe: image(self.probe)?,
            reference: image(self.reference)?,
            mean_photons,
            modes: self.modes,
        })
    }
}

/// Expected photon intensities of both channels at an arbitrary set of
/// defocus planes, sharing one mode ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamStack {
    pub planes: Vec<f64>,
    pub probe: Vec<RealField>,
    pub reference: Vec<RealField>,
    pub mean_photons: f64,
    pub modes: usize,
}

impl BeamStack {
    fn plane_index(&self, z: f64) -> Result<usize> {
        self.planes
            .iter()
            .position(|&p| (p - z).abs() <= 1e-12 * z.abs().max(1e-30))
            .ok_or_else(|| invalid("delta_z", format!("plane {z:e} m was not simulated")))
    }

    /// Frames at `−δz, 0, +δz`.
    pub fn triple(&self, delta_z: f64) -> Result<BeamTriples> {
        let idx = [
            self.plane_index(-delta_z)?,
            self.plane_index(0.0)?,
            self.plane_index(delta_z)?,
        ];
        Ok(BeamTriples {
            delta_z,
            probe: idx.map(|i| self.probe[i].clone()),
            reference: idx.map(|i| self.reference[i].clone()),
            mean_photons: self.mean_photons,
        })
    }
}

/// Probe and reference expected intensities at `−δz, 0, +δz` (in that
/// order), in photons per propagation pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamTriples {
    pub delta_z: f64,
    pub probe: [RealField; 3],
    pub reference: [RealField; 3],
    pub mean_photons: f64,
}

impl BeamTriples {
    pub fn spec(&self) -> &GridSpec {
        self.probe[1].spec()
    }

    /// The reference triple in both channels, i.e. the same optics with no
    /// object. Used to measure noise reduction without signal.
    pub fn object_free(&self) -> Self {
        Self {
            probe: self.reference.clone(),
            ..self.clone()
        }
    }

    /// Same frames scaled to a new mean photon number.
    pub fn rescaled(&self, mean_photons: f64) -> Result<Self> {
        if !(mean_photons.is_finite() && mean_photons > 0.0) {
            return Err(invalid("mean_photons", format!("must be positive, got {mean_photons}")));
        }
        let s = mean_photons / self.mean_photons;
        let scale = |f: &RealField| f.map(|v| v * s);
        Ok(Self {
            delta_z: self.delta_z,
            probe: self.probe.each_ref().map(scale),
            reference: self.reference.each_ref().map(scale),
            mean_photons,
        })
    }

    /// Uniform frames: no speckle, no object.
    pub fn flat(spec: GridSpec, delta_z: f64, mean_photons: f64) -> Self {
        let frame = RealField::from_fn(spec, |_| mean_photons);
        Self {
            delta_z,
            probe: [frame.clone(), frame.clone(), frame.clone()],
            reference: [frame.clone(), frame.clone(), frame],
            mean_photons,
        }
    }
}

/// Simulate all planes of `planes` in one pass over the modes.
pub fn simulate_stack(
    source: &SourceModel,
    focal_length: f64,
    object: &PhaseObject,
    planes: &[f64],
    mean_photons: f64,
) -> Result<BeamStack> {
    StackSetup::new(source, focal_length, object, planes)?.run(mean_photons)
}

pub fn simulate_triple(
    source: &SourceModel,
    train: &OpticalTrain,
    object: &PhaseObject,
    mean_photons: f64,
) -> Result<BeamTriples> {
    let dz = train.delta_z;
    simulate_stack(source, train.focal_length, object, &[-dz, 0.0, dz], mean_photons)?.triple(dz)
}

/// Planes `0, ±δz` for every `δz` in the list, deduplicated.
pub fn sweep_planes(delta_zs: &[f64]) -> Vec<f64> {
    let mut planes = vec![0.0];
    for &dz in delta_zs {
        for z in [-dz, dz] {
            if !planes.contains(&z) {
                planes.push(z);
            }
        }
    }
    planes
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(n: usize) -> GridSpec {
        GridSpec::new(n, 6e-4, 6.4e-7).unwrap()
    }

    #[test]
    fn nine_squares_layout() {
        let obj = make_phase_object(&ObjectDescriptor::NineSquares, spec(100), PI / 8.0).unwrap();
        let v = obj.map().values();
        let inside = v.iter().filter(|&&x| x == PI / 8.0).count();
        assert_eq!(inside, 9 * 100);
        assert!(v.iter().all(|&x| x == 0.0 || x == PI / 8.0));
        // Centers of the corner and middle squares.
        for (r, c) in [(50, 50), (30, 30), (70, 70), (30, 70)] {
            assert_eq!(v[[r, c]], PI / 8.0);
        }
        // Gaps between squares are background.
        assert_eq!(v[[50, 40]], 0.0);
        assert_eq!(v[[40, 50]], 0.0);
    }

    #[test]
    fn centered_square_mean() {
        let obj = make_phase_object(
            &ObjectDescriptor::Square { side_fraction: 0.5 },
            spec(512),
            PI / 4.0,
        )
        .unwrap();
        assert_relative_eq!(obj.map().mean(), PI / 16.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_height_gives_zero_map() {
        for d in [
            ObjectDescriptor::NineSquares,
            ObjectDescriptor::Disk { radius_fraction: 0.2 },
            ObjectDescriptor::Step,
            ObjectDescriptor::Uniform,
        ] {
            let obj = make_phase_object(&d, spec(32), 0.0).unwrap();
            assert!(obj.map().values().iter().all(|&v| v == 0.0));
        }
        assert!(make_phase_object(&ObjectDescriptor::NineSquares, spec(32), f64::NAN).is_err());
        assert!(make_phase_object(
            &ObjectDescriptor::Square { side_fraction: 1.5 },
            spec(32),
            1.0
        )
        .is_err());
    }

    #[test]
    fn inversion_fixes_axis() {
        let a = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let b = invert_image(&a);
        assert_eq!(b[[2, 2]], a[[2, 2]]);
        assert_eq!(b[[1, 3]], a[[3, 1]]);
        assert_eq!(b[[0, 0]], a[[0, 0]]);
        assert_eq!(invert_image(&b), a);
    }

    #[test]
    fn sweep_planes_deduplicates() {
        assert_eq!(sweep_planes(&[1.0, 2.0, 1.0]), vec![0.0, -1.0, 1.0, -2.0, 2.0]);
        assert_eq!(sweep_planes(&[0.0]), vec![0.0]);
    }

    #[test]
    fn aliasing_bound_is_reported() {
        let s = spec(512);
        let max = max_safe_distance(&s);
        assert_relative_eq!(max, 6e-4 * 6e-4 / (6.4e-7 * 512.0));
        match FresnelKernel::new(&s, 2.0 * max) {
            Err(Error::Aliasing { max_safe, .. }) => assert_relative_eq!(max_safe, max),
            other => panic!("expected aliasing error, got {other:?}"),
        }
        assert!(FresnelKernel::new(&s, -0.5 * max).is_ok());
    }
}
