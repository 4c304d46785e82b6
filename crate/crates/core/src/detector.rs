//! Photon detection: correlated shot noise, per-channel efficiency, reference
//! misalignment, binning to the detection matrix and the optional averaging
//! filter.
//!
//! Shot noise uses a maximal Poisson coupling per propagation pixel. With
//! `c = min(I_P, I_R)`, a common pair count `C ~ Poisson(c)` is shared by the
//! channels and each channel adds an independent `Poisson(I − c)` excess, so
//! both marginals are exactly Poisson with the right mean and no clamping is
//! ever needed. The reference twin of each pair may additionally be
//! displaced by a Gaussian of width `twin_spread · k_b` pixels, modelling the
//! finite cross-correlation width; with zero spread the twins sit in the
//! same pixel.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optics::BeamTriples;
use crate::rng::{self, domain};
use crate::wavefield::{check_same_shape, GridSpec, RealField};

/// Parameters of the detection chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    /// Single-channel quantum efficiency η₀ ∈ (0, 1].
    pub efficiency: f64,
    /// Reference misalignment ε in coherence lengths.
    pub misalignment: f64,
    /// Propagation pixels per coherence length, k_b.
    pub coherence_pixels: usize,
    /// Binning factor b: propagation pixels per detection pixel side.
    pub bin: usize,
    /// Side of the sliding averaging filter (1 = off).
    pub avg_k: usize,
    pub shot_noise: bool,
    /// Width of the twin-photon cross-correlation, in coherence lengths.
    #[serde(default)]
    pub twin_spread: f64,
    pub seed: u64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            efficiency: 0.95,
            misalignment: 0.25,
            coherence_pixels: 5,
            bin: 5,
            avg_k: 1,
            shot_noise: true,
            twin_spread: 0.0,
            seed: 0,
        }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(invalid(
                "efficiency",
                format!("must lie in (0, 1], got {}", self.efficiency),
            ));
        }
        if !(self.misalignment.is_finite() && self.misalignment >= 0.0) {
            return Err(invalid(
                "misalignment",
                format!("must be non-negative, got {}", self.misalignment),
            ));
        }
        if self.coherence_pixels == 0 {
            return Err(invalid("coherence_pixels", "must be at least 1"));
        }
        if self.bin == 0 {
            return Err(invalid("bin", "must be at least 1"));
        }
        if self.avg_k == 0 {
            return Err(invalid("avg_k", "must be at least 1"));
        }
        if !(self.twin_spread.is_finite() && self.twin_spread >= 0.0) {
            return Err(invalid(
                "twin_spread",
                format!("must be non-negative, got {}", self.twin_spread),
            ));
        }
        Ok(())
    }

    /// Reference shift in propagation pixels, `round(ε · k_b)`.
    pub fn shift_pixels(&self) -> i64 {
        (self.misalignment * self.coherence_pixels as f64).round() as i64
    }

    /// The misalignment actually simulated after pixel rounding.
    pub fn effective_misalignment(&self) -> f64 {
        self.shift_pixels() as f64 / self.coherence_pixels as f64
    }

    /// Detection-cell side in coherence lengths, `d = b / k_b`.
    pub fn scale(&self) -> f64 {
        self.bin as f64 / self.coherence_pixels as f64
    }

    /// Effective scale after the averaging filter, `d' = k · d`.
    pub fn effective_scale(&self) -> f64 {
        self.avg_k as f64 * self.scale()
    }

    fn twin_sigma_pixels(&self) -> f64 {
        self.twin_spread * self.coherence_pixels as f64
    }
}

/// Integer photon counts at one plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhotonFrame {
    pub counts: Array2<u32>,
}

impl PhotonFrame {
    pub fn new(counts: Array2<u32>) -> Self {
        Self { counts }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.counts.dim()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.counts.mapv(f64::from)
    }
}

/// Identifies the random streams of one plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub plane: u64,
}

const PAIRS: u64 = 0;
const PROBE: u64 = 1;
const REFERENCE: u64 = 2;

fn poisson(rng: &mut impl Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u32
}

fn check_intensity(frame: &Array2<f64>) -> Result<()> {
    for ((row, col), &value) in frame.indexed_iter() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::NegativeIntensity { value, row, col });
        }
    }
    Ok(())
}

/// Draw Poisson counts row by row from streams keyed by `(key, channel)`.
fn poisson_frame(mean: &Array2<f64>, key: NoiseKey, channel: u64) -> Array2<u32> {
    let mut out = Array2::<u32>::zeros(mean.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(mean.axis_iter(Axis(0)))
        .enumerate()
        .for_each(|(r, (mut row, m))| {
            let mut rng = rng::stream(
                key.seed,
                &[domain::SHOT_NOISE, key.plane, channel],
                r as u64,
            );
            for (o, &m) in row.iter_mut().zip(m.iter()) {
                *o = poisson(&mut rng, m);
            }
        });
    out
}

/// Move each of the `pairs` photons by a Gaussian kick of `sigma` pixels
/// (after a uniform position inside its pixel), wrapping periodically.
fn displace(pairs: &Array2<u32>, sigma: f64, key: NoiseKey) -> Array2<u32> {
    if sigma == 0.0 {
        return pairs.clone();
    }
    let (rows, cols) = pairs.dim();
    let targets: Vec<Vec<(usize, usize)>> = pairs
        .axis_iter(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(r, row)| {
            let mut rng = rng::stream(
                key.seed,
                &[domain::TWIN_DISPLACEMENT, key.plane],
                r as u64,
            );
            let mut out = Vec::new();
            for (c, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    let y: f64 = r as f64 + rng.random::<f64>()
                        + sigma * rng.sample::<f64, _>(StandardNormal);
                    let x: f64 = c as f64 + rng.random::<f64>()
                        + sigma * rng.sample::<f64, _>(StandardNormal);
                    out.push((
                        (y.floor() as i64).rem_euclid(rows as i64) as usize,
                        (x.floor() as i64).rem_euclid(cols as i64) as usize,
                    ));
                }
            }
            out
        })
        .collect();
    let mut out = Array2::<u32>::zeros((rows, cols));
    for row in targets {
        for (r, c) in row {
            out[[r, c]] += 1;
        }
    }
    out
}

/// Correlated shot noise for a probe/reference pair of expected-intensity
/// frames (photons per pixel). See the module documentation for the model.
pub fn add_twin_shot_noise(
    probe: &Array2<f64>,
    reference: &Array2<f64>,
    twin_sigma_pixels: f64,
    key: NoiseKey,
) -> Result<(PhotonFrame, PhotonFrame)> {
    check_same_shape(probe.dim(), reference.dim())?;
    check_intensity(probe)?;
    check_intensity(reference)?;
    if !(twin_sigma_pixels.is_finite() && twin_sigma_pixels >= 0.0) {
        return Err(invalid("twin_spread", "must be non-negative"));
    }
    let common = crate::wavefield::zip_map(probe, reference, f64::min);
    let pairs = poisson_frame(&common, key, PAIRS);
    let probe_extra = poisson_frame(&(probe - &common), key, PROBE);
    let reference_extra = poisson_frame(&(reference - &common), key, REFERENCE);
    let twins = displace(&pairs, twin_sigma_pixels, key);
    Ok((
        PhotonFrame::new(pairs + probe_extra),
        PhotonFrame::new(twins + reference_extra),
    ))
}

/// Perfectly correlated shot noise: [`add_twin_shot_noise`] with twins in
/// the same pixel.
pub fn add_correlated_shot_noise(
    probe: &RealField,
    reference: &RealField,
    key: NoiseKey,
) -> Result<(PhotonFrame, PhotonFrame)> {
    add_twin_shot_noise(probe.values(), reference.values(), 0.0, key)
}

/// Expected intensities rounded to whole photons (detection without shot
/// noise).
pub fn round_to_counts(frame: &Array2<f64>) -> Result<PhotonFrame> {
    check_intensity(frame)?;
    Ok(PhotonFrame::new(frame.mapv(|v| v.round() as u32)))
}

/// Independent binomial thinning of every pixel.
pub fn apply_efficiency(
    frame: &PhotonFrame,
    efficiency: f64,
    key: NoiseKey,
    channel: u64,
) -> Result<PhotonFrame> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(invalid(
            "efficiency",
            format!("must lie in (0, 1], got {efficiency}"),
        ));
    }
    if efficiency == 1.0 {
        return Ok(frame.clone());
    }
    let mut out = Array2::<u32>::zeros(frame.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(frame.counts.axis_iter(Axis(0)))
        .enumerate()
        .for_each(|(r, (mut row, counts))| {
            let mut rng = rng::stream(
                key.seed,
                &[domain::EFFICIENCY, key.plane, channel],
                r as u64,
            );
            for (o, &n) in row.iter_mut().zip(counts.iter()) {
                *o = if n == 0 {
                    0
                } else {
                    Binomial::new(n as u64, efficiency)
                        .expect("valid binomial parameters")
                        .sample(&mut rng) as u32
                };
            }
        });
    Ok(PhotonFrame::new(out))
}

/// Placement of the detection matrix on the propagation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DetectionGeometry {
    pub bin: usize,
    pub bins: usize,
    /// First propagation pixel (both axes) of the first bin.
    pub offset: usize,
}

impl DetectionGeometry {
    /// Largest centered `bins × bins` matrix that leaves a margin of at least
    /// `margin` pixels on every side.
    pub fn new(n: usize, bin: usize, margin: usize) -> Result<Self> {
        if bin == 0 {
            return Err(invalid("bin", "must be at least 1"));
        }
        let usable = n.saturating_sub(2 * margin);
        let bins = usable / bin;
        if bins == 0 {
            return Err(invalid(
                "shift",
                format!("a margin of {margin} pixels leaves no room for {bin}-pixel bins on a {n}-pixel frame"),
            ));
        }
        Ok(Self {
            bin,
            bins,
            offset: (n - bins * bin) / 2,
        })
    }

    /// Grid of the detection matrix derived from the propagation grid.
    pub fn spec(&self, propagation: &GridSpec) -> Result<GridSpec> {
        propagation.binned(self.bin, self.bins)
    }
}

/// Sum `b × b` blocks of the frame translated by `shift = (rows, cols)`:
/// bin `(i, j)` collects the pixels `(y − shift.0, x − shift.1)` for `(y, x)`
/// in its block, so content moves by `+shift`. The margin equal to the
/// largest shift component is discarded and the remainder is center-cropped
/// to a multiple of `b`.
pub fn bin_with_shift(frame: &PhotonFrame, bin: usize, shift: (i64, i64)) -> Result<PhotonFrame> {
    let (rows, cols) = frame.dim();
    if rows != cols {
        return Err(Error::ShapeMismatch {
            expected: (rows, rows),
            actual: (rows, cols),
        });
    }
    let margin = shift.0.unsigned_abs().max(shift.1.unsigned_abs()) as usize;
    let geometry = DetectionGeometry::new(rows, bin, margin)?;
    bin_in_geometry(frame, &geometry, shift)
}

fn bin_in_geometry(
    frame: &PhotonFrame,
    geometry: &DetectionGeometry,
    shift: (i64, i64),
) -> Result<PhotonFrame> {
    let n = frame.dim().0 as i64;
    let DetectionGeometry { bin, bins, offset } = *geometry;
    let lo = offset as i64;
    let hi = (offset + bins * bin) as i64;
    for s in [shift.0, shift.1] {
        if lo - s < 0 || hi - s > n {
            return Err(invalid(
                "shift",
                format!("shift {s} exceeds the {offset}-pixel margin"),
            ));
        }
    }
    let mut out = Array2::<u32>::zeros((bins, bins));
    for i in 0..bins {
        for j in 0..bins {
            let r0 = (lo + (i * bin) as i64 - shift.0) as usize;
            let c0 = (lo + (j * bin) as i64 - shift.1) as usize;
            out[[i, j]] = frame
                .counts
                .slice(s![r0..r0 + bin, c0..c0 + bin])
                .iter()
                .sum();
        }
    }
    Ok(PhotonFrame::new(out))
}

/// Sliding `k × k` mean with the window clipped at the frame edges. For even
/// `k` the window covers offsets `−k/2 ..= k/2 − 1`.
pub fn averaging_filter(frame: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let (rows, cols) = frame.dim();
    if k == 0 {
        return Err(invalid("avg_k", "must be at least 1"));
    }
    if k > rows.min(cols) {
        return Err(invalid(
            "avg_k",
            format!("{k} exceeds the {rows}×{cols} frame"),
        ));
    }
    if k == 1 {
        return Ok(frame.clone());
    }
    // Summed-area table with a zero border.
    let mut sat = Array2::<f64>::zeros((rows + 1, cols + 1));
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            run += frame[[r, c]];
            sat[[r + 1, c + 1]] = sat[[r, c + 1]] + run;
        }
    }
    let before = k / 2;
    let after = k - before - 1;
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(before), (r + after + 1).min(rows));
        let (c0, c1) = (c.saturating_sub(before), (c + after + 1).min(cols));
        let sum = sat[[r1, c1]] - sat[[r0, c1]] - sat[[r1, c0]] + sat[[r0, c0]];
        sum / ((r1 - r0) * (c1 - c0)) as f64
    }))
}

/// Detected frames at the three planes (`−δz, 0, +δz`).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub probe: [RealField; 3],
    pub reference: [RealField; 3],
    pub delta_z: f64,
    pub model: DetectorModel,
    pub geometry: DetectionGeometry,
    /// Reference shift actually applied, in propagation pixels (both axes).
    pub shift_pixels: i64,
}

impl DetectionSet {
    pub fn spec(&self) -> &GridSpec {
        self.probe[1].spec()
    }

    /// Mean detected counts per detection pixel in the probe channel.
    pub fn mean_probe_counts(&self) -> f64 {
        self.probe.iter().map(RealField::mean).sum::<f64>() / 3.0
    }
}

/// Run the full detection chain on every plane.
///
/// Plane `p` draws from streams keyed by `(seed, p)`, so the three planes
/// are independent, while the two channels of a plane share the pair count.
pub fn detect(triples: &BeamTriples, model: &DetectorModel) -> Result<DetectionSet> {
    model.validate()?;
    let spec = *triples.spec();
    let n = spec.n();
    let shift = model.shift_pixels();
    // The matrix is centered on the grid; the shift only matters when it
    // eats into the crop left over by the binning.
    let margin = shift.unsigned_abs() as usize;
    let geometry = DetectionGeometry::new(n, model.bin, margin)?;
    let det_spec = geometry.spec(&spec)?;

    let planes: Vec<Result<(RealField, RealField)>> = (0..3usize)
        .into_par_iter()
        .map(|p| {
            let key = NoiseKey {
                seed: model.seed,
                plane: p as u64,
            };
            let (probe, reference) = (triples.probe[p].values(), triples.reference[p].values());
            let (probe, reference) = if model.shot_noise {
                add_twin_shot_noise(probe, reference, model.twin_sigma_pixels(), key)?
            } else {
                (round_to_counts(probe)?, round_to_counts(reference)?)
            };
            let probe = apply_efficiency(&probe, model.efficiency, key, PROBE)?;
            let reference = apply_efficiency(&reference, model.efficiency, key, REFERENCE)?;
            let probe = bin_in_geometry(&probe, &geometry, (0, 0))?;
            let reference = bin_in_geometry(&reference, &geometry, (shift, shift))?;
            let probe = averaging_filter(&probe.to_f64(), model.avg_k)?;
            let reference = averaging_filter(&reference.to_f64(), model.avg_k)?;
            Ok((
                RealField::new(det_spec, probe)?,
                RealField::new(det_spec, reference)?,
            ))
        })
        .collect();
    let mut probe = Vec::with_capacity(3);
    let mut reference = Vec::with_capacity(3);
    for plane in planes {
        let (p, r) = plane?;
        probe.push(p);
        reference.push(r);
    }
    Ok(DetectionSet {
        probe: probe.try_into().expect("three planes"),
        reference: reference.try_into().expect("three planes"),
        delta_z: triples.delta_z,
        model: *model,
        geometry,
        shift_pixels: shift,
    })
}

/// Noise-free detection: `η₀` times the expected intensities, binned and
/// filtered like [`detect`] but never rounded to whole photons. The limit of
/// infinitely many repetitions; `shot_noise` and `seed` are ignored.
pub fn detect_expected(triples: &BeamTriples, model: &DetectorModel) -> Result<DetectionSet> {
    model.validate()?;
    let spec = *triples.spec();
    let shift = model.shift_pixels();
    let geometry = DetectionGeometry::new(spec.n(), model.bin, shift.unsigned_abs() as usize)?;
    let det_spec = geometry.spec(&spec)?;
    let frame = |f: &RealField, s: i64| -> Result<RealField> {
        check_intensity(f.values())?;
        let binned = bin_expected(f.values(), &geometry, (s, s)).mapv(|v| v * model.efficiency);
        RealField::new(det_spec, averaging_filter(&binned, model.avg_k)?)
    };
    let [a, b, c] = triples.probe.each_ref().map(|f| frame(f, 0));
    let [d, e, g] = triples.reference.each_ref().map(|f| frame(f, shift));
    Ok(DetectionSet {
        probe: [a?, b?, c?],
        reference: [d?, e?, g?],
        delta_z: triples.delta_z,
        model: *model,
        geometry,
        shift_pixels: shift,
    })
}

/// Real-valued counterpart of the photon binning; the geometry already
/// leaves room for the shift.
fn bin_expected(frame: &Array2<f64>, geometry: &DetectionGeometry, shift: (i64, i64)) -> Array2<f64> {
    let DetectionGeometry { bin, bins, offset } = *geometry;
    Array2::from_shape_fn((bins, bins), |(i, j)| {
        let r0 = (offset as i64 + (i * bin) as i64 - shift.0) as usize;
        let c0 = (offset as i64 + (j * bin) as i64 - shift.1) as usize;
        frame.slice(s![r0..r0 + bin, c0..c0 + bin]).sum()
    })
}
