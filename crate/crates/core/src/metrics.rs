//! Reconstruction quality and the sweeps over defocus distance and
//! averaging-filter size.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{averaging_filter, detect, detect_expected, DetectionGeometry, DetectionSet, DetectorModel};
use crate::error::{invalid, Error, Result};
use crate::optics::{simulate_stack, sweep_planes, BeamTriples, PhaseMap, PhaseObject};
use crate::quantumcorr::{eta_c_analytic, k_opt_pooled, nrf_pooled, subtract_noise, BORDER_FRACTION};
use crate::rng::{self, domain};
use crate::source::SourceModel;
use crate::tie::{retrieve_phase, TieInput, TieOptions};
use crate::wavefield::{check_same_shape, crop_border, RadialSpectrum, RealField};

/// How the probe frames are prepared before phase retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Expected intensities, binned but never rounded: no shot noise.
    Noiseless,
    /// Probe channel alone with shot noise: the classical benchmark.
    Shot,
    /// Probe minus `k_opt` times the reference fluctuation.
    Quantum,
    /// Perfect correlations: unit efficiency, no misalignment, `k = 1`.
    Ideal,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 4] = [Self::Noiseless, Self::Shot, Self::Quantum, Self::Ideal];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Noiseless => "noiseless",
            Self::Shot => "shot",
            Self::Quantum => "quantum",
            Self::Ideal => "ideal",
        }
    }
}

/// Pearson correlation of two equally shaped views.
pub fn pearson(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_same_shape(a.dim(), b.dim())?;
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::Degenerate("correlation of a constant map".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation coefficient between a reconstruction and the ground truth
/// over the map interior (5% border excluded).
pub fn correlation_coefficient(reconstructed: &PhaseMap, truth: &PhaseMap) -> Result<f64> {
    check_same_shape(reconstructed.values().dim(), truth.values().dim())?;
    pearson(
        crop_border(reconstructed.values(), BORDER_FRACTION),
        crop_border(truth.values(), BORDER_FRACTION),
    )
}

/// Ground truth as seen by the detector: imaged (inverted) and averaged over
/// each detection pixel of the probe channel.
pub fn truth_at_detection(object: &PhaseObject, geometry: &DetectionGeometry) -> Result<PhaseMap> {
    let image = object.map().inverted();
    let spec = geometry.spec(object.spec())?;
    let DetectionGeometry { bin, bins, offset } = *geometry;
    let values = image.values();
    let area = (bin * bin) as f64;
    let blocks = Array2::from_shape_fn((bins, bins), |(i, j)| {
        let (r0, c0) = (offset + i * bin, offset + j * bin);
        values
            .slice(ndarray::s![r0..r0 + bin, c0..c0 + bin])
            .sum()
            / area
    });
    PhaseMap::new(spec, blocks)
}

/// Least-squares slope of `ln P` against `ln q` over bins with
/// `q_lo ≤ q ≤ q_hi`.
pub fn log_log_slope(spectrum: &RadialSpectrum, q_lo: f64, q_hi: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = spectrum
        .bins
        .iter()
        .filter(|b| b.q_center >= q_lo && b.q_center <= q_hi && b.mean_power > 0.0)
        .map(|b| (b.q_center.ln(), b.mean_power.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "{} spectral bins in [{q_lo:e}, {q_hi:e}]",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Everything fixed across the points of a sweep.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub source: SourceModel,
    pub object: PhaseObject,
    pub focal_length: f64,
    /// Detector of the quantum and shot-noise modes.
    pub detector: DetectorModel,
    /// Expected photons per propagation pixel at the image plane.
    pub mean_photons: f64,
    pub tie: TieOptions,
}

impl Pipeline {
    fn ideal_detector(&self) -> DetectorModel {
        DetectorModel {
            efficiency: 1.0,
            misalignment: 0.0,
            twin_spread: 0.0,
            ..self.detector
        }
    }

}

/// Analytic NRF `1 − η₀ η_c(k·d, ε, σ)` of a detector at its effective scale.
pub fn nrf_model(detector: &DetectorModel) -> Result<f64> {
    detector.validate()?;
    let d = detector;
    let eta_c = eta_c_analytic(d.effective_scale(), d.effective_misalignment(), d.twin_spread)?;
    Ok(1.0 - d.efficiency * eta_c)
}

/// One reconstruction. Equality ignores the wall-clock runtime.
#[derive(Debug, Clone, Serialize)]
pub struct QualityRecord {
    pub delta_z_m: f64,
    pub avg_k: usize,
    pub mode: NoiseMode,
    /// Correlation coefficient with the ground truth; absent on failure.
    pub correlation: Option<f64>,
    /// NRF measured on the object-free frames of the same point.
    pub nrf: Option<f64>,
    /// Analytic NRF of the detector configuration.
    pub nrf_model: Option<f64>,
    /// Subtraction gain used.
    pub gain: Option<f64>,
    pub seed: u64,
    /// `ok` or the error that stopped this point.
    pub status: String,
    /// Wall-clock seconds; kept out of the CSV so outputs are reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
}

impl PartialEq for QualityRecord {
    fn eq(&self, other: &Self) -> bool {
        let key = |r: &Self| (r.delta_z_m, r.avg_k, r.mode, r.correlation, r.nrf, r.nrf_model, r.gain, r.seed);
        key(self) == key(other) && self.status == other.status
    }
}

/// Best point of one noise mode (and filter size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Optimum {
    pub mode: NoiseMode,
    pub avg_k: usize,
    pub delta_z_m: f64,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub records: Vec<QualityRecord>,
    /// Reconstructed phase of each record (absent for failed points).
    pub maps: Vec<Option<PhaseMap>>,
    pub truth: PhaseMap,
    pub optima: Vec<Optimum>,
}

impl SweepReport {
    fn new(records: Vec<QualityRecord>, maps: Vec<Option<PhaseMap>>, truth: PhaseMap) -> Self {
        let mut optima: Vec<Optimum> = Vec::new();
        for r in &records {
            let Some(c) = r.correlation else { continue };
            match optima.iter_mut().find(|o| o.mode == r.mode && o.avg_k == r.avg_k) {
                Some(o) if c > o.correlation => {
                    o.correlation = c;
                    o.delta_z_m = r.delta_z_m;
                }
                Some(_) => {}
                None => optima.push(Optimum {
                    mode: r.mode,
                    avg_k: r.avg_k,
                    delta_z_m: r.delta_z_m,
                    correlation: c,
                }),
            }
        }
        Self {
            records,
            maps,
            truth,
            optima,
        }
    }

    /// Correlation curve of one mode at filter size `avg_k`, in grid order.
    pub fn curve(&self, mode: NoiseMode, avg_k: usize) -> Vec<(f64, Option<f64>)> {
        self.records
            .iter()
            .filter(|r| r.mode == mode && r.avg_k == avg_k)
            .map(|r| (r.delta_z_m, r.correlation))
            .collect()
    }

    pub fn optimum(&self, mode: NoiseMode, avg_k: usize) -> Option<&Optimum> {
        self.optima.iter().find(|o| o.mode == mode && o.avg_k == avg_k)
    }

    /// RFC-4180 CSV, one record per row with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn retrieve(frames: [&Array2<f64>; 3], spec: &crate::wavefield::GridSpec, dz: f64, opts: &TieOptions) -> Result<PhaseMap> {
    let field = |a: &Array2<f64>| RealField::new(*spec, a.clone());
    let (minus, focus, plus) = (field(frames[0])?, field(frames[1])?, field(frames[2])?);
    retrieve_phase(
        &TieInput {
            focus: &focus,
            plus: &plus,
            minus: &minus,
            delta_z: dz,
        },
        opts,
    )
}

fn pairs(set: &DetectionSet) -> [(&Array2<f64>, &Array2<f64>); 3] {
    [0, 1, 2].map(|p| (set.probe[p].values(), set.reference[p].values()))
}

/// Subtract the reference fluctuations plane by plane with gain `k`.
fn subtracted(set: &DetectionSet, k: f64) -> Result<[Array2<f64>; 3]> {
    let [a, b, c] = pairs(set).map(|(p, r)| subtract_noise(p, r, k));
    Ok([a?, b?, c?])
}

struct Outcome {
    map: PhaseMap,
    nrf: Option<f64>,
    gain: Option<f64>,
}

/// Frames of one noise mode at one point, reconstructed and scored.
fn reconstruct(
    pipeline: &Pipeline,
    triples: &BeamTriples,
    mode: NoiseMode,
    model: &DetectorModel,
    noisy: Option<&DetectionSet>,
) -> Result<Outcome> {
    let dz = triples.delta_z;
    let opts = &pipeline.tie;
    match mode {
        NoiseMode::Noiseless => {
            let set = detect_expected(triples, model)?;
            let [m, f, p] = [0, 1, 2].map(|i| set.probe[i].values());
            Ok(Outcome {
                map: retrieve([m, f, p], set.spec(), dz, opts)?,
                nrf: None,
                gain: None,
            })
        }
        NoiseMode::Shot => {
            let set = noisy.expect("shot mode shares the quantum detection");
            let [m, f, p] = [0, 1, 2].map(|i| set.probe[i].values());
            Ok(Outcome {
                map: retrieve([m, f, p], set.spec(), dz, opts)?,
                nrf: None,
                gain: None,
            })
        }
        NoiseMode::Quantum => {
            let set = noisy.expect("quantum mode needs the detection");
            let k = k_opt_pooled(&pairs(set))?.value;
            let cleaned = subtracted(set, k)?;
            let free = detect(&triples.object_free(), model)?;
            let nrf = nrf_pooled(&pairs(&free), model.avg_k)?.value;
            Ok(Outcome {
                map: retrieve([&cleaned[0], &cleaned[1], &cleaned[2]], set.spec(), dz, opts)?,
                nrf: Some(nrf),
                gain: Some(k),
            })
        }
        NoiseMode::Ideal => {
            let ideal = DetectorModel { avg_k: model.avg_k, seed: model.seed, ..pipeline.ideal_detector() };
            let set = detect(triples, &ideal)?;
            let cleaned = subtracted(&set, 1.0)?;
            let free = detect(&triples.object_free(), &ideal)?;
            let nrf = nrf_pooled(&pairs(&free), ideal.avg_k)?.value;
            Ok(Outcome {
                map: retrieve([&cleaned[0], &cleaned[1], &cleaned[2]], set.spec(), dz, opts)?,
                nrf: Some(nrf),
                gain: Some(1.0),
            })
        }
    }
}

/// Ground truth passed through the same averaging filter as the frames, so
/// that the filter's loss of resolution is not scored as noise.
pub fn filtered_truth(truth: &PhaseMap, avg_k: usize) -> Result<PhaseMap> {
    PhaseMap::new(*truth.spec(), averaging_filter(truth.values(), avg_k)?)
}

/// All requested modes at one `(δz, avg_k)` point. The shot and quantum
/// modes share one detection, so they see identical noise.
fn run_point(
    pipeline: &Pipeline,
    triples: &BeamTriples,
    truth: &PhaseMap,
    modes: &[NoiseMode],
    avg_k: usize,
    seed: u64,
) -> Vec<(QualityRecord, Option<PhaseMap>)> {
    let model = DetectorModel { avg_k, seed, ..pipeline.detector };
    let truth = filtered_truth(truth, avg_k);
    let needs_noisy = modes.iter().any(|m| matches!(m, NoiseMode::Shot | NoiseMode::Quantum));
    let noisy = if needs_noisy { Some(detect(triples, &model)) } else { None };
    let nrf_model = nrf_model(&model).ok();
    modes
        .iter()
        .map(|&mode| {
            let start = Instant::now();
            let result = match &noisy {
                Some(Err(e)) if matches!(mode, NoiseMode::Shot | NoiseMode::Quantum) => {
                    Err(Error::Degenerate(format!("detection failed: {e}")))
                }
                _ => reconstruct(
                    pipeline,
                    triples,
                    mode,
                    &model,
                    noisy.as_ref().and_then(|n| n.as_ref().ok()),
                ),
            }
            .and_then(|o| {
                let truth = truth.as_ref().map_err(|e| Error::Degenerate(format!("ground truth: {e}")))?;
                let c = correlation_coefficient(&o.map, truth)?;
                Ok((o, c))
            });
            let mut record = QualityRecord {
                delta_z_m: triples.delta_z,
                avg_k,
                mode,
                correlation: None,
                nrf: None,
                nrf_model: matches!(mode, NoiseMode::Quantum).then_some(nrf_model).flatten(),
                gain: None,
                seed,
                status: "ok".into(),
                runtime_s: 0.0,
            };
            let map = match result {
                Ok((o, c)) => {
                    record.correlation = Some(c);
                    record.nrf = o.nrf;
                    record.gain = o.gain;
                    Some(o.map)
                }
                Err(e) => {
                    record.status = e.to_string();
                    None
                }
            };
            record.runtime_s = start.elapsed().as_secs_f64();
            (record, map)
        })
        .collect()
}

fn check_modes(modes: &[NoiseMode]) -> Result<()> {
    if modes.is_empty() {
        return Err(invalid("noise_modes", "at least one mode is required"));
    }
    Ok(())
}

fn detection_geometry(pipeline: &Pipeline) -> Result<DetectionGeometry> {
    pipeline.detector.validate()?;
    let n = pipeline.object.spec().n();
    DetectionGeometry::new(n, pipeline.detector.bin, pipeline.detector.shift_pixels().unsigned_abs() as usize)
}

fn point_seed(seed: u64, index: usize) -> u64 {
    rng::sub_seed(seed, &[domain::SWEEP_POINT, index as u64])
}

/// Reconstruction quality against defocus distance for each noise mode.
///
/// The optics run once for all planes. Point `i` uses detector seed
/// `sub_seed(detector.seed, i)`; failures are recorded and the sweep goes on.
pub fn sweep_defocus(pipeline: &Pipeline, delta_zs: &[f64], modes: &[NoiseMode]) -> Result<SweepReport> {
    check_modes(modes)?;
    if delta_zs.is_empty() || delta_zs.iter().any(|&dz| !(dz.is_finite() && dz > 0.0)) {
        return Err(invalid("delta_z_m", "the sweep needs positive defocus distances"));
    }
    let geometry = detection_geometry(pipeline)?;
    let truth = truth_at_detection(&pipeline.object, &geometry)?;
    let stack = simulate_stack(
        &pipeline.source,
        pipeline.focal_length,
        &pipeline.object,
        &sweep_planes(delta_zs),
        pipeline.mean_photons,
    )?;
    let points: Vec<Vec<(QualityRecord, Option<PhaseMap>)>> = delta_zs
        .par_iter()
        .enumerate()
        .map(|(i, &dz)| {
            let triples = stack.triple(dz)?;
            Ok(run_point(
                pipeline,
                &triples,
                &truth,
                modes,
                pipeline.detector.avg_k,
                point_seed(pipeline.detector.seed, i),
            ))
        })
        .collect::<Result<_>>()?;
    let (records, maps) = points.into_iter().flatten().unzip();
    Ok(SweepReport::new(records, maps, truth))
}

/// Reconstruction quality against averaging-filter size at one defocus
/// distance. Every filter size uses the same detector seed, so the only
/// difference between rows is the filter.
pub fn averaging_filter_study(
    pipeline: &Pipeline,
    delta_z: f64,
    filter_sizes: &[usize],
    modes: &[NoiseMode],
) -> Result<SweepReport> {
    check_modes(modes)?;
    if filter_sizes.is_empty() || filter_sizes.contains(&0) {
        return Err(invalid("avg_k", "filter sizes must be at least 1"));
    }
    let geometry = detection_geometry(pipeline)?;
    let truth = truth_at_detection(&pipeline.object, &geometry)?;
    let triples = simulate_stack(
        &pipeline.source,
        pipeline.focal_length,
        &pipeline.object,
        &sweep_planes(&[delta_z]),
        pipeline.mean_photons,
    )?
    .triple(delta_z)?;
    let seed = point_seed(pipeline.detector.seed, 0);
    let points: Vec<_> = filter_sizes
        .par_iter()
        .map(|&k| run_point(pipeline, &triples, &truth, modes, k, seed))
        .collect();
    let (records, maps) = points.into_iter().flatten().unzip();
    Ok(SweepReport::new(records, maps, truth))
}
