//! JSON experiment descriptions, the built-in scenarios, and reproducible
//! on-disk outputs.
//!
//! Every quantity carries its SI unit in the field name. A run writes its
//! artifacts atomically (temporary file + rename) and finishes with
//! `manifest.json`, which lists every file with its SHA-256.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{detect, DetectionGeometry, DetectorModel};
use crate::error::{invalid, Error, Result};
use crate::metrics::{
    averaging_filter_study, csv_error, sweep_defocus, NoiseMode, Optimum, Pipeline, SweepReport,
};
use crate::optics::{make_phase_object, max_safe_distance, simulate_stack, sweep_planes, ObjectDescriptor};
use crate::quantumcorr::{eta_c_analytic, k_opt_pooled, nrf_pooled, residual_pooled, BORDER_FRACTION};
use crate::raster::encode_pgm16;
use crate::rng::{self, domain};
use crate::source::{source_grid, waist_for_coherence_length, SourceModel};
use crate::tie::TieOptions;
use crate::wavefield::{border_pixels, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    /// Side of the object-plane grid.
    pub extent_m: f64,
    pub wavelength_m: f64,
}

/// Random-phase source. Exactly one of `waist_m` and `coherence_length_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waist_m: Option<f64>,
    /// Far-field coherence length; the waist is derived from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherence_length_m: Option<f64>,
    /// Number of independent modes L.
    pub modes: usize,
    /// Phase-screen seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    pub focal_length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub shape: ObjectDescriptor,
    /// Phase step `h`.
    pub height_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// In coherence lengths.
    pub misalignment: f64,
    pub coherence_pixels: usize,
    pub bin: usize,
    #[serde(default = "one")]
    pub avg_k: usize,
    #[serde(default = "yes")]
    pub shot_noise: bool,
    /// In coherence lengths.
    #[serde(default)]
    pub twin_spread: f64,
    /// Incident photons per detection pixel at the image plane.
    pub mean_photons_per_detection_pixel: f64,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl DetectorConfig {
    pub fn model(&self, seed: u64) -> DetectorModel {
        DetectorModel {
            efficiency: self.efficiency,
            misalignment: self.misalignment,
            coherence_pixels: self.coherence_pixels,
            bin: self.bin,
            avg_k: self.avg_k,
            shot_noise: self.shot_noise,
            twin_spread: self.twin_spread,
            seed,
        }
    }

    /// Photons per propagation pixel, `⟨n⟩ / b²`.
    pub fn photons_per_propagation_pixel(&self) -> f64 {
        self.mean_photons_per_detection_pixel / (self.bin * self.bin) as f64
    }
}

/// A list of values, given explicitly or as a geometric progression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Grid {
    Values(Vec<f64>),
    Log { start: f64, stop: f64, points: usize },
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Grid::Values(ref v) => v.clone(),
            Grid::Log { start, stop, points } => match points {
                0 => Vec::new(),
                1 => vec![start],
                _ => (0..points)
                    .map(|i| start * (stop / start).powf(i as f64 / (points - 1) as f64))
                    .collect(),
            },
        }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        let v = self.values();
        if v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(invalid(name, "needs at least one positive value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Reconstruction quality against defocus distance.
    DefocusSweep {
        delta_z_m: Grid,
        noise_modes: Vec<NoiseMode>,
    },
    /// Reconstruction quality against averaging-filter size.
    AveragingFilter {
        delta_z_m: f64,
        filter_sizes: Vec<usize>,
        noise_modes: Vec<NoiseMode>,
    },
    /// Conditional efficiency, NRF, optimal gain and residual noise against
    /// the scale parameter `d`: analytic curves plus end-to-end measurements
    /// at `d = bin / coherence_pixels` for each listed bin.
    NoiseReduction {
        delta_z_m: f64,
        scales: Grid,
        bins: Vec<usize>,
        efficiencies: Vec<f64>,
        misalignments: Vec<f64>,
        /// Interior pixels pooled per empirical point (more detector
        /// realizations are drawn until this is reached).
        min_samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Also write every reconstructed phase map.
    #[serde(default)]
    pub save_maps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub grid: GridConfig,
    pub source: SourceConfig,
    pub optics: OpticsConfig,
    pub object: ObjectConfig,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub tie: TieOptions,
    pub experiment: Experiment,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Parse and validate. Syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Read a config file; relative raster paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let ObjectDescriptor::Raster { path: raster } = &mut config.object.shape {
            if raster.is_relative() {
                if let Some(dir) = path.parent() {
                    *raster = dir.join(&*raster);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.n, self.grid.extent_m, self.grid.wavelength_m)
    }

    pub fn source_seed(&self) -> u64 {
        self.source.seed.unwrap_or(self.run.seed)
    }

    pub fn waist(&self) -> Result<f64> {
        match (self.source.waist_m, self.source.coherence_length_m) {
            (Some(w), None) => Ok(w),
            (None, Some(l_c)) => waist_for_coherence_length(self.optics.focal_length_m, self.grid.wavelength_m, l_c),
            _ => Err(invalid(
                "source",
                "set exactly one of `waist_m` and `coherence_length_m`",
            )),
        }
    }

    pub fn source_model(&self) -> Result<SourceModel> {
        let spec = source_grid(&self.grid_spec()?, self.optics.focal_length_m)?;
        SourceModel::new(spec, self.waist()?, self.source.modes, self.source_seed())
    }

    /// Detector with the run seed.
    pub fn detector_model(&self) -> DetectorModel {
        self.detector.model(self.run.seed)
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let spec = self.grid_spec()?;
        Ok(Pipeline {
            source: self.source_model()?,
            object: make_phase_object(&self.object.shape, spec, self.object.height_rad)?,
            focal_length: self.optics.focal_length_m,
            detector: self.detector_model(),
            mean_photons: self.detector.photons_per_propagation_pixel(),
            tie: self.tie,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let spec = self.grid_spec()?;
        self.source_model()?;
        self.detector_model().validate()?;
        self.tie.validate()?;
        if !(self.detector.mean_photons_per_detection_pixel.is_finite()
            && self.detector.mean_photons_per_detection_pixel > 0.0)
        {
            return Err(invalid("mean_photons_per_detection_pixel", "must be positive"));
        }
        if !self.object.height_rad.is_finite() {
            return Err(invalid("height_rad", "must be finite"));
        }
        let max_dz = max_safe_distance(&spec);
        let check_dz = |dz: f64| -> Result<()> {
            if !(dz.is_finite() && dz > 0.0) {
                return Err(invalid("delta_z_m", format!("must be positive, got {dz}")));
            }
            if dz > max_dz {
                return Err(Error::Aliasing { z: dz, max_safe: max_dz });
            }
            Ok(())
        };
        let check_modes = |modes: &[NoiseMode]| -> Result<()> {
            if modes.is_empty() {
                return Err(invalid("noise_modes", "at least one mode is required"));
            }
            Ok(())
        };
        match &self.experiment {
            Experiment::DefocusSweep { delta_z_m, noise_modes } => {
                delta_z_m.validate("delta_z_m")?;
                delta_z_m.values().into_iter().try_for_each(check_dz)?;
                check_modes(noise_modes)?;
            }
            Experiment::AveragingFilter { delta_z_m, filter_sizes, noise_modes } => {
                check_dz(*delta_z_m)?;
                check_modes(noise_modes)?;
                if filter_sizes.is_empty() || filter_sizes.contains(&0) {
                    return Err(invalid("filter_sizes", "sizes must be at least 1"));
                }
            }
            Experiment::NoiseReduction {
                delta_z_m,
                scales,
                bins,
                efficiencies,
                misalignments,
                min_samples,
            } => {
                check_dz(*delta_z_m)?;
                scales.validate("scales")?;
                if efficiencies.is_empty() || misalignments.is_empty() {
                    return Err(invalid("efficiencies", "efficiency and misalignment lists must not be empty"));
                }
                if *min_samples == 0 {
                    return Err(invalid("min_samples", "must be positive"));
                }
                for &bin in bins {
                    for &efficiency in efficiencies {
                        for &misalignment in misalignments {
                            let m = DetectorModel { bin, efficiency, misalignment, ..self.detector_model() };
                            m.validate()?;
                            DetectionGeometry::new(spec.n(), bin, m.shift_pixels().unsigned_abs() as usize)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named configurations reproducing each figure of the study.
pub const BUILTIN_NAMES: [&str; 5] = [
    "fig2_nrf_vs_d",
    "fig3_residual_noise",
    "fig4_rows",
    "fig5_sweep",
    "fig6_avg_filter",
];

fn builtin_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig2_nrf_vs_d" => include_str!("../scenarios/fig2_nrf_vs_d.json"),
        "fig3_residual_noise" => include_str!("../scenarios/fig3_residual_noise.json"),
        "fig4_rows" => include_str!("../scenarios/fig4_rows.json"),
        "fig5_sweep" => include_str!("../scenarios/fig5_sweep.json"),
        "fig6_avg_filter" => include_str!("../scenarios/fig6_avg_filter.json"),
        _ => return None,
    })
}

pub fn builtin(name: &str) -> Result<ExperimentConfig> {
    let text = builtin_text(name)
        .ok_or_else(|| Error::Config(format!("unknown scenario `{name}`; try one of {BUILTIN_NAMES:?}")))?;
    ExperimentConfig::from_json(text)
}

pub fn builtin_scenarios() -> Vec<ExperimentConfig> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin(n).expect("built-in scenarios are valid"))
        .collect()
}

/// One row of the noise-reduction study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRow {
    /// `analytic` or `empirical`.
    pub kind: &'static str,
    /// Scale parameter in coherence lengths.
    pub d: f64,
    pub efficiency: f64,
    /// Requested misalignment.
    pub misalignment: f64,
    /// Misalignment after pixel rounding (equal to the requested one for
    /// analytic rows).
    pub effective_misalignment: f64,
    pub eta_c: f64,
    pub nrf_model: f64,
    pub k_opt_model: f64,
    pub residual_model: f64,
    pub nrf: Option<f64>,
    pub nrf_se: Option<f64>,
    pub k_opt: Option<f64>,
    pub k_opt_se: Option<f64>,
    pub residual: Option<f64>,
    pub residual_se: Option<f64>,
    pub samples: Option<usize>,
    pub realizations: Option<usize>,
}

impl NoiseRow {
    fn analytic(d: f64, efficiency: f64, misalignment: f64, effective: f64, spread: f64) -> Result<Self> {
        let eta_c = eta_c_analytic(d, effective, spread)?;
        let k = efficiency * eta_c;
        Ok(Self {
            kind: "analytic",
            d,
            efficiency,
            misalignment,
            effective_misalignment: effective,
            eta_c,
            nrf_model: 1.0 - k,
            k_opt_model: k,
            residual_model: 1.0 - k * k,
            nrf: None,
            nrf_se: None,
            k_opt: None,
            k_opt_se: None,
            residual: None,
            residual_se: None,
            samples: None,
            realizations: None,
        })
    }
}

fn noise_reduction(config: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    let Experiment::NoiseReduction {
        delta_z_m,
        scales,
        bins,
        efficiencies,
        misalignments,
        min_samples,
    } = &config.experiment
    else {
        unreachable!("called for the noise-reduction experiment only");
    };
    let spread = config.detector.twin_spread;
    let mut rows = Vec::new();
    for &efficiency in efficiencies {
        for &eps in misalignments {
            for d in scales.values() {
                rows.push(NoiseRow::analytic(d, efficiency, eps, eps, spread)?);
            }
        }
    }
    if bins.is_empty() {
        return Ok(rows);
    }

    let pipeline = config.pipeline()?;
    let triples = simulate_stack(
        &pipeline.source,
        pipeline.focal_length,
        &pipeline.object,
        &sweep_planes(&[*delta_z_m]),
        pipeline.mean_photons,
    )?
    .triple(*delta_z_m)?
    .object_free();
    let n = config.grid.n;
    let points: Vec<(usize, f64, f64)> = bins
        .iter()
        .flat_map(|&b| {
            efficiencies
                .iter()
                .flat_map(move |&e| misalignments.iter().map(move |&m| (b, e, m)))
        })
        .collect();
    let empirical: Vec<NoiseRow> = points
        .par_iter()
        .enumerate()
        .map(|(idx, &(bin, efficiency, misalignment))| -> Result<NoiseRow> {
            let base = DetectorModel { bin, efficiency, misalignment, ..pipeline.detector };
            let geometry = DetectionGeometry::new(n, bin, base.shift_pixels().unsigned_abs() as usize)?;
            let interior = geometry.bins - 2 * border_pixels(geometry.bins, BORDER_FRACTION);
            let per_set = 3 * interior * interior;
            let realizations = min_samples.div_ceil(per_set).max(1);
            let sets = (0..realizations)
                .map(|r| {
                    let seed = rng::sub_seed(config.run.seed, &[domain::SWEEP_POINT, idx as u64, r as u64]);
                    detect(&triples, &DetectorModel { seed, ..base })
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = sets
                .iter()
                .flat_map(|s| (0..3).map(move |p| (s.probe[p].values(), s.reference[p].values())))
                .collect();
            let nrf = nrf_pooled(&pairs, 1)?;
            let k = k_opt_pooled(&pairs)?;
            let residual = residual_pooled(&pairs, k.value)?;
            let mut row = NoiseRow::analytic(base.scale(), efficiency, misalignment, base.effective_misalignment(), spread)?;
            row.kind = "empirical";
            row.nrf = Some(nrf.value);
            row.nrf_se = Some(nrf.std_error);
            row.k_opt = Some(k.value);
            row.k_opt_se = Some(k.std_error);
            row.residual = Some(residual.value);
            row.residual_se = Some(residual.std_error);
            row.samples = Some(nrf.samples);
            row.realizations = Some(realizations);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    rows.extend(empirical);
    Ok(rows)
}

/// In-memory result of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Sweep(SweepReport),
    NoiseReduction(Vec<NoiseRow>),
}

/// Run the experiment without touching the file system.
pub fn execute(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    match &config.experiment {
        Experiment::DefocusSweep { delta_z_m, noise_modes } => {
            sweep_defocus(&config.pipeline()?, &delta_z_m.values(), noise_modes).map(Outcome::Sweep)
        }
        Experiment::AveragingFilter { delta_z_m, filter_sizes, noise_modes } => {
            averaging_filter_study(&config.pipeline()?, *delta_z_m, filter_sizes, noise_modes).map(Outcome::Sweep)
        }
        Experiment::NoiseReduction { .. } => noise_reduction(config).map(Outcome::NoiseReduction),
    }
}

impl Outcome {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match self {
            Outcome::Sweep(report) => report.write_csv(out),
            Outcome::NoiseReduction(rows) => {
                let mut w = csv::Writer::from_writer(out);
                for r in rows {
                    w.serialize(r).map_err(csv_error)?;
                }
                w.flush()?;
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub run: u64,
    pub source: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub compute_s: f64,
    pub write_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub name: String,
    /// `complete` or `failed`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub threads: usize,
    pub files: Vec<FileEntry>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

/// A failed run: the cause, and the manifest flagged `failed` when one
/// could be written.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub manifest: Option<Box<RunManifest>>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

/// Write-once output directory; every file is written to a temporary name
/// and renamed into place.
struct Artifacts {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Raw little-endian f32 map, JSON sidecar and 16-bit PGM preview.
    fn write_map(&mut self, stem: &str, values: &Array2<f64>, spec: &GridSpec, quantity: &str) -> Result<()> {
        let raw: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let sidecar = serde_json::json!({
            "shape": [values.nrows(), values.ncols()],
            "dtype": "float32",
            "byte_order": "little",
            "layout": "row_major",
            "pitch_m": spec.pitch(),
            "quantity": quantity,
            "units": "rad",
            "sha256": sha256_hex(&raw),
        });
        self.write(&format!("{stem}.f32"), &raw)?;
        self.write(&format!("{stem}.json"), pretty(&sidecar).as_bytes())?;
        self.write(&format!("{stem}.pgm"), &encode_pgm16(values))
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a sibling temporary file and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| invalid("output", format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    optima: &'a [Optimum],
}

fn write_outcome(config: &ExperimentConfig, outcome: &Outcome, out: &mut Artifacts) -> Result<()> {
    let mut csv = Vec::new();
    outcome.write_csv(&mut csv)?;
    out.write("results.csv", &csv)?;
    let Outcome::Sweep(report) = outcome else {
        return Ok(());
    };
    let summary = Summary { name: &config.name, optima: &report.optima };
    out.write("summary.json", pretty(&summary).as_bytes())?;
    if config.run.save_maps {
        out.write_map("maps/truth", report.truth.values(), report.truth.spec(), "ground-truth phase")?;
        for (i, (record, map)) in report.records.iter().zip(&report.maps).enumerate() {
            if let Some(map) = map {
                let stem = format!("maps/{i:03}_{}_k{}_dz{:.3e}", record.mode.as_str(), record.avg_k, record.delta_z_m);
                out.write_map(&stem, map.values(), map.spec(), "reconstructed phase")?;
            }
        }
    }
    Ok(())
}

/// Run a validated config and write its outputs under `output_dir`.
pub fn run_scenario(config: &ExperimentConfig, output_dir: &Path) -> std::result::Result<RunManifest, RunFailure> {
    let start = Instant::now();
    let fail = |error: Error| RunFailure { error, manifest: None };
    config.validate().map_err(fail)?;
    let mut out = Artifacts::new(output_dir).map_err(fail)?;
    let mut manifest = RunManifest {
        name: config.name.clone(),
        status: "complete".into(),
        error: None,
        config: config.clone(),
        seeds: Seeds { run: config.run.seed, source: config.source_seed() },
        threads: rayon::current_num_threads(),
        files: Vec::new(),
        timings: Timings { compute_s: 0.0, write_s: 0.0, total_s: 0.0 },
    };
    let result = out
        .write("config.json", pretty(config).as_bytes())
        .and_then(|_| {
            let outcome = execute(config)?;
            manifest.timings.compute_s = start.elapsed().as_secs_f64();
            write_outcome(config, &outcome, &mut out)
        });
    manifest.timings.total_s = start.elapsed().as_secs_f64();
    manifest.timings.write_s = manifest.timings.total_s - manifest.timings.compute_s;
    manifest.files = std::mem::take(&mut out.files);
    if let Err(e) = &result {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
    }
    let written = write_atomic(&output_dir.join("manifest.json"), pretty(&manifest).as_bytes());
    match (result, written) {
        (Ok(()), Ok(())) => Ok(manifest),
        (Ok(()), Err(error)) => Err(RunFailure { error, manifest: None }),
        (Err(error), w) => Err(RunFailure { error, manifest: w.ok().map(|_| Box::new(manifest)) }),
    }
}
