//! Pipeline commands behind the CLI verbs.
//!
//! Every command resolves its data source (simulated system, snapshot file,
//! or field file routed through POD), runs the requested stages, and writes
//! machine-readable outputs plus `config.json` and `manifest.json` into the
//! output directory. All output files carry the config hash in a leading
//! comment; reruns with an identical configuration are byte-identical
//! (`timings.json` reports wall times and is exempt).

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::config::{EstimatorKind, ResolvedConfig};
use crate::dictionary::{self, Dictionary};
use crate::dynsys::{self, SnapshotSet};
use crate::error::{Error, Result};
use crate::estimators::{self, Accumulation, KoopmanApprox};
use crate::io;
use crate::pod;
use crate::spectral::{self, SpectralResult};

struct OutputDir {
    dir: PathBuf,
    comment: Vec<String>,
    outputs: Vec<String>,
}

impl OutputDir {
    fn create(cfg: &ResolvedConfig) -> Result<OutputDir> {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let mut out = OutputDir {
            dir: cfg.out_dir.clone(),
            comment: vec![format!("config={}", cfg.hash)],
            outputs: Vec::new(),
        };
        out.write_text("config.json", &cfg.echo)?;
        Ok(out)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("cannot serialize {name}: {e}")))?;
        self.write_text(name, &text)
    }

    fn finish(mut self, command: &str, hash: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config_hash: &'a str,
            outputs: &'a [String],
        }
        let mut outputs = self.outputs.clone();
        outputs.push("manifest.json".to_string());
        outputs.sort();
        let manifest = Manifest { command, config_hash: hash, outputs: &outputs };
        self.write_json("manifest.json", &manifest)
    }
}

/// Loads or generates the snapshot pairs for this configuration, applying
/// noise and the POD compression stage where configured. Returns the pairs
/// and, for field inputs, the fitted basis plus the raw fields.
pub struct DataSource {
    pub snapshots: SnapshotSet,
    pub pod_basis: Option<pod::PodBasis>,
    pub fields: Option<Array2<f64>>,
}

pub fn resolve_data(cfg: &ResolvedConfig) -> Result<DataSource> {
    if let Some(system) = &cfg.system {
        let s = dynsys::simulate(system)?;
        let s = dynsys::add_noise(&s, cfg.noise_level, cfg.noise_seed)?;
        return Ok(DataSource { snapshots: s, pod_basis: None, fields: None });
    }
    if let Some(path) = &cfg.input_snapshots {
        let s = io::load_snapshots(path)?;
        let s = dynsys::add_noise(&s, cfg.noise_level, cfg.noise_seed)?;
        return Ok(DataSource { snapshots: s, pod_basis: None, fields: None });
    }
    if let Some(path) = &cfg.input_fields {
        let fields = io::load_field_matrix(path)?;
        let fields = add_field_noise(&fields, cfg.noise_level, cfg.noise_seed)?;
        let basis = pod::fit_pod(fields.view(), cfg.pod.rank, cfg.pod.center)?;
        let coeffs = pod::project(&basis, fields.view())?;
        let snapshots = pod::pairs_from_sequence(coeffs.view())?;
        return Ok(DataSource {
            snapshots,
            pod_basis: Some(basis),
            fields: Some(fields),
        });
    }
    Err(Error::Config(
        "no data source: set system, input_snapshots or input_fields".into(),
    ))
}

/// Gaussian noise on a raw field matrix, same convention as snapshot noise:
/// std = level * RMS of the clean entries.
fn add_field_noise(fields: &Array2<f64>, level: f64, seed: u64) -> Result<Array2<f64>> {
    if !(level >= 0.0) {
        return Err(Error::Domain(format!("noise level must be >= 0, got {level}")));
    }
    if level == 0.0 {
        return Ok(fields.clone());
    }
    use rand::SeedableRng;
    let rms = (fields.iter().map(|v| v * v).sum::<f64>() / fields.len() as f64).sqrt();
    let std = level * rms;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = fields.clone();
    for v in noisy.iter_mut() {
        *v += std * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
    }
    Ok(noisy)
}

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub pairs: usize,
    pub dim: usize,
    pub config_hash: String,
}

/// `generate`: write the configured snapshot set.
pub fn cmd_generate(cfg: &ResolvedConfig) -> Result<GenerateSummary> {
    if cfg.system.is_none() {
        return Err(Error::Config("generate requires a system".into()));
    }
    let mut out = OutputDir::create(cfg)?;
    let data = resolve_data(cfg)?;
    let comments = out.comment.clone();
    io::save_snapshots_with_comments(&data.snapshots, &out.path("snapshots.csv"), &comments)?;
    out.finish("generate", &cfg.hash)?;
    Ok(GenerateSummary {
        pairs: data.snapshots.count(),
        dim: data.snapshots.dim(),
        config_hash: cfg.hash.clone(),
    })
}

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct FitTimings {
    pub stages: Vec<StageTiming>,
    pub operator_nnz: Vec<(String, usize)>,
}

#[derive(Debug)]
pub struct FitSummary {
    pub pairs: usize,
    pub cells: usize,
    pub removed_cells: usize,
    /// Per-estimator (name, retained eigenvalue count, worst residual).
    pub spectra: Vec<(String, usize, f64)>,
    pub config_hash: String,
}

/// Shared fit stages: dictionary, accumulation, and the possibly reduced
/// dictionary.
pub struct FitStages {
    pub data: DataSource,
    pub accumulation: Accumulation,
    pub multdmd: Option<KoopmanApprox>,
    pub multdmd_spectrum: Option<SpectralResult>,
}

/// Loads the configured dictionary file, or fits k-means to the x-states.
fn build_dictionary(cfg: &ResolvedConfig, data: &DataSource) -> Result<Dictionary> {
    match &cfg.dictionary.file {
        Some(path) => io::load_dictionary(path),
        None => dictionary::fit_kmeans(
            data.snapshots.x(),
            cfg.dictionary.n,
            cfg.dictionary.seed.unwrap_or(cfg.seed),
            cfg.dictionary.max_iter,
            cfg.dictionary.subsample,
        ),
    }
}

pub fn run_fit_stages(cfg: &ResolvedConfig) -> Result<FitStages> {
    let data = resolve_data(cfg)?;
    let dict = build_dictionary(cfg, &data)?;
    let accumulation = estimators::accumulate(&data.snapshots, &dict)?;
    let wants_multdmd = cfg.estimator.estimators.contains(&EstimatorKind::MultDmd);
    let (multdmd, multdmd_spectrum) = if wants_multdmd {
        let k = estimators::fit_multdmd(&accumulation.weights, cfg.estimator.allow_empty_rows)?;
        let spectrum = spectral::cycle_spectrum(&k)?
            .retained(cfg.estimator.min_support)
            .with_residuals(&accumulation.weights, cfg.estimator.denominator)?;
        (Some(k), Some(spectrum))
    } else {
        (None, None)
    };
    Ok(FitStages { data, accumulation, multdmd, multdmd_spectrum })
}

/// `fit`: dictionary, transition weights, chosen estimators, spectra and
/// residuals, with a timing record per stage.
pub fn cmd_fit(cfg: &ResolvedConfig) -> Result<FitSummary> {
    let mut out = OutputDir::create(cfg)?;
    let comments = out.comment.clone();
    let mut stages = Vec::new();
    let mut nnz = Vec::new();

    let t0 = Instant::now();
    let data = resolve_data(cfg)?;
    stages.push(StageTiming { stage: "data".into(), seconds: t0.elapsed().as_secs_f64() });

    let t0 = Instant::now();
    let dict = build_dictionary(cfg, &data)?;
    stages.push(StageTiming { stage: "dictionary".into(), seconds: t0.elapsed().as_secs_f64() });

    let t0 = Instant::now();
    let acc = estimators::accumulate(&data.snapshots, &dict)?;
    stages.push(StageTiming { stage: "accumulate".into(), seconds: t0.elapsed().as_secs_f64() });
    io::save_dictionary(&acc.dictionary, &out.path("dictionary.csv"), &comments)?;

    let mut spectra_summary = Vec::new();
    for estimator in &cfg.estimator.estimators {
        match estimator {
            EstimatorKind::MultDmd => {
                let t0 = Instant::now();
                let k = estimators::fit_multdmd(&acc.weights, cfg.estimator.allow_empty_rows)?;
                stages.push(StageTiming {
                    stage: "fit_multdmd".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                nnz.push(("multdmd".to_string(), k.nnz()));
                io::save_operator(&k, &out.path("operator_multdmd.csv"), &comments)?;
                let t0 = Instant::now();
                let spectrum = spectral::cycle_spectrum(&k)?
                    .retained(cfg.estimator.min_support)
                    .with_residuals(&acc.weights, cfg.estimator.denominator)?;
                stages.push(StageTiming {
                    stage: "spectrum_multdmd".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                io::save_spectrum(&spectrum, &out.path("spectrum_multdmd.csv"), &comments)?;
                io::save_eigenvectors(
                    &spectrum,
                    &acc.dictionary,
                    Some(acc.weights.gram()),
                    &out.path("eigenvectors_multdmd.csv"),
                    &comments,
                )?;
                let worst = spectrum.residuals.as_ref().map(worst_residual).unwrap_or(f64::NAN);
                spectra_summary.push(("multdmd".to_string(), spectrum.eigenvalues.len(), worst));
            }
            EstimatorKind::Edmd => {
                let t0 = Instant::now();
                let k = estimators::fit_edmd_indicator(&acc.weights)?;
                stages.push(StageTiming {
                    stage: "fit_edmd".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                nnz.push(("edmd".to_string(), k.nnz()));
                io::save_operator(&k, &out.path("operator_edmd.csv"), &comments)?;
                let t0 = Instant::now();
                let spectrum = spectral::dense_eig(&k)?
                    .retained(cfg.estimator.min_support)
                    .with_residuals(&acc.weights, cfg.estimator.denominator)?;
                stages.push(StageTiming {
                    stage: "spectrum_edmd".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                io::save_spectrum(&spectrum, &out.path("spectrum_edmd.csv"), &comments)?;
                let worst = spectrum.residuals.as_ref().map(worst_residual).unwrap_or(f64::NAN);
                spectra_summary.push(("edmd".to_string(), spectrum.eigenvalues.len(), worst));
            }
            EstimatorKind::ExactDmd => {
                let t0 = Instant::now();
                let k = estimators::fit_exact_dmd(&data.snapshots)?;
                stages.push(StageTiming {
                    stage: "fit_exact_dmd".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                nnz.push(("exact_dmd".to_string(), k.nnz()));
                io::save_operator(&k, &out.path("operator_exact_dmd.csv"), &comments)?;
                // Raw-state spectrum: no indicator residuals or support filter.
                let spectrum = spectral::dense_eig(&k)?;
                io::save_spectrum(&spectrum, &out.path("spectrum_exact_dmd.csv"), &comments)?;
                spectra_summary.push((
                    "exact_dmd".to_string(),
                    spectrum.eigenvalues.len(),
                    f64::NAN,
                ));
            }
        }
    }
    out.write_json("timings.json", &FitTimings { stages, operator_nnz: nnz })?;
    out.finish("fit", &cfg.hash)?;
    Ok(FitSummary {
        pairs: data.snapshots.count(),
        cells: acc.dictionary.len(),
        removed_cells: acc.removed_cells.len(),
        spectra: spectra_summary,
        config_hash: cfg.hash.clone(),
    })
}

fn worst_residual(res: &Vec<f64>) -> f64 {
    res.iter().cloned().fold(0.0, f64::max)
}

#[derive(Debug, Serialize)]
pub struct PodSummary {
    pub dim: usize,
    pub snapshots: usize,
    pub rank: usize,
    pub energy_fractions: Vec<f64>,
    pub pairs: usize,
    pub config_hash: String,
}

/// `pod`: compress a field file, writing the basis, the coefficient series
/// and the paired coefficient snapshots.
pub fn cmd_pod(cfg: &ResolvedConfig) -> Result<PodSummary> {
    let Some(path) = &cfg.input_fields else {
        return Err(Error::Config("pod requires input_fields".into()));
    };
    let mut out = OutputDir::create(cfg)?;
    let comments = out.comment.clone();
    let fields = io::load_field_matrix(path)?;
    let fields = add_field_noise(&fields, cfg.noise_level, cfg.noise_seed)?;
    let basis = pod::fit_pod(fields.view(), cfg.pod.rank, cfg.pod.center)?;
    let coeffs = pod::project(&basis, fields.view())?;
    let pairs = pod::pairs_from_sequence(coeffs.view())?;
    io::save_pod_basis(&basis, &out.path("pod_basis.csv"), &comments)?;
    io::save_field_matrix(coeffs.t(), &out.path("pod_coefficients.csv"), &comments)?;
    io::save_snapshots_with_comments(&pairs, &out.path("pod_pairs.csv"), &comments)?;
    out.finish("pod", &cfg.hash)?;
    Ok(PodSummary {
        dim: basis.dim(),
        snapshots: fields.ncols(),
        rank: basis.rank(),
        energy_fractions: basis.energy_fractions().to_vec(),
        pairs: pairs.count(),
        config_hash: cfg.hash.clone(),
    })
}

#[derive(Debug, Serialize)]
pub struct ModesSummary {
    pub modes: usize,
    pub field_dim: usize,
    pub config_hash: String,
}

/// `modes`: multiplicative fit plus physical-space Koopman modes against the
/// aligned fields (or the states themselves).
pub fn cmd_modes(cfg: &ResolvedConfig) -> Result<ModesSummary> {
    let mut out = OutputDir::create(cfg)?;
    let comments = out.comment.clone();
    let stages = run_fit_stages(cfg)?;
    let spectrum = stages
        .multdmd_spectrum
        .as_ref()
        .ok_or_else(|| Error::Config("modes requires the multdmd estimator".into()))?;
    let keep = cfg.modes.max_modes.min(spectrum.eigenvalues.len());
    let truncated = truncate_spectrum(spectrum, keep);
    let s = &stages.data.snapshots;
    let dict = &stages.accumulation.dictionary;
    let modes = match &stages.data.fields {
        Some(fields) => {
            let aligned = fields.slice(ndarray::s![.., ..s.count()]);
            pod::koopman_modes(&truncated, s, dict, Some(aligned))?
        }
        None => pod::koopman_modes(&truncated, s, dict, None)?,
    };
    save_modes(&truncated, &modes, &mut out, &comments)?;
    out.finish("modes", &cfg.hash)?;
    Ok(ModesSummary {
        modes: truncated.eigenvalues.len(),
        field_dim: modes.nrows(),
        config_hash: cfg.hash.clone(),
    })
}

fn truncate_spectrum(r: &SpectralResult, keep: usize) -> SpectralResult {
    let n = r.eigvecs.nrows();
    let mut eigvecs = Array2::zeros((n, keep));
    for col in 0..keep {
        eigvecs.column_mut(col).assign(&r.eigvecs.column(col));
    }
    SpectralResult {
        eigenvalues: r.eigenvalues[..keep].to_vec(),
        phases: r.phases.as_ref().map(|p| p[..keep].to_vec()),
        eigvecs,
        residuals: r.residuals.as_ref().map(|v| v[..keep].to_vec()),
        support_sizes: r.support_sizes[..keep].to_vec(),
        cycles: r.cycles.clone(),
        zero_multiplicity: r.zero_multiplicity,
    }
}

fn save_modes(
    r: &SpectralResult,
    modes: &Array2<num_complex::Complex64>,
    out: &mut OutputDir,
    comments: &[String],
) -> Result<()> {
    let path = out.path("modes.csv");
    let mut text = String::new();
    for c in comments {
        text.push_str(&format!("# {c}\n"));
    }
    let header: Vec<String> = r
        .eigenvalues
        .iter()
        .enumerate()
        .flat_map(|(k, l)| {
            [format!("re{}[lambda={},{}]", k, l.re, l.im), format!("im{k}")]
        })
        .collect();
    text.push_str(&format!("component,{}\n", header.join(",")));
    for i in 0..modes.nrows() {
        let mut fields = vec![i.to_string()];
        for k in 0..modes.ncols() {
            fields.push(modes[[i, k]].re.to_string());
            fields.push(modes[[i, k]].im.to_string());
        }
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Serialize)]
pub struct MomentsSummary {
    pub n_max: usize,
    pub max_abs_diff: f64,
    pub condition_number: f64,
    pub conditioning_warning: bool,
    pub config_hash: String,
}

/// `moments`: data autocorrelations against the model-predicted correlations
/// of the multiplicative spectrum.
pub fn cmd_moments(cfg: &ResolvedConfig) -> Result<MomentsSummary> {
    let mut out = OutputDir::create(cfg)?;
    let comments = out.comment.clone();
    let stages = run_fit_stages(cfg)?;
    let spectrum = stages
        .multdmd_spectrum
        .as_ref()
        .ok_or_else(|| Error::Config("moments requires the multdmd estimator".into()))?;
    let s = &stages.data.snapshots;
    let dict = &stages.accumulation.dictionary;
    let t = &stages.accumulation.weights;
    let g = Array1::from_vec(spectral::cell_mean_observable(s, dict, cfg.moments.coordinate)?);
    let auto = spectral::autocorrelation(s, dict, g.view(), cfg.moments.n_max)?;
    let model = spectral::model_moments(spectrum, g.view(), t, cfg.moments.n_max)?;
    if model.conditioning_warning {
        log::warn!(
            "eigenvector basis condition number {:.3e} exceeds 1e8",
            model.condition_number
        );
    }

    let path = out.path("moments.csv");
    let mut text = String::new();
    for c in &comments {
        text.push_str(&format!("# {c}\n"));
    }
    text.push_str("n,data_re,data_im,model_re,model_im,abs_diff\n");
    let mut max_abs_diff = 0.0_f64;
    for n in 0..=cfg.moments.n_max {
        let diff = (model.moments[n] - auto[n]).norm();
        max_abs_diff = max_abs_diff.max(diff);
        text.push_str(&format!(
            "{n},{},{},{},{},{}\n",
            auto[n].re, auto[n].im, model.moments[n].re, model.moments[n].im, diff
        ));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.finish("moments", &cfg.hash)?;
    Ok(MomentsSummary {
        n_max: cfg.moments.n_max,
        max_abs_diff,
        condition_number: model.condition_number,
        conditioning_warning: model.conditioning_warning,
        config_hash: cfg.hash.clone(),
    })
}

#[derive(Debug, Serialize)]
pub struct ElbowSummary {
    pub curve: Vec<(usize, f64)>,
    pub config_hash: String,
}

/// `elbow`: distortion of the clustering as a function of the cell count.
pub fn cmd_elbow(cfg: &ResolvedConfig) -> Result<ElbowSummary> {
    let mut out = OutputDir::create(cfg)?;
    let comments = out.comment.clone();
    let data = resolve_data(cfg)?;
    let curve = dictionary::distortion_curve(
        data.snapshots.x(),
        &cfg.elbow.n_list,
        cfg.dictionary.seed.unwrap_or(cfg.seed),
        cfg.dictionary.subsample,
    )?;
    let path = out.path("distortion.csv");
    let mut text = String::new();
    for c in &comments {
        text.push_str(&format!("# {c}\n"));
    }
    text.push_str("N,distortion\n");
    for (n, d) in &curve {
        text.push_str(&format!("{n},{d}\n"));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.finish("elbow", &cfg.hash)?;
    Ok(ElbowSummary { curve, config_hash: cfg.hash.clone() })
}
