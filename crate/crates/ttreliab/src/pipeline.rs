//! Command orchestration, configuration, seeding, and artifact persistence.
//!
//! Every command reads one TOML configuration, writes self-describing
//! artifacts into the run directory, and is deterministic under a fixed
//! root seed regardless of worker count. Numeric artifacts share one
//! container format: a short text header (format version, kind, a JSON
//! manifest with shapes, payload checksum) followed by a little-endian
//! 64-bit float payload.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dirt::{BridgingKind, DeepTransport, DirtConfig, SmoothedIndicator};
use crate::estimators::{
    is_posterior_ratio, is_prior, mc_prior, rejection_posterior_reference, AsDirtTarget,
    EstimateMode, EstimateReport, ReliabilityModel,
};
use crate::macrofem::{
    generate_plate_mesh, observe, LoadCase, PlateContext, SensorSet,
};
use crate::micromech::{generate_dataset, Dataset, SampleRanges};
use crate::randfield::{kl_decompose, CovarianceKernel, KLBasis, KernelKind, LogNormalMarginal};
use crate::seeds::SeedNode;
use crate::sirt::{Basis1D, NodeLayout, SirtConfig, SquaredFttDensity};
use crate::surrogate::{train, validation_r2, SurrogateModel, TrainingConfig};
use crate::tt::{Core, CrossConfig, TensorTrain};
use crate::{exec, macrofem};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing artifact '{artifact}'; run `{producer}` first")]
    Dependency { artifact: String, producer: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("artifact corrupt: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// CLI exit code: 2 config, 3 dependency, 4 numerical/artifact failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Numerical(_) | PipelineError::Corrupt(_) => 4,
            PipelineError::Io(_) => 4,
        }
    }
}

fn numerical<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Numerical(e.to_string())
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RveSection {
    pub resolution: usize,
    pub n_records: usize,
    pub v_f: (f64, f64),
    pub e_f: (f64, f64),
    pub e_m: (f64, f64),
}

impl Default for RveSection {
    fn default() -> Self {
        let r = SampleRanges::default();
        RveSection { resolution: 32, n_records: 250, v_f: r.v_f, e_f: r.e_f, e_m: r.e_m }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 20_000,
            hidden: vec![64, 64, 64],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginalSection {
    pub mean: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldsSection {
    /// KL modes per field; total dimension d = 3 * modes.
    pub modes_per_field: usize,
    /// "exponential" or "squared-exponential".
    pub kernel: String,
    /// Correlation length in plate length units.
    pub corr_length: f64,
    pub v_f: MarginalSection,
    pub e_f: MarginalSection,
    pub e_m: MarginalSection,
    /// Physical clamp applied to volume-fraction realizations.
    pub vf_clip: (f64, f64),
}

impl Default for FieldsSection {
    fn default() -> Self {
        FieldsSection {
            modes_per_field: 4,
            kernel: "exponential".into(),
            corr_length: 60.0,
            v_f: MarginalSection { mean: 0.52, cv: 0.05 },
            e_f: MarginalSection { mean: 72.45, cv: 0.05 },
            e_m: MarginalSection { mean: 3.43, cv: 0.05 },
            vf_clip: (0.05, 0.95),
        }
    }
}

impl Default for MarginalSection {
    fn default() -> Self {
        MarginalSection { mean: 1.0, cv: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateSection {
    pub width: f64,
    pub height: f64,
    pub hole_radius: f64,
    pub refinement: usize,
    pub thickness: f64,
    pub total_force: f64,
    /// Allowable max von Mises stress (MPa); recalibrated by
    /// `synthesize-truth` when `calibration_target_pf` is positive.
    pub sigma_allow: f64,
    /// Prior failure probability the calibration aims at (0 disables).
    pub calibration_target_pf: f64,
    pub calibration_samples: usize,
    pub noise_std: f64,
}

impl Default for PlateSection {
    fn default() -> Self {
        PlateSection {
            width: 200.0,
            height: 100.0,
            hole_radius: 15.0,
            refinement: 32,
            thickness: 33.0,
            total_force: 1000.0,
            sigma_allow: 0.96,
            calibration_target_pf: 5e-3,
            calibration_samples: 4000,
            noise_std: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirtSection {
    pub n_nodes: usize,
    pub max_rank: usize,
    pub rel_tolerance: f64,
    pub max_sweeps: usize,
    pub enrichment_rank: usize,
    pub tau_rel: f64,
    /// "uniform" or "chebyshev-lobatto".
    pub layout: String,
    pub ess_fraction: f64,
    pub max_layers: usize,
    pub n_probe: usize,
    /// Final sharpness of the smoothed failure indicator.
    pub gamma_star: f64,
    pub indicator_levels: usize,
    /// Indicator length scale relative to the failure threshold.
    pub indicator_scale_rel: f64,
}

impl Default for DirtSection {
    fn default() -> Self {
        DirtSection {
            n_nodes: 30,
            max_rank: 12,
            rel_tolerance: 1e-6,
            max_sweeps: 4,
            enrichment_rank: 2,
            tau_rel: 1e-8,
            layout: "uniform".into(),
            ess_fraction: 0.5,
            max_layers: 24,
            n_probe: 300,
            gamma_star: 50.0,
            indicator_levels: 5,
            indicator_scale_rel: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub n_samples: u64,
    pub n_bootstrap: usize,
    pub rejection_proposals: u64,
    pub rejection_batch: usize,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            n_samples: 10_000,
            n_bootstrap: 200,
            rejection_proposals: 2_000_000,
            rejection_batch: 4096,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rve: RveSection,
    pub surrogate: SurrogateSection,
    pub fields: FieldsSection,
    pub plate: PlateSection,
    pub dirt: DirtSection,
    pub estimate: EstimateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String), PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let hash = hex(&Sha256::digest(text.as_bytes()));
        Ok((Self::from_toml(&text)?, hash))
    }

    pub fn dim(&self) -> usize {
        3 * self.fields.modes_per_field
    }

    fn kernel_kind(&self) -> Result<KernelKind, PipelineError> {
        match self.fields.kernel.as_str() {
            "exponential" => Ok(KernelKind::Exponential),
            "squared-exponential" => Ok(KernelKind::SquaredExponential),
            other => Err(PipelineError::Config(format!("unknown kernel '{other}'"))),
        }
    }

    fn node_layout(&self) -> Result<NodeLayout, PipelineError> {
        match self.dirt.layout.as_str() {
            "uniform" => Ok(NodeLayout::Uniform),
            "chebyshev-lobatto" => Ok(NodeLayout::ChebyshevLobatto),
            other => Err(PipelineError::Config(format!("unknown node layout '{other}'"))),
        }
    }

    fn dirt_config(&self, bridging: BridgingKind, seed: u64) -> Result<DirtConfig, PipelineError> {
        Ok(DirtConfig {
            sirt: SirtConfig {
                cross: CrossConfig {
                    rel_tolerance: self.dirt.rel_tolerance,
                    max_rank: self.dirt.max_rank,
                    max_sweeps: self.dirt.max_sweeps,
                    enrichment_rank: self.dirt.enrichment_rank,
                    seed,
                },
                tau_rel: self.dirt.tau_rel,
            },
            n_nodes: self.dirt.n_nodes,
            layout: self.node_layout()?,
            bridging,
            ess_fraction: self.dirt.ess_fraction,
            max_layers: self.dirt.max_layers,
            n_probe: self.dirt.n_probe,
            seed,
        })
    }

    fn indicator(&self, sigma_allow: f64) -> SmoothedIndicator {
        SmoothedIndicator {
            threshold: sigma_allow,
            scale: self.dirt.indicator_scale_rel * sigma_allow.abs().max(1e-12),
            gamma_star: self.dirt.gamma_star,
            n_levels: self.dirt.indicator_levels,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Artifact container.
// ---------------------------------------------------------------------------

const ARTIFACT_VERSION: u32 = 1;

/// Writes bytes atomically: temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_artifact(
    path: &Path,
    kind: &str,
    manifest: &serde_json::Value,
    payload: &[f64],
) -> Result<(), PipelineError> {
    let mut bytes: Vec<u8> = Vec::with_capacity(payload.len() * 8 + 256);
    let mut raw: Vec<u8> = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = hex(&Sha256::digest(&raw));
    bytes.extend_from_slice(format!("ttreliab-artifact {ARTIFACT_VERSION} {kind}\n").as_bytes());
    bytes.extend_from_slice(serde_json::to_string(manifest).unwrap().as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(format!("payload {} {checksum}\n", payload.len()).as_bytes());
    bytes.extend_from_slice(&raw);
    write_atomic(path, &bytes)
}

pub fn read_artifact(
    path: &Path,
    expected_kind: &str,
    producer: &str,
) -> Result<(serde_json::Value, Vec<f64>), PipelineError> {
    let bytes = std::fs::read(path).map_err(|_| PipelineError::Dependency {
        artifact: path.display().to_string(),
        producer: producer.into(),
    })?;
    let corrupt = |msg: &str| PipelineError::Corrupt(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<String, PipelineError> {
        let nl = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("truncated header"))?;
        let s = String::from_utf8(bytes[*pos..*pos + nl].to_vec())
            .map_err(|_| corrupt("non-utf8 header"))?;
        *pos += nl + 1;
        Ok(s)
    };
    let head = line(&mut pos)?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "ttreliab-artifact" {
        return Err(corrupt("bad magic line"));
    }
    if parts[1] != ARTIFACT_VERSION.to_string() {
        return Err(corrupt(&format!("unsupported format version {}", parts[1])));
    }
    if parts[2] != expected_kind {
        return Err(corrupt(&format!("kind '{}' where '{expected_kind}' expected", parts[2])));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&line(&mut pos)?).map_err(|_| corrupt("bad manifest JSON"))?;
    let pl = line(&mut pos)?;
    let pparts: Vec<&str> = pl.split_whitespace().collect();
    if pparts.len() != 3 || pparts[0] != "payload" {
        return Err(corrupt("bad payload line"));
    }
    let n: usize = pparts[1].parse().map_err(|_| corrupt("bad payload count"))?;
    let raw = &bytes[pos..];
    if raw.len() != n * 8 {
        return Err(corrupt("payload length mismatch (truncated file?)"));
    }
    if hex(&Sha256::digest(raw)) != pparts[2] {
        return Err(corrupt("payload checksum mismatch"));
    }
    let payload: Vec<f64> =
        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((manifest, payload))
}

// ---------------------------------------------------------------------------
// Transport-map artifact.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    tau: f64,
    maps: Vec<crate::sirt::DomainMap>,
    n_nodes: Vec<usize>,
    ranks: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MapManifest {
    dim: usize,
    build_evals: u64,
    layers: Vec<LayerManifest>,
}

pub fn save_map(
    path: &Path,
    map: &DeepTransport,
    build_evals: u64,
) -> Result<(), PipelineError> {
    let mut payload: Vec<f64> = Vec::new();
    let mut layers = Vec::new();
    for layer in map.layers() {
        let bases = layer.bases();
        let tt = layer.train();
        layers.push(LayerManifest {
            tau: layer.tau(),
            maps: bases.iter().map(|b| b.map()).collect(),
            n_nodes: bases.iter().map(|b| b.n_nodes()).collect(),
            ranks: tt.ranks(),
        });
        for b in bases {
            payload.extend_from_slice(b.nodes());
        }
        for c in tt.cores() {
            payload.extend_from_slice(c.data());
        }
    }
    let manifest = MapManifest { dim: map.dim(), build_evals, layers };
    write_artifact(path, "transport-map", &serde_json::to_value(&manifest).unwrap(), &payload)
}

pub fn load_map(
    path: &Path,
    producer: &str,
    expected_dim: Option<usize>,
) -> Result<(DeepTransport, u64), PipelineError> {
    let (manifest, payload) = read_artifact(path, "transport-map", producer)?;
    let manifest: MapManifest = serde_json::from_value(manifest)
        .map_err(|e| PipelineError::Corrupt(format!("{}: {e}", path.display())))?;
    if let Some(d) = expected_dim {
        if manifest.dim != d {
            return Err(PipelineError::Config(format!(
                "transport map has dimension {}, run requires {d}",
                manifest.dim
            )));
        }
    }
    let corrupt = |msg: String| PipelineError::Corrupt(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[f64], PipelineError> {
        if pos + n > payload.len() {
            return Err(corrupt("payload shorter than manifest shapes".into()));
        }
        let s = &payload[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut layers: Vec<SquaredFttDensity> = Vec::with_capacity(manifest.layers.len());
    for lm in &manifest.layers {
        let d = lm.n_nodes.len();
        if lm.maps.len() != d || lm.ranks.len() != d + 1 {
            return Err(corrupt("inconsistent layer shapes".into()));
        }
        let mut bases = Vec::with_capacity(d);
        for k in 0..d {
            let nodes = take(lm.n_nodes[k])?.to_vec();
            bases.push(
                Basis1D::from_nodes(nodes, lm.maps[k]).map_err(|e| corrupt(e.to_string()))?,
            );
        }
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let len = lm.ranks[k] * lm.n_nodes[k] * lm.ranks[k + 1];
            cores.push(
                Core::from_data(lm.ranks[k], lm.n_nodes[k], lm.ranks[k + 1], take(len)?.to_vec())
                    .map_err(|e| corrupt(e.to_string()))?,
            );
        }
        let tt = TensorTrain::new(cores).map_err(|e| corrupt(e.to_string()))?;
        layers.push(
            SquaredFttDensity::from_train_with_tau(tt, bases, lm.tau)
                .map_err(|e| corrupt(e.to_string()))?,
        );
    }
    if pos != payload.len() {
        return Err(corrupt("trailing payload values".into()));
    }
    let map = DeepTransport::from_layers(manifest.dim, layers)
        .map_err(|e| corrupt(e.to_string()))?;
    Ok((map, manifest.build_evals))
}

// ---------------------------------------------------------------------------
// KL and truth artifacts.
// ---------------------------------------------------------------------------

fn save_kl(path: &Path, bases: &[&KLBasis; 3]) -> Result<(), PipelineError> {
    let mut payload: Vec<f64> = Vec::new();
    let mut fields = Vec::new();
    for b in bases {
        let (n, m) = (b.node_count(), b.truncation());
        fields.push(serde_json::json!({
            "n": n,
            "m": m,
            "mean": b.marginal.mean,
            "cv": b.marginal.cv,
            "energy_fraction": b.energy_fraction,
        }));
        for nd in &b.nodes {
            payload.extend_from_slice(nd);
        }
        payload.extend_from_slice(&b.weights);
        payload.extend_from_slice(&b.eigenvalues);
        payload.extend_from_slice(b.eigenvectors.as_slice());
    }
    write_artifact(path, "kl-bases", &serde_json::json!({ "fields": fields }), &payload)
}

fn load_kl(path: &Path) -> Result<[KLBasis; 3], PipelineError> {
    let (manifest, payload) = read_artifact(path, "kl-bases", "kl-build")?;
    let corrupt = |msg: &str| PipelineError::Corrupt(format!("{}: {msg}", path.display()));
    let fields = manifest
        .get("fields")
        .and_then(|f| f.as_array())
        .ok_or_else(|| corrupt("manifest missing fields"))?;
    if fields.len() != 3 {
        return Err(corrupt("expected three field bases"));
    }
    let mut pos = 0usize;
    let mut out: Vec<KLBasis> = Vec::with_capacity(3);
    for f in fields {
        let geti = |k: &str| f.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let getf = |k: &str| f.get(k).and_then(|v| v.as_f64());
        let (n, m) = (
            geti("n").ok_or_else(|| corrupt("missing n"))?,
            geti("m").ok_or_else(|| corrupt("missing m"))?,
        );
        let need = 2 * n + n + m + n * m;
        if pos + need > payload.len() {
            return Err(corrupt("payload shorter than manifest shapes"));
        }
        let nodes: Vec<[f64; 2]> =
            payload[pos..pos + 2 * n].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        pos += 2 * n;
        let weights = payload[pos..pos + n].to_vec();
        pos += n;
        let eigenvalues = payload[pos..pos + m].to_vec();
        pos += m;
        let eigenvectors = DMatrix::from_column_slice(n, m, &payload[pos..pos + n * m]);
        pos += n * m;
        out.push(KLBasis {
            nodes,
            weights,
            marginal: LogNormalMarginal {
                mean: getf("mean").ok_or_else(|| corrupt("missing mean"))?,
                cv: getf("cv").ok_or_else(|| corrupt("missing cv"))?,
            },
            eigenvalues,
            eigenvectors,
            energy_fraction: getf("energy_fraction").unwrap_or(f64::NAN),
        });
    }
    if pos != payload.len() {
        return Err(corrupt("trailing payload values"));
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSummary {
    pub dim: usize,
    pub n_obs: usize,
    pub sigma_allow: f64,
    pub qoi_true: f64,
    pub g_true: f64,
    pub noise_std: f64,
    pub calibration_target_pf: f64,
}

fn save_truth(
    path: &Path,
    summary: &TruthSummary,
    xi_true: &[f64],
    y_obs: &[f64],
) -> Result<(), PipelineError> {
    let mut payload = xi_true.to_vec();
    payload.extend_from_slice(y_obs);
    write_artifact(path, "truth", &serde_json::to_value(summary).unwrap(), &payload)
}

fn load_truth(path: &Path) -> Result<(TruthSummary, Vec<f64>, Vec<f64>), PipelineError> {
    let (manifest, payload) = read_artifact(path, "truth", "synthesize-truth")?;
    let summary: TruthSummary = serde_json::from_value(manifest)
        .map_err(|e| PipelineError::Corrupt(format!("{}: {e}", path.display())))?;
    if payload.len() != summary.dim + 2 * summary.n_obs {
        return Err(PipelineError::Corrupt(format!("{}: payload shape", path.display())));
    }
    let xi = payload[..summary.dim].to_vec();
    let y = payload[summary.dim..].to_vec();
    Ok((summary, xi, y))
}

// ---------------------------------------------------------------------------
// Run directory and manifest.
// ---------------------------------------------------------------------------

pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Creates the directory and pins the config hash; a second command
    /// with a different configuration in the same directory is rejected.
    pub fn open(dir: &Path, config_hash: &str, seed: u64) -> Result<RunDir, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let manifest = dir.join("manifest.json");
        let doc = serde_json::json!({
            "format_version": ARTIFACT_VERSION,
            "config_hash": config_hash,
            "seed": seed,
        });
        if manifest.exists() {
            let existing: serde_json::Value =
                serde_json::from_slice(&std::fs::read(&manifest)?)
                    .map_err(|e| PipelineError::Corrupt(format!("manifest.json: {e}")))?;
            if existing.get("config_hash") != doc.get("config_hash") {
                return Err(PipelineError::Config(
                    "run directory was produced by a different configuration".into(),
                ));
            }
            if existing.get("seed") != doc.get("seed") {
                return Err(PipelineError::Config(
                    "run directory was produced with a different seed".into(),
                ));
            }
        } else {
            write_atomic(&manifest, serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
        }
        Ok(RunDir { dir: dir.to_path_buf() })
    }
}

// ---------------------------------------------------------------------------
// Context assembly.
// ---------------------------------------------------------------------------

fn build_mesh(config: &RunConfig) -> Result<macrofem::Mesh, PipelineError> {
    generate_plate_mesh(
        config.plate.width,
        config.plate.height,
        config.plate.hole_radius,
        config.plate.refinement,
    )
    .map_err(|e| PipelineError::Config(e.to_string()))
}

fn load_surrogate(run: &RunDir) -> Result<SurrogateModel, PipelineError> {
    let path = run.path("surrogate.bin");
    if !path.exists() {
        return Err(PipelineError::Dependency {
            artifact: path.display().to_string(),
            producer: "train-surrogate".into(),
        });
    }
    SurrogateModel::load(&path).map_err(|e| PipelineError::Corrupt(e.to_string()))
}

fn load_dataset(run: &RunDir) -> Result<Dataset, PipelineError> {
    let path = run.path("dataset.txt");
    if !path.exists() {
        return Err(PipelineError::Dependency {
            artifact: path.display().to_string(),
            producer: "rve-data".into(),
        });
    }
    Dataset::load(&path).map_err(|e| PipelineError::Corrupt(e.to_string()))
}

/// Assembles the plate reliability context. `sigma_allow` and observations
/// come from the truth artifact when requested.
fn build_context(
    config: &RunConfig,
    run: &RunDir,
    with_observations: bool,
) -> Result<PlateContext, PipelineError> {
    let mesh = build_mesh(config)?;
    let surrogate = load_surrogate(run)?;
    let [kl_vf, kl_ef, kl_em] = load_kl(&run.path("kl.bin"))?;
    let (truth, _, y_obs) = load_truth(&run.path("truth.bin"))?;
    if truth.dim != config.dim() {
        return Err(PipelineError::Config(format!(
            "truth artifact has dimension {}, configuration requires {}",
            truth.dim,
            config.dim()
        )));
    }
    let sensors = SensorSet {
        points: SensorSet::default_layout(&mesh).points,
        noise_std: config.plate.noise_std,
    };
    Ok(PlateContext {
        load: LoadCase::uniaxial(config.plate.total_force, config.plate.thickness),
        sensors,
        mesh,
        kl_vf,
        kl_ef,
        kl_em,
        surrogate,
        sigma_allow: truth.sigma_allow,
        y_obs: if with_observations { Some(y_obs) } else { None },
        stiffness_scale: 1e3, // surrogate moduli in GPa, stresses in MPa
        vf_clip: config.fields.vf_clip,
    })
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    Posterior,
    PriorFailure,
    PosteriorFailure,
}

impl MapKind {
    pub fn file_name(&self) -> &'static str {
        match self {
            MapKind::Posterior => "map-posterior.bin",
            MapKind::PriorFailure => "map-prior-failure.bin",
            MapKind::PosteriorFailure => "map-posterior-failure.bin",
        }
    }

    fn diag_name(&self) -> &'static str {
        match self {
            MapKind::Posterior => "map-posterior-diag.json",
            MapKind::PriorFailure => "map-prior-failure-diag.json",
            MapKind::PosteriorFailure => "map-posterior-failure-diag.json",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Command {
    RveData,
    TrainSurrogate,
    ValidateSurrogate,
    KlBuild,
    SynthesizeTruth,
    BuildMap(MapKind),
    Estimate(EstimateMode),
    Report,
}

/// Report wrapper carrying the scaling-table columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: EstimateMode,
    /// Parameter-space dimension d.
    pub dim: usize,
    /// Configured maximum tensor-train rank r.
    pub rank: usize,
    pub config_hash: String,
    /// Forward-model evaluations spent building the transport maps.
    pub build_evals: u64,
    /// Build plus estimation evaluations.
    pub total_evals: u64,
    pub report: EstimateReport,
}

pub fn run(
    command: &Command,
    config: &RunConfig,
    config_hash: &str,
    out: &Path,
) -> Result<(), PipelineError> {
    let run = RunDir::open(out, config_hash, config.seed)?;
    match command {
        Command::RveData => cmd_rve_data(config, &run),
        Command::TrainSurrogate => cmd_train_surrogate(config, &run),
        Command::ValidateSurrogate => cmd_validate_surrogate(config, &run),
        Command::KlBuild => cmd_kl_build(config, &run),
        Command::SynthesizeTruth => cmd_synthesize_truth(config, &run),
        Command::BuildMap(kind) => cmd_build_map(config, &run, *kind),
        Command::Estimate(mode) => cmd_estimate(config, config_hash, &run, *mode),
        Command::Report => cmd_report(&run),
    }
}

fn cmd_rve_data(config: &RunConfig, run: &RunDir) -> Result<(), PipelineError> {
    let ranges = SampleRanges {
        v_f: config.rve.v_f,
        e_f: config.rve.e_f,
        e_m: config.rve.e_m,
    };
    let ds = generate_dataset(
        config.rve.n_records,
        &ranges,
        config.rve.resolution,
        SeedNode::new(config.seed).child("rve-data").0,
    )
    .map_err(numerical)?;
    ds.save(&run.path("dataset.txt")).map_err(numerical)?;
    log::info!(
        "dataset: {} records at resolution {}, {} training",
        ds.records.len(),
        ds.resolution,
        ds.n_train
    );
    Ok(())
}

fn cmd_train_surrogate(config: &RunConfig, run: &RunDir) -> Result<(), PipelineError> {
    let ds = load_dataset(run)?;
    let tc = TrainingConfig {
        learning_rate: config.surrogate.learning_rate,
        weight_decay: config.surrogate.weight_decay,
        epochs: config.surrogate.epochs,
        hidden: config.surrogate.hidden.clone(),
        seed: SeedNode::new(config.seed).child("train-surrogate").0,
    };
    let (model, history) = train(&ds, &tc).map_err(numerical)?;
    model.save(&run.path("surrogate.bin")).map_err(numerical)?;
    let mut csv = String::from("epoch,train_loss,validation_loss\n");
    for (e, (t, v)) in history.losses.iter().enumerate() {
        csv.push_str(&format!("{e},{t:.17e},{v:.17e}\n"));
    }
    write_atomic(&run.path("training-history.csv"), csv.as_bytes())?;
    let r2 = validation_r2(&model, &ds).map_err(numerical)?;
    let doc = serde_json::json!({
        "best_epoch": history.best_epoch,
        "best_validation_loss": history.best_validation,
        "validation_r2": r2,
    });
    write_atomic(
        &run.path("training.json"),
        serde_json::to_string_pretty(&doc).unwrap().as_bytes(),
    )?;
    log::info!("surrogate trained; validation R^2 per component: {r2:?}");
    Ok(())
}

fn cmd_kl_build(config: &RunConfig, run: &RunDir) -> Result<(), PipelineError> {
    let mesh = build_mesh(config)?;
    let nodes = mesh.centroids();
    let areas: Vec<f64> = (0..mesh.elements.len()).map(|e| mesh.element_area(e)).collect();
    let total: f64 = areas.iter().sum();
    let weights: Vec<f64> = areas.iter().map(|a| a / total).collect();
    let kind = config.kernel_kind()?;
    let m = config.fields.modes_per_field;
    let build = |ms: &MarginalSection| -> Result<KLBasis, PipelineError> {
        let marginal = LogNormalMarginal { mean: ms.mean, cv: ms.cv };
        let kernel = CovarianceKernel {
            kind,
            sigma: marginal.sigma_g(),
            ell: config.fields.corr_length,
        };
        kl_decompose(&nodes, Some(&weights), &kernel, marginal, m).map_err(numerical)
    };
    let (vf, ef, em) = (
        build(&config.fields.v_f)?,
        build(&config.fields.e_f)?,
        build(&config.fields.e_m)?,
    );
    save_kl(&run.path("kl.bin"), &[&vf, &ef, &em])?;
    log::info!(
        "KL bases built: {} modes per field, energy fractions {:.4} / {:.4} / {:.4}",
        m,
        vf.energy_fraction,
        ef.energy_fraction,
        em.energy_fraction
    );
    Ok(())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn cmd_synthesize_truth(config: &RunConfig, run: &RunDir) -> Result<(), PipelineError> {
    let mesh = build_mesh(config)?;
    let surrogate = load_surrogate(run)?;
    let [kl_vf, kl_ef, kl_em] = load_kl(&run.path("kl.bin"))?;
    let sensors = SensorSet {
        points: SensorSet::default_layout(&mesh).points,
        noise_std: config.plate.noise_std,
    };
    let mut ctx = PlateContext {
        load: LoadCase::uniaxial(config.plate.total_force, config.plate.thickness),
        sensors,
        mesh,
        kl_vf,
        kl_ef,
        kl_em,
        surrogate,
        sigma_allow: config.plate.sigma_allow,
        y_obs: None,
        stiffness_scale: 1e3,
        vf_clip: config.fields.vf_clip,
    };
    let d = ctx.dim();
    if d != config.dim() {
        return Err(PipelineError::Config(format!(
            "KL artifact provides dimension {d}, configuration requires {}",
            config.dim()
        )));
    }
    let node = SeedNode::new(config.seed).child("truth");

    // Optional allowable-stress calibration against a target prior failure
    // probability, using the surrogate-driven model.
    if config.plate.calibration_target_pf > 0.0 {
        let n_cal = config.plate.calibration_samples.max(16);
        let cal = node.child("calibrate");
        let ctx_ref = &ctx;
        let mut qois: Vec<f64> = exec::map_range(n_cal, |i| {
            let mut rng = cal.index(i as u64).rng();
            let theta: Vec<f64> =
                (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            ctx_ref.evaluate(&theta).map(|r| r.qoi)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::Numerical)?;
        qois.sort_by(f64::total_cmp);
        ctx.sigma_allow = quantile(&qois, 1.0 - config.plate.calibration_target_pf);
        log::info!("calibrated sigma_allow = {:.6} MPa", ctx.sigma_allow);
    }

    // Ground truth from direct FE homogenization (no surrogate), plus
    // seeded observation noise.
    let mut rng = node.child("fields").rng();
    let xi_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (vf, ef, em) = ctx.realize_fields(&xi_true).map_err(numerical)?;
    let sol = ctx
        .solve_fields(&vf, &ef, &em, Some(config.rve.resolution))
        .map_err(numerical)?;
    let y_clean = observe(&ctx.mesh, &sol, &ctx.sensors).map_err(numerical)?;
    let mut noise_rng = node.child("noise").rng();
    let y_obs: Vec<f64> = y_clean
        .iter()
        .map(|&y| {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            y + config.plate.noise_std * z
        })
        .collect();

    let summary = TruthSummary {
        dim: d,
        n_obs: ctx.sensors.points.len(),
        sigma_allow: ctx.sigma_allow,
        qoi_true: sol.max_von_mises,
        g_true: ctx.sigma_allow - sol.max_von_mises,
        noise_std: config.plate.noise_std,
        calibration_target_pf: config.plate.calibration_target_pf,
    };
    save_truth(&run.path("truth.bin"), &summary, &xi_true, &y_obs)?;
    write_atomic(
        &run.path("truth.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    log::info!(
        "truth synthesized: max von Mises {:.6} MPa, g = {:.6}",
        summary.qoi_true,
        summary.g_true
    );
    Ok(())
}

fn cmd_validate_surrogate(config: &RunConfig, run: &RunDir) -> Result<(), PipelineError> {
    let ctx = build_context(config, run, false)?;
    let ds = load_dataset(run)?;
    let node = SeedNode::new(config.seed).child("validate");
    let mut rng = node.rng();
    let d = ctx.dim();
    let xi: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (vf, ef, em) = ctx.realize_fields(&xi).map_err(numerical)?;
    let sur = ctx.solve_fields(&vf, &ef, &em, None).map_err(numerical)?;
    let dir = ctx
        .solve_fields(&vf, &ef, &em, Some(config.rve.resolution))
        .map_err(numerical)?;

    let rel_l2 = |a: &[f64], b: &[f64]| -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    };
    let vm_sur: Vec<f64> = sur.stresses.iter().map(macrofem::von_mises).collect();
    let vm_dir: Vec<f64> = dir.stresses.iter().map(macrofem::von_mises).collect();
    let disp_err = rel_l2(&sur.displacements, &dir.displacements);
    let vm_err = rel_l2(&vm_sur, &vm_dir);
    let r2 = validation_r2(&ctx.surrogate, &ds).map_err(numerical)?;

    let doc = serde_json::json!({
        "displacement_rel_l2": disp_err,
        "von_mises_rel_l2": vm_err,
        "max_von_mises_surrogate": sur.max_von_mises,
        "max_von_mises_direct": dir.max_von_mises,
        "validation_r2": r2,
    });
    write_atomic(
        &run.path("validation.json"),
        serde_json::to_string_pretty(&doc).unwrap().as_bytes(),
    )?;
    log::info!(
        "surrogate vs direct homogenization: displacement {:.4e}, von Mises {:.4e} (relative L2)",
        disp_err,
        vm_err
    );
    Ok(())
}

fn cmd_build_map(config: &RunConfig, run: &RunDir, kind: MapKind) -> Result<(), PipelineError> {
    let ctx = build_context(config, run, !matches!(kind, MapKind::PriorFailure))?;
    let indicator = config.indicator(ctx.sigma_allow);
    let bridging = match kind {
        MapKind::Posterior => BridgingKind::Tempering,
        MapKind::PriorFailure => BridgingKind::SmoothedIndicator(indicator),
        MapKind::PosteriorFailure => BridgingKind::Combined(indicator),
    };
    let seed = SeedNode::new(config.seed).child("build-map").0;
    let dc = config.dirt_config(bridging, seed)?;
    let target = AsDirtTarget(&ctx);
    let build = DeepTransport::build(&target, ctx.dim(), &dc).map_err(numerical)?;
    save_map(&run.path(kind.file_name()), &build.transport, build.model_evaluations)?;
    let doc = serde_json::json!({
        "kind": kind,
        "model_evaluations": build.model_evaluations,
        "n_layers": build.transport.n_layers(),
        "layers": build.diags,
    });
    write_atomic(
        &run.path(kind.diag_name()),
        serde_json::to_string_pretty(&doc).unwrap().as_bytes(),
    )?;
    log::info!(
        "transport built: {} layers, {} model evaluations",
        build.transport.n_layers(),
        build.model_evaluations
    );
    Ok(())
}

fn load_map_dep(run: &RunDir, kind: MapKind, d: usize) -> Result<(DeepTransport, u64), PipelineError> {
    let path = run.path(kind.file_name());
    if !path.exists() {
        return Err(PipelineError::Dependency {
            artifact: path.display().to_string(),
            producer: format!("build-map ({})", kind.file_name()),
        });
    }
    load_map(&path, "build-map", Some(d))
}

fn cmd_estimate(
    config: &RunConfig,
    config_hash: &str,
    run: &RunDir,
    mode: EstimateMode,
) -> Result<(), PipelineError> {
    let seed = SeedNode::new(config.seed).child("estimate").0;
    let n = config.estimate.n_samples;
    let d = config.dim();
    let (report, build_evals) = match mode {
        EstimateMode::PriorMc => {
            let ctx = build_context(config, run, false)?;
            (mc_prior(&ctx, n, seed).map_err(numerical)?, 0)
        }
        EstimateMode::PriorIs => {
            let ctx = build_context(config, run, false)?;
            let (map, evals) = load_map_dep(run, MapKind::PriorFailure, d)?;
            (is_prior(&ctx, &map, n, seed).map_err(numerical)?, evals)
        }
        EstimateMode::PosteriorRatio => {
            let ctx = build_context(config, run, true)?;
            let (p_map, e1) = load_map_dep(run, MapKind::PosteriorFailure, d)?;
            let (q_map, e2) = load_map_dep(run, MapKind::Posterior, d)?;
            (
                is_posterior_ratio(&ctx, &p_map, &q_map, n, seed, config.estimate.n_bootstrap)
                    .map_err(numerical)?,
                e1 + e2,
            )
        }
        EstimateMode::PosteriorRejection => {
            let ctx = build_context(config, run, true)?;
            (
                rejection_posterior_reference(
                    &ctx,
                    config.estimate.rejection_proposals,
                    config.estimate.rejection_batch,
                    seed,
                )
                .map_err(numerical)?,
                0,
            )
        }
    };
    let wrapped = RunReport {
        mode,
        dim: d,
        rank: config.dirt.max_rank,
        config_hash: config_hash.to_string(),
        build_evals,
        total_evals: build_evals + report.n_model_evals,
        report,
    };
    let name = format!(
        "report-{}.json",
        serde_json::to_value(mode).unwrap().as_str().unwrap()
    );
    write_atomic(
        &run.path(&name),
        serde_json::to_string_pretty(&wrapped).unwrap().as_bytes(),
    )?;
    log::info!(
        "estimate {:?}: p_hat = {:.6e}, cov = {:.4}, {} model evaluations (+{} build)",
        mode,
        wrapped.report.p_hat,
        wrapped.report.cov,
        wrapped.report.n_model_evals,
        wrapped.build_evals
    );
    Ok(())
}

/// Aggregates estimate reports found in the run directory and its immediate
/// subdirectories into the scaling table (columns d, r, P-hat, N_evals,
/// CoV). Each report must match the config hash recorded in its own
/// directory's manifest.
fn cmd_report(run: &RunDir) -> Result<(), PipelineError> {
    let mut rows: Vec<RunReport> = Vec::new();
    let mut dirs = vec![run.dir.clone()];
    for entry in std::fs::read_dir(&run.dir)? {
        let p = entry?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    for dir in dirs {
        let manifest_path = dir.join("manifest.json");
        let manifest_hash: Option<String> = if manifest_path.exists() {
            let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path)?)
                .map_err(|e| PipelineError::Corrupt(format!("{}: {e}", manifest_path.display())))?;
            doc.get("config_hash").and_then(|h| h.as_str()).map(String::from)
        } else {
            None
        };
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("report-") && n.ends_with(".json"))
                    .unwrap_or(false)
            })
            .collect();
        entries.sort();
        for path in entries {
            let rep: RunReport = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| PipelineError::Corrupt(format!("{}: {e}", path.display())))?;
            match &manifest_hash {
                Some(h) if *h == rep.config_hash => rows.push(rep),
                Some(_) => {
                    return Err(PipelineError::Corrupt(format!(
                        "{}: config hash does not match its run manifest",
                        path.display()
                    )))
                }
                None => {
                    return Err(PipelineError::Dependency {
                        artifact: manifest_path.display().to_string(),
                        producer: "any pipeline command in that directory".into(),
                    })
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(PipelineError::Dependency {
            artifact: "report-*.json".into(),
            producer: "estimate".into(),
        });
    }
    rows.sort_by(|a, b| {
        (a.dim, a.rank, format!("{:?}", a.mode)).cmp(&(b.dim, b.rank, format!("{:?}", b.mode)))
    });
    let mut csv = String::from("d,r,mode,p_hat,n_evals,cov\n");
    for r in &rows {
        let mode = serde_json::to_value(r.mode).unwrap().as_str().unwrap().to_string();
        csv.push_str(&format!(
            "{},{},{},{:.6e},{},{:.6}\n",
            r.dim, r.rank, mode, r.report.p_hat, r.total_evals, r.report.cov
        ));
    }
    write_atomic(&run.path("table.csv"), csv.as_bytes())?;
    write_atomic(
        &run.path("table.json"),
        serde_json::to_string_pretty(&rows).unwrap().as_bytes(),
    )?;
    log::info!("aggregated {} reports into table.csv / table.json", rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirt::DirtTarget;
    use tempfile::tempdir;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.dirt.n_nodes, 30);
        assert_eq!(c.dim(), 12);
        let partial = RunConfig::from_toml("[dirt]\nmax_rank = 6\n").unwrap();
        assert_eq!(partial.dirt.max_rank, 6);
        assert_eq!(partial.dirt.n_nodes, 30);
        assert!(RunConfig::from_toml("[dirt]\nmax_rnak = 6\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn artifact_roundtrip_and_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let manifest = serde_json::json!({"shape": [2, 3]});
        let payload = vec![1.0, -2.5, 3e-300, 4.0, 5.0, 6.25];
        write_artifact(&path, "test-kind", &manifest, &payload).unwrap();
        let (m, p) = read_artifact(&path, "test-kind", "nobody").unwrap();
        assert_eq!(m, manifest);
        assert_eq!(p, payload);

        // Wrong kind.
        assert!(matches!(
            read_artifact(&path, "other-kind", "nobody"),
            Err(PipelineError::Corrupt(_))
        ));

        // Truncation breaks the checksum contract, nothing partial loads.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_artifact(&path, "test-kind", "nobody"),
            Err(PipelineError::Corrupt(_))
        ));

        // Flipped payload byte is caught by the checksum.
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            read_artifact(&path, "test-kind", "nobody"),
            Err(PipelineError::Corrupt(_))
        ));

        // Missing file is a dependency error naming the producer.
        let missing = dir.path().join("missing.bin");
        match read_artifact(&missing, "test-kind", "some-command") {
            Err(PipelineError::Dependency { producer, .. }) => {
                assert_eq!(producer, "some-command")
            }
            other => panic!("expected dependency error, got {other:?}"),
        }
    }

    /// Correlated bounded Gaussian used to build a nontrivial two-layer
    /// transport for the serialization test.
    struct TestTarget;
    impl DirtTarget for TestTarget {
        fn evaluate(&self, theta: &[f64]) -> crate::dirt::TargetResponse {
            let (a, b) = (theta[0], theta[1]);
            let ll = -0.5 * (a * a + b * b + 1.2 * a * b) * 2.0;
            crate::dirt::TargetResponse { log_likelihood: ll, qoi: a + b }
        }
    }

    #[test]
    fn map_save_load_is_bit_exact() {
        let config = DirtConfig {
            n_nodes: 12,
            max_layers: 6,
            ..Default::default()
        };
        let build = DeepTransport::build(&TestTarget, 2, &config).unwrap();
        assert!(build.transport.n_layers() >= 1);

        let dir = tempdir().unwrap();
        let path = dir.path().join("map.bin");
        save_map(&path, &build.transport, 1234).unwrap();
        let (loaded, evals) = load_map(&path, "build-map", Some(2)).unwrap();
        assert_eq!(evals, 1234);
        assert_eq!(loaded.n_layers(), build.transport.n_layers());

        let mut theta_a = vec![0.0; 2];
        let mut theta_b = vec![0.0; 2];
        for u in [[0.31, 0.72], [0.999, 0.001], [0.5, 0.5], [0.123, 0.456]] {
            let la = build.transport.map_from_uniform(&u, &mut theta_a);
            let lb = loaded.map_from_uniform(&u, &mut theta_b);
            assert_eq!(theta_a, theta_b);
            assert_eq!(la, lb);
            assert_eq!(
                build.transport.log_pushforward(&theta_a),
                loaded.log_pushforward(&theta_a)
            );
        }

        // Dimension guard.
        assert!(matches!(
            load_map(&path, "build-map", Some(3)),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn kl_artifact_roundtrip() {
        let nodes: Vec<[f64; 2]> = (0..40)
            .map(|i| [i as f64 / 39.0, (i as f64 * 0.37).fract()])
            .collect();
        let kernel = CovarianceKernel {
            kind: KernelKind::Exponential,
            sigma: 0.3,
            ell: 0.4,
        };
        let marginal = LogNormalMarginal { mean: 2.0, cv: 0.1 };
        let b = kl_decompose(&nodes, None, &kernel, marginal, 5).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("kl.bin");
        save_kl(&path, &[&b, &b, &b]).unwrap();
        let [b1, _, b3] = load_kl(&path).unwrap();
        assert_eq!(b1.eigenvalues, b.eigenvalues);
        assert_eq!(b1.eigenvectors, b.eigenvectors);
        assert_eq!(b3.weights, b.weights);
        assert_eq!(b1.marginal.mean, 2.0);

        let xi = vec![0.3, -1.0, 0.5, 0.0, 2.0];
        let ra = crate::randfield::realize(&b, &xi).unwrap();
        let rb = crate::randfield::realize(&b1, &xi).unwrap();
        assert_eq!(ra.values, rb.values);
    }

    #[test]
    fn run_dir_pins_configuration() {
        let dir = tempdir().unwrap();
        RunDir::open(dir.path(), "hash-a", 7).unwrap();
        RunDir::open(dir.path(), "hash-a", 7).unwrap();
        assert!(matches!(
            RunDir::open(dir.path(), "hash-b", 7),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunDir::open(dir.path(), "hash-a", 8),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn truth_artifact_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("truth.bin");
        let summary = TruthSummary {
            dim: 3,
            n_obs: 2,
            sigma_allow: 0.96,
            qoi_true: 0.91,
            g_true: 0.05,
            noise_std: 1e-5,
            calibration_target_pf: 5e-3,
        };
        let xi = vec![0.1, -0.2, 0.3];
        let y = vec![1e-4, 2e-4, -1e-4, 5e-5];
        save_truth(&path, &summary, &xi, &y).unwrap();
        let (s, xi2, y2) = load_truth(&path).unwrap();
        assert_eq!(s.sigma_allow, 0.96);
        assert_eq!(xi2, xi);
        assert_eq!(y2, y);
    }
}
