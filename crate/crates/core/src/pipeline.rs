//! On-disk tensors, layer manifests, run reports and the batch commands
//! behind the `sarqc` binary.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 8            | magic `SQTENSR1`                     |
//! | 1            | dtype: `1` = f64, `2` = i32          |
//! | 1            | rank `r`                             |
//! | 8·r          | dims as u64                          |
//! | rest         | row-major payload                    |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationBatch;
use crate::error::{Error, Result};
use crate::harness::{sweep_instance, sweep_lambda, ActivationSpec, ExperimentSpec, Instance, SweepMethod, SweepRecord, SynthLayerSpec};
use crate::linalg::Matrix;
use crate::objective::{mean_risk, LossBreakdown};
use crate::oracle::{run_suite, FaultInjection, Suite, SuiteReport};
use crate::par;
use crate::quantizer::{rtn, Granularity, QuantMode, QuantScheme, QuantizedLayer};
use crate::rng::stream_key;
use crate::saliency::{channel_stats, saliency_vector_gs};
use crate::solver_gbs::{self, select_hparams_gbs, GbsConfig, GbsSaliency};
use crate::solver_gs::{self, select_lambda_gs, GsConfig, GsSaliency};

pub const SCHEMA_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 8] = b"SQTENSR1";

// ---------------------------------------------------------------------------
// Tensor files

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F64(_) => 1,
            TensorData::I32(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

fn element_count(dims: &[u64]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid(format!("tensor rank {} exceeds 255", dims.len())));
        }
        if element_count(&dims) != Some(data.len()) {
            return Err(Error::dims("Tensor::new", format!("product of {dims:?}"), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows() as u64, m.cols() as u64], data: TensorData::F64(m.data().to_vec()) }
    }

    pub fn from_i32(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        Self::new(vec![rows as u64, cols as u64], TensorData::I32(data))
    }

    pub fn from_f64(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows as u64, cols as u64], TensorData::F64(data))
    }

    /// Interprets a rank-2 f64 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F64(v), [r, c]) => Matrix::new(*r as usize, *c as usize, v.clone()),
            _ => Err(Error::Parse(format!(
                "expected a rank-2 f64 tensor, got dtype {} with dims {:?}",
                self.data.dtype(),
                self.dims
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Parse(format!("tensor file: {m}"));
        if bytes.len() < 10 || &bytes[..8] != TENSOR_MAGIC {
            return Err(bad("missing SQTENSR1 magic".into()));
        }
        let dtype = bytes[8];
        let rank = bytes[9] as usize;
        let header = 10 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header".into()));
        }
        let dims: Vec<u64> = bytes[10..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let count = element_count(&dims).ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[header..];
        let width = match dtype {
            1 => 8,
            2 => 4,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        if count.checked_mul(width) != Some(payload.len()) {
            return Err(bad(format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), count * width)));
        }
        let data = if dtype == 1 {
            TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
        } else {
            TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect())
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

// ---------------------------------------------------------------------------
// Methods and manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rtn,
    Awq,
    Gptq,
    SarqcGs,
    SarqcGbs,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Rtn, Method::Awq, Method::Gptq, Method::SarqcGs, Method::SarqcGbs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Awq => "awq",
            Method::Gptq => "gptq",
            Method::SarqcGs => "sarqc-gs",
            Method::SarqcGbs => "sarqc-gbs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Whether the solvers use saliency weights or the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyChoice {
    Identity,
    #[default]
    Saliency,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridDefaults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestDefaults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<QuantScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grids: Option<GridDefaults>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: String,
    /// Paths are relative to the manifest's directory unless absolute.
    pub weights: String,
    pub calib: String,
    pub d_out: usize,
    pub d_in: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub defaults: ManifestDefaults,
}

/// A manifest layer with its tensors loaded and checked.
#[derive(Clone, Debug)]
pub struct LoadedLayer {
    pub layer_id: String,
    pub w: Matrix,
    pub calib: Matrix,
}

fn valid_layer_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.schema != SCHEMA_VERSION {
            return Err(Error::Parse(format!("{}: unsupported manifest schema {}", path.display(), m.schema)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Structural checks that need no file access.
    pub fn check_entries(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("manifest lists no layers"));
        }
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if !valid_layer_id(&l.layer_id) {
                return Err(Error::invalid(format!("invalid layer_id {:?}", l.layer_id)));
            }
            if !seen.insert(l.layer_id.as_str()) {
                return Err(Error::invalid(format!("duplicate layer_id {:?}", l.layer_id)));
            }
            if l.d_out == 0 || l.d_in == 0 || l.n < 2 {
                return Err(Error::invalid(format!("layer {}: need d_out, d_in >= 1 and n >= 2", l.layer_id)));
            }
        }
        Ok(())
    }

    /// Reads every tensor and checks it against the declared dimensions.
    /// Nothing is computed until the whole manifest has passed.
    pub fn load_layers(&self, manifest_path: &Path) -> Result<Vec<LoadedLayer>> {
        self.check_entries()?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.layers
            .iter()
            .map(|l| {
                let w = Tensor::read(&base.join(&l.weights))?.to_matrix()?;
                let calib = Tensor::read(&base.join(&l.calib))?.to_matrix()?;
                if w.shape() != (l.d_out, l.d_in) {
                    return Err(Error::dims(
                        "manifest weights",
                        format!("{} {}x{}", l.layer_id, l.d_out, l.d_in),
                        format!("{}x{}", w.rows(), w.cols()),
                    ));
                }
                if calib.shape() != (l.d_in, l.n) {
                    return Err(Error::dims(
                        "manifest calib",
                        format!("{} {}x{}", l.layer_id, l.d_in, l.n),
                        format!("{}x{}", calib.rows(), calib.cols()),
                    ));
                }
                Ok(LoadedLayer { layer_id: l.layer_id.clone(), w, calib })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// quantize

/// Command-line overrides; anything left `None` falls back to the manifest
/// defaults block and then to built-in defaults.
#[derive(Clone, Debug, Default)]
pub struct QuantizeOptions {
    pub manifest: PathBuf,
    pub method: Option<Method>,
    pub bits: Option<u32>,
    /// `0` selects one scale per output row.
    pub group_size: Option<usize>,
    pub mode: Option<QuantMode>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub gamma_grid: Option<Vec<f64>>,
    pub alpha_grid: Option<Vec<f64>>,
    pub saliency: Option<SaliencyChoice>,
    pub block: Option<usize>,
    pub seed: Option<u64>,
    pub val_fraction: Option<f64>,
}

/// Fully resolved job description, echoed in the report and sufficient to
/// replay the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeConfig {
    pub manifest: PathBuf,
    pub method: Method,
    pub scheme: QuantScheme,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub saliency: SaliencyChoice,
    pub block_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl QuantizeOptions {
    pub fn resolve(&self, defaults: &ManifestDefaults) -> Result<QuantizeConfig> {
        let method = self.method.or(defaults.method).unwrap_or(Method::SarqcGbs);
        let mut scheme = defaults.scheme.unwrap_or_default();
        if let Some(b) = self.bits {
            scheme.bits = b;
        }
        if let Some(m) = self.mode {
            scheme.mode = m;
        }
        if let Some(g) = self.group_size {
            scheme.granularity = if g == 0 { Granularity::PerChannel } else { Granularity::Group(g) };
        }
        scheme.validate()?;

        let grids = defaults.grids.clone().unwrap_or_default();
        let lambda_grid = match (self.lambda, &self.lambda_grid) {
            (Some(_), Some(_)) => return Err(Error::invalid("--lambda and --lambda-grid are mutually exclusive")),
            (Some(l), None) => vec![l],
            (None, Some(g)) => g.clone(),
            (None, None) => grids.lambda.clone().unwrap_or_else(|| match method {
                Method::SarqcGs => solver_gs::default_lambda_grid(),
                Method::SarqcGbs => solver_gbs::default_lambda_grid(),
                _ => vec![0.0],
            }),
        };
        let gamma_grid = self
            .gamma_grid
            .clone()
            .or(grids.gamma)
            .unwrap_or_else(solver_gbs::default_gamma_grid);
        let alpha_grid = self
            .alpha_grid
            .clone()
            .or(grids.alpha)
            .unwrap_or_else(solver_gs::default_alpha_grid);
        let cfg = QuantizeConfig {
            manifest: self.manifest.clone(),
            method,
            scheme,
            lambda_grid,
            gamma_grid,
            alpha_grid,
            saliency: self.saliency.unwrap_or_default(),
            block_size: self.block.unwrap_or(128),
            seed: self.seed.unwrap_or(0),
            val_fraction: self.val_fraction.unwrap_or(0.25),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl QuantizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.block_size == 0 {
            return Err(Error::invalid("--block must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must be in (0, 1)"));
        }
        for (name, g) in [("lambda", &self.lambda_grid), ("gamma", &self.gamma_grid), ("alpha", &self.alpha_grid)] {
            if g.is_empty() || g.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("{name} grid must be non-empty, finite and non-negative")));
            }
        }
        Ok(())
    }

    fn gs_config(&self, lambda_grid: Vec<f64>) -> GsConfig {
        GsConfig {
            alpha_grid: self.alpha_grid.clone(),
            lambda: lambda_grid[0],
            lambda_grid,
            saliency: match self.saliency {
                SaliencyChoice::Identity => GsSaliency::Identity,
                SaliencyChoice::Saliency => GsSaliency::Gs,
            },
            scheme: self.scheme,
            val_fraction: self.val_fraction,
        }
    }

    fn gbs_config(&self, lambda_grid: Vec<f64>, saliency: GbsSaliency) -> GbsConfig {
        GbsConfig {
            lambda_grid,
            gamma_grid: self.gamma_grid.clone(),
            block_size: self.block_size,
            saliency,
            scheme: self.scheme,
            val_fraction: self.val_fraction,
            ..GbsConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOutputs {
    pub codes: String,
    pub scales: String,
    pub zeros: String,
    pub dequant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_scale: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub method: Method,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    /// Losses on the calibration train split; `sar` always uses the
    /// grid-search saliency profile so methods are comparable.
    pub losses: LossBreakdown,
    /// Mean `‖ΔW x‖²` over the validation split.
    pub heldout_risk: f64,
    pub jitter_used: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection: Vec<SelectionRow>,
    pub outputs: LayerOutputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub config: QuantizeConfig,
    pub layers: Vec<LayerReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub layers: BTreeMap<String, f64>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([("sarqc-core".to_string(), env!("CARGO_PKG_VERSION").to_string())])
}

struct LayerResult {
    report: LayerReport,
    layer: QuantizedLayer,
    wall_ms: f64,
}

fn quantize_layer(cfg: &QuantizeConfig, l: &LoadedLayer) -> Result<LayerResult> {
    let start = Instant::now();
    let batch = CalibrationBatch::split_tail(l.calib.clone(), cfg.val_fraction)?;
    let x_train = batch.train();
    let x_val = batch.val();
    let (mut lambda, mut gamma, mut alpha, mut jitter_used) = (None, None, None, 0.0);
    let mut selection = Vec::new();
    let layer = match cfg.method {
        Method::Rtn => rtn(&l.w, &cfg.scheme)?,
        Method::Awq => {
            let res = solver_gs::run_gs(&l.w, &x_train, &cfg.gs_config(vec![0.0]))?;
            alpha = Some(res.chosen_alpha);
            res.layer
        }
        Method::Gptq => {
            let (q, curv) =
                solver_gbs::quantize_gbs(&l.w, &x_train, GbsSaliency::Identity, 0.0, None, &cfg.scheme, cfg.block_size)?;
            jitter_used = curv.jitter_used;
            q
        }
        Method::SarqcGs => {
            let sel = select_lambda_gs(&l.w, &batch, &cfg.gs_config(cfg.lambda_grid.clone()))?;
            selection = sel.table.iter().map(|&(lambda, val_loss)| SelectionRow { lambda, gamma: None, val_loss }).collect();
            lambda = Some(sel.result.chosen_lambda);
            alpha = Some(sel.result.chosen_alpha);
            sel.result.layer
        }
        Method::SarqcGbs => {
            let saliency = match cfg.saliency {
                SaliencyChoice::Identity => GbsSaliency::Identity,
                SaliencyChoice::Saliency => GbsSaliency::Gbs,
            };
            let sel = select_hparams_gbs(&l.w, &batch, &cfg.gbs_config(cfg.lambda_grid.clone(), saliency))?;
            selection = sel
                .table
                .iter()
                .map(|r| SelectionRow { lambda: r.lambda, gamma: r.gamma, val_loss: r.val_loss })
                .collect();
            lambda = Some(sel.lambda);
            gamma = sel.gamma;
            jitter_used = sel.curvature.jitter_used;
            sel.layer
        }
    };
    let profile = saliency_vector_gs(&channel_stats(&l.w, &x_train)?);
    let losses = LossBreakdown::compute(&l.w, &layer.dequantized, &x_train, &profile)?;
    let heldout_risk = mean_risk(&l.w, &layer.dequantized, &x_val)?;
    let id = &l.layer_id;
    let outputs = LayerOutputs {
        codes: format!("{id}.codes.sqt"),
        scales: format!("{id}.scales.sqt"),
        zeros: format!("{id}.zeros.sqt"),
        dequant: format!("{id}.dequant.sqt"),
        channel_scale: layer.channel_scale.as_ref().map(|_| format!("{id}.channel_scale.sqt")),
    };
    Ok(LayerResult {
        report: LayerReport {
            layer_id: id.clone(),
            method: cfg.method,
            lambda,
            gamma,
            alpha,
            losses,
            heldout_risk,
            jitter_used,
            selection,
            outputs,
        },
        layer,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn write_layer(out: &Path, r: &LayerResult) -> Result<()> {
    let q = &r.layer;
    let o = &r.report.outputs;
    let n_groups = q.params.n_groups;
    Tensor::from_i32(q.d_out(), q.d_in(), q.codes.clone())?.write(&out.join(&o.codes))?;
    Tensor::from_f64(q.d_out(), n_groups, q.scales())?.write(&out.join(&o.scales))?;
    Tensor::from_i32(q.d_out(), n_groups, q.zero_points())?.write(&out.join(&o.zeros))?;
    Tensor::from_matrix(&q.dequantized).write(&out.join(&o.dequant))?;
    if let (Some(s), Some(name)) = (&q.channel_scale, &o.channel_scale) {
        Tensor::new(vec![s.len() as u64], TensorData::F64(s.clone()))?.write(&out.join(name))?;
    }
    Ok(())
}

/// Quantizes every manifest layer with up to `jobs` worker threads and
/// writes tensors, `report.json` and `timings.json` into `out`.
///
/// `report.json` does not depend on `jobs`; wall-clock times go to
/// `timings.json` only.
pub fn run_quantize(cfg: &QuantizeConfig, out: &Path, jobs: usize) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let layers = manifest.load_layers(&cfg.manifest)?;
    let mut results = par::with_jobs(jobs, || {
        par::map_indexed(layers.len(), |i| quantize_layer(cfg, &layers[i]).map_err(|e| e.in_layer(&layers[i].layer_id)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.report.layer_id.cmp(&b.report.layer_id));

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for r in &results {
        write_layer(out, r)?;
    }
    let report = RunReport {
        schema: SCHEMA_VERSION,
        seed: cfg.seed,
        versions: versions(),
        config: cfg.clone(),
        layers: results.iter().map(|r| r.report.clone()).collect(),
    };
    write_json(&out.join("report.json"), &report)?;
    let timings = Timings {
        total_ms: start.elapsed().as_secs_f64() * 1e3,
        layers: results.iter().map(|r| (r.report.layer_id.clone(), r.wall_ms)).collect(),
    };
    write_json(&out.join("timings.json"), &timings)?;
    Ok(report)
}

/// Reads the configuration echoed in a previous `report.json`.
pub fn replay_config(report_path: &Path) -> Result<QuantizeConfig> {
    let report: RunReport = read_json(report_path)?;
    if report.schema != SCHEMA_VERSION {
        return Err(Error::Parse(format!("unsupported report schema {}", report.schema)));
    }
    report.config.validate()?;
    Ok(report.config)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug)]
pub enum SweepSource {
    Synthetic(ExperimentSpec),
    Manifest { path: PathBuf, layer: Option<String> },
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub source: SweepSource,
    pub method: SweepMethod,
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scheme: QuantScheme,
    /// Overrides the spec's saliency exponent for `sarqc-gbs` sweeps.
    pub gamma: Option<f64>,
    pub val_fraction: f64,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_experiment_spec(path: &Path) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = read_json(path)?;
    spec.layer.validate()?;
    Ok(spec)
}

pub const SWEEP_CSV_HEADER: &str = "lambda,gamma,recon,sar,drift,heldout_risk,method,seed";

pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRecord>> {
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::invalid("lambda grid must be non-empty, finite and non-negative"));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("--seeds must be >= 1"));
    }
    cfg.scheme.validate()?;
    match &cfg.source {
        SweepSource::Synthetic(spec) => {
            let spec = ExperimentSpec { gamma: cfg.gamma.unwrap_or(spec.gamma), ..spec.clone() };
            sweep_lambda(&spec, &cfg.scheme, cfg.method, &cfg.lambda_grid, &cfg.seeds)
        }
        SweepSource::Manifest { path, layer } => {
            if cfg.seeds.len() > 1 {
                return Err(Error::invalid("a manifest sweep has no random draws; use --seeds 1"));
            }
            let manifest = Manifest::read(path)?;
            let layers = manifest.load_layers(path)?;
            let l = match layer {
                Some(id) => layers
                    .iter()
                    .find(|l| &l.layer_id == id)
                    .ok_or_else(|| Error::invalid(format!("layer {id:?} not in manifest")))?,
                None if layers.len() == 1 => &layers[0],
                None => return Err(Error::invalid("manifest has several layers; pass --layer")),
            };
            let batch = CalibrationBatch::split_tail(l.calib.clone(), cfg.val_fraction)?;
            let inst = Instance { w: l.w.clone(), calib: batch.train(), heldout: batch.val() };
            let mut grid = cfg.lambda_grid.clone();
            grid.sort_by(f64::total_cmp);
            sweep_instance(&inst, &cfg.scheme, cfg.method, &grid, cfg.gamma.unwrap_or(0.35), 128, cfg.seeds[0])
                .map_err(|e| e.in_layer(&l.layer_id))
        }
    }
}

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in records {
        let gamma = r.gamma.map(|g| g.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.lambda, gamma, r.recon, r.sar, r.drift, r.heldout_risk, r.method, r.seed
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// verify

#[derive(Clone, Debug, Default)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    pub trials: Option<usize>,
    pub seed: u64,
    pub fault: FaultInjection,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema: u32,
    pub seed: u64,
    pub pass: bool,
    pub suites: Vec<SuiteReport>,
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.trials == Some(0) {
        return Err(Error::invalid("--trials must be >= 1"));
    }
    if cfg.suites.is_empty() {
        return Err(Error::invalid("no suite selected"));
    }
    let suites = cfg
        .suites
        .iter()
        .map(|&s| run_suite(s, cfg.trials, cfg.seed, cfg.fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport { schema: SCHEMA_VERSION, seed: cfg.seed, pass: suites.iter().all(|s| s.pass), suites })
}

pub fn write_verify_report(path: &Path, report: &VerifyReport) -> Result<()> {
    write_json(path, report)
}

// ---------------------------------------------------------------------------
// gen

/// Synthetic manifest description; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub layers: usize,
    pub d_out: usize,
    pub d_in: usize,
    /// Calibration samples per layer.
    pub n: usize,
    pub outlier_channels: usize,
    pub outlier_scale: f64,
    pub weight_std: f64,
    pub activations: ActivationSpec,
    pub shift: f64,
    pub defaults: ManifestDefaults,
}

impl Default for GenSpec {
    fn default() -> Self {
        let layer = SynthLayerSpec::default();
        Self {
            layers: 1,
            d_out: layer.d_out,
            d_in: layer.d_in,
            n: 128,
            outlier_channels: layer.outlier_channels,
            outlier_scale: layer.outlier_scale,
            weight_std: layer.weight_std,
            activations: ActivationSpec::default(),
            shift: 0.0,
            defaults: ManifestDefaults::default(),
        }
    }
}

impl GenSpec {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Writes `layer_XXX.weights.sqt`, `layer_XXX.calib.sqt` and `manifest.json`.
pub fn run_gen(spec: &GenSpec, out: &Path, seed: u64) -> Result<Manifest> {
    if spec.layers == 0 {
        return Err(Error::invalid("spec must request at least one layer"));
    }
    if spec.n < 2 {
        return Err(Error::invalid("spec needs n >= 2 calibration samples"));
    }
    let exp = ExperimentSpec {
        layer: SynthLayerSpec {
            d_out: spec.d_out,
            d_in: spec.d_in,
            outlier_channels: spec.outlier_channels,
            outlier_scale: spec.outlier_scale,
            weight_std: spec.weight_std,
            seed,
        },
        activations: spec.activations.clone(),
        n_calib: spec.n,
        shift: spec.shift,
        ..ExperimentSpec::default()
    };
    exp.layer.validate()?;
    let generated = par::map_indexed(spec.layers, |i| {
        exp.layer_and_calibration(stream_key(seed, "gen-layer", i as u64), spec.n).map(|(w, x, _)| (w, x))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut layers = Vec::with_capacity(spec.layers);
    for (i, (w, x)) in generated.iter().enumerate() {
        let id = format!("layer_{i:03}");
        let entry = LayerEntry {
            weights: format!("{id}.weights.sqt"),
            calib: format!("{id}.calib.sqt"),
            layer_id: id,
            d_out: spec.d_out,
            d_in: spec.d_in,
            n: spec.n,
        };
        Tensor::from_matrix(w).write(&out.join(&entry.weights))?;
        Tensor::from_matrix(x).write(&out.join(&entry.calib))?;
        layers.push(entry);
    }
    let manifest = Manifest { schema: SCHEMA_VERSION, layers, defaults: spec.defaults.clone() };
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}
