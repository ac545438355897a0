use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use meshmoe::dynamic::DynamicReport;
use meshmoe::netsim::{Direction, LinkId};
use meshmoe::perfmodel::GammaFit;
use meshmoe::pipeline::{Calibration, ComparisonRow, Evaluation};
use meshmoe::{HardwareProfile, MeshSpec, ModelSpec, Strategy};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] meshmoe::Error),
    #[error("{0}")]
    Usage(String),
    #[error("missing inputs: {}", .0.join(", "))]
    MissingInputs(Vec<String>),
    #[error("{path}: {source}")]
    Input { path: String, source: Box<CliError> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Pipeline(_) => "pipeline",
            CliError::Usage(_) => "usage",
            CliError::MissingInputs(_) => "missing_inputs",
            CliError::Input { source, .. } => source.kind(),
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
        }
    }

    /// Machine-readable form written to stderr.
    pub fn envelope(&self) -> Value {
        let mut error = json!({ "kind": self.kind(), "message": self.to_string() });
        if let CliError::MissingInputs(missing) = self {
            error["missing"] = json!(missing);
        }
        json!({ "error": error })
    }

    pub fn input(path: &Path, source: impl Into<CliError>) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            source: Box::new(source.into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Preset name or file the spec was read from.
    pub source: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaConfig {
    /// `auto` or `fixed`.
    pub mode: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<GammaFit>,
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaConfig>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Command-specific settings.
    pub params: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, threads: Option<usize>) -> Self {
        Self {
            command: command.into(),
            seed,
            threads,
            model: None,
            mesh: None,
            batch: None,
            strategy: None,
            gamma: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) {
        self.params.insert(
            name.into(),
            serde_json::to_value(value).expect("parameters serialize"),
        );
    }
}

/// One directed link of the heatmap; boundary ports are listed with
/// `present = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkRow {
    pub node: usize,
    pub x: usize,
    pub y: usize,
    pub direction: String,
    pub present: u8,
    pub busy_s: f64,
    pub utilization: f64,
}

pub fn link_rows(mesh: &MeshSpec, per_link_busy_s: &[f64], makespan_s: f64) -> Vec<LinkRow> {
    (0..mesh.num_nodes() * 4)
        .map(|index| {
            let link = LinkId::from_index(index);
            let (x, y) = mesh.coord(link.node);
            let busy_s = per_link_busy_s.get(index).copied().unwrap_or(0.0);
            LinkRow {
                node: link.node,
                x,
                y,
                direction: Direction::name(link.dir).into(),
                present: u8::from(link.exists(mesh)),
                busy_s,
                utilization: if makespan_s > 0.0 {
                    busy_s / makespan_s
                } else {
                    0.0
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heatmap {
    pub layer: usize,
    pub iteration: usize,
    pub makespan_s: f64,
    pub per_node_sent_bytes: Vec<u64>,
    pub per_node_received_bytes: Vec<u64>,
    pub links: Vec<LinkRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareCell {
    pub hardware: String,
    pub profile: HardwareProfile,
    pub gamma: GammaConfig,
    pub rows: Vec<ComparisonRow>,
}

/// JSON outputs that `report` can consume, tagged by `kind`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunOutput {
    Calibration {
        config: RunConfig,
        calibration: Calibration,
    },
    Simulation {
        config: RunConfig,
        evaluation: Box<Evaluation>,
        heatmap: Heatmap,
    },
    Dynamic {
        config: RunConfig,
        report: DynamicReport,
    },
    Compare {
        config: RunConfig,
        cells: Vec<CompareCell>,
    },
}

/// Resolves a preset name or a JSON model file.
pub fn resolve_model(arg: &str) -> CliResult<ModelConfig> {
    let spec = match ModelSpec::preset_by_name(arg) {
        Some(spec) => spec,
        None => {
            let path = Path::new(arg);
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "`{arg}` is neither a model preset (mixtral, deepseek, qwen) nor a file"
                )));
            }
            let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::input(path, e))?
        }
    };
    spec.validate()?;
    Ok(ModelConfig {
        source: arg.into(),
        spec,
    })
}

/// Parses `ROWSxCOLS` together with a hardware profile string.
pub fn resolve_mesh(shape: &str, hw: &str) -> CliResult<MeshSpec> {
    let bad = || CliError::Usage(format!("mesh `{shape}` is not ROWSxCOLS"));
    let (r, c) = shape.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    let mesh = MeshSpec::new(rows, cols, HardwareProfile::parse(hw)?);
    mesh.validate()?;
    Ok(mesh)
}

/// `auto` or a positive number.
pub fn parse_gamma(s: &str) -> CliResult<Option<f64>> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(g) if g > 0.0 && g.is_finite() => Ok(Some(g)),
        _ => Err(CliError::Usage(format!(
            "gamma `{s}` is neither `auto` nor a positive number"
        ))),
    }
}

/// `path` with `suffix` appended to its file stem and the given extension.
pub fn sibling(path: &Path, suffix: &str, extension: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{extension}"))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
