//! Dataset CSV ingestion and export, run configuration and output manifests.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::DiagnosticsOptions;
use crate::error::{Error, Result};
use crate::model::{Dataset, Family, ModelSpec, ObservationRecord};
use crate::sampler::SamplerConfig;
use crate::simulation::ReplicationStudy;
use crate::summary::{TrajectoryRequest, SCHEMA_VERSION};

const REQUIRED: [&str; 3] = ["id", "y", "m"];

/// Reads a dataset from CSV. With `covariates = None` every column other
/// than `id`, `y` and `m` is a covariate; otherwise only the declared ones
/// are kept and each must be present. Rows are numbered from 1 = header.
pub fn read_dataset<R: Read>(reader: R, covariates: Option<&[String]>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
        .iter()
        .map(String::from)
        .collect();
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    if position.len() != header.len() {
        return Err(Error::Parse { row: 1, message: "duplicate column name".into() });
    }
    for col in REQUIRED {
        if !position.contains_key(col) {
            return Err(Error::Parse { row: 1, message: format!("missing required column `{col}`") });
        }
    }
    let covariate_names: Vec<String> = match covariates {
        Some(declared) => {
            for c in declared {
                if !position.contains_key(c.as_str()) {
                    return Err(Error::Parse { row: 1, message: format!("missing declared covariate column `{c}`") });
                }
            }
            declared.to_vec()
        }
        None => header.iter().filter(|h| !REQUIRED.contains(&h.as_str())).cloned().collect(),
    };
    let cov_idx: Vec<usize> = covariate_names.iter().map(|c| position[c.as_str()]).collect();
    let (id_idx, y_idx, m_idx) = (position["id"], position["y"], position["m"]);

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let count = |j: usize, name: &str| {
            field(j).parse::<u32>().map_err(|_| Error::Parse {
                row,
                message: format!("`{name}` must be a non-negative integer, got `{}`", field(j)),
            })
        };
        let y = count(y_idx, "y")?;
        let m = count(m_idx, "m")?;
        if y > m {
            return Err(Error::Parse { row, message: format!("y = {y} exceeds m = {m}") });
        }
        let id = field(id_idx);
        if id.is_empty() {
            return Err(Error::Parse { row, message: "empty id".into() });
        }
        let covs = covariate_names
            .iter()
            .zip(&cov_idx)
            .map(|(name, &j)| match field(j).parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    message: format!("covariate `{name}` must be a finite number, got `{}`", field(j)),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(ObservationRecord { cluster_id: id.to_string(), y, m, covariates: covs });
    }
    let kept: Vec<String> = header
        .iter()
        .filter(|h| REQUIRED.contains(&h.as_str()) || covariate_names.contains(h))
        .cloned()
        .collect();
    Dataset::new(covariate_names, records)?.with_columns(kept)
}

pub fn load_dataset(path: &Path, covariates: Option<&[String]>) -> Result<Dataset> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_dataset(BufReader::new(file), covariates)
}

/// Writes the dataset in its recorded column order. Numbers use the
/// shortest representation that parses back to the same value.
pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&dataset.columns).map_err(crate::sampler::csv_error)?;
    for r in &dataset.records {
        let row: Vec<String> = dataset
            .columns
            .iter()
            .map(|c| match c.as_str() {
                "id" => r.cluster_id.clone(),
                "y" => r.y.to_string(),
                "m" => r.m.to_string(),
                other => {
                    let j = dataset.covariate_index(other).expect("column order validated");
                    r.covariates[j].to_string()
                }
            })
            .collect();
        w.write_record(&row).map_err(crate::sampler::csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareOptions {
    pub families: Vec<Family>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { families: Family::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContaminationOptions {
    pub rate: f64,
    pub seed: u64,
}

impl Default for ContaminationOptions {
    fn default() -> Self {
        Self { rate: 0.1, seed: 1 }
    }
}

/// Everything a command needs; loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub output: PathBuf,
    pub covariates: Option<Vec<String>>,
    pub threads: Option<usize>,
    pub model: ModelSpec,
    pub sampler: SamplerConfig,
    pub diagnostics: DiagnosticsOptions,
    pub predict: TrajectoryRequest,
    pub compare: CompareOptions,
    pub contaminate: ContaminationOptions,
    pub simulation: ReplicationStudy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            output: PathBuf::from("out"),
            covariates: None,
            threads: None,
            model: ModelSpec::default(),
            sampler: SamplerConfig::default(),
            diagnostics: DiagnosticsOptions::default(),
            predict: TrajectoryRequest::default(),
            compare: CompareOptions::default(),
            contaminate: ContaminationOptions::default(),
            simulation: ReplicationStudy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        if self.compare.families.is_empty() {
            return Err(Error::Config("compare needs at least one family".into()));
        }
        if !(0.0..=0.5).contains(&self.contaminate.rate) {
            return Err(Error::Config("contamination rate must lie in [0, 0.5]".into()));
        }
        self.simulation.scenario.validate()?;
        self.simulation.sampler.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    /// Digest of `path`, recorded under `label`.
    pub fn of(path: &Path, label: &str) -> Result<Self> {
        let data = std::fs::read(path)?;
        let hash = Sha256::digest(&data);
        let sha256 = hash.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { path: label.to_string(), sha256, bytes: data.len() as u64 })
    }
}

/// Run metadata written next to the outputs. Contains no timestamps, so
/// identical runs give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, seeds: Vec<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seeds,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
