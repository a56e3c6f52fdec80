use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_dataset, read_file, Dataset};
use crate::cell::{CellPlan, OperationKind, PrecisionPolicy, StemSpec, SuperCell, SupernetDesc, Variant};
use crate::costmodel::CostConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
}

impl DataPaths {
    pub fn load(&self, classes: Option<usize>) -> Result<Dataset> {
        load_dataset(&self.images, &self.labels, classes)
    }
}

/// Shape of the search model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupernetConfig {
    pub stem: StemSpec,
    pub cells: Vec<CellPlan>,
    /// Operation mask; all ten kinds when empty.
    pub candidates: Vec<OperationKind>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            stem: StemSpec {
                in_channels: 1,
                channels: 8,
                kernel: 3,
                stride: 1,
                pool: false,
            },
            cells: vec![CellPlan {
                channels: vec![8, 8, 8],
                strides: vec![1, 1],
                kernels: vec![3, 3],
            }],
            candidates: Vec::new(),
        }
    }
}

impl SupernetConfig {
    pub fn build(&self, classes: usize) -> Result<SupernetDesc> {
        let mut candidates = if self.candidates.is_empty() {
            OperationKind::ALL.to_vec()
        } else {
            self.candidates.clone()
        };
        candidates.sort();
        candidates.dedup();
        let cells = self
            .cells
            .iter()
            .map(|p| SuperCell::with_candidates(p.clone(), candidates.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SupernetDesc {
            stem: self.stem,
            classes,
            cells,
        })
    }
}

/// Settings shared by all subcommands; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Proxy dataset for the search stage.
    pub search_data: Option<DataPaths>,
    /// Dataset for pretraining and finetuning.
    pub train_data: Option<DataPaths>,
    pub eval_data: Option<DataPaths>,
    pub classes: Option<usize>,
    pub variant: Variant,
    pub policy: PrecisionPolicy,
    pub train: TrainConfig,
    pub supernet: SupernetConfig,
    pub cost: CostConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            search_data: None,
            train_data: None,
            eval_data: None,
            classes: None,
            variant: Variant::Nasb,
            policy: PrecisionPolicy::default(),
            train: TrainConfig::default(),
            supernet: SupernetConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Parses the file and checks that referenced paths exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| Error::invalid(format!("{} is not UTF-8", path.display())))?;
        let cfg = Self::from_json(&text)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        for d in [&self.search_data, &self.train_data, &self.eval_data].into_iter().flatten() {
            for p in [&d.images, &d.labels] {
                if !p.exists() {
                    return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced path does not exist")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
