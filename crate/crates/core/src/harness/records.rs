use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the record file.
pub const COLUMNS: [&str; 26] = [
    "cell_id",
    "status",
    "stage",
    "dataset_seed",
    "k",
    "regime",
    "dfm",
    "gfm",
    "alpha",
    "gamma",
    "p_ada",
    "n_s",
    "sigma",
    "min_scale",
    "mixup_beta",
    "valid_accuracy",
    "test_accuracy",
    "fake_valid_accuracy",
    "fid",
    "precision",
    "recall",
    "selected_cell",
    "feature_extractor",
    "wall_time_s",
    "artifact",
    "error",
];

/// Stage names used in the `stage` column.
pub mod stage {
    pub const SPLIT: &str = "split";
    pub const PRETRAIN_CLASSIFIER: &str = "pretrain-classifier";
    pub const PRETRAIN_GAN: &str = "pretrain-gan";
    pub const FINETUNE_GAN: &str = "finetune-gan";
    pub const FINETUNE_CLASSIFIER: &str = "finetune-classifier";
    pub const TEST: &str = "test";
}

/// One row of the record file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub cell_id: String,
    /// `ok` or `failed`.
    pub status: String,
    pub stage: String,
    pub dataset_seed: u64,
    pub k: Option<usize>,
    pub regime: Option<String>,
    pub dfm: Option<String>,
    pub gfm: Option<String>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub p_ada: Option<f64>,
    pub n_s: Option<usize>,
    pub sigma: Option<f64>,
    pub min_scale: Option<f64>,
    pub mixup_beta: Option<f64>,
    pub valid_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub fake_valid_accuracy: Option<f64>,
    pub fid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// For test rows, the fine-tuning cell whose hyperparameters were used.
    pub selected_cell: Option<String>,
    pub feature_extractor: Option<String>,
    pub wall_time_s: Option<f64>,
    pub artifact: Option<String>,
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordManifest {
    pub format: String,
    pub columns: Vec<String>,
    pub config: serde_json::Value,
}

/// Append-only CSV of experiment records guarded by an exclusive file lock.
#[derive(Clone, Debug)]
pub struct RecordFile {
    path: PathBuf,
}

impl RecordFile {
    pub const FORMAT: &'static str = "fsaug-records/1";

    pub fn new(path: impl Into<PathBuf>) -> Self {
        RecordFile { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest_path(&self) -> PathBuf {
        let mut p = self.path.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    }

    /// Writes the sidecar manifest describing columns and the run configuration.
    pub fn write_manifest(&self, config: serde_json::Value) -> Result<()> {
        let m = RecordManifest { format: Self::FORMAT.into(), columns: COLUMNS.iter().map(|c| c.to_string()).collect(), config };
        let path = self.manifest_path();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(Error::io(&path))
    }

    /// Appends one row atomically with respect to other writers.
    pub fn append(&self, record: &ExperimentRecord) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&self.path).map_err(Error::io(&self.path))?;
        file.lock().map_err(Error::io(&self.path))?;
        let empty = file.seek(SeekFrom::End(0)).map_err(Error::io(&self.path))? == 0;
        let mut w = csv::WriterBuilder::new().has_headers(empty).from_writer(Vec::new());
        w.serialize(record)?;
        let bytes = w.into_inner().map_err(|e| Error::Consistency(e.to_string()))?;
        let res = file.write_all(&bytes).and_then(|_| file.sync_data());
        file.unlock().map_err(Error::io(&self.path))?;
        res.map_err(Error::io(&self.path))
    }

    /// All rows; a missing file has none.
    pub fn read(&self) -> Result<Vec<ExperimentRecord>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let mut file = File::open(&self.path).map_err(Error::io(&self.path))?;
        file.lock_shared().map_err(Error::io(&self.path))?;
        let mut text = String::new();
        let res = file.read_to_string(&mut text);
        file.unlock().map_err(Error::io(&self.path))?;
        res.map_err(Error::io(&self.path))?;
        read_records(text.as_bytes())
    }

    /// Ids of cells that completed successfully.
    pub fn completed(&self) -> Result<BTreeSet<String>> {
        Ok(self.read()?.into_iter().filter(ExperimentRecord::ok).map(|r| r.cell_id).collect())
    }
}

pub fn read_records(bytes: &[u8]) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Consistency(format!("record file columns {:?} differ from the expected layout", headers.iter().collect::<Vec<_>>())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
