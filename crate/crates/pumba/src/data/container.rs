//! Dataset directories: a JSON-lines manifest plus one tensor file per
//! sample.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file;
use crate::error::{Error, Result};
use crate::eval::CapriCategory;
use crate::model::InterfacePairSample;

pub const MANIFEST: &str = "manifest.jsonl";
const TENSOR_DIR: &str = "tensors";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub complex_id: String,
    pub model_id: String,
    /// 1 for a native pose, 0 otherwise.
    pub label: u8,
    pub capri: CapriCategory,
    /// Tensor file relative to the container root.
    pub path: String,
    /// Stored as f64 so the f32 values survive the text round trip exactly.
    pub energies: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DatasetContainer {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl DatasetContainer {
    /// Reads and checks the manifest. Duplicate `(complex_id, model_id)`
    /// pairs and missing tensor files are rejected here.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join(MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Manifest(format!("{} not found", manifest.display()))
            } else {
                Error::io(&manifest, e)
            }
        })?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
            if rec.label > 1 {
                return Err(Error::Manifest(format!("line {}: label must be 0 or 1", n + 1)));
            }
            if !seen.insert((rec.complex_id.clone(), rec.model_id.clone())) {
                return Err(Error::Manifest(format!(
                    "line {}: duplicate sample ({}, {})",
                    n + 1,
                    rec.complex_id,
                    rec.model_id
                )));
            }
            if !root.join(&rec.path).is_file() {
                return Err(Error::Manifest(format!(
                    "line {}: tensor file {} does not exist",
                    n + 1,
                    rec.path
                )));
            }
            records.push(rec);
        }
        Ok(Self { root, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read_sample(&self, record: &ManifestRecord) -> Result<InterfacePairSample> {
        let image = tensor_file::read(&self.root.join(&record.path))?;
        if image.rank() != 3 || image.shape()[1] != image.shape()[2] {
            return Err(Error::Format {
                offset: 12,
                msg: format!("{}: expected an N×a×a image, found {:?}", record.path, image.shape()),
            });
        }
        Ok(InterfacePairSample {
            complex_id: record.complex_id.clone(),
            model_id: record.model_id.clone(),
            native: record.label == 1,
            capri: record.capri,
            image,
            energies: record.energies.iter().map(|&e| e as f32).collect(),
        })
    }

    /// Every sample, checking they share one image shape.
    pub fn load_all(&self) -> Result<Vec<InterfacePairSample>> {
        let samples = self
            .records
            .iter()
            .map(|r| self.read_sample(r))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = samples.first() {
            for (s, r) in samples.iter().zip(&self.records) {
                if s.image.shape() != first.image.shape() || s.energies.len() != first.energies.len() {
                    return Err(Error::Manifest(format!(
                        "{}: shape {:?} with {} energies differs from {:?} with {}",
                        r.path,
                        s.image.shape(),
                        s.energies.len(),
                        first.image.shape(),
                        first.energies.len()
                    )));
                }
            }
        }
        Ok(samples)
    }
}

/// Writes a container; the manifest appears only on [`ContainerWriter::finish`].
pub struct ContainerWriter {
    root: PathBuf,
    records: Vec<ManifestRecord>,
    seen: HashSet<(String, String)>,
}

impl ContainerWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let dir = root.join(TENSOR_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            root,
            records: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn write_sample(&mut self, sample: &InterfacePairSample) -> Result<&ManifestRecord> {
        if !self
            .seen
            .insert((sample.complex_id.clone(), sample.model_id.clone()))
        {
            return Err(Error::Manifest(format!(
                "duplicate sample ({}, {})",
                sample.complex_id, sample.model_id
            )));
        }
        let rel = format!("{TENSOR_DIR}/{:06}.tns", self.records.len());
        tensor_file::write(&self.root.join(&rel), &sample.image)?;
        self.records.push(ManifestRecord {
            complex_id: sample.complex_id.clone(),
            model_id: sample.model_id.clone(),
            label: u8::from(sample.native),
            capri: sample.capri,
            path: rel,
            energies: sample.energies.iter().map(|&e| f64::from(e)).collect(),
        });
        Ok(self.records.last().unwrap())
    }

    pub fn finish(self) -> Result<DatasetContainer> {
        let path = self.root.join(MANIFEST);
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("manifest records serialize");
            writeln!(file, "{line}").map_err(|e| Error::io(&tmp, e))?;
        }
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(DatasetContainer {
            root: self.root,
            records: self.records,
        })
    }
}

/// Writes `samples` as a new container at `root`.
pub fn write_container<'a>(
    root: impl AsRef<Path>,
    samples: impl IntoIterator<Item = &'a InterfacePairSample>,
) -> Result<DatasetContainer> {
    let mut w = ContainerWriter::create(root)?;
    for s in samples {
        w.write_sample(s)?;
    }
    w.finish()
}
