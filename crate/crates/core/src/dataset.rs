//! On-disk training corpora: `<root>/<group>/<split>/<id>.png` plus a
//! `labels.jsonl` sidecar at the root.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::Gender;
use crate::synth::{SyntheticSample, SyntheticSplit};
use crate::topology::{PromptGender, TopologyGroup};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {reason}")]
    BadLabels { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Directory name of the sample's group.
    pub group: String,
    pub split: Split,
    /// Relative to the dataset root.
    pub path: String,
    #[serde(default)]
    pub topology_group: Option<TopologyGroup>,
    /// 1-based class on a scale of `num_scales` classes.
    #[serde(default)]
    pub skintone_scale: Option<u8>,
    #[serde(default)]
    pub num_scales: Option<u8>,
    #[serde(default)]
    pub gender: Option<Gender>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('.') && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c))
}

/// Appends samples to a dataset directory.
pub struct DatasetWriter {
    root: PathBuf,
    labels: BufWriter<File>,
    written: usize,
}

impl DatasetWriter {
    /// Opens `root` for appending, creating it if needed.
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let lp = root.join(LABELS_FILE);
        let f = fs::OpenOptions::new().create(true).append(true).open(&lp).map_err(io_err(&lp))?;
        Ok(Self { root: root.to_path_buf(), labels: BufWriter::new(f), written: 0 })
    }

    /// Writes the image and its label line. `record.path` is filled in.
    pub fn add(&mut self, image: &RgbImage, mut record: DatasetRecord) -> Result<DatasetRecord, DatasetError> {
        if !valid_name(&record.group) || !valid_name(&record.id) {
            return Err(DatasetError::InvalidRecord(format!("group {:?} / id {:?}", record.group, record.id)));
        }
        let rel = format!("{}/{}/{}.png", record.group, record.split.dir(), record.id);
        let path = self.root.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err(&path))?;
        image
            .save(&path)
            .map_err(|e| DatasetError::BadImage { path: path.clone(), reason: e.to_string() })?;
        record.path = rel;
        let line = serde_json::to_string(&record).expect("record serializes");
        let lp = self.root.join(LABELS_FILE);
        writeln!(self.labels, "{line}").map_err(io_err(&lp))?;
        self.written += 1;
        Ok(record)
    }

    pub fn finish(mut self) -> Result<usize, DatasetError> {
        let lp = self.root.join(LABELS_FILE);
        self.labels.flush().map_err(io_err(&lp))?;
        Ok(self.written)
    }
}

fn gender_of(g: PromptGender) -> Gender {
    match g {
        PromptGender::Male => Gender::Male,
        PromptGender::Female => Gender::Female,
    }
}

/// Writes a synthetic split. Topology corpora (`num_scales == 10`) are
/// grouped by topology group, class corpora by class index.
pub fn write_synthetic(root: &Path, split: &SyntheticSplit, num_scales: u8) -> Result<usize, DatasetError> {
    let mut w = DatasetWriter::open(root)?;
    for (which, samples) in [(Split::Train, &split.train), (Split::Test, &split.test)] {
        for (i, s) in samples.iter().enumerate() {
            w.add(&s.image, synthetic_record(s, which, i, num_scales))?;
        }
    }
    w.finish()
}

fn synthetic_record(s: &SyntheticSample, split: Split, i: usize, num_scales: u8) -> DatasetRecord {
    let group = if num_scales == 10 { s.spec.group.slug().to_string() } else { format!("class-{}", s.scale.index()) };
    DatasetRecord {
        id: format!("{i:06}"),
        group,
        split,
        path: String::new(),
        topology_group: Some(s.spec.group),
        skintone_scale: Some(s.scale.index()),
        num_scales: Some(num_scales),
        gender: Some(gender_of(s.spec.gender)),
    }
}

/// A loaded label sidecar. Images are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let lp = root.join(LABELS_FILE);
        let f = File::open(&lp).map_err(io_err(&lp))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&lp))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(&line)
                .map_err(|e| DatasetError::BadLabels { path: lp.clone(), line: i + 1, reason: e.to_string() })?;
            records.push(r);
        }
        Ok(Self { root: root.to_path_buf(), records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn image(&self, record: &DatasetRecord) -> Result<RgbImage, DatasetError> {
        let path = self.root.join(&record.path);
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|e| DatasetError::BadImage { path, reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::three_class_standin;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = three_class_standin(4, 2, 48, 1);
        assert_eq!(write_synthetic(dir.path(), &split, 3).unwrap(), 6);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.split(Split::Train).count(), 4);
        let r = &ds.records[4];
        assert_eq!(r.path, format!("{}/test/000000.png", r.group));
        assert_eq!(ds.image(r).unwrap().as_raw(), split.test[0].image.as_raw());
        assert_eq!(r.skintone_scale, Some(split.test[0].scale.index()));
    }

    #[test]
    fn rejects_path_like_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::open(dir.path()).unwrap();
        let rec = DatasetRecord {
            id: "../x".into(),
            group: "g".into(),
            split: Split::Train,
            path: String::new(),
            topology_group: None,
            skintone_scale: None,
            num_scales: None,
            gender: None,
        };
        assert!(w.add(&RgbImage::new(4, 4), rec).is_err());
    }
}
