//! Sample records and manifests shared by the label, model and pipeline stages.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Grade;

/// One labeled image. `source_id` names the original sample; it differs from
/// `id` only for copies introduced by resampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source_id: String,
    pub image_path: PathBuf,
    pub grade: Grade,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image_path: impl Into<PathBuf>, grade: Grade) -> Self {
        let id = id.into();
        Self {
            source_id: id.clone(),
            id,
            image_path: image_path.into(),
            grade,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Full,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub split_tag: SplitTag,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, split_tag: SplitTag, provenance: impl Into<String>) -> Result<Self> {
        let manifest = Self {
            records,
            split_tag,
            provenance: provenance.into(),
        };
        manifest.check_unique_ids()?;
        Ok(manifest)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-grade record counts; grades without records are absent.
    pub fn class_counts(&self) -> BTreeMap<Grade, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.grade).or_insert(0) += 1;
        }
        counts
    }

    pub fn grades(&self) -> Vec<Grade> {
        self.records.iter().map(|r| r.grade).collect()
    }

    /// Writes `id,source_id,image_path,grade`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["id", "source_id", "image_path", "grade"])?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                r.source_id.as_str(),
                &r.image_path.to_string_lossy(),
                &r.grade.value().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, split_tag: SplitTag) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |detail: String| Error::MalformedCsv {
            path: path.to_path_buf(),
            detail,
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            if row.len() != 4 {
                return Err(malformed(format!("row {} has {} fields", line + 1, row.len())));
            }
            let grade: i64 = row[3]
                .trim()
                .parse()
                .map_err(|_| malformed(format!("row {}: bad grade `{}`", line + 1, &row[3])))?;
            records.push(SampleRecord {
                id: row[0].to_string(),
                source_id: row[1].to_string(),
                image_path: PathBuf::from(&row[2]),
                grade: Grade::new(grade)?,
            });
        }
        Self::new(records, split_tag, format!("manifest {}", path.display()))
    }
}
