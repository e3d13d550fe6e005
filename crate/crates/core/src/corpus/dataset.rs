use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Taxonomy};
use crate::util::parse_header_line;

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub id: String,
    pub description: String,
    #[serde(rename = "label")]
    pub leaf_label: String,
    pub path: Vec<String>,
}

impl ProductRecord {
    /// Second-level category, i.e. the child of the root on this record's path.
    pub fn level2(&self) -> Option<&str> {
        self.path.get(1).map(String::as_str)
    }
}

/// Wire form: `path` may be omitted and is then completed from the taxonomy.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    description: String,
    label: String,
    #[serde(default)]
    path: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        })
    }
}

impl FromStr for SplitRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitRole::Train),
            "test" => Ok(SplitRole::Test),
            other => Err(format!("unknown split role '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub records: Vec<ProductRecord>,
    pub role: SplitRole,
    pub source_name: String,
}

impl DatasetSplit {
    /// Builds a split after checking that ids are unique.
    pub fn new(
        records: Vec<ProductRecord>,
        role: SplitRole,
        source_name: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            records,
            role,
            source_name: source_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProductRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Checks a record against the taxonomy, completing a missing path.
pub fn validate_record(
    id: String,
    description: String,
    label: String,
    path: Option<Vec<String>>,
    taxonomy: &Taxonomy,
) -> Result<ProductRecord, CorpusError> {
    if description.trim().is_empty() {
        return Err(CorpusError::EmptyDescription(id));
    }
    let Some(expected) = taxonomy.path_to(&label) else {
        return Err(CorpusError::UnknownLabel { id, label });
    };
    let path = match path {
        None => expected.to_vec(),
        Some(p) if p.is_empty() => expected.to_vec(),
        Some(p) => {
            if p != expected {
                return Err(CorpusError::PathMismatch {
                    id,
                    path: p.join(" > "),
                    expected: expected.join(" > "),
                });
            }
            p
        }
    };
    Ok(ProductRecord {
        id,
        description,
        leaf_label: label,
        path,
    })
}

/// Read a JSONL dataset, validating every record. Record order follows the file.
pub fn load_dataset(
    path: &Path,
    taxonomy: &Taxonomy,
    role: SplitRole,
) -> Result<DatasetSplit, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(BufReader::new(file), taxonomy, role, name)
}

pub fn read_dataset<R: BufRead>(
    reader: R,
    taxonomy: &Taxonomy,
    role: SplitRole,
    source_name: impl Into<String>,
) -> Result<DatasetSplit, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || (idx == 0 && parse_header_line(&line).is_some()) {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = validate_record(raw.id, raw.description, raw.label, raw.path, taxonomy)?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(DatasetSplit {
        records,
        role,
        source_name: source_name.into(),
    })
}

/// Write records as JSONL, one per line, in split order.
pub fn write_dataset<W: Write>(split: &DatasetSplit, mut out: W) -> std::io::Result<()> {
    for r in &split.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    write_dataset(split, &mut buf).map_err(|e| CorpusError::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| CorpusError::io(path, e))
}
