//! Dataset manifests: CSV rows tying subjects to volume files, ages, and
//! train/test membership.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DataResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> DataResult<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid {
                what: "split",
                detail: format!("expected train or test, got {other:?}"),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub volume_path: PathBuf,
    pub age_years: f64,
    pub cohort: String,
    pub split: Split,
}

const HEADER: [&str; 5] = ["subject_id", "volume_path", "age_years", "cohort", "split"];

/// Writes entries as CSV with the fixed five-column header. Paths are
/// written exactly as stored.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> DataResult<()> {
    let io = |e: csv::Error| DataError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(HEADER).map_err(io)?;
    for e in entries {
        w.write_record([
            e.subject_id.as_str(),
            &e.volume_path.display().to_string(),
            &format!("{}", e.age_years),
            e.cohort.as_str(),
            e.split.label(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads and validates a manifest: header and field shapes, unique subject
/// ids, and existing volume files. Relative volume paths resolve against
/// the manifest's directory and come back resolved.
pub fn read_manifest(path: &Path) -> DataResult<Vec<ManifestEntry>> {
    let parse = |detail: String| DataError::Parse {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| parse(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| parse(e.to_string()))?;
        if i == 0 {
            if record.iter().ne(HEADER) {
                return Err(parse(format!(
                    "header must be {}, got {:?}",
                    HEADER.join(","),
                    record.iter().collect::<Vec<_>>()
                )));
            }
            continue;
        }
        let row = i + 1;
        if record.len() != HEADER.len() {
            return Err(parse(format!("row {row}: expected 5 fields, got {}", record.len())));
        }
        let subject_id = record[0].to_string();
        if !seen.insert(subject_id.clone()) {
            return Err(parse(format!("row {row}: duplicate subject_id {subject_id:?}")));
        }
        let raw_path = PathBuf::from(&record[1]);
        let volume_path = if raw_path.is_absolute() {
            raw_path
        } else {
            base.join(raw_path)
        };
        if !volume_path.is_file() {
            return Err(parse(format!(
                "row {row}: volume file {} not found",
                volume_path.display()
            )));
        }
        let age_years: f64 = record[2]
            .parse()
            .map_err(|_| parse(format!("row {row}: bad age_years {:?}", &record[2])))?;
        if !age_years.is_finite() || age_years < 0.0 {
            return Err(parse(format!("row {row}: age_years {age_years} out of range")));
        }
        entries.push(ManifestEntry {
            subject_id,
            volume_path,
            age_years,
            cohort: record[3].to_string(),
            split: Split::parse(&record[4])?,
        });
    }
    Ok(entries)
}

/// Reassigns splits: a seeded shuffle picks `floor(n * train_frac)`
/// subjects for training and the rest for testing. Entry order is
/// preserved; only the labels change.
pub fn split_manifest(
    entries: &[ManifestEntry],
    train_frac: f64,
    seed: u64,
) -> DataResult<Vec<ManifestEntry>> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::Invalid {
            what: "train_frac",
            detail: format!("{train_frac} not in (0, 1)"),
        });
    }
    if entries.len() < 2 {
        return Err(DataError::Invalid {
            what: "manifest",
            detail: format!("need at least 2 subjects to split, got {}", entries.len()),
        });
    }
    let n = entries.len();
    let n_train = (n as f64 * train_frac).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = entries.to_vec();
    for (rank, &idx) in order.iter().enumerate() {
        out[idx].split = if rank < n_train {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(out)
}
