//! Dataset manifests: UTF-8 CSV with header `image,label[,roi]`, paths
//! relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest {path} row {row}: {message}")]
    MalformedRow {
        path: String,
        row: usize,
        message: String,
    },
    #[error("manifest {path} row {row}: referenced file {missing} does not exist")]
    DanglingPath {
        path: String,
        row: usize,
        missing: String,
    },
    #[error("manifest {path}: labels {labels:?} are not a contiguous 0..K-1 set")]
    NonContiguousLabels { path: String, labels: Vec<usize> },
    #[error("manifest {path}: no entries")]
    Empty { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub class_label: usize,
    pub roi_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
}

/// Parses a manifest in file order. Shuffling is a training-time concern and
/// is never applied here.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pstr = path.display().to_string();
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i, l.trim()),
            None => return Err(ManifestError::Empty { path: pstr }),
        }
    };
    let has_roi = match header.1 {
        "image,label" => false,
        "image,label,roi" => true,
        other => {
            return Err(ManifestError::MalformedRow {
                path: pstr,
                row: header.0 + 1,
                message: format!("bad header {other:?}, expected image,label[,roi]"),
            })
        }
    };

    let mut entries = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != if has_roi { 3 } else { 2 } {
            return Err(ManifestError::MalformedRow {
                path: pstr,
                row,
                message: format!("expected {} fields, got {}", if has_roi { 3 } else { 2 }, fields.len()),
            });
        }
        let label: usize = fields[1].parse().map_err(|_| ManifestError::MalformedRow {
            path: pstr.clone(),
            row,
            message: format!("label {:?} is not a non-negative integer", fields[1]),
        })?;
        let image_path = root.join(fields[0]);
        if !image_path.is_file() {
            return Err(ManifestError::DanglingPath {
                path: pstr,
                row,
                missing: image_path.display().to_string(),
            });
        }
        let roi_path = if has_roi && !fields[2].is_empty() {
            let rp = root.join(fields[2]);
            if !rp.is_file() {
                return Err(ManifestError::DanglingPath {
                    path: pstr,
                    row,
                    missing: rp.display().to_string(),
                });
            }
            Some(rp)
        } else {
            None
        };
        entries.push(ManifestEntry {
            image_path,
            class_label: label,
            roi_path,
        });
    }
    if entries.is_empty() {
        return Err(ManifestError::Empty { path: pstr });
    }

    let labels: BTreeSet<usize> = entries.iter().map(|e| e.class_label).collect();
    let num_classes = *labels.iter().max().unwrap() + 1;
    if labels.len() != num_classes {
        return Err(ManifestError::NonContiguousLabels {
            path: pstr,
            labels: labels.into_iter().collect(),
        });
    }
    Ok(DatasetManifest {
        root,
        entries,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::File;
    use std::io::Write;

    fn touch(dir: &Path, name: &str) {
        let mut f = File::create(dir.join(name)).unwrap();
        // minimal valid 1x1 PGM so downstream loads also work
        f.write_all(b"P5\n1 1\n255\n\x00").unwrap();
    }

    #[test]
    fn parses_three_rows_two_classes() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a.pgm", "b.pgm", "c.pgm"] {
            touch(dir.path(), n);
        }
        let mpath = dir.path().join("manifest.csv");
        fs::write(&mpath, "image,label\na.pgm,0\nb.pgm,1\nc.pgm,0\n").unwrap();
        let m = read_manifest(&mpath).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.num_classes, 2);
        assert_eq!(m.entries[1].class_label, 1);
    }

    #[test]
    fn parses_roi_column() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.pgm");
        touch(dir.path(), "a_roi.pgm");
        touch(dir.path(), "b.pgm");
        let mpath = dir.path().join("manifest.csv");
        fs::write(&mpath, "image,label,roi\na.pgm,0,a_roi.pgm\nb.pgm,1,\n").unwrap();
        let m = read_manifest(&mpath).unwrap();
        assert!(m.entries[0].roi_path.is_some());
        assert!(m.entries[1].roi_path.is_none());
    }

    #[test]
    fn dangling_path_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.csv");
        fs::write(&mpath, "image,label\nmissing.pgm,0\n").unwrap();
        let err = read_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("missing.pgm"));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.pgm");
        let mpath = dir.path().join("manifest.csv");
        fs::write(&mpath, "image,label\na.pgm,0\na.pgm,zebra\n").unwrap();
        let err = read_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn rejects_non_contiguous_labels() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.pgm");
        touch(dir.path(), "b.pgm");
        let mpath = dir.path().join("manifest.csv");
        fs::write(&mpath, "image,label\na.pgm,0\nb.pgm,2\n").unwrap();
        assert!(matches!(
            read_manifest(&mpath),
            Err(ManifestError::NonContiguousLabels { .. })
        ));
    }

    #[test]
    fn parse_is_pure() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.pgm");
        let mpath = dir.path().join("manifest.csv");
        fs::write(&mpath, "image,label\na.pgm,0\n").unwrap();
        let a = read_manifest(&mpath).unwrap();
        let b = read_manifest(&mpath).unwrap();
        assert_eq!(a.entries, b.entries);
    }
}
