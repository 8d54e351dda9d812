//! Database manifests: CSV files with header `image_path,mos,group_id`.
//!
//! Relative image paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["image_path", "mos", "group_id"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mos: f64,
    pub group_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub database_id: String,
    /// Directory relative image paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    /// `(min, max)` of the MOS column.
    pub fn score_range(&self) -> Option<(f64, f64)> {
        let mut it = self.entries.iter().map(|e| e.mos);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            database_id: self.database_id.clone(),
            root: self.root.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }

    pub fn groups(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.group_id.as_str()).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(HEADER).map_err(csv_err)?;
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Database id implied by a manifest path: the file stem, or the parent
/// directory name for files called `manifest.csv`.
pub fn database_id_for(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("db");
    if stem == "manifest" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return dir.to_owned();
        }
    }
    stem.to_owned()
}

/// Parses manifest text. Paths are not checked here.
pub fn parse_manifest(text: &str, database_id: &str, root: &Path, source: &Path) -> Result<DatasetManifest> {
    let fail = |reason: String| Error::Manifest { path: source.to_path_buf(), reason };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| fail(format!("unreadable header: {e}")))?.clone();
    let mut cols = [0usize; 3];
    for (k, name) in HEADER.iter().enumerate() {
        cols[k] = headers.iter().position(|h| h.trim() == *name).ok_or_else(|| {
            fail(format!(
                "header is missing column `{name}`; expected `{}`, found `{}`",
                HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ))
        })?;
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| rec.get(cols[k]).map(str::trim).unwrap_or("");
        let image_path = field(0).to_owned();
        if image_path.is_empty() {
            return Err(fail(format!("line {line}: empty image_path")));
        }
        let mos: f64 = field(1).parse().map_err(|_| fail(format!("line {line}: mos `{}` is not a number", field(1))))?;
        if !mos.is_finite() {
            return Err(fail(format!("line {line}: mos must be finite")));
        }
        let group_id = field(2).to_owned();
        if group_id.is_empty() {
            return Err(fail(format!("line {line}: empty group_id")));
        }
        if !seen.insert(image_path.clone()) {
            return Err(fail(format!("line {line}: duplicate image path `{image_path}`")));
        }
        entries.push(ManifestEntry { image_path, mos, group_id });
    }
    if entries.is_empty() {
        return Err(fail("manifest has no entries".into()));
    }
    Ok(DatasetManifest { database_id: database_id.to_owned(), root: root.to_path_buf(), entries })
}

/// Reads a manifest and checks that every image path exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, &database_id_for(path), &root, path)?;
    for e in &manifest.entries {
        let p = manifest.resolve(e);
        if !p.is_file() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                reason: format!("image `{}` not found", p.display()),
            });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text, "t", Path::new("."), Path::new("t.csv"))
    }

    #[test]
    fn three_rows() {
        let m = parse("image_path,mos,group_id\na.ppm,1.5,g1\nb.ppm,2,g1\nc.ppm,3.25,g2\n").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.score_range(), Some((1.5, 3.25)));
        assert_eq!(m.groups().len(), 2);
    }

    #[test]
    fn missing_column_is_a_header_error() {
        let err = parse("image_path,group_id\na.ppm,g\n").unwrap_err().to_string();
        assert!(err.contains("header") && err.contains("mos"), "{err}");
    }

    #[test]
    fn bad_rows_name_their_line() {
        let err = parse("image_path,mos,group_id\na.ppm,1,g\nb.ppm,x,g\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = parse("image_path,mos,group_id\na.ppm,1,g\na.ppm,2,g\n").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        assert!(parse("image_path,mos,group_id\na.ppm,NaN,g\n").is_err());
        assert!(parse("image_path,mos,group_id\n").is_err());
    }

    #[test]
    fn unresolvable_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.csv");
        std::fs::write(&path, "image_path,mos,group_id\nmissing.ppm,1,g\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("missing.ppm"), "{err}");
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("koniq");
        std::fs::create_dir(&sub).unwrap();
        let m = DatasetManifest {
            database_id: "koniq".into(),
            root: sub.clone(),
            entries: (0..4)
                .map(|i| {
                    let name = format!("img, {i}.ppm");
                    std::fs::write(sub.join(&name), b"").unwrap();
                    ManifestEntry { image_path: name, mos: 0.1 * i as f64 + 1.0 / 3.0, group_id: format!("s{}", i / 2) }
                })
                .collect(),
        };
        let path = sub.join("manifest.csv");
        m.write(&path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }
}
