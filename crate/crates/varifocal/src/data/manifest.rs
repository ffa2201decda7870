//! Manifest CSV: the on-disk index of a dataset.
//!
//! Columns (header required): `case_id,sex,image_path,type_label,polarity_label`.
//! Image paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use super::{CaseRecord, Dataset, Sample, Sex};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub case_id: String,
    pub sex: Sex,
    pub image_path: String,
    pub type_label: usize,
    pub polarity_label: usize,
}

const HEADER: [&str; 5] = ["case_id", "sex", "image_path", "type_label", "polarity_label"];

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.case_id.as_str(),
            r.sex.as_str(),
            r.image_path.as_str(),
            &r.type_label.to_string(),
            &r.polarity_label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Data(format!(
            "manifest header must be {HEADER:?}, got {headers:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(ManifestRow {
            case_id: record[0].to_string(),
            sex: Sex::parse(&record[1])?,
            image_path: record[2].to_string(),
            type_label: record[3]
                .parse()
                .map_err(|e| Error::Data(format!("bad type label {:?}: {e}", &record[3])))?,
            polarity_label: record[4]
                .parse()
                .map_err(|e| Error::Data(format!("bad polarity label {:?}: {e}", &record[4])))?,
        });
    }
    Ok(rows)
}

/// Opens a dataset from a manifest, grouping rows into cases in first-seen
/// order. Images load lazily on access.
pub fn open_dataset(manifest_path: &Path) -> Result<Dataset> {
    let rows = read_manifest(manifest_path)?;
    if rows.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut cases: Vec<CaseRecord> = Vec::new();
    for row in rows {
        let sample = Sample::from_file(
            base.join(&row.image_path),
            row.type_label,
            row.polarity_label,
            row.case_id.clone(),
        );
        match cases.iter_mut().find(|c| c.case_id == row.case_id) {
            Some(case) => {
                if case.sex != row.sex {
                    return Err(Error::Data(format!(
                        "case {} listed with two sexes",
                        row.case_id
                    )));
                }
                case.samples.push(sample);
            }
            None => cases.push(CaseRecord {
                case_id: row.case_id,
                sex: row.sex,
                samples: vec![sample],
            }),
        }
    }
    Dataset::from_cases(cases)
}

/// Writes a generated corpus to `dir`: one PNG per sample under
/// `<case_id>/` plus `manifest.csv`. Returns the manifest path.
pub fn write_corpus(dir: &Path, cases: &[CaseRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for case in cases {
        let case_dir = dir.join(&case.case_id);
        std::fs::create_dir_all(&case_dir)?;
        for (i, sample) in case.samples.iter().enumerate() {
            let rel = format!("{}/chr_{i:02}.png", case.case_id);
            sample.image()?.save_png(&dir.join(&rel))?;
            rows.push(ManifestRow {
                case_id: case.case_id.clone(),
                sex: case.sex,
                image_path: rel,
                type_label: sample.type_label,
                polarity_label: sample.polarity_label,
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
