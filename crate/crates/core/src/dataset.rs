//! Dataset manifests and the sidecar files written next to them.
//!
//! A dataset directory holds `manifest.csv` (one row per paired image),
//! `masks.csv` (SUVR masks per PET image) and `labels.csv` (ground-truth
//! amyloid status). Paths inside these files are relative to the directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_volume, xvol};
use crate::metrics::RegionMasks;
use crate::phantom::PhantomSample;
use crate::volume::PairedSample;

pub const MANIFEST_HEADER: [&str; 4] = ["subject_id", "mri_path", "pet_path", "abeta_ratio"];
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MASKS_FILE: &str = "masks.csv";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub mri_path: String,
    pub pet_path: String,
    pub abeta_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if !e.is_io_error() {
        return Error::format(path, e.to_string());
    }
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => unreachable!("checked is_io_error"),
    }
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let got: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
    if got != header {
        return Err(Error::format(path, format!("expected header {}, got {}", header.join(","), got.join(","))));
    }
    reader.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let rows: Vec<ManifestRow> = read_rows(path, &MANIFEST_HEADER)?;
        if rows.is_empty() {
            return Err(Error::Data(format!("{}: manifest has no rows", path.display())));
        }
        for r in &rows {
            if !(r.abeta_ratio.is_finite() && r.abeta_ratio > 0.0) {
                return Err(Error::format(path, format!("subject {}: abeta_ratio must be positive", r.subject_id)));
            }
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Image count per subject, ordered by subject id.
    pub fn subject_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry(r.subject_id.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn load(&self, row: &ManifestRow) -> Result<PairedSample> {
        let mri = read_volume(&self.resolve(&row.mri_path))?;
        let pet = read_volume(&self.resolve(&row.pet_path))?;
        PairedSample::new(row.subject_id.clone(), mri, pet, row.abeta_ratio)
            .map_err(|e| Error::Data(format!("subject {}: {e}", row.subject_id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub pet_path: String,
    pub target_mask: String,
    pub cerebellum_mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub subject_id: String,
    pub pet_path: String,
    pub mcsuvr: f64,
    pub amyloid_positive: bool,
}

/// SUVR masks keyed by manifest `pet_path`.
#[derive(Clone, Debug, Default)]
pub struct MaskIndex {
    base_dir: PathBuf,
    rows: BTreeMap<String, MaskRow>,
}

impl MaskIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let rows: Vec<MaskRow> = read_rows(path, &["pet_path", "target_mask", "cerebellum_mask"])?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, rows: rows.into_iter().map(|r| (r.pet_path.clone(), r)).collect() })
    }

    pub fn load(&self, pet_path: &str) -> Result<RegionMasks> {
        let row = self
            .rows
            .get(pet_path)
            .ok_or_else(|| Error::Data(format!("no masks listed for {pet_path}")))?;
        let target = read_volume(&self.base_dir.join(&row.target_mask))?;
        let cereb = read_volume(&self.base_dir.join(&row.cerebellum_mask))?;
        RegionMasks::from_volumes(&target, &cereb)
    }
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>> {
    let rows: Vec<LabelRow> = read_rows(path, &["subject_id", "pet_path", "mcsuvr", "amyloid_positive"])?;
    Ok(rows.into_iter().map(|r| (r.pet_path.clone(), r)).collect())
}

/// Writes volumes, masks, manifest and sidecars into `dir`; returns the
/// manifest path.
pub fn write_dataset(samples: &[PhantomSample], dir: &Path) -> Result<PathBuf> {
    for sub in ["volumes", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut image_index: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        let id = s.sample.subject_id.as_str();
        let k = image_index.entry(id).or_insert(0);
        let mri_path = format!("volumes/{id}_{k}_mri.xvol");
        let pet_path = format!("volumes/{id}_{k}_pet.xvol");
        xvol::write(&dir.join(&mri_path), &s.sample.mri)?;
        xvol::write(&dir.join(&pet_path), &s.sample.pet)?;
        let target_mask = format!("masks/{id}_target.xvol");
        let cerebellum_mask = format!("masks/{id}_cerebellum.xvol");
        if *k == 0 {
            let (t, c) = s.mask_volumes();
            xvol::write(&dir.join(&target_mask), &t)?;
            xvol::write(&dir.join(&cerebellum_mask), &c)?;
        }
        *k += 1;
        manifest.push(ManifestRow {
            subject_id: id.to_owned(),
            mri_path,
            pet_path: pet_path.clone(),
            abeta_ratio: s.sample.abeta_ratio,
        });
        masks.push(MaskRow { pet_path: pet_path.clone(), target_mask, cerebellum_mask });
        labels.push(LabelRow {
            subject_id: id.to_owned(),
            pet_path,
            mcsuvr: s.clean_mcsuvr,
            amyloid_positive: s.amyloid_positive,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_rows(&path, &manifest)?;
    write_rows(&dir.join(MASKS_FILE), &masks)?;
    write_rows(&dir.join(LABELS_FILE), &labels)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomSpec};

    #[test]
    fn dataset_round_trip() {
        let spec = PhantomSpec { shape: [16; 3], n_subjects: 3, images_per_subject: 2, ..PhantomSpec::default() };
        let samples = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&samples, dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "subject_id,mri_path,pet_path,abeta_ratio");
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.rows.len(), samples.len());
        for (row, s) in m.rows.iter().zip(&samples) {
            assert_eq!(row.abeta_ratio, s.sample.abeta_ratio);
            assert_eq!(m.load(row).unwrap(), s.sample);
        }
        let masks = MaskIndex::read(&dir.path().join(MASKS_FILE)).unwrap();
        assert_eq!(masks.load(&m.rows[3].pet_path).unwrap(), samples[3].masks);
        let labels = read_labels(&dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(labels[&m.rows[0].pet_path].amyloid_positive, samples[0].amyloid_positive);
        assert_eq!(m.subject_counts().values().copied().collect::<Vec<_>>(), vec![2, 2, 2]);
    }

    #[test]
    fn rejects_malformed_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "subject,mri,pet,abeta\na,b,c,0.1\n").unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::Format { .. })));
        fs::write(&p, "subject_id,mri_path,pet_path,abeta_ratio\na,b,c,oops\n").unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::Format { .. })));
        fs::write(&p, "subject_id,mri_path,pet_path,abeta_ratio\na,b,c,-1\n").unwrap();
        assert!(Manifest::read(&p).is_err());
        assert!(matches!(Manifest::read(&dir.path().join("none.csv")), Err(Error::Io { .. })));
    }
}
