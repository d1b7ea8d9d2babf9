//! Test-set evaluation: per-image similarity, SUVR agreement and amyloid
//! classification of generated PET.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{LabelRow, Manifest, ManifestRow, MaskIndex};
use crate::error::{Error, Result};
use crate::io::xvol;
use crate::metrics::{
    accuracy_f1, classify_amyloid, mcsuvr, mse, pearson, psnr_from_mse, ssim3d, to_display_range, MeanStd,
    SsimWindow, AMYLOID_THRESHOLD, DISPLAY_MAX,
};
use crate::train::PetSynthesizer;
use crate::volume::{normalize_intensity, Volume};

pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GENERATED_DIR: &str = "generated";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub subject_id: String,
    pub pet_path: String,
    pub abeta_ratio: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
    pub mcsuvr_true: Option<f64>,
    pub mcsuvr_generated: Option<f64>,
    /// Reference label: the label file when given, else the true PET.
    pub positive_reference: Option<bool>,
    pub positive_true_pet: Option<bool>,
    pub positive_generated: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_images: usize,
    pub ssim: MeanStd,
    pub psnr: MeanStd,
    pub mse: MeanStd,
    /// MCSUVR of generated against true PET.
    pub suvr_correlation: Option<Correlation>,
    /// Threshold classification of generated PET against the reference labels.
    pub generated_classification: Option<Classification>,
    /// Threshold classification of the true PET against the label file.
    pub ground_truth_classification: Option<Classification>,
    pub threshold: f64,
    pub model: String,
    pub conditioning: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageRow>,
    pub summary: EvalSummary,
}

/// Where SUVR inputs come from, both keyed by manifest `pet_path`.
#[derive(Default)]
pub struct SuvrInputs<'a> {
    pub masks: Option<&'a MaskIndex>,
    pub labels: Option<&'a BTreeMap<String, LabelRow>>,
}

/// Per-image metrics of one generated volume against its reference, both in
/// scanner units; similarity is measured on the display range of the
/// training PET normalization.
pub fn image_metrics(generated: &Volume, truth: &Volume, pet_range: crate::volume::Range) -> Result<(f64, f64, f64)> {
    let a = to_display_range(&normalize_intensity(generated, pet_range)?)?;
    let b = to_display_range(&normalize_intensity(truth, pet_range)?)?;
    let m = mse(&a, &b)?;
    let s = ssim3d(&a, &b, &SsimWindow::default(), DISPLAY_MAX)?;
    Ok((s, psnr_from_mse(m, DISPLAY_MAX), m))
}

fn file_stem(pet_path: &str) -> String {
    let name = Path::new(pet_path).file_name().and_then(|n| n.to_str()).unwrap_or(pet_path);
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.rsplit_once('.').map(|(s, _)| s)).unwrap_or(name);
    stem.to_owned()
}

fn classification(pred: &[Option<bool>], truth: &[Option<bool>]) -> Result<Option<Classification>> {
    let pairs: Vec<(bool, bool)> = pred.iter().zip(truth).filter_map(|(p, t)| Some(((*p)?, (*t)?))).collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let (p, t): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
    let (accuracy, f1) = accuracy_f1(&p, &t)?;
    Ok(Some(Classification { accuracy, f1 }))
}

/// Generates PET for every row and scores it. Generated volumes are written
/// to `out_dir/generated` when `out_dir` is given.
pub fn evaluate_testset(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    rows: &[&ManifestRow],
    suvr: &SuvrInputs<'_>,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let synth = PetSynthesizer::from_checkpoint(ckpt)?;
    if let Some(dir) = out_dir {
        let g = dir.join(GENERATED_DIR);
        fs::create_dir_all(&g).map_err(|e| Error::io(&g, e))?;
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let sample = manifest.load(row)?;
        let generated = synth.generate(&sample.mri, sample.abeta_ratio)?;
        let (ssim, psnr, mse) = image_metrics(&generated, &sample.pet, synth.stats().pet)?;
        if let Some(dir) = out_dir {
            let p = dir.join(GENERATED_DIR).join(format!("{}_generated.xvol", file_stem(&row.pet_path)));
            xvol::write(&p, &generated)?;
        }
        let (mut mcsuvr_true, mut mcsuvr_generated) = (None, None);
        if let Some(masks) = suvr.masks {
            let m = masks.load(&row.pet_path)?;
            mcsuvr_true = Some(mcsuvr(&sample.pet, &m)?);
            mcsuvr_generated = Some(mcsuvr(&generated, &m)?);
        }
        let above = |v: Option<f64>| v.map(|v| classify_amyloid(&[v], AMYLOID_THRESHOLD)[0]);
        let positive_true_pet = above(mcsuvr_true);
        let label = suvr.labels.and_then(|l| l.get(&row.pet_path)).map(|l| l.amyloid_positive);
        out.push(ImageRow {
            subject_id: row.subject_id.clone(),
            pet_path: row.pet_path.clone(),
            abeta_ratio: row.abeta_ratio,
            ssim,
            psnr,
            mse,
            mcsuvr_true,
            mcsuvr_generated,
            positive_reference: label.or(positive_true_pet),
            positive_true_pet,
            positive_generated: above(mcsuvr_generated),
        });
    }
    let col = |f: fn(&ImageRow) -> f64| out.iter().map(f).collect::<Vec<_>>();
    let pairs: Vec<(f64, f64)> = out.iter().filter_map(|r| Some((r.mcsuvr_true?, r.mcsuvr_generated?))).collect();
    let suvr_correlation = if pairs.len() >= 3 {
        let (t, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        pearson(&t, &g).ok().map(|(r, p_value)| Correlation { r, p_value })
    } else {
        None
    };
    let reference: Vec<Option<bool>> = out.iter().map(|r| r.positive_reference).collect();
    let labels: Vec<Option<bool>> = out
        .iter()
        .map(|r| suvr.labels.and_then(|l| l.get(&r.pet_path)).map(|l| l.amyloid_positive))
        .collect();
    let summary = EvalSummary {
        n_images: out.len(),
        ssim: MeanStd::of(&col(|r| r.ssim)),
        psnr: MeanStd::of(&col(|r| r.psnr)),
        mse: MeanStd::of(&col(|r| r.mse)),
        suvr_correlation,
        generated_classification: classification(&out.iter().map(|r| r.positive_generated).collect::<Vec<_>>(), &reference)?,
        ground_truth_classification: classification(&out.iter().map(|r| r.positive_true_pet).collect::<Vec<_>>(), &labels)?,
        threshold: AMYLOID_THRESHOLD,
        model: ckpt.model.to_string(),
        conditioning: ckpt.conditioning.to_string(),
    };
    Ok(EvalReport { rows: out, summary })
}

impl EvalReport {
    /// Writes `per_image.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(PER_IMAGE_FILE);
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::format(&p, e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(&p, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        let s = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        fs::write(&s, json + "\n").map_err(|e| Error::io(&s, e))
    }

    pub fn read_rows(dir: &Path) -> Result<Vec<ImageRow>> {
        let p = dir.join(PER_IMAGE_FILE);
        if !p.is_file() {
            return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut r = csv::Reader::from_path(&p).map_err(|e| Error::format(&p, e.to_string()))?;
        r.deserialize().map(|row| row.map_err(|e| Error::format(&p, e.to_string()))).collect()
    }
}
