//! Visual report: one three-view montage per evaluated image plus a markdown
//! summary of the evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, EvalSummary, GENERATED_DIR, SUMMARY_FILE};
use crate::io::read_volume;
use crate::volume::Volume;

/// Orthogonal central slice orientations, in montage row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];
}

/// Central slice as a row-major `(rows, cols, values)` image. Volumes are
/// indexed (z, y, x).
pub fn central_slice(v: &Volume, view: View) -> (usize, usize, Vec<f32>) {
    let [d, h, w] = v.shape();
    match view {
        View::Axial => (h, w, (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| v.get(d / 2, y, x)).collect()),
        View::Sagittal => (d, h, (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| v.get(d - 1 - z, y, w / 2)).collect()),
        View::Coronal => (d, w, (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| v.get(d - 1 - z, h / 2, x)).collect()),
    }
}

/// Grid of central slices: rows are views, columns are the given volumes.
/// Each volume is windowed to `[min, max]` of `windows[i]`, and every pixel
/// is repeated `scale` times per axis.
pub fn montage(columns: &[&Volume], windows: &[(f32, f32)], scale: u32) -> Result<GrayImage> {
    let Some(first) = columns.first() else {
        return Err(Error::InvalidArgument("montage needs at least one volume".into()));
    };
    for c in columns {
        first.ensure_same_shape(c, "montage")?;
    }
    let [d, h, w] = first.shape();
    let cell = d.max(h).max(w) as u32 * scale;
    let gap = 2;
    let width = columns.len() as u32 * (cell + gap) - gap;
    let height = 3 * (cell + gap) - gap;
    let mut img = GrayImage::new(width, height);
    for (row, view) in View::ALL.into_iter().enumerate() {
        for (col, (v, &(lo, hi))) in columns.iter().zip(windows).enumerate() {
            let (rows, cols, values) = central_slice(v, view);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (x0, y0) = (col as u32 * (cell + gap), row as u32 * (cell + gap));
            for r in 0..rows {
                for c in 0..cols {
                    let g = (((values[r * cols + c] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(x0 + c as u32 * scale + dx, y0 + r as u32 * scale + dy, Luma([g]));
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

fn fmt_ms(m: &crate::metrics::MeanStd, digits: usize) -> String {
    format!("{:.*} ± {:.*}", digits, m.mean, digits, m.std)
}

pub fn summary_markdown(s: &EvalSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Evaluation: {} ({})\n\n", s.model, s.conditioning));
    out.push_str(&format!("Test images: {}\n\n", s.n_images));
    out.push_str("| metric | mean ± std |\n|---|---|\n");
    out.push_str(&format!("| SSIM | {} |\n", fmt_ms(&s.ssim, 3)));
    out.push_str(&format!("| PSNR (dB) | {} |\n", fmt_ms(&s.psnr, 2)));
    out.push_str(&format!("| MSE | {} |\n\n", fmt_ms(&s.mse, 2)));
    if let Some(c) = &s.suvr_correlation {
        out.push_str(&format!("MCSUVR correlation (generated vs true): r = {:.3}, p = {:.3e}\n\n", c.r, c.p_value));
    }
    if let Some(c) = &s.generated_classification {
        out.push_str(&format!(
            "Amyloid positivity from generated PET (MCSUVR > {}): accuracy {:.3}, F1 {:.3}\n\n",
            s.threshold, c.accuracy, c.f1
        ));
    }
    if let Some(c) = &s.ground_truth_classification {
        out.push_str(&format!(
            "Amyloid positivity from true PET against labels: accuracy {:.3}, F1 {:.3}\n\n",
            c.accuracy, c.f1
        ));
    }
    out
}

/// Writes `<stem>.png` montages (columns: MRI, true PET, generated PET) and
/// `summary.md` into `out_dir`; returns the montage paths.
pub fn write_report(eval_dir: &Path, manifest: &Manifest, out_dir: &Path, scale: u32) -> Result<Vec<PathBuf>> {
    let rows = EvalReport::read_rows(eval_dir)?;
    let summary_path = eval_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: EvalSummary =
        serde_json::from_str(&text).map_err(|e| Error::format(&summary_path, e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(rows.len());
    for row in &rows {
        let entry = manifest
            .rows
            .iter()
            .find(|r| r.pet_path == row.pet_path)
            .ok_or_else(|| Error::Data(format!("{} is not in the manifest", row.pet_path)))?;
        let sample = manifest.load(entry)?;
        let stem = Path::new(&row.pet_path)
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.split('.').next())
            .unwrap_or("image")
            .to_owned();
        let generated = read_volume(&eval_dir.join(GENERATED_DIR).join(format!("{stem}_generated.xvol")))?;
        // Both PET columns share the true PET's window.
        let pet_window = (sample.pet.min(), sample.pet.max());
        let img = montage(
            &[&sample.mri, &sample.pet, &generated],
            &[(sample.mri.min(), sample.mri.max()), pet_window, pet_window],
            scale,
        )?;
        let path = out_dir.join(format!("{stem}.png"));
        img.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        written.push(path);
    }
    let md = out_dir.join("summary.md");
    fs::write(&md, summary_markdown(&summary)).map_err(|e| Error::io(&md, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_slices_pick_the_middle_planes() {
        let v = Volume::from_fn([4, 6, 8], |z, y, x| (z * 100 + y * 10 + x) as f32).unwrap();
        let (r, c, a) = central_slice(&v, View::Axial);
        assert_eq!((r, c), (6, 8));
        assert_eq!(a[0], 200.0);
        let (r, c, s) = central_slice(&v, View::Sagittal);
        assert_eq!((r, c), (4, 6));
        assert_eq!(s[0], 304.0);
        let (r, c, co) = central_slice(&v, View::Coronal);
        assert_eq!((r, c), (4, 8));
        assert_eq!(co[8 * 3], 30.0);
    }

    #[test]
    fn montage_layout_and_windowing() {
        let a = Volume::filled([8; 3], 1.0).unwrap();
        let b = Volume::filled([8; 3], 0.0).unwrap();
        let img = montage(&[&a, &b], &[(0.0, 1.0), (0.0, 1.0)], 2).unwrap();
        assert_eq!(img.dimensions(), (2 * 16 + 2, 3 * 16 + 4));
        assert_eq!(img.get_pixel(0, 0)[0], 255);
        assert_eq!(img.get_pixel(18, 0)[0], 0);
        assert!(montage(&[], &[], 1).is_err());
    }
}
