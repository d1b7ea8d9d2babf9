//! Synthetic paired MRI/PET phantoms with a known Aβ42/40 → uptake link.
//!
//! Anatomy is a jittered ellipsoidal brain with white matter, grey matter,
//! CSF spaces and a cerebellum. Cortical (grey matter) PET uptake rises
//! linearly as the plasma ratio falls; the cerebellum is the reference
//! region with unit uptake.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::recursive_gaussian_smooth;
use crate::error::{Error, Result};
use crate::metrics::{mcsuvr, RegionMasks, AMYLOID_THRESHOLD};
use crate::volume::{PairedSample, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub abeta_range: (f64, f64),
    /// Cortical uptake gained across the full abeta range.
    pub uptake_coupling: f64,
    /// Cortical uptake at the top of the abeta range.
    pub base_uptake: f64,
    pub mri_noise: f64,
    pub pet_noise: f64,
    /// Subjects whose clean MCSUVR lies within this distance of the
    /// positivity threshold are redrawn, so labels are unambiguous. Zero
    /// disables the rejection.
    pub label_margin: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64; 3],
            n_subjects: 40,
            images_per_subject: 2,
            abeta_range: (0.05, 0.12),
            uptake_coupling: 0.6,
            base_uptake: 0.9,
            mri_noise: 0.02,
            pet_noise: 0.03,
            label_margin: 0.03,
            seed: 0,
        }
    }
}

/// Tissue classes of the phantom anatomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Background,
    Csf,
    GreyMatter,
    WhiteMatter,
    Cerebellum,
}

const MAX_LABEL_ATTEMPTS: usize = 1000;
const PET_SMOOTHING: f64 = 1.0;
const MRI_SMOOTHING: f64 = 0.6;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0 || n % 8 != 0) {
            return Err(Error::InvalidArgument(format!("phantom shape {:?} must be positive multiples of 8", self.shape)));
        }
        if self.n_subjects < 3 {
            return Err(Error::InvalidArgument("phantom needs at least 3 subjects".into()));
        }
        if self.images_per_subject == 0 {
            return Err(Error::InvalidArgument("images_per_subject must be >= 1".into()));
        }
        let (lo, hi) = self.abeta_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("abeta_range must satisfy 0 < lo < hi, got ({lo}, {hi})")));
        }
        let nonneg = [self.uptake_coupling, self.base_uptake, self.mri_noise, self.pet_noise, self.label_margin];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("phantom coupling, uptake, noise and margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-subject anatomy: tissue labels plus region masks.
#[derive(Clone, Debug)]
struct Anatomy {
    tissue: Vec<Tissue>,
}

fn build_anatomy(shape: [usize; 3], rng: &mut impl Rng) -> Anatomy {
    let mut jitter = |s: f64| 1.0 + rng.random_range(-s..=s);
    let radii = [0.78 * jitter(0.06), 0.72 * jitter(0.06), 0.74 * jitter(0.06)];
    let centre = [0.03 * (jitter(1.0) - 1.0), 0.03 * (jitter(1.0) - 1.0), 0.02 * (jitter(1.0) - 1.0)];
    let wm_frac = 0.55 * jitter(0.05);
    let ventricle = 0.22 * jitter(0.1);
    let cb_centre = [-0.55 * jitter(0.05), -0.42 * jitter(0.05), 0.0];
    let cb_radii = [0.2 * jitter(0.08), 0.24 * jitter(0.08), 0.42 * jitter(0.08)];
    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut tissue = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [coord(z, shape[0]), coord(y, shape[1]), coord(x, shape[2])];
                let r = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum::<f64>().sqrt();
                let rc = (0..3).map(|a| ((p[a] - cb_centre[a]) / cb_radii[a]).powi(2)).sum::<f64>().sqrt();
                let t = if rc < 1.0 {
                    Tissue::Cerebellum
                } else if r >= 1.0 {
                    Tissue::Background
                } else if r >= 0.9 || r < ventricle {
                    Tissue::Csf
                } else if r >= wm_frac {
                    Tissue::GreyMatter
                } else {
                    Tissue::WhiteMatter
                };
                tissue.push(t);
            }
        }
    }
    Anatomy { tissue }
}

impl Anatomy {
    fn masks(&self, shape: [usize; 3]) -> Result<RegionMasks> {
        let target = self.tissue.iter().map(|&t| t == Tissue::GreyMatter).collect();
        let cereb = self.tissue.iter().map(|&t| t == Tissue::Cerebellum).collect();
        RegionMasks::new(shape, target, cereb)
    }

    fn field(&self, shape: [usize; 3], value: impl Fn(Tissue) -> f32) -> Volume {
        Volume::from_parts(shape, [1.0; 3], self.tissue.iter().map(|&t| value(t)).collect())
    }
}

fn mri_intensity(t: Tissue) -> f32 {
    match t {
        Tissue::Background => 0.0,
        Tissue::Csf => 0.2,
        Tissue::GreyMatter => 0.55,
        Tissue::WhiteMatter => 0.85,
        Tissue::Cerebellum => 0.62,
    }
}

/// PET uptake excluding the cortical target term.
fn pet_reference_uptake(t: Tissue) -> f32 {
    match t {
        Tissue::Background => 0.0,
        Tissue::Csf => 0.15,
        Tissue::GreyMatter => 0.0,
        Tissue::WhiteMatter => 0.8,
        Tissue::Cerebellum => 1.0,
    }
}

/// One generated image with its masks and ground truth.
#[derive(Clone, Debug)]
pub struct PhantomSample {
    pub sample: PairedSample,
    pub masks: RegionMasks,
    /// MCSUVR of the noise-free PET.
    pub clean_mcsuvr: f64,
    pub amyloid_positive: bool,
}

impl PhantomSample {
    pub fn mask_volumes(&self) -> (Volume, Volume) {
        let shape = self.masks.shape();
        let to = |m: &[bool]| Volume::from_parts(shape, [1.0; 3], m.iter().map(|&b| f32::from(u8::from(b))).collect());
        (to(self.masks.target()), to(self.masks.cerebellum()))
    }
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

fn subject_rng(spec: &PhantomSpec, subject_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(subject_index as u64);
    rng
}

fn add_noise(v: &Volume, sigma: f64, rng: &mut impl Rng) -> Volume {
    if sigma == 0.0 {
        return v.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let data = v.data().iter().map(|&x| (x as f64 + normal.sample(rng)) as f32).collect();
    Volume::from_parts(v.shape(), v.spacing(), data)
}

/// All images of one subject. Geometry and abeta are shared; noise and a
/// global PET scale differ per image.
pub fn generate_subject(spec: &PhantomSpec, subject_index: usize) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    let shape = spec.shape;
    let mut rng = subject_rng(spec, subject_index);
    let anatomy = build_anatomy(shape, &mut rng);
    let masks = anatomy.masks(shape)?;

    let mri_clean = recursive_gaussian_smooth(&anatomy.field(shape, mri_intensity), MRI_SMOOTHING)?;
    // Clean PET is linear in cortical uptake: s_ref + uptake * s_gm.
    let s_ref = recursive_gaussian_smooth(&anatomy.field(shape, pet_reference_uptake), PET_SMOOTHING)?;
    let gm = anatomy.field(shape, |t| f32::from(u8::from(t == Tissue::GreyMatter)));
    let s_gm = recursive_gaussian_smooth(&gm, PET_SMOOTHING)?;
    let clean_pet = |uptake: f64| {
        let data = s_ref.data().iter().zip(s_gm.data()).map(|(&r, &g)| r + uptake as f32 * g).collect();
        Volume::from_parts(shape, [1.0; 3], data)
    };

    let (lo, hi) = spec.abeta_range;
    let mut chosen = None;
    for _ in 0..MAX_LABEL_ATTEMPTS {
        let abeta = rng.random_range(lo..=hi);
        let uptake = spec.base_uptake + spec.uptake_coupling * (hi - abeta) / (hi - lo);
        let pet = clean_pet(uptake);
        let suvr = mcsuvr(&pet, &masks)?;
        if (suvr - AMYLOID_THRESHOLD).abs() >= spec.label_margin {
            chosen = Some((abeta, pet, suvr));
            break;
        }
    }
    let (abeta, pet_clean, clean_suvr) = chosen.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no abeta value gives an MCSUVR at least {} from {AMYLOID_THRESHOLD}; widen uptake_coupling or shrink label_margin",
            spec.label_margin
        ))
    })?;

    (0..spec.images_per_subject)
        .map(|_| {
            let scale = rng.random_range(0.95..=1.05);
            let mri = add_noise(&mri_clean, spec.mri_noise, &mut rng);
            let pet = add_noise(&pet_clean.map(|v| v * scale as f32)?, spec.pet_noise, &mut rng);
            Ok(PhantomSample {
                sample: PairedSample::new(subject_id(subject_index), mri, pet, abeta)?,
                masks: masks.clone(),
                clean_mcsuvr: clean_suvr,
                amyloid_positive: clean_suvr > AMYLOID_THRESHOLD,
            })
        })
        .collect()
}

/// One image (`image_index` of the subject) from a fixed per-subject stream.
pub fn generate_phantom_pair(spec: &PhantomSpec, subject_index: usize, image_index: usize) -> Result<PhantomSample> {
    if image_index >= spec.images_per_subject {
        return Err(Error::InvalidArgument(format!(
            "image index {image_index} out of range ({} per subject)",
            spec.images_per_subject
        )));
    }
    Ok(generate_subject(spec, subject_index)?.swap_remove(image_index))
}

pub fn generate_dataset(spec: &PhantomSpec) -> Result<Vec<PhantomSample>> {
    let mut out = Vec::with_capacity(spec.n_subjects * spec.images_per_subject);
    for s in 0..spec.n_subjects {
        out.extend(generate_subject(spec, s)?);
    }
    Ok(out)
}
