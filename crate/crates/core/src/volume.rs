//! Volumetric data model shared by every other module.

use autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent as (D, H, W); W varies fastest in memory.
pub type Shape3 = [usize; 3];

/// A 3D scalar grid of finite `f32` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("volume extent must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} is {}", data[i])));
        }
        Ok(Self { shape, spacing, data })
    }

    /// Volume of unit spacing filled with `value`.
    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, [1.0; 3], vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, [1.0; 3], data)
    }

    /// Internal constructor for data already known to be finite.
    pub(crate) fn from_parts(shape: Shape3, spacing: [f32; 3], data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { shape, spacing, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Applies `f` voxel-wise. Non-finite results are rejected.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.shape, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.len() as f64
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn ensure_same_shape(&self, other: &Volume, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Copies into a single-sample, single-channel tensor (1, 1, D, H, W).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        Tensor::new(&[1, 1, d, h, w], self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    /// Inverse of [`Volume::to_tensor`] for tensors with one sample and one channel.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, spacing: [f32; 3]) -> Result<Self> {
        match *t.shape() {
            [1, 1, d, h, w] => Self::new(
                [d, h, w],
                spacing,
                t.data().iter().map(|v| v.as_f64() as f32).collect(),
            ),
            ref s => Err(Error::Shape(format!("expected (1, 1, D, H, W) tensor, got {s:?}"))),
        }
    }
}

/// Co-registered MRI/PET pair with the subject's plasma Aβ42/40 ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub subject_id: String,
    pub mri: Volume,
    pub pet: Volume,
    pub abeta_ratio: f64,
}

impl PairedSample {
    pub fn new(subject_id: impl Into<String>, mri: Volume, pet: Volume, abeta_ratio: f64) -> Result<Self> {
        mri.ensure_same_shape(&pet, "MRI and PET must be co-registered")?;
        if !(abeta_ratio.is_finite() && abeta_ratio > 0.0) {
            return Err(Error::Data(format!("abeta ratio must be positive, got {abeta_ratio}")));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            mri,
            pet,
            abeta_ratio,
        })
    }
}

/// Closed interval `[lo, hi]` with `hi > lo`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = Self { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.hi > self.lo) {
            return Err(Error::Data(format!(
                "normalization range needs finite hi > lo, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Smallest range covering `values`; widened when all values coincide.
    pub fn covering(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Err(Error::Data("cannot derive a range from no values".into()));
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Self::new(lo, hi)
    }

    /// Maps into [0, 1], clamped.
    pub fn to_unit(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Training-split intensity and biomarker ranges, persisted with checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mri: Range,
    pub pet: Range,
    pub abeta: Range,
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        self.mri.validate()?;
        self.pet.validate()?;
        self.abeta.validate()
    }

    /// Min/max over a set of samples (the training split).
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PairedSample>) -> Result<Self> {
        let (mut mri, mut pet, mut abeta) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            mri.extend([s.mri.min() as f64, s.mri.max() as f64]);
            pet.extend([s.pet.min() as f64, s.pet.max() as f64]);
            abeta.push(s.abeta_ratio);
        }
        Ok(Self {
            mri: Range::covering(mri)?,
            pet: Range::covering(pet)?,
            abeta: Range::covering(abeta)?,
        })
    }

    /// Plasma ratio mapped to [0, 1].
    pub fn normalize_abeta(&self, ratio: f64) -> f64 {
        self.abeta.to_unit(ratio)
    }
}

/// Affine map of `range` onto [-1, 1], clamping values outside the range.
pub fn normalize_intensity(v: &Volume, range: Range) -> Result<Volume> {
    range.validate()?;
    let (lo, width) = (range.lo, range.hi - range.lo);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64 - lo) / width) * 2.0 - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Volume::from_parts(v.shape, v.spacing, data))
}

/// Inverse of [`normalize_intensity`] on its unclamped range.
pub fn denormalize_intensity(v: &Volume, range: Range) -> Result<Volume> {
    range.validate()?;
    let (lo, width) = (range.lo, range.hi - range.lo);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 + 1.0) * 0.5 * width + lo) as f32)
        .collect();
    Ok(Volume::from_parts(v.shape, v.spacing, data))
}

/// Source coordinate for destination index `i` under the half-pixel-centre
/// (align-corners = false) convention, clamped to the valid range.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64)
}

/// Linear interpolation taps (lower index, upper index, upper weight).
fn taps(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let c = source_coord(i, in_len, out_len);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, c - lo as f64)
}

/// Trilinear resampling to `target`.
pub fn resample_trilinear(v: &Volume, target: Shape3) -> Result<Volume> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::InvalidArgument(format!("target shape must be positive, got {target:?}")));
    }
    let [id, ih, iw] = v.shape;
    let tz: Vec<_> = (0..target[0]).map(|i| taps(i, id, target[0])).collect();
    let ty: Vec<_> = (0..target[1]).map(|i| taps(i, ih, target[1])).collect();
    let tx: Vec<_> = (0..target[2]).map(|i| taps(i, iw, target[2])).collect();
    let mut data = Vec::with_capacity(target.iter().product());
    let at = |z: usize, y: usize, x: usize| v.data[(z * ih + y) * iw + x] as f64;
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x1) * wx;
                let c01 = at(z0, y1, x0) * (1.0 - wx) + at(z0, y1, x1) * wx;
                let c10 = at(z1, y0, x0) * (1.0 - wx) + at(z1, y0, x1) * wx;
                let c11 = at(z1, y1, x0) * (1.0 - wx) + at(z1, y1, x1) * wx;
                let c0 = c00 * (1.0 - wy) + c01 * wy;
                let c1 = c10 * (1.0 - wy) + c11 * wy;
                data.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    let spacing = [
        v.spacing[0] * id as f32 / target[0] as f32,
        v.spacing[1] * ih as f32 / target[1] as f32,
        v.spacing[2] * iw as f32 / target[2] as f32,
    ];
    Ok(Volume::from_parts(target, spacing, data))
}

/// Constant tensor of the given shape, e.g. `(1, 16, 16, 16)` for one latent
/// channel or `(D, H, W)` for an input-sized field.
pub fn broadcast_scalar<T: Real>(s: T, shape: &[usize]) -> Result<Tensor<T>> {
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("broadcast scalar {s}")));
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("broadcast shape must be positive, got {shape:?}")));
    }
    Ok(Tensor::full(shape, s))
}
