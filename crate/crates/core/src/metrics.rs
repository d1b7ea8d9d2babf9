//! Image similarity, SUVR and agreement statistics.
//!
//! Similarity metrics take volumes already mapped to the display range
//! (see [`to_display_range`]); callers pick `max_val` accordingly.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Peak value of the display range used for MSE/PSNR/SSIM.
pub const DISPLAY_MAX: f64 = 255.0;

/// Amyloid positivity threshold on MCSUVR (strict `>`).
pub const AMYLOID_THRESHOLD: f64 = 1.19;

/// Maps normalized intensities in [-1, 1] to [0, 255].
pub fn to_display_range(v: &Volume) -> Result<Volume> {
    v.map(|x| (x + 1.0) * 127.5)
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the volumes match.
pub fn psnr(a: &Volume, b: &Volume, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::InvalidArgument(format!("psnr max_val must be > 0, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Separable Gaussian SSIM window.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl SsimWindow {
    /// Normalized 1D weights.
    pub fn weights(&self) -> Vec<f64> {
        let c = (self.size as f64 - 1.0) / 2.0;
        let w: Vec<f64> = (0..self.size)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-mode separable correlation of a field with `w` along every axis.
fn filter_valid(field: &[f64], shape: [usize; 3], w: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = w.len();
    let mut cur = field.to_vec();
    let mut dims = shape;
    for axis in 0..3 {
        let mut out_dims = dims;
        out_dims[axis] = dims[axis] + 1 - k;
        let strides = [dims[1] * dims[2], dims[2], 1];
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for z in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[2] {
                    let base = z * strides[0] + y * strides[1] + x * strides[2];
                    let s = strides[axis];
                    out.push(w.iter().enumerate().map(|(t, wt)| wt * cur[base + t * s]).sum());
                }
            }
        }
        cur = out;
        dims = out_dims;
    }
    (cur, dims)
}

/// Mean of the local SSIM map over window positions fully inside the volume.
pub fn ssim3d(a: &Volume, b: &Volume, window: &SsimWindow, max_val: f64) -> Result<f64> {
    a.ensure_same_shape(b, "ssim3d")?;
    let shape = a.shape();
    if shape.iter().any(|&n| n < window.size) {
        return Err(Error::Shape(format!("volume {shape:?} is smaller than the {}³ SSIM window", window.size)));
    }
    let w = window.weights();
    let av: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, _) = filter_valid(&av, shape, &w);
    let (mu_b, _) = filter_valid(&bv, shape, &w);
    let (e_aa, _) = filter_valid(&prod(&|x, _| x * x), shape, &w);
    let (e_bb, _) = filter_valid(&prod(&|_, y| y * y), shape, &w);
    let (e_ab, _) = filter_valid(&prod(&|x, y| x * y), shape, &w);
    let c1 = (window.k1 * max_val).powi(2);
    let c2 = (window.k2 * max_val).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| ssim_local(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

/// Local SSIM from weighted first and second moments.
fn ssim_local(ma: f64, mb: f64, eaa: f64, ebb: f64, eab: f64, c1: f64, c2: f64) -> f64 {
    let va = eaa - ma * ma;
    let vb = ebb - mb * mb;
    let cov = eab - ma * mb;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Target and reference regions for SUVR.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    shape: [usize; 3],
    target: Vec<bool>,
    cerebellum: Vec<bool>,
}

impl RegionMasks {
    pub fn new(shape: [usize; 3], target: Vec<bool>, cerebellum: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if target.len() != n || cerebellum.len() != n {
            return Err(Error::Shape(format!("mask lengths do not match shape {shape:?}")));
        }
        if !target.iter().any(|&t| t) || !cerebellum.iter().any(|&c| c) {
            return Err(Error::Data("SUVR masks must be nonempty".into()));
        }
        if target.iter().zip(&cerebellum).any(|(&t, &c)| t && c) {
            return Err(Error::Data("target and cerebellum masks overlap".into()));
        }
        Ok(Self { shape, target, cerebellum })
    }

    /// Voxels above 0.5 are inside a mask.
    pub fn from_volumes(target: &Volume, cerebellum: &Volume) -> Result<Self> {
        target.ensure_same_shape(cerebellum, "masks")?;
        let bin = |v: &Volume| v.data().iter().map(|&x| x > 0.5).collect();
        Self::new(target.shape(), bin(target), bin(cerebellum))
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn target(&self) -> &[bool] {
        &self.target
    }

    pub fn cerebellum(&self) -> &[bool] {
        &self.cerebellum
    }
}

fn masked_mean(v: &Volume, mask: &[bool]) -> f64 {
    let (s, n) = v
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&x, _)| (s + x as f64, n + 1));
    s / n as f64
}

/// Mean uptake in the target region over mean uptake in the cerebellum.
pub fn mcsuvr(pet: &Volume, masks: &RegionMasks) -> Result<f64> {
    if pet.shape() != masks.shape {
        return Err(Error::Shape(format!("PET {:?} vs masks {:?}", pet.shape(), masks.shape)));
    }
    let reference = masked_mean(pet, &masks.cerebellum);
    if !(reference > 0.0) {
        return Err(Error::Data(format!("cerebellum mean must be positive, got {reference}")));
    }
    Ok(masked_mean(pet, &masks.target) / reference)
}

/// Sample correlation and two-sided p-value of `H0: rho = 0`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("pearson length mismatch {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("pearson needs n >= 3, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pearson input".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("pearson undefined for zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok((r, correlation_p_value(r, n)))
}

/// Two-sided p-value of a correlation `r` over `n` pairs, via the Student t
/// distribution with `n - 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t2 = r * r * df / (1.0 - r * r);
    // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2).
    beta_reg(df / 2.0, 0.5, df / (df + t2))
}

pub fn classify_amyloid(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v > threshold).collect()
}

/// `(accuracy, f1)` with amyloid-positive as the positive class.
pub fn accuracy_f1(pred: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "accuracy_f1 needs equal nonempty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fneg, mut hits) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        hits += usize::from(p == t);
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok((hits as f64 / pred.len() as f64, f1))
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}
