//! Seeded 3D augmentations and the random pipeline applied during training.
//!
//! All transforms operate on intensity-normalized volumes; voxels that enter
//! the field of view under a geometric transform take [`FILL_VALUE`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{PairedSample, Volume};

/// Minimum of the normalized intensity range.
pub const FILL_VALUE: f32 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// Smoothing width in voxels.
    pub smooth_sigma: f64,
    pub max_rotation_deg: [f64; 3],
    pub flip_axes: Vec<usize>,
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub max_translation_voxels: [usize; 3],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            smooth_sigma: 1.0,
            max_rotation_deg: [10.0; 3],
            flip_axes: vec![0, 1, 2],
            brightness_delta: 0.1,
            contrast_range: (0.9, 1.1),
            max_translation_voxels: [8; 3],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("augment: {m}")));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.smooth_sigma > 0.0 && self.smooth_sigma.is_finite()) {
            return bad("smooth_sigma must be > 0");
        }
        if self.max_rotation_deg.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("max_rotation_deg must be finite and >= 0");
        }
        if self.flip_axes.iter().any(|&a| a > 2) {
            return bad("flip axes must be in {0, 1, 2}");
        }
        if !(self.brightness_delta >= 0.0 && self.brightness_delta.is_finite()) {
            return bad("brightness_delta must be >= 0");
        }
        let (lo, hi) = self.contrast_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
            return bad("contrast_range needs 0 < lo <= hi");
        }
        Ok(())
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every voxel.
pub fn additive_gaussian_noise(v: &Volume, sigma: f64, rng: &mut impl Rng) -> Result<Volume> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let data = v.data().iter().map(|&x| (x as f64 + normal.sample(rng)) as f32).collect();
    Ok(Volume::from_parts(v.shape(), v.spacing(), data))
}

/// Half-sample symmetric boundary index for any integer position.
fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Fourth-order recursive Gaussian: the causal half of the impulse response
/// is a sum of two damped cosines `(a cos(w n / s) + b sin(w n / s)) exp(-c n / s)`.
const DAMPED_TERMS: [(f64, f64, f64, f64); 2] = [(1.68, 3.735, 1.783, 0.6318), (-0.6803, -0.2598, 1.723, 1.997)];

type Complex = (f64, f64);

fn complex_mul(a: Complex, b: Complex) -> Complex {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Coefficients of a direct-form recursion
/// `y[n] = sum_m num[m] x[n-m] - sum_{m>=1} den[m] y[n-m]`.
#[derive(Clone, Debug)]
struct Recursion {
    num: [f64; 5],
    den: [f64; 5],
}

impl Recursion {
    /// DC gain, used to start the recursion in steady state.
    fn dc_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    fn run(&self, input: impl Iterator<Item = f64>, first: f64, mut emit: impl FnMut(f64)) {
        let mut xs = [first; 5];
        let mut ys = [first * self.dc_gain(); 5];
        for x in input {
            xs.rotate_right(1);
            xs[0] = x;
            let mut y = 0.0;
            for m in 0..5 {
                y += self.num[m] * xs[m];
            }
            for m in 1..5 {
                y -= self.den[m] * ys[m - 1];
            }
            ys.rotate_right(1);
            ys[0] = y;
            emit(y);
        }
    }
}

/// Causal and anti-causal recursions plus the normalization of their sum.
#[derive(Clone, Debug)]
struct RecursiveGaussian {
    causal: Recursion,
    anticausal: Recursion,
    norm: f64,
}

impl RecursiveGaussian {
    fn new(sigma: f64) -> Self {
        let mut poles = Vec::with_capacity(4);
        let mut residues = Vec::with_capacity(4);
        for (a, b, c, w) in DAMPED_TERMS {
            for sign in [1.0, -1.0] {
                let mag = (-c / sigma).exp();
                let arg = sign * w / sigma;
                poles.push((mag * arg.cos(), mag * arg.sin()));
                residues.push((a / 2.0, -sign * b / 2.0));
            }
        }
        // Expands prod_j (1 - p_j z^-1), skipping pole `skip`.
        let expand = |skip: Option<usize>| {
            let mut poly: [Complex; 5] = [(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)];
            for (j, &p) in poles.iter().enumerate() {
                if Some(j) == skip {
                    continue;
                }
                for k in (1..5).rev() {
                    let t = complex_mul(p, poly[k - 1]);
                    poly[k] = (poly[k].0 - t.0, poly[k].1 - t.1);
                }
            }
            poly
        };
        let den = expand(None).map(|c| c.0);
        let mut num = [0.0; 5];
        for (k, &r) in residues.iter().enumerate() {
            for (n, c) in num.iter_mut().zip(expand(Some(k))) {
                *n += complex_mul(r, c).0;
            }
        }
        // Anti-causal part: the causal response without its n = 0 tap.
        let h0: f64 = residues.iter().map(|r| r.0).sum();
        let anti: [f64; 5] = std::array::from_fn(|m| num[m] - h0 * den[m]);
        let causal = Recursion { num, den };
        let anticausal = Recursion { num: anti, den };
        let norm = causal.dc_gain() + anticausal.dc_gain();
        Self { causal, anticausal, norm }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        let len = input.len();
        let mut i = 0;
        self.causal.run(input.iter().copied(), input[0], |y| {
            out[i] = y;
            i += 1;
        });
        let mut i = len;
        self.anticausal.run(input.iter().rev().copied(), input[len - 1], |y| {
            i -= 1;
            out[i] = (out[i] + y) / self.norm;
        });
    }
}

/// Smallest width for which the recursive coefficients are valid.
const RECURSIVE_MIN_SIGMA: f64 = 0.5;

/// One-dimensional smoothing of every line along `axis`.
fn smooth_axis(data: &mut [f64], shape: [usize; 3], axis: usize, sigma: f64) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let pad = (6.0 * sigma).ceil() as usize + 3;
    let mut line = vec![0.0; n + 2 * pad];
    let mut work = vec![0.0; n + 2 * pad];
    let direct_kernel = (sigma < RECURSIVE_MIN_SIGMA).then(|| sampled_gaussian(sigma));
    let filter = RecursiveGaussian::new(sigma.max(RECURSIVE_MIN_SIGMA));

    let starts: Vec<usize> = (0..data.len()).filter(|&i| (i / stride) % n == 0).collect();
    for start in starts {
        for (k, slot) in line.iter_mut().enumerate() {
            let src = mirror(k as isize - pad as isize, n);
            *slot = data[start + src * stride];
        }
        match &direct_kernel {
            Some(kernel) => {
                let r = kernel.len() / 2;
                for i in 0..n {
                    let c = i + pad;
                    work[c] = kernel.iter().enumerate().map(|(t, w)| w * line[c + t - r]).sum();
                }
            }
            None => filter.apply(&line, &mut work),
        }
        for i in 0..n {
            data[start + i * stride] = work[i + pad];
        }
    }
}

fn sampled_gaussian(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable recursive-filter approximation of Gaussian smoothing with
/// half-sample symmetric boundaries.
pub fn recursive_gaussian_smooth(v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing sigma must be > 0, got {sigma}")));
    }
    let shape = v.shape();
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        smooth_axis(&mut data, shape, axis, sigma);
    }
    Ok(Volume::from_parts(shape, v.spacing(), data.into_iter().map(|x| x as f32).collect()))
}

/// Rotation matrix for angles (degrees) about axes 0, 1, 2 applied in that
/// order. Rotation about axis `a` turns the other two axes in cyclic order.
pub fn rotation_matrix(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (axis, &deg) in angles_deg.iter().enumerate() {
        if deg == 0.0 {
            continue;
        }
        let (s, c) = deg.to_radians().sin_cos();
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut step = [[0.0; 3]; 3];
        step[axis][axis] = 1.0;
        step[u][u] = c;
        step[u][w] = -s;
        step[w][u] = s;
        step[w][w] = c;
        r = matmul3(&step, &r);
    }
    r
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Coordinates within this distance of a grid point are treated as on it.
const SNAP: f64 = 1e-9;

fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

/// Rotates about the volume centre by `angles_deg` (see [`rotation_matrix`]),
/// sampling trilinearly.
pub fn rotate(v: &Volume, angles_deg: [f64; 3]) -> Volume {
    if angles_deg == [0.0; 3] {
        return v.clone();
    }
    let r = rotation_matrix(angles_deg);
    let shape = v.shape();
    let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(v.len());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let q = [z as f64 - centre[0], y as f64 - centre[1], x as f64 - centre[2]];
                // Inverse map: source = R^T q + centre.
                let src: [f64; 3] =
                    std::array::from_fn(|i| snap((0..3).map(|k| r[k][i] * q[k]).sum::<f64>() + centre[i]));
                data.push(sample_trilinear(v, src));
            }
        }
    }
    Volume::from_parts(shape, v.spacing(), data)
}

fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let shape = v.shape();
    if (0..3).any(|a| p[a] < 0.0 || p[a] > (shape[a] - 1) as f64) {
        return FILL_VALUE;
    }
    let lo: [usize; 3] = std::array::from_fn(|a| p[a].floor() as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(shape[a] - 1));
    let f: [f64; 3] = std::array::from_fn(|a| p[a] - lo[a] as f64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| corner >> (2 - a) & 1 == 1;
        let mut w = 1.0;
        let mut idx = [0; 3];
        for a in 0..3 {
            if pick(a) {
                w *= f[a];
                idx[a] = hi[a];
            } else {
                w *= 1.0 - f[a];
                idx[a] = lo[a];
            }
        }
        if w != 0.0 {
            acc += w * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc as f32
}

/// Reverses index order along `axis`.
pub fn flip(v: &Volume, axis: usize) -> Result<Volume> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("flip axis must be 0, 1 or 2, got {axis}")));
    }
    let [d, h, w] = v.shape();
    let mut data = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                data.push(v.get(sz, sy, sx));
            }
        }
    }
    Ok(Volume::from_parts(v.shape(), v.spacing(), data))
}

/// `gain * (v - mean(v)) + mean(v) + delta`, clamped to [-1, 1].
pub fn brightness_contrast(v: &Volume, delta: f64, gain: f64) -> Result<Volume> {
    if !(delta.is_finite() && gain.is_finite()) {
        return Err(Error::InvalidArgument("brightness/contrast parameters must be finite".into()));
    }
    let mean = v.mean();
    let data = v
        .data()
        .iter()
        .map(|&x| (gain * (x as f64 - mean) + mean + delta).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Volume::from_parts(v.shape(), v.spacing(), data))
}

/// Integer shift: `out[p] = in[p - offset]`, filling uncovered voxels.
pub fn translate(v: &Volume, offset: [i64; 3]) -> Volume {
    if offset == [0; 3] {
        return v.clone();
    }
    let shape = v.shape();
    let mut data = Vec::with_capacity(v.len());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let src = [z as i64 - offset[0], y as i64 - offset[1], x as i64 - offset[2]];
                let inside = (0..3).all(|a| src[a] >= 0 && src[a] < shape[a] as i64);
                data.push(if inside {
                    v.get(src[0] as usize, src[1] as usize, src[2] as usize)
                } else {
                    FILL_VALUE
                });
            }
        }
    }
    Volume::from_parts(shape, v.spacing(), data)
}

/// The six augmentations, in the order the pipeline applies them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    Smooth,
    Noise,
    Rotation,
    Flip,
    Translation,
    BrightnessContrast,
}

impl Step {
    pub const CANONICAL_ORDER: [Step; 6] = [
        Step::Smooth,
        Step::Noise,
        Step::Rotation,
        Step::Flip,
        Step::Translation,
        Step::BrightnessContrast,
    ];
}

/// One draw of the random pipeline. Geometry is shared by both modalities;
/// intensity parameters are drawn per modality (`[mri, pet]`).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub steps: Vec<Step>,
    pub rotation_deg: [f64; 3],
    pub flip_axis: Option<usize>,
    pub translation: [i64; 3],
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
}

/// Draws a nonempty subset of steps (each kept with probability 1/2,
/// redrawn while empty) and their parameters.
pub fn draw_plan(cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentPlan {
    let steps = loop {
        let picked: Vec<Step> = Step::CANONICAL_ORDER
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.5))
            .collect();
        if !picked.is_empty() {
            break picked;
        }
    };
    let mut uniform = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let rotation_deg = cfg.max_rotation_deg.map(&mut uniform);
    let brightness = [uniform(cfg.brightness_delta), uniform(cfg.brightness_delta)];
    let (clo, chi) = cfg.contrast_range;
    let contrast = [0, 1].map(|_| if chi > clo { rng.random_range(clo..=chi) } else { clo });
    let translation = cfg.max_translation_voxels.map(|m| {
        let m = m as i64;
        if m > 0 {
            rng.random_range(-m..=m)
        } else {
            0
        }
    });
    let flip_axis = (!cfg.flip_axes.is_empty()).then(|| cfg.flip_axes[rng.random_range(0..cfg.flip_axes.len())]);
    AugmentPlan {
        steps,
        rotation_deg,
        flip_axis,
        translation,
        brightness,
        contrast,
    }
}

/// Applies `plan` to both volumes of `sample`. Noise fields are drawn from
/// `rng`, MRI first.
pub fn apply_plan(
    sample: &PairedSample,
    plan: &AugmentPlan,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<PairedSample> {
    let mut vols = [sample.mri.clone(), sample.pet.clone()];
    for step in Step::CANONICAL_ORDER {
        if !plan.steps.contains(&step) {
            continue;
        }
        for (m, v) in vols.iter_mut().enumerate() {
            *v = match step {
                Step::Smooth => recursive_gaussian_smooth(v, cfg.smooth_sigma)?,
                Step::Noise => additive_gaussian_noise(v, cfg.noise_sigma, rng)?,
                Step::Rotation => rotate(v, plan.rotation_deg),
                Step::Flip => match plan.flip_axis {
                    Some(axis) => flip(v, axis)?,
                    None => continue,
                },
                Step::Translation => translate(v, plan.translation),
                Step::BrightnessContrast => brightness_contrast(v, plan.brightness[m], plan.contrast[m])?,
            };
        }
    }
    let [mri, pet] = vols;
    Ok(PairedSample {
        subject_id: sample.subject_id.clone(),
        mri,
        pet,
        abeta_ratio: sample.abeta_ratio,
    })
}

/// Draws and applies one random augmentation pipeline.
pub fn compose_random_pipeline(
    sample: &PairedSample,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<PairedSample> {
    let plan = draw_plan(cfg, rng);
    apply_plan(sample, &plan, cfg, rng)
}
