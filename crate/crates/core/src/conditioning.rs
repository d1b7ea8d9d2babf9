//! Injection of the normalized plasma Aβ42/40 scalar into a generator.
//!
//! The scalar enters as a graph node of shape (N) so outputs stay
//! differentiable with respect to it.

use std::fmt;
use std::str::FromStr;

use autograd::{ConvParams, Graph, NodeId, ParamId, ParamSet, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    None,
    ImageAdd,
    LatentAdd,
    LatentConcat,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] = [Self::None, Self::ImageAdd, Self::LatentAdd, Self::LatentConcat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ImageAdd => "image_add",
            Self::LatentAdd => "latent_add",
            Self::LatentConcat => "latent_concat",
        }
    }

    pub fn uses_abeta(self) -> bool {
        self != Self::None
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown conditioning mode '{s}' (none|image_add|latent_add|latent_concat)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditioningPayload {
    pub mode: ConditioningMode,
    pub abeta_norm: f64,
}

impl ConditioningPayload {
    pub fn new(mode: ConditioningMode, abeta_norm: f64) -> Result<Self> {
        if !abeta_norm.is_finite() {
            return Err(Error::NonFinite(format!("abeta_norm = {abeta_norm}")));
        }
        Ok(Self { mode, abeta_norm })
    }

    pub fn none() -> Self {
        Self { mode: ConditioningMode::None, abeta_norm: 0.0 }
    }
}

/// Adds each sample's scalar to every voxel of the input volume.
pub fn condition_image_add<T: Real>(g: &mut Graph<T>, x: NodeId, abeta: NodeId) -> Result<NodeId> {
    check_batch(g, x, abeta)?;
    Ok(g.add_per_sample(x, abeta))
}

/// Adds each sample's scalar to every channel and voxel of a feature map
/// with `channels` channels.
pub fn condition_latent_add<T: Real>(g: &mut Graph<T>, f: NodeId, abeta: NodeId, channels: usize) -> Result<NodeId> {
    check_channels(g, f, channels)?;
    check_batch(g, f, abeta)?;
    Ok(g.add_per_sample(f, abeta))
}

/// Learned 1×1×1 convolution that maps `channels + 1` channels back to
/// `channels`.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl Fusion {
    /// Registers fusion parameters: identity on the feature channels and
    /// `N(0, cond_std^2)` on the condition channel, zero bias.
    pub fn init<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        cond_std: f64,
        normal: &mut impl FnMut() -> f64,
    ) -> Self {
        let cin = channels + 1;
        let mut w = Tensor::zeros(&[channels, cin, 1, 1, 1]);
        for o in 0..channels {
            w.data_mut()[o * cin + o] = T::one();
            w.data_mut()[o * cin + channels] = T::of(cond_std * normal());
        }
        let weight = params.add(format!("{prefix}.w"), w);
        let bias = params.add(format!("{prefix}.b"), Tensor::zeros(&[channels]));
        Self { weight, bias, channels }
    }

    pub fn num_params(channels: usize) -> usize {
        (channels + 1) * channels + channels
    }
}

/// Output of [`condition_latent_concat`].
#[derive(Clone, Copy, Debug)]
pub struct ConcatTrace {
    /// Feature map with the condition channel appended.
    pub concatenated: NodeId,
    pub fused: NodeId,
}

/// Appends a broadcast condition channel and fuses back to the original
/// channel count.
pub fn condition_latent_concat<T: Real>(
    g: &mut Graph<T>,
    f: NodeId,
    abeta: NodeId,
    params: &ParamSet<T>,
    fusion: &Fusion,
) -> Result<ConcatTrace> {
    check_channels(g, f, fusion.channels)?;
    check_batch(g, f, abeta)?;
    let spatial = g.shape(f)[2..].to_vec();
    let cond = g.broadcast_per_sample(abeta, &spatial);
    let concatenated = g.concat_channels(f, cond);
    let w = g.param(params, fusion.weight);
    let b = g.param(params, fusion.bias);
    let fused = g.conv3d(concatenated, w, Some(b), ConvParams::cubic(1, 1, 0));
    Ok(ConcatTrace { concatenated, fused })
}

fn check_channels<T: Real>(g: &Graph<T>, f: NodeId, channels: usize) -> Result<()> {
    let s = g.shape(f);
    if s.len() != 5 || s[1] != channels {
        return Err(Error::Shape(format!("expected a ({channels}, D, H, W) feature map per sample, got {s:?}")));
    }
    Ok(())
}

fn check_batch<T: Real>(g: &Graph<T>, x: NodeId, abeta: NodeId) -> Result<()> {
    let n = g.shape(x)[0];
    if g.shape(abeta) != [n] {
        return Err(Error::Shape(format!("condition must have one value per sample ({n}), got {:?}", g.shape(abeta))));
    }
    if !g.value(abeta).all_finite() {
        return Err(Error::NonFinite("condition value".into()));
    }
    Ok(())
}
