//! Loss terms and composite objectives.
//!
//! Each objective exists twice: over plain `f64` term values (for logging and
//! checks) and as a graph node for training. Both read their coefficients
//! from the same function so they cannot drift apart.

use autograd::{graph::softplus, Graph, NodeId, Real};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_cyc1: f64,
    pub lambda_cyc2: f64,
    pub lambda_idt: f64,
    #[serde(default)]
    pub lambda_cls: f64,
}

impl LossWeights {
    pub fn pix2pix() -> Self {
        Self { lambda_l1: 100.0, lambda_cyc1: 0.0, lambda_cyc2: 0.0, lambda_idt: 0.0, lambda_cls: 0.0 }
    }

    pub fn cyclegan() -> Self {
        Self { lambda_l1: 0.0, lambda_cyc1: 10.0, lambda_cyc2: 10.0, lambda_idt: 0.3, lambda_cls: 0.0 }
    }

    pub fn sharegan() -> Self {
        Self { lambda_idt: 0.5, ..Self::cyclegan() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_l1, self.lambda_cyc1, self.lambda_cyc2, self.lambda_idt, self.lambda_cls];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.lambda_cls != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_cls must be 0 (no classification head), got {}",
                self.lambda_cls
            )));
        }
        Ok(())
    }
}

/// Adversarial formulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// Cross-entropy on logits; non-saturating generator term.
    #[default]
    LogSigmoid,
    LeastSquares,
}

impl std::str::FromStr for AdversarialLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_sigmoid" => Ok(AdversarialLoss::LogSigmoid),
            "least_squares" => Ok(AdversarialLoss::LeastSquares),
            _ => Err(Error::InvalidArgument(format!("unknown adversarial loss '{s}' (log_sigmoid|least_squares)"))),
        }
    }
}

/// `(gen_term, disc_term)` of the log-sigmoid objective over pre-sigmoid
/// scores.
pub fn cgan_loss(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument("cgan_loss needs nonempty score batches".into()));
    }
    if real.iter().chain(fake).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("discriminator score".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x).
    let gen = mean(fake, &|x| softplus(-x));
    let disc = mean(real, &|x| softplus(-x)) + mean(fake, &softplus);
    Ok((gen, disc))
}

/// Generator adversarial term on the scores of generated samples.
pub fn generator_adversarial<T: Real>(g: &mut Graph<T>, fake: NodeId, kind: AdversarialLoss) -> NodeId {
    match kind {
        AdversarialLoss::LogSigmoid => g.bce_with_logits(fake, 1.0),
        AdversarialLoss::LeastSquares => g.mean_sq_to_const(fake, 1.0),
    }
}

/// Discriminator term; `fake` should come from detached generator output.
pub fn discriminator_adversarial<T: Real>(g: &mut Graph<T>, real: NodeId, fake: NodeId, kind: AdversarialLoss) -> NodeId {
    let (r, f) = match kind {
        AdversarialLoss::LogSigmoid => (g.bce_with_logits(real, 1.0), g.bce_with_logits(fake, 0.0)),
        AdversarialLoss::LeastSquares => (g.mean_sq_to_const(real, 1.0), g.mean_sq_to_const(fake, 0.0)),
    };
    g.weighted_sum(&[(r, 1.0), (f, 1.0)])
}

/// Mean absolute voxel difference.
pub fn l1_loss(y_hat: &Volume, y: &Volume) -> Result<f64> {
    y_hat.ensure_same_shape(y, "l1_loss")?;
    let s: f64 = y_hat.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / y.len() as f64)
}

/// L1 between an input and its round trip through both generators.
pub fn cycle_loss(x: &Volume, x_reconstructed: &Volume) -> Result<f64> {
    l1_loss(x_reconstructed, x)
}

/// L1 between a generator's output on its own target domain and the input.
pub fn identity_loss(g_same_domain_out: &Volume, x: &Volume) -> Result<f64> {
    l1_loss(g_same_domain_out, x)
}

/// Identity term summed over both domains.
pub fn identity_loss_pair(gp_of_pet: &Volume, pet: &Volume, gm_of_mri: &Volume, mri: &Volume) -> Result<f64> {
    Ok(identity_loss(gp_of_pet, pet)? + identity_loss(gm_of_mri, mri)?)
}

/// Generator-side terms of a cycle objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CycleTerms {
    /// Adversarial term of the MRI→PET generator against the PET critic.
    pub adv_mri_to_pet: f64,
    /// Adversarial term of the PET→MRI generator against the MRI critic.
    pub adv_pet_to_mri: f64,
    /// `L1(G2(G1(mri)), mri)`.
    pub cycle_mri: f64,
    /// `L1(G1(G2(pet)), pet)`.
    pub cycle_pet: f64,
    /// Identity term summed over both domains.
    pub identity: f64,
}

impl CycleTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [self.adv_mri_to_pet, self.adv_pet_to_mri, self.cycle_mri, self.cycle_pet, self.identity]
    }
}

/// Coefficients of [`CycleTerms::as_array`] in the cycle objective.
pub fn cycle_coefficients(w: &LossWeights) -> [f64; 5] {
    [1.0, 1.0, w.lambda_cyc1, w.lambda_cyc2, w.lambda_idt]
}

/// Coefficients of `(adversarial, l1)` in the Pix2pix generator objective.
pub fn pix2pix_coefficients(w: &LossWeights) -> [f64; 2] {
    [1.0, w.lambda_l1]
}

pub fn pix2pix_objective(gen_term: f64, l1: f64, w: &LossWeights) -> f64 {
    let [a, b] = pix2pix_coefficients(w);
    a * gen_term + b * l1
}

pub fn cyclegan_objective(terms: &CycleTerms, w: &LossWeights) -> f64 {
    terms.as_array().iter().zip(cycle_coefficients(w)).map(|(t, c)| c * t).sum()
}

/// The cycle objective with the classification term, which must be
/// disabled.
pub fn sharegan_objective(terms: &CycleTerms, w: &LossWeights) -> Result<f64> {
    if w.lambda_cls != 0.0 {
        return Err(Error::InvalidArgument(format!("lambda_cls must be 0, got {}", w.lambda_cls)));
    }
    Ok(cyclegan_objective(terms, w))
}

/// Graph nodes of [`CycleTerms`], same order as [`CycleTerms::as_array`].
pub fn cycle_objective_node<T: Real>(g: &mut Graph<T>, terms: [NodeId; 5], w: &LossWeights) -> NodeId {
    let c = cycle_coefficients(w);
    let pairs: Vec<(NodeId, f64)> = terms.into_iter().zip(c).collect();
    g.weighted_sum(&pairs)
}

pub fn pix2pix_objective_node<T: Real>(g: &mut Graph<T>, adv: NodeId, l1: NodeId, w: &LossWeights) -> NodeId {
    let [a, b] = pix2pix_coefficients(w);
    g.weighted_sum(&[(adv, a), (l1, b)])
}
