//! 3D generator and discriminator architectures.
//!
//! Networks own a [`ParamSet`] plus the ids of their layers and build their
//! forward pass into a caller-supplied [`Graph`]. Inputs are batched as
//! (N, C, D, H, W).

use autograd::{ConvParams, Graph, NodeId, ParamId, ParamSet, Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    condition_image_add, condition_latent_add, condition_latent_concat, ConditioningMode, Fusion,
};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Standard deviation of the weight initialization.
pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    /// Output channels of each stride-2 encoder convolution; the decoder
    /// mirrors them.
    pub encoder_channels: Vec<usize>,
    pub resnet_blocks: usize,
    pub out_channels: usize,
    /// Dropout probability in the first two decoder layers at train time.
    pub dropout: f64,
    /// Initialize the final layer to zero so the untrained output is 0.
    pub zero_init_output: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            encoder_channels: vec![32, 64, 128],
            resnet_blocks: 6,
            out_channels: 1,
            dropout: 0.0,
            zero_init_output: false,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("generator channel counts must be positive".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::InvalidArgument("generator needs at least one nonzero encoder stage".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Spatial reduction factor of the encoder.
    pub fn downsampling(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    pub fn bottleneck_shape(&self, input: [usize; 3]) -> Result<[usize; 4]> {
        let f = self.downsampling();
        if input.iter().any(|&n| n == 0 || n % f != 0) {
            return Err(Error::Shape(format!("generator input extents {input:?} must be positive multiples of {f}")));
        }
        let [d, h, w] = input.map(|n| n / f);
        Ok([self.bottleneck_channels(), d, h, w])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub fc_hidden: Vec<usize>,
    /// Spatial extent of the volumes this discriminator scores.
    pub input_shape: [usize; 3],
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self::for_shape(1, [128; 3])
    }
}

impl DiscriminatorSpec {
    pub fn for_shape(in_channels: usize, input_shape: [usize; 3]) -> Self {
        Self {
            in_channels,
            conv_channels: vec![32, 64, 128, 256, 512],
            fc_hidden: vec![128, 32],
            input_shape,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::InvalidArgument("discriminator channel counts must be positive".into()));
        }
        if self.fc_hidden.contains(&0) {
            return Err(Error::InvalidArgument("discriminator hidden widths must be positive".into()));
        }
        let min = 1usize << self.conv_channels.len();
        if self.input_shape.iter().any(|&n| n < min) {
            return Err(Error::Shape(format!(
                "discriminator input {:?} too small for {} stride-2 stages (need >= {min} per axis)",
                self.input_shape,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    fn conv_params() -> ConvParams {
        ConvParams::cubic(3, 2, 1)
    }

    /// Spatial extent after the convolution stack.
    pub fn feature_extent(&self) -> [usize; 3] {
        let mut e = self.input_shape;
        for _ in &self.conv_channels {
            e = Self::conv_params().output_extent(e).expect("validated extent");
        }
        e
    }

    pub fn flat_features(&self) -> usize {
        self.feature_extent().iter().product::<usize>() * self.conv_channels.last().expect("validated")
    }
}

/// Weight and bias ids of one layer.
#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

fn add_layer<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    wshape: &[usize],
    bias_len: usize,
    rng: &mut impl Rng,
    zero: bool,
) -> Layer {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let w = Tensor::from_fn(wshape, |_| if zero { T::zero() } else { T::of(normal.sample(rng)) });
    Layer {
        w: params.add(format!("{name}.w"), w),
        b: params.add(format!("{name}.b"), Tensor::zeros(&[bias_len])),
    }
}

/// Intermediate nodes of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTrace {
    /// Encoder output before conditioning.
    pub encoded: NodeId,
    /// Latent-concat only: encoder output with the condition channel.
    pub concatenated: Option<NodeId>,
    /// Conditioned feature map that enters the residual blocks.
    pub bottleneck: NodeId,
    pub output: NodeId,
}

/// Dropout source for training passes; `None` evaluates deterministically.
pub type DropoutRng<'a> = Option<&'a mut dyn rand::RngCore>;

#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    spec: GeneratorSpec,
    mode: ConditioningMode,
    pub params: ParamSet<T>,
    encoder: Vec<Layer>,
    blocks: Vec<[Layer; 2]>,
    decoder: Vec<Layer>,
    fusion: Option<Fusion>,
}

const ENC: ConvParams = ConvParams { kernel: [3; 3], stride: [2; 3], padding: [1; 3] };
const SAME: ConvParams = ConvParams { kernel: [3; 3], stride: [1; 3], padding: [1; 3] };

pub fn build_generator<T: Real>(spec: &GeneratorSpec, mode: ConditioningMode, rng: &mut impl Rng) -> Result<Generator<T>> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut encoder = Vec::new();
    let mut cin = spec.in_channels;
    for (i, &c) in spec.encoder_channels.iter().enumerate() {
        encoder.push(add_layer(&mut params, &format!("enc{i}"), &[c, cin, 3, 3, 3], c, rng, false));
        cin = c;
    }
    let width = spec.bottleneck_channels();
    let fusion = (mode == ConditioningMode::LatentConcat).then(|| {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Fusion::init(&mut params, "fusion", width, INIT_STD, &mut || normal.sample(rng))
    });
    let blocks = (0..spec.resnet_blocks)
        .map(|i| {
            [0, 1].map(|j| add_layer(&mut params, &format!("res{i}.conv{j}"), &[width, width, 3, 3, 3], width, rng, false))
        })
        .collect();
    let mut decoder = Vec::new();
    let mut outs: Vec<usize> = spec.encoder_channels.iter().rev().skip(1).copied().collect();
    outs.push(spec.out_channels);
    let mut cin = width;
    let last = outs.len() - 1;
    for (i, &c) in outs.iter().enumerate() {
        let zero = i == last && spec.zero_init_output;
        decoder.push(add_layer(&mut params, &format!("dec{i}"), &[cin, c, 3, 3, 3], c, rng, zero));
        cin = c;
    }
    Ok(Generator { spec: spec.clone(), mode, params, encoder, blocks, decoder, fusion })
}

impl<T: Real> Generator<T> {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            spec: self.spec.clone(),
            mode: self.mode,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            blocks: self.blocks.clone(),
            decoder: self.decoder.clone(),
            fusion: self.fusion,
        }
    }

    fn check_input(&self, g: &Graph<T>, x: NodeId) -> Result<[usize; 3]> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!("generator expects (N, {}, D, H, W), got {s:?}", self.spec.in_channels)));
        }
        let spatial = [s[2], s[3], s[4]];
        self.spec.bottleneck_shape(spatial)?;
        Ok(spatial)
    }

    fn layer(&self, g: &mut Graph<T>, l: Layer) -> (NodeId, NodeId) {
        (g.param(&self.params, l.w), g.param(&self.params, l.b))
    }

    /// Encoder stack only.
    pub fn encode(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        self.check_input(g, x)?;
        let mut h = x;
        for &l in &self.encoder {
            let (w, b) = self.layer(g, l);
            h = g.conv3d(h, w, Some(b), ENC);
            h = g.instance_norm(h, NORM_EPS);
            h = g.relu(h);
        }
        Ok(h)
    }

    /// Full pass exposing intermediate nodes. `abeta` (shape (N)) is required
    /// for every mode except `none`, where it is ignored.
    pub fn trace(&self, g: &mut Graph<T>, x: NodeId, abeta: Option<NodeId>, mut dropout: DropoutRng<'_>) -> Result<GeneratorTrace> {
        let spatial = self.check_input(g, x)?;
        let abeta = match (self.mode.uses_abeta(), abeta) {
            (false, _) => None,
            (true, Some(a)) => Some(a),
            (true, None) => return Err(Error::InvalidArgument(format!("{} generator needs an abeta value", self.mode))),
        };
        let input = match (self.mode, abeta) {
            (ConditioningMode::ImageAdd, Some(a)) => condition_image_add(g, x, a)?,
            _ => x,
        };
        let encoded = self.encode(g, input)?;
        let width = self.spec.bottleneck_channels();
        let (bottleneck, concatenated) = match (self.mode, abeta) {
            (ConditioningMode::LatentAdd, Some(a)) => (condition_latent_add(g, encoded, a, width)?, None),
            (ConditioningMode::LatentConcat, Some(a)) => {
                let fusion = self.fusion.as_ref().expect("latent_concat generator has a fusion layer");
                let t = condition_latent_concat(g, encoded, a, &self.params, fusion)?;
                (t.fused, Some(t.concatenated))
            }
            _ => (encoded, None),
        };
        let mut h = bottleneck;
        for &[l0, l1] in &self.blocks {
            let (w0, b0) = self.layer(g, l0);
            let mut r = g.conv3d(h, w0, Some(b0), SAME);
            r = g.instance_norm(r, NORM_EPS);
            r = g.relu(r);
            let (w1, b1) = self.layer(g, l1);
            r = g.conv3d(r, w1, Some(b1), SAME);
            r = g.instance_norm(r, NORM_EPS);
            h = g.add(h, r);
        }
        let last = self.decoder.len() - 1;
        for (i, &l) in self.decoder.iter().enumerate() {
            let (w, b) = self.layer(g, l);
            h = g.conv_transpose3d(h, w, Some(b), ENC, [1; 3]);
            if i == last {
                h = g.tanh(h);
                break;
            }
            h = g.instance_norm(h, NORM_EPS);
            h = g.relu(h);
            if let (true, Some(rng)) = (i < 2 && self.spec.dropout > 0.0, dropout.as_deref_mut()) {
                let p = self.spec.dropout;
                let keep = T::of(1.0 / (1.0 - p));
                let mask = (0..g.value(h).len()).map(|_| if rng.random_bool(p) { T::zero() } else { keep }).collect();
                h = g.mask(h, mask);
            }
        }
        debug_assert_eq!(&g.shape(h)[2..], &spatial);
        Ok(GeneratorTrace { encoded, concatenated, bottleneck, output: h })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, abeta: Option<NodeId>, dropout: DropoutRng<'_>) -> Result<NodeId> {
        Ok(self.trace(g, x, abeta, dropout)?.output)
    }

    /// Evaluation-mode translation of one normalized volume.
    pub fn apply(&self, x: &Volume, abeta_norm: f64) -> Result<Volume> {
        let mut g = Graph::new();
        let xn = g.constant(x.to_tensor());
        let a = g.constant(Tensor::new(&[1], vec![T::of(abeta_norm)]));
        let out = self.forward(&mut g, xn, Some(a), None)?;
        Volume::from_tensor(g.value(out), x.spacing())
    }
}

/// One generator used for both translation directions.
#[derive(Clone, Debug)]
pub struct SharedGenerator<T: Real> {
    pub inner: Generator<T>,
}

/// Ties two generators into one parameter set (the first one's).
pub fn tie_generators<T: Real>(g1: Generator<T>, g2: &Generator<T>) -> Result<SharedGenerator<T>> {
    if g1.spec != g2.spec || g1.mode != g2.mode {
        return Err(Error::InvalidArgument("cannot tie generators with different specs".into()));
    }
    Ok(SharedGenerator { inner: g1 })
}

impl<T: Real> SharedGenerator<T> {
    pub fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    pub fn mri_to_pet(&self) -> &Generator<T> {
        &self.inner
    }

    pub fn pet_to_mri(&self) -> &Generator<T> {
        &self.inner
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
    convs: Vec<Layer>,
    fcs: Vec<Layer>,
}

pub fn build_discriminator<T: Real>(spec: &DiscriminatorSpec, rng: &mut impl Rng) -> Result<Discriminator<T>> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut convs = Vec::new();
    let mut cin = spec.in_channels;
    for (i, &c) in spec.conv_channels.iter().enumerate() {
        convs.push(add_layer(&mut params, &format!("conv{i}"), &[c, cin, 3, 3, 3], c, rng, false));
        cin = c;
    }
    let mut fcs = Vec::new();
    let mut k = spec.flat_features();
    for (i, &m) in spec.fc_hidden.iter().chain(std::iter::once(&1)).enumerate() {
        fcs.push(add_layer(&mut params, &format!("fc{i}"), &[m, k], m, rng, false));
        k = m;
    }
    Ok(Discriminator { spec: spec.clone(), params, convs, fcs })
}

impl<T: Real> Discriminator<T> {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { spec: self.spec.clone(), params: self.params.cast(), convs: self.convs.clone(), fcs: self.fcs.clone() }
    }

    /// Pre-sigmoid scores, shape (N).
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let want = &self.spec.input_shape;
        if s.len() != 5 || s[1] != self.spec.in_channels || s[2..] != want[..] {
            return Err(Error::Shape(format!(
                "discriminator expects (N, {}, {}, {}, {}), got {s:?}",
                self.spec.in_channels, want[0], want[1], want[2]
            )));
        }
        let slope = self.spec.leaky_slope;
        let mut h = x;
        for &l in &self.convs {
            let (w, b) = (g.param(&self.params, l.w), g.param(&self.params, l.b));
            h = g.conv3d(h, w, Some(b), DiscriminatorSpec::conv_params());
            h = g.leaky_relu(h, slope);
        }
        h = g.reshape(h, &[s[0], self.spec.flat_features()]);
        let last = self.fcs.len() - 1;
        for (i, &l) in self.fcs.iter().enumerate() {
            let (w, b) = (g.param(&self.params, l.w), g.param(&self.params, l.b));
            h = g.linear(h, w, Some(b));
            if i < last {
                h = g.leaky_relu(h, slope);
            }
        }
        Ok(g.reshape(h, &[s[0]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec { encoder_channels: vec![4, 6, 8], resnet_blocks: 2, ..GeneratorSpec::default() }
    }

    fn input(g: &mut Graph<f64>, n: usize, e: usize) -> NodeId {
        g.constant(Tensor::from_fn(&[n, 1, e, e, e], |i| ((i as f64) * 0.731).sin() * 0.9))
    }

    /// Closed-form parameter count of the default-shaped generator.
    fn expected_generator_params(spec: &GeneratorSpec, concat: bool) -> usize {
        let conv = |ci: usize, co: usize| ci * co * 27 + co;
        let mut n = 0;
        let mut cin = spec.in_channels;
        for &c in &spec.encoder_channels {
            n += conv(cin, c);
            cin = c;
        }
        n += spec.resnet_blocks * 2 * conv(cin, cin);
        let mut outs: Vec<usize> = spec.encoder_channels.iter().rev().skip(1).copied().collect();
        outs.push(spec.out_channels);
        for c in outs {
            n += conv(cin, c);
            cin = c;
        }
        if concat {
            n += 129 * 128 + 128;
        }
        n
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let spec = GeneratorSpec::default();
        let plain = build_generator::<f32>(&spec, ConditioningMode::None, &mut rng()).unwrap();
        let cat = build_generator::<f32>(&spec, ConditioningMode::LatentConcat, &mut rng()).unwrap();
        assert_eq!(plain.num_params(), expected_generator_params(&spec, false));
        assert_eq!(cat.num_params() - plain.num_params(), 129 * 128 + 128);
        let shared = tie_generators(plain.clone(), &plain).unwrap();
        assert_eq!(2 * shared.num_params(), 2 * plain.num_params());
    }

    #[test]
    fn output_shape_and_range() {
        for mode in ConditioningMode::ALL {
            let gen = build_generator::<f64>(&small_spec(), mode, &mut rng()).unwrap();
            let mut g = Graph::new();
            let x = input(&mut g, 2, 16);
            let a = g.constant(Tensor::new(&[2], vec![0.2, 0.8]));
            let t = gen.trace(&mut g, x, Some(a), None).unwrap();
            assert_eq!(g.shape(t.output), &[2, 1, 16, 16, 16]);
            assert_eq!(g.shape(t.bottleneck), &[2, 8, 2, 2, 2]);
            assert!(g.value(t.output).data().iter().all(|v| v.abs() < 1.0));
            assert_eq!(t.concatenated.is_some(), mode == ConditioningMode::LatentConcat);
            if let Some(c) = t.concatenated {
                assert_eq!(g.shape(c), &[2, 9, 2, 2, 2]);
            }
        }
    }

    #[test]
    fn zero_initialized_output_layer_gives_zero_field() {
        let spec = GeneratorSpec { zero_init_output: true, ..small_spec() };
        let gen = build_generator::<f64>(&spec, ConditioningMode::None, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = input(&mut g, 1, 8);
        let y = gen.forward(&mut g, x, None, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let gen = build_generator::<f64>(&small_spec(), ConditioningMode::ImageAdd, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = input(&mut g, 1, 12);
        assert!(matches!(gen.forward(&mut g, x, None, None), Err(Error::Shape(_))));
        let x = input(&mut g, 1, 8);
        assert!(matches!(gen.forward(&mut g, x, None, None), Err(Error::InvalidArgument(_))));
        let other = build_generator::<f64>(&GeneratorSpec::default(), ConditioningMode::ImageAdd, &mut rng()).unwrap();
        assert!(tie_generators(gen, &other).is_err());
        assert!(DiscriminatorSpec::for_shape(1, [16, 32, 32]).validate().is_err());
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_is_not() {
        let spec = GeneratorSpec { dropout: 0.5, ..small_spec() };
        let gen = build_generator::<f64>(&spec, ConditioningMode::None, &mut rng()).unwrap();
        let run = |drop: Option<&mut ChaCha8Rng>| {
            let mut g = Graph::new();
            let x = input(&mut g, 1, 16);
            let y = gen.forward(&mut g, x, None, drop.map(|r| r as &mut dyn rand::RngCore)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(None), run(None));
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_ne!(run(Some(&mut r1)), run(Some(&mut r2)));
    }

    #[test]
    fn discriminator_scores_each_sample() {
        let spec = DiscriminatorSpec { conv_channels: vec![2, 3, 4, 4, 5], fc_hidden: vec![6, 3], ..DiscriminatorSpec::for_shape(1, [32; 3]) };
        let d = build_discriminator::<f64>(&spec, &mut rng()).unwrap();
        let mut g = Graph::new();
        let one = g.constant(Tensor::from_fn(&[1, 1, 32, 32, 32], |i| (i as f64 * 0.01).cos()));
        let s1 = d.forward(&mut g, one).unwrap();
        assert_eq!(g.shape(s1), &[1]);
        let mut data = g.value(one).data().to_vec();
        data.extend_from_within(..);
        let two = g.constant(Tensor::new(&[2, 1, 32, 32, 32], data));
        let s2 = d.forward(&mut g, two).unwrap();
        let v = g.value(s2).data();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0], g.value(s1).item());
        let wrong = g.constant(Tensor::zeros(&[1, 1, 64, 64, 64]));
        assert!(d.forward(&mut g, wrong).is_err());
    }
}
