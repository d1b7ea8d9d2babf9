//! Training loops for the three models, run directories and inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use autograd::{Adam, Graph, NodeId, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::compose_random_pipeline;
use crate::checkpoint::{load_into, named_tensors, Checkpoint};
use crate::conditioning::ConditioningMode;
use crate::config::{ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_objective_node, discriminator_adversarial, generator_adversarial, pix2pix_objective_node,
};
use crate::metrics::{ssim3d, to_display_range, SsimWindow, DISPLAY_MAX};
use crate::networks::{build_discriminator, build_generator, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::volume::{denormalize_intensity, normalize_intensity, NormalizationStats, PairedSample, Volume};

pub const GENERATOR_MRI_TO_PET: &str = "generator_mri_to_pet";
pub const GENERATOR_PET_TO_MRI: &str = "generator_pet_to_mri";
pub const GENERATOR_SHARED: &str = "generator_shared";
pub const DISCRIMINATOR_PET: &str = "discriminator_pet";
pub const DISCRIMINATOR_MRI: &str = "discriminator_mri";

/// RNG streams derived from the configured seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Networks of one model. ShareGAN uses `mri_to_pet` for both directions.
#[derive(Clone, Debug)]
pub struct Networks {
    pub model: ModelKind,
    pub mri_to_pet: Generator<f32>,
    pub pet_to_mri: Option<Generator<f32>>,
    pub critic_pet: Discriminator<f32>,
    pub critic_mri: Option<Discriminator<f32>>,
}

fn discriminator_spec(model: ModelKind, shape: [usize; 3]) -> DiscriminatorSpec {
    // The Pix2pix critic scores (input, output) pairs.
    let channels = if model == ModelKind::Pix2pix { 2 } else { 1 };
    DiscriminatorSpec::for_shape(channels, shape)
}

impl Networks {
    pub fn build(
        model: ModelKind,
        spec: &GeneratorSpec,
        mode: ConditioningMode,
        shape: [usize; 3],
        seed: u64,
    ) -> Result<Self> {
        spec.bottleneck_shape(shape)?;
        let mut rng = seeded(seed, STREAM_INIT);
        let dspec = discriminator_spec(model, shape);
        let mri_to_pet = build_generator(spec, mode, &mut rng)?;
        let pet_to_mri = match model {
            ModelKind::Cyclegan => Some(build_generator(spec, mode, &mut rng)?),
            _ => None,
        };
        let critic_pet = build_discriminator(&dspec, &mut rng)?;
        let critic_mri = match model {
            ModelKind::Pix2pix => None,
            _ => Some(build_discriminator(&dspec, &mut rng)?),
        };
        Ok(Self { model, mri_to_pet, pet_to_mri, critic_pet, critic_mri })
    }

    /// Generator used for the PET→MRI direction.
    pub fn reverse(&self) -> Option<&Generator<f32>> {
        match self.model {
            ModelKind::Pix2pix => None,
            ModelKind::Cyclegan => self.pet_to_mri.as_ref(),
            ModelKind::Sharegan => Some(&self.mri_to_pet),
        }
    }

    /// Distinct generator parameter sets being trained.
    pub fn generator_sets(&self) -> Vec<&ParamSet<f32>> {
        let mut v = vec![&self.mri_to_pet.params];
        v.extend(self.pet_to_mri.as_ref().map(|g| &g.params));
        v
    }

    pub fn generator_param_count(&self) -> usize {
        self.generator_sets().iter().map(|p| p.num_scalars()).sum()
    }

    fn generator_name(&self) -> &'static str {
        if self.model == ModelKind::Sharegan {
            GENERATOR_SHARED
        } else {
            GENERATOR_MRI_TO_PET
        }
    }

    pub fn to_checkpoint(&self, stats: NormalizationStats, config_hash: &str, epoch: usize, val_ssim: Option<f64>) -> Checkpoint {
        let mut networks = vec![(self.generator_name().to_owned(), named_tensors(&self.mri_to_pet.params))];
        if let Some(g) = &self.pet_to_mri {
            networks.push((GENERATOR_PET_TO_MRI.to_owned(), named_tensors(&g.params)));
        }
        networks.push((DISCRIMINATOR_PET.to_owned(), named_tensors(&self.critic_pet.params)));
        if let Some(d) = &self.critic_mri {
            networks.push((DISCRIMINATOR_MRI.to_owned(), named_tensors(&d.params)));
        }
        Checkpoint {
            model: self.model,
            conditioning: self.mri_to_pet.mode(),
            generator: self.mri_to_pet.spec().clone(),
            discriminator: self.critic_pet.spec().clone(),
            stats,
            config_hash: config_hash.to_owned(),
            epoch,
            val_ssim,
            networks,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut nets = Self::build(
            ckpt.model,
            &ckpt.generator,
            ckpt.conditioning,
            ckpt.discriminator.input_shape,
            0,
        )?;
        let need = |name: &str| {
            ckpt.network(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks network {name}")))
        };
        let gname = nets.generator_name();
        load_into(&mut nets.mri_to_pet.params, need(gname)?, gname)?;
        if let Some(g) = &mut nets.pet_to_mri {
            load_into(&mut g.params, need(GENERATOR_PET_TO_MRI)?, GENERATOR_PET_TO_MRI)?;
        }
        load_into(&mut nets.critic_pet.params, need(DISCRIMINATOR_PET)?, DISCRIMINATOR_PET)?;
        if let Some(d) = &mut nets.critic_mri {
            load_into(&mut d.params, need(DISCRIMINATOR_MRI)?, DISCRIMINATOR_MRI)?;
        }
        Ok(nets)
    }
}

/// A training/validation pair mapped to the network's input range.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub subject_id: String,
    pub mri: Volume,
    pub pet: Volume,
    pub abeta_norm: f64,
}

pub fn prepare(sample: &PairedSample, stats: &NormalizationStats) -> Result<PreparedSample> {
    Ok(PreparedSample {
        subject_id: sample.subject_id.clone(),
        mri: normalize_intensity(&sample.mri, stats.mri)?,
        pet: normalize_intensity(&sample.pet, stats.pet)?,
        abeta_norm: stats.normalize_abeta(sample.abeta_ratio),
    })
}

fn stack(vols: &[&Volume]) -> Tensor<f32> {
    let [d, h, w] = vols[0].shape();
    let data = vols.iter().flat_map(|v| v.data().iter().copied()).collect();
    Tensor::new(&[vols.len(), 1, d, h, w], data)
}

/// Named loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub terms: Vec<(&'static str, f64)>,
}

impl StepLosses {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        match self.terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::Divergence(format!("{name} = {v} at step {step}"))),
            None => Ok(()),
        }
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    nets: Networks,
    opt_g: Adam<f32>,
    opt_g_rev: Adam<f32>,
    opt_d_pet: Adam<f32>,
    opt_d_mri: Adam<f32>,
    augment_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, shape: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::build(cfg.model, &cfg.generator(), cfg.conditioning, shape, cfg.seed)?;
        let adam = || Adam::new(cfg.learning_rate, cfg.betas.0, cfg.betas.1);
        Ok(Self {
            cfg: cfg.clone(),
            nets,
            opt_g: adam(),
            opt_g_rev: adam(),
            opt_d_pet: adam(),
            opt_d_mri: adam(),
            augment_rng: seeded(cfg.seed ^ cfg.augment.seed, STREAM_AUGMENT),
            dropout_rng: seeded(cfg.seed, STREAM_DROPOUT),
            data_rng: seeded(cfg.seed, STREAM_DATA),
            steps: 0,
        })
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for opt in [&mut self.opt_g, &mut self.opt_g_rev, &mut self.opt_d_pet, &mut self.opt_d_mri] {
            opt.lr = lr;
        }
    }

    /// Shuffled index batches for one epoch over `n` samples.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.data_rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One generator update followed by one discriminator update on the
    /// same (detached) generated volumes.
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let batch: Vec<PreparedSample> = if self.cfg.augment_enabled {
            batch.iter().map(|s| self.augment(s)).collect::<Result<_>>()?
        } else {
            batch.iter().map(|&s| s.clone()).collect()
        };
        let mri = stack(&batch.iter().map(|s| &s.mri).collect::<Vec<_>>());
        let pet = stack(&batch.iter().map(|s| &s.pet).collect::<Vec<_>>());
        let abeta = Tensor::new(&[batch.len()], batch.iter().map(|s| s.abeta_norm as f32).collect());
        let losses = match self.nets.model {
            ModelKind::Pix2pix => self.pix2pix_step(mri, pet, abeta)?,
            ModelKind::Cyclegan | ModelKind::Sharegan => self.cycle_step(mri, pet, abeta)?,
        };
        self.steps += 1;
        losses.check_finite(self.steps)?;
        Ok(losses)
    }

    fn augment(&mut self, s: &PreparedSample) -> Result<PreparedSample> {
        let paired = PairedSample {
            subject_id: s.subject_id.clone(),
            mri: s.mri.clone(),
            pet: s.pet.clone(),
            abeta_ratio: 1.0,
        };
        let out = compose_random_pipeline(&paired, &self.cfg.augment, &mut self.augment_rng)?;
        Ok(PreparedSample { subject_id: out.subject_id, mri: out.mri, pet: out.pet, abeta_norm: s.abeta_norm })
    }

    fn pix2pix_step(&mut self, mri: Tensor<f32>, pet: Tensor<f32>, abeta: Tensor<f32>) -> Result<StepLosses> {
        let kind = self.cfg.adversarial;
        let weights = self.cfg.weights();
        let nets = &self.nets;

        let mut g = Graph::new();
        let (x, y, a) = (g.constant(mri.clone()), g.constant(pet.clone()), g.constant(abeta));
        let fake = nets.mri_to_pet.forward(&mut g, x, Some(a), Some(&mut self.dropout_rng))?;
        let pair = g.concat_channels(x, fake);
        let score = nets.critic_pet.forward(&mut g, pair)?;
        let adv = generator_adversarial(&mut g, score, kind);
        let l1 = g.mean_abs_diff(fake, y);
        let total = pix2pix_objective_node(&mut g, adv, l1, &weights);
        ensure_finite(&g, total, "generator objective", self.steps)?;
        let grads = g.backward(total);
        let fake_value = g.value(fake).clone();
        let gg = grads.for_params(&self.nets.mri_to_pet.params);
        self.opt_g.step(&mut self.nets.mri_to_pet.params, &gg);

        let mut gd = Graph::new();
        let (x, y, f) = (gd.constant(mri), gd.constant(pet), gd.constant(fake_value));
        let real_pair = gd.concat_channels(x, y);
        let fake_pair = gd.concat_channels(x, f);
        let rs = self.nets.critic_pet.forward(&mut gd, real_pair)?;
        let fs = self.nets.critic_pet.forward(&mut gd, fake_pair)?;
        let d = discriminator_adversarial(&mut gd, rs, fs, kind);
        ensure_finite(&gd, d, "discriminator objective", self.steps)?;
        let dgrads = gd.backward(d);
        let dg = dgrads.for_params(&self.nets.critic_pet.params);
        self.opt_d_pet.step(&mut self.nets.critic_pet.params, &dg);

        Ok(StepLosses {
            terms: vec![
                ("adversarial", g.value(adv).item() as f64),
                ("l1_mri_to_pet", g.value(l1).item() as f64),
                ("generator_total", g.value(total).item() as f64),
                ("discriminator_pet", gd.value(d).item() as f64),
            ],
        })
    }

    fn cycle_step(&mut self, mri: Tensor<f32>, pet: Tensor<f32>, abeta: Tensor<f32>) -> Result<StepLosses> {
        let kind = self.cfg.adversarial;
        let weights = self.cfg.weights();
        let nets = &self.nets;
        let forward_g = &nets.mri_to_pet;
        let reverse_g = nets.reverse().expect("cycle models have a reverse generator");
        let critic_mri = nets.critic_mri.as_ref().expect("cycle models have an MRI critic");

        let mut g = Graph::new();
        let (xm, xp, a) = (g.constant(mri.clone()), g.constant(pet.clone()), g.constant(abeta));
        let fake_pet = forward_g.forward(&mut g, xm, Some(a), None)?;
        let fake_mri = reverse_g.forward(&mut g, xp, Some(a), None)?;
        let sp = nets.critic_pet.forward(&mut g, fake_pet)?;
        let sm = critic_mri.forward(&mut g, fake_mri)?;
        let adv_mp = generator_adversarial(&mut g, sp, kind);
        let adv_pm = generator_adversarial(&mut g, sm, kind);
        let rec_mri = reverse_g.forward(&mut g, fake_pet, Some(a), None)?;
        let rec_pet = forward_g.forward(&mut g, fake_mri, Some(a), None)?;
        let cyc_mri = g.mean_abs_diff(rec_mri, xm);
        let cyc_pet = g.mean_abs_diff(rec_pet, xp);
        let identity = if weights.lambda_idt > 0.0 {
            let same_pet = forward_g.forward(&mut g, xp, Some(a), None)?;
            let same_mri = reverse_g.forward(&mut g, xm, Some(a), None)?;
            let ip = g.mean_abs_diff(same_pet, xp);
            let im = g.mean_abs_diff(same_mri, xm);
            g.weighted_sum(&[(ip, 1.0), (im, 1.0)])
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let l1 = g.mean_abs_diff(fake_pet, xp);
        let total = cycle_objective_node(&mut g, [adv_mp, adv_pm, cyc_mri, cyc_pet, identity], &weights);
        ensure_finite(&g, total, "generator objective", self.steps)?;
        let grads = g.backward(total);
        let fake_pet_v = g.value(fake_pet).clone();
        let fake_mri_v = g.value(fake_mri).clone();
        let gsets = grads.for_params(&self.nets.mri_to_pet.params);
        let rsets = self.nets.pet_to_mri.as_ref().map(|gr| grads.for_params(&gr.params));
        self.opt_g.step(&mut self.nets.mri_to_pet.params, &gsets);
        if let (Some(gr), Some(rg)) = (self.nets.pet_to_mri.as_mut(), rsets) {
            self.opt_g_rev.step(&mut gr.params, &rg);
        }

        let mut gd = Graph::new();
        let (xm, xp) = (gd.constant(mri), gd.constant(pet));
        let (fp, fm) = (gd.constant(fake_pet_v), gd.constant(fake_mri_v));
        let critic_mri = self.nets.critic_mri.as_ref().expect("cycle models have an MRI critic");
        let rp = self.nets.critic_pet.forward(&mut gd, xp)?;
        let fpp = self.nets.critic_pet.forward(&mut gd, fp)?;
        let rm = critic_mri.forward(&mut gd, xm)?;
        let fmm = critic_mri.forward(&mut gd, fm)?;
        let d_pet = discriminator_adversarial(&mut gd, rp, fpp, kind);
        let d_mri = discriminator_adversarial(&mut gd, rm, fmm, kind);
        let d_total = gd.weighted_sum(&[(d_pet, 1.0), (d_mri, 1.0)]);
        ensure_finite(&gd, d_total, "discriminator objective", self.steps)?;
        let dgrads = gd.backward(d_total);
        let gp = dgrads.for_params(&self.nets.critic_pet.params);
        self.opt_d_pet.step(&mut self.nets.critic_pet.params, &gp);
        let critic_mri = self.nets.critic_mri.as_mut().expect("cycle models have an MRI critic");
        let gm = dgrads.for_params(&critic_mri.params);
        self.opt_d_mri.step(&mut critic_mri.params, &gm);

        let v = |gr: &Graph<f32>, id: NodeId| gr.value(id).item() as f64;
        Ok(StepLosses {
            terms: vec![
                ("adv_mri_to_pet", v(&g, adv_mp)),
                ("adv_pet_to_mri", v(&g, adv_pm)),
                ("cycle_mri", v(&g, cyc_mri)),
                ("cycle_pet", v(&g, cyc_pet)),
                ("identity", v(&g, identity)),
                ("generator_total", v(&g, total)),
                ("discriminator_pet", v(&gd, d_pet)),
                ("discriminator_mri", v(&gd, d_mri)),
                ("l1_mri_to_pet", v(&g, l1)),
            ],
        })
    }
}

fn ensure_finite(g: &Graph<f32>, id: NodeId, what: &str, step: usize) -> Result<()> {
    if g.value(id).all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} is not finite at step {}", step + 1)))
    }
}

/// Mean L1 between generated and true PET over prepared samples, in the
/// normalized range.
pub fn mean_l1(generator: &Generator<f32>, samples: &[PreparedSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let out = generator.apply(&s.mri, s.abeta_norm)?;
        sum += crate::losses::l1_loss(&out, &s.pet)?;
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Mean volumetric SSIM between generated and true PET in display range.
pub fn mean_ssim(generator: &Generator<f32>, samples: &[PreparedSample]) -> Result<f64> {
    let window = SsimWindow::default();
    let mut sum = 0.0;
    for s in samples {
        let out = to_display_range(&generator.apply(&s.mri, s.abeta_norm)?)?;
        sum += ssim3d(&out, &to_display_range(&s.pet)?, &window, DISPLAY_MAX)?;
    }
    Ok(sum / samples.len().max(1) as f64)
}

pub struct TrainData {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
}

/// Artifacts of a finished run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub steps: usize,
    pub best_val_ssim: Option<f64>,
}

pub const LOSS_LOG: &str = "losses.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// `<first 12 hex digits of the config hash>-<unix seconds>` under `root`.
pub fn default_run_dir(root: &Path, cfg: &TrainConfig) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    root.join(format!("{}-{secs}", &cfg.hash()[..12]))
}

fn common_shape(samples: &[PairedSample]) -> Result<[usize; 3]> {
    let shape = samples
        .first()
        .ok_or_else(|| Error::Data("training split is empty".into()))?
        .mri
        .shape();
    if let Some(s) = samples.iter().find(|s| s.mri.shape() != shape) {
        return Err(Error::Shape(format!(
            "subject {} has shape {:?}, expected {shape:?}",
            s.subject_id,
            s.mri.shape()
        )));
    }
    Ok(shape)
}

/// Full training run writing logs and checkpoints into `run_dir`.
/// `progress` receives a line per epoch.
pub fn train(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = common_shape(&data.train)?;
    if !data.val.is_empty() {
        common_shape(&data.val)?;
    }
    let stats = NormalizationStats::from_samples(&data.train)?;
    let train: Vec<PreparedSample> = data.train.iter().map(|s| prepare(s, &stats)).collect::<Result<_>>()?;
    let val: Vec<PreparedSample> = data.val.iter().map(|s| prepare(s, &stats)).collect::<Result<_>>()?;

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let hash = cfg.hash();
    let config_path = run_dir.join(RESOLVED_CONFIG);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let loss_path = run_dir.join(LOSS_LOG);
    let mut losses = csv::Writer::from_path(&loss_path).map_err(|e| Error::format(&loss_path, e.to_string()))?;
    losses
        .write_record(["epoch", "step", "term", "value"])
        .map_err(|e| Error::format(&loss_path, e.to_string()))?;
    let val_path = run_dir.join(VALIDATION_LOG);
    let mut val_log = fs::File::create(&val_path).map_err(|e| Error::io(&val_path, e))?;
    writeln!(val_log, "epoch,learning_rate,val_ssim,generator_params").map_err(|e| Error::io(&val_path, e))?;

    let mut trainer = Trainer::new(cfg, shape)?;
    let expected_generator_params = trainer.nets.generator_param_count();
    let best_path = run_dir.join(BEST_CHECKPOINT);
    let final_path = run_dir.join(FINAL_CHECKPOINT);
    let mut best: Option<f64> = None;
    let mut completed = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        trainer.set_learning_rate(lr);
        for batch in trainer.epoch_batches(train.len()) {
            if cfg.max_steps.is_some_and(|m| trainer.steps >= m) {
                break 'epochs;
            }
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &train[i]).collect();
            let step_losses = trainer.train_step(&refs)?;
            for (term, value) in &step_losses.terms {
                losses
                    .write_record([epoch.to_string(), trainer.steps.to_string(), term.to_string(), format!("{value:?}")])
                    .map_err(|e| Error::format(&loss_path, e.to_string()))?;
            }
        }
        completed = epoch + 1;
        if trainer.nets.generator_param_count() != expected_generator_params {
            return Err(Error::Data("generator parameter count changed during training".into()));
        }
        let val_ssim = if val.is_empty() { None } else { Some(mean_ssim(&trainer.nets.mri_to_pet, &val)?) };
        let shown = val_ssim.map_or("nan".to_owned(), |v| format!("{v:?}"));
        writeln!(val_log, "{epoch},{lr:?},{shown},{expected_generator_params}").map_err(|e| Error::io(&val_path, e))?;
        progress(&format!("epoch {}/{}: step {} val_ssim {shown}", epoch + 1, cfg.epochs, trainer.steps));
        let improved = match (val_ssim, best) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => epoch == 0,
        };
        if improved {
            best = val_ssim.or(best);
            trainer.nets.to_checkpoint(stats, &hash, completed, val_ssim).save(&best_path)?;
        }
    }
    losses.flush().map_err(|e| Error::io(&loss_path, e))?;
    if completed == 0 {
        // Stopped by max_steps inside the first epoch.
        completed = 1;
        let val_ssim = if val.is_empty() { None } else { Some(mean_ssim(&trainer.nets.mri_to_pet, &val)?) };
        best = val_ssim;
        trainer.nets.to_checkpoint(stats, &hash, completed, val_ssim).save(&best_path)?;
    }
    trainer.nets.to_checkpoint(stats, &hash, completed, None).save(&final_path)?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        steps: trainer.steps,
        best_val_ssim: best,
    })
}

/// MRI→PET inference from a checkpoint.
pub struct PetSynthesizer {
    generator: Generator<f32>,
    stats: NormalizationStats,
}

impl PetSynthesizer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.stats.validate()?;
        Ok(Self { generator: Networks::from_checkpoint(ckpt)?.mri_to_pet, stats: ckpt.stats })
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    /// Denormalized PET for a raw MRI volume and plasma ratio.
    pub fn generate(&self, mri: &Volume, abeta_ratio: f64) -> Result<Volume> {
        if !(abeta_ratio.is_finite() && abeta_ratio > 0.0) {
            return Err(Error::InvalidArgument(format!("abeta ratio must be positive, got {abeta_ratio}")));
        }
        self.generator.spec().bottleneck_shape(mri.shape())?;
        let x = normalize_intensity(mri, self.stats.mri)?;
        let out = self.generator.apply(&x, self.stats.normalize_abeta(abeta_ratio))?;
        denormalize_intensity(&out, self.stats.pet)
    }
}

pub fn generate_pet(ckpt: &Checkpoint, mri: &Volume, abeta_ratio: f64) -> Result<Volume> {
    PetSynthesizer::from_checkpoint(ckpt)?.generate(mri, abeta_ratio)
}
