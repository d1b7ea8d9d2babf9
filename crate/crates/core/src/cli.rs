//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::conditioning::ConditioningMode;
use crate::config::{ModelKind, TrainConfig};
use crate::dataset::{read_labels, write_dataset, Manifest, MaskIndex, LABELS_FILE, MASKS_FILE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_testset, SuvrInputs};
use crate::io::{read_volume, xvol};
use crate::phantom::{generate_dataset, PhantomSpec};
use crate::report::write_report;
use crate::split::{default_sizes, split_by_subject, Split, SplitAssignment};
use crate::train::{default_run_dir, train, PetSynthesizer, TrainData, BEST_CHECKPOINT};

/// Default split file name, next to the manifest.
pub const SPLIT_FILE: &str = "split.csv";

#[derive(Debug, Parser)]
#[command(name = "petsynth", version, about = "Biomarker-conditioned 3D MRI-to-PET translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    SynthData(SynthArgs),
    /// Assign subjects to train/val/test splits.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Synthesize PET for one MRI volume.
    Generate(GenerateArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Render montages and a markdown summary from an evaluation.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub subjects: usize,
    #[arg(long, default_value_t = 2)]
    pub images_per_subject: usize,
    /// Cubic volume edge length (multiple of 8).
    #[arg(long, default_value_t = 64)]
    pub shape: usize,
    #[arg(long, default_value_t = 0.05)]
    pub abeta_lo: f64,
    #[arg(long, default_value_t = 0.12)]
    pub abeta_hi: f64,
    #[arg(long, default_value_t = 0.6)]
    pub coupling: f64,
    #[arg(long, default_value_t = 0.9)]
    pub base_uptake: f64,
    #[arg(long, default_value_t = 0.02)]
    pub mri_noise: f64,
    #[arg(long, default_value_t = 0.03)]
    pub pet_noise: f64,
    #[arg(long, default_value_t = 0.03)]
    pub label_margin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image counts as `train,val,test`; proportional defaults when absent.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; `split.csv` next to the manifest by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split file; `split.csv` next to the manifest when present, otherwise
    /// a fresh split from the config's sizes and seed.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// TOML training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long = "cond")]
    pub conditioning: Option<ConditioningMode>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `log_sigmoid` or `least_squares`.
    #[arg(long)]
    pub adversarial: Option<crate::losses::AdversarialLoss>,
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    #[arg(long)]
    pub lambda_cyc1: Option<f64>,
    #[arg(long)]
    pub lambda_cyc2: Option<f64>,
    #[arg(long)]
    pub lambda_idt: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub lr_decay_start: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub encoder_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub resnet_blocks: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Parent of generated run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Exact run directory (overrides `--runs-dir`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// MRI volume (.xvol, .nii or .nii.gz).
    #[arg(long)]
    pub mri: PathBuf,
    /// Plasma Aβ42/40 ratio.
    #[arg(long)]
    pub abeta: f64,
    /// Output .xvol path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file; defaults to `best.ckpt` in `--run-dir`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split_name: Split,
    /// Mask index; `masks.csv` next to the manifest when present.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Label file; `labels.csv` next to the manifest when present.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of `evaluate`.
    #[arg(long)]
    pub eval_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel repetition factor of the montages.
    #[arg(long, default_value_t = 2)]
    pub scale: u32,
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(name)
}

/// Explicit path, or the default sibling of the manifest if it exists.
fn optional_sidecar(explicit: &Option<PathBuf>, manifest: &Path, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| Some(sibling(manifest, name)).filter(|p| p.is_file()))
}

impl TrainArgs {
    pub fn resolve_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = self.model {
            cfg.model = m;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field.clone() { cfg.$field = v; })*};
        }
        set!(conditioning, learning_rate, epochs, batch_size, seed, adversarial);
        if let Some(b) = self.beta1 {
            cfg.betas.0 = b;
        }
        if let Some(b) = self.beta2 {
            cfg.betas.1 = b;
        }
        if self.no_augment {
            cfg.augment_enabled = false;
        }
        if self.lr_decay_start.is_some() {
            cfg.lr_decay_start = self.lr_decay_start;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        let lambdas = [self.lambda_l1, self.lambda_cyc1, self.lambda_cyc2, self.lambda_idt, self.lambda_cls];
        if lambdas.iter().any(Option::is_some) {
            let mut w = cfg.weights();
            let fields = [&mut w.lambda_l1, &mut w.lambda_cyc1, &mut w.lambda_cyc2, &mut w.lambda_idt, &mut w.lambda_cls];
            for (dst, src) in fields.into_iter().zip(lambdas) {
                if let Some(v) = src {
                    *dst = v;
                }
            }
            cfg.weights = Some(w);
        }
        if self.encoder_channels.is_some() || self.resnet_blocks.is_some() || self.dropout.is_some() {
            let mut g = cfg.generator();
            if let Some(c) = &self.encoder_channels {
                g.encoder_channels = c.clone();
            }
            if let Some(b) = self.resnet_blocks {
                g.resnet_blocks = b;
            }
            if let Some(d) = self.dropout {
                g.dropout = d;
            }
            cfg.generator = Some(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_split(path: &Path, manifest: &Manifest) -> Result<SplitAssignment> {
    let a = SplitAssignment::read(path)?;
    a.check_no_leakage(manifest)?;
    Ok(a)
}

fn load_rows(manifest: &Manifest, split: &SplitAssignment, which: Split) -> Result<Vec<crate::PairedSample>> {
    split.rows(manifest, which)?.into_iter().map(|r| manifest.load(r)).collect()
}

fn resolve_checkpoint(explicit: &Option<PathBuf>, run_dir: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = match (explicit, run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(BEST_CHECKPOINT),
        (None, None) => return Err(Error::MissingCheckpoint(PathBuf::from("(none given)"))),
    };
    Checkpoint::load(&path)
}

/// Runs one command, writing human-readable progress to `out`.
pub fn run(cli: Cli, out: &mut dyn FnMut(&str)) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => {
            let spec = PhantomSpec {
                shape: [a.shape; 3],
                n_subjects: a.subjects,
                images_per_subject: a.images_per_subject,
                abeta_range: (a.abeta_lo, a.abeta_hi),
                uptake_coupling: a.coupling,
                base_uptake: a.base_uptake,
                mri_noise: a.mri_noise,
                pet_noise: a.pet_noise,
                label_margin: a.label_margin,
                seed: a.seed,
            };
            spec.validate()?;
            let toml = toml::to_string(&spec).expect("spec serializes");
            out(&format!("resolved phantom spec:\n{toml}"));
            let samples = generate_dataset(&spec)?;
            let manifest = write_dataset(&samples, &a.out)?;
            let spec_path = a.out.join("phantom.toml");
            std::fs::write(&spec_path, toml).map_err(|e| Error::io(&spec_path, e))?;
            out(&format!("wrote {} pairs; manifest {}", samples.len(), manifest.display()));
        }
        Command::Split(a) => {
            let manifest = Manifest::read(&a.manifest)?;
            let sizes = match a.sizes {
                Some(v) => [v[0], v[1], v[2]],
                None => default_sizes(manifest.rows.len()),
            };
            out(&format!("resolved split: sizes {sizes:?} seed {}", a.seed));
            let assignment = split_by_subject(&manifest, sizes, a.seed)?;
            assignment.check_no_leakage(&manifest)?;
            let path = a.out.unwrap_or_else(|| sibling(&a.manifest, SPLIT_FILE));
            assignment.write(&path)?;
            let counts: Vec<String> = Split::ALL
                .iter()
                .map(|&s| Ok(format!("{s} {}", assignment.rows(&manifest, s)?.len())))
                .collect::<Result<_>>()?;
            out(&format!("wrote {} ({})", path.display(), counts.join(", ")));
        }
        Command::Train(a) => {
            let cfg = a.resolve_config()?;
            out(&format!("resolved config (hash {}):\n{}", cfg.hash(), cfg.to_toml()));
            let manifest = Manifest::read(&a.manifest)?;
            let run_dir = a.run_dir.clone().unwrap_or_else(|| default_run_dir(&a.runs_dir, &cfg));
            let split = match optional_sidecar(&a.split, &a.manifest, SPLIT_FILE) {
                Some(p) => load_split(&p, &manifest)?,
                None => {
                    let sizes = cfg.split_sizes.unwrap_or_else(|| default_sizes(manifest.rows.len()));
                    let s = split_by_subject(&manifest, sizes, cfg.seed)?;
                    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                    s.write(&run_dir.join(SPLIT_FILE))?;
                    s
                }
            };
            split.check_no_leakage(&manifest)?;
            let data = TrainData {
                train: load_rows(&manifest, &split, Split::Train)?,
                val: load_rows(&manifest, &split, Split::Val)?,
            };
            out(&format!("training on {} images, validating on {}", data.train.len(), data.val.len()));
            let outcome = train(&cfg, &data, &run_dir, &mut |line| out(line))?;
            out(&format!(
                "finished {} steps; final checkpoint {}; best checkpoint {}",
                outcome.steps,
                outcome.final_checkpoint.display(),
                outcome.best_checkpoint.display()
            ));
        }
        Command::Generate(a) => {
            let ckpt = resolve_checkpoint(&a.checkpoint, &None)?;
            let synth = PetSynthesizer::from_checkpoint(&ckpt)?;
            let mri = read_volume(&a.mri)?;
            let pet = synth.generate(&mri, a.abeta)?;
            xvol::write(&a.out, &pet)?;
            out(&format!("wrote {}", a.out.display()));
        }
        Command::Evaluate(a) => {
            let ckpt = resolve_checkpoint(&a.checkpoint, &a.run_dir)?;
            let manifest = Manifest::read(&a.manifest)?;
            let split_path = a.split.clone().unwrap_or_else(|| sibling(&a.manifest, SPLIT_FILE));
            let split = load_split(&split_path, &manifest)?;
            let masks = optional_sidecar(&a.masks, &a.manifest, MASKS_FILE).map(|p| MaskIndex::read(&p)).transpose()?;
            let labels = optional_sidecar(&a.labels, &a.manifest, LABELS_FILE).map(|p| read_labels(&p)).transpose()?;
            out(&format!(
                "resolved evaluation: model {} ({}), split {} from {}",
                ckpt.model,
                ckpt.conditioning,
                a.split_name,
                split_path.display()
            ));
            let rows = split.rows(&manifest, a.split_name)?;
            let suvr = SuvrInputs { masks: masks.as_ref(), labels: labels.as_ref() };
            let report = evaluate_testset(&ckpt, &manifest, &rows, &suvr, Some(&a.out))?;
            report.write(&a.out)?;
            let s = &report.summary;
            out(&format!(
                "{} images: SSIM {:.4} PSNR {:.2} MSE {:.2}",
                s.n_images, s.ssim.mean, s.psnr.mean, s.mse.mean
            ));
        }
        Command::Report(a) => {
            let manifest = Manifest::read(&a.manifest)?;
            out(&format!("resolved report: eval dir {}, scale {}", a.eval_dir.display(), a.scale));
            let written = write_report(&a.eval_dir, &manifest, &a.out, a.scale)?;
            out(&format!("wrote {} montages and summary.md to {}", written.len(), a.out.display()));
        }
    }
    Ok(())
}
