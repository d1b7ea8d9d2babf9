//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use autograd::{Adam, Graph, NodeId, ParamSet, Tensor};
use petsynth::conditioning::ConditioningMode;
use petsynth::config::{ModelKind, TrainConfig};
use petsynth::dataset::{read_labels, Manifest, MaskIndex};
use petsynth::losses::{
    cycle_objective_node, cyclegan_objective, discriminator_adversarial, generator_adversarial, identity_loss_pair,
    l1_loss, pix2pix_objective_node, sharegan_objective, AdversarialLoss, CycleTerms, LossWeights,
};
use petsynth::metrics::{correlation_p_value, mcsuvr, mse, psnr, ssim3d, SsimWindow};
use petsynth::networks::{
    build_discriminator, build_generator, tie_generators, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
};
use petsynth::phantom::{generate_dataset, PhantomSpec};
use petsynth::train::{mean_l1, prepare, PreparedSample, Trainer};
use petsynth::{NormalizationStats, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_volume(shape: [usize; 3], r: &mut ChaCha8Rng, lo: f32, hi: f32) -> Volume {
    Volume::from_fn(shape, |_, _, _| r.random_range(lo..hi)).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn architecture_shapes() -> Outcome {
    let start = Instant::now();
    let spec = GeneratorSpec::default();
    let mut shapes = Vec::new();
    for mode in [ConditioningMode::None, ConditioningMode::ImageAdd, ConditioningMode::LatentAdd, ConditioningMode::LatentConcat] {
        let gen: Generator<f64> = build_generator(&spec, mode, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 64, 64, 64], 0.1));
        let a = g.constant(Tensor::new(&[1], vec![0.4]));
        let t = gen.trace(&mut g, x, Some(a), None).map_err(|e| e.to_string())?;
        ensure(g.shape(t.bottleneck) == [1, 128, 8, 8, 8], format!("{mode}: 64³ bottleneck {:?}", g.shape(t.bottleneck)))?;
        ensure(g.shape(t.output) == [1, 1, 64, 64, 64], format!("{mode}: output {:?}", g.shape(t.output)))?;
        if mode == ConditioningMode::LatentConcat {
            let c = t.concatenated.ok_or("latent_concat trace lacks the concatenated node")?;
            ensure(g.shape(c) == [1, 129, 8, 8, 8], format!("64³ concat {:?}", g.shape(c)))?;
        }
    }
    let gen: Generator<f64> = build_generator(&spec, ConditioningMode::LatentConcat, &mut rng(2)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 128, 128, 128], |i| ((i % 17) as f64) / 17.0 - 0.5));
    let a = g.constant(Tensor::new(&[1], vec![0.7]));
    let t = gen.trace(&mut g, x, Some(a), None).map_err(|e| e.to_string())?;
    let concat = t.concatenated.ok_or("missing concat node")?;
    ensure(g.shape(t.encoded) == [1, 128, 16, 16, 16], format!("128³ encoder output {:?}", g.shape(t.encoded)))?;
    ensure(g.shape(concat) == [1, 129, 16, 16, 16], format!("128³ concat {:?}", g.shape(concat)))?;
    ensure(g.shape(t.bottleneck) == [1, 128, 16, 16, 16], format!("128³ bottleneck {:?}", g.shape(t.bottleneck)))?;
    ensure(g.shape(t.output) == [1, 1, 128, 128, 128], "128³ output shape")?;
    shapes.push(format!("128³: encoded {:?}, concat {:?}", &g.shape(t.encoded)[1..], &g.shape(concat)[1..]));
    ensure(start.elapsed() < Duration::from_secs(60), format!("took {:?}", start.elapsed()))?;
    Ok(shapes.join("; "))
}

// ---------------------------------------------------------------- criterion 2

fn loss_algebra() -> Outcome {
    let w = LossWeights::cyclegan();
    ensure((w.lambda_cyc1, w.lambda_cyc2, w.lambda_idt) == (10.0, 10.0, 0.3), "cyclegan weights")?;
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t = CycleTerms {
            adv_mri_to_pet: r.random_range(0.0..5.0),
            adv_pet_to_mri: r.random_range(0.0..5.0),
            cycle_mri: r.random_range(0.0..2.0),
            cycle_pet: r.random_range(0.0..2.0),
            identity: r.random_range(0.0..2.0),
        };
        let hand = t.adv_mri_to_pet + t.adv_pet_to_mri + 10.0 * t.cycle_mri + 10.0 * t.cycle_pet + 0.3 * t.identity;
        let got = cyclegan_objective(&t, &w);
        worst = worst.max((got - hand).abs());
        ensure((got - hand).abs() <= 1e-12, format!("cyclegan objective {got} vs hand {hand}"))?;
        let mut sw = w;
        sw.lambda_cls = 0.0;
        let shared = sharegan_objective(&t, &sw).map_err(|e| e.to_string())?;
        ensure(shared == got, format!("sharegan {shared} != cyclegan {got}"))?;
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = t.as_array().iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let node = cycle_objective_node(&mut g, [ids[0], ids[1], ids[2], ids[3], ids[4]], &w);
        ensure((g.value(node).item() - hand).abs() <= 1e-12, "graph objective differs")?;
    }
    // Composite from actual volumes.
    let shape = [8; 3];
    let (m, p) = (random_volume(shape, &mut r, -1.0, 1.0), random_volume(shape, &mut r, -1.0, 1.0));
    let (rm, rp) = (random_volume(shape, &mut r, -1.0, 1.0), random_volume(shape, &mut r, -1.0, 1.0));
    let (ip, im) = (random_volume(shape, &mut r, -1.0, 1.0), random_volume(shape, &mut r, -1.0, 1.0));
    let terms = CycleTerms {
        adv_mri_to_pet: 0.7,
        adv_pet_to_mri: 1.3,
        cycle_mri: l1_loss(&rm, &m).unwrap(),
        cycle_pet: l1_loss(&rp, &p).unwrap(),
        identity: identity_loss_pair(&ip, &p, &im, &m).unwrap(),
    };
    let mean_abs = |a: &Volume, b: &Volume| {
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
    };
    let hand = 0.7 + 1.3 + 10.0 * mean_abs(&rm, &m) + 10.0 * mean_abs(&rp, &p) + 0.3 * (mean_abs(&ip, &p) + mean_abs(&im, &m));
    let got = cyclegan_objective(&terms, &w);
    ensure((got - hand).abs() <= 1e-12, format!("volume composite {got} vs {hand}"))?;
    let mut bad = LossWeights::sharegan();
    bad.lambda_cls = 0.1;
    ensure(sharegan_objective(&terms, &bad).is_err(), "nonzero lambda_cls accepted")?;
    Ok(format!("max abs deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 3

/// Relative error of an analytic directional derivative against a central
/// difference.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10)
}

fn direction(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn shifted(t: &Tensor<f64>, v: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    Tensor::new(t.shape(), t.data().iter().zip(v.data()).map(|(a, b)| a + eps * b).collect())
}

/// Directional checks of `f` w.r.t. each input tensor.
fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    r: &mut ChaCha8Rng,
    f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> Result<f64, String> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids);
    let grads = g.backward(out);
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let o = f(&mut g, &ids);
        g.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let v = direction(t.shape(), r);
        let analytic = grads.wrt(ids[i]).map_or(0.0, |gr| dot(gr, &v));
        let mut plus = inputs.to_vec();
        plus[i] = shifted(t, &v, eps);
        let mut minus = inputs.to_vec();
        minus[i] = shifted(t, &v, -eps);
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        ensure(e < tol, format!("{name} input {i}: analytic {analytic} vs numeric {numeric} (rel {e:.2e})"))?;
    }
    Ok(worst)
}

/// Directional checks of a scalar function of a parameter set. `f` installs
/// the set in a network, records the loss and hands the set back, so the
/// gradients can be matched to the set the graph actually saw.
fn check_params(
    name: &str,
    params: &ParamSet<f64>,
    names: &[&str],
    eps: f64,
    tol: f64,
    r: &mut ChaCha8Rng,
    f: &dyn Fn(ParamSet<f64>, &mut Graph<f64>) -> (NodeId, ParamSet<f64>),
) -> Result<f64, String> {
    let mut g = Graph::new();
    let (out, used) = f(params.clone(), &mut g);
    let grads = g.backward(out).for_params(&used);
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let (o, _) = f(p.clone(), &mut g);
        g.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for pname in names {
        let id = params.find(pname).ok_or_else(|| format!("{name}: no parameter {pname}"))?;
        let v = direction(params.get(id).shape(), r);
        let analytic = grads[id.0].as_ref().map_or(0.0, |gr| dot(gr, &v));
        let mut plus = params.clone();
        *plus.get_mut(id) = shifted(params.get(id), &v, eps);
        let mut minus = params.clone();
        *minus.get_mut(id) = shifted(params.get(id), &v, -eps);
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        ensure(e < tol, format!("{name}.{pname}: analytic {analytic} vs numeric {numeric} (rel {e:.2e})"))?;
    }
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let mut worst_loss: f64 = 0.0;
    let scores = |r: &mut ChaCha8Rng| Tensor::from_fn(&[3], |_| r.random_range(-2.0..2.0));
    let vol = |r: &mut ChaCha8Rng| Tensor::from_fn(&[2, 1, 4, 4, 4], |_| r.random_range(-1.0..1.0));
    let pure_tol = 1e-6;
    for kind in [AdversarialLoss::LogSigmoid, AdversarialLoss::LeastSquares] {
        worst_loss = worst_loss.max(check_inputs("generator_adversarial", &[scores(&mut r)], 1e-5, pure_tol, &mut r, &|g, x| {
            generator_adversarial(g, x[0], kind)
        })?);
        worst_loss = worst_loss.max(check_inputs(
            "discriminator_adversarial",
            &[scores(&mut r), scores(&mut r)],
            1e-5,
            pure_tol,
            &mut r,
            &|g, x| discriminator_adversarial(g, x[0], x[1], kind),
        )?);
    }
    worst_loss = worst_loss.max(check_inputs("l1", &[vol(&mut r), vol(&mut r)], 1e-5, pure_tol, &mut r, &|g, x| {
        g.mean_abs_diff(x[0], x[1])
    })?);
    let w = LossWeights::cyclegan();
    let five: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::scalar(r.random_range(0.0..2.0))).collect();
    worst_loss = worst_loss.max(check_inputs("cycle_objective", &five, 1e-5, pure_tol, &mut r, &|g, x| {
        cycle_objective_node(g, [x[0], x[1], x[2], x[3], x[4]], &w)
    })?);
    let pw = LossWeights::pix2pix();
    worst_loss = worst_loss.max(check_inputs(
        "pix2pix_objective",
        &[scores(&mut r), vol(&mut r), vol(&mut r)],
        1e-5,
        pure_tol,
        &mut r,
        &|g, x| {
            let adv = generator_adversarial(g, x[0], AdversarialLoss::LogSigmoid);
            let l1 = g.mean_abs_diff(x[1], x[2]);
            pix2pix_objective_node(g, adv, l1, &pw)
        },
    )?);

    // Steps are small so perturbations rarely cross a ReLU or instance-norm
    // kink; the critic input gradient is tiny, so that check takes a larger
    // step to stay clear of roundoff.
    let net_tol = 1e-3;
    let mut worst_net: f64 = 0.0;
    let spec = GeneratorSpec::default();
    for mode in [ConditioningMode::None, ConditioningMode::ImageAdd, ConditioningMode::LatentAdd, ConditioningMode::LatentConcat] {
        let mut gen: Generator<f64> = build_generator(&spec, mode, &mut rng(5)).unwrap();
        if mode == ConditioningMode::LatentConcat {
            // Move the fusion layer off its identity start.
            let id = gen.params.find("fusion.w").unwrap();
            let t = gen.params.get_mut(id);
            let mut rr = rng(6);
            for v in t.data_mut() {
                *v += rr.random_range(-0.05..0.05);
            }
        }
        let x = Tensor::from_fn(&[1, 1, 16, 16, 16], |_| r.random_range(-1.0..1.0));
        let target = Tensor::from_fn(&[1, 1, 16, 16, 16], |_| r.random_range(-1.0..1.0));
        let label = format!("generator[{mode}]");
        let g0 = gen.clone();
        worst_net = worst_net.max(check_inputs(&label, &[x.clone(), Tensor::new(&[1], vec![0.37])], 1e-8, net_tol, &mut r, &|g, ids| {
            let y = g0.forward(g, ids[0], Some(ids[1]), None).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t);
            g.mean_sq_to_const(d, 0.0)
        })?);
        let mut names = vec!["enc0.w", "enc1.w", "enc2.w", "res0.conv0.w", "res5.conv1.w", "dec0.w", "dec2.w", "dec2.b"];
        if mode == ConditioningMode::LatentConcat {
            names.push("fusion.w");
        }
        worst_net = worst_net.max(check_params(&label, &gen.params, &names, 1e-8, net_tol, &mut r, &|p, g| {
            let mut net = gen.clone();
            net.params = p;
            let xi = g.constant(x.clone());
            let a = g.constant(Tensor::new(&[1], vec![0.37]));
            let y = net.forward(g, xi, Some(a), None).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t);
            (g.mean_sq_to_const(d, 0.0), net.params)
        })?);
    }
    let dspec = DiscriminatorSpec::for_shape(1, [32; 3]);
    let disc: Discriminator<f64> = build_discriminator(&dspec, &mut rng(7)).unwrap();
    let x = Tensor::from_fn(&[2, 1, 32, 32, 32], |_| r.random_range(-1.0..1.0));
    let d0 = disc.clone();
    worst_net = worst_net.max(check_inputs("discriminator", &[x.clone()], 1e-6, net_tol, &mut r, &|g, ids| {
        let s = d0.forward(g, ids[0]).unwrap();
        g.bce_with_logits(s, 1.0)
    })?);
    worst_net = worst_net.max(check_params(
        "discriminator",
        &disc.params,
        &["conv0.w", "conv2.w", "conv4.w", "conv4.b", "fc0.w", "fc1.w", "fc2.w", "fc2.b"],
        1e-7,
        net_tol,
        &mut r,
        &|p, g| {
            let mut net = disc.clone();
            net.params = p;
            let xi = g.constant(x.clone());
            let s = net.forward(g, xi).unwrap();
            (g.bce_with_logits(s, 1.0), net.params)
        },
    )?);
    ensure(start.elapsed() < Duration::from_secs(600), format!("took {:?}", start.elapsed()))?;
    Ok(format!("worst relative error: losses {worst_loss:.1e}, networks {worst_net:.1e}"))
}

// ---------------------------------------------------------------- criterion 4

/// Gaussian SSIM evaluated window by window with centered moments.
fn ssim_brute_force(a: &Volume, b: &Volume, size: usize, sigma: f64, max_val: f64) -> f64 {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w3 = vec![0.0; size * size * size];
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let d2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                w3[(z * size + y) * size + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let total: f64 = w3.iter().sum();
    w3.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((0.01 * max_val).powi(2), (0.03 * max_val).powi(2));
    let [d, h, w] = a.shape();
    let mut sum = 0.0;
    let mut count = 0;
    for z0 in 0..=d - size {
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let at = |v: &Volume, i: usize| {
                    let (z, y, x) = (i / (size * size), (i / size) % size, i % size);
                    v.get(z0 + z, y0 + y, x0 + x) as f64
                };
                let (mut ma, mut mb) = (0.0, 0.0);
                for (i, &wt) in w3.iter().enumerate() {
                    ma += wt * at(a, i);
                    mb += wt * at(b, i);
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for (i, &wt) in w3.iter().enumerate() {
                    let (da, db) = (at(a, i) - ma, at(b, i) - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn metric_oracles() -> Outcome {
    let mut r = rng(8);
    let win = SsimWindow::default();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let a = random_volume([16; 3], &mut r, 0.0, 255.0);
        // Correlated partner so SSIM spans a useful range.
        let mix = (i as f32) / 100.0;
        let noise = random_volume([16; 3], &mut r, 0.0, 255.0);
        let b = Volume::from_fn([16; 3], |z, y, x| mix * a.get(z, y, x) + (1.0 - mix) * noise.get(z, y, x)).unwrap();
        let fast = ssim3d(&a, &b, &win, 255.0).unwrap();
        let slow = ssim_brute_force(&a, &b, 11, 1.5, 255.0);
        worst = worst.max((fast - slow).abs());
        ensure((fast - slow).abs() <= 1e-6, format!("pair {i}: ssim {fast} vs brute force {slow}"))?;
        let m = mse(&a, &b).unwrap();
        let p = psnr(&a, &b, 255.0).unwrap();
        ensure(p == 10.0 * (255.0f64 * 255.0 / m).log10(), format!("psnr {p} vs log identity with mse {m}"))?;
    }
    let p = correlation_p_value(0.807, 186);
    let decades = (p.log10() - 5.6e-44f64.log10()).abs();
    ensure(decades <= 1.0, format!("p-value {p:e} is {decades:.2} decades from 5.6e-44"))?;
    Ok(format!("max SSIM deviation {worst:.1e}; p(n=186, r=0.807) = {p:.2e}"))
}

// ---------------------------------------------------------------- criterion 5

fn sharegan_sharing() -> Outcome {
    let spec = GeneratorSpec::default();
    let mode = ConditioningMode::LatentConcat;
    let g1: Generator<f32> = build_generator(&spec, mode, &mut rng(9)).unwrap();
    let g2: Generator<f32> = build_generator(&spec, mode, &mut rng(10)).unwrap();
    let cycle_total = g1.num_params() + g2.num_params();
    let mut shared = tie_generators(g1, &g2).map_err(|e| e.to_string())?;
    ensure(2 * shared.num_params() == cycle_total, format!("shared {} vs cycle total {cycle_total}", shared.num_params()))?;

    let mut r = rng(11);
    let mri = random_volume([16; 3], &mut r, -1.0, 1.0);
    let pet = random_volume([16; 3], &mut r, -1.0, 1.0);
    let before = shared.mri_to_pet().apply(&mri, 0.5).unwrap();
    // One optimizer step driven only by the PET→MRI direction.
    let mut g = Graph::new();
    let xp = g.constant(pet.to_tensor());
    let xm = g.constant(mri.to_tensor());
    let a = g.constant(Tensor::new(&[1], vec![0.5f32]));
    let fake_mri = shared.pet_to_mri().forward(&mut g, xp, Some(a), None).unwrap();
    let loss = g.mean_abs_diff(fake_mri, xm);
    let grads = g.backward(loss).for_params(&shared.inner.params);
    Adam::new(2e-4, 0.5, 0.999).step(&mut shared.inner.params, &grads);
    let after = shared.mri_to_pet().apply(&mri, 0.5).unwrap();
    let diff = l1_loss(&before, &after).unwrap();
    ensure(diff > 0.0, "MRI→PET output unchanged after a PET→MRI update")?;

    // The trainer keeps exactly one generator set for ShareGAN.
    let cfg = TrainConfig::for_model(ModelKind::Sharegan);
    let share = Trainer::new(&cfg, [32; 3]).map_err(|e| e.to_string())?;
    let cyc = Trainer::new(&TrainConfig::for_model(ModelKind::Cyclegan), [32; 3]).map_err(|e| e.to_string())?;
    ensure(share.networks().generator_sets().len() == 1, "ShareGAN trainer holds more than one generator set")?;
    ensure(
        2 * share.networks().generator_param_count() == cyc.networks().generator_param_count(),
        "trainer parameter counts are not in a 1:2 ratio",
    )?;
    Ok(format!("{} shared vs {cycle_total} cycle parameters; cross-direction change {diff:.2e}", shared.num_params()))
}

// ---------------------------------------------------------------- criterion 6

struct SmokeRun {
    l1_at_10: f64,
    l1_end: f64,
    log: String,
    trainer: Trainer,
    samples: Vec<PreparedSample>,
    elapsed: Duration,
}

fn smoke_run() -> SmokeRun {
    let spec = PhantomSpec { shape: [32; 3], n_subjects: 4, images_per_subject: 1, seed: 21, ..PhantomSpec::default() };
    let raw: Vec<_> = generate_dataset(&spec).unwrap().into_iter().map(|s| s.sample).collect();
    let stats = NormalizationStats::from_samples(&raw).unwrap();
    let samples: Vec<PreparedSample> = raw.iter().map(|s| prepare(s, &stats).unwrap()).collect();
    let cfg = TrainConfig {
        model: ModelKind::Cyclegan,
        conditioning: ConditioningMode::LatentConcat,
        augment_enabled: false,
        seed: 5,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, [32; 3]).unwrap();
    let mut log = String::from("step,term,value\n");
    let mut l1_at_10 = f64::NAN;
    'outer: loop {
        for batch in trainer.epoch_batches(samples.len()) {
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &samples[i]).collect();
            let losses = trainer.train_step(&refs).unwrap();
            for (t, v) in &losses.terms {
                log.push_str(&format!("{},{t},{v:?}\n", trainer.steps()));
            }
            if trainer.steps() == 10 {
                l1_at_10 = mean_l1(&trainer.networks().mri_to_pet, &samples).unwrap();
            }
            if trainer.steps() == 200 {
                break 'outer;
            }
        }
    }
    let l1_end = mean_l1(&trainer.networks().mri_to_pet, &samples).unwrap();
    SmokeRun { l1_at_10, l1_end, log, trainer, samples, elapsed: start.elapsed() }
}

fn tiny_overfit(run: &SmokeRun) -> Outcome {
    let ratio = run.l1_end / run.l1_at_10;
    ensure(
        ratio <= 0.5,
        format!("L1 {:.4} at step 10 -> {:.4} at step 200 (ratio {ratio:.3})", run.l1_at_10, run.l1_end),
    )?;
    ensure(run.elapsed < Duration::from_secs(15 * 60), format!("took {:?}", run.elapsed))?;
    Ok(format!(
        "L1 {:.4} at step 10 -> {:.4} at step 200 (ratio {ratio:.3}) in {:.0}s",
        run.l1_at_10,
        run.l1_end,
        run.elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn conditioning_sensitivity(run: &SmokeRun) -> Outcome {
    let gen = &run.trainer.networks().mri_to_pet;
    let mri = &run.samples[0].mri;
    let lo = gen.apply(mri, 0.0).unwrap();
    let hi = gen.apply(mri, 1.0).unwrap();
    let diff = l1_loss(&lo, &hi).unwrap();
    ensure(diff > 1e-4, format!("mean abs diff {diff:e} between abeta_norm 0 and 1"))?;

    let g64: Generator<f64> = gen.cast();
    let mean_out = |a: f64| {
        let mut g = Graph::new();
        let x = g.constant(mri.to_tensor::<f64>());
        let ai = g.constant(Tensor::new(&[1], vec![a]));
        let y = g64.forward(&mut g, x, Some(ai), None).unwrap();
        g.value(y).sum() / g.value(y).len() as f64
    };
    let h = 1e-4;
    let fd = (mean_out(0.5 + h) - mean_out(0.5 - h)) / (2.0 * h);
    let mut g = Graph::new();
    let x = g.constant(mri.to_tensor::<f64>());
    let ai = g.variable(Tensor::new(&[1], vec![0.5]));
    let y = g64.forward(&mut g, x, Some(ai), None).unwrap();
    let m = g.mean_sq_to_const(y, 0.0);
    let grad = g.backward(m).wrt(ai).map_or(0.0, |t| t.item());
    ensure(fd != 0.0 && fd.is_finite(), format!("finite-difference d(mean output)/d(abeta) = {fd}"))?;
    ensure(grad != 0.0, "analytic abeta gradient is zero")?;
    Ok(format!("mean abs diff {diff:.2e}; d(mean output)/d(abeta_norm) = {fd:.3e}"))
}

// ---------------------------------------------------------------- criterion 8

fn petsynth(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_petsynth"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`petsynth {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

struct PipelineRun {
    dir: tempfile::TempDir,
    elapsed: Duration,
}

impl PipelineRun {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn pipeline_run() -> Result<PipelineRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cwd = dir.path();
    petsynth(&["synth-data", "--out", "data", "--subjects", "40", "--shape", "32", "--seed", "3"], cwd)?;
    petsynth(&["split", "--manifest", "data/manifest.csv", "--seed", "3"], cwd)?;
    petsynth(
        &["train", "--manifest", "data/manifest.csv", "--model", "cyclegan", "--cond", "latent_concat", "--epochs", "1", "--seed", "3", "--run-dir", "run"],
        cwd,
    )?;
    petsynth(&["evaluate", "--run-dir", "run", "--manifest", "data/manifest.csv", "--out", "eval"], cwd)?;
    petsynth(&["report", "--eval-dir", "eval", "--manifest", "data/manifest.csv", "--out", "report"], cwd)?;
    Ok(PipelineRun { dir, elapsed: start.elapsed() })
}

fn end_to_end(run: &PipelineRun) -> Outcome {
    let root = run.path();
    let manifest = Manifest::read(&root.join("data/manifest.csv")).map_err(|e| e.to_string())?;
    let split_text = fs::read_to_string(root.join("data/split.csv")).map_err(|e| e.to_string())?;
    let mut split: BTreeMap<String, String> = BTreeMap::new();
    for line in split_text.lines().skip(1) {
        let (s, which) = line.split_once(',').ok_or("malformed split line")?;
        ensure(split.insert(s.to_owned(), which.to_owned()).is_none(), format!("subject {s} listed twice"))?;
    }
    let mut subjects: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for row in &manifest.rows {
        let which = split.get(&row.subject_id).ok_or(format!("{} unassigned", row.subject_id))?;
        subjects.entry(which.as_str()).or_default().insert(row.subject_id.as_str());
    }
    let names = ["train", "val", "test"];
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let empty = BTreeSet::new();
            let (sa, sb) = (subjects.get(a).unwrap_or(&empty), subjects.get(b).unwrap_or(&empty));
            ensure(sa.is_disjoint(sb), format!("subjects shared between {a} and {b}"))?;
        }
    }
    let test_size = manifest.rows.iter().filter(|r| split[&r.subject_id] == "test").count();
    let per_image = fs::read_to_string(root.join("eval/per_image.csv")).map_err(|e| e.to_string())?;
    let rows = per_image.lines().count() - 1;
    ensure(rows == test_size && rows > 0, format!("report has {rows} rows, test split has {test_size} images"))?;
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("eval/summary.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(summary["n_images"] == test_size, "summary image count")?;
    let montages = fs::read_dir(root.join("report")).map_err(|e| e.to_string())?.count();
    ensure(montages == test_size + 1, format!("{montages} report files for {test_size} images"))?;

    // Ground-truth PET classification against the generating labels, over
    // every phantom image.
    let masks = MaskIndex::read(&root.join("data/masks.csv")).map_err(|e| e.to_string())?;
    let labels = read_labels(&root.join("data/labels.csv")).map_err(|e| e.to_string())?;
    let mut hits = 0;
    let mut classes = BTreeSet::new();
    for row in &manifest.rows {
        let sample = manifest.load(row).map_err(|e| e.to_string())?;
        let m = masks.load(&row.pet_path).map_err(|e| e.to_string())?;
        let value = mcsuvr(&sample.pet, &m).map_err(|e| e.to_string())?;
        let truth = labels[&row.pet_path].amyloid_positive;
        classes.insert(truth);
        hits += usize::from((value > 1.19) == truth);
    }
    let accuracy = hits as f64 / manifest.rows.len() as f64;
    ensure(classes.len() == 2, "phantom labels are not mixed")?;
    ensure(accuracy == 1.0, format!("ground-truth MCSUVR accuracy {accuracy}"))?;
    ensure(
        summary["ground_truth_classification"]["accuracy"].as_f64() == Some(1.0),
        "evaluation reports ground-truth accuracy below 1",
    )?;
    Ok(format!(
        "{rows} test images evaluated; disjoint splits; ground-truth accuracy {accuracy} over {} images; pipeline took {:.0}s",
        manifest.rows.len(),
        run.elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 9

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn param_bytes(t: &Trainer) -> Vec<u8> {
    let n = t.networks();
    let mut out = Vec::new();
    for set in n.generator_sets() {
        for (_, _, v) in set.iter() {
            out.extend(v.data().iter().flat_map(|x| x.to_bits().to_le_bytes()));
        }
    }
    out
}

fn determinism(a6: &SmokeRun, b6: &SmokeRun, a8: &PipelineRun, b8: &PipelineRun) -> Outcome {
    ensure(a6.log == b6.log, "smoke-test loss logs differ")?;
    ensure(param_bytes(&a6.trainer) == param_bytes(&b6.trainer), "smoke-test parameters differ")?;
    let (fa, fb) = (files_under(a8.path()), files_under(b8.path()));
    ensure(fa.keys().eq(fb.keys()), "pipeline runs produced different file sets")?;
    let differing: Vec<String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), format!("files differ: {}", differing.join(", ")))?;
    Ok(format!("{} smoke-test log lines and {} pipeline files identical", a6.log.lines().count(), fa.len()))
}

// ----------------------------------------------------------------------------

fn report(results: &mut Vec<(usize, String, bool)>, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("criterion {n} [{}] {name} ({secs:.1}s): {detail}", if ok { "PASS" } else { "FAIL" });
    results.push((n, name.to_owned(), ok));
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut results = Vec::new();
    report(&mut results, 1, "architecture shape contract", architecture_shapes);
    report(&mut results, 2, "loss algebra", loss_algebra);
    report(&mut results, 3, "gradient suite", gradient_suite);
    report(&mut results, 4, "metric oracles", metric_oracles);
    report(&mut results, 5, "ShareGAN parameter sharing", sharegan_sharing);

    let smoke = catch_unwind(smoke_run).ok();
    report(&mut results, 6, "tiny-overfit smoke test", || match &smoke {
        Some(run) => tiny_overfit(run),
        None => Err("smoke run panicked".into()),
    });
    report(&mut results, 7, "conditioning sensitivity", || match &smoke {
        Some(run) => conditioning_sensitivity(run),
        None => Err("smoke run panicked".into()),
    });
    let pipeline = pipeline_run();
    report(&mut results, 8, "end-to-end pipeline", || match &pipeline {
        Ok(run) => end_to_end(run),
        Err(e) => Err(e.clone()),
    });
    report(&mut results, 9, "determinism", || {
        let a6 = smoke.as_ref().ok_or("first smoke run failed")?;
        let b6 = catch_unwind(smoke_run).map_err(|_| "second smoke run panicked")?;
        let a8 = pipeline.as_ref().map_err(|e| e.clone())?;
        let b8 = pipeline_run()?;
        determinism(a6, &b6, a8, &b8)
    });

    let failed: Vec<_> = results.iter().filter(|r| !r.2).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
