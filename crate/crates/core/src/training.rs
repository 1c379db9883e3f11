//! Adversarial training of the conditional generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use spaceedit_tensor::{Adam, AdamConfig, Graph, Tensor, Var};

use crate::editops::{dataset_hash, mix_seed, ImagePair, Split};
use crate::error::{Error, Result};
use crate::generator::{AdamState, GeneratorBundle, GeneratorConfig};
use crate::image::Image;

/// Every term that enters a training objective. There is no pixel loss.
pub const LOSS_TERMS: [&str; 3] = ["adversarial_d", "adversarial_g", "r1"];

/// Step used by the finite-difference R1 estimate.
const R1_FD_STEP: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_total")]
    pub total_images: u64,
    #[serde(default = "d_gamma")]
    pub r1_gamma: f64,
    #[serde(default = "d_interval")]
    pub r1_interval: u64,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "d_ckpt")]
    pub checkpoint_interval: u64,
}

fn d_lr() -> f64 {
    0.0025
}
fn d_beta2() -> f64 {
    0.99
}
fn d_batch() -> usize {
    16
}
fn d_total() -> u64 {
    200_000
}
fn d_gamma() -> f64 {
    1.0
}
fn d_interval() -> u64 {
    16
}
fn d_ckpt() -> u64 {
    500
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            adam_beta1: 0.0,
            adam_beta2: d_beta2(),
            batch_size: d_batch(),
            total_images: d_total(),
            r1_gamma: d_gamma(),
            r1_interval: d_interval(),
            seed: 0,
            checkpoint_interval: d_ckpt(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a nonnegative number");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.total_images == 0 || self.r1_interval == 0 {
            return bad("batch_size, total_images and r1_interval must be positive");
        }
        if !(self.r1_gamma >= 0.0) {
            return bad("r1_gamma must be nonnegative");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_images.div_ceil(self.batch_size as u64)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Non-saturating losses averaged over the batch: `(loss_D, loss_G)`.
pub fn gan_losses(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        v.iter().map(|&x| f(x)).sum::<f64>() / v.len().max(1) as f64
    };
    let d = mean(real, &|x| softplus(-x)) + mean(fake, &softplus);
    let g = mean(fake, &|x| softplus(-x));
    (d, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    pub r1: Option<f64>,
}

fn adam_from(state: &AdamState, cfg: AdamConfig) -> Adam<f32> {
    let mut a = Adam::new(cfg);
    a.restore(state.m.clone(), state.v.clone(), state.steps.clone());
    a
}

fn adam_state(a: &Adam<f32>) -> AdamState {
    let (m, v, steps) = a.state();
    AdamState { m, v, steps }
}

/// Owns a bundle and its optimizers for the duration of training.
pub struct Trainer {
    pub bundle: GeneratorBundle,
    pub config: TrainConfig,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
}

fn random_z(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![n, dim], |_| StandardNormal.sample(rng))
}

/// Concatenate two tensors along the batch axis.
fn cat0(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.dim(0);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn check_finite(v: f64, what: &str, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at step {step}")))
    }
}

impl Trainer {
    pub fn new(bundle: GeneratorBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (opt_g, opt_d) = match &bundle.optim {
            Some((g, d)) => (adam_from(g, config.adam()), adam_from(d, config.adam())),
            None => (Adam::new(config.adam()), Adam::new(config.adam())),
        };
        Ok(Trainer {
            bundle,
            config,
            opt_g,
            opt_d,
        })
    }

    /// One discriminator update then one generator update.
    pub fn train_step(&mut self, batch: &[&ImagePair], z: &Tensor<f32>) -> Result<StepLog> {
        let b = batch.len();
        if b == 0 || z.dim(0) != b {
            return Err(Error::shape(format!("{b} pairs with {} latents", z.dim(0))));
        }
        let res = self.bundle.resolution();
        if batch
            .iter()
            .any(|p| p.before.width() != res || p.before.height() != res)
        {
            return Err(Error::shape(format!("training pairs must be {res}x{res}")));
        }
        let step = self.bundle.meta.steps;
        let befores: Vec<&Image> = batch.iter().map(|p| &p.before).collect();
        let afters: Vec<&Image> = batch.iter().map(|p| &p.after).collect();
        let inputs = Image::batch_signed::<f32>(&befores);
        let targets = Image::batch_signed::<f32>(&afters);
        let nets = &self.bundle.nets;
        let noise: Vec<Tensor<f32>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed ^ 0x4e, step));
            self.bundle
                .noise_resolutions()
                .iter()
                .map(|&r| Tensor::from_fn(vec![b, 1, r, r], |_| StandardNormal.sample(&mut rng)))
                .collect()
        };
        let noise_vars = |g: &mut Graph<f32>| -> Vec<Option<Var>> {
            noise.iter().map(|n| Some(g.constant(n.clone()))).collect()
        };

        // discriminator
        let fake = {
            let mut g = Graph::new();
            g.freeze(&self.bundle.g);
            let x = g.constant(inputs.clone());
            let p = nets.encoder.forward(&mut g, &self.bundle.g, x);
            let zv = g.constant(z.clone());
            let w = nets.mapping.forward(&mut g, &self.bundle.g, zv);
            let nv = noise_vars(&mut g);
            let out =
                nets.synthesis
                    .forward(&mut g, &self.bundle.g, &p, &nets.broadcast(w), &nv)?;
            g.value(out).clone()
        };
        let loss_d = {
            let mut g = Graph::new();
            let both_in = g.constant(cat0(&inputs, &inputs));
            let cands = g.constant(cat0(&targets, &fake));
            let s = nets
                .discriminator
                .forward(&mut g, &self.bundle.d, both_in, cands);
            let real = g.narrow(s, 0, 0, b);
            let fk = g.narrow(s, 0, b, b);
            let nr = g.neg(real);
            let lr = g.softplus(nr);
            let lr = g.mean_all(lr);
            let lf = g.softplus(fk);
            let lf = g.mean_all(lf);
            let loss = g.add(lr, lf);
            let value = g.value(loss).item() as f64;
            check_finite(value, "loss_D", step)?;
            let grads = g.backward(loss);
            let grads = self.bundle.d.collect_grads(&g, &grads);
            self.opt_d.step(&mut self.bundle.d, &grads);
            value
        };

        // lazy R1 on real pairs
        let mut r1 = None;
        if self.config.r1_gamma > 0.0 && step % self.config.r1_interval == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed ^ 0x51, step));
            let delta = Tensor::<f32>::from_fn(targets.shape().to_vec(), |_| {
                StandardNormal.sample(&mut rng)
            });
            let h = R1_FD_STEP as f32;
            let plus = targets.zip_map(&delta, |t, d| t + h * d);
            let minus = targets.zip_map(&delta, |t, d| t - h * d);
            let mut g = Graph::new();
            let both_in = g.constant(cat0(&inputs, &inputs));
            let cands = g.constant(cat0(&plus, &minus));
            let s = nets
                .discriminator
                .forward(&mut g, &self.bundle.d, both_in, cands);
            let sp = g.narrow(s, 0, 0, b);
            let sm = g.narrow(s, 0, b, b);
            let diff = g.sub(sp, sm);
            let dd = g.scale(diff, 1.0 / (2.0 * h));
            let sq = g.square(dd);
            let pen = g.mean_all(sq);
            let value = g.value(pen).item() as f64;
            check_finite(value, "r1", step)?;
            let weight = (self.config.r1_gamma / 2.0 * self.config.r1_interval as f64) as f32;
            let loss = g.scale(pen, weight);
            let grads = g.backward(loss);
            let grads = self.bundle.d.collect_grads(&g, &grads);
            self.opt_d.step(&mut self.bundle.d, &grads);
            r1 = Some(value);
        }

        // generator
        let loss_g = {
            let mut g = Graph::new();
            g.freeze(&self.bundle.d);
            let x = g.constant(inputs.clone());
            let p = nets.encoder.forward(&mut g, &self.bundle.g, x);
            let zv = g.constant(z.clone());
            let w = nets.mapping.forward(&mut g, &self.bundle.g, zv);
            let nv = noise_vars(&mut g);
            let out =
                nets.synthesis
                    .forward(&mut g, &self.bundle.g, &p, &nets.broadcast(w), &nv)?;
            let s = nets.discriminator.forward(&mut g, &self.bundle.d, x, out);
            let ns = g.neg(s);
            let l = g.softplus(ns);
            let loss = g.mean_all(l);
            let value = g.value(loss).item() as f64;
            check_finite(value, "loss_G", step)?;
            let grads = g.backward(loss);
            let grads = self.bundle.g.collect_grads(&g, &grads);
            self.opt_g.step(&mut self.bundle.g, &grads);
            value
        };

        self.bundle.meta.steps += 1;
        self.bundle.meta.images_seen += b as u64;
        Ok(StepLog {
            step,
            loss_d,
            loss_g,
            r1,
        })
    }

    /// Copy optimizer moments into the bundle so a checkpoint can resume.
    pub fn sync_optimizer_state(&mut self) {
        self.bundle.optim = Some((adam_state(&self.opt_g), adam_state(&self.opt_d)));
    }

    pub fn into_bundle(mut self) -> GeneratorBundle {
        self.sync_optimizer_state();
        self.bundle
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:07}.ckpt"))
}

/// Train on the train split of `pairs`. Passing a bundle resumes from it.
pub fn train(
    pairs: &[ImagePair],
    gen_config: &GeneratorConfig,
    config: &TrainConfig,
    resume: Option<GeneratorBundle>,
    output: &TrainOutput,
) -> Result<GeneratorBundle> {
    config.validate()?;
    let train: Vec<&ImagePair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let res = gen_config.resolution;
    if let Some(p) = train
        .iter()
        .find(|p| p.before.width() != res || p.before.height() != res)
    {
        return Err(Error::shape(format!(
            "pair {} is {}x{}, generator expects {res}x{res}",
            p.id,
            p.before.width(),
            p.before.height()
        )));
    }
    let bundle = match resume {
        Some(b) => {
            if &b.config != gen_config {
                return Err(Error::invalid(
                    "resume checkpoint has a different generator config",
                ));
            }
            b
        }
        None => GeneratorBundle::new(gen_config.clone())?,
    };
    let mut trainer = Trainer::new(bundle, config.clone())?;
    trainer.bundle.meta.seed = config.seed;
    trainer.bundle.meta.dataset_hash = Some(dataset_hash(pairs)?);
    let mut log = match &output.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), f))
        }
        None => None,
    };
    let total = config.total_steps();
    let bs = config.batch_size.min(train.len());
    while trainer.bundle.meta.steps < total {
        let step = trainer.bundle.meta.steps;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, step));
        let batch: Vec<&ImagePair> = train.choose_multiple(&mut rng, bs).copied().collect();
        let z = random_z(&mut rng, bs, gen_config.z_dim);
        let entry = match trainer.train_step(&batch, &z) {
            Ok(e) => e,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = &output.checkpoint_dir {
                    let snap = dir.join("nonfinite-snapshot.ckpt");
                    trainer.sync_optimizer_state();
                    let _ = trainer.bundle.save(&snap);
                    log::error!("non-finite loss, snapshot written to {}", snap.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((path, f)) = &mut log {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if step % 50 == 0 {
            log::info!(
                "step {step}/{total} loss_D {:.4} loss_G {:.4}",
                entry.loss_d,
                entry.loss_g
            );
        }
        let done = trainer.bundle.meta.steps;
        if let Some(dir) = &output.checkpoint_dir {
            if config.checkpoint_interval > 0
                && done % config.checkpoint_interval == 0
                && done < total
            {
                trainer.sync_optimizer_state();
                trainer.bundle.save(checkpoint_path(dir, done))?;
            }
        }
    }
    trainer.bundle.refresh_w_stats();
    let bundle = trainer.into_bundle();
    if let Some(dir) = &output.checkpoint_dir {
        bundle.save(checkpoint_path(dir, bundle.meta.steps))?;
        bundle.save(dir.join("latest.ckpt"))?;
    }
    Ok(bundle)
}
