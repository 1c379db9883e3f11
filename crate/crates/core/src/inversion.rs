//! Conditional inversion into the editing space, identity codes,
//! interpolation, transfer and averaging.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use spaceedit_tensor::{Adam, AdamConfig, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::generator::{GeneratorBundle, StyleCode};
use crate::image::Image;
use crate::metrics::FeatureExtractor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    MeanW,
    Random,
    Given(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub noise_weight: f64,
    pub init: InitKind,
    pub initial_lr: f64,
    pub lr_rampup: f64,
    pub lr_rampdown: f64,
    /// Scale of the exploration noise added to w, relative to `w_std`.
    pub initial_noise_factor: f64,
    pub noise_ramp: f64,
    pub optimize_noise: bool,
    pub track_best: bool,
    pub seed: u64,
    /// Independent inversions run together in one batch.
    pub batch_size: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 500,
            noise_weight: 1e5,
            init: InitKind::MeanW,
            initial_lr: 0.1,
            lr_rampup: 0.05,
            lr_rampdown: 0.25,
            initial_noise_factor: 0.05,
            noise_ramp: 0.75,
            optimize_noise: true,
            track_best: true,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("inversion steps must be at least 1"));
        }
        if !(self.noise_weight >= 0.0) {
            return Err(Error::invalid("noise_weight must be nonnegative"));
        }
        if self.batch_size == 0 || !(self.initial_lr > 0.0) {
            return Err(Error::invalid("batch_size and initial_lr must be positive"));
        }
        Ok(())
    }

    /// Learning rate at `step` (cosine ramp-down, linear ramp-up).
    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps as f64;
        let mut ramp = ((1.0 - t) / self.lr_rampdown).min(1.0);
        ramp = 0.5 - 0.5 * (ramp * std::f64::consts::PI).cos();
        ramp *= (t / self.lr_rampup).min(1.0);
        self.initial_lr * ramp
    }

    fn w_noise_scale(&self, step: usize, w_std: f64) -> f64 {
        let t = step as f64 / self.steps as f64;
        w_std * self.initial_noise_factor * (1.0 - t / self.noise_ramp).max(0.0).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub style: StyleCode,
    /// Mean absolute input-target difference, 0-255 units.
    pub init_error: f64,
    /// Mean absolute difference of the returned reconstruction, 0-255 units.
    pub final_error: f64,
    /// Objective value per step.
    pub trace: Vec<f64>,
}

impl InversionResult {
    /// Running minimum of the objective trace.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|&v| {
                best = best.min(v);
                best
            })
            .collect()
    }
}

/// Serializable summary of an inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub id: String,
    pub w: Vec<f32>,
    pub final_error: f64,
    pub init_error: f64,
}

fn roll1<T: Real>(g: &mut Graph<T>, x: Var, axis: usize) -> Var {
    let n = g.shape(x)[axis];
    let last = g.narrow(x, axis, n - 1, 1);
    let rest = g.narrow(x, axis, 0, n - 1);
    g.concat(&[last, rest], axis)
}

/// Per-sample noise penalty `[B]` for one `[B, 1, H, W]` buffer: squared
/// shift-1 autocorrelation in x and y of the RMS-normalized map, summed
/// over dyadic downsamplings down to 8x8.
pub fn noise_reg_vars<T: Real>(g: &mut Graph<T>, noise: Var) -> Var {
    let b = g.shape(noise)[0];
    let mut x = noise;
    let mut total: Option<Var> = None;
    loop {
        let sq = g.square(x);
        let ms = g.mean_keepdim(sq, &[1, 2, 3]);
        let ms = g.shift(ms, T::lit(1e-12));
        let inv = g.rsqrt(ms);
        let xn = g.mul(x, inv);
        for axis in [3, 2] {
            let r = roll1(g, xn, axis);
            let p = g.mul(xn, r);
            let m = g.mean_keepdim(p, &[1, 2, 3]);
            let m = g.square(m);
            let m = g.reshape(m, vec![b]);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        if g.shape(x)[2] <= 8 {
            break;
        }
        x = g.avg_pool2(x);
    }
    total.expect("at least one scale")
}

/// Per-scale terms (finest first) for a single `H x W` buffer.
pub fn noise_regularizer_terms(buffer: &Tensor<f64>) -> Vec<f64> {
    let (h, w) = (buffer.dim(buffer.rank() - 2), buffer.dim(buffer.rank() - 1));
    let mut terms = Vec::new();
    let mut g = Graph::<f64>::new();
    let mut x = g.constant(buffer.clone().reshape(vec![1, 1, h, w]));
    loop {
        let t = noise_reg_vars_single_scale(&mut g, x);
        terms.push(t);
        if g.shape(x)[2] <= 8 {
            break;
        }
        x = g.avg_pool2(x);
    }
    terms
}

fn noise_reg_vars_single_scale(g: &mut Graph<f64>, x: Var) -> f64 {
    let h = g.shape(x)[2];
    if h > 8 {
        // full penalty of this scale minus the penalty of the coarser ones
        let all = noise_reg_vars(g, x);
        let p = g.avg_pool2(x);
        let rest = noise_reg_vars(g, p);
        g.value(all).item() - g.value(rest).item()
    } else {
        let all = noise_reg_vars(g, x);
        g.value(all).item()
    }
}

/// Total noise penalty over a set of buffers, each `H x W` (or `[1, 1, H, W]`).
pub fn noise_regularizer(buffers: &[Tensor<f64>]) -> f64 {
    buffers
        .iter()
        .map(|b| noise_regularizer_terms(b).iter().sum::<f64>())
        .sum()
}

fn pixel_errors(out: &Tensor<f32>, targets: &[&Image]) -> Vec<f64> {
    let per = out.numel() / targets.len();
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let o = &out.data()[i * per..(i + 1) * per];
            let s: f64 = o
                .iter()
                .zip(t.data())
                .map(|(&v, &q)| (((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0) - q as f64).abs())
                .sum();
            s / per as f64 * 255.0
        })
        .collect()
}

fn image_error(a: &Image, b: &Image) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    s / a.data().len() as f64 * 255.0
}

fn check_bundle(bundle: &GeneratorBundle) -> Result<()> {
    if !bundle.is_trained() {
        return Err(Error::invalid("inversion needs a trained generator"));
    }
    if bundle.w_avg.len() != bundle.config.w_dim {
        return Err(Error::invalid("bundle has no latent statistics"));
    }
    Ok(())
}

fn normalize_noise(t: &mut Tensor<f32>) {
    let b = t.dim(0);
    let per = t.numel() / b;
    for chunk in t.data_mut().chunks_mut(per) {
        let n = per as f64;
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = chunk
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(1e-12);
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// Invert one chunk of independent problems jointly.
fn invert_chunk(
    bundle: &GeneratorBundle,
    inputs: &[&Image],
    targets: &[&Image],
    cfg: &InversionConfig,
    chunk_seed: u64,
) -> Result<Vec<InversionResult>> {
    let b = inputs.len();
    let dim = bundle.config.w_dim;
    let pyramid = bundle.encode(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed);
    let w_std = bundle.w_std as f64;
    let init: Vec<f32> = match &cfg.init {
        InitKind::MeanW => bundle.w_avg.repeat(b),
        InitKind::Given(w) => {
            if w.len() != dim {
                return Err(Error::shape(format!(
                    "initial code has {} entries, expected {dim}",
                    w.len()
                )));
            }
            w.repeat(b)
        }
        InitKind::Random => {
            let z = Tensor::from_fn(vec![b, bundle.config.z_dim], |_| {
                StandardNormal.sample(&mut rng)
            });
            bundle.map_latents(&z).into_data()
        }
    };
    let mut w = Tensor::new(vec![b, dim], init);
    let noise_res = bundle.noise_resolutions();
    let mut noise: Vec<Tensor<f32>> = if cfg.optimize_noise {
        noise_res
            .iter()
            .map(|&r| Tensor::from_fn(vec![b, 1, r, r], |_| StandardNormal.sample(&mut rng)))
            .collect()
    } else {
        Vec::new()
    };
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: cfg.initial_lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let extractor = FeatureExtractor::shared();
    let target_t = Image::batch_signed::<f32>(targets);
    let n_layers = bundle.n_style_layers();

    let mut traces = vec![Vec::with_capacity(cfg.steps); b];
    let mut best: Vec<Option<(f64, Vec<f32>, Vec<Tensor<f32>>)>> = vec![None; b];
    let snapshot =
        |w: &Tensor<f32>, noise: &[Tensor<f32>], i: usize| -> (Vec<f32>, Vec<Tensor<f32>>) {
            let wi = w.data()[i * dim..(i + 1) * dim].to_vec();
            let ni = noise
                .iter()
                .map(|n| {
                    let (_, c, h, ww) = n.dims4();
                    n.index0(i).reshape(vec![1, c, h, ww])
                })
                .collect();
            (wi, ni)
        };

    for step in 0..=cfg.steps {
        let last = step == cfg.steps;
        let scale = if last {
            0.0
        } else {
            cfg.w_noise_scale(step, w_std)
        };
        let w_used = if scale > 0.0 {
            let jitter = Tensor::from_fn(vec![b, dim], |_| StandardNormal.sample(&mut rng));
            w.zip_map(&jitter, |a, n: f32| a + n * scale as f32)
        } else {
            w.clone()
        };
        let mut g = Graph::<f32>::new();
        g.freeze(&bundle.g);
        let pv = pyramid.to_vars(&mut g);
        let wv = g.variable(w_used.clone());
        let nv: Vec<Var> = noise.iter().map(|n| g.variable(n.clone())).collect();
        let styles = vec![wv; n_layers];
        let noise_opt: Vec<Option<Var>> = nv.iter().map(|&v| Some(v)).collect();
        let out = bundle
            .nets
            .synthesis
            .forward(&mut g, &bundle.g, &pv, &styles, &noise_opt)?;
        let tv = g.constant(target_t.clone());
        let mut per = extractor.distance_vars(&mut g, out, tv);
        if cfg.noise_weight > 0.0 {
            for &n in &nv {
                let r = noise_reg_vars(&mut g, n);
                let r = g.scale(r, cfg.noise_weight as f32);
                per = g.add(per, r);
            }
        }
        let losses: Vec<f64> = g.value(per).data().iter().map(|&v| v as f64).collect();
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "inversion objective at step {step}"
            )));
        }
        let errs = pixel_errors(g.value(out), targets);
        for i in 0..b {
            if !last {
                traces[i].push(losses[i]);
            }
            let better = match &best[i] {
                None => true,
                Some((e, _, _)) => cfg.track_best && errs[i] < *e,
            };
            if better || (!cfg.track_best && last) {
                let (wi, ni) = snapshot(&w_used, &noise, i);
                best[i] = Some((errs[i], wi, ni));
            }
        }
        if last {
            break;
        }
        let total = g.sum_all(per);
        let grads = g.backward(total);
        let lr = cfg.learning_rate(step);
        let gw = grads.get(wv).expect("w gradient").clone();
        adam.update_slot(0, w.data_mut(), gw.data(), lr);
        for (k, &v) in nv.iter().enumerate() {
            if let Some(gn) = grads.get(v) {
                adam.update_slot(k + 1, noise[k].data_mut(), gn.data(), lr);
            }
            normalize_noise(&mut noise[k]);
        }
    }

    Ok((0..b)
        .map(|i| {
            let (err, wi, ni) = best[i].take().expect("at least one iterate");
            let style = if ni.is_empty() {
                StyleCode::new(wi)
            } else {
                StyleCode::new(wi).with_noise(ni)
            };
            InversionResult {
                style,
                init_error: image_error(inputs[i], targets[i]),
                final_error: err,
                trace: std::mem::take(&mut traces[i]),
            }
        })
        .collect())
}

/// Independent inversions of `(input, target)` pairs, run in batches.
pub fn invert_batch(
    bundle: &GeneratorBundle,
    inputs: &[&Image],
    targets: &[&Image],
    cfg: &InversionConfig,
) -> Result<Vec<InversionResult>> {
    cfg.validate()?;
    check_bundle(bundle)?;
    if inputs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    for (a, t) in inputs.iter().zip(targets) {
        if !a.same_shape(t) {
            return Err(Error::shape("input and target differ in size"));
        }
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (k, (ci, ct)) in inputs
        .chunks(cfg.batch_size)
        .zip(targets.chunks(cfg.batch_size))
        .enumerate()
    {
        let seed = crate::editops::mix_seed(cfg.seed, k as u64);
        out.extend(invert_chunk(bundle, ci, ct, cfg, seed)?);
    }
    Ok(out)
}

pub fn invert_conditional(
    bundle: &GeneratorBundle,
    input: &Image,
    target: &Image,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    Ok(invert_batch(bundle, &[input], &[target], cfg)?.remove(0))
}

/// The identity code `w0`: inversion with the input as its own target.
pub fn invert_identity(
    bundle: &GeneratorBundle,
    input: &Image,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    invert_conditional(bundle, input, input, cfg)
}

/// `(1 - alpha) * w0 + alpha * w`.
pub fn interpolate_codes(w0: &[f32], w: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if w0.len() != w.len() {
        return Err(Error::shape(format!(
            "codes of length {} and {}",
            w0.len(),
            w.len()
        )));
    }
    Ok(w0
        .iter()
        .zip(w)
        .map(|(&a, &b)| {
            if alpha == 0.0 {
                a
            } else if alpha == 1.0 {
                b
            } else {
                (1.0 - alpha) * a + alpha * b
            }
        })
        .collect())
}

/// Render `image` under an existing code, without optimization.
pub fn transfer_style(bundle: &GeneratorBundle, w: &[f32], image: &Image) -> Result<Image> {
    bundle.generate(
        image,
        &crate::generator::LatentInput::Style(StyleCode::new(w.to_vec())),
    )
}

/// Arithmetic mean of codes.
pub fn average_codes(codes: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = codes
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty list of codes"))?;
    let d = first.len();
    if codes.iter().any(|c| c.len() != d) {
        return Err(Error::shape("codes differ in length"));
    }
    let n = codes.len() as f64;
    Ok((0..d)
        .map(|j| (codes.iter().map(|c| c[j] as f64).sum::<f64>() / n) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_buffer_scores_two_per_scale() {
        let t = Tensor::full(vec![32, 32], 0.7);
        let terms = noise_regularizer_terms(&t);
        assert_eq!(terms.len(), 3);
        for v in terms {
            assert!((v - 2.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn block_checkerboard_cancels_at_finest_scale() {
        let t = Tensor::from_fn(vec![16, 16], |i| {
            let (y, x) = (i / 16, i % 16);
            if ((x / 2) + (y / 2)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        assert!(noise_regularizer_terms(&t)[0].abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = vec![1.0, -2.0, 0.3];
        let b = vec![0.5, 4.0, -0.1];
        assert_eq!(interpolate_codes(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_codes(&a, &b, 1.0).unwrap(), b);
        let mid: Vec<f32> = a.iter().zip(&b).map(|(x, y)| (x + y) * 0.5).collect();
        assert_eq!(interpolate_codes(&a, &b, 0.5).unwrap(), mid);
    }

    #[test]
    fn averaging() {
        let v = vec![1.0f32, -3.0, 2.5];
        assert_eq!(average_codes(&[v.clone()]).unwrap(), v);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!(average_codes(&[v, neg]).unwrap().iter().all(|&x| x == 0.0));
        assert!(average_codes(&[]).is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        let c = InversionConfig {
            steps: 100,
            ..Default::default()
        };
        assert_eq!(c.learning_rate(0), 0.0);
        assert!((c.learning_rate(50) - 0.1).abs() < 1e-12);
        assert!(c.learning_rate(99) < 0.01);
    }
}
