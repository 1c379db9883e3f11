//! Image similarity, perceptual and distribution metrics.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use spaceedit_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::generator::{GeneratorBundle, StyleCode};
use crate::image::Image;

pub const DEFAULT_FEATURE_SEED: u64 = 20_211_130;
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const NORM_EPS: f64 = 1e-10;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Mean absolute pixel difference in `[0, 1]` units.
pub fn l1_error(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Normalized 1-D Gaussian taps for the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Structural similarity with a 7x7 Gaussian window (sigma 1.5), averaged
/// over valid positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let n = w * h;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = a.data()[c * n..(c + 1) * n]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.data()[c * n..(c + 1) * n]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (mu_a, _, _) = filter_valid(&pa, w, h, &taps);
        let (mu_b, _, _) = filter_valid(&pb, w, h, &taps);
        let (aa, _, _) = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let (bb, _, _) = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let (ab, _, _) = filter_valid(&prod(&pa, &pb), w, h, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fixed random convolutional features standing in for pretrained networks.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    /// `(weight [O, I, 3, 3], bias [O])` per scale.
    layers: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl FeatureExtractor {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for &cout in &Self::WIDTHS {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::from_fn(vec![cout, cin, 3, 3], |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * std
            });
            let b = Tensor::from_fn(vec![cout], |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                0.5 * v
            });
            layers.push((w, b));
            cin = cout;
        }
        FeatureExtractor { seed, layers }
    }

    /// Process-wide extractor with the default seed.
    pub fn shared() -> &'static FeatureExtractor {
        static SHARED: OnceLock<FeatureExtractor> = OnceLock::new();
        SHARED.get_or_init(|| FeatureExtractor::new(DEFAULT_FEATURE_SEED))
    }

    /// Raw activations per scale for `[B, 3, H, W]` input in `[-1, 1]`.
    pub fn activations<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut out = Vec::new();
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            let wv = g.constant(w.cast());
            let c = b.numel();
            let bv = g.constant(b.cast::<T>().reshape(vec![1, c, 1, 1]));
            let y = g.conv2d(h, wv, 1);
            let y = g.add(y, bv);
            h = g.leaky_relu(y, 0.2);
            out.push(h);
        }
        out
    }

    /// Per-sample perceptual distance `[B]` between two image batches.
    pub fn distance_vars<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.activations(g, a);
        let fb = self.activations(g, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let nx = unit_channels(g, x);
            let ny = unit_channels(g, y);
            let d = g.sub(nx, ny);
            let d = g.square(d);
            let d = g.sum_keepdim(d, &[1]);
            let d = g.mean_keepdim(d, &[2, 3]);
            let n = g.shape(d)[0];
            let d = g.reshape(d, vec![n]);
            total = Some(match total {
                Some(t) => g.add(t, d),
                None => d,
            });
        }
        total.expect("at least one scale")
    }

    pub fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f64> {
        same_shape(a, b)?;
        if a == b {
            return Ok(0.0);
        }
        let mut g = Graph::<f64>::new();
        let av = g.constant(a.to_signed());
        let bv = g.constant(b.to_signed());
        let d = self.distance_vars(&mut g, av, bv);
        Ok(g.value(d).data()[0].max(0.0))
    }

    /// Distances between corresponding images of two equal-length lists.
    pub fn perceptual_distances(&self, a: &[&Image], b: &[&Image]) -> Result<Vec<f64>> {
        if a.len() != b.len() {
            return Err(Error::shape(format!("{} vs {} images", a.len(), b.len())));
        }
        let mut out = Vec::with_capacity(a.len());
        for (ca, cb) in a.chunks(32).zip(b.chunks(32)) {
            for (x, y) in ca.iter().zip(cb) {
                same_shape(x, y)?;
            }
            let mut g = Graph::<f32>::new();
            let av = g.constant(Image::batch_signed(ca));
            let bv = g.constant(Image::batch_signed(cb));
            let d = self.distance_vars(&mut g, av, bv);
            out.extend(
                g.value(d)
                    .data()
                    .iter()
                    .zip(ca.iter().zip(cb))
                    .map(
                        |(&v, (x, y))| {
                            if x == y {
                                0.0
                            } else {
                                (v as f64).max(0.0)
                            }
                        },
                    ),
            );
        }
        Ok(out)
    }

    /// Globally pooled activations per image (the Frechet feature).
    pub fn pooled_features(&self, images: &[&Image]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Image::batch_signed(chunk));
            let acts = self.activations(&mut g, x);
            let pooled: Vec<Tensor<f32>> = acts
                .into_iter()
                .map(|a| {
                    let p = g.mean_keepdim(a, &[2, 3]);
                    g.value(p).clone()
                })
                .collect();
            for i in 0..chunk.len() {
                let mut f = Vec::new();
                for p in &pooled {
                    let c = p.dim(1);
                    f.extend(p.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64));
                }
                out.push(f);
            }
        }
        out
    }
}

fn unit_channels<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let sq = g.square(x);
    let n = g.sum_keepdim(sq, &[1]);
    let n = g.shift(n, T::lit(NORM_EPS));
    let inv = g.rsqrt(n);
    g.mul(x, inv)
}

/// Perceptual distance under the shared extractor.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    FeatureExtractor::shared().perceptual_distance(a, b)
}

fn mean_cov(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for s in set {
        mu += DVector::from_column_slice(s);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in set {
        let x = DVector::from_column_slice(s) - &mu;
        cov += &x * x.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets.
///
/// The cross term uses `tr sqrt(S1^1/2 S2 S1^1/2)`, which equals
/// `tr sqrt(S1 S2)` but only needs symmetric eigendecompositions.
pub fn frechet_distance(set1: &[Vec<f64>], set2: &[Vec<f64>]) -> Result<f64> {
    if set1.len() < 2 || set2.len() < 2 {
        return Err(Error::invalid(
            "frechet distance needs at least 2 samples per set",
        ));
    }
    let d = set1[0].len();
    if set1.iter().chain(set2).any(|v| v.len() != d) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let (m1, c1) = mean_cov(set1);
    let (m2, c2) = mean_cov(set2);
    let s1 = sym_sqrt(&c1);
    let inner = &s1 * &c2 * &s1;
    let cross = sym_sqrt(&inner).trace();
    let v = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    if v < -1e-6 {
        return Err(Error::NonFinite(format!("negative frechet distance {v}")));
    }
    Ok(v.max(0.0))
}

/// Frechet distance between pooled features of two image sets.
pub fn fid_score(extractor: &FeatureExtractor, a: &[&Image], b: &[&Image]) -> Result<f64> {
    frechet_distance(&extractor.pooled_features(a), &extractor.pooled_features(b))
}

/// Mean pairwise perceptual distance within each output group, averaged
/// over groups.
pub fn mean_pairwise_distance(extractor: &FeatureExtractor, groups: &[Vec<Image>]) -> Result<f64> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for outs in groups {
        if outs.len() < 2 {
            return Err(Error::invalid("need at least 2 outputs per input"));
        }
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                a.push(&outs[i]);
                b.push(&outs[j]);
            }
        }
    }
    let d = extractor.perceptual_distances(&a, &b)?;
    let per_group = groups[0].len() * (groups[0].len() - 1) / 2;
    let means: Vec<f64> = d
        .chunks(per_group)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// How the latent of each diversity sample is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSampling {
    RandomZ,
    /// Every sample uses the mean code; only the noise inputs vary.
    ConstantW,
}

/// Diversity of `n_samples` outputs per input, each with its own latent and
/// noise draw.
pub fn diversity_lpips(
    bundle: &GeneratorBundle,
    inputs: &[&Image],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    diversity_lpips_with(bundle, inputs, n_samples, seed, LatentSampling::RandomZ)
}

pub fn diversity_lpips_with(
    bundle: &GeneratorBundle,
    inputs: &[&Image],
    n_samples: usize,
    seed: u64,
    sampling: LatentSampling,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::invalid("n_samples must be at least 2"));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("no inputs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_res = bundle.noise_resolutions();
    let mut groups = Vec::with_capacity(inputs.len());
    for im in inputs {
        let z = Tensor::from_fn(vec![n_samples, bundle.config.z_dim], |_| {
            StandardNormal.sample(&mut rng)
        });
        let w = match sampling {
            LatentSampling::RandomZ => bundle.map_latents(&z).into_data(),
            LatentSampling::ConstantW => bundle.w_avg.repeat(n_samples),
        };
        let codes: Vec<StyleCode> = w
            .chunks(bundle.config.w_dim)
            .map(|r| {
                let noise = noise_res
                    .iter()
                    .map(|&n| {
                        Tensor::from_fn(vec![1, 1, n, n], |_| StandardNormal.sample(&mut rng))
                    })
                    .collect();
                StyleCode::new(r.to_vec()).with_noise(noise)
            })
            .collect();
        groups.push(bundle.generate_many(im, &codes)?);
    }
    mean_pairwise_distance(FeatureExtractor::shared(), &groups)
}

/// Number of controls `image_variance` expects.
pub const VARIANCE_CONTROLS: usize = 10;

/// Per-pixel variance across outputs, averaged over pixels and channels.
pub fn image_variance(outputs: &[Image]) -> Result<f64> {
    if outputs.len() != VARIANCE_CONTROLS {
        return Err(Error::invalid(format!(
            "expected {VARIANCE_CONTROLS} outputs, got {}",
            outputs.len()
        )));
    }
    for o in &outputs[1..] {
        same_shape(&outputs[0], o)?;
    }
    let n = outputs.len() as f64;
    let len = outputs[0].data().len();
    let mut total = 0.0;
    for i in 0..len {
        let mean = outputs.iter().map(|o| o.data()[i] as f64).sum::<f64>() / n;
        total += outputs
            .iter()
            .map(|o| (o.data()[i] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
    }
    Ok(total / len as f64)
}

/// Image variance of one input rendered under ten codes.
pub fn image_variance_codes(
    bundle: &GeneratorBundle,
    input: &Image,
    codes: &[StyleCode],
) -> Result<f64> {
    if codes.len() != VARIANCE_CONTROLS {
        return Err(Error::invalid(format!(
            "expected {VARIANCE_CONTROLS} controls, got {}",
            codes.len()
        )));
    }
    image_variance(&bundle.generate_many(input, codes)?)
}

/// Named metric values written per evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: std::collections::BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    /// Plain-text table with one metric per row.
    pub fn table(&self) -> String {
        let width = self
            .metrics
            .keys()
            .map(|k| k.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k:<width$}  {v:.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_values() {
        let a = Image::filled(8, 8, [0.0; 3]);
        let b = Image::filled(8, 8, [1.0; 3]);
        assert_eq!(l1_error(&a, &b).unwrap(), 1.0);
        assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
        let r = crate::editops::procedural_image(1, 16, 16);
        assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(perceptual_distance(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn bernoulli_variance() {
        let mut outs = vec![Image::filled(4, 4, [0.0; 3]); 5];
        outs.extend(vec![Image::filled(4, 4, [1.0; 3]); 5]);
        assert!((image_variance(&outs).unwrap() - 0.25).abs() < 1e-12);
        assert!(image_variance(&outs[..9]).is_err());
    }

    #[test]
    fn frechet_mean_shift() {
        let set1: Vec<Vec<f64>> = vec![
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![2.0, 3.0],
            vec![-1.0, 0.5],
        ];
        let set2: Vec<Vec<f64>> = set1.iter().map(|v| vec![v[0] + 3.0, v[1] - 4.0]).collect();
        assert!((frechet_distance(&set1, &set2).unwrap() - 25.0).abs() < 1e-9);
        assert!(frechet_distance(&set1, &set1).unwrap().abs() < 1e-6);
        assert!(frechet_distance(&set1[..1], &set2).is_err());
    }
}
