//! Encoder, mapping network, modulated decoder and conditional discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spaceedit_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use super::config::{GeneratorConfig, LayerKind, COMOD_DIM};
use super::layers::{add_channel_bias, lrelu, EqConv, EqLinear, ModConv};
use crate::error::{Error, Result};

/// Output images live in `(-1, 1)`; the input is pulled in by this factor
/// before the inverse tanh so the residual path stays finite.
pub const RESIDUAL_SQUASH: f64 = 0.99;
const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Mapping {
    pub layers: Vec<EqLinear>,
}

impl Mapping {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..cfg.mapping_depth)
            .map(|i| {
                let in_dim = if i == 0 { cfg.z_dim } else { cfg.w_dim };
                EqLinear::new(
                    store,
                    &format!("mapping.fc{i}"),
                    in_dim,
                    cfg.w_dim,
                    Some(0.0),
                    0.01,
                    rng,
                )
            })
            .collect();
        Mapping { layers }
    }

    /// `z` is `[B, z_dim]`; rows are normalized to unit RMS first.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        let sq = g.square(z);
        let ms = g.mean_keepdim(sq, &[1]);
        let ms = g.shift(ms, T::lit(PIXEL_NORM_EPS));
        let inv = g.rsqrt(ms);
        let mut x = g.mul(z, inv);
        for layer in &self.layers {
            let y = layer.forward(g, store, x);
            x = lrelu(g, y);
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: EqConv,
    /// `(input resolution, conv keeping width, conv halving resolution width)`.
    pub stages: Vec<(usize, EqConv, EqConv)>,
    pub comod: Option<EqLinear>,
}

/// Encoder output: one feature map per pyramid resolution plus the input.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: Vec<(usize, Var)>,
    pub image: Var,
    /// Pooled co-modulation feature `[B, COMOD_DIM]`.
    pub cond: Option<Var>,
}

impl PyramidVars {
    pub fn level(&self, res: usize) -> Option<Var> {
        self.levels.iter().find(|(r, _)| *r == res).map(|&(_, v)| v)
    }
}

/// Detached encoder output that can be reused across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub levels: Vec<(usize, Tensor<T>)>,
    pub image: Tensor<T>,
    pub cond: Option<Tensor<T>>,
}

impl<T: Real> Pyramid<T> {
    pub fn from_vars(g: &Graph<T>, p: &PyramidVars) -> Self {
        Pyramid {
            levels: p
                .levels
                .iter()
                .map(|&(r, v)| (r, g.value(v).clone()))
                .collect(),
            image: g.value(p.image).clone(),
            cond: p.cond.map(|c| g.value(c).clone()),
        }
    }

    pub fn to_vars(&self, g: &mut Graph<T>) -> PyramidVars {
        PyramidVars {
            levels: self
                .levels
                .iter()
                .map(|(r, t)| (*r, g.constant(t.clone())))
                .collect(),
            image: g.constant(self.image.clone()),
            cond: self.cond.as_ref().map(|c| g.constant(c.clone())),
        }
    }

    pub fn batch(&self) -> usize {
        self.image.dim(0)
    }

    pub fn keys(&self) -> Vec<usize> {
        self.levels.iter().map(|(r, _)| *r).collect()
    }

    /// Pyramid of a single batch element.
    pub fn select(&self, index: usize) -> Pyramid<T> {
        let pick = |t: &Tensor<T>| {
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            t.index0(index).reshape(shape)
        };
        Pyramid {
            levels: self.levels.iter().map(|(r, t)| (*r, pick(t))).collect(),
            image: pick(&self.image),
            cond: self.cond.as_ref().map(pick),
        }
    }

    /// Batch element `index` repeated `n` times.
    pub fn repeat(&self, index: usize, n: usize) -> Pyramid<T> {
        let rep = |t: &Tensor<T>| Tensor::stack(&vec![t.index0(index); n]);
        Pyramid {
            levels: self.levels.iter().map(|(r, t)| (*r, rep(t))).collect(),
            image: rep(&self.image),
            cond: self.cond.as_ref().map(rep),
        }
    }

    pub fn concat(parts: &[Pyramid<T>]) -> Pyramid<T> {
        let unstack = |t: &Tensor<T>| (0..t.dim(0)).map(|i| t.index0(i)).collect::<Vec<_>>();
        let cat = |f: &dyn Fn(&Pyramid<T>) -> &Tensor<T>| {
            Tensor::stack(&parts.iter().flat_map(|p| unstack(f(p))).collect::<Vec<_>>())
        };
        let levels = parts[0]
            .levels
            .iter()
            .enumerate()
            .map(|(k, (r, _))| (*r, cat(&|p: &Pyramid<T>| &p.levels[k].1)))
            .collect();
        let cond = parts[0]
            .cond
            .as_ref()
            .map(|_| cat(&|p: &Pyramid<T>| p.cond.as_ref().expect("cond")));
        Pyramid {
            levels,
            image: cat(&|p: &Pyramid<T>| &p.image),
            cond,
        }
    }
}

impl Encoder {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let top = cfg.resolution;
        let stem = EqConv::new(store, "encoder.stem", 3, cfg.channels(top), 1, true, rng);
        let mut stages = Vec::new();
        let mut r = top;
        while r > cfg.start_resolution() {
            let a = EqConv::new(
                store,
                &format!("encoder.b{r}.conv0"),
                cfg.channels(r),
                cfg.channels(r),
                3,
                true,
                rng,
            );
            let b = EqConv::new(
                store,
                &format!("encoder.b{r}.conv1"),
                cfg.channels(r),
                cfg.channels(r / 2),
                3,
                true,
                rng,
            );
            stages.push((r, a, b));
            r /= 2;
        }
        let comod = cfg.comod.then(|| {
            EqLinear::new(
                store,
                "encoder.comod",
                cfg.channels(cfg.start_resolution()),
                COMOD_DIM,
                Some(0.0),
                1.0,
                rng,
            )
        });
        Encoder {
            stem,
            stages,
            comod,
        }
    }

    /// `image` is `[B, 3, R, R]` in `[-1, 1]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> PyramidVars {
        let mut x = self.stem.forward_act(g, store, image);
        let mut levels = Vec::new();
        for (r, a, b) in &self.stages {
            x = a.forward_act(g, store, x);
            x = b.forward_act(g, store, x);
            x = g.avg_pool2(x);
            levels.push((r / 2, x));
        }
        levels.reverse();
        let cond = self.comod.as_ref().map(|fc| {
            let base = levels[0].1;
            let pooled = g.mean_keepdim(base, &[2, 3]);
            let (b, c) = (g.shape(pooled)[0], g.shape(pooled)[1]);
            let pooled = g.reshape(pooled, vec![b, c]);
            let y = fc.forward(g, store, pooled);
            lrelu(g, y)
        });
        PyramidVars {
            levels,
            image,
            cond,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthLayer {
    pub conv: ModConv,
    pub bias: ParamId,
    pub noise_gain: Option<ParamId>,
    pub kind: LayerKind,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub layers: Vec<SynthLayer>,
    pub resolution: usize,
}

impl Synthesis {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let style_dim = cfg.style_input_dim();
        let layers = cfg
            .style_layers()
            .into_iter()
            .map(|l| {
                let name = format!("synthesis.l{}", l.index);
                let (k, demod) = if l.kind == LayerKind::ToRgb {
                    (1, false)
                } else {
                    (3, true)
                };
                let conv = ModConv::new(
                    store,
                    &name,
                    style_dim,
                    l.in_channels,
                    l.out_channels,
                    k,
                    demod,
                    rng,
                );
                let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![l.out_channels]));
                let noise_gain = l
                    .has_noise()
                    .then(|| store.add(format!("{name}.noise_gain"), Tensor::zeros(vec![1])));
                SynthLayer {
                    conv,
                    bias,
                    noise_gain,
                    kind: l.kind,
                    resolution: l.resolution,
                }
            })
            .collect();
        Synthesis {
            layers,
            resolution: cfg.resolution,
        }
    }

    /// Resolutions of the noise inputs, one per noise-carrying layer.
    pub fn noise_resolutions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.noise_gain.is_some())
            .map(|l| l.resolution)
            .collect()
    }

    /// Decode from the pyramid. `styles` holds one `[B, w_dim]` code per
    /// style layer; `noise` one optional `[B or 1, 1, r, r]` map per
    /// noise-carrying layer (absent means zero). Returns `[B, 3, R, R]` in
    /// `(-1, 1)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &PyramidVars,
        styles: &[Var],
        noise: &[Option<Var>],
    ) -> Result<Var> {
        if styles.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} style codes for {} layers",
                styles.len(),
                self.layers.len()
            )));
        }
        let n_noise = self.noise_resolutions().len();
        if !noise.is_empty() && noise.len() != n_noise {
            return Err(Error::shape(format!(
                "{} noise maps for {n_noise} noise layers",
                noise.len()
            )));
        }
        let start = self.layers[0].resolution;
        let mut x = pyramid
            .level(start)
            .ok_or_else(|| Error::shape(format!("pyramid has no {start}x{start} level")))?;
        let mut noise_idx = 0;
        let mut rgb = None;
        for (layer, &w) in self.layers.iter().zip(styles) {
            let style_in = match pyramid.cond {
                Some(c) => g.concat(&[w, c], 1),
                None => w,
            };
            if layer.kind == LayerKind::Up {
                x = g.upsample2(x);
            }
            let mut y = layer.conv.forward(g, store, x, style_in);
            if layer.noise_gain.is_some() {
                if let Some(Some(n)) = noise.get(noise_idx) {
                    let gain = g.param(store, layer.noise_gain.expect("noise layer"));
                    let scaled = g.mul(*n, gain);
                    y = g.add(y, scaled);
                }
                noise_idx += 1;
            }
            y = add_channel_bias(g, store, y, layer.bias);
            if layer.kind == LayerKind::ToRgb {
                rgb = Some(y);
                break;
            }
            y = lrelu(g, y);
            if layer.kind == LayerKind::Up && layer.resolution < self.resolution {
                let skip = pyramid.level(layer.resolution).ok_or_else(|| {
                    Error::shape(format!(
                        "pyramid has no {r}x{r} level",
                        r = layer.resolution
                    ))
                })?;
                y = g.add(y, skip);
            }
            x = y;
        }
        let rgb = rgb.expect("synthesis ends with an RGB layer");
        // residual in the pre-activation domain: tanh(atanh(c * input) + rgb)
        let c = T::lit(RESIDUAL_SQUASH);
        let xi = g.scale(pyramid.image, c);
        let num = g.shift(xi, T::one());
        let neg = g.neg(xi);
        let den = g.shift(neg, T::one());
        let ratio = g.div(num, den);
        let lg = g.log(ratio);
        let base = g.scale(lg, T::lit(0.5));
        let pre = g.add(base, rgb);
        Ok(g.tanh(pre))
    }
}

#[derive(Clone, Debug)]
pub struct DiscBlock {
    pub conv0: EqConv,
    pub conv1: EqConv,
    pub skip: EqConv,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub from_rgb: EqConv,
    pub blocks: Vec<DiscBlock>,
    pub final_conv: EqConv,
    pub fc: EqLinear,
    pub out: EqLinear,
}

impl Discriminator {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let top = cfg.resolution;
        let from_rgb = EqConv::new(store, "disc.from_rgb", 6, cfg.channels(top), 1, true, rng);
        let mut blocks = Vec::new();
        let mut r = top;
        while r > 4 {
            let (c, c2) = (cfg.channels(r), cfg.channels(r / 2));
            blocks.push(DiscBlock {
                conv0: EqConv::new(store, &format!("disc.b{r}.conv0"), c, c, 3, true, rng),
                conv1: EqConv::new(store, &format!("disc.b{r}.conv1"), c, c2, 3, true, rng),
                skip: EqConv::new(store, &format!("disc.b{r}.skip"), c, c2, 1, false, rng),
            });
            r /= 2;
        }
        let c4 = cfg.channels(4);
        let final_conv = EqConv::new(store, "disc.final_conv", c4, c4, 3, true, rng);
        let fc = EqLinear::new(store, "disc.fc", c4 * 16, c4, Some(0.0), 1.0, rng);
        let out = EqLinear::new(store, "disc.out", c4, 1, Some(0.0), 1.0, rng);
        Discriminator {
            from_rgb,
            blocks,
            final_conv,
            fc,
            out,
        }
    }

    /// Realness logits `[B, 1]` for `(input, candidate)` image pairs.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
        candidate: Var,
    ) -> Var {
        let x = g.concat(&[input, candidate], 1);
        let mut x = self.from_rgb.forward_act(g, store, x);
        let half = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        for b in &self.blocks {
            let s = g.avg_pool2(x);
            let s = b.skip.forward(g, store, s);
            let y = b.conv0.forward_act(g, store, x);
            let y = b.conv1.forward_act(g, store, y);
            let y = g.avg_pool2(y);
            let sum = g.add(y, s);
            x = g.scale(sum, half);
        }
        let x = self.final_conv.forward_act(g, store, x);
        let n = g.shape(x)[0];
        let x = g.reshape(x, vec![n, self.fc.in_dim]);
        let x = self.fc.forward(g, store, x);
        let x = lrelu(g, x);
        self.out.forward(g, store, x)
    }
}

/// Layer handles for a generator (encoder, mapping, synthesis) and its
/// discriminator. Parameter values live in the two stores.
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: GeneratorConfig,
    pub mapping: Mapping,
    pub encoder: Encoder,
    pub synthesis: Synthesis,
    pub discriminator: Discriminator,
}

impl Networks {
    /// Register freshly initialized parameters in `g_store` and `d_store`.
    pub fn build<T: Real>(
        cfg: &GeneratorConfig,
        g_store: &mut ParamStore<T>,
        d_store: &mut ParamStore<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mapping = Mapping::new(g_store, cfg, &mut rng);
        let encoder = Encoder::new(g_store, cfg, &mut rng);
        let synthesis = Synthesis::new(g_store, cfg, &mut rng);
        let discriminator = Discriminator::new(d_store, cfg, &mut rng);
        Ok(Networks {
            config: cfg.clone(),
            mapping,
            encoder,
            synthesis,
            discriminator,
        })
    }

    pub fn n_style_layers(&self) -> usize {
        self.synthesis.layers.len()
    }

    /// Broadcast one `[B, w_dim]` code to every style layer.
    pub fn broadcast(&self, w: Var) -> Vec<Var> {
        vec![w; self.n_style_layers()]
    }
}
