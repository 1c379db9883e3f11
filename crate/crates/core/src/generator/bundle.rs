use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spaceedit_tensor::{Graph, ParamStore, Tensor, Var};

use super::config::GeneratorConfig;
use super::nets::{Networks, Pyramid, PyramidVars};
use crate::error::{Error, Result};
use crate::image::Image;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPEDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const W_STATS_SAMPLES: usize = 10_000;
const W_STATS_SEED: u64 = 0x57a7;

/// A point in the editing space, optionally with per-layer overrides and
/// noise maps.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StyleCode {
    pub w: Vec<f32>,
    pub per_layer: Option<Vec<Vec<f32>>>,
    /// One `[1, 1, r, r]` map per noise-carrying decoder layer.
    pub noise: Option<Vec<Tensor<f32>>>,
}

impl StyleCode {
    pub fn new(w: Vec<f32>) -> Self {
        StyleCode {
            w,
            per_layer: None,
            noise: None,
        }
    }

    pub fn with_noise(mut self, noise: Vec<Tensor<f32>>) -> Self {
        self.noise = Some(noise);
        self
    }

    /// The code used at style layer `layer`.
    pub fn layer(&self, layer: usize) -> &[f32] {
        match &self.per_layer {
            Some(p) => &p[layer],
            None => &self.w,
        }
    }

    pub fn validate(&self, cfg: &GeneratorConfig, noise_res: &[usize]) -> Result<()> {
        if self.w.len() != cfg.w_dim {
            return Err(Error::shape(format!(
                "w has {} entries, expected {}",
                self.w.len(),
                cfg.w_dim
            )));
        }
        if let Some(p) = &self.per_layer {
            if p.len() != cfg.n_style_layers() {
                return Err(Error::shape(format!(
                    "{} per-layer codes for {} style layers",
                    p.len(),
                    cfg.n_style_layers()
                )));
            }
            if p.iter().any(|v| v.len() != cfg.w_dim) {
                return Err(Error::shape("per-layer code of wrong width"));
            }
        }
        if let Some(n) = &self.noise {
            if n.len() != noise_res.len() {
                return Err(Error::shape(format!(
                    "{} noise maps for {} noise layers",
                    n.len(),
                    noise_res.len()
                )));
            }
            for (t, &r) in n.iter().zip(noise_res) {
                if t.shape() != [1, 1, r, r] {
                    return Err(Error::shape(format!(
                        "noise map {:?}, expected [1, 1, {r}, {r}]",
                        t.shape()
                    )));
                }
            }
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("style code".into()));
        }
        Ok(())
    }
}

/// Either a latent sample to be mapped or a ready code.
#[derive(Clone, Debug)]
pub enum LatentInput {
    Z(Vec<f32>),
    Style(StyleCode),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: u64,
    pub images_seen: u64,
    pub seed: u64,
    pub dataset_hash: Option<String>,
}

/// Adam moments for one store, kept so training can resume exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub steps: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct GeneratorBundle {
    pub config: GeneratorConfig,
    pub nets: Networks,
    /// Encoder, mapping and synthesis parameters.
    pub g: ParamStore<f32>,
    /// Discriminator parameters.
    pub d: ParamStore<f32>,
    pub meta: TrainingMeta,
    /// Mean of mapped latents, the default inversion start.
    pub w_avg: Vec<f32>,
    /// RMS distance of mapped latents from `w_avg`.
    pub w_std: f32,
    pub optim: Option<(AdamState, AdamState)>,
}

fn stack_rows(rows: &[&[f32]]) -> Tensor<f32> {
    let d = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), d], data)
}

impl GeneratorBundle {
    /// Freshly initialized (untrained) networks.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let mut g = ParamStore::new();
        let mut d = ParamStore::new();
        let nets = Networks::build(&config, &mut g, &mut d)?;
        let mut b = GeneratorBundle {
            meta: TrainingMeta {
                seed: config.seed,
                ..Default::default()
            },
            config,
            nets,
            g,
            d,
            w_avg: Vec::new(),
            w_std: 0.0,
            optim: None,
        };
        b.refresh_w_stats();
        Ok(b)
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn n_style_layers(&self) -> usize {
        self.nets.n_style_layers()
    }

    pub fn noise_resolutions(&self) -> Vec<usize> {
        self.nets.synthesis.noise_resolutions()
    }

    pub fn is_trained(&self) -> bool {
        self.meta.steps > 0
    }

    /// Recompute `w_avg` and `w_std` from a fixed set of random latents.
    pub fn refresh_w_stats(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(W_STATS_SEED);
        let dim = self.config.w_dim;
        let mut sum = vec![0.0f64; dim];
        let mut ws = Vec::with_capacity(W_STATS_SAMPLES);
        let chunk = 1000;
        for _ in 0..W_STATS_SAMPLES / chunk {
            let z = Tensor::from_fn(vec![chunk, self.config.z_dim], |_| {
                StandardNormal.sample(&mut rng)
            });
            let w = self.map_latents(&z);
            for row in w.data().chunks(dim) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
                ws.push(row.to_vec());
            }
        }
        let n = ws.len() as f64;
        let avg: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = 0.0f64;
        for w in &ws {
            for (a, &v) in avg.iter().zip(w) {
                sq += (v as f64 - a).powi(2);
            }
        }
        self.w_avg = avg.iter().map(|&v| v as f32).collect();
        self.w_std = (sq / n).sqrt() as f32;
    }

    /// Map a batch `[B, z_dim]` of latents to `[B, w_dim]`.
    pub fn map_latents(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        g.freeze(&self.g);
        let zv = g.constant(z.clone());
        let w = self.nets.mapping.forward(&mut g, &self.g, zv);
        g.value(w).clone()
    }

    pub fn map_latent(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.config.z_dim {
            return Err(Error::shape(format!(
                "z has {} entries, expected {}",
                z.len(),
                self.config.z_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent z".into()));
        }
        if z.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("cannot normalize a zero latent"));
        }
        Ok(self
            .map_latents(&Tensor::new(vec![1, z.len()], z.to_vec()))
            .into_data())
    }

    fn check_image(&self, im: &Image) -> Result<()> {
        let r = self.config.resolution;
        if im.width() != r || im.height() != r {
            return Err(Error::shape(format!(
                "image is {}x{}, model expects {r}x{r}",
                im.width(),
                im.height()
            )));
        }
        Ok(())
    }

    /// Encoder pyramid on a graph where the generator is frozen.
    pub fn encode_vars(&self, g: &mut Graph<f32>, images: &[&Image]) -> Result<PyramidVars> {
        if images.is_empty() {
            return Err(Error::invalid("no images to encode"));
        }
        for im in images {
            self.check_image(im)?;
        }
        g.freeze(&self.g);
        let x = g.constant(Image::batch_signed(images));
        Ok(self.nets.encoder.forward(g, &self.g, x))
    }

    pub fn encode(&self, images: &[&Image]) -> Result<Pyramid<f32>> {
        let mut g = Graph::new();
        let p = self.encode_vars(&mut g, images)?;
        Ok(Pyramid::from_vars(&g, &p))
    }

    pub fn encode_image(&self, image: &Image) -> Result<Pyramid<f32>> {
        self.encode(&[image])
    }

    /// Per-layer code and noise variables for a batch of style codes.
    pub fn style_vars(
        &self,
        g: &mut Graph<f32>,
        styles: &[&StyleCode],
    ) -> Result<(Vec<Var>, Vec<Option<Var>>)> {
        let noise_res = self.noise_resolutions();
        for s in styles {
            s.validate(&self.config, &noise_res)?;
        }
        let layers = (0..self.n_style_layers())
            .map(|l| {
                let rows: Vec<&[f32]> = styles.iter().map(|s| s.layer(l)).collect();
                g.constant(stack_rows(&rows))
            })
            .collect();
        let noise = if styles.iter().all(|s| s.noise.is_none()) {
            Vec::new()
        } else {
            noise_res
                .iter()
                .enumerate()
                .map(|(k, &r)| {
                    let maps: Vec<Tensor<f32>> = styles
                        .iter()
                        .map(|s| match &s.noise {
                            Some(n) => n[k].index0(0),
                            None => Tensor::zeros(vec![1, r, r]),
                        })
                        .collect();
                    Some(g.constant(Tensor::stack(&maps)))
                })
                .collect()
        };
        Ok((layers, noise))
    }

    /// Decode a batch: `pyramid` and `styles` must agree in batch size.
    pub fn synthesize(&self, pyramid: &Pyramid<f32>, styles: &[&StyleCode]) -> Result<Vec<Image>> {
        if pyramid.batch() != styles.len() {
            return Err(Error::shape(format!(
                "pyramid batch {} vs {} style codes",
                pyramid.batch(),
                styles.len()
            )));
        }
        if pyramid.keys() != self.config.pyramid_resolutions() {
            return Err(Error::shape(format!(
                "pyramid levels {:?} do not match the model",
                pyramid.keys()
            )));
        }
        let mut g = Graph::new();
        g.freeze(&self.g);
        let pv = pyramid.to_vars(&mut g);
        let (layers, noise) = self.style_vars(&mut g, styles)?;
        let out = self
            .nets
            .synthesis
            .forward(&mut g, &self.g, &pv, &layers, &noise)?;
        Ok(Image::unbatch_signed(g.value(out)))
    }

    pub fn resolve(&self, latent: &LatentInput) -> Result<StyleCode> {
        Ok(match latent {
            LatentInput::Z(z) => StyleCode::new(self.map_latent(z)?),
            LatentInput::Style(s) => s.clone(),
        })
    }

    /// `G(input, w)` for one image.
    pub fn generate(&self, input: &Image, latent: &LatentInput) -> Result<Image> {
        let style = self.resolve(latent)?;
        let p = self.encode_image(input)?;
        Ok(self.synthesize(&p, &[&style])?.remove(0))
    }

    /// One image under many codes, batched in chunks.
    pub fn generate_many(&self, input: &Image, styles: &[StyleCode]) -> Result<Vec<Image>> {
        let p = self.encode_image(input)?;
        let mut out = Vec::with_capacity(styles.len());
        for chunk in styles.chunks(16) {
            let refs: Vec<&StyleCode> = chunk.iter().collect();
            out.extend(self.synthesize(&p.repeat(0, chunk.len()), &refs)?);
        }
        Ok(out)
    }

    /// Many images under one shared code, batched in chunks.
    pub fn generate_shared(&self, inputs: &[&Image], style: &StyleCode) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let p = self.encode(chunk)?;
            let refs = vec![style; chunk.len()];
            out.extend(self.synthesize(&p, &refs)?);
        }
        Ok(out)
    }

    /// Discriminator logit for `(input, candidate)`.
    pub fn discriminate(&self, input: &Image, candidate: &Image) -> Result<f32> {
        self.check_image(input)?;
        self.check_image(candidate)?;
        let mut g = Graph::new();
        g.freeze(&self.d);
        let a = g.constant(input.to_signed());
        let b = g.constant(candidate.to_signed());
        let s = self.nets.discriminator.forward(&mut g, &self.d, a, b);
        Ok(g.value(s).data()[0])
    }

    /// SHA-256 over generator parameter names and values.
    pub fn generator_hash(&self) -> String {
        hash_store(&self.g)
    }

    /// SHA-256 over config and every parameter of both networks.
    pub fn checkpoint_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        h.update(hash_store(&self.g));
        h.update(hash_store(&self.d));
        hex::encode(h.finalize())
    }
}

pub fn hash_store(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for p in store.iter() {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: GeneratorConfig,
    meta: TrainingMeta,
    w_std: f32,
    adam_steps: Option<(Vec<u64>, Vec<u64>)>,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl GeneratorBundle {
    fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for p in self.g.iter() {
            out.push((format!("g/{}", p.name), p.value.clone()));
        }
        for p in self.d.iter() {
            out.push((format!("d/{}", p.name), p.value.clone()));
        }
        out.push((
            "w_avg".into(),
            Tensor::new(vec![self.w_avg.len()], self.w_avg.clone()),
        ));
        if let Some((ag, ad)) = &self.optim {
            for (tag, st) in [("g", ag), ("d", ad)] {
                for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                    out.push((
                        format!("adam_{tag}/m/{i}"),
                        Tensor::new(vec![m.len()], m.clone()),
                    ));
                    out.push((
                        format!("adam_{tag}/v/{i}"),
                        Tensor::new(vec![v.len()], v.clone()),
                    ));
                }
            }
        }
        out
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = self.named_tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            w_std: self.w_std,
            adam_steps: self
                .optim
                .as_ref()
                .map(|(a, b)| (a.steps.clone(), b.steps.clone())),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(12 + header.len() + offset * 4);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for (_, t) in &tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ckpt_err(path, "not a checkpoint file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(ckpt_err(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| ckpt_err(path, e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(ckpt_err(
                path,
                format!("unsupported version {}", header.version),
            ));
        }
        let floats = &bytes[body..];
        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > floats.len() {
                return Err(ckpt_err(path, format!("tensor {} out of bounds", e.name)));
            }
            let data = floats[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(Tensor::new(e.shape.clone(), data))
        };
        let mut bundle = GeneratorBundle::new_uninit(header.config.clone())?;
        let mut adam: [AdamState; 2] = Default::default();
        let mut w_avg = None;
        for e in &header.tensors {
            let t = read(e)?;
            if let Some(name) = e.name.strip_prefix("g/") {
                set_param(&mut bundle.g, name, t, path)?;
            } else if let Some(name) = e.name.strip_prefix("d/") {
                set_param(&mut bundle.d, name, t, path)?;
            } else if e.name == "w_avg" {
                w_avg = Some(t.into_data());
            } else if let Some(rest) = e.name.strip_prefix("adam_") {
                let (which, rest) = rest
                    .split_once('/')
                    .ok_or_else(|| ckpt_err(path, "bad optimizer entry"))?;
                let st = &mut adam[if which == "g" { 0 } else { 1 }];
                if rest.starts_with("m/") {
                    st.m.push(t.into_data());
                } else {
                    st.v.push(t.into_data());
                }
            } else {
                return Err(ckpt_err(path, format!("unexpected tensor {}", e.name)));
            }
        }
        bundle.w_avg = w_avg.ok_or_else(|| ckpt_err(path, "missing w_avg"))?;
        bundle.w_std = header.w_std;
        bundle.meta = header.meta;
        bundle.optim = header.adam_steps.map(|(sg, sd)| {
            let [mut ag, mut ad] = adam;
            ag.steps = sg;
            ad.steps = sd;
            (ag, ad)
        });
        Ok(bundle)
    }

    /// Networks with initialized parameters but no latent statistics.
    fn new_uninit(config: GeneratorConfig) -> Result<Self> {
        let mut g = ParamStore::new();
        let mut d = ParamStore::new();
        let nets = Networks::build(&config, &mut g, &mut d)?;
        Ok(GeneratorBundle {
            config,
            nets,
            g,
            d,
            meta: TrainingMeta::default(),
            w_avg: Vec::new(),
            w_std: 0.0,
            optim: None,
        })
    }
}

fn set_param(store: &mut ParamStore<f32>, name: &str, t: Tensor<f32>, path: &Path) -> Result<()> {
    let id = store
        .find(name)
        .ok_or_else(|| ckpt_err(path, format!("unknown parameter {name}")))?;
    if store.get(id).shape() != t.shape() {
        return Err(ckpt_err(
            path,
            format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            ),
        ));
    }
    *store.get_mut(id) = t;
    Ok(())
}
