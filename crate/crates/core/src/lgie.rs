//! Language-guided editing: a toy joint image-text embedder, a supervised
//! mapper from (image, request) to a code, and zero-shot code optimization
//! against embedding similarities.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spaceedit_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

use crate::editops::ImagePair;
use crate::error::{Error, Result};
use crate::generator::{lrelu, EqLinear, GeneratorBundle, PyramidVars};
use crate::image::{Image, Mask, LUMA};

/// Image-text embedding used to score edits. The image side sees an edited
/// image together with its source so that it can describe the change.
pub trait Embedder {
    fn dim(&self) -> usize;

    /// Unit-norm `[B, dim]` embeddings of `edited` given `source`, both
    /// signed `[B, 3, H, W]` tensors. Must stay differentiable in `edited`.
    fn image_vars(&self, g: &mut Graph<f32>, edited: Var, source: Var) -> Var;

    /// Unit-norm `[B, dim]` text embeddings.
    fn embed_text(&self, texts: &[&str]) -> Result<Tensor<f32>>;

    fn embed_images(&self, edited: &[&Image], source: &[&Image]) -> Result<Tensor<f32>> {
        if edited.len() != source.len() || edited.is_empty() {
            return Err(Error::shape(format!(
                "{} edited vs {} source images",
                edited.len(),
                source.len()
            )));
        }
        for (a, b) in edited.iter().zip(source) {
            if !a.same_shape(b) {
                return Err(Error::shape("edited and source images differ in size"));
            }
        }
        let mut g = Graph::new();
        let a = g.constant(Image::batch_signed(edited));
        let b = g.constant(Image::batch_signed(source));
        let e = self.image_vars(&mut g, a, b);
        Ok(g.value(e).clone())
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Number of per-image statistics in [`image_stats_vars`].
pub const N_STATS: usize = 10;

/// Differentiable global statistics of signed images: channel means and
/// deviations, luma mean and deviation, mean chroma distance from luma and a
/// center-versus-border luma contrast. Output `[B, N_STATS]`.
pub fn image_stats_vars(g: &mut Graph<f32>, x: Var) -> Var {
    let (b, c, h, w) = {
        let s = g.shape(x);
        (s[0], s[1], s[2], s[3])
    };
    assert_eq!(c, 3, "image statistics expect RGB input");
    let x = g.scale(x, 0.5);
    let x = g.shift(x, 0.5);
    let mean = g.mean_keepdim(x, &[2, 3]);
    let d = g.sub(x, mean);
    let d2 = g.square(d);
    let var = g.mean_keepdim(d2, &[2, 3]);
    let var = g.shift(var, 1e-6);
    let sd = g.sqrt(var);
    let lw = g.constant(Tensor::new(vec![1, 3, 1, 1], LUMA.to_vec()));
    let luma = g.conv2d(x, lw, 0);
    let lm = g.mean_keepdim(luma, &[2, 3]);
    let ld = g.sub(luma, lm);
    let ld2 = g.square(ld);
    let lv = g.mean_keepdim(ld2, &[2, 3]);
    let lv = g.shift(lv, 1e-6);
    let ls = g.sqrt(lv);
    let chroma = g.sub(x, luma);
    let chroma = g.abs(chroma);
    let sat = g.mean_keepdim(chroma, &[1, 2, 3]);
    let radial = g.constant(radial_weights(w, h));
    let rl = g.mul(luma, radial);
    let rl = g.mean_keepdim(rl, &[2, 3]);
    let all = g.concat(&[mean, sd, lm, ls, sat, rl], 1);
    g.reshape(all, vec![b, N_STATS])
}

/// Zero-mean squared radius over the image plane, `[1, 1, H, W]`.
fn radial_weights(w: usize, h: usize) -> Tensor<f32> {
    let r2 = |x: usize, y: usize| {
        let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        u * u + v * v
    };
    let mean = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| r2(x, y))
        .sum::<f64>()
        / (w * h) as f64;
    Tensor::from_fn(vec![1, 1, h, w], |i| (r2(i % w, i / w) - mean) as f32)
}

fn unit_rows(g: &mut Graph<f32>, x: Var) -> Var {
    let sq = g.square(x);
    let n = g.sum_keepdim(sq, &[1]);
    let n = g.shift(n, 1e-12);
    let inv = g.rsqrt(n);
    g.mul(x, inv)
}

/// Plain dense layer: an equalized layer whose multiplier cancels its gain.
fn dense(
    store: &mut ParamStore<f32>,
    name: &str,
    i: usize,
    o: usize,
    rng: &mut ChaCha8Rng,
) -> EqLinear {
    EqLinear::new(store, name, i, o, Some(0.0), (i as f64).sqrt(), rng)
}

fn mlp(g: &mut Graph<f32>, store: &ParamStore<f32>, layers: &[EqLinear], x: Var) -> Var {
    let mut h = x;
    for (k, l) in layers.iter().enumerate() {
        h = l.forward(g, store, h);
        if k + 1 < layers.len() {
            h = lrelu(g, h);
        }
    }
    h
}

fn build_mlp(
    store: &mut ParamStore<f32>,
    prefix: &str,
    dims: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<EqLinear> {
    dims.windows(2)
        .enumerate()
        .map(|(k, d)| dense(store, &format!("{prefix}.fc{k}"), d[0], d[1], rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            hidden: 128,
            temperature: 0.1,
            steps: 400,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Toy image-text embedder: an MLP over standardized edit statistics and an
/// MLP over bag-of-words counts, both ending on the unit sphere.
#[derive(Clone, Debug)]
pub struct JointEmbedder {
    pub config: EmbedderConfig,
    pub vocab: Vec<String>,
    feat_mean: Vec<f32>,
    feat_std: Vec<f32>,
    store: ParamStore<f32>,
    image_tower: Vec<EqLinear>,
    text_tower: Vec<EqLinear>,
}

const N_EDIT_FEATURES: usize = 2 * N_STATS;

impl JointEmbedder {
    fn init(
        config: EmbedderConfig,
        vocab: Vec<String>,
        feat_mean: Vec<f32>,
        feat_std: Vec<f32>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let image_tower = build_mlp(
            &mut store,
            "image",
            &[N_EDIT_FEATURES, config.hidden, config.hidden, config.dim],
            &mut rng,
        );
        let text_tower = build_mlp(
            &mut store,
            "text",
            &[vocab.len(), config.hidden, config.dim],
            &mut rng,
        );
        JointEmbedder {
            config,
            vocab,
            feat_mean,
            feat_std,
            store,
            image_tower,
            text_tower,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Raw, unstandardized edit features `[B, 2 * N_STATS]`.
    fn edit_features(g: &mut Graph<f32>, edited: Var, source: Var) -> Var {
        let a = image_stats_vars(g, edited);
        let s = image_stats_vars(g, source);
        let d = g.sub(a, s);
        g.concat(&[d, s], 1)
    }

    fn image_head(&self, g: &mut Graph<f32>, feats: Var) -> Var {
        let m = g.constant(Tensor::new(
            vec![1, N_EDIT_FEATURES],
            self.feat_mean.clone(),
        ));
        let s = g.constant(Tensor::new(vec![1, N_EDIT_FEATURES], self.feat_std.clone()));
        let x = g.sub(feats, m);
        let x = g.div(x, s);
        let y = mlp(g, &self.store, &self.image_tower, x);
        unit_rows(g, y)
    }

    fn text_head(&self, g: &mut Graph<f32>, bow: Var) -> Var {
        let y = mlp(g, &self.store, &self.text_tower, bow);
        unit_rows(g, y)
    }

    /// Normalized token counts `[B, V]`; unknown tokens are ignored.
    pub fn bag_of_words(&self, texts: &[&str]) -> Result<Tensor<f32>> {
        let v = self.vocab.len();
        let mut data = vec![0.0f32; texts.len() * v];
        for (i, t) in texts.iter().enumerate() {
            let toks = tokenize(t);
            if toks.is_empty() {
                return Err(Error::invalid("empty text"));
            }
            let row = &mut data[i * v..(i + 1) * v];
            let mut n = 0.0;
            for tok in toks {
                if let Ok(k) = self.vocab.binary_search(&tok) {
                    row[k] += 1.0;
                    n += 1.0;
                }
            }
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(Tensor::new(vec![texts.len(), v], data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
            "feat_mean": self.feat_mean,
            "feat_std": self.feat_std,
            "params": store_to_json(&self.store),
        });
        write_json(path, &doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = read_json(path)?;
        let config: EmbedderConfig = serde_json::from_value(doc["config"].clone())?;
        let vocab: Vec<String> = serde_json::from_value(doc["vocab"].clone())?;
        let mean: Vec<f32> = serde_json::from_value(doc["feat_mean"].clone())?;
        let std: Vec<f32> = serde_json::from_value(doc["feat_std"].clone())?;
        let mut e = JointEmbedder::init(config, vocab, mean, std);
        store_from_json(&mut e.store, &doc["params"], path)?;
        Ok(e)
    }
}

impl Embedder for JointEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn image_vars(&self, g: &mut Graph<f32>, edited: Var, source: Var) -> Var {
        g.freeze(&self.store);
        let f = Self::edit_features(g, edited, source);
        self.image_head(g, f)
    }

    fn embed_text(&self, texts: &[&str]) -> Result<Tensor<f32>> {
        if texts.is_empty() {
            return Err(Error::invalid("no texts to embed"));
        }
        let bow = self.bag_of_words(texts)?;
        let mut g = Graph::new();
        g.freeze(&self.store);
        let b = g.constant(bow);
        let e = self.text_head(&mut g, b);
        Ok(g.value(e).clone())
    }
}

fn captions_of<'a>(pairs: &[&'a ImagePair]) -> Result<Vec<&'a str>> {
    pairs
        .iter()
        .map(|p| match p.caption() {
            Some(c) if !tokenize(c).is_empty() => Ok(c),
            _ => Err(Error::invalid(format!(
                "pair {} has an empty caption",
                p.id
            ))),
        })
        .collect()
}

fn raw_edit_features(pairs: &[&ImagePair]) -> Tensor<f32> {
    let mut rows = Vec::new();
    for chunk in pairs.chunks(64) {
        let a: Vec<&Image> = chunk.iter().map(|p| &p.after).collect();
        let s: Vec<&Image> = chunk.iter().map(|p| &p.before).collect();
        let mut g = Graph::new();
        let av = g.constant(Image::batch_signed(&a));
        let sv = g.constant(Image::batch_signed(&s));
        let f = JointEmbedder::edit_features(&mut g, av, sv);
        rows.push(g.value(f).clone());
    }
    let data: Vec<f32> = rows.iter().flat_map(|t| t.data().to_vec()).collect();
    Tensor::new(vec![pairs.len(), N_EDIT_FEATURES], data)
}

fn select_rows(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let w = t.numel() / t.dim(0);
    let data = idx
        .iter()
        .flat_map(|&i| t.data()[i * w..(i + 1) * w].iter().copied())
        .collect();
    Tensor::new(vec![idx.len(), w], data)
}

pub const MIN_EMBEDDER_PAIRS: usize = 500;

/// Symmetric contrastive training on (before/after pair, caption). Pairs
/// that share a caption count as positives for each other.
pub fn train_embedder(
    pairs: &[&ImagePair],
    cfg: &EmbedderConfig,
) -> Result<(JointEmbedder, Vec<f64>)> {
    if pairs.len() < MIN_EMBEDDER_PAIRS {
        return Err(Error::invalid(format!(
            "need at least {MIN_EMBEDDER_PAIRS} captioned pairs, got {}",
            pairs.len()
        )));
    }
    if cfg.batch_size < 2 || cfg.dim == 0 || !(cfg.temperature > 0.0) {
        return Err(Error::invalid(
            "embedder needs batch_size >= 2, dim > 0 and a positive temperature",
        ));
    }
    let captions = captions_of(pairs)?;
    let vocab: Vec<String> = captions
        .iter()
        .flat_map(|c| tokenize(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let feats = raw_edit_features(pairs);
    let n = pairs.len();
    let mut mean = vec![0.0f64; N_EDIT_FEATURES];
    let mut sq = vec![0.0f64; N_EDIT_FEATURES];
    for row in feats.data().chunks(N_EDIT_FEATURES) {
        for (k, &v) in row.iter().enumerate() {
            mean[k] += v as f64 / n as f64;
            sq[k] += (v as f64).powi(2) / n as f64;
        }
    }
    let std: Vec<f32> = mean
        .iter()
        .zip(&sq)
        .map(|(m, s)| (s - m * m).max(0.0).sqrt().max(1e-4) as f32)
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let mut emb = JointEmbedder::init(cfg.clone(), vocab, mean, std);
    let bow = emb.bag_of_words(&captions)?;

    let mut rng = ChaCha8Rng::seed_from_u64(crate::editops::mix_seed(cfg.seed, 1));
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let bs = cfg.batch_size.min(n);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let labels = Tensor::from_fn(vec![bs, bs], |k| {
            let (i, j) = (k / bs, k % bs);
            let same = captions[idx[i]] == captions[idx[j]];
            let count = idx
                .iter()
                .filter(|&&m| captions[m] == captions[idx[i]])
                .count();
            if same {
                1.0 / count as f32
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let f = g.constant(select_rows(&feats, idx));
        let t = g.constant(select_rows(&bow, idx));
        let ei = emb.image_head(&mut g, f);
        let et = emb.text_head(&mut g, t);
        let logits = g.matmul_t(ei, false, et, true);
        let logits = g.scale(logits, (1.0 / cfg.temperature) as f32);
        let y = g.constant(labels);
        let rows = g.log_softmax(logits);
        let lt = g.permute(logits, &[1, 0]);
        let cols = g.log_softmax(lt);
        let a = g.mul(rows, y);
        let b = g.mul(cols, y);
        let s = g.add(a, b);
        let s = g.sum_all(s);
        let loss = g.scale(s, -0.5 / bs as f32);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite("embedder loss".into()));
        }
        trace.push(lv);
        let grads = g.backward(loss);
        let gs = emb.store.collect_grads(&g, &grads);
        adam.step(&mut emb.store, &gs);
    }
    Ok((emb, trace))
}

/// Fraction of held-out pairs whose own caption ranks first among the
/// distinct captions present in `pairs`.
pub fn caption_retrieval_accuracy(emb: &dyn Embedder, pairs: &[&ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to score"));
    }
    let captions = captions_of(pairs)?;
    let distinct: Vec<&str> = captions
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let te = emb.embed_text(&distinct)?;
    let after: Vec<&Image> = pairs.iter().map(|p| &p.after).collect();
    let before: Vec<&Image> = pairs.iter().map(|p| &p.before).collect();
    let ie = emb.embed_images(&after, &before)?;
    let d = emb.dim();
    let mut hits = 0;
    for (i, cap) in captions.iter().enumerate() {
        let row = &ie.data()[i * d..(i + 1) * d];
        let best = (0..distinct.len())
            .map(|j| {
                (
                    j,
                    row.iter()
                        .zip(&te.data()[j * d..(j + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum::<f32>(),
                )
            })
            .fold(
                (0, f32::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            )
            .0;
        if distinct[best] == *cap {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// `false` drops the image branch (text-only variant).
    pub use_visual: bool,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            learning_rate: 1e-4,
            steps: 500,
            batch_size: 16,
            use_visual: true,
            seed: 0,
        }
    }
}

/// Fusion MLP predicting a code from input-image statistics and the text
/// embedding of the request.
#[derive(Clone, Debug)]
pub struct MapperHead {
    pub config: MapperConfig,
    w_avg: Vec<f32>,
    w_scale: f32,
    stat_mean: Vec<f32>,
    stat_std: Vec<f32>,
    store: ParamStore<f32>,
    layers: Vec<EqLinear>,
}

impl MapperHead {
    fn init(
        config: MapperConfig,
        text_dim: usize,
        w_avg: Vec<f32>,
        w_scale: f32,
        stat_mean: Vec<f32>,
        stat_std: Vec<f32>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let out = w_avg.len();
        let layers = build_mlp(
            &mut store,
            "mapper",
            &[N_STATS + text_dim, config.hidden, config.hidden, out],
            &mut rng,
        );
        // start every prediction at the mean code
        let last = layers.last().expect("mapper layers").weight;
        store
            .get_mut(last)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        MapperHead {
            config,
            w_avg,
            w_scale,
            stat_mean,
            stat_std,
            store,
            layers,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn forward(&self, g: &mut Graph<f32>, images: Var, text: Var) -> Var {
        let b = g.shape(images)[0];
        let stats = if self.config.use_visual {
            let s = image_stats_vars(g, images);
            let m = g.constant(Tensor::new(vec![1, N_STATS], self.stat_mean.clone()));
            let sd = g.constant(Tensor::new(vec![1, N_STATS], self.stat_std.clone()));
            let s = g.sub(s, m);
            let s = g.div(s, sd);
            // comparable magnitude to the unit-norm text embedding
            g.scale(s, 1.0 / (N_STATS as f32).sqrt())
        } else {
            g.constant(Tensor::zeros(vec![b, N_STATS]))
        };
        let x = g.concat(&[stats, text], 1);
        let y = mlp(g, &self.store, &self.layers, x);
        let y = g.scale(y, self.w_scale);
        let avg = g.constant(Tensor::new(vec![1, self.w_avg.len()], self.w_avg.clone()));
        g.add(y, avg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "config": self.config,
            "w_avg": self.w_avg,
            "w_scale": self.w_scale,
            "stat_mean": self.stat_mean,
            "stat_std": self.stat_std,
            "params": store_to_json(&self.store),
        });
        write_json(path, &doc)
    }

    pub fn load(path: &Path, text_dim: usize) -> Result<Self> {
        let doc = read_json(path)?;
        let mut m = MapperHead::init(
            serde_json::from_value(doc["config"].clone())?,
            text_dim,
            serde_json::from_value(doc["w_avg"].clone())?,
            serde_json::from_value(doc["w_scale"].clone())?,
            serde_json::from_value(doc["stat_mean"].clone())?,
            serde_json::from_value(doc["stat_std"].clone())?,
        );
        store_from_json(&mut m.store, &doc["params"], path)?;
        Ok(m)
    }
}

/// Code for editing `image` according to `request`.
pub fn predict_code(
    mapper: &MapperHead,
    embedder: &dyn Embedder,
    image: &Image,
    request: &str,
) -> Result<Vec<f32>> {
    Ok(predict_codes(mapper, embedder, &[image], &[request])?
        .pop()
        .expect("one code"))
}

pub fn predict_codes(
    mapper: &MapperHead,
    embedder: &dyn Embedder,
    images: &[&Image],
    requests: &[&str],
) -> Result<Vec<Vec<f32>>> {
    if images.len() != requests.len() || images.is_empty() {
        return Err(Error::shape(format!(
            "{} images vs {} requests",
            images.len(),
            requests.len()
        )));
    }
    if requests.iter().any(|r| r.trim().is_empty()) {
        return Err(Error::invalid("empty request text"));
    }
    let text = embedder.embed_text(requests)?;
    let mut g = Graph::new();
    g.freeze(&mapper.store);
    let x = g.constant(Image::batch_signed(images));
    let t = g.constant(text);
    let w = mapper.forward(&mut g, x, t);
    let dim = mapper.w_avg.len();
    Ok(g.value(w).data().chunks(dim).map(|c| c.to_vec()).collect())
}

fn check_resolution(bundle: &GeneratorBundle, pairs: &[&ImagePair]) -> Result<()> {
    let r = bundle.resolution();
    for p in pairs {
        if p.before.width() != r || p.before.height() != r || !p.before.same_shape(&p.after) {
            return Err(Error::shape(format!(
                "pair {} is {}x{}, generator expects {r}x{r}",
                p.id,
                p.before.width(),
                p.before.height()
            )));
        }
    }
    Ok(())
}

fn l1_mapped(g: &mut Graph<f32>, out: Var, target: Var) -> Var {
    let d = g.sub(out, target);
    let d = g.abs(d);
    let m = g.mean_all(d);
    // signed images span 2 units
    g.scale(m, 0.5)
}

fn decode(bundle: &GeneratorBundle, g: &mut Graph<f32>, pv: &PyramidVars, w: Var) -> Result<Var> {
    let styles = vec![w; bundle.n_style_layers()];
    bundle
        .nets
        .synthesis
        .forward(g, &bundle.g, pv, &styles, &[])
}

/// Trains the mapper through the frozen generator on the L1 between the
/// generated and target images. Returns the head and its loss trace.
pub fn train_mapper(
    bundle: &GeneratorBundle,
    embedder: &dyn Embedder,
    pairs: &[&ImagePair],
    cfg: &MapperConfig,
) -> Result<(MapperHead, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if !bundle.is_trained() {
        return Err(Error::invalid("mapper training needs a trained generator"));
    }
    check_resolution(bundle, pairs)?;
    let captions = captions_of(pairs)?;
    let text = embedder.embed_text(&captions)?;

    let mut stats_rows = Vec::new();
    for chunk in pairs.chunks(64) {
        let ims: Vec<&Image> = chunk.iter().map(|p| &p.before).collect();
        let mut g = Graph::new();
        let x = g.constant(Image::batch_signed(&ims));
        let s = image_stats_vars(&mut g, x);
        stats_rows.extend(g.value(s).data().chunks(N_STATS).map(|r| r.to_vec()));
    }
    let n = pairs.len() as f64;
    let mean: Vec<f32> = (0..N_STATS)
        .map(|k| (stats_rows.iter().map(|r| r[k] as f64).sum::<f64>() / n) as f32)
        .collect();
    let std: Vec<f32> = (0..N_STATS)
        .map(|k| {
            let v = stats_rows
                .iter()
                .map(|r| (r[k] - mean[k]) as f64)
                .map(|d| d * d)
                .sum::<f64>()
                / n;
            v.sqrt().max(1e-4) as f32
        })
        .collect();
    let mut head = MapperHead::init(
        cfg.clone(),
        embedder.dim(),
        bundle.w_avg.clone(),
        bundle.w_std,
        mean,
        std,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(crate::editops::mix_seed(cfg.seed, 1));
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let bs = cfg.batch_size.clamp(1, pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + bs > pairs.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let ins: Vec<&Image> = idx.iter().map(|&i| &pairs[i].before).collect();
        let tgs: Vec<&Image> = idx.iter().map(|&i| &pairs[i].after).collect();
        let mut g = Graph::new();
        let pv = bundle.encode_vars(&mut g, &ins)?;
        let t = g.constant(select_rows(&text, idx));
        let w = head.forward(&mut g, pv.image, t);
        let out = decode(bundle, &mut g, &pv, w)?;
        let tg = g.constant(Image::batch_signed(&tgs));
        let loss = l1_mapped(&mut g, out, tg);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("mapper loss at step {step}")));
        }
        trace.push(lv);
        let grads = g.backward(loss);
        let gs = head.store.collect_grads(&g, &grads);
        adam.step(&mut head.store, &gs);
    }
    Ok((head, trace))
}

/// Mean L1 (in [0, 1] units) of mapper outputs and of the unedited inputs
/// against the targets.
pub fn mapper_l1(
    bundle: &GeneratorBundle,
    mapper: &MapperHead,
    embedder: &dyn Embedder,
    pairs: &[&ImagePair],
) -> Result<(f64, f64)> {
    check_resolution(bundle, pairs)?;
    let captions = captions_of(pairs)?;
    let mut out_sum = 0.0;
    let mut in_sum = 0.0;
    for (chunk, caps) in pairs.chunks(16).zip(captions.chunks(16)) {
        let ins: Vec<&Image> = chunk.iter().map(|p| &p.before).collect();
        let codes = predict_codes(mapper, embedder, &ins, caps)?;
        let pyramid = bundle.encode(&ins)?;
        let styles: Vec<crate::generator::StyleCode> = codes
            .into_iter()
            .map(crate::generator::StyleCode::new)
            .collect();
        let refs: Vec<&crate::generator::StyleCode> = styles.iter().collect();
        let outs = bundle.synthesize(&pyramid, &refs)?;
        for (o, p) in outs.iter().zip(chunk) {
            out_sum += crate::metrics::l1_error(o, &p.after)?;
            in_sum += crate::metrics::l1_error(&p.before, &p.after)?;
        }
    }
    let n = pairs.len() as f64;
    Ok((out_sum / n, in_sum / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ZeroShotInit {
    MeanW,
    /// Usually the identity code of the input image.
    Code(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotConfig {
    pub steps: usize,
    /// Step size in units of the code standard deviation.
    pub learning_rate: f64,
    pub init: ZeroShotInit,
    /// Weights tried for the source-similarity term; more than one runs a sweep.
    pub lambdas: Vec<f64>,
    /// Weight used to compare sweep candidates with each other.
    pub selection_lambda: f64,
}

pub const LAMBDA_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            learning_rate: 0.002,
            init: ZeroShotInit::MeanW,
            lambdas: vec![0.3],
            selection_lambda: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotCandidate {
    pub lambda: f64,
    pub w: Vec<f32>,
    #[serde(skip)]
    pub image: Option<Image>,
    /// Objective at the returned code and at the initial code.
    pub objective: f64,
    pub initial_objective: f64,
    pub text_similarity: f64,
    pub source_similarity: f64,
    /// Objective re-weighted with the selection weight.
    pub selection_score: f64,
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ZeroShotResult {
    pub image: Image,
    pub best: usize,
    pub candidates: Vec<ZeroShotCandidate>,
}

impl ZeroShotResult {
    pub fn chosen(&self) -> &ZeroShotCandidate {
        &self.candidates[self.best]
    }
}

/// Keeps `edited` where the mask is set and copies `source` elsewhere.
pub fn composite(edited: &Image, source: &Image, mask: &Mask) -> Result<Image> {
    if !edited.same_shape(source)
        || mask.width() != source.width()
        || mask.height() != source.height()
    {
        return Err(Error::shape("mask, edited and source must share a size"));
    }
    let plane = source.width() * source.height();
    let mut out = source.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        if mask.data()[k % plane] {
            *v = edited.data()[k];
        }
    }
    Ok(out)
}

/// Optimizes a code so that the edited image matches the request in the
/// embedding space while staying similar to the source. With a mask only
/// the foreground is edited and the background is the source, bit for bit.
pub fn zero_shot_edit(
    bundle: &GeneratorBundle,
    embedder: &dyn Embedder,
    image: &Image,
    request: &str,
    mask: Option<&Mask>,
    cfg: &ZeroShotConfig,
) -> Result<ZeroShotResult> {
    if request.trim().is_empty() {
        return Err(Error::invalid("empty request text"));
    }
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::invalid(
            "lambdas must be a nonempty list of nonnegative values",
        ));
    }
    if let Some(m) = mask {
        if m.width() != image.width() || m.height() != image.height() {
            return Err(Error::shape(format!(
                "mask is {}x{}, image is {}x{}",
                m.width(),
                m.height(),
                image.width(),
                image.height()
            )));
        }
    }
    let dim = bundle.config.w_dim;
    let init = match &cfg.init {
        ZeroShotInit::MeanW => bundle.w_avg.clone(),
        ZeroShotInit::Code(w) if w.len() == dim => w.clone(),
        ZeroShotInit::Code(w) => {
            return Err(Error::shape(format!(
                "initial code has {} entries, expected {dim}",
                w.len()
            )))
        }
    };
    let pyramid = bundle.encode(&[image])?;
    let text = embedder.embed_text(&[request])?;
    let source_emb = embedder.embed_images(&[image], &[image])?;
    let src_t = image.to_signed::<f32>();
    let (h, w_px) = (image.height(), image.width());
    let mask_t = mask.map(|m| {
        Tensor::new(
            vec![1, 1, h, w_px],
            m.data()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    });
    let lr = cfg.learning_rate * bundle.w_std.max(1e-3) as f64;

    let mut candidates = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let mut w = Tensor::new(vec![1, dim], init.clone());
        let mut adam = Adam::<f32>::new(AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        let mut trace = Vec::with_capacity(cfg.steps + 1);
        let mut best: Option<(f64, Vec<f32>, f64, f64)> = None;
        for step in 0..=cfg.steps {
            let mut g = Graph::new();
            g.freeze(&bundle.g);
            let pv = pyramid.to_vars(&mut g);
            let wv = g.variable(w.clone());
            let out = decode(bundle, &mut g, &pv, wv)?;
            let src = g.constant(src_t.clone());
            let out = match &mask_t {
                Some(m) => {
                    let m = g.constant(m.clone());
                    let d = g.sub(out, src);
                    let d = g.mul(d, m);
                    g.add(src, d)
                }
                None => out,
            };
            let e = embedder.image_vars(&mut g, out, src);
            let t = g.constant(text.clone());
            let s = g.constant(source_emb.clone());
            let ct = g.mul(e, t);
            let ct = g.sum_all(ct);
            let cs = g.mul(e, s);
            let cs = g.sum_all(cs);
            let weighted = g.scale(cs, lambda as f32);
            let sum = g.add(ct, weighted);
            let obj = g.neg(sum);
            let ov = g.value(obj).item() as f64;
            if !ov.is_finite() {
                return Err(Error::NonFinite(format!(
                    "zero-shot objective at step {step}"
                )));
            }
            trace.push(ov);
            let (ctv, csv) = (g.value(ct).item() as f64, g.value(cs).item() as f64);
            if best.as_ref().is_none_or(|b| ov < b.0) {
                best = Some((ov, w.data().to_vec(), ctv, csv));
            }
            if step == cfg.steps {
                break;
            }
            let grads = g.backward(obj);
            let gw = grads
                .get(wv)
                .ok_or_else(|| Error::NonFinite("no gradient reached the code".into()))?;
            adam.update_slot(0, w.data_mut(), gw.data(), lr);
        }
        let (objective, wb, ct, cs) = best.expect("at least one evaluation");
        let rendered = bundle
            .synthesize(&pyramid, &[&crate::generator::StyleCode::new(wb.clone())])?
            .remove(0);
        let rendered = match mask {
            Some(m) => composite(&rendered, image, m)?,
            None => rendered,
        };
        candidates.push(ZeroShotCandidate {
            lambda,
            w: wb,
            image: Some(rendered),
            objective,
            initial_objective: trace[0],
            text_similarity: ct,
            source_similarity: cs,
            selection_score: -ct - cfg.selection_lambda * cs,
            trace,
        });
    }
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.selection_score
                .total_cmp(&b.1.selection_score)
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .expect("nonempty sweep");
    let image = candidates[best].image.clone().expect("rendered");
    Ok(ZeroShotResult {
        image,
        best,
        candidates,
    })
}

fn store_to_json(store: &ParamStore<f32>) -> serde_json::Value {
    let map: BTreeMap<String, serde_json::Value> = store
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                serde_json::json!({ "shape": p.value.shape(), "data": p.value.data() }),
            )
        })
        .collect();
    serde_json::to_value(map).expect("serializable")
}

fn store_from_json(store: &mut ParamStore<f32>, v: &serde_json::Value, path: &Path) -> Result<()> {
    #[derive(Deserialize)]
    struct Entry {
        shape: Vec<usize>,
        data: Vec<f32>,
    }
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let map: BTreeMap<String, Entry> = serde_json::from_value(v.clone())?;
    if map.len() != store.len() {
        return Err(bad(format!(
            "{} tensors, expected {}",
            map.len(),
            store.len()
        )));
    }
    for p in store.iter_mut() {
        let e = map
            .get(&p.name)
            .ok_or_else(|| bad(format!("missing tensor {}", p.name)))?;
        if e.shape != p.value.shape() || e.data.len() != p.value.numel() {
            return Err(bad(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name,
                e.shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(e.shape.clone(), e.data.clone());
    }
    Ok(())
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec(doc)?).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
