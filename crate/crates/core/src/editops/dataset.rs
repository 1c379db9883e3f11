//! Paired before/after datasets and their JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::procedural::procedural_image;
use super::recipe::{apply_recipe, n_families, sample_recipe, EditRecipe};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub before: Image,
    pub after: Image,
    pub recipe: Option<EditRecipe>,
    pub split: Split,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        before: Image,
        after: Image,
        recipe: Option<EditRecipe>,
        split: Split,
    ) -> Result<Self> {
        if !before.same_shape(&after) {
            return Err(Error::shape(format!(
                "before {}x{} vs after {}x{}",
                before.width(),
                before.height(),
                after.width(),
                after.height()
            )));
        }
        Ok(ImagePair {
            id: id.into(),
            before: before.clamp01(),
            after: after.clamp01(),
            recipe,
            split,
        })
    }

    pub fn tags(&self) -> Vec<String> {
        self.recipe
            .as_ref()
            .map(|r| r.tags.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn caption(&self) -> Option<&str> {
        self.recipe.as_ref().map(|r| r.caption.as_str())
    }
}

pub enum BaseSource {
    Procedural,
    Images(Vec<Image>),
    Directory(PathBuf),
}

/// 64-bit mix of a seed and an index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn load_directory(dir: &Path, resolution: usize) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Image::load_png(p).map(|im| im.resized(resolution, resolution)))
        .collect()
}

/// Assign splits 80/10/10 by sorting ids on their SHA-256 digest.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let mut order: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (Sha256::digest(id.as_bytes()).to_vec(), i))
        .collect();
    order.sort();
    let n = ids.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, (_, i)) in order.into_iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn synthesize_dataset(
    source: BaseSource,
    n_pairs: usize,
    seed: u64,
    resolution: usize,
) -> Result<Vec<ImagePair>> {
    if n_pairs < 10 {
        return Err(Error::invalid(format!(
            "n_pairs must be at least 10, got {n_pairs}"
        )));
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    let bases = match source {
        BaseSource::Procedural => None,
        BaseSource::Images(v) => Some(
            v.into_iter()
                .map(|im| im.resized(resolution, resolution))
                .collect::<Vec<_>>(),
        ),
        BaseSource::Directory(dir) => Some(load_directory(&dir, resolution)?),
    };
    if bases.as_ref().is_some_and(|b| b.is_empty()) {
        return Err(Error::invalid("base image source is empty"));
    }
    let ids: Vec<String> = (0..n_pairs).map(|i| format!("pair-{i:05}")).collect();
    let splits = assign_splits(&ids);
    let mut pairs = Vec::with_capacity(n_pairs);
    for (i, (id, split)) in ids.into_iter().zip(splits).enumerate() {
        let before = match &bases {
            None => procedural_image(mix_seed(seed, 2 * i as u64), resolution, resolution),
            Some(b) => b[i % b.len()].clone(),
        }
        .quantized();
        let recipe = sample_recipe(mix_seed(seed, 2 * i as u64 + 1), None)?;
        let after = apply_recipe(&before, &recipe)?;
        pairs.push(ImagePair::new(id, before, after, Some(recipe), split)?);
    }
    Ok(pairs)
}

/// `per_family` pairs from every recipe family, ids `fam{f}-{j:03}`, all in
/// the test split. Used for retrieval and clustering evaluation.
pub fn synthesize_family_pairs(
    per_family: usize,
    seed: u64,
    resolution: usize,
) -> Result<Vec<ImagePair>> {
    if per_family == 0 || resolution == 0 {
        return Err(Error::invalid("per_family and resolution must be positive"));
    }
    let mut pairs = Vec::new();
    for f in 0..n_families() {
        for j in 0..per_family {
            let k = (f as u64) * per_family as u64 + j as u64;
            let before =
                procedural_image(mix_seed(seed, 2 * k), resolution, resolution).quantized();
            let recipe = sample_recipe(mix_seed(seed, 2 * k + 1), Some(f))?;
            let after = apply_recipe(&before, &recipe)?;
            pairs.push(ImagePair::new(
                format!("fam{f}-{j:03}"),
                before,
                after,
                Some(recipe),
                Split::Test,
            )?);
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub before_path: String,
    pub after_path: String,
    pub recipe: Option<EditRecipe>,
    pub tags: Vec<String>,
    pub caption: Option<String>,
    pub split: Split,
}

pub fn manifest_lines(pairs: &[ImagePair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let entry = ManifestEntry {
            id: p.id.clone(),
            before_path: format!("images/{}_before.png", p.id),
            after_path: format!("images/{}_after.png", p.id),
            recipe: p.recipe.clone(),
            tags: p.tags(),
            caption: p.caption().map(str::to_string),
            split: p.split,
        };
        out.push_str(&serde_json::to_string(&entry)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write PNGs and the manifest under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, pairs: &[ImagePair]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for p in pairs {
        p.before
            .save_png(images.join(format!("{}_before.png", p.id)))?;
        p.after
            .save_png(images.join(format!("{}_after.png", p.id)))?;
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest_lines(pairs)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let before = Image::load_png(dir.join(&e.before_path))?;
            let after = Image::load_png(dir.join(&e.after_path))?;
            ImagePair::new(e.id, before, after, e.recipe, e.split)
        })
        .collect()
}

/// SHA-256 over the manifest text, used to tag trained bundles.
pub fn dataset_hash(pairs: &[ImagePair]) -> Result<String> {
    Ok(hex::encode(Sha256::digest(
        manifest_lines(pairs)?.as_bytes(),
    )))
}

pub fn split_of(pairs: &[ImagePair], split: Split) -> Vec<&ImagePair> {
    pairs.iter().filter(|p| p.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..100).map(|i| format!("x{i}")).collect();
        let s = assign_splits(&ids);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (80, 10, 10)
        );
    }

    #[test]
    fn rejects_small_and_empty() {
        assert!(synthesize_dataset(BaseSource::Procedural, 9, 0, 8).is_err());
        assert!(synthesize_dataset(BaseSource::Images(vec![]), 10, 0, 8).is_err());
    }
}
