//! Database of inverted codes: cosine retrieval, spherical k-means and the
//! multi-label purity score.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editops::{mix_seed, ImagePair};
use crate::error::{Error, Result};
use crate::generator::GeneratorBundle;
use crate::image::Image;
use crate::inversion::{invert_batch, InversionConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub pair_id: String,
    pub w_unit: Vec<f32>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub bundle_hash: String,
    pub inversion_resolution: usize,
    /// Pairs whose inversion failed, with the reason.
    #[serde(default)]
    pub skipped: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodeIndex {
    pub entries: Vec<IndexEntry>,
    pub meta: IndexMeta,
}

fn unit(v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite code"));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

impl CodeIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert a code under a fresh id; the vector is unit-normalized.
    pub fn insert(
        &mut self,
        id: impl Into<String>,
        pair_id: impl Into<String>,
        w: &[f32],
        tags: Vec<String>,
    ) -> Result<()> {
        let id = id.into();
        if self.entries.iter().any(|e| e.id == id) {
            return Err(Error::invalid(format!("duplicate index id {id}")));
        }
        self.entries.push(IndexEntry {
            id,
            pair_id: pair_id.into(),
            w_unit: unit(w)?,
            tags,
        });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Header line with metadata, then one JSON entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string(&serde_json::json!({ "header": self.meta }))?;
        s.push('\n');
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(s.as_bytes()))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{} is empty", path.display())))?;
        let header: serde_json::Value =
            serde_json::from_str(&header.map_err(|e| Error::io(path, e))?)?;
        let meta: IndexMeta = serde_json::from_value(
            header
                .get("header")
                .cloned()
                .ok_or_else(|| Error::invalid("index header missing"))?,
        )?;
        let mut index = CodeIndex {
            entries: Vec::new(),
            meta,
        };
        let mut seen = HashSet::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: IndexEntry = serde_json::from_str(&line)?;
            if !seen.insert(e.id.clone()) {
                return Err(Error::invalid(format!("duplicate index id {}", e.id)));
            }
            // guard against rounding drift in the text form
            e.w_unit = unit(&e.w_unit)?;
            index.entries.push(e);
        }
        Ok(index)
    }
}

/// Invert every pair (optionally at reduced resolution) and store unit
/// codes. Failed pairs are recorded and skipped.
pub fn build_index(
    bundle: &GeneratorBundle,
    pairs: &[&ImagePair],
    cfg: &InversionConfig,
) -> Result<CodeIndex> {
    let mut index = CodeIndex {
        entries: Vec::new(),
        meta: IndexMeta {
            bundle_hash: bundle.checkpoint_hash(),
            inversion_resolution: bundle.resolution(),
            skipped: Vec::new(),
        },
    };
    if pairs.is_empty() {
        return Ok(index);
    }
    let res = bundle.resolution();
    let fit = |im: &Image| {
        if im.width() == res && im.height() == res {
            im.clone()
        } else {
            im.resized(res, res)
        }
    };
    let befores: Vec<Image> = pairs.iter().map(|p| fit(&p.before)).collect();
    let afters: Vec<Image> = pairs.iter().map(|p| fit(&p.after)).collect();
    for (k, chunk) in (0..pairs.len())
        .collect::<Vec<_>>()
        .chunks(cfg.batch_size)
        .enumerate()
    {
        let ins: Vec<&Image> = chunk.iter().map(|&i| &befores[i]).collect();
        let tgs: Vec<&Image> = chunk.iter().map(|&i| &afters[i]).collect();
        let chunk_cfg = InversionConfig {
            seed: crate::editops::mix_seed(cfg.seed, k as u64),
            ..cfg.clone()
        };
        match invert_batch(bundle, &ins, &tgs, &chunk_cfg) {
            Ok(results) => {
                for (&i, r) in chunk.iter().zip(results) {
                    let p = pairs[i];
                    if let Err(e) = index.insert(p.id.clone(), p.id.clone(), &r.style.w, p.tags()) {
                        index.meta.skipped.push((p.id.clone(), e.to_string()));
                    }
                }
            }
            Err(e) => {
                for &i in chunk {
                    index
                        .meta
                        .skipped
                        .push((pairs[i].id.clone(), e.to_string()));
                }
            }
        }
    }
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Top-`k` entries by cosine similarity; ties go to the smaller id.
pub fn knn_query(index: &CodeIndex, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if index.is_empty() {
        return Err(Error::invalid("index is empty"));
    }
    if k > index.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds index size {}",
            index.len()
        )));
    }
    let mut scored: Vec<Neighbor> = index
        .entries
        .iter()
        .map(|e| Neighbor {
            id: e.id.clone(),
            similarity: cosine(query, &e.w_unit),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.id.cmp(&b.id))
    });
    scored.truncate(k);
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster per index entry, in index order.
    pub assignments: Vec<usize>,
    pub ids: Vec<String>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Objective after seeding and after every iteration.
    pub objective_trace: Vec<f64>,
}

fn dot64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum()
}

fn assign(points: &[&[f32]], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (best, sim) = centers
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, dot64(ctr, p)))
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, x| if x.1 > acc.1 { x } else { acc },
                );
            total += 1.0 - sim;
            best
        })
        .collect();
    (a, total)
}

fn objective(points: &[&[f32]], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| 1.0 - dot64(&centers[c], p))
        .sum()
}

/// k-means with cosine distance on the unit sphere.
pub fn spherical_kmeans(
    index: &CodeIndex,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let n = index.len();
    if k > n {
        return Err(Error::invalid(format!("K = {k} exceeds index size {n}")));
    }
    let points: Vec<&[f32]> = index.entries.iter().map(|e| e.w_unit.as_slice()).collect();
    let dim = points[0].len();
    let as64 = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding on cosine distance
    let mut centers = vec![as64(points[rng.random_range(0..n)])];
    let mut chosen = vec![false; n];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (1.0 - dot64(c, p)).max(0.0))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        } else {
            // all points coincide with a center: take any unused one
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.push(as64(points[pick]));
    }

    let (mut assignments, _) = assign(&points, &centers);
    let mut trace = vec![objective(&points, &centers, &assignments)];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v as f64;
            }
        }
        let mut new_centers = centers.clone();
        for c in 0..k {
            let norm = sums[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if counts[c] > 0 && norm > 1e-12 {
                new_centers[c] = sums[c].iter().map(|v| v / norm).collect();
            }
        }
        // reseed empty clusters with the point farthest from its center
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = 1.0 - dot64(&new_centers[assignments[i]], points[i]);
                        let dj = 1.0 - dot64(&new_centers[assignments[j]], points[j]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("nonempty");
                new_centers[c] = as64(points[far]);
                assignments[far] = c;
            }
        }
        let (new_assign, _) = assign(&points, &new_centers);
        // keep the previous label where it is still tied for best
        let new_assign: Vec<usize> = new_assign
            .iter()
            .zip(&assignments)
            .enumerate()
            .map(|(i, (&na, &old))| {
                if dot64(&new_centers[old], points[i]) >= dot64(&new_centers[na], points[i]) {
                    old
                } else {
                    na
                }
            })
            .collect();
        centers = new_centers;
        let obj = objective(&points, &centers, &new_assign);
        trace.push(obj);
        let stable = new_assign == assignments;
        assignments = new_assign;
        if stable {
            break;
        }
    }
    let inertia = objective(&points, &centers, &assignments).max(0.0);
    Ok(Clustering {
        assignments,
        ids: index.entries.iter().map(|e| e.id.clone()).collect(),
        centers,
        inertia,
        objective_trace: trace,
    })
}

/// Restarts used by callers that do not choose their own.
pub const KMEANS_RESTARTS: usize = 10;

/// Best of `restarts` seeded runs of [`spherical_kmeans`], judged by inertia
/// alone; earlier runs win ties.
pub fn spherical_kmeans_restarts(
    index: &CodeIndex,
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<Clustering> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be positive"));
    }
    let mut best: Option<Clustering> = None;
    for r in 0..restarts {
        let c = spherical_kmeans(index, k, mix_seed(seed, r as u64), max_iter)?;
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Multi-label purity: each tag goes to the cluster whose tag pool counts it
/// most (the lowest cluster index on ties); purity is the sum of those counts
/// over the sum of the chosen clusters' sizes.
pub fn customized_purity(
    assignments: &[Option<usize>],
    tag_lists: &[Vec<String>],
    tag_vocab: &[&str],
) -> Result<f64> {
    if assignments.len() != tag_lists.len() {
        return Err(Error::shape(format!(
            "{} assignments for {} samples",
            assignments.len(),
            tag_lists.len()
        )));
    }
    let vocab: BTreeSet<&str> = tag_vocab.iter().copied().collect();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for (i, (a, tags)) in assignments.iter().zip(tag_lists).enumerate() {
        let c = a.ok_or_else(|| Error::invalid(format!("sample {i} is unassigned")))?;
        *sizes.entry(c).or_default() += 1;
        for t in tags {
            let t = vocab.get(t.as_str()).ok_or_else(|| Error::Unknown {
                kind: "tag",
                name: t.clone(),
            })?;
            *counts.entry(t).or_default().entry(c).or_default() += 1;
        }
    }
    let mut num = 0usize;
    let mut den = 0usize;
    for per_cluster in counts.values() {
        let (&c, &n) = per_cluster
            .iter()
            .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
            .expect("tag seen at least once");
        num += n;
        den += sizes[&c];
    }
    if den == 0 {
        return Err(Error::invalid("no tags to score"));
    }
    Ok(num as f64 / den as f64)
}

/// Purity of a clustering of an index, using the entries' tags.
pub fn clustering_purity(
    index: &CodeIndex,
    clustering: &Clustering,
    tag_vocab: &[&str],
) -> Result<f64> {
    let a: Vec<Option<usize>> = clustering.assignments.iter().map(|&c| Some(c)).collect();
    let tags: Vec<Vec<String>> = index.entries.iter().map(|e| e.tags.clone()).collect();
    customized_purity(&a, &tags, tag_vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    /// Most frequent tags, most common first.
    pub tags: Vec<(String, usize)>,
    /// Members closest to the center.
    pub exemplars: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct ClusterReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub purity: f64,
    pub clusters: Vec<ClusterSummary>,
}

pub fn cluster_report(
    index: &CodeIndex,
    clustering: &Clustering,
    tag_vocab: &[&str],
    n_tags: usize,
    n_exemplars: usize,
) -> Result<ClusterReport> {
    let purity = clustering_purity(index, clustering, tag_vocab)?;
    let k = clustering.centers.len();
    let clusters = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..index.len())
                .filter(|&i| clustering.assignments[i] == c)
                .collect();
            let mut tc: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in &members {
                for t in &index.entries[i].tags {
                    *tc.entry(t.as_str()).or_default() += 1;
                }
            }
            let mut tags: Vec<(String, usize)> =
                tc.into_iter().map(|(t, n)| (t.to_string(), n)).collect();
            tags.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            tags.truncate(n_tags);
            let mut ranked: Vec<(f64, &str)> = members
                .iter()
                .map(|&i| {
                    (
                        dot64(&clustering.centers[c], &index.entries[i].w_unit),
                        index.entries[i].pair_id.as_str(),
                    )
                })
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            ClusterSummary {
                cluster: c,
                size: members.len(),
                tags,
                exemplars: ranked
                    .into_iter()
                    .take(n_exemplars)
                    .map(|(_, id)| id.to_string())
                    .collect(),
            }
        })
        .collect();
    Ok(ClusterReport {
        k,
        purity,
        clusters,
    })
}

/// Index of recipe-parameter vectors, the clustering baseline.
pub fn recipe_param_index(pairs: &[&ImagePair]) -> Result<CodeIndex> {
    let mut index = CodeIndex::default();
    for p in pairs {
        let r = p
            .recipe
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("pair {} has no recipe", p.id)))?;
        // center so that cosine geometry is meaningful
        let v: Vec<f32> = r.param_vector().iter().map(|x| x - 0.5).collect();
        index.insert(p.id.clone(), p.id.clone(), &v, p.tags())?;
    }
    Ok(index)
}

/// Uniformly random cluster labels, the purity control.
pub fn random_assignments(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn purity_hand_examples() {
        let vocab = ["a", "b"];
        let p = customized_purity(
            &[Some(0), Some(0), Some(1), Some(1)],
            &[s(&["a"]), s(&["a", "b"]), s(&["b"]), s(&["b"])],
            &vocab,
        )
        .unwrap();
        assert_eq!(p, 1.0);
        let p = customized_purity(
            &[Some(0); 4],
            &[s(&["a", "b"]), s(&["a", "b"]), s(&["b"]), s(&[])],
            &vocab,
        )
        .unwrap();
        assert_eq!(p, 0.625);
        assert!(customized_purity(&[Some(0)], &[s(&["z"])], &vocab).is_err());
        assert!(customized_purity(&[None], &[s(&["a"])], &vocab).is_err());
    }

    #[test]
    fn knn_self_first() {
        let mut idx = CodeIndex::default();
        idx.insert("a", "a", &[1.0, 0.0], vec![]).unwrap();
        idx.insert("b", "b", &[0.0, 1.0], vec![]).unwrap();
        idx.insert("c", "c", &[1.0, 1.0], vec![]).unwrap();
        let r = knn_query(&idx, &[0.0, 2.0], 2).unwrap();
        assert_eq!(r[0].id, "b");
        assert!((r[0].similarity - 1.0).abs() < 1e-12);
        assert!(knn_query(&idx, &[1.0, 0.0], 4).is_err());
    }
}
