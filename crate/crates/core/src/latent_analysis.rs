//! Closed-form semantic directions, traversal and per-layer sensitivity.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorBundle, StyleCode};
use crate::image::Image;
use crate::metrics::FeatureExtractor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticBasis {
    /// `k` unit rows of length `w_dim`.
    pub directions: Vec<Vec<f64>>,
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
    pub layer_range: Range<usize>,
}

/// Top-`k` eigenpairs of `AᵀA` for a dense `A` (rows are affine outputs).
pub fn sefa_from_matrix(a: &DMatrix<f64>, k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = a.ncols();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("k must be in 1..={d}, got {k}")));
    }
    let ata = a.transpose() * a;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let mut dirs = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let v = eig.eigenvectors.column(i);
        let n = v.norm();
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        dirs.push(v.iter().map(|x| s * x / n).collect());
        vals.push(eig.eigenvalues[i].max(0.0));
    }
    Ok((dirs, vals))
}

/// Effective style-affine weights of the given layers, stacked row-wise
/// and restricted to the `w` columns.
pub fn stacked_affine(
    bundle: &GeneratorBundle,
    layer_range: &Range<usize>,
) -> Result<DMatrix<f64>> {
    let n = bundle.n_style_layers();
    if layer_range.is_empty() || layer_range.end > n {
        return Err(Error::invalid(format!(
            "layer range {layer_range:?} not within 0..{n}"
        )));
    }
    let w_dim = bundle.config.w_dim;
    let mut rows: Vec<f64> = Vec::new();
    let mut n_rows = 0;
    for l in layer_range.clone() {
        let aff = &bundle.nets.synthesis.layers[l].conv.affine;
        let w = aff.effective_weight(&bundle.g);
        let (out, inp) = w.dims2();
        for r in 0..out {
            rows.extend(w.data()[r * inp..r * inp + w_dim].iter().map(|&v| v as f64));
        }
        n_rows += out;
    }
    Ok(DMatrix::from_row_slice(n_rows, w_dim, &rows))
}

pub fn sefa_directions(
    bundle: &GeneratorBundle,
    layer_range: Range<usize>,
    k: usize,
) -> Result<SemanticBasis> {
    let a = stacked_affine(bundle, &layer_range)?;
    let (directions, eigenvalues) = sefa_from_matrix(&a, k)?;
    Ok(SemanticBasis {
        directions,
        eigenvalues,
        layer_range,
    })
}

/// `G(image, w0 + alpha * direction)`.
pub fn traverse_direction(
    bundle: &GeneratorBundle,
    image: &Image,
    w0: &[f32],
    direction: &[f64],
    alpha: f64,
) -> Result<Image> {
    Ok(traverse_many(bundle, image, w0, direction, &[alpha])?.remove(0))
}

fn check_direction(direction: &[f64], dim: usize) -> Result<()> {
    if direction.len() != dim {
        return Err(Error::shape(format!(
            "direction has {} entries, expected {dim}",
            direction.len()
        )));
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::invalid(format!(
            "direction must be unit length, norm is {norm}"
        )));
    }
    Ok(())
}

pub fn traverse_many(
    bundle: &GeneratorBundle,
    image: &Image,
    w0: &[f32],
    direction: &[f64],
    alphas: &[f64],
) -> Result<Vec<Image>> {
    check_direction(direction, w0.len())?;
    let codes: Vec<StyleCode> = alphas
        .iter()
        .map(|&a| {
            StyleCode::new(if a == 0.0 {
                w0.to_vec()
            } else {
                w0.iter()
                    .zip(direction)
                    .map(|(&w, &d)| (w as f64 + a * d) as f32)
                    .collect()
            })
        })
        .collect();
    bundle.generate_many(image, &codes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalStrip {
    pub alphas: Vec<f64>,
    pub direction_index: Option<usize>,
}

/// Write a horizontal strip of traversal frames plus a JSON sidecar
/// listing the alpha of each frame.
pub fn export_traversal(
    bundle: &GeneratorBundle,
    image: &Image,
    w0: &[f32],
    direction: &[f64],
    alphas: &[f64],
    direction_index: Option<usize>,
    png_path: &Path,
) -> Result<TraversalStrip> {
    let frames = traverse_many(bundle, image, w0, direction, alphas)?;
    Image::hstack(&frames).save_png(png_path)?;
    let strip = TraversalStrip {
        alphas: alphas.to_vec(),
        direction_index,
    };
    let side = png_path.with_extension("json");
    std::fs::write(&side, serde_json::to_vec_pretty(&strip)?).map_err(|e| Error::io(&side, e))?;
    Ok(strip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub resolution: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub perturb_scale: f64,
    pub layers: Vec<LayerScore>,
    /// Mean score of the highest-resolution third of the layers.
    pub top_third_mean: f64,
    pub bottom_third_mean: f64,
}

/// Perceptual change when only one style layer's code is moved by a fixed
/// random unit vector times `perturb_scale`, averaged over probes.
pub fn layer_sensitivity(
    bundle: &GeneratorBundle,
    probes: &[&Image],
    codes: &[Vec<f32>],
    perturb_scale: f64,
    seed: u64,
) -> Result<SensitivityReport> {
    if probes.len() < 4 {
        return Err(Error::invalid(
            "layer sensitivity needs at least 4 probe images",
        ));
    }
    if codes.len() != probes.len() {
        return Err(Error::shape(format!(
            "{} codes for {} probes",
            codes.len(),
            probes.len()
        )));
    }
    let dim = bundle.config.w_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);

    let pyramid = bundle.encode(probes)?;
    let base_codes: Vec<StyleCode> = codes.iter().map(|w| StyleCode::new(w.clone())).collect();
    let base = bundle.synthesize(&pyramid, &base_codes.iter().collect::<Vec<_>>())?;
    let n = bundle.n_style_layers();
    let schedule = bundle.config.style_layers();
    let extractor = FeatureExtractor::shared();
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let score = if perturb_scale == 0.0 {
            0.0
        } else {
            let perturbed: Vec<StyleCode> = codes
                .iter()
                .map(|w| {
                    let mut per = vec![w.clone(); n];
                    per[l] = w
                        .iter()
                        .zip(&u)
                        .map(|(&a, &d)| (a as f64 + perturb_scale * d) as f32)
                        .collect();
                    StyleCode {
                        w: w.clone(),
                        per_layer: Some(per),
                        noise: None,
                    }
                })
                .collect();
            let outs = bundle.synthesize(&pyramid, &perturbed.iter().collect::<Vec<_>>())?;
            let mut d = extractor.perceptual_distances(
                &base.iter().collect::<Vec<_>>(),
                &outs.iter().collect::<Vec<_>>(),
            )?;
            // order-independent summation
            d.sort_by(f64::total_cmp);
            d.iter().sum::<f64>() / d.len() as f64
        };
        layers.push(LayerScore {
            layer: l,
            resolution: schedule[l].resolution,
            score,
        });
    }
    let third = (n / 3).max(1);
    let mean = |s: &[LayerScore]| s.iter().map(|l| l.score).sum::<f64>() / s.len() as f64;
    Ok(SensitivityReport {
        perturb_scale,
        top_third_mean: mean(&layers[n - third..]),
        bottom_third_mean: mean(&layers[..third]),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_eigenstructure() {
        let mut a = DMatrix::zeros(3, 5);
        a[(0, 0)] = 3.0;
        a[(1, 1)] = 2.0;
        a[(2, 2)] = 1.0;
        let (dirs, vals) = sefa_from_matrix(&a, 3).unwrap();
        assert!(
            (vals[0] - 9.0).abs() < 1e-12
                && (vals[1] - 4.0).abs() < 1e-12
                && (vals[2] - 1.0).abs() < 1e-12
        );
        assert!((dirs[0][0] - 1.0).abs() < 1e-12);
        assert!(sefa_from_matrix(&a, 6).is_err());
    }
}
