//! Brute-force reference implementations, written from the definitions
//! and sharing no code with the library.

#![allow(dead_code)]

use nalgebra::DMatrix;

/// Per-sample kernel `weight * style`, optionally demodulated, applied as a
/// zero-padded direct cross-correlation. `x` is `[b, i, h, w]`, `weight`
/// `[o, i, k, k]`, `style` `[b, i]`.
#[allow(clippy::too_many_arguments)]
pub fn modulated_conv(
    x: &[f64],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    co: usize,
    k: usize,
    style: &[f64],
    demodulate: bool,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; b * co * h * w];
    for n in 0..b {
        let mut kern = vec![0.0; co * ci * k * k];
        for o in 0..co {
            for i in 0..ci {
                for t in 0..k * k {
                    kern[(o * ci + i) * k * k + t] =
                        weight[(o * ci + i) * k * k + t] * style[n * ci + i];
                }
            }
            if demodulate {
                let s: f64 = kern[o * ci * k * k..(o + 1) * ci * k * k]
                    .iter()
                    .map(|v| v * v)
                    .sum();
                let d = 1.0 / (s + 1e-8).sqrt();
                kern[o * ci * k * k..(o + 1) * ci * k * k]
                    .iter_mut()
                    .for_each(|v| *v *= d);
            }
        }
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += kern[((o * ci + i) * k + ky) * k + kx]
                                    * x[((n * ci + i) * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Noise penalty of one `h x w` map: at every scale down to 8x8 the map is
/// scaled to unit RMS and the squared mean products with its one-pixel
/// circular shifts along x and y are added.
pub fn noise_regularizer(map: &[f64], h: usize, w: usize) -> f64 {
    let mut cur = map.to_vec();
    let (mut h, mut w) = (h, w);
    let mut total = 0.0;
    loop {
        let n = (h * w) as f64;
        let rms = (cur.iter().map(|v| v * v).sum::<f64>() / n + 1e-12).sqrt();
        let z: Vec<f64> = cur.iter().map(|v| v / rms).collect();
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = z[y * w + x];
                sx += v * z[y * w + (x + 1) % w];
                sy += v * z[((y + 1) % h) * w + x];
            }
        }
        total += (sx / n).powi(2) + (sy / n).powi(2);
        if h <= 8 {
            break;
        }
        let (nh, nw) = (h / 2, w / 2);
        let mut next = vec![0.0; nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                next[y * nw + x] = 0.25
                    * (cur[2 * y * w + 2 * x]
                        + cur[2 * y * w + 2 * x + 1]
                        + cur[(2 * y + 1) * w + 2 * x]
                        + cur[(2 * y + 1) * w + 2 * x + 1]);
            }
        }
        cur = next;
        h = nh;
        w = nw;
    }
    total
}

/// SSIM with a dense 7x7 Gaussian window (sigma 1.5) evaluated directly at
/// every valid position, averaged over positions and channels. Planes are
/// channel-major `[3, h, w]` in `[0, 1]`.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const K: usize = 7;
    let sigma: f64 = 1.5;
    let c = (K as f64 - 1.0) / 2.0;
    let mut win = [[0.0f64; K]; K];
    let mut total_w = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-r2 / (2.0 * sigma * sigma)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for ch in 0..3 {
        let pa = &a[ch * h * w..(ch + 1) * h * w];
        let pb = &b[ch * h * w..(ch + 1) * h * w];
        for y in 0..=h - K {
            for x in 0..=w - K {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in win.iter().enumerate() {
                    for (j, &wt) in row.iter().enumerate() {
                        let wt = wt / total_w;
                        let va = pa[(y + i) * w + x + j];
                        let vb = pb[(y + i) * w + x + j];
                        ma += wt * va;
                        mb += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn mean_cov(set: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mu: Vec<f64> = (0..d)
        .map(|j| set.iter().map(|s| s[j]).sum::<f64>() / n)
        .collect();
    let cov = DMatrix::from_fn(d, d, |r, c| {
        set.iter()
            .map(|s| (s[r] - mu[r]) * (s[c] - mu[c]))
            .sum::<f64>()
            / (n - 1.0)
    });
    (mu, cov)
}

/// Principal square root by the Denman-Beavers iteration.
pub fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let delta = (&ny - &y).norm();
        y = ny;
        z = nz;
        if delta < 1e-13 * y.norm().max(1.0) {
            break;
        }
    }
    y
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 sqrt(S1 S2))` with the non-symmetric
/// product square-rooted directly.
pub fn frechet_distance(set1: &[Vec<f64>], set2: &[Vec<f64>]) -> f64 {
    let (m1, c1) = mean_cov(set1);
    let (m2, c2) = mean_cov(set2);
    let dm: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum();
    let root = sqrtm_denman_beavers(&(&c1 * &c2));
    dm + c1.trace() + c2.trace() - 2.0 * root.trace()
}

/// Multi-label purity by exhaustive counting over every (tag, cluster);
/// the first cluster reaching the maximum count takes the tag.
pub fn customized_purity(assignments: &[usize], tags: &[Vec<String>], vocab: &[&str]) -> f64 {
    let n_clusters = assignments.iter().max().map_or(0, |m| m + 1);
    let mut num = 0usize;
    let mut den = 0usize;
    for t in vocab {
        let counts: Vec<usize> = (0..n_clusters)
            .map(|c| {
                (0..assignments.len())
                    .filter(|&i| assignments[i] == c && tags[i].iter().any(|x| x == t))
                    .count()
            })
            .collect();
        let best = counts.iter().copied().max().unwrap_or(0);
        if best == 0 {
            continue;
        }
        let first = counts.iter().position(|&n| n == best).expect("max exists");
        num += best;
        den += assignments.iter().filter(|&&a| a == first).count();
    }
    num as f64 / den as f64
}

/// Every item scored by cosine in f64, sorted by similarity then id.
pub fn knn(items: &[(String, Vec<f32>)], query: &[f32], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(String, f64)> = items
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v
                .iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (id.clone(), dot / (norm(v) * qn))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations; eigenvalues
/// descending, eigenvectors as rows.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| m[(i, j)].powi(2))
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).expect("finite"));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = order
        .iter()
        .map(|&i| v.column(i).iter().copied().collect())
        .collect();
    (vals, vecs)
}
