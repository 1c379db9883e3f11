//! Procedural base images: smooth gradients, soft shapes and value noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // moderate saturation so that color edits have room in both directions
    let base: f32 = rng.random_range(0.15..0.85);
    let spread: f32 = rng.random_range(0.05..0.3);
    std::array::from_fn(|_| (base + rng.random_range(-spread..spread)).clamp(0.02, 0.98))
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise summed over `octaves`.
struct ValueNoise {
    grids: Vec<(usize, Vec<f32>)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, base_cells: usize, octaves: usize) -> Self {
        let grids = (0..octaves)
            .map(|o| {
                let n = base_cells << o;
                (
                    n,
                    (0..(n + 1) * (n + 1))
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                )
            })
            .collect();
        ValueNoise { grids }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut norm = 0.0;
        for (n, g) in &self.grids {
            let x = u * *n as f32;
            let y = v * *n as f32;
            let (x0, y0) = ((x as usize).min(n - 1), (y as usize).min(n - 1));
            let (fx, fy) = (
                smoothstep(0.0, 1.0, x - x0 as f32),
                smoothstep(0.0, 1.0, y - y0 as f32),
            );
            let idx = |i: usize, j: usize| g[j * (n + 1) + i];
            let top = idx(x0, y0) * (1.0 - fx) + idx(x0 + 1, y0) * fx;
            let bot = idx(x0, y0 + 1) * (1.0 - fx) + idx(x0 + 1, y0 + 1) * fx;
            total += amp * (top * (1.0 - fy) + bot * fy);
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

enum Shape {
    Disc { cx: f32, cy: f32, r: f32 },
    Rect { cx: f32, cy: f32, hw: f32, hh: f32 },
}

impl Shape {
    /// Soft coverage in [0, 1].
    fn coverage(&self, u: f32, v: f32, soft: f32) -> f32 {
        let d = match *self {
            Shape::Disc { cx, cy, r } => ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() - r,
            Shape::Rect { cx, cy, hw, hh } => ((u - cx).abs() - hw).max((v - cy).abs() - hh),
        };
        1.0 - smoothstep(-soft, soft, d)
    }
}

/// One procedural image; distinct seeds give distinct scenes.
pub fn procedural_image(seed: u64, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let n_shapes = rng.random_range(1..=3);
    let shapes: Vec<(Shape, [f32; 3], f32)> = (0..n_shapes)
        .map(|_| {
            let cx = rng.random_range(0.15..0.85);
            let cy = rng.random_range(0.15..0.85);
            let shape = if rng.random_bool(0.5) {
                Shape::Disc {
                    cx,
                    cy,
                    r: rng.random_range(0.1..0.3),
                }
            } else {
                Shape::Rect {
                    cx,
                    cy,
                    hw: rng.random_range(0.08..0.3),
                    hh: rng.random_range(0.08..0.3),
                }
            };
            (shape, random_color(&mut rng), rng.random_range(0.02..0.08))
        })
        .collect();
    let noise = ValueNoise::new(&mut rng, 3, 3);
    let texture: f32 = rng.random_range(0.03..0.15);
    // global exposure so the set includes dark and bright scenes
    let exposure: f32 = rng.random_range(0.55..1.25);
    Image::from_fn(width, height, |x, y| {
        let u = (x as f32 + 0.5) / width as f32;
        let v = (y as f32 + 0.5) / height as f32;
        let t = (0.5 + (u - 0.5) * ga + (v - 0.5) * gb).clamp(0.0, 1.0);
        let mut p: [f32; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t);
        for (shape, col, soft) in &shapes {
            let a = shape.coverage(u, v, *soft);
            for c in 0..3 {
                p[c] = p[c] * (1.0 - a) + col[c] * a;
            }
        }
        let n = 1.0 + texture * noise.at(u, v);
        p.map(|val| (val * n * exposure).clamp(0.0, 1.0))
    })
}
