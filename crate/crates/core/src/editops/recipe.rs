//! Recipes: ordered primitive lists with tags and captions, sampled from
//! style families.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{apply_primitive, PrimitiveOp};
use crate::error::{Error, Result};
use crate::image::Image;

/// Default style tag vocabulary.
pub const TAG_VOCAB: [&str; 19] = [
    "dark", "blue", "red", "white", "vivid", "vintage", "warm", "brown", "clear", "clarity",
    "green", "natural", "yellow", "orange", "retro", "cool", "black", "vignette", "vibrant",
];

pub fn is_tag(s: &str) -> bool {
    TAG_VOCAB.contains(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecipe {
    pub ops: Vec<PrimitiveOp>,
    pub tags: BTreeSet<String>,
    pub caption: String,
    pub family_id: Option<u32>,
}

impl EditRecipe {
    pub fn identity() -> Self {
        Self::from_ops(Vec::new(), None)
    }

    /// Build a recipe and derive its tags and caption from the ops.
    pub fn from_ops(ops: Vec<PrimitiveOp>, family_id: Option<u32>) -> Self {
        let tags = derive_tags(&ops);
        let caption = derive_caption(&ops);
        EditRecipe {
            ops,
            tags,
            caption,
            family_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            op.validate()?;
        }
        if let Some(t) = self.tags.iter().find(|t| !is_tag(t)) {
            return Err(Error::Unknown {
                kind: "tag",
                name: t.clone(),
            });
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.ops.iter().all(|o| o.is_identity())
    }

    /// Flattened parameter values in a fixed layout (one slot per op kind
    /// parameter, identity values for absent kinds). Used as the
    /// recipe-parameter clustering baseline.
    pub fn param_vector(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for kind in super::ops::OpKind::ALL {
            let mut op = kind.identity();
            // later occurrences of the same kind win
            for o in &self.ops {
                if o.kind() == kind {
                    op = *o;
                }
            }
            for p in op.params() {
                out.push((p.value - p.min) / (p.max - p.min));
            }
        }
        out
    }
}

pub fn apply_recipe(image: &Image, recipe: &EditRecipe) -> Result<Image> {
    let mut out = image.clone();
    for op in &recipe.ops {
        out = apply_primitive(&out, op)?;
    }
    Ok(out)
}

fn hue_color(h: f32) -> &'static str {
    let h = h.rem_euclid(360.0);
    match h {
        h if !(15.0..345.0).contains(&h) => "red",
        h if h < 45.0 => "orange",
        h if h < 70.0 => "yellow",
        h if h < 165.0 => "green",
        h if h < 260.0 => "blue",
        _ => "red",
    }
}

pub fn derive_tags(ops: &[PrimitiveOp]) -> BTreeSet<String> {
    let mut tags = BTreeSet::new();
    let mut add = |t: &str| {
        tags.insert(t.to_string());
    };
    for op in ops {
        match *op {
            PrimitiveOp::Brightness { delta } => {
                if delta < -0.15 {
                    add("dark");
                } else if delta > 0.15 {
                    add("clear");
                }
            }
            PrimitiveOp::Contrast { factor } => {
                if factor > 1.25 {
                    add("clarity");
                } else if factor < 0.8 {
                    add("retro");
                }
            }
            PrimitiveOp::Saturation { factor } => {
                if factor < 0.25 {
                    add("black");
                    add("white");
                } else if factor < 0.8 {
                    add("natural");
                } else if factor > 1.5 {
                    add("vivid");
                } else if factor > 1.2 {
                    add("vibrant");
                }
            }
            PrimitiveOp::HueRotate { degrees } => {
                if degrees.abs() > 20.0 {
                    add("retro");
                }
            }
            PrimitiveOp::WhiteBalance { temperature, tint } => {
                if temperature > 0.3 {
                    add("warm");
                }
                if temperature > 0.7 {
                    add("orange");
                }
                if temperature < -0.3 {
                    add("cool");
                }
                if temperature < -0.7 {
                    add("blue");
                }
                if tint > 0.3 {
                    add("green");
                }
            }
            PrimitiveOp::ChannelGamma { red, green, blue } => {
                let boosted = [red < 0.8, green < 0.8, blue < 0.8];
                match boosted {
                    [true, true, false] => add("yellow"),
                    [true, false, false] => add("red"),
                    [false, true, false] => add("green"),
                    [false, false, true] => add("blue"),
                    _ => {}
                }
                if red < 0.9 && green < 1.0 && blue > 1.2 {
                    add("brown");
                }
            }
            PrimitiveOp::SplitTone {
                shadow_hue,
                highlight_hue,
                strength,
            } => {
                if strength > 0.08 {
                    add("vintage");
                    add(hue_color(highlight_hue));
                    if hue_color(shadow_hue) == "blue" {
                        add("cool");
                    }
                }
            }
            PrimitiveOp::Vignette { strength } => {
                if strength > 0.25 {
                    add("vignette");
                }
            }
        }
    }
    tags
}

fn phrases(op: &PrimitiveOp) -> Vec<String> {
    let mut v = Vec::new();
    match *op {
        PrimitiveOp::Brightness { delta } => {
            if delta > 0.02 {
                v.push("make it brighter".into());
            } else if delta < -0.02 {
                v.push("make it darker".into());
            }
        }
        PrimitiveOp::Contrast { factor } => {
            if factor > 1.05 {
                v.push("increase the contrast".into());
            } else if factor < 0.95 {
                v.push("reduce the contrast".into());
            }
        }
        PrimitiveOp::Saturation { factor } => {
            if factor < 0.25 {
                v.push("make it black and white".into());
            } else if factor < 0.95 {
                v.push("desaturate the colors".into());
            } else if factor > 1.05 {
                v.push("make the colors more vivid".into());
            }
        }
        PrimitiveOp::HueRotate { degrees } => {
            if degrees.abs() > 5.0 {
                v.push("shift the hue".into());
            }
        }
        PrimitiveOp::WhiteBalance { temperature, tint } => {
            if temperature > 0.1 {
                v.push("add a warm tone".into());
            } else if temperature < -0.1 {
                v.push("add a cool blue tone".into());
            }
            if tint > 0.1 {
                v.push("add a green tint".into());
            } else if tint < -0.1 {
                v.push("add a magenta tint".into());
            }
        }
        PrimitiveOp::ChannelGamma { red, green, blue } => {
            let g = [red, green, blue];
            let (i, &min) = g
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("three channels");
            if min < 0.95 {
                v.push(format!("boost the {} channel", ["red", "green", "blue"][i]));
            } else if g.iter().any(|&x| x > 1.05) {
                v.push("adjust the color curves".into());
            }
        }
        PrimitiveOp::SplitTone {
            shadow_hue,
            highlight_hue,
            strength,
        } => {
            if strength > 0.02 {
                v.push(format!(
                    "add {} highlights and {} shadows",
                    hue_color(highlight_hue),
                    hue_color(shadow_hue)
                ));
            }
        }
        PrimitiveOp::Vignette { strength } => {
            if strength > 0.05 {
                v.push("add a vignette".into());
            }
        }
    }
    v
}

/// Rule-based caption; identical ops always give identical text.
pub fn derive_caption(ops: &[PrimitiveOp]) -> String {
    let parts: Vec<String> = ops.iter().flat_map(phrases).collect();
    if parts.is_empty() {
        "keep the image unchanged".into()
    } else {
        parts.join(" and ")
    }
}

/// Style families used by `sample_recipe`. Each samples 1-4 primitives from
/// narrow parameter bands so that members share a recognizable look.
pub const FAMILY_NAMES: [&str; 8] = [
    "airy", "moody", "warm", "cool", "vivid", "mono", "vintage", "verdant",
];

pub fn n_families() -> u32 {
    FAMILY_NAMES.len() as u32
}

fn u(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    rng.random_range(lo..=hi)
}

fn sample_family(rng: &mut ChaCha8Rng, family: u32) -> Vec<PrimitiveOp> {
    use PrimitiveOp::*;
    let mut ops = Vec::new();
    match family {
        0 => {
            ops.push(Brightness {
                delta: u(rng, 0.16, 0.3),
            });
            ops.push(Contrast {
                factor: u(rng, 0.75, 0.95),
            });
            if rng.random_bool(0.5) {
                ops.push(Saturation {
                    factor: u(rng, 0.85, 1.1),
                });
            }
        }
        1 => {
            ops.push(Brightness {
                delta: u(rng, -0.3, -0.16),
            });
            ops.push(Contrast {
                factor: u(rng, 1.26, 1.6),
            });
            if rng.random_bool(0.6) {
                ops.push(Vignette {
                    strength: u(rng, 0.3, 0.55),
                });
            }
        }
        2 => {
            ops.push(WhiteBalance {
                temperature: u(rng, 0.45, 0.95),
                tint: u(rng, -0.15, 0.15),
            });
            if rng.random_bool(0.5) {
                ops.push(Saturation {
                    factor: u(rng, 1.0, 1.2),
                });
            }
            if rng.random_bool(0.4) {
                ops.push(Brightness {
                    delta: u(rng, 0.0, 0.1),
                });
            }
        }
        3 => {
            ops.push(WhiteBalance {
                temperature: u(rng, -0.95, -0.45),
                tint: u(rng, -0.15, 0.15),
            });
            if rng.random_bool(0.5) {
                ops.push(Contrast {
                    factor: u(rng, 1.0, 1.2),
                });
            }
            if rng.random_bool(0.4) {
                ops.push(Brightness {
                    delta: u(rng, -0.1, 0.0),
                });
            }
        }
        4 => {
            ops.push(Saturation {
                factor: u(rng, 1.5, 1.95),
            });
            ops.push(Contrast {
                factor: u(rng, 1.1, 1.4),
            });
            if rng.random_bool(0.4) {
                ops.push(Brightness {
                    delta: u(rng, 0.0, 0.08),
                });
            }
        }
        5 => {
            ops.push(Saturation {
                factor: u(rng, 0.0, 0.15),
            });
            ops.push(Contrast {
                factor: u(rng, 1.1, 1.5),
            });
            if rng.random_bool(0.3) {
                ops.push(Vignette {
                    strength: u(rng, 0.1, 0.4),
                });
            }
        }
        6 => {
            ops.push(Saturation {
                factor: u(rng, 0.45, 0.75),
            });
            ops.push(SplitTone {
                shadow_hue: u(rng, 180.0, 220.0),
                highlight_hue: u(rng, 25.0, 45.0),
                strength: u(rng, 0.12, 0.28),
            });
            ops.push(Contrast {
                factor: u(rng, 0.7, 0.85),
            });
            if rng.random_bool(0.4) {
                ops.push(Vignette {
                    strength: u(rng, 0.2, 0.45),
                });
            }
        }
        _ => {
            ops.push(ChannelGamma {
                red: u(rng, 1.0, 1.25),
                green: u(rng, 0.55, 0.75),
                blue: u(rng, 1.0, 1.25),
            });
            if rng.random_bool(0.5) {
                ops.push(WhiteBalance {
                    temperature: 0.0,
                    tint: u(rng, 0.3, 0.6),
                });
            }
        }
    }
    ops
}

/// Deterministic recipe for a seed; `family_id = None` picks a family from
/// the seed.
pub fn sample_recipe(seed: u64, family_id: Option<u32>) -> Result<EditRecipe> {
    if let Some(f) = family_id {
        if f >= n_families() {
            return Err(Error::Unknown {
                kind: "family",
                name: f.to_string(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = family_id.unwrap_or_else(|| rng.random_range(0..n_families()));
    let ops = sample_family(&mut rng, family);
    Ok(EditRecipe::from_ops(ops, Some(family)))
}
