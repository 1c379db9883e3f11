//! Global tone and color primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{luma, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Brightness,
    Contrast,
    Saturation,
    HueRotate,
    WhiteBalance,
    ChannelGamma,
    SplitTone,
    Vignette,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::Saturation,
        OpKind::HueRotate,
        OpKind::WhiteBalance,
        OpKind::ChannelGamma,
        OpKind::SplitTone,
        OpKind::Vignette,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Brightness => "brightness",
            OpKind::Contrast => "contrast",
            OpKind::Saturation => "saturation",
            OpKind::HueRotate => "hue_rotate",
            OpKind::WhiteBalance => "white_balance",
            OpKind::ChannelGamma => "channel_gamma",
            OpKind::SplitTone => "split_tone",
            OpKind::Vignette => "vignette",
        }
    }

    /// The parameter setting that leaves every image unchanged.
    pub fn identity(self) -> PrimitiveOp {
        match self {
            OpKind::Brightness => PrimitiveOp::Brightness { delta: 0.0 },
            OpKind::Contrast => PrimitiveOp::Contrast { factor: 1.0 },
            OpKind::Saturation => PrimitiveOp::Saturation { factor: 1.0 },
            OpKind::HueRotate => PrimitiveOp::HueRotate { degrees: 0.0 },
            OpKind::WhiteBalance => PrimitiveOp::WhiteBalance {
                temperature: 0.0,
                tint: 0.0,
            },
            OpKind::ChannelGamma => PrimitiveOp::ChannelGamma {
                red: 1.0,
                green: 1.0,
                blue: 1.0,
            },
            OpKind::SplitTone => PrimitiveOp::SplitTone {
                shadow_hue: 0.0,
                highlight_hue: 0.0,
                strength: 0.0,
            },
            OpKind::Vignette => PrimitiveOp::Vignette { strength: 0.0 },
        }
    }
}

/// Declared closed range of a named parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub value: f32,
    pub min: f32,
    pub max: f32,
}

/// One global editing operation with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveOp {
    /// Additive offset on every channel.
    Brightness {
        delta: f32,
    },
    /// Scale around the image mean.
    Contrast {
        factor: f32,
    },
    /// Scale chroma around per-pixel luma.
    Saturation {
        factor: f32,
    },
    /// Rotation about the gray axis.
    HueRotate {
        degrees: f32,
    },
    /// Red/blue (temperature) and green/magenta (tint) gains.
    WhiteBalance {
        temperature: f32,
        tint: f32,
    },
    ChannelGamma {
        red: f32,
        green: f32,
        blue: f32,
    },
    /// Additive tint on shadows and highlights split at luma 0.5.
    SplitTone {
        shadow_hue: f32,
        highlight_hue: f32,
        strength: f32,
    },
    /// Radial darkening toward the corners.
    Vignette {
        strength: f32,
    },
}

const fn spec(name: &'static str, value: f32, min: f32, max: f32) -> ParamSpec {
    ParamSpec {
        name,
        value,
        min,
        max,
    }
}

pub const BRIGHTNESS_RANGE: (f32, f32) = (-0.5, 0.5);
pub const CONTRAST_RANGE: (f32, f32) = (0.5, 2.0);
pub const SATURATION_RANGE: (f32, f32) = (0.0, 2.0);
pub const HUE_RANGE: (f32, f32) = (-90.0, 90.0);
pub const WB_RANGE: (f32, f32) = (-1.0, 1.0);
pub const GAMMA_RANGE: (f32, f32) = (0.4, 2.5);
pub const TONE_HUE_RANGE: (f32, f32) = (0.0, 360.0);
pub const TONE_STRENGTH_RANGE: (f32, f32) = (0.0, 0.3);
pub const VIGNETTE_RANGE: (f32, f32) = (0.0, 0.6);

impl PrimitiveOp {
    pub fn kind(&self) -> OpKind {
        match self {
            PrimitiveOp::Brightness { .. } => OpKind::Brightness,
            PrimitiveOp::Contrast { .. } => OpKind::Contrast,
            PrimitiveOp::Saturation { .. } => OpKind::Saturation,
            PrimitiveOp::HueRotate { .. } => OpKind::HueRotate,
            PrimitiveOp::WhiteBalance { .. } => OpKind::WhiteBalance,
            PrimitiveOp::ChannelGamma { .. } => OpKind::ChannelGamma,
            PrimitiveOp::SplitTone { .. } => OpKind::SplitTone,
            PrimitiveOp::Vignette { .. } => OpKind::Vignette,
        }
    }

    /// Named parameters with their declared ranges.
    pub fn params(&self) -> Vec<ParamSpec> {
        let r = |n, v, (lo, hi): (f32, f32)| spec(n, v, lo, hi);
        match *self {
            PrimitiveOp::Brightness { delta } => vec![r("delta", delta, BRIGHTNESS_RANGE)],
            PrimitiveOp::Contrast { factor } => vec![r("factor", factor, CONTRAST_RANGE)],
            PrimitiveOp::Saturation { factor } => vec![r("factor", factor, SATURATION_RANGE)],
            PrimitiveOp::HueRotate { degrees } => vec![r("degrees", degrees, HUE_RANGE)],
            PrimitiveOp::WhiteBalance { temperature, tint } => {
                vec![
                    r("temperature", temperature, WB_RANGE),
                    r("tint", tint, WB_RANGE),
                ]
            }
            PrimitiveOp::ChannelGamma { red, green, blue } => vec![
                r("red", red, GAMMA_RANGE),
                r("green", green, GAMMA_RANGE),
                r("blue", blue, GAMMA_RANGE),
            ],
            PrimitiveOp::SplitTone {
                shadow_hue,
                highlight_hue,
                strength,
            } => vec![
                r("shadow_hue", shadow_hue, TONE_HUE_RANGE),
                r("highlight_hue", highlight_hue, TONE_HUE_RANGE),
                r("strength", strength, TONE_STRENGTH_RANGE),
            ],
            PrimitiveOp::Vignette { strength } => vec![r("strength", strength, VIGNETTE_RANGE)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.params() {
            if !(p.value >= p.min && p.value <= p.max) {
                return Err(Error::ParamRange {
                    field: format!("{}.{}", self.kind().name(), p.name),
                    value: p.value as f64,
                    min: p.min as f64,
                    max: p.max as f64,
                });
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == self.kind().identity()
    }
}

/// Fully saturated RGB for a hue in degrees, shifted to zero mean so that
/// adding it tints without changing average intensity.
pub fn hue_tint(hue_deg: f32) -> [f32; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let rgb = match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    let m = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    rgb.map(|v| v - m)
}

/// Rotation about the (1,1,1) axis by `degrees` (Rodrigues form).
pub fn hue_matrix(degrees: f32) -> [[f32; 3]; 3] {
    let t = degrees.to_radians();
    let (s, c) = t.sin_cos();
    let k = 1.0 / 3.0;
    let q = 3.0f32.sqrt().recip();
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - s * q;
    let d = (1.0 - c) * k + s * q;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn vignette_falloff(x: usize, y: usize, w: usize, h: usize) -> f32 {
    let u = (x as f32 + 0.5) / w as f32 - 0.5;
    let v = (y as f32 + 0.5) / h as f32 - 0.5;
    2.0 * (u * u + v * v)
}

/// Apply one primitive; the result is clamped to `[0, 1]`.
pub fn apply_primitive(image: &Image, op: &PrimitiveOp) -> Result<Image> {
    op.validate()?;
    // float rounding would otherwise perturb e.g. contrast 1.0
    if op.is_identity() {
        return Ok(image.clone());
    }
    let out = match *op {
        PrimitiveOp::Brightness { delta } => image.map_pixels(|_, _, p| p.map(|v| v + delta)),
        PrimitiveOp::Contrast { factor } => {
            let m = image.mean();
            image.map_pixels(|_, _, p| p.map(|v| m + factor * (v - m)))
        }
        PrimitiveOp::Saturation { factor } => image.map_pixels(|_, _, p| {
            let l = luma(p);
            p.map(|v| l + factor * (v - l))
        }),
        PrimitiveOp::HueRotate { degrees } => {
            let m = hue_matrix(degrees);
            image.map_pixels(|_, _, p| {
                std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
            })
        }
        PrimitiveOp::WhiteBalance { temperature, tint } => {
            let gains = [
                1.0 + 0.25 * temperature,
                1.0 + 0.2 * tint,
                1.0 - 0.25 * temperature,
            ];
            image.map_pixels(|_, _, p| [p[0] * gains[0], p[1] * gains[1], p[2] * gains[2]])
        }
        PrimitiveOp::ChannelGamma { red, green, blue } => {
            let g = [red, green, blue];
            image.map_pixels(|_, _, p| std::array::from_fn(|c| p[c].max(0.0).powf(g[c])))
        }
        PrimitiveOp::SplitTone {
            shadow_hue,
            highlight_hue,
            strength,
        } => {
            let ts = hue_tint(shadow_hue);
            let th = hue_tint(highlight_hue);
            image.map_pixels(|_, _, p| {
                let l = luma(p);
                let ws = ((0.5 - l) / 0.5).max(0.0);
                let wh = ((l - 0.5) / 0.5).max(0.0);
                std::array::from_fn(|c| p[c] + strength * (ws * ts[c] + wh * th[c]))
            })
        }
        PrimitiveOp::Vignette { strength } => {
            let (w, h) = (image.width(), image.height());
            image.map_pixels(|x, y, p| {
                let k = 1.0 - strength * vignette_falloff(x, y, w, h);
                p.map(|v| v * k)
            })
        }
    };
    Ok(out.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identities_are_fixed_points() {
        let im = random_image(1, 9, 7);
        for kind in OpKind::ALL {
            let out = apply_primitive(&im, &kind.identity()).unwrap();
            assert!(out.l1(&im) < 1e-6, "{kind:?} identity moved pixels");
        }
    }

    #[test]
    fn brightness_shifts_constant_image() {
        let im = Image::filled(4, 4, [0.4; 3]);
        let out = apply_primitive(&im, &PrimitiveOp::Brightness { delta: 0.2 }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn contrast_matches_scalar_loop() {
        let im = random_image(2, 8, 8);
        let out = apply_primitive(&im, &PrimitiveOp::Contrast { factor: 1.5 }).unwrap();
        let d = im.data();
        let mut mean = 0.0f64;
        for &v in d {
            mean += v as f64;
        }
        mean /= d.len() as f64;
        for i in 0..d.len() {
            let expected = (mean + 1.5 * (d[i] as f64 - mean)).clamp(0.0, 1.0);
            assert!((out.data()[i] as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_names_field() {
        let im = Image::filled(2, 2, [0.5; 3]);
        let err = apply_primitive(
            &im,
            &PrimitiveOp::ChannelGamma {
                red: 1.0,
                green: 3.0,
                blue: 1.0,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("channel_gamma.green"), "{err}");
        assert!(apply_primitive(&im, &PrimitiveOp::Brightness { delta: f32::NAN }).is_err());
    }

    #[test]
    fn hue_rotation_preserves_gray() {
        let m = hue_matrix(37.0);
        for i in 0..3 {
            let row: f32 = m[i].iter().sum();
            assert!((row - 1.0).abs() < 1e-6);
        }
        let full = hue_matrix(360.0);
        assert!((full[0][0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn vignette_darkens_corners_not_center() {
        let im = Image::filled(9, 9, [0.8; 3]);
        let out = apply_primitive(&im, &PrimitiveOp::Vignette { strength: 0.5 }).unwrap();
        assert!(out.get(0, 0)[0] < out.get(4, 4)[0]);
        assert!((out.get(4, 4)[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn split_tone_leaves_midtones() {
        let im = Image::filled(2, 2, [0.5; 3]);
        let op = PrimitiveOp::SplitTone {
            shadow_hue: 200.0,
            highlight_hue: 40.0,
            strength: 0.3,
        };
        let out = apply_primitive(&im, &op).unwrap();
        assert!(out.l1(&im) < 1e-6);
        let dark = Image::filled(2, 2, [0.1; 3]);
        let out = apply_primitive(&dark, &op).unwrap();
        assert!(
            out.get(0, 0)[2] > out.get(0, 0)[0],
            "shadows tinted toward blue"
        );
    }
}
