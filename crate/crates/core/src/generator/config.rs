use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    #[serde(default = "latent_dim")]
    pub z_dim: usize,
    #[serde(default = "latent_dim")]
    pub w_dim: usize,
    #[serde(default = "default_mapping_depth")]
    pub mapping_depth: usize,
    /// Channel count at full resolution; halving the resolution doubles it.
    pub base_channels: usize,
    #[serde(default = "default_max_channels")]
    pub max_channels: usize,
    /// Start the decoder at resolution / 4, keeping only the top stages.
    #[serde(default)]
    pub shallow: bool,
    /// Concatenate a pooled encoder feature to w before each style affine.
    #[serde(default)]
    pub comod: bool,
    #[serde(default)]
    pub seed: u64,
}

fn latent_dim() -> usize {
    LATENT_DIM
}
fn default_mapping_depth() -> usize {
    8
}
fn default_max_channels() -> usize {
    512
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Modulated 3x3 conv on the lowest encoder map.
    Base,
    /// Upsample followed by a modulated 3x3 conv.
    Up,
    /// Modulated 3x3 conv at constant resolution.
    Conv,
    /// Modulated 1x1 projection to RGB, no demodulation.
    ToRgb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleLayer {
    pub index: usize,
    pub kind: LayerKind,
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl StyleLayer {
    pub fn has_noise(&self) -> bool {
        self.kind != LayerKind::ToRgb
    }
}

impl GeneratorConfig {
    /// Default desk-scale configuration at `resolution`.
    pub fn toy(resolution: usize) -> Self {
        GeneratorConfig {
            resolution,
            z_dim: LATENT_DIM,
            w_dim: LATENT_DIM,
            mapping_depth: 8,
            base_channels: 16,
            max_channels: 512,
            shallow: false,
            comod: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if !r.is_power_of_two() || r < 8 {
            return Err(Error::invalid(format!(
                "resolution must be a power of two >= 8, got {r}"
            )));
        }
        if self.shallow && r < 16 {
            return Err(Error::invalid("shallow decoder needs resolution >= 16"));
        }
        if self.z_dim != LATENT_DIM || self.w_dim != LATENT_DIM {
            return Err(Error::invalid(format!(
                "z_dim and w_dim must be {LATENT_DIM}"
            )));
        }
        if self.mapping_depth == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::invalid(
                "mapping_depth and channel counts must be positive",
            ));
        }
        Ok(())
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.base_channels * self.resolution / res).min(self.max_channels)
    }

    /// Resolution the decoder starts from (4, or resolution / 4 when shallow).
    pub fn start_resolution(&self) -> usize {
        if self.shallow {
            self.resolution / 4
        } else {
            4
        }
    }

    /// Resolutions of the encoder pyramid, lowest first.
    pub fn pyramid_resolutions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.start_resolution();
        while r < self.resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn n_style_layers(&self) -> usize {
        2 * (self.resolution / self.start_resolution()).trailing_zeros() as usize + 2
    }

    /// Style layer schedule in decoder order.
    pub fn style_layers(&self) -> Vec<StyleLayer> {
        let s = self.start_resolution();
        let mut out = vec![StyleLayer {
            index: 0,
            kind: LayerKind::Base,
            resolution: s,
            in_channels: self.channels(s),
            out_channels: self.channels(s),
        }];
        let mut r = s * 2;
        while r <= self.resolution {
            let i = out.len();
            out.push(StyleLayer {
                index: i,
                kind: LayerKind::Up,
                resolution: r,
                in_channels: self.channels(r / 2),
                out_channels: self.channels(r),
            });
            out.push(StyleLayer {
                index: i + 1,
                kind: LayerKind::Conv,
                resolution: r,
                in_channels: self.channels(r),
                out_channels: self.channels(r),
            });
            r *= 2;
        }
        out.push(StyleLayer {
            index: out.len(),
            kind: LayerKind::ToRgb,
            resolution: self.resolution,
            in_channels: self.channels(self.resolution),
            out_channels: 3,
        });
        out
    }

    /// Width of the vector fed to each style affine.
    pub fn style_input_dim(&self) -> usize {
        if self.comod {
            self.w_dim + COMOD_DIM
        } else {
            self.w_dim
        }
    }

    /// Human-readable channel schedule, one line per style layer.
    pub fn schedule_table(&self) -> String {
        let mut s = String::from("layer kind     res  in  out\n");
        for l in self.style_layers() {
            s.push_str(&format!(
                "{:>5} {:<8} {:>4} {:>3} {:>4}\n",
                l.index,
                format!("{:?}", l.kind).to_lowercase(),
                l.resolution,
                l.in_channels,
                l.out_channels
            ));
        }
        s
    }
}

/// Width of the pooled encoder feature used for co-modulation.
pub const COMOD_DIM: usize = 128;
