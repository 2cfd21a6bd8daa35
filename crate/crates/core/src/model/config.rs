use std::fmt::Write as _;

use crate::attention::{AttentionConfig, BiasParamMode, ScaleMode, Variant};
use crate::error::{LslaError, Result};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Attention settings shared by every block; width, heads and window come
/// from the stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionTemplate {
    pub variant: Variant,
    pub final_projection: bool,
    pub scale_mode: ScaleMode,
    pub inner_bias: bool,
    pub outer_bias: bool,
    pub bias_mode: BiasParamMode,
}

impl AttentionTemplate {
    pub fn lsla() -> Self {
        let c = AttentionConfig::lsla(1, 1, 1);
        Self::from_config(&c)
    }

    /// Light self-attention with an inner bias only: fixed scale, no
    /// dynamic scale, no outer bias.
    pub fn lsa() -> Self {
        Self {
            scale_mode: ScaleMode::Fixed,
            outer_bias: false,
            ..Self::lsla()
        }
    }

    pub fn from_config(c: &AttentionConfig) -> Self {
        Self {
            variant: c.variant,
            final_projection: c.final_projection,
            scale_mode: c.scale_mode,
            inner_bias: c.inner_bias,
            outer_bias: c.outer_bias,
            bias_mode: c.bias_mode,
        }
    }

    pub fn instantiate(&self, dim: usize, heads: usize, window: usize) -> AttentionConfig {
        AttentionConfig {
            dim,
            heads,
            window,
            variant: self.variant,
            final_projection: self.final_projection,
            scale_mode: self.scale_mode,
            inner_bias: self.inner_bias,
            outer_bias: self.outer_bias,
            bias_mode: self.bias_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_mid_channels: usize,
    /// Nominal window side `M`.
    pub window: usize,
    pub stages: [StageConfig; NUM_STAGES],
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention: AttentionTemplate,
}

/// Resolved geometry of one stage at the configured image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub resolution: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Window actually used; equals the feature map side when the map is
    /// smaller than `M`.
    pub window: usize,
    /// Shift applied on odd blocks (zero when one window covers the map).
    pub shift: usize,
}

impl StageGeometry {
    pub fn shift_for(&self, block: usize) -> usize {
        if block % 2 == 1 {
            self.shift
        } else {
            0
        }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.resolution / self.window).pow(2)
    }
}

fn stages(depths: [usize; 4], dims: [usize; 4], heads: [usize; 4]) -> [StageConfig; NUM_STAGES] {
    std::array::from_fn(|i| StageConfig {
        depth: depths[i],
        dim: dims[i],
        heads: heads[i],
    })
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &["vit-lsla-t", "swin-t-layout", "tiny", "tiny-lsa", "micro"];

impl ModelConfig {
    /// The 224px backbone used for cost reporting.
    pub fn vit_lsla_t() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            stem_mid_channels: 48,
            window: 7,
            stages: stages([3, 4, 7, 2], [96, 192, 384, 768], [3, 6, 12, 24]),
            mlp_ratio: 2,
            num_classes: 102,
            attention: AttentionTemplate::lsla(),
        }
    }

    /// Desk-scale model for the synthetic task.
    pub fn tiny() -> Self {
        Self {
            image_size: 56,
            in_channels: 3,
            stem_mid_channels: 8,
            window: 7,
            stages: stages([1, 1, 2, 1], [16, 32, 64, 128], [1, 2, 4, 8]),
            mlp_ratio: 2,
            num_classes: 4,
            attention: AttentionTemplate::lsla(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "vit-lsla-t" => Self::vit_lsla_t(),
            "swin-t-layout" => Self {
                stages: stages([2, 2, 6, 2], [96, 192, 384, 768], [3, 6, 12, 24]),
                mlp_ratio: 4,
                ..Self::vit_lsla_t()
            },
            "tiny" => Self::tiny(),
            "tiny-lsa" => Self {
                attention: AttentionTemplate::lsa(),
                ..Self::tiny()
            },
            "micro" => Self {
                image_size: 28,
                stages: stages([1, 1, 1, 1], [16, 32, 64, 128], [1, 2, 4, 8]),
                ..Self::tiny()
            },
            other => {
                return Err(LslaError::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LslaError::Config(msg));
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return bad(format!("image size {} is not a positive multiple of 4", self.image_size));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("stem_mid_channels", self.stem_mid_channels),
            ("window", self.window),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return bad(format!("stage {i}: {s:?} needs positive depth and dim divisible by heads"));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return bad(format!("stage {i} dim {} is not twice the previous stage", s.dim));
            }
        }
        self.geometry().map(|_| ())
    }

    /// Per-stage resolution, window and shift.
    pub fn geometry(&self) -> Result<[StageGeometry; NUM_STAGES]> {
        let mut res = self.image_size.div_ceil(2).div_ceil(2);
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                res = res.div_ceil(2);
            }
            let window = if res.is_multiple_of(self.window) {
                self.window
            } else if res < self.window {
                res
            } else {
                return Err(LslaError::Config(format!(
                    "stage {i} feature map {res}x{res} cannot be tiled by window {}",
                    self.window
                )));
            };
            out.push(StageGeometry {
                resolution: res,
                dim: s.dim,
                heads: s.heads,
                depth: s.depth,
                window,
                shift: if window < res { window / 2 } else { 0 },
            });
        }
        Ok(out.try_into().expect("four stages"))
    }

    pub fn attention_config(&self, g: &StageGeometry) -> AttentionConfig {
        self.attention.instantiate(g.dim, g.heads, g.window)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        dim * self.mlp_ratio
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let list = |f: fn(&StageConfig) -> usize| {
            self.stages.iter().map(|s| f(s).to_string()).collect::<Vec<_>>().join(",")
        };
        let a = &self.attention;
        let mut s = String::new();
        let fields: [(&str, String); 15] = [
            ("image_size", self.image_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("stem_mid_channels", self.stem_mid_channels.to_string()),
            ("window", self.window.to_string()),
            ("depths", list(|s| s.depth)),
            ("dims", list(|s| s.dim)),
            ("heads", list(|s| s.heads)),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("variant", a.variant.to_string()),
            ("final_projection", a.final_projection.to_string()),
            ("scale_mode", a.scale_mode.to_string()),
            ("inner_bias", a.inner_bias.to_string()),
            ("outer_bias", a.outer_bias.to_string()),
            ("bias_mode", a.bias_mode.to_string()),
        ];
        for (k, v) in fields {
            writeln!(s, "{k}={v}").expect("writing to a String cannot fail");
        }
        s
    }

    /// Parses `key=value` lines. A `preset=<name>` line (if any) must come
    /// first and supplies defaults; otherwise every field is required.
    /// Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut base: Option<Self> = None;
        let mut seen = Vec::new();
        let mut cfg = Self::vit_lsla_t();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| LslaError::Config(format!("line {}: {m}", lineno + 1));
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            if k == "preset" {
                if !seen.is_empty() || base.is_some() {
                    return Err(err("preset must be the first entry".into()));
                }
                cfg = Self::preset(v)?;
                base = Some(cfg.clone());
                continue;
            }
            let int = |v: &str| v.parse::<usize>().map_err(|_| err(format!("{k}: `{v}` is not an integer")));
            let boolean = |v: &str| v.parse::<bool>().map_err(|_| err(format!("{k}: `{v}` is not a bool")));
            let four = |v: &str| -> Result<[usize; 4]> {
                let parts = v.split(',').map(|p| int(p.trim())).collect::<Result<Vec<_>>>()?;
                parts.try_into().map_err(|_| err(format!("{k} needs four comma-separated values")))
            };
            match k {
                "image_size" => cfg.image_size = int(v)?,
                "in_channels" => cfg.in_channels = int(v)?,
                "stem_mid_channels" => cfg.stem_mid_channels = int(v)?,
                "window" => cfg.window = int(v)?,
                "depths" => four(v)?.iter().zip(&mut cfg.stages).for_each(|(&x, s)| s.depth = x),
                "dims" => four(v)?.iter().zip(&mut cfg.stages).for_each(|(&x, s)| s.dim = x),
                "heads" => four(v)?.iter().zip(&mut cfg.stages).for_each(|(&x, s)| s.heads = x),
                "mlp_ratio" => cfg.mlp_ratio = int(v)?,
                "num_classes" => cfg.num_classes = int(v)?,
                "variant" => cfg.attention.variant = v.parse()?,
                "final_projection" => cfg.attention.final_projection = boolean(v)?,
                "scale_mode" => cfg.attention.scale_mode = v.parse()?,
                "inner_bias" => cfg.attention.inner_bias = boolean(v)?,
                "outer_bias" => cfg.attention.outer_bias = boolean(v)?,
                "bias_mode" => cfg.attention.bias_mode = v.parse()?,
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
            if seen.contains(&k) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            seen.push(k);
        }
        if base.is_none() && seen.len() != 15 {
            return Err(LslaError::Config(format!(
                "config without a preset must set all 15 keys, found {}",
                seen.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ladder() {
        let g = ModelConfig::vit_lsla_t().geometry().unwrap();
        let ladder: Vec<_> = g.iter().map(|s| (s.resolution, s.dim)).collect();
        assert_eq!(ladder, [(56, 96), (28, 192), (14, 384), (7, 768)]);
        assert_eq!(g.map(|s| s.shift), [3, 3, 3, 0]);
    }

    #[test]
    fn small_maps_clamp_the_window() {
        let g = ModelConfig::tiny().geometry().unwrap();
        assert_eq!(g.map(|s| (s.resolution, s.window, s.shift)), [(14, 7, 3), (7, 7, 0), (4, 4, 0), (2, 2, 0)]);
        let g = ModelConfig::preset("micro").unwrap().geometry().unwrap();
        assert_eq!(g.map(|s| s.resolution), [7, 4, 2, 1]);
    }

    #[test]
    fn untileable_map_is_rejected() {
        let cfg = ModelConfig {
            image_size: 40,
            ..ModelConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        for name in PRESETS {
            let cfg = ModelConfig::preset(name).unwrap();
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        let cfg = ModelConfig::from_text("preset=tiny\n# c\nvariant=qkv\n").unwrap();
        assert_eq!(cfg.attention.variant, Variant::Qkv);
        assert!(ModelConfig::from_text("window=7\n").is_err());
        assert!(ModelConfig::from_text("preset=tiny\nwindow=7\nwindow=7\n").is_err());
        assert!(ModelConfig::from_text("preset=tiny\nbogus=1\n").is_err());
    }
}
