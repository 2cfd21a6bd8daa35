use std::fmt;
use std::str::FromStr;

use crate::error::{LslaError, Result};

/// Which inputs play the key and value roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Projected keys and values.
    Qkv,
    /// Raw input as keys, projected values.
    Qxv,
    /// Raw input as both keys and values.
    Qxx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleMode {
    /// Scores multiplied by `1/sqrt(head_dim)`.
    Fixed,
    /// Scores multiplied elementwise by a learnable `N x N` matrix shared
    /// by all heads.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasParamMode {
    /// One learnable value per (head, query, key).
    Direct,
    /// Per-head table over the `(2M-1)^2` relative offsets.
    RelativeTable,
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = LslaError;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($ty::$var),)+
                    other => Err(LslaError::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(Variant { Qkv => "qkv", Qxv => "qxv", Qxx => "qxx" });
str_enum!(ScaleMode { Fixed => "fixed", Dynamic => "dynamic" });
str_enum!(BiasParamMode { Direct => "direct", RelativeTable => "table" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionConfig {
    /// Channel width `d`.
    pub dim: usize,
    pub heads: usize,
    /// Window side `M`; each window holds `M*M` tokens.
    pub window: usize,
    pub variant: Variant,
    pub final_projection: bool,
    pub scale_mode: ScaleMode,
    pub inner_bias: bool,
    pub outer_bias: bool,
    pub bias_mode: BiasParamMode,
}

impl AttentionConfig {
    /// Full light self-limited attention: QXX with projection, dynamic
    /// scale, inner and outer bias.
    pub fn lsla(dim: usize, heads: usize, window: usize) -> Self {
        Self {
            dim,
            heads,
            window,
            variant: Variant::Qxx,
            final_projection: true,
            scale_mode: ScaleMode::Dynamic,
            inner_bias: true,
            outer_bias: true,
            bias_mode: BiasParamMode::Direct,
        }
    }

    /// Plain scaled dot-product attention of the given variant, no biases.
    pub fn plain(dim: usize, heads: usize, window: usize, variant: Variant) -> Self {
        Self {
            variant,
            scale_mode: ScaleMode::Fixed,
            inner_bias: false,
            outer_bias: false,
            ..Self::lsla(dim, heads, window)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.window == 0 {
            return Err(LslaError::Config(format!(
                "dim, heads and window must be positive (got {}, {}, {})",
                self.dim, self.heads, self.window
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(LslaError::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Tokens per window, `N = M^2`.
    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn fixed_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn has_keys(&self) -> bool {
        self.variant == Variant::Qkv
    }

    pub fn has_values(&self) -> bool {
        matches!(self.variant, Variant::Qkv | Variant::Qxv)
    }

    /// Elements in one positional-bias tensor (inner or outer).
    pub fn bias_numel(&self) -> usize {
        match self.bias_mode {
            BiasParamMode::Direct => self.heads * self.tokens() * self.tokens(),
            BiasParamMode::RelativeTable => self.heads * (2 * self.window - 1).pow(2),
        }
    }
}
