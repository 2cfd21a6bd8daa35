//! Windowed attention in all variants (QKV, QXV, QXX; fixed or dynamic
//! scale; inner and outer positional bias), shifted-window masking, and
//! the weight constructors relating the variants.

mod attend;
mod config;
pub mod equivalence;
pub mod mask;
mod params;
mod profile;
pub mod relpos;
pub mod window;

pub use attend::{attend, attend_vars, attend_with_weights, AttendTrace};
pub use config::{AttentionConfig, BiasParamMode, ScaleMode, Variant};
pub use equivalence::{construct_equivalent_qbar, fuse_vo, qkv_as_qxx};
pub use mask::{build_shift_mask, WindowMask, MASK_SENTINEL};
pub use params::{AttentionParams, AttentionVars, BiasVar, Linear, PosBias, INIT_STD};
pub use profile::{bias_profile, bias_profile_in, BiasProfile, PROFILE_HEADER};
pub use relpos::{relative_position_index, RelativePositionIndex};
pub use window::{window_partition, window_reverse};
