use std::fmt::Write as _;

use crate::attention::attend::attend_with_weights;
use crate::attention::config::{AttentionConfig, ScaleMode};
use crate::attention::mask::WindowMask;
use crate::attention::params::AttentionParams;
use crate::error::{LslaError, Result};
use crate::numcore::Tensor;

/// Per-key profile of one query in one head: scale, inner bias and the
/// attention weights before and after the outer bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasProfile {
    pub ds: Vec<f64>,
    pub inner_bias: Vec<f64>,
    pub attn_pre: Vec<f64>,
    pub attn_post: Vec<f64>,
}

pub const PROFILE_HEADER: &str = "index,ds,inner_bias,attn_pre,attn_post";

impl BiasProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(PROFILE_HEADER);
        s.push('\n');
        for k in 0..self.ds.len() {
            writeln!(
                s,
                "{k},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.ds[k], self.inner_bias[k], self.attn_pre[k], self.attn_post[k]
            )
            .expect("writing to a String cannot fail");
        }
        s
    }
}

/// Profile for query `query` of head `head` in the single window `x: [1, N, d]`.
pub fn bias_profile(
    cfg: &AttentionConfig,
    params: &AttentionParams,
    x: &Tensor,
    query: usize,
    head: usize,
) -> Result<BiasProfile> {
    bias_profile_in(cfg, params, x, None, 0, query, head)
}

/// Profile for window `window` of a batch of windows `x: [nw, N, d]`.
pub fn bias_profile_in(
    cfg: &AttentionConfig,
    params: &AttentionParams,
    x: &Tensor,
    mask: Option<&WindowMask>,
    window: usize,
    query: usize,
    head: usize,
) -> Result<BiasProfile> {
    let n = cfg.tokens();
    if query >= n {
        return Err(LslaError::IndexOutOfRange(format!("query {query} with {n} tokens")));
    }
    if head >= cfg.heads {
        return Err(LslaError::IndexOutOfRange(format!("head {head} with {} heads", cfg.heads)));
    }
    let nw = x.shape().first().copied().unwrap_or(0);
    if window >= nw {
        return Err(LslaError::IndexOutOfRange(format!("window {window} of {nw}")));
    }
    let (_, pre, post) = attend_with_weights(cfg, params, x, mask)?;
    let row = |t: &Tensor| -> Vec<f64> {
        let start = ((window * cfg.heads + head) * n + query) * n;
        t.data()[start..start + n].to_vec()
    };
    let ds = match (cfg.scale_mode, &params.dynamic_scale) {
        (ScaleMode::Dynamic, Some(ds)) => ds.data()[query * n..(query + 1) * n].to_vec(),
        _ => vec![cfg.fixed_scale(); n],
    };
    let inner_bias = match &params.inner_bias {
        Some(b) => {
            let e = b.expanded(cfg);
            e.data()[(head * n + query) * n..(head * n + query + 1) * n].to_vec()
        }
        None => vec![0.0; n],
    };
    Ok(BiasProfile {
        ds,
        inner_bias,
        attn_pre: row(&pre),
        attn_post: row(&post),
    })
}
