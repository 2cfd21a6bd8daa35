use crate::attention::config::{AttentionConfig, ScaleMode};
use crate::attention::mask::WindowMask;
use crate::attention::params::{AttentionParams, AttentionVars, BiasVar};
use crate::attention::relpos::relative_position_index;
use crate::error::{shape_err, LslaError, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Output of one attention call plus the intermediate weights.
#[derive(Clone, Copy, Debug)]
pub struct AttendTrace {
    /// `[nw, N, d]`
    pub out: Var,
    /// Softmax output, `[nw, H, N, N]`.
    pub attn_pre: Var,
    /// After the outer bias (same var as `attn_pre` without one).
    pub attn_post: Var,
}

fn split_heads(tape: &mut Tape, t: Var, nw: usize, n: usize, heads: usize, hd: usize) -> Result<Var> {
    let r = tape.reshape(t, &[nw, n, heads, hd])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn resolve_bias(tape: &mut Tape, cfg: &AttentionConfig, b: BiasVar) -> Result<Var> {
    match b {
        BiasVar::Direct(v) => Ok(v),
        BiasVar::Table(table) => {
            let idx = relative_position_index(cfg.window);
            let (n, len) = (cfg.tokens(), idx.table_len());
            let index = (0..cfg.heads)
                .flat_map(|h| idx.as_slice().iter().map(move |&i| h * len + i))
                .collect::<Vec<_>>();
            debug_assert_eq!(index.len(), cfg.heads * n * n);
            tape.gather(table, &[cfg.heads, n, n], index)
        }
    }
}

/// Mask laid out as `[nw, 1, N, N]`; window `i` uses mask window
/// `i mod mask.windows()` (windows are batch-major).
fn expand_mask(values: &[f64], mask: &WindowMask, nw: usize) -> Vec<f64> {
    let per = mask.tokens() * mask.tokens();
    (0..nw)
        .flat_map(|i| {
            let w = i % mask.windows();
            values[w * per..(w + 1) * per].iter().copied()
        })
        .collect()
}

/// Windowed multi-head attention on the tape, in every variant:
///
/// scores `S = q_h k_h^T` (keys are the raw input split into heads for
/// QXV/QXX), scaled by `1/sqrt(d_h)` or multiplied elementwise by the
/// dynamic scale, plus inner bias and mask; `A = softmax(S)`, plus the
/// outer bias (zeroed at masked pairs); `Y_h = A v_h`; heads concatenated
/// and optionally projected.
pub fn attend_vars(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    p: &AttentionVars,
    x: Var,
    mask: Option<&WindowMask>,
) -> Result<AttendTrace> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    let d = cfg.dim;
    let [nw, n, xd] = shape[..] else {
        return Err(shape_err(format!("attention input must be [nw, N, d], got {shape:?}")));
    };
    // Token count is free unless a per-position tensor pins it to M*M.
    let positional = p.dynamic_scale.is_some() || p.inner_bias.is_some() || p.outer_bias.is_some();
    if xd != d || (n != cfg.tokens() && (positional || mask.is_some())) {
        return Err(shape_err(format!(
            "attention input {shape:?} does not match N={}, d={d}",
            cfg.tokens()
        )));
    }
    if let Some(m) = mask {
        if m.tokens() != n || nw % m.windows() != 0 {
            return Err(shape_err(format!(
                "mask for {} windows of {} tokens cannot apply to {nw} windows of {n}",
                m.windows(),
                m.tokens()
            )));
        }
        if let Some(row) = m.degenerate_row() {
            return Err(LslaError::DegenerateRow { row });
        }
    }
    let (heads, hd) = (cfg.heads, cfg.head_dim());

    let q = tape.linear(x, p.q.0, Some(p.q.1))?;
    let keys = match p.k {
        Some((w, b)) => tape.linear(x, w, Some(b))?,
        None => x,
    };
    let values = match p.v {
        Some((w, b)) => tape.linear(x, w, Some(b))?,
        None => x,
    };
    let qh = split_heads(tape, q, nw, n, heads, hd)?;
    let kh = split_heads(tape, keys, nw, n, heads, hd)?;
    let vh = if values == keys { kh } else { split_heads(tape, values, nw, n, heads, hd)? };

    let mut s = tape.matmul_t(qh, kh)?;
    s = match (cfg.scale_mode, p.dynamic_scale) {
        (ScaleMode::Fixed, _) => tape.scale(s, cfg.fixed_scale()),
        (ScaleMode::Dynamic, Some(ds)) => tape.mul(s, ds)?,
        (ScaleMode::Dynamic, None) => {
            return Err(LslaError::ParamMismatch("dynamic scale requested but missing".into()))
        }
    };
    if let Some(b) = p.inner_bias {
        let bi = resolve_bias(tape, cfg, b)?;
        s = tape.add(s, bi)?;
    }
    if let Some(m) = mask.filter(|m| !m.is_all_zero()) {
        let mv = tape.constant_raw(&[nw, 1, n, n], expand_mask(m.additive(), m, nw))?;
        s = tape.add(s, mv)?;
    }
    let attn_pre = tape.softmax(s)?;
    let mut attn_post = attn_pre;
    if let Some(b) = p.outer_bias {
        let mut bo = resolve_bias(tape, cfg, b)?;
        if let Some(m) = mask.filter(|m| !m.is_all_zero()) {
            let keep = tape.constant_raw(&[nw, 1, n, n], expand_mask(&m.keep(), m, nw))?;
            bo = tape.mul(bo, keep)?;
        }
        attn_post = tape.add(attn_pre, bo)?;
    }

    let y = tape.matmul(attn_post, vh)?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    let mut out = tape.reshape(y, &[nw, n, d])?;
    if let Some((w, b)) = p.proj {
        out = tape.linear(out, w, Some(b))?;
    }
    Ok(AttendTrace {
        out,
        attn_pre,
        attn_post,
    })
}

/// Evaluates attention on `x: [nw, N, d]` without tracking gradients.
pub fn attend(
    cfg: &AttentionConfig,
    params: &AttentionParams,
    x: &Tensor,
    mask: Option<&WindowMask>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = AttentionVars::bind(cfg, params, &mut tape)?;
    let xv = tape.constant(x);
    let trace = attend_vars(&mut tape, cfg, &vars, xv, mask)?;
    Ok(tape.tensor(trace.out))
}

/// Like [`attend`] but also returns the pre- and post-outer-bias weights,
/// each `[nw, H, N, N]`.
pub fn attend_with_weights(
    cfg: &AttentionConfig,
    params: &AttentionParams,
    x: &Tensor,
    mask: Option<&WindowMask>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = AttentionVars::bind(cfg, params, &mut tape)?;
    let xv = tape.constant(x);
    let t = attend_vars(&mut tape, cfg, &vars, xv, mask)?;
    Ok((tape.tensor(t.out), tape.tensor(t.attn_pre), tape.tensor(t.attn_post)))
}
