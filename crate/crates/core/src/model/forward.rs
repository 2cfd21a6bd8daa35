use crate::attention::window::{reverse_unshift, shift_partition};
use crate::attention::{attend_vars, build_shift_mask, AttentionConfig, AttentionVars, WindowMask};
use crate::error::{shape_err, LslaError, Result};
use crate::model::config::{ModelConfig, StageGeometry};
use crate::numcore::{Bound, Tape, Var, LN_EPS};

fn norm(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn conv(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let k = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    tape.conv2d(x, k, b, stride)
}

fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

fn nhwc(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    match tape.shape(x) {
        &[b, h, w, c] => Ok([b, h, w, c]),
        s => Err(shape_err(format!("expected [b,h,w,c], got {s:?}"))),
    }
}

/// Conv (stride 2) -> LN -> GELU -> conv (stride 2) -> LN.
pub fn stem_forward(tape: &mut Tape, cfg: &ModelConfig, bound: &Bound, x: Var) -> Result<Var> {
    let [_, h, w, c] = nhwc(tape, x)?;
    if h % 4 != 0 || w % 4 != 0 || c != cfg.in_channels {
        return Err(shape_err(format!(
            "stem input {h}x{w}x{c} needs sides divisible by 4 and {} channels",
            cfg.in_channels
        )));
    }
    let y = conv(tape, bound, "stem.conv1", x, 2)?;
    let y = norm(tape, bound, "stem.norm1", y)?;
    let y = tape.gelu(y);
    let y = conv(tape, bound, "stem.conv2", y, 2)?;
    norm(tape, bound, "stem.norm2", y)
}

/// What the attention layer of one block sees: its config, the shifted and
/// partitioned normalized input `[nw, N, d]`, and the mask, if any.
#[derive(Clone, Debug)]
pub struct AttentionInput {
    pub config: AttentionConfig,
    pub prefix: String,
    pub windows: Var,
    pub mask: Option<WindowMask>,
}

#[allow(clippy::too_many_arguments)]
fn block_inner(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    x: Var,
    stage: usize,
    g: &StageGeometry,
    block: usize,
    capture: Option<&mut Option<AttentionInput>>,
) -> Result<Var> {
    let [b, h, w, c] = nhwc(tape, x)?;
    if h != g.resolution || w != g.resolution || c != g.dim {
        return Err(shape_err(format!(
            "stage {stage} block {block} expects {0}x{0}x{1}, got {h}x{w}x{c}",
            g.resolution, g.dim
        )));
    }
    let prefix = format!("stages.{stage}.blocks.{block}");
    let acfg = cfg.attention_config(g);
    let shift = g.shift_for(block);
    let mask = if shift > 0 {
        Some(build_shift_mask(h, w, g.window, shift)?)
    } else {
        None
    };

    let y = norm(tape, bound, &format!("{prefix}.norm1"), x)?;
    let windows = shift_partition(tape, y, g.window, shift)?;
    let vars = AttentionVars::from_bound(&acfg, bound, &format!("{prefix}.attn."))?;
    let trace = attend_vars(tape, &acfg, &vars, windows, mask.as_ref())?;
    if let Some(slot) = capture {
        *slot = Some(AttentionInput {
            config: acfg,
            prefix: format!("{prefix}.attn."),
            windows,
            mask,
        });
    }
    let y = reverse_unshift(tape, trace.out, g.window, b, h, w, shift)?;
    let x = tape.add(x, y)?;

    let y = norm(tape, bound, &format!("{prefix}.norm2"), x)?;
    let y = linear(tape, bound, &format!("{prefix}.mlp.fc1"), y)?;
    let y = tape.gelu(y);
    let y = linear(tape, bound, &format!("{prefix}.mlp.fc2"), y)?;
    tape.add(x, y)
}

/// `x + attn(LN x)` then `x + MLP(LN x)`; odd blocks use the shifted,
/// masked windows.
pub fn block_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    x: Var,
    stage: usize,
    block: usize,
) -> Result<Var> {
    let g = stage_geometry(cfg, stage, block)?;
    block_inner(tape, cfg, bound, x, stage, &g, block, None)
}

fn stage_geometry(cfg: &ModelConfig, stage: usize, block: usize) -> Result<StageGeometry> {
    let geometry = cfg.geometry()?;
    let g = *geometry
        .get(stage)
        .ok_or_else(|| LslaError::IndexOutOfRange(format!("stage {stage} of {}", geometry.len())))?;
    if block >= g.depth {
        return Err(LslaError::IndexOutOfRange(format!(
            "block {block} of {} in stage {stage}",
            g.depth
        )));
    }
    Ok(g)
}

/// Stride-2 conv to the next stage's width, then LN.
pub fn patch_merge(tape: &mut Tape, bound: &Bound, x: Var, stage: usize) -> Result<Var> {
    nhwc(tape, x)?;
    let y = conv(tape, bound, &format!("stages.{stage}.merge.conv"), x, 2)?;
    norm(tape, bound, &format!("stages.{stage}.merge.norm"), y)
}

/// Full network on `images: [b, H, W, C]`, returning logits `[b, classes]`.
/// With `probe = Some((stage, block))` the attention input of that block is
/// returned as well.
pub fn model_forward_vars(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    images: Var,
    probe: Option<(usize, usize)>,
) -> Result<(Var, Option<AttentionInput>)> {
    let [b, h, w, c] = nhwc(tape, images)?;
    if h != cfg.image_size || w != cfg.image_size || c != cfg.in_channels {
        return Err(shape_err(format!(
            "model expects {0}x{0}x{1} images, got {h}x{w}x{c}",
            cfg.image_size, cfg.in_channels
        )));
    }
    if let Some((s, blk)) = probe {
        stage_geometry(cfg, s, blk)?;
    }
    let geometry = cfg.geometry()?;
    let mut captured = None;
    let mut x = stem_forward(tape, cfg, bound, images)?;
    for (s, g) in geometry.iter().enumerate() {
        for blk in 0..g.depth {
            let capture = (probe == Some((s, blk))).then_some(&mut captured);
            x = block_inner(tape, cfg, bound, x, s, g, blk, capture)?;
        }
        if s + 1 < geometry.len() {
            x = patch_merge(tape, bound, x, s)?;
        }
    }
    let [_, h, w, c] = nhwc(tape, x)?;
    let flat = tape.reshape(x, &[b, h * w, c])?;
    let pooled = tape.mean_axis(flat, 1)?;
    let y = norm(tape, bound, "head.norm", pooled)?;
    let logits = linear(tape, bound, "head.fc", y)?;
    Ok((logits, captured))
}
