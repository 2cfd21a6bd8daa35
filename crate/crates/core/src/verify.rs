//! Named property checks run by `lsla verify`. Each property is a
//! self-contained randomized check with a fixed tolerance.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::accounting::{audit_params, cost_report, paper_target};
use crate::attention::window::{reverse_unshift, shift_partition};
use crate::attention::{
    attend, attend_with_weights, build_shift_mask, construct_equivalent_qbar, fuse_vo, qkv_as_qxx,
    relative_position_index, window_partition, window_reverse, AttentionConfig, AttentionParams,
    BiasParamMode, PosBias, Variant,
};
use crate::model::{
    block_forward, layout, read_checkpoint, write_checkpoint, Model, ModelConfig, StageConfig,
};
use crate::numcore::gradcheck::{fd_gradcheck_subset, worst_rel, DEFAULT_STEP};
use crate::numcore::ops::matmul;
use crate::numcore::rng::{normal_tensor, seeded, SeededRng};
use crate::numcore::{ParamStore, Tape, Tensor};
use rand::Rng;

/// Switches that deliberately break a property, for negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Perturbs one entry of the fused value/output matrix.
    pub skew_fuse_vo: bool,
}

pub struct Context {
    pub seed: u64,
    pub hooks: Hooks,
}

impl Context {
    fn rng(&self, salt: u64) -> SeededRng {
        seeded(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
    }
}

/// `Ok(detail)` on success, `Err(detail)` on failure.
pub type Check = fn(&Context) -> std::result::Result<String, String>;

pub struct Property {
    pub name: &'static str,
    pub description: &'static str,
    pub check: Check,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn max_dev_qbar(ctx: &Context) -> std::result::Result<String, String> {
    let mut rng = ctx.rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=16);
        let x = normal_tensor(&mut rng, &[n, d], 1.0);
        let wq = normal_tensor(&mut rng, &[d, d], 1.0);
        let wk = normal_tensor(&mut rng, &[d, d], 1.0);
        let qbar = construct_equivalent_qbar(&wq, &wk).map_err(e2s)?;
        let xt = x.transpose2().map_err(e2s)?;
        let lhs = matmul(&matmul(&x, &qbar).map_err(e2s)?, &xt).map_err(e2s)?;
        let k = matmul(&x, &wk).map_err(e2s)?;
        let rhs = matmul(&matmul(&x, &wq).map_err(e2s)?, &k.transpose2().map_err(e2s)?).map_err(e2s)?;
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    ensure!(worst < 1e-10, "max deviation {worst:e} over 1000 instances");
    Ok(format!("max deviation {worst:.3e} over 1000 instances"))
}

fn max_dev_fuse(ctx: &Context) -> std::result::Result<String, String> {
    let mut rng = ctx.rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=16);
        let a = normal_tensor(&mut rng, &[n, n], 1.0);
        let x = normal_tensor(&mut rng, &[n, d], 1.0);
        let wv = normal_tensor(&mut rng, &[d, d], 1.0);
        let wo = normal_tensor(&mut rng, &[d, d], 1.0);
        let mut w = fuse_vo(&wv, &wo).map_err(e2s)?;
        if ctx.hooks.skew_fuse_vo {
            w.data_mut()[0] += 1e-3;
        }
        let ax = matmul(&a, &x).map_err(e2s)?;
        let lhs = matmul(&ax, &w).map_err(e2s)?;
        let rhs = matmul(&matmul(&ax, &wv).map_err(e2s)?, &wo).map_err(e2s)?;
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    ensure!(worst < 1e-10, "max deviation {worst:e} over 1000 instances");
    Ok(format!("max deviation {worst:.3e} over 1000 instances"))
}

fn randomize(p: &mut AttentionParams, rng: &mut SeededRng, std: f64) {
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    for n in names {
        let t = p.tensor_mut(&n).expect("listed name");
        *t = normal_tensor(rng, t.shape(), std);
    }
}

fn qkv_as_qxx_check(ctx: &Context) -> std::result::Result<String, String> {
    let mut rng = ctx.rng(3);
    let mut worst: f64 = 0.0;
    for variant in [Variant::Qkv, Variant::Qxv] {
        for proj in [true, false] {
            for _ in 0..20 {
                let d = rng.random_range(1..=8);
                let cfg = AttentionConfig {
                    final_projection: proj,
                    ..AttentionConfig::plain(d, 1, 3, variant)
                };
                let mut p = AttentionParams::init(&cfg, &mut rng).map_err(e2s)?;
                randomize(&mut p, &mut rng, 0.5);
                for name in ["q.bias", "k.bias", "v.bias", "proj.bias"] {
                    if let Some(t) = p.tensor_mut(name) {
                        *t = Tensor::zeros(t.shape());
                    }
                }
                let (qcfg, qp) = qkv_as_qxx(&cfg, &p).map_err(e2s)?;
                let x = normal_tensor(&mut rng, &[2, 9, d], 1.0);
                let a = attend(&cfg, &p, &x, None).map_err(e2s)?;
                let b = attend(&qcfg, &qp, &x, None).map_err(e2s)?;
                worst = worst.max(a.max_abs_diff(&b));
            }
        }
    }
    ensure!(worst < 1e-10, "max deviation {worst:e}");
    Ok(format!("single-head QKV/QXV reproduced by QXX, max deviation {worst:.3e}"))
}

fn reduction_check(ctx: &Context) -> std::result::Result<String, String> {
    let mut rng = ctx.rng(4);
    let mut worst: f64 = 0.0;
    for (d, h, m) in [(12, 3, 3), (8, 2, 7), (6, 1, 2)] {
        let full = AttentionConfig::lsla(d, h, m);
        let mut p = AttentionParams::init(&full, &mut rng).map_err(e2s)?;
        randomize(&mut p, &mut rng, 0.5);
        let n = full.tokens();
        p.dynamic_scale = Some(Tensor::full(&[n, n], full.fixed_scale()));
        p.inner_bias = Some(PosBias::Direct(Tensor::zeros(&[h, n, n])));
        p.outer_bias = Some(PosBias::Direct(Tensor::zeros(&[h, n, n])));
        let plain = AttentionConfig::plain(d, h, m, Variant::Qxx);
        let pp = AttentionParams {
            dynamic_scale: None,
            inner_bias: None,
            outer_bias: None,
            ..p.clone()
        };
        let x = normal_tensor(&mut rng, &[4, n, d], 1.0);
        let a = attend(&full, &p, &x, None).map_err(e2s)?;
        let b = attend(&plain, &pp, &x, None).map_err(e2s)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.3e}"))
}

fn masked_weights(
    ctx: &Context,
    salt: u64,
) -> std::result::Result<(AttentionConfig, AttentionParams, crate::attention::WindowMask, Tensor, Tensor), String> {
    let mut rng = ctx.rng(salt);
    let cfg = AttentionConfig::lsla(8, 2, 7);
    let mut p = AttentionParams::init(&cfg, &mut rng).map_err(e2s)?;
    randomize(&mut p, &mut rng, 0.3);
    let mask = build_shift_mask(14, 14, 7, 3).map_err(e2s)?;
    let x = normal_tensor(&mut rng, &[8, 49, 8], 1.0);
    let (_, pre, post) = attend_with_weights(&cfg, &p, &x, Some(&mask)).map_err(e2s)?;
    Ok((cfg, p, mask, pre, post))
}

fn mask_zero_check(ctx: &Context) -> std::result::Result<String, String> {
    let (_, _, mask, pre, post) = masked_weights(ctx, 5)?;
    let mut excluded = 0;
    for w in 0..8 {
        for h in 0..2 {
            for q in 0..49 {
                for k in 0..49 {
                    if mask.is_excluded(w % 4, q, k) {
                        let i = ((w * 2 + h) * 49 + q) * 49 + k;
                        ensure!(pre.data()[i] == 0.0 && post.data()[i] == 0.0, "window {w} head {h} pair ({q},{k}) has weight");
                        excluded += 1;
                    }
                }
            }
        }
    }
    ensure!(excluded > 0, "mask excluded nothing");
    Ok(format!("{excluded} cross-region weights exactly zero before and after the outer bias"))
}

fn mask_region_check(_: &Context) -> std::result::Result<String, String> {
    for (h, m, s) in [(4, 2, 1), (14, 7, 3), (28, 7, 3)] {
        let mask = build_shift_mask(h, h, m, s).map_err(e2s)?;
        let region = |y: usize, x: usize| ((y + s) >= h, (x + s) >= h);
        for wy in 0..h / m {
            for wx in 0..h / m {
                let w = wy * (h / m) + wx;
                for q in 0..m * m {
                    for k in 0..m * m {
                        let rq = region(wy * m + q / m, wx * m + q % m);
                        let rk = region(wy * m + k / m, wx * m + k % m);
                        ensure!(mask.is_excluded(w, q, k) == (rq != rk), "h={h} m={m} s={s}: window {w} ({q},{k})");
                    }
                }
            }
        }
    }
    Ok("shift masks agree with region labels of the rolled map".into())
}

fn rowsum_pre_check(ctx: &Context) -> std::result::Result<String, String> {
    let (_, _, _, pre, _) = masked_weights(ctx, 6)?;
    let worst = pre.data().chunks(49).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure!(worst <= 1e-12, "worst row-sum deviation {worst:e}");
    Ok(format!("worst deviation {worst:.3e}"))
}

fn rowsum_post_check(ctx: &Context) -> std::result::Result<String, String> {
    let (cfg, p, mask, _, post) = masked_weights(ctx, 7)?;
    let bo = p.outer_bias.as_ref().expect("lsla has an outer bias").expanded(&cfg);
    let mut worst: f64 = 0.0;
    for (r, row) in post.data().chunks(49).enumerate() {
        let (q, h, w) = (r % 49, (r / 49) % 2, r / 98);
        let expect = 1.0 + (0..49).filter(|&k| !mask.is_excluded(w % 4, q, k)).map(|k| bo.at(&[h, q, k])).sum::<f64>();
        worst = worst.max((row.iter().sum::<f64>() - expect).abs());
    }
    ensure!(worst <= 1e-12, "worst deviation {worst:e}");
    Ok(format!("worst deviation {worst:.3e}"))
}

/// Small model whose first stage has a shifted block at 4x4 resolution.
fn small_block_model(ctx: &Context, salt: u64, mode: BiasParamMode) -> std::result::Result<(ModelConfig, Model), String> {
    let mut cfg = ModelConfig {
        image_size: 16,
        stem_mid_channels: 4,
        window: 2,
        stages: std::array::from_fn(|i| StageConfig {
            depth: if i == 0 { 2 } else { 1 },
            dim: 8 << i,
            heads: 2,
        }),
        num_classes: 3,
        ..ModelConfig::tiny()
    };
    cfg.attention.bias_mode = mode;
    let mut model = Model::new(cfg.clone(), ctx.seed).map_err(e2s)?;
    let mut rng = ctx.rng(salt);
    for (_, t) in model.params.iter_mut() {
        *t = normal_tensor(&mut rng, t.shape(), 0.3).with_requires_grad(true);
    }
    Ok((cfg, model))
}

fn gradcheck_block(ctx: &Context) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (salt, mode) in [(8, BiasParamMode::Direct), (9, BiasParamMode::RelativeTable)] {
        let (cfg, mut model) = small_block_model(ctx, salt, mode)?;
        let mut rng = ctx.rng(salt + 100);
        model.params.insert("input", normal_tensor(&mut rng, &[2, 4, 4, 8], 1.0)).map_err(e2s)?;
        let probe = normal_tensor(&mut rng, &[2, 4, 4, 8], 1.0);
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("stages.0.blocks.1.") || *n == "input")
            .map(String::from)
            .collect();
        let reports = fd_gradcheck_subset(&model.params, &names, DEFAULT_STEP, 24, |tape, bound| {
            let y = block_forward(tape, &cfg, bound, bound.get("input")?, 0, 1)?;
            let p = tape.constant(&probe);
            let y = tape.mul(y, p)?;
            Ok(tape.sum_all(y))
        })
        .map_err(e2s)?;
        worst = worst.max(worst_rel(&reports));
        count += reports.len();
    }
    ensure!(worst < 1e-4, "worst relative error {worst:e}");
    Ok(format!("{count} tensors of a shifted block, worst relative error {worst:.3e}"))
}

fn shapes_check(_: &Context) -> std::result::Result<String, String> {
    let g = ModelConfig::vit_lsla_t().geometry().map_err(e2s)?;
    let ladder: Vec<(usize, usize)> = g.iter().map(|s| (s.resolution, s.dim)).collect();
    ensure!(ladder == [(56, 96), (28, 192), (14, 384), (7, 768)], "ladder {ladder:?}");
    let mut rng = seeded(0);
    for variant in [Variant::Qkv, Variant::Qxv, Variant::Qxx] {
        let cfg = AttentionConfig {
            variant,
            ..AttentionConfig::lsla(12, 3, 7)
        };
        let p = AttentionParams::init(&cfg, &mut rng).map_err(e2s)?;
        let x = normal_tensor(&mut rng, &[2, 49, 12], 1.0);
        let (out, pre, post) = attend_with_weights(&cfg, &p, &x, None).map_err(e2s)?;
        ensure!(out.shape() == [2, 49, 12], "{variant} output {:?}", out.shape());
        ensure!(pre.shape() == [2, 3, 49, 49] && post.shape() == pre.shape(), "{variant} weights {:?}", pre.shape());
    }
    Ok("stage ladder (56,96) (28,192) (14,384) (7,768); attention shapes per variant".into())
}

fn relpos_check(_: &Context) -> std::result::Result<String, String> {
    for m in 1..=8 {
        let idx = relative_position_index(m);
        let mut seen = vec![false; idx.table_len()];
        for q in 0..m * m {
            for k in 0..m * m {
                let (dy, dx) = ((q / m) as isize - (k / m) as isize, (q % m) as isize - (k % m) as isize);
                let expect = ((dy + m as isize - 1) * (2 * m as isize - 1) + dx + m as isize - 1) as usize;
                ensure!(idx.get(q, k) == expect, "M={m} ({q},{k})");
                seen[expect] = true;
            }
        }
        ensure!(seen.iter().all(|&s| s), "M={m}: table not covered");
    }
    Ok("relative index matches offsets and covers the table for M=1..8".into())
}

fn window_check(ctx: &Context) -> std::result::Result<String, String> {
    let mut rng = ctx.rng(10);
    for (h, m, s) in [(14, 7, 3), (8, 4, 2), (6, 3, 1)] {
        let x = normal_tensor(&mut rng, &[2, h, h, 3], 1.0);
        let w = window_partition(&x, m).map_err(e2s)?;
        ensure!(window_reverse(&w, m, h, h).map_err(e2s)? == x, "partition round trip h={h} m={m}");
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let p = shift_partition(&mut tape, v, m, s).map_err(e2s)?;
        let r = reverse_unshift(&mut tape, p, m, 2, h, h, s).map_err(e2s)?;
        ensure!(tape.tensor(r) == x, "shift round trip h={h} m={m} s={s}");
    }
    Ok("partition and shift round trips are exact".into())
}

fn zero_store(cfg: &ModelConfig) -> std::result::Result<ParamStore, String> {
    let mut store = ParamStore::new();
    for spec in layout(cfg).map_err(e2s)? {
        store.insert(spec.name, Tensor::zeros(&spec.shape)).map_err(e2s)?;
    }
    Ok(store)
}

fn audit_grid_check(_: &Context) -> std::result::Result<String, String> {
    let mut n = 0;
    for variant in [Variant::Qkv, Variant::Qxv, Variant::Qxx] {
        for proj in [true, false] {
            for mode in [BiasParamMode::Direct, BiasParamMode::RelativeTable] {
                let mut cfg = ModelConfig::vit_lsla_t();
                cfg.attention.variant = variant;
                cfg.attention.final_projection = proj;
                cfg.attention.bias_mode = mode;
                let a = audit_params(&cfg, &zero_store(&cfg)?).map_err(e2s)?;
                ensure!(a.walked_total == a.closed_form_total, "{variant} proj={proj} {mode}");
                n += 1;
            }
        }
    }
    Ok(format!("closed form equals walked count for {n} configurations"))
}

fn cost_check(_: &Context) -> std::result::Result<String, String> {
    let mut lines = Vec::new();
    for (variant, proj) in [(Variant::Qxx, true), (Variant::Qxx, false), (Variant::Qkv, true), (Variant::Qxv, false)] {
        let mut cfg = ModelConfig::vit_lsla_t();
        cfg.attention.variant = variant;
        cfg.attention.final_projection = proj;
        let r = cost_report(&cfg).map_err(e2s)?;
        let t = paper_target("vit-lsla-t", &cfg.attention).ok_or("missing target")?;
        let (dp, df) = t.deviation(&r);
        ensure!(dp.abs() <= 0.05 && df.abs() <= 0.05, "{}: params {:+.2}%, flops {:+.2}%", t.label, 100.0 * dp, 100.0 * df);
        lines.push(format!("{} {:+.1}%/{:+.1}%", t.label, 100.0 * dp, 100.0 * df));
    }
    Ok(lines.join("; "))
}

fn checkpoint_check(ctx: &Context) -> std::result::Result<String, String> {
    let model = Model::new(ModelConfig::tiny(), ctx.seed).map_err(e2s)?;
    let bytes = write_checkpoint(&model);
    let back = read_checkpoint(&bytes, std::path::Path::new("<memory>")).map_err(e2s)?;
    ensure!(write_checkpoint(&back) == bytes, "re-serialized bytes differ");
    let mut bad = bytes.clone();
    let i = bad.len() / 2;
    bad[i] ^= 1;
    ensure!(read_checkpoint(&bad, std::path::Path::new("<memory>")).is_err(), "corruption not detected");
    Ok(format!("{} bytes round trip, corruption detected", bytes.len()))
}

fn determinism_check(ctx: &Context) -> std::result::Result<String, String> {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone(), ctx.seed).map_err(e2s)?;
    let x = crate::numcore::rng::uniform_tensor(&mut ctx.rng(11), &[2, 56, 56, 3], 0.0, 1.0);
    let a = model.forward(&x).map_err(e2s)?;
    let b = Model::new(cfg, ctx.seed).map_err(e2s)?.forward(&x).map_err(e2s)?;
    ensure!(a == b, "forward passes differ");
    Ok("forward is bit-identical across rebuilds".into())
}

pub fn registry() -> Vec<Property> {
    macro_rules! p {
        ($name:literal, $desc:literal, $f:ident) => {
            Property {
                name: $name,
                description: $desc,
                check: $f,
            }
        };
    }
    vec![
        p!("equivalence.qbar", "Qbar X^T equals Q K^T with Qbar = W_q W_k^T", max_dev_qbar),
        p!("equivalence.fuse_vo", "A X W_v W_o equals A X (W_v W_o)", max_dev_fuse),
        p!("expressivity.qkv_as_qxx", "single-head QKV/QXV rebuilt exactly as QXX", qkv_as_qxx_check),
        p!("reduction.fixed_scale", "LSLA with constant scale and zero biases equals plain LSA", reduction_check),
        p!("mask.zero_weight", "masked pairs get zero weight before and after the outer bias", mask_zero_check),
        p!("mask.regions", "shift mask matches a brute-force region labelling", mask_region_check),
        p!("rowsum.pre", "softmax rows sum to one", rowsum_pre_check),
        p!("rowsum.post", "post-bias rows sum to one plus the unmasked bias row", rowsum_post_check),
        p!("gradcheck.block", "finite differences agree with backprop through a full block", gradcheck_block),
        p!("shapes.ladder", "stage ladder and attention tensor shapes", shapes_check),
        p!("relpos.index", "relative position index", relpos_check),
        p!("window.round_trip", "window partition and cyclic shift invert exactly", window_check),
        p!("audit.grid", "closed-form parameter count equals the instantiated walk", audit_grid_check),
        p!("cost.targets", "preset cost within 5% of the published columns", cost_check),
        p!("checkpoint.round_trip", "checkpoint bytes round trip and detect corruption", checkpoint_check),
        p!("determinism.forward", "forward pass is bit-deterministic", determinism_check),
    ]
}

/// Runs every property whose name matches the glob `filter` (all when
/// `None`). A filter that is not a valid pattern matches nothing.
pub fn run(filter: Option<&str>, ctx: &Context) -> Vec<Outcome> {
    let pattern = filter.map(glob::Pattern::new);
    registry()
        .into_iter()
        .filter(|p| match &pattern {
            None => true,
            Some(Ok(pat)) => pat.matches(p.name),
            Some(Err(_)) => false,
        })
        .map(|p| {
            let result = std::panic::catch_unwind(|| (p.check)(ctx))
                .unwrap_or_else(|_| Err("check panicked".into()));
            let (passed, detail) = match result {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Outcome {
                name: p.name,
                passed,
                detail,
            }
        })
        .collect()
}
