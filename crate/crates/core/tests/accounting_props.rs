use lsla_core::accounting::*;
use lsla_core::attention::{AttentionConfig, AttentionParams, BiasParamMode, ScaleMode, Variant};
use lsla_core::model::{AttentionTemplate, Model, ModelConfig, StageConfig};
use lsla_core::numcore::Tensor;
use proptest::prelude::*;

fn with_attention(cfg: &ModelConfig, variant: Variant, proj: bool, mode: BiasParamMode) -> ModelConfig {
    let mut c = cfg.clone();
    c.attention.variant = variant;
    c.attention.final_projection = proj;
    c.attention.bias_mode = mode;
    c
}

fn within(actual: u64, target: f64, tol: f64) -> bool {
    (actual as f64 / target - 1.0).abs() <= tol
}

#[test]
fn preset_costs_match_published_columns() {
    let base = ModelConfig::vit_lsla_t();
    let cases = [
        (Variant::Qxx, true, 18.9e6, 3.5e9),
        (Variant::Qxx, false, 16.4e6, 3.1e9),
        (Variant::Qkv, true, 24.0e6, 4.4e9),
        (Variant::Qxv, false, 18.9e6, 3.5e9),
    ];
    for (v, p, params, flops) in cases {
        let cfg = with_attention(&base, v, p, BiasParamMode::Direct);
        let r = cost_report(&cfg).unwrap();
        assert!(within(r.total_params, params, 0.05), "{v} {p}: {}", r.total_params);
        assert!(within(r.total_flops, flops, 0.05), "{v} {p}: {}", r.total_flops);
        let t = paper_target("vit-lsla-t", &cfg.attention).unwrap();
        let (dp, df) = t.deviation(&r);
        assert!(dp.abs() <= 0.05 && df.abs() <= 0.05);
    }
    assert!(paper_target("tiny", &base.attention).is_none());
    assert!(paper_target("vit-lsla-t", &AttentionTemplate::lsa()).is_none());
}

#[test]
fn variant_ordering() {
    for mode in [BiasParamMode::Direct, BiasParamMode::RelativeTable] {
        for base in [ModelConfig::vit_lsla_t(), ModelConfig::tiny()] {
            let c = |v, p| cost_report(&with_attention(&base, v, p, mode)).unwrap();
            let (np, qxx, qxv, qkv) = (c(Variant::Qxx, false), c(Variant::Qxx, true), c(Variant::Qxv, false), c(Variant::Qkv, true));
            assert!(np.total_params < qxx.total_params);
            assert_eq!((qxx.total_params, qxx.total_flops), (qxv.total_params, qxv.total_flops));
            assert!(qxx.total_params < qkv.total_params && qxx.total_flops < qkv.total_flops);
        }
    }
}

#[test]
fn single_linear_layer_count() {
    let cfg = AttentionConfig {
        final_projection: false,
        ..AttentionConfig::plain(4, 1, 1, Variant::Qxx)
    };
    assert_eq!(AttentionParams::zeros(&cfg).unwrap().numel(), 20);
    let model = ModelConfig {
        stages: std::array::from_fn(|i| StageConfig { depth: 1, dim: 4 << i, heads: 1 }),
        attention: AttentionTemplate::from_config(&cfg),
        ..ModelConfig::tiny()
    };
    assert_eq!(cost_report(&model).unwrap().row("stages.0.blocks.0.attn").unwrap().params, 20);
}

#[test]
fn audit_default_and_ablation_grid() {
    for base in [ModelConfig::vit_lsla_t(), ModelConfig::tiny(), ModelConfig::preset("micro").unwrap()] {
        for v in [Variant::Qkv, Variant::Qxv, Variant::Qxx] {
            for p in [true, false] {
                for mode in [BiasParamMode::Direct, BiasParamMode::RelativeTable] {
                    let cfg = with_attention(&base, v, p, mode);
                    let model = Model::new(cfg.clone(), 0).unwrap();
                    let audit = audit_params(&cfg, &model.params).unwrap();
                    assert_eq!(audit.walked_total, model.params.total_numel() as u64);
                    assert_eq!(audit.closed_form_total, count_params(&cfg).unwrap());
                }
            }
        }
    }
}

#[test]
fn audit_bias_flags() {
    let base = ModelConfig::tiny();
    for (inner, outer, scale) in [(false, false, ScaleMode::Fixed), (true, false, ScaleMode::Fixed), (false, true, ScaleMode::Dynamic)] {
        let mut cfg = base.clone();
        cfg.attention.inner_bias = inner;
        cfg.attention.outer_bias = outer;
        cfg.attention.scale_mode = scale;
        let model = Model::new(cfg.clone(), 1).unwrap();
        audit_params(&cfg, &model.params).unwrap();
    }
}

#[test]
fn removing_outer_bias_drops_h_n_squared_per_block() {
    let cfg = ModelConfig::vit_lsla_t();
    let mut no_outer = cfg.clone();
    no_outer.attention.outer_bias = false;
    let expected: u64 = cfg
        .geometry()
        .unwrap()
        .iter()
        .map(|g| (g.depth * g.heads * g.window.pow(4)) as u64)
        .sum();
    let closed = count_params(&cfg).unwrap() - count_params(&no_outer).unwrap();
    assert_eq!(closed, expected);
    let walked = Model::new(cfg, 0).unwrap().params.total_numel() - Model::new(no_outer, 0).unwrap().params.total_numel();
    assert_eq!(walked as u64, expected);
}

#[test]
fn audit_names_offending_component() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(cfg.clone(), 2).unwrap();
    model.params.remove("stages.1.blocks.0.mlp.fc1.bias");
    model.params.insert("extra.weight", Tensor::zeros(&[3])).unwrap();
    let err = audit_params(&cfg, &model.params).unwrap_err().to_string();
    assert!(err.contains("stages.1.blocks.0.mlp"), "{err}");
    assert!(err.contains("extra"), "{err}");
}

#[test]
fn report_formats() {
    let r = cost_report(&ModelConfig::tiny()).unwrap();
    assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
    assert_eq!(r.total_flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "component,params,flops");
    assert_eq!(lines[1].split(',').next(), Some("stem"));
    assert_eq!(*lines.last().unwrap(), format!("total,{},{}", r.total_params, r.total_flops));
    assert_eq!(lines.len(), r.rows.len() + 2);
    assert!(r.to_table().contains("1 MAC = 1 FLOP"));
    let totals = stage_totals(&r);
    assert_eq!(totals.values().map(|v| v.0).sum::<u64>(), r.total_params);
}

proptest! {
    #[test]
    fn flops_monotone(depth in 1usize..4, extra in 1usize..3, width in 1usize..4, stage in 0usize..4) {
        let mut cfg = ModelConfig::tiny();
        cfg.stages = std::array::from_fn(|i| StageConfig { depth, dim: (8 * width) << i, heads: 1 << i });
        let base = cost_report(&cfg).unwrap().total_flops;
        let mut deeper = cfg.clone();
        deeper.stages[stage].depth += extra;
        prop_assert!(cost_report(&deeper).unwrap().total_flops > base);
        let mut wider = cfg.clone();
        wider.stages = std::array::from_fn(|i| StageConfig { dim: (8 * (width + 1)) << i, ..cfg.stages[i] });
        prop_assert!(cost_report(&wider).unwrap().total_flops > base);
        prop_assert!(count_flops(&cfg, 112).unwrap() > base);
    }
}
