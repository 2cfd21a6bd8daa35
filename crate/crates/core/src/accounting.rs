//! Closed-form parameter and FLOP counts per component.
//!
//! Convention: one multiply-accumulate is one FLOP; elementwise work
//! (bias adds, scaling, softmax, normalization, GELU, residual adds) is one
//! FLOP per element. The shift mask is not counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;

use crate::attention::{ScaleMode, Variant};
use crate::error::{LslaError, Result};
use crate::model::{AttentionTemplate, ModelConfig};
use crate::numcore::ParamStore;

pub const CONVENTION: &str =
    "1 MAC = 1 FLOP; elementwise ops (bias, scale, softmax, norm, GELU, residual) = 1 FLOP per element";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub component: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub convention: String,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>) -> Self {
        Self {
            total_params: rows.iter().map(|r| r.params).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            rows,
            convention: CONVENTION.into(),
        }
    }

    pub fn row(&self, component: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    /// `component,params,flops` with a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,params,flops\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.component, r.params, r.flops).expect("String write");
        }
        writeln!(s, "total,{},{}", self.total_params, self.total_flops).expect("String write");
        s
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.component.len()).max().unwrap_or(0).max(9);
        let mut s = String::new();
        let line = |s: &mut String, c: &str, p: String, f: String| {
            writeln!(s, "{c:<width$}  {p:>12}  {f:>15}").expect("String write");
        };
        line(&mut s, "component", "params".into(), "flops".into());
        for r in &self.rows {
            line(&mut s, &r.component, r.params.to_string(), r.flops.to_string());
        }
        line(&mut s, "total", self.total_params.to_string(), self.total_flops.to_string());
        writeln!(
            s,
            "total: {:.2}M params, {:.2}G FLOPs ({})",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9,
            self.convention
        )
        .expect("String write");
        s
    }
}

fn conv_cost(out_res: u64, cin: u64, cout: u64) -> (u64, u64) {
    let positions = out_res * out_res;
    // kernel + bias; MACs + bias add
    (9 * cin * cout + cout, positions * (9 * cin * cout + cout))
}

fn norm_cost(d: u64, positions: u64) -> (u64, u64) {
    (2 * d, positions * d)
}

/// Per-component costs of `cfg` at its configured image size.
pub fn cost_report(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let mut rows = Vec::new();
    let mut row = |component: String, params: u64, flops: u64| {
        rows.push(CostRow {
            component,
            params,
            flops,
        })
    };

    let (cin, mid, d0) = (cfg.in_channels as u64, cfg.stem_mid_channels as u64, cfg.stages[0].dim as u64);
    let r1 = cfg.image_size.div_ceil(2) as u64;
    let r2 = r1.div_ceil(2);
    let (c1p, c1f) = conv_cost(r1, cin, mid);
    let (n1p, n1f) = norm_cost(mid, r1 * r1);
    let gelu = r1 * r1 * mid;
    let (c2p, c2f) = conv_cost(r2, mid, d0);
    let (n2p, n2f) = norm_cost(d0, r2 * r2);
    row("stem".into(), c1p + n1p + c2p + n2p, c1f + n1f + gelu + c2f + n2f);

    let a = &cfg.attention;
    for (s, g) in geometry.iter().enumerate() {
        let acfg = cfg.attention_config(g);
        let (d, h, n) = (g.dim as u64, g.heads as u64, acfg.tokens() as u64);
        let tokens = (g.resolution * g.resolution) as u64;
        let nw = g.windows_per_image() as u64;
        let hidden = cfg.mlp_hidden(g.dim) as u64;
        let projections =
            1 + u64::from(acfg.has_keys()) + u64::from(acfg.has_values()) + u64::from(a.final_projection);
        let bias = acfg.bias_numel() as u64;
        let dynamic = a.scale_mode == ScaleMode::Dynamic;

        let attn_params = projections * (d * d + d)
            + if dynamic { n * n } else { 0 }
            + bias * (u64::from(a.inner_bias) + u64::from(a.outer_bias));
        let per_head_pair = h * n * n;
        let per_window = projections * (n * d * d + n * d)
            + 2 * n * n * d // scores and weighted sum, all heads
            + per_head_pair // scale
            + per_head_pair * u64::from(a.inner_bias)
            + per_head_pair // softmax
            + per_head_pair * u64::from(a.outer_bias);
        let attn_flops = nw * per_window;
        let mlp_params = d * hidden + hidden + hidden * d + d;
        let mlp_flops = tokens * (d * hidden + hidden) + tokens * hidden + tokens * (hidden * d + d);
        for b in 0..g.depth {
            let p = format!("stages.{s}.blocks.{b}");
            row(format!("{p}.norm"), 4 * d, 2 * tokens * d + 2 * tokens * d);
            row(format!("{p}.attn"), attn_params, attn_flops);
            row(format!("{p}.mlp"), mlp_params, mlp_flops);
        }
        if let Some(next) = geometry.get(s + 1) {
            let r = next.resolution as u64;
            let (cp, cf) = conv_cost(r, d, next.dim as u64);
            let (np, nf) = norm_cost(next.dim as u64, r * r);
            row(format!("stages.{s}.merge"), cp + np, cf + nf);
        }
    }

    let last = geometry[geometry.len() - 1];
    let (d, c) = (last.dim as u64, cfg.num_classes as u64);
    let tokens = (last.resolution * last.resolution) as u64;
    row("head".into(), 2 * d + d * c + c, tokens * d + d + d * c + c);
    Ok(CostReport::from_rows(rows))
}

pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(cost_report(cfg)?.total_params)
}

/// FLOPs of one forward pass on an `image_size` square image.
pub fn count_flops(cfg: &ModelConfig, image_size: usize) -> Result<u64> {
    let cfg = ModelConfig {
        image_size,
        ..cfg.clone()
    };
    Ok(cost_report(&cfg)?.total_flops)
}

/// Report component a parameter name belongs to.
pub fn component_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["stages", s, "blocks", b, part, ..] => {
            let kind = match *part {
                "norm1" | "norm2" => "norm",
                other => other,
            };
            format!("stages.{s}.blocks.{b}.{kind}")
        }
        ["stages", s, "merge", ..] => format!("stages.{s}.merge"),
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub component: String,
    pub closed_form: u64,
    pub walked: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub closed_form_total: u64,
    pub walked_total: u64,
}

/// Compares the element count of every named tensor in `params`, grouped by
/// component, with the closed-form count for `cfg`.
pub fn audit_params(cfg: &ModelConfig, params: &ParamStore) -> Result<AuditReport> {
    let report = cost_report(cfg)?;
    let mut walked: IndexMap<String, u64> = IndexMap::new();
    for (name, t) in params.iter() {
        *walked.entry(component_of(name)).or_default() += t.numel() as u64;
    }
    let mut rows: Vec<AuditRow> = report
        .rows
        .iter()
        .map(|r| AuditRow {
            component: r.component.clone(),
            closed_form: r.params,
            walked: walked.shift_remove(&r.component).unwrap_or(0),
        })
        .collect();
    rows.extend(walked.into_iter().map(|(component, n)| AuditRow {
        component,
        closed_form: 0,
        walked: n,
    }));
    let audit = AuditReport {
        closed_form_total: rows.iter().map(|r| r.closed_form).sum(),
        walked_total: rows.iter().map(|r| r.walked).sum(),
        rows,
    };
    let bad: Vec<String> = audit
        .rows
        .iter()
        .filter(|r| r.closed_form != r.walked)
        .map(|r| format!("{} (closed form {}, walked {})", r.component, r.closed_form, r.walked))
        .collect();
    if !bad.is_empty() {
        return Err(LslaError::ParamMismatch(format!("audit failed: {}", bad.join("; "))));
    }
    Ok(audit)
}

/// Published cost of a preset/attention combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaperTarget {
    pub label: &'static str,
    pub params_m: f64,
    pub flops_g: f64,
}

impl PaperTarget {
    /// Relative deviations `(params, flops)` of `report` from the target.
    pub fn deviation(&self, report: &CostReport) -> (f64, f64) {
        (
            report.total_params as f64 / (self.params_m * 1e6) - 1.0,
            report.total_flops as f64 / (self.flops_g * 1e9) - 1.0,
        )
    }
}

/// Targets carried by the `vit-lsla-t` preset. QXV is listed in its
/// no-projection form.
pub fn paper_target(preset: &str, a: &AttentionTemplate) -> Option<PaperTarget> {
    if preset != "vit-lsla-t"
        || a.scale_mode != ScaleMode::Dynamic
        || !a.inner_bias
        || !a.outer_bias
    {
        return None;
    }
    let t = |label, params_m, flops_g| PaperTarget {
        label,
        params_m,
        flops_g,
    };
    match (a.variant, a.final_projection) {
        (Variant::Qxx, true) => Some(t("ViT-LSLA (QXX)", 18.9, 3.5)),
        (Variant::Qxx, false) => Some(t("ViT-LSLA (QXX, NP)", 16.4, 3.1)),
        (Variant::Qxv, false) => Some(t("ViT-LSLA (QXV)", 18.9, 3.5)),
        (Variant::Qkv, true) => Some(t("ViT-LSLA (QKV)", 24.0, 4.4)),
        _ => None,
    }
}

/// Totals per top-level group (`stem`, `stages.s`, `head`).
pub fn stage_totals(report: &CostReport) -> BTreeMap<String, (u64, u64)> {
    let mut out = BTreeMap::new();
    for r in &report.rows {
        let key = match r.component.split('.').collect::<Vec<_>>().as_slice() {
            ["stages", s, ..] => format!("stages.{s}"),
            _ => r.component.clone(),
        };
        let e = out.entry(key).or_insert((0, 0));
        e.0 += r.params;
        e.1 += r.flops;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_names() {
        assert_eq!(component_of("stem.conv1.weight"), "stem");
        assert_eq!(component_of("stages.2.blocks.5.attn.q.weight"), "stages.2.blocks.5.attn");
        assert_eq!(component_of("stages.2.blocks.5.norm2.bias"), "stages.2.blocks.5.norm");
        assert_eq!(component_of("stages.0.merge.conv.weight"), "stages.0.merge");
        assert_eq!(component_of("head.fc.bias"), "head");
    }

    #[test]
    fn conv_and_norm_counts() {
        assert_eq!(conv_cost(2, 1, 1), (10, 40));
        assert_eq!(norm_cost(4, 3), (8, 12));
    }
}
