use crate::attention::{AttentionParams, INIT_STD};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::numcore::rng::{normal_tensor, trunc_normal_tensor, SeededRng};
use crate::numcore::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    TruncNormal(f64),
    /// Conv kernels: normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Builder(Vec<ParamSpec>);

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.weight"), &[d], Init::Ones);
        self.push(format!("{prefix}.bias"), &[d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.weight"), &[din, dout], Init::TruncNormal(INIT_STD));
        self.push(format!("{prefix}.bias"), &[dout], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.push(format!("{prefix}.weight"), &[3, 3, cin, cout], Init::Kaiming { fan_in: 9 * cin });
        self.push(format!("{prefix}.bias"), &[cout], Init::Zeros);
    }
}

/// Every learnable tensor of the model, in canonical order.
pub fn layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let mut b = Builder(Vec::new());
    let d0 = cfg.stages[0].dim;
    b.conv("stem.conv1", cfg.in_channels, cfg.stem_mid_channels);
    b.norm("stem.norm1", cfg.stem_mid_channels);
    b.conv("stem.conv2", cfg.stem_mid_channels, d0);
    b.norm("stem.norm2", d0);
    for (s, g) in geometry.iter().enumerate() {
        let acfg = cfg.attention_config(g);
        let attn = AttentionParams::zeros(&acfg)?;
        for blk in 0..g.depth {
            let p = format!("stages.{s}.blocks.{blk}");
            b.norm(&format!("{p}.norm1"), g.dim);
            for (name, t) in attn.named_tensors() {
                let init = if name.ends_with(".weight") {
                    Init::TruncNormal(INIT_STD)
                } else if name == "dynamic_scale" {
                    Init::Const(acfg.fixed_scale())
                } else {
                    Init::Zeros
                };
                b.push(format!("{p}.attn.{name}"), t.shape(), init);
            }
            b.norm(&format!("{p}.norm2"), g.dim);
            let hidden = cfg.mlp_hidden(g.dim);
            b.linear(&format!("{p}.mlp.fc1"), g.dim, hidden);
            b.linear(&format!("{p}.mlp.fc2"), hidden, g.dim);
        }
        if s + 1 < geometry.len() {
            b.conv(&format!("stages.{s}.merge.conv"), g.dim, geometry[s + 1].dim);
            b.norm(&format!("stages.{s}.merge.norm"), geometry[s + 1].dim);
        }
    }
    let dl = geometry[geometry.len() - 1].dim;
    b.norm("head.norm", dl);
    b.linear("head.fc", dl, cfg.num_classes);
    Ok(b.0)
}

pub fn init_params(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in layout(cfg)? {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
            Init::Const(c) => Tensor::full(&spec.shape, c),
            Init::TruncNormal(std) => trunc_normal_tensor(rng, &spec.shape, std),
            Init::Kaiming { fan_in } => normal_tensor(rng, &spec.shape, (2.0 / fan_in as f64).sqrt()),
        };
        store.insert(spec.name, t)?;
    }
    Ok(store)
}
