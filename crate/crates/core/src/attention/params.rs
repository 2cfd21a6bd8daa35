use crate::attention::config::{AttentionConfig, BiasParamMode};
use crate::attention::relpos::relative_position_index;
use crate::error::{LslaError, Result};
use crate::numcore::rng::{trunc_normal_tensor, SeededRng};
use crate::numcore::{Bound, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Fully-connected layer `y = x W + b`, `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[din, dout]),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn init(rng: &mut SeededRng, din: usize, dout: usize) -> Self {
        Self {
            weight: trunc_normal_tensor(rng, &[din, dout], INIT_STD),
            bias: Tensor::zeros(&[dout]),
        }
    }
}

/// Positional bias storage; both forms resolve to `[H, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub enum PosBias {
    Direct(Tensor),
    Table(Tensor),
}

impl PosBias {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let (h, n, m) = (cfg.heads, cfg.tokens(), cfg.window);
        match cfg.bias_mode {
            BiasParamMode::Direct => PosBias::Direct(Tensor::zeros(&[h, n, n])),
            BiasParamMode::RelativeTable => PosBias::Table(Tensor::zeros(&[h, (2 * m - 1).pow(2)])),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            PosBias::Direct(t) | PosBias::Table(t) => t,
        }
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        match self {
            PosBias::Direct(t) | PosBias::Table(t) => t,
        }
    }

    /// Expanded `[H, N, N]` values.
    pub fn expanded(&self, cfg: &AttentionConfig) -> Tensor {
        match self {
            PosBias::Direct(t) => t.clone(),
            PosBias::Table(t) => {
                let idx = relative_position_index(cfg.window);
                let n = cfg.tokens();
                let len = idx.table_len();
                Tensor::from_fn(&[cfg.heads, n, n], |i| {
                    let (h, qk) = (i / (n * n), i % (n * n));
                    t.data()[h * len + idx.as_slice()[qk]]
                })
            }
        }
    }

    fn suffix(&self) -> &'static str {
        match self {
            PosBias::Direct(_) => "",
            PosBias::Table(_) => "_table",
        }
    }
}

/// Learnable tensors of one attention layer. Which fields are present is
/// fixed by the [`AttentionConfig`] they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Option<Linear>,
    pub v: Option<Linear>,
    pub proj: Option<Linear>,
    /// `[N, N]`, shared by all heads.
    pub dynamic_scale: Option<Tensor>,
    pub inner_bias: Option<PosBias>,
    pub outer_bias: Option<PosBias>,
}

impl AttentionParams {
    /// Truncated-normal projections, zero biases, dynamic scale at the
    /// fixed-scale value `1/sqrt(head_dim)`, zero positional biases.
    pub fn init(cfg: &AttentionConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let q = Linear::init(rng, d, d);
        let k = cfg.has_keys().then(|| Linear::init(rng, d, d));
        let v = cfg.has_values().then(|| Linear::init(rng, d, d));
        let proj = cfg.final_projection.then(|| Linear::init(rng, d, d));
        Ok(Self::assemble(cfg, q, k, v, proj))
    }

    /// Every tensor zero except the dynamic scale, which starts at
    /// `1/sqrt(head_dim)`.
    pub fn zeros(cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let lin = || Linear::zeros(d, d);
        Ok(Self::assemble(
            cfg,
            lin(),
            cfg.has_keys().then(lin),
            cfg.has_values().then(lin),
            cfg.final_projection.then(lin),
        ))
    }

    fn assemble(
        cfg: &AttentionConfig,
        q: Linear,
        k: Option<Linear>,
        v: Option<Linear>,
        proj: Option<Linear>,
    ) -> Self {
        let n = cfg.tokens();
        Self {
            q,
            k,
            v,
            proj,
            dynamic_scale: (cfg.scale_mode == super::ScaleMode::Dynamic)
                .then(|| Tensor::full(&[n, n], cfg.fixed_scale())),
            inner_bias: cfg.inner_bias.then(|| PosBias::zeros(cfg)),
            outer_bias: cfg.outer_bias.then(|| PosBias::zeros(cfg)),
        }
    }

    /// `(relative name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let layers = [
            ("q", Some(&self.q)),
            ("k", self.k.as_ref()),
            ("v", self.v.as_ref()),
            ("proj", self.proj.as_ref()),
        ];
        for (name, l) in layers {
            if let Some(l) = l {
                out.push((format!("{name}.weight"), &l.weight));
                out.push((format!("{name}.bias"), &l.bias));
            }
        }
        if let Some(ds) = &self.dynamic_scale {
            out.push(("dynamic_scale".into(), ds));
        }
        if let Some(b) = &self.inner_bias {
            out.push((format!("inner_bias{}", b.suffix()), b.tensor()));
        }
        if let Some(b) = &self.outer_bias {
            out.push((format!("outer_bias{}", b.suffix()), b.tensor()));
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, t) in self.named_tensors() {
            store.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_store(cfg: &AttentionConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        p.load_from(store, prefix)?;
        Ok(p)
    }

    fn load_from(&mut self, store: &ParamStore, prefix: &str) -> Result<()> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let src = store.get(&format!("{prefix}{name}"))?;
            let dst = self.tensor_mut(&name).expect("name came from named_tensors");
            if src.shape() != dst.shape() {
                return Err(LslaError::ParamMismatch(format!(
                    "{prefix}{name}: expected shape {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, part) = name.split_once('.').unwrap_or((name, ""));
        let lin = match layer {
            "q" => Some(&mut self.q),
            "k" => self.k.as_mut(),
            "v" => self.v.as_mut(),
            "proj" => self.proj.as_mut(),
            "dynamic_scale" => return self.dynamic_scale.as_mut(),
            "inner_bias" | "inner_bias_table" => return self.inner_bias.as_mut().map(PosBias::tensor_mut),
            "outer_bias" | "outer_bias_table" => return self.outer_bias.as_mut().map(PosBias::tensor_mut),
            _ => None,
        }?;
        match part {
            "weight" => Some(&mut lin.weight),
            "bias" => Some(&mut lin.bias),
            _ => None,
        }
    }

    /// Checks that the present tensors match `cfg` in kind and shape.
    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let expected = Self::zeros(cfg)?;
        let mine = self.named_tensors();
        let theirs = expected.named_tensors();
        let describe = |v: &[(String, &Tensor)]| -> Vec<(String, Vec<usize>)> {
            v.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
        };
        if describe(&mine) != describe(&theirs) {
            return Err(LslaError::ParamMismatch(format!(
                "attention parameters {:?} do not match config (expected {:?})",
                describe(&mine),
                describe(&theirs)
            )));
        }
        Ok(())
    }

    pub fn store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        self.insert_into(&mut s, "")?;
        Ok(s)
    }
}

/// Tape handles for an attention layer's parameters.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: Option<(Var, Var)>,
    pub v: Option<(Var, Var)>,
    pub proj: Option<(Var, Var)>,
    pub dynamic_scale: Option<Var>,
    pub inner_bias: Option<BiasVar>,
    pub outer_bias: Option<BiasVar>,
}

#[derive(Clone, Copy, Debug)]
pub enum BiasVar {
    Direct(Var),
    Table(Var),
}

impl AttentionVars {
    /// Looks up `{prefix}q.weight` and friends in a bound store.
    pub fn from_bound(cfg: &AttentionConfig, bound: &Bound, prefix: &str) -> Result<Self> {
        let lin = |name: &str| -> Result<(Var, Var)> {
            Ok((
                bound.get(&format!("{prefix}{name}.weight"))?,
                bound.get(&format!("{prefix}{name}.bias"))?,
            ))
        };
        let bias = |name: &str| -> Result<BiasVar> {
            Ok(match cfg.bias_mode {
                BiasParamMode::Direct => BiasVar::Direct(bound.get(&format!("{prefix}{name}"))?),
                BiasParamMode::RelativeTable => BiasVar::Table(bound.get(&format!("{prefix}{name}_table"))?),
            })
        };
        Ok(Self {
            q: lin("q")?,
            k: cfg.has_keys().then(|| lin("k")).transpose()?,
            v: cfg.has_values().then(|| lin("v")).transpose()?,
            proj: cfg.final_projection.then(|| lin("proj")).transpose()?,
            dynamic_scale: (cfg.scale_mode == super::ScaleMode::Dynamic)
                .then(|| bound.get(&format!("{prefix}dynamic_scale")))
                .transpose()?,
            inner_bias: cfg.inner_bias.then(|| bias("inner_bias")).transpose()?,
            outer_bias: cfg.outer_bias.then(|| bias("outer_bias")).transpose()?,
        })
    }

    /// Binds `params` as differentiable leaves.
    pub fn bind(cfg: &AttentionConfig, params: &AttentionParams, tape: &mut Tape) -> Result<Self> {
        params.validate(cfg)?;
        let bound = params.store()?.bind(tape);
        Self::from_bound(cfg, &bound, "")
    }
}
