//! Weight constructors showing that key and value projections are
//! redundant: `(X W_q)(X W_k)^T = (X Wbar) X^T` with `Wbar = W_q W_k^T`, and
//! `A (X W_v) W_o = A X W` with `W = W_v W_o`.

use crate::attention::config::{AttentionConfig, Variant};
use crate::attention::params::{AttentionParams, Linear};
use crate::error::{shape_err, LslaError, Result};
use crate::numcore::{ops, Tensor};

fn square_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<usize> {
    match (a.shape(), b.shape()) {
        ([r1, c1], [r2, c2]) if r1 == c1 && r2 == c2 && r1 == r2 => Ok(*r1),
        (sa, sb) => Err(shape_err(format!(
            "{what} needs two equal square matrices, got {sa:?} and {sb:?}"
        ))),
    }
}

/// `W_q W_k^T`.
pub fn construct_equivalent_qbar(w_q: &Tensor, w_k: &Tensor) -> Result<Tensor> {
    square_pair(w_q, w_k, "construct_equivalent_qbar")?;
    ops::matmul(w_q, &w_k.transpose2()?)
}

/// `W_v W_o`.
pub fn fuse_vo(w_v: &Tensor, w_o: &Tensor) -> Result<Tensor> {
    square_pair(w_v, w_o, "fuse_vo")?;
    ops::matmul(w_v, w_o)
}

/// Rewrites a bias-free QKV (or QXV) layer as a QXX layer computing the
/// same function. Exact for a single head; with several heads the raw
/// input is split per head and the identity no longer holds.
pub fn qkv_as_qxx(
    cfg: &AttentionConfig,
    params: &AttentionParams,
) -> Result<(AttentionConfig, AttentionParams)> {
    params.validate(cfg)?;
    let nonzero_bias = params
        .named_tensors()
        .iter()
        .any(|(name, t)| name.ends_with(".bias") && t.data().iter().any(|&v| v != 0.0));
    if nonzero_bias {
        return Err(LslaError::Config("projection biases must be zero".into()));
    }
    let d = cfg.dim;
    let q_weight = match (&params.k, cfg.variant) {
        (Some(k), Variant::Qkv) => construct_equivalent_qbar(&params.q.weight, &k.weight)?,
        _ => params.q.weight.clone(),
    };
    let proj_weight = match (&params.v, &params.proj) {
        (Some(v), Some(o)) => Some(fuse_vo(&v.weight, &o.weight)?),
        (Some(v), None) => Some(v.weight.clone()),
        (None, Some(o)) => Some(o.weight.clone()),
        (None, None) => None,
    };
    let out_cfg = AttentionConfig {
        variant: Variant::Qxx,
        final_projection: proj_weight.is_some(),
        ..*cfg
    };
    let out = AttentionParams {
        q: Linear { weight: q_weight, bias: Tensor::zeros(&[d]) },
        k: None,
        v: None,
        proj: proj_weight.map(|weight| Linear { weight, bias: Tensor::zeros(&[d]) }),
        dynamic_scale: params.dynamic_scale.clone(),
        inner_bias: params.inner_bias.clone(),
        outer_bias: params.outer_bias.clone(),
    };
    out.validate(&out_cfg)?;
    Ok((out_cfg, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::{normal_tensor, seeded};

    #[test]
    fn identities() {
        let mut rng = seeded(1);
        let w = normal_tensor(&mut rng, &[4, 4], 1.0);
        let i = Tensor::identity(4);
        assert_eq!(construct_equivalent_qbar(&i, &i).unwrap(), i);
        assert_eq!(construct_equivalent_qbar(&w, &i).unwrap(), w);
        assert_eq!(fuse_vo(&i, &w).unwrap(), w);
        assert_eq!(fuse_vo(&w, &i).unwrap(), w);
    }

    #[test]
    fn shape_mismatch() {
        assert!(fuse_vo(&Tensor::zeros(&[3, 3]), &Tensor::zeros(&[4, 4])).is_err());
        assert!(construct_equivalent_qbar(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3, 4])).is_err());
    }
}
