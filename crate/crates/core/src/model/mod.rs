//! The hierarchical ViT-LSLA backbone: convolutional stem, four stages of
//! windowed attention blocks joined by convolutional patch merging, and a
//! pooled linear head. Activations are NHWC.

mod checkpoint;
mod config;
mod forward;
mod layout;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{AttentionTemplate, ModelConfig, StageConfig, StageGeometry, NUM_STAGES, PRESETS};
pub use forward::{block_forward, model_forward_vars, patch_merge, stem_forward, AttentionInput};
pub use layout::{init_params, layout, Init, ParamSpec};

use crate::attention::{bias_profile_in, AttentionParams, BiasProfile};
use crate::error::{LslaError, Result};
use crate::numcore::rng::seeded;
use crate::numcore::{ParamStore, Tape, Tensor};

/// A configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, &mut seeded(seed))?;
        Ok(Self { config, params })
    }

    /// Checks that `params` holds exactly the tensors `config` calls for.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let specs = layout(&config)?;
        if specs.len() != params.len() {
            return Err(LslaError::ParamMismatch(format!(
                "config needs {} tensors, store has {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params.get(&spec.name).map_err(|_| {
                LslaError::ParamMismatch(format!("missing parameter {}", spec.name))
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(LslaError::ParamMismatch(format!(
                    "{}: expected shape {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Logits `[b, classes]` for `images: [b, H, W, C]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(images);
        let (logits, _) = model_forward_vars(&mut tape, &self.config, &bound, x, None)?;
        Ok(tape.tensor(logits))
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(images)?;
        let classes = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                // first maximum wins ties
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Attention parameters of one block.
    pub fn attention_params(&self, stage: usize, block: usize) -> Result<AttentionParams> {
        let g = self.config.geometry()?;
        let g = g
            .get(stage)
            .filter(|g| block < g.depth)
            .ok_or_else(|| LslaError::IndexOutOfRange(format!("stage {stage} block {block}")))?;
        let acfg = self.config.attention_config(g);
        AttentionParams::from_store(&acfg, &self.params, &format!("stages.{stage}.blocks.{block}.attn."))
    }

    /// Bias/attention profile of `(stage, block)` for one query of one head
    /// in window `window`, counting windows batch-major across `images`.
    pub fn inspect(
        &self,
        images: &Tensor,
        stage: usize,
        block: usize,
        window: usize,
        query: usize,
        head: usize,
    ) -> Result<BiasProfile> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(images);
        let (_, input) = model_forward_vars(&mut tape, &self.config, &bound, x, Some((stage, block)))?;
        let input = input.expect("probe index was validated");
        let params = self.attention_params(stage, block)?;
        bias_profile_in(
            &input.config,
            &params,
            &tape.tensor(input.windows),
            input.mask.as_ref(),
            window,
            query,
            head,
        )
    }
}
