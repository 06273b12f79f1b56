//! The miniature dual encoder: a patch-transformer image branch and a
//! token-transformer text branch sharing one embedding space, with optional
//! learnable prompt tokens injected into the first layers of each branch.

mod checkpoint;
mod config;
mod encoder;
mod params;
pub mod pretrain;

pub use checkpoint::{
    load_checkpoint, load_prompts, save_checkpoint, save_prompts, CheckpointError,
};
pub use config::{ConfigError, ModelConfig};
pub use encoder::{patchify, FeatureStack};
pub use params::{ParamStore, ParamVars};

use crate::tensor::{Data, Tape, TensorError, Var};
use params::{init_matrix, init_tokens, ones, zeros_vec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model is frozen; parameter updates are rejected")]
    Frozen,
    #[error("training failed: {0}")]
    TrainingFailed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An RGB image as a `[3, S, S]` tensor with values in roughly `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Data,
}

impl Image {
    pub fn new(pixels: Data) -> Self {
        assert_eq!(pixels.shape.len(), 3, "image must be rank-3 [3, S, S]");
        Image { pixels }
    }

    pub fn size(&self) -> usize {
        self.pixels.shape[1]
    }
}

/// Learnable visual and textual prompt tokens. One independent token block
/// per injected layer (the first `prompt_depth` layers of each branch).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// Per injected layer, a `[K, d]` block of visual tokens.
    pub visual: Vec<Data>,
    /// Per injected layer, a `[L, d]` block of textual tokens.
    pub textual: Vec<Data>,
}

impl PromptSet {
    pub fn init(config: &ModelConfig, k: usize, l: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = config.prompt_depth;
        PromptSet {
            visual: (0..depth).map(|_| init_tokens(&mut rng, k, config.embed_dim)).collect(),
            textual: (0..depth).map(|_| init_tokens(&mut rng, l, config.embed_dim)).collect(),
        }
    }

    pub fn empty(config: &ModelConfig) -> Self {
        PromptSet::init(config, 0, 0, 0)
    }

    pub fn visual_len(&self) -> usize {
        self.visual.first().map_or(0, |d| d.rows())
    }

    pub fn textual_len(&self) -> usize {
        self.textual.first().map_or(0, |d| d.rows())
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> PromptVars<'t> {
        PromptVars {
            visual: self.visual.iter().map(|d| tape.leaf(d.clone())).collect(),
            textual: self.textual.iter().map(|d| tape.leaf(d.clone())).collect(),
        }
    }

    /// Ordered (name, tensor) view, used by the optimizer and checkpoints.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (String, &mut Data)> {
        self.visual
            .iter_mut()
            .enumerate()
            .map(|(i, d)| (format!("prompt.visual{i}"), d))
            .chain(
                self.textual
                    .iter_mut()
                    .enumerate()
                    .map(|(i, d)| (format!("prompt.textual{i}"), d)),
            )
    }
}

/// Tape leaves for a prompt set, so gradients can reach the tokens.
pub struct PromptVars<'t> {
    pub visual: Vec<Var<'t>>,
    pub textual: Vec<Var<'t>>,
}

impl<'t> PromptVars<'t> {
    pub fn visual_len(&self) -> usize {
        self.visual.first().map_or(0, |v| v.value().rows())
    }

    pub fn textual_len(&self) -> usize {
        self.textual.first().map_or(0, |v| v.value().rows())
    }
}

/// The dual encoder. Once frozen it serves as the immutable teacher.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub params: ParamStore,
    frozen: bool,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut params = ParamStore::new();

        params.insert("img.patch_w", init_matrix(&mut rng, config.patch_dim(), d));
        params.insert("img.patch_b", zeros_vec(d));
        params.insert("img.cls", init_tokens(&mut rng, 1, d));
        params.insert("img.pos", init_tokens(&mut rng, 1 + config.n_patches(), d));
        Self::insert_branch_layers(&mut params, &mut rng, &config, "img");

        params.insert("txt.tok", init_tokens(&mut rng, config.vocab_size, d));
        params.insert("txt.pos", init_tokens(&mut rng, config.max_text_len, d));
        Self::insert_branch_layers(&mut params, &mut rng, &config, "txt");

        DualEncoder { config, params, frozen: false }
    }

    fn insert_branch_layers(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &ModelConfig,
        branch: &str,
    ) {
        let d = config.embed_dim;
        let h = config.mlp_hidden();
        for l in 0..config.layers {
            let p = format!("{branch}.l{l}");
            params.insert(&format!("{p}.ln1_g"), ones(d));
            params.insert(&format!("{p}.ln1_b"), zeros_vec(d));
            params.insert(&format!("{p}.wq"), init_matrix(rng, d, d));
            params.insert(&format!("{p}.bq"), zeros_vec(d));
            params.insert(&format!("{p}.wk"), init_matrix(rng, d, d));
            params.insert(&format!("{p}.bk"), zeros_vec(d));
            params.insert(&format!("{p}.wv"), init_matrix(rng, d, d));
            params.insert(&format!("{p}.bv"), zeros_vec(d));
            params.insert(&format!("{p}.wo"), init_matrix(rng, d, d));
            params.insert(&format!("{p}.bo"), zeros_vec(d));
            params.insert(&format!("{p}.ln2_g"), ones(d));
            params.insert(&format!("{p}.ln2_b"), zeros_vec(d));
            params.insert(&format!("{p}.mlp_w1"), init_matrix(rng, d, h));
            params.insert(&format!("{p}.mlp_b1"), zeros_vec(h));
            params.insert(&format!("{p}.mlp_w2"), init_matrix(rng, h, d));
            params.insert(&format!("{p}.mlp_b2"), zeros_vec(d));
        }
        params.insert(&format!("{branch}.lnf_g"), ones(d));
        params.insert(&format!("{branch}.lnf_b"), zeros_vec(d));
        params.insert(&format!("{branch}.proj"), init_matrix(rng, d, d));
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Mutable access to the parameters for optimizer updates. Rejected once
    /// the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore, ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        Ok(&mut self.params)
    }

    /// Class prediction: softmax over cosine similarities against the rows
    /// of the class-embedding matrix, at the model temperature.
    pub fn predict<'t>(
        &self,
        z: Var<'t>,
        class_embeds: Var<'t>,
    ) -> Result<Var<'t>, ModelError> {
        let n = class_embeds.value().rows();
        let sims = z.cos_sim_rows(class_embeds)?;
        Ok(sims.as_row().softmax_rows(self.config.temperature)?.reshape(vec![n]))
    }
}

/// Mean cross-entropy of predicted class distributions against labels.
pub fn cross_entropy_loss<'t>(
    predictions: &[Var<'t>],
    labels: &[usize],
) -> Result<Var<'t>, ModelError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(ModelError::InvalidInput(format!(
            "cross_entropy_loss needs matching nonempty batches, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (p, &y) in predictions.iter().zip(labels) {
        let n = p.value().len();
        if y >= n {
            return Err(ModelError::InvalidInput(format!(
                "label {y} out of range for {n} classes"
            )));
        }
        let log_p = p.clamp_min(1e-12).log().as_row().slice_cols(y, 1).reshape(vec![]);
        total = Some(match total {
            Some(t) => t.add(log_p),
            None => log_p,
        });
    }
    Ok(total.unwrap().scale(-1.0 / predictions.len() as f64))
}
