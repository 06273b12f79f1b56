//! Forward passes for the image and text branches.
//!
//! Both branches share the same pre-norm transformer block. Prompt tokens,
//! when present, occupy the leading rows of the sequence: fresh tokens are
//! swapped in at each of the first `prompt_depth` layers and the last block's
//! tokens ride along through the remaining layers. Pooling always reads a
//! non-prompt row, so prompts never leak into the pooled feature directly.

use super::{DualEncoder, Image, ModelError, PromptVars};
use crate::tensor::{concat_rows, Data, Tape, Var};

/// Everything one image forward pass produces: per-layer pooled features,
/// the final projected embedding, and per-layer attention maps.
pub struct FeatureStack<'t> {
    /// Class-token feature after each transformer layer, each `[d]`.
    pub layer_feats: Vec<Var<'t>>,
    /// Final projected embedding `[d]`.
    pub embedding: Var<'t>,
    /// Per-layer attention probabilities, each `[heads, t, t]` (values only).
    pub attention: Vec<Data>,
    /// Row index of the class token (= number of prompt tokens in front).
    pub class_row: usize,
}

/// Cut an image into row-major patch vectors, `[n_patches, 3 * p * p]`.
/// Within a patch, values are ordered channel, then pixel row, then column.
pub fn patchify(image: &Image, patch_size: usize) -> Data {
    let s = image.size();
    let grid = s / patch_size;
    let mut values = Vec::with_capacity(grid * grid * 3 * patch_size * patch_size);
    for pr in 0..grid {
        for pc in 0..grid {
            for ch in 0..3 {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        let row = pr * patch_size + y;
                        let col = pc * patch_size + x;
                        values.push(image.pixels.values[(ch * s + row) * s + col]);
                    }
                }
            }
        }
    }
    Data::matrix(grid * grid, 3 * patch_size * patch_size, values)
}

impl DualEncoder {
    /// Encode an image, optionally with visual prompt tokens. Creates fresh
    /// parameter leaves; when several forwards share one tape and parameter
    /// gradients matter, use [`Self::encode_image_with`] instead.
    pub fn encode_image<'t>(
        &self,
        tape: &'t Tape,
        image: &Image,
        prompts: Option<&PromptVars<'t>>,
    ) -> Result<FeatureStack<'t>, ModelError> {
        let vars = self.params.leaves(tape);
        self.encode_image_with(tape, &vars, image, prompts)
    }

    /// Encode an image against an existing set of parameter leaves.
    pub fn encode_image_with<'t>(
        &self,
        tape: &'t Tape,
        vars: &super::ParamVars<'t>,
        image: &Image,
        prompts: Option<&PromptVars<'t>>,
    ) -> Result<FeatureStack<'t>, ModelError> {
        let cfg = &self.config;
        let expect = vec![3, cfg.image_size, cfg.image_size];
        if image.pixels.shape != expect {
            return Err(ModelError::InvalidInput(format!(
                "image shape {:?} does not match configured {:?}",
                image.pixels.shape, expect
            )));
        }
        let patches = tape.leaf(patchify(image, cfg.patch_size));
        let embedded = patches
            .matmul(vars.get("img.patch_w"))
            .add_row_vec(vars.get("img.patch_b"));
        let core = concat_rows(&[vars.get("img.cls"), embedded]).add(vars.get("img.pos"));
        let core_rows = 1 + cfg.n_patches();

        let k = prompts.map_or(0, |p| p.visual_len());
        let blocks: Option<&[Var<'t>]> = prompts.map(|p| p.visual.as_slice());
        let (seq, layer_feats, attention) =
            self.run_branch(vars, "img", core, core_rows, k, blocks);

        let cls = seq.slice_rows(if k > 0 { k } else { 0 }, 1);
        let pooled = cls.layer_norm_rows(vars.get("img.lnf_g"), vars.get("img.lnf_b"));
        let embedding = pooled.matmul(vars.get("img.proj")).reshape(vec![cfg.embed_dim]);

        Ok(FeatureStack { layer_feats, embedding, attention, class_row: k })
    }

    /// Encode a token sequence, optionally with textual prompt tokens.
    /// Pools the final (class) token position.
    pub fn encode_text<'t>(
        &self,
        tape: &'t Tape,
        tokens: &[usize],
        prompts: Option<&PromptVars<'t>>,
    ) -> Result<Var<'t>, ModelError> {
        let vars = self.params.leaves(tape);
        self.encode_text_with(tape, &vars, tokens, prompts)
    }

    /// Encode a token sequence against an existing set of parameter leaves.
    pub fn encode_text_with<'t>(
        &self,
        _tape: &'t Tape,
        vars: &super::ParamVars<'t>,
        tokens: &[usize],
        prompts: Option<&PromptVars<'t>>,
    ) -> Result<Var<'t>, ModelError> {
        let cfg = &self.config;
        if tokens.is_empty() || tokens.len() > cfg.max_text_len {
            return Err(ModelError::InvalidInput(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                cfg.max_text_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::InvalidInput(format!(
                "unknown token id {bad} (vocab size {})",
                cfg.vocab_size
            )));
        }
        let emb = vars.get("txt.tok").gather_rows(tokens);
        let core = emb.add(vars.get("txt.pos").slice_rows(0, tokens.len()));

        let l = prompts.map_or(0, |p| p.textual_len());
        let blocks: Option<&[Var<'t>]> = prompts.map(|p| p.textual.as_slice());
        let (seq, _, _) = self.run_branch(vars, "txt", core, tokens.len(), l, blocks);

        let last = seq.slice_rows(l + tokens.len() - 1, 1);
        let pooled = last.layer_norm_rows(vars.get("txt.lnf_g"), vars.get("txt.lnf_b"));
        Ok(pooled.matmul(vars.get("txt.proj")).reshape(vec![cfg.embed_dim]))
    }

    /// Shared transformer stack with deep prompt injection.
    fn run_branch<'t>(
        &self,
        vars: &super::ParamVars<'t>,
        branch: &str,
        core: Var<'t>,
        core_rows: usize,
        n_prompt: usize,
        prompt_blocks: Option<&[Var<'t>]>,
    ) -> (Var<'t>, Vec<Var<'t>>, Vec<Data>) {
        let cfg = &self.config;
        let mut seq = core;
        let mut layer_feats = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            if n_prompt > 0 && l < cfg.prompt_depth {
                let block = prompt_blocks.expect("prompt blocks present when n_prompt > 0")[l];
                let rest = if l == 0 { seq } else { seq.slice_rows(n_prompt, core_rows) };
                seq = concat_rows(&[block, rest]);
            }
            let (next, attn) = self.block(vars, &format!("{branch}.l{l}"), seq);
            seq = next;
            let cls_row = if n_prompt > 0 { n_prompt } else { 0 };
            let pooled_row = if branch == "img" { cls_row } else { seq.value().rows() - 1 };
            layer_feats.push(seq.row(pooled_row));
            attention.push(attn);
        }
        (seq, layer_feats, attention)
    }

    /// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    /// Returns the new sequence and the stacked per-head attention map.
    fn block<'t>(
        &self,
        vars: &super::ParamVars<'t>,
        prefix: &str,
        x: Var<'t>,
    ) -> (Var<'t>, Data) {
        let cfg = &self.config;
        let t = x.value().rows();
        let hd = cfg.head_dim();

        let normed = x.layer_norm_rows(vars.get(&format!("{prefix}.ln1_g")), vars.get(&format!("{prefix}.ln1_b")));
        let q = normed.matmul(vars.get(&format!("{prefix}.wq"))).add_row_vec(vars.get(&format!("{prefix}.bq")));
        let k = normed.matmul(vars.get(&format!("{prefix}.wk"))).add_row_vec(vars.get(&format!("{prefix}.bk")));
        let v = normed.matmul(vars.get(&format!("{prefix}.wv"))).add_row_vec(vars.get(&format!("{prefix}.bv")));

        let mut head_outs = Vec::with_capacity(cfg.heads);
        let mut attn_values = Vec::with_capacity(cfg.heads * t * t);
        for h in 0..cfg.heads {
            let qh = q.slice_cols(h * hd, hd);
            let kh = k.slice_cols(h * hd, hd);
            let vh = v.slice_cols(h * hd, hd);
            let scores = qh.matmul(kh.transpose()).scale(1.0 / (hd as f64).sqrt());
            let probs = scores.softmax_rows(1.0).expect("unit temperature is valid");
            attn_values.extend_from_slice(&probs.value().values);
            head_outs.push(probs.matmul(vh));
        }
        let concat = concat_cols(&head_outs);
        let attended = concat
            .matmul(vars.get(&format!("{prefix}.wo")))
            .add_row_vec(vars.get(&format!("{prefix}.bo")));
        let x = x.add(attended);

        let normed2 = x.layer_norm_rows(vars.get(&format!("{prefix}.ln2_g")), vars.get(&format!("{prefix}.ln2_b")));
        let hidden = normed2
            .matmul(vars.get(&format!("{prefix}.mlp_w1")))
            .add_row_vec(vars.get(&format!("{prefix}.mlp_b1")))
            .gelu();
        let mlp = hidden
            .matmul(vars.get(&format!("{prefix}.mlp_w2")))
            .add_row_vec(vars.get(&format!("{prefix}.mlp_b2")));
        let out = x.add(mlp);

        (out, Data::new(vec![cfg.heads, t, t], attn_values))
    }
}

/// Horizontal concatenation built from transposes of the vertical one.
fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let transposed: Vec<Var<'t>> = parts.iter().map(|p| p.transpose()).collect();
    concat_rows(&transposed).transpose()
}
