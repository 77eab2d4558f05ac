//! Tape forward passes for the three encoding modes. A single recipe
//! serves all of them: per block, (1) self-attention where the attended
//! positions are `[query tokens ; embedded text tokens]` and only the k
//! query positions are carried forward, (2) cross-attention from the query
//! positions to the projected image tokens, (3) a position-wise MLP. Every
//! sublayer is pre-normalized with a residual connection, and a final
//! layer norm produces the k output tokens.
//!
//! Text tokens enter as static embeddings (token plus learned positional);
//! each block re-normalizes them with its own norm parameters but they do
//! not evolve across blocks. Image tokens carry no positional encoding,
//! which is what makes the encoders permutation-invariant over image rows.

use std::sync::Arc;

use super::{EncoderConfig, EncoderParams};
use crate::autodiff::{Tape, TensorId};
use crate::mat::Mat;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct BlockVars {
    ln1: (TensorId, TensorId),
    sa: [TensorId; 4],
    ln2: (TensorId, TensorId),
    ca: [TensorId; 4],
    ln3: (TensorId, TensorId),
    mlp: [TensorId; 4],
}

/// Parameter leaves on a tape, plus the `(name, id)` list in visitor order
/// for gradient collection.
pub(crate) struct ParamVars {
    query_tokens: TensorId,
    text_embed: TensorId,
    pos_embed: TensorId,
    image_proj: Option<TensorId>,
    blocks: Vec<BlockVars>,
    final_norm: (TensorId, TensorId),
    pub(crate) ordered: Vec<(String, TensorId)>,
}

/// Registers every parameter tensor as a differentiable leaf.
pub(crate) fn insert_params(tape: &mut Tape, params: &EncoderParams) -> ParamVars {
    let mut ordered = Vec::new();
    let mut leaf = |tape: &mut Tape, name: &str, m: &Arc<Mat>| {
        let id = tape.leaf(Arc::clone(m), true);
        ordered.push((name.to_string(), id));
        id
    };
    let query_tokens = leaf(tape, "query_tokens", &params.query_tokens);
    let text_embed = leaf(tape, "text_embed", &params.text_embed);
    let pos_embed = leaf(tape, "pos_embed", &params.pos_embed);
    let image_proj = params.image_proj.as_ref().map(|p| leaf(tape, "image_proj", p));
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        blocks.push(BlockVars {
            ln1: (
                leaf(tape, &format!("blocks.{i}.ln1.scale"), &b.ln1_scale),
                leaf(tape, &format!("blocks.{i}.ln1.shift"), &b.ln1_shift),
            ),
            sa: [
                leaf(tape, &format!("blocks.{i}.self_attn.wq"), &b.sa_wq),
                leaf(tape, &format!("blocks.{i}.self_attn.wk"), &b.sa_wk),
                leaf(tape, &format!("blocks.{i}.self_attn.wv"), &b.sa_wv),
                leaf(tape, &format!("blocks.{i}.self_attn.wo"), &b.sa_wo),
            ],
            ln2: (
                leaf(tape, &format!("blocks.{i}.ln2.scale"), &b.ln2_scale),
                leaf(tape, &format!("blocks.{i}.ln2.shift"), &b.ln2_shift),
            ),
            ca: [
                leaf(tape, &format!("blocks.{i}.cross_attn.wq"), &b.ca_wq),
                leaf(tape, &format!("blocks.{i}.cross_attn.wk"), &b.ca_wk),
                leaf(tape, &format!("blocks.{i}.cross_attn.wv"), &b.ca_wv),
                leaf(tape, &format!("blocks.{i}.cross_attn.wo"), &b.ca_wo),
            ],
            ln3: (
                leaf(tape, &format!("blocks.{i}.ln3.scale"), &b.ln3_scale),
                leaf(tape, &format!("blocks.{i}.ln3.shift"), &b.ln3_shift),
            ),
            mlp: [
                leaf(tape, &format!("blocks.{i}.mlp.w1"), &b.mlp_w1),
                leaf(tape, &format!("blocks.{i}.mlp.b1"), &b.mlp_b1),
                leaf(tape, &format!("blocks.{i}.mlp.w2"), &b.mlp_w2),
                leaf(tape, &format!("blocks.{i}.mlp.b2"), &b.mlp_b2),
            ],
        });
    }
    let final_norm = (
        leaf(tape, "final_norm.scale", &params.final_scale),
        leaf(tape, "final_norm.shift", &params.final_shift),
    );
    ParamVars {
        query_tokens,
        text_embed,
        pos_embed,
        image_proj,
        blocks,
        final_norm,
        ordered,
    }
}

/// Runs the encoder over an optional image and optional text, returning the
/// `k x d` output node. Callers pass at least one modality.
pub(crate) fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &EncoderConfig,
    image: Option<TensorId>,
    text_ids: Option<&[u32]>,
) -> TensorId {
    debug_assert!(image.is_some() || text_ids.is_some());

    // static text embeddings: token + learned positional, truncated
    let text = text_ids.map(|ids| {
        let len = ids.len().min(config.max_text_len);
        let idx: Vec<usize> = ids[..len].iter().map(|&t| t as usize).collect();
        let tok = tape.embed(vars.text_embed, &idx);
        let pos: Vec<usize> = (0..len).collect();
        let pos_emb = tape.embed(vars.pos_embed, &pos);
        tape.add(tok, pos_emb)
    });

    // image tokens projected into model space; no positional encoding
    let image_p = image.map(|img| match vars.image_proj {
        Some(proj) => tape.matmul(img, proj),
        None => img,
    });

    let mut x = vars.query_tokens;
    for b in &vars.blocks {
        // self-attention over [queries; text]
        let qn = tape.layer_norm(x, b.ln1.0, b.ln1.1, LN_EPS);
        let kv = match text {
            Some(e) => {
                let en = tape.layer_norm(e, b.ln1.0, b.ln1.1, LN_EPS);
                tape.concat_rows(qn, en)
            }
            None => qn,
        };
        let q = tape.matmul(qn, b.sa[0]);
        let k = tape.matmul(kv, b.sa[1]);
        let v = tape.matmul(kv, b.sa[2]);
        let attn = tape.attention(q, k, v, config.heads);
        let proj = tape.matmul(attn, b.sa[3]);
        x = tape.add(x, proj);

        // cross-attention to image tokens
        if let Some(img) = image_p {
            let qn = tape.layer_norm(x, b.ln2.0, b.ln2.1, LN_EPS);
            let kn = tape.layer_norm(img, b.ln2.0, b.ln2.1, LN_EPS);
            let q = tape.matmul(qn, b.ca[0]);
            let k = tape.matmul(kn, b.ca[1]);
            let v = tape.matmul(kn, b.ca[2]);
            let attn = tape.attention(q, k, v, config.heads);
            let proj = tape.matmul(attn, b.ca[3]);
            x = tape.add(x, proj);
        }

        // position-wise MLP
        let hn = tape.layer_norm(x, b.ln3.0, b.ln3.1, LN_EPS);
        let h1 = tape.matmul(hn, b.mlp[0]);
        let h1 = tape.add_bias(h1, b.mlp[1]);
        let h2 = tape.gelu(h1);
        let h3 = tape.matmul(h2, b.mlp[2]);
        let h3 = tape.add_bias(h3, b.mlp[3]);
        x = tape.add(x, h3);
    }

    tape.layer_norm(x, vars.final_norm.0, vars.final_norm.1, LN_EPS)
}
