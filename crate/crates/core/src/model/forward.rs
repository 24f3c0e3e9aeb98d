use rand::RngCore;

use super::{ModelConfig, ModelError, ModelParams, Result, LAYER_NORM_EPS, TENSORS_PER_LAYER};
use crate::autodiff::{Scalar, Tape, Tensor, Var};

/// Tape handles of every parameter, in canonical order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub vars: Vec<Var>,
}

impl ModelVars {
    fn head(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Places the parameters on `tape`, as gradient-tracking leaves when
/// `trainable`.
pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> ModelVars {
    let vars = params.tensors().iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
    ModelVars { vars }
}

/// Intermediate results of one encoder pass.
pub struct ForwardTrace {
    pub hidden: Var,
    /// Attention probabilities `[B, H, L, L]`, one per layer.
    pub attention: Vec<Var>,
}

fn check_batch(config: &ModelConfig, ids: &[u32], mask: &[u8], batch: usize) -> Result<usize> {
    if batch == 0 || !ids.len().is_multiple_of(batch) || mask.len() != ids.len() {
        return Err(ModelError::Shape(format!("{} ids, {} mask entries, batch {batch}", ids.len(), mask.len())));
    }
    let len = ids.len() / batch;
    if len > config.max_len {
        return Err(ModelError::TooLong { len, max_len: config.max_len });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::IdOutOfRange { id, vocab_size: config.vocab_size });
    }
    Ok(len)
}

fn drop_out<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => Ok(tape.dropout(x, p, &mut **r)?),
        _ => Ok(x),
    }
}

/// Runs the encoder and returns hidden states `[B, L, d]` plus per-layer
/// attention maps. Passing no rng disables dropout (eval mode).
pub fn forward_trace<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    ids: &[u32],
    attention_mask: &[u8],
    batch: usize,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<ForwardTrace> {
    let len = check_batch(config, ids, attention_mask, batch)?;
    let v = &vars.vars;
    let p = config.dropout;
    let heads = config.heads;
    let inv_sqrt_dh = T::from_f64(1.0 / (config.head_dim() as f64).sqrt());

    let tok = tape.embedding(v[0], ids, &[batch, len])?;
    let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..len as u32).collect();
    let pos = tape.embedding(v[1], &pos_ids, &[batch, len])?;
    let x = tape.add(tok, pos)?;
    let x = tape.layer_norm(x, v[2], v[3], LAYER_NORM_EPS)?;
    let mut x = drop_out(tape, x, p, &mut dropout)?;

    let mut attention = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        let w = &v[4 + layer * TENSORS_PER_LAYER..4 + (layer + 1) * TENSORS_PER_LAYER];
        let q = tape.matmul(x, w[0], false)?;
        let q = tape.add(q, w[1])?;
        let k = tape.matmul(x, w[2], false)?;
        let k = tape.add(k, w[3])?;
        let val = tape.matmul(x, w[4], false)?;
        let val = tape.add(val, w[5])?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(val, heads)?;

        let scores = tape.matmul(qh, kh, true)?;
        let scores = tape.scale(scores, inv_sqrt_dh)?;
        let scores = tape.mask_keys(scores, attention_mask)?;
        let probs = tape.softmax(scores)?;
        attention.push(probs);
        let probs = drop_out(tape, probs, p, &mut dropout)?;
        let ctx = tape.matmul(probs, vh, false)?;
        let ctx = tape.merge_heads(ctx)?;

        let attn = tape.matmul(ctx, w[6], false)?;
        let attn = tape.add(attn, w[7])?;
        let attn = drop_out(tape, attn, p, &mut dropout)?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, w[8], w[9], LAYER_NORM_EPS)?;

        let h = tape.matmul(x, w[10], false)?;
        let h = tape.add(h, w[11])?;
        let h = tape.gelu(h)?;
        let f = tape.matmul(h, w[12], false)?;
        let f = tape.add(f, w[13])?;
        let f = drop_out(tape, f, p, &mut dropout)?;
        let res = tape.add(x, f)?;
        x = tape.layer_norm(res, w[14], w[15], LAYER_NORM_EPS)?;
    }
    Ok(ForwardTrace { hidden: x, attention })
}

/// Token-level logits `[B, L, head_classes]`. Dropout is active only when
/// an rng is supplied.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    ids: &[u32],
    attention_mask: &[u8],
    batch: usize,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false);
    let trace = forward_trace(&mut tape, &vars, config, ids, attention_mask, batch, dropout)?;
    let (hw, hb) = vars.head();
    let logits = tape.matmul(trace.hidden, hw, false)?;
    let logits = tape.add(logits, hb)?;
    Ok(tape.value(logits).clone())
}

/// Records the objective loss: the head is applied only at positions with
/// a nonzero `loss_mask`, then cross-entropy is averaged over them.
#[allow(clippy::too_many_arguments)]
pub fn objective_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    ids: &[u32],
    attention_mask: &[u8],
    batch: usize,
    labels: &[u32],
    loss_mask: &[u8],
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if labels.len() != ids.len() || loss_mask.len() != ids.len() {
        return Err(ModelError::Shape("labels/loss_mask must match input ids".into()));
    }
    let trace = forward_trace(tape, vars, config, ids, attention_mask, batch, dropout)?;
    let rows: Vec<usize> = (0..loss_mask.len()).filter(|&i| loss_mask[i] != 0).collect();
    let picked_labels: Vec<u32> = rows.iter().map(|&i| labels[i]).collect();
    let h = tape.gather_rows(trace.hidden, &rows)?;
    let (hw, hb) = vars.head();
    let logits = tape.matmul(h, hw, false)?;
    let logits = tape.add(logits, hb)?;
    let ones = vec![1u8; rows.len()];
    Ok(tape.cross_entropy_masked(logits, &picked_labels, &ones)?)
}

/// Head applied to the CLS hidden state: `[B, head_classes]`.
pub fn sequence_logits<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    ids: &[u32],
    attention_mask: &[u8],
    batch: usize,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let trace = forward_trace(tape, vars, config, ids, attention_mask, batch, dropout)?;
    let pooled = tape.select_position(trace.hidden, 0)?;
    let (hw, hb) = vars.head();
    let logits = tape.matmul(pooled, hw, false)?;
    Ok(tape.add(logits, hb)?)
}

/// Final hidden state at the CLS position, `[B, d]` (eval mode).
pub fn pooled_representation<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    ids: &[u32],
    attention_mask: &[u8],
    batch: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false);
    let trace = forward_trace(&mut tape, &vars, config, ids, attention_mask, batch, None)?;
    let pooled = tape.select_position(trace.hidden, 0)?;
    Ok(tape.value(pooled).clone())
}
