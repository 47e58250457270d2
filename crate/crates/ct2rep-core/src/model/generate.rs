//! Greedy and beam-search decoding with the generation-length cap.
//!
//! Each decoding step runs on a fresh tape over precomputed feature data, so
//! memory stays bounded by one forward pass regardless of output length.

use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;
use crate::text::{TokenSequence, BOS, EOS};

use super::decoder::teacher_forward;
use super::{DecoderWeights, Forward, FusionWeights, ModelDims, Result};

/// Decoding strategy. Beam search scores finished candidates by total
/// log-probability normalized by 1/length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

/// Inputs to a decoding run: encoded features by value, plus the fused
/// longitudinal features when decoding the longitudinal model.
#[derive(Clone, Debug)]
pub struct DecodeContext {
    pub h: Vec<f64>,
    pub h_rows: usize,
    pub h_l: Option<Vec<f64>>,
    pub h_l_rows: usize,
}

impl DecodeContext {
    pub fn base(h: Vec<f64>, h_rows: usize) -> Self {
        DecodeContext {
            h,
            h_rows,
            h_l: None,
            h_l_rows: 0,
        }
    }

    pub fn longitudinal(h: Vec<f64>, h_rows: usize, h_l: Vec<f64>, h_l_rows: usize) -> Self {
        DecodeContext {
            h,
            h_rows,
            h_l: Some(h_l),
            h_l_rows,
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Highest-scoring token id; ties break toward the lowest id.
fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// One fresh-tape forward over the prefix; returns the last position's
/// logits.
fn step_logits(
    store: &ParamStore,
    ctx: &DecodeContext,
    tokens: &[u32],
    w: &DecoderWeights,
    fusion: Option<&FusionWeights>,
    dims: &ModelDims,
) -> Result<Vec<f64>> {
    let mut fw = Forward::new(store);
    let h = fw.tape.leaf(ctx.h.clone(), vec![ctx.h_rows, dims.d_model]);
    let fusion_input = match (&ctx.h_l, fusion) {
        (Some(h_l), Some(fw_weights)) => {
            let id = fw
                .tape
                .leaf(h_l.clone(), vec![ctx.h_l_rows, dims.d_model]);
            Some((fw_weights, id))
        }
        _ => None,
    };
    let logits = teacher_forward(&mut fw, tokens, h, w, fusion_input, dims)?;
    let last = fw.tape.slice_rows(logits, tokens.len() - 1, 1)?;
    Ok(fw.tape.data(last).to_vec())
}

/// Auto-regressive decoding from BOS. Stops at EOS or after
/// `dims.max_tokens` generated tokens.
pub fn decode(
    store: &ParamStore,
    ctx: &DecodeContext,
    w: &DecoderWeights,
    fusion: Option<&FusionWeights>,
    dims: &ModelDims,
    mode: DecodeMode,
) -> Result<TokenSequence> {
    match mode {
        DecodeMode::Greedy => greedy(store, ctx, w, fusion, dims),
        DecodeMode::Beam { width } => beam(store, ctx, w, fusion, dims, width.max(1)),
    }
}

fn greedy(
    store: &ParamStore,
    ctx: &DecodeContext,
    w: &DecoderWeights,
    fusion: Option<&FusionWeights>,
    dims: &ModelDims,
) -> Result<TokenSequence> {
    let mut tokens = vec![BOS];
    for _ in 0..dims.max_tokens {
        let row = step_logits(store, ctx, &tokens, w, fusion, dims)?;
        let next = argmax(&row);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence::new(tokens))
}

#[derive(Clone)]
struct BeamItem {
    tokens: Vec<u32>,
    log_prob: f64,
    finished: bool,
}

impl BeamItem {
    /// Length-normalized score over generated tokens (prefix BOS excluded).
    fn score(&self) -> f64 {
        let gen_len = (self.tokens.len() - 1).max(1);
        self.log_prob / gen_len as f64
    }
}

fn beam(
    store: &ParamStore,
    ctx: &DecodeContext,
    w: &DecoderWeights,
    fusion: Option<&FusionWeights>,
    dims: &ModelDims,
    width: usize,
) -> Result<TokenSequence> {
    let mut beams = vec![BeamItem {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..dims.max_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<BeamItem> = Vec::new();
        for item in &beams {
            if item.finished {
                candidates.push(item.clone());
                continue;
            }
            let row = step_logits(store, ctx, &item.tokens, w, fusion, dims)?;
            let logp = log_softmax(&row);
            // Top `width` next tokens; ties resolve toward lower ids.
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap().then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut tokens = item.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(BeamItem {
                    finished: tok as u32 == EOS,
                    log_prob: item.log_prob + logp[tok],
                    tokens,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap()
                .then(a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        beams = candidates;
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| a.score().partial_cmp(&b.score()).unwrap().then(b.tokens.cmp(&a.tokens)))
        .expect("at least one beam");
    Ok(TokenSequence::new(best.tokens))
}
