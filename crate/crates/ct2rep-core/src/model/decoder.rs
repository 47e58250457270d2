//! Auto-regressive decoder: token + position embedding, a per-position
//! relational-memory trace, and decoder blocks whose norms are all
//! memory-conditioned. One code path serves teacher forcing and incremental
//! generation; the longitudinal variant only changes how the memory state is
//! contextualized before the norms.

use crate::tensor::TensorId;
use crate::text::BOS;

use super::attention::{mlp, multi_head_attention};
use super::memory::{mcln, rm_update, reduce_memory};
use super::{DecoderWeights, Forward, FusionWeights, ModelDims, ModelError, Result};

/// Decoder forward over a token prefix. Returns logits for every position:
/// `[P, vocab]` where row p predicts the token after position p.
///
/// `h` is the encoded volume features `[N, D]`. `h_l` optionally carries the
/// fused longitudinal features; when present, each position's memory state is
/// cross-attended against them (with a residual connection) before it drives
/// the conditional norms.
pub fn teacher_forward(
    fw: &mut Forward,
    tokens: &[u32],
    h: TensorId,
    w: &DecoderWeights,
    fusion: Option<(&FusionWeights, TensorId)>,
    dims: &ModelDims,
) -> Result<TensorId> {
    if tokens.is_empty() || tokens[0] != BOS {
        return Err(ModelError::BadPrefix);
    }
    let p_len = tokens.len();

    // Token + positional embeddings.
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok_table = fw.p(w.tok_embed);
    let emb = fw.tape.gather_rows(tok_table, &ids)?;
    let pos_table = fw.p(w.pos_embed);
    let pos_ids: Vec<usize> = (0..p_len).collect();
    let pos = fw.tape.gather_rows(pos_table, &pos_ids)?;
    let mut x = fw.tape.add(emb, pos)?;

    // Memory trace: the state used at position p has seen tokens 0..=p.
    let mut m = fw.p(w.rm.m0);
    let mut mem_rows = Vec::with_capacity(p_len);
    for p in 0..p_len {
        let y = fw.tape.slice_rows(emb, p, 1)?;
        m = rm_update(fw, m, y, &w.rm, dims)?;
        mem_rows.push(reduce_memory(fw, m, &w.rm, dims)?);
    }
    let mut mem_ctx = fw.tape.concat_rows(&mem_rows)?;

    // Longitudinal hook: cross-attend the memory states over the fused prior
    // features, residually.
    if let Some((fusion_w, h_l)) = fusion {
        let attended =
            multi_head_attention(fw, mem_ctx, h_l, &fusion_w.mem_attn, dims.heads_text, false)?;
        mem_ctx = fw.tape.add(mem_ctx, attended)?;
    }

    for block in &w.blocks {
        let a = mcln(fw, x, mem_ctx, &block.mcln1, dims.eps)?;
        let sa = multi_head_attention(fw, a, a, &block.self_attn, dims.heads_text, true)?;
        x = fw.tape.add(x, sa)?;
        let b = mcln(fw, x, mem_ctx, &block.mcln2, dims.eps)?;
        let ca = multi_head_attention(fw, b, h, &block.cross_attn, dims.heads_text, false)?;
        x = fw.tape.add(x, ca)?;
        let c = mcln(fw, x, mem_ctx, &block.mcln3, dims.eps)?;
        let ff = mlp(fw, c, &block.mlp)?;
        x = fw.tape.add(x, ff)?;
    }

    let (g, b) = (fw.p(w.final_g), fw.p(w.final_b));
    let x = fw.tape.layer_norm(x, g, b, dims.eps)?;
    let (ow, ob) = (fw.p(w.out_w), fw.p(w.out_b));
    let logits = fw.tape.matmul(x, ow)?;
    Ok(fw.tape.add_bias(logits, ob)?)
}

/// Final relational-memory matrix after consuming a prefix (exposed for
/// inspection; generation recomputes the trace each step).
pub fn final_memory(
    fw: &mut Forward,
    tokens: &[u32],
    w: &DecoderWeights,
    dims: &ModelDims,
) -> Result<TensorId> {
    if tokens.is_empty() || tokens[0] != BOS {
        return Err(ModelError::BadPrefix);
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok_table = fw.p(w.tok_embed);
    let emb = fw.tape.gather_rows(tok_table, &ids)?;
    let mut m = fw.p(w.rm.m0);
    for p in 0..tokens.len() {
        let y = fw.tape.slice_rows(emb, p, 1)?;
        m = rm_update(fw, m, y, &w.rm, dims)?;
    }
    Ok(m)
}

/// One decoding step: logits over the vocabulary for the next token after
/// `tokens_so_far`, plus the updated memory matrix.
pub fn decode_step(
    fw: &mut Forward,
    tokens_so_far: &[u32],
    h: TensorId,
    w: &DecoderWeights,
    fusion: Option<(&FusionWeights, TensorId)>,
    dims: &ModelDims,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits = teacher_forward(fw, tokens_so_far, h, w, fusion, dims)?;
    let p_len = tokens_so_far.len();
    let last = fw.tape.slice_rows(logits, p_len - 1, 1)?;
    let logits_row = fw.tape.data(last).to_vec();
    let mem = final_memory(fw, tokens_so_far, w, dims)?;
    let mem_data = fw.tape.data(mem).to_vec();
    Ok((logits_row, mem_data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelWeights, TokenGrid};
    use crate::rng::Rng;
    use crate::tensor::ParamStore;
    use crate::text::BOS;

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            l_vision: 1,
            heads_vision: 2,
            l_encoder: 1,
            l_decoder: 2,
            heads_text: 2,
            mlp_ratio: 2,
            memory_slots: 2,
            rm_gated: true,
            vocab_size: 12,
            max_tokens: 16,
            eps: 1e-5,
        }
    }

    fn setup() -> (ParamStore, ModelWeights, ModelDims) {
        let d = dims();
        let mut store = ParamStore::new();
        let grid = TokenGrid { t: 2, gh: 2, gw: 2 };
        let w = ModelWeights::init(&mut store, &d, 8, grid, false, 21).unwrap();
        (store, w, d)
    }

    fn features(fw: &mut Forward, n: usize, d: usize, seed: u64) -> TensorId {
        let mut rng = Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        fw.tape.leaf(data, vec![n, d])
    }

    #[test]
    fn logits_cover_vocabulary() {
        let (store, w, d) = setup();
        let mut fw = Forward::new(&store);
        let h = features(&mut fw, 4, 8, 1);
        let tokens = [BOS, 5, 7];
        let logits = teacher_forward(&mut fw, &tokens, h, &w.decoder, None, &d).unwrap();
        assert_eq!(fw.tape.shape(logits), &[3, 12]);
        let (row, mem) = decode_step(&mut fw, &tokens, h, &w.decoder, None, &d).unwrap();
        assert_eq!(row.len(), 12);
        assert_eq!(mem.len(), 2 * 8);
    }

    #[test]
    fn empty_or_headless_prefix_rejected() {
        let (store, w, d) = setup();
        let mut fw = Forward::new(&store);
        let h = features(&mut fw, 4, 8, 2);
        assert!(matches!(
            teacher_forward(&mut fw, &[], h, &w.decoder, None, &d),
            Err(ModelError::BadPrefix)
        ));
        assert!(matches!(
            teacher_forward(&mut fw, &[5, 6], h, &w.decoder, None, &d),
            Err(ModelError::BadPrefix)
        ));
    }

    #[test]
    fn causal_teacher_forcing_ignores_future_tokens() {
        let (store, w, d) = setup();
        let h_data: Vec<f64> = {
            let mut rng = Rng::seed_from_u64(3);
            (0..4 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect()
        };
        let run = |tokens: &[u32]| -> Vec<f64> {
            let mut fw = Forward::new(&store);
            let h = fw.tape.leaf(h_data.clone(), vec![4, 8]);
            let logits = teacher_forward(&mut fw, tokens, h, &w.decoder, None, &d).unwrap();
            fw.tape.data(logits).to_vec()
        };
        let a = run(&[BOS, 4, 5, 6]);
        let b = run(&[BOS, 4, 9, 10]);
        // Positions 0 and 1 saw identical prefixes: logits bit-identical.
        assert_eq!(a[..2 * 12], b[..2 * 12]);
        assert_ne!(a[2 * 12..], b[2 * 12..]);
    }

    #[test]
    fn memory_trace_changes_logits() {
        // Two prefixes equal except the first generated token: position 0
        // logits must match (memory there saw only BOS), later ones differ.
        let (store, w, d) = setup();
        let run = |tokens: &[u32]| -> Vec<f64> {
            let mut fw = Forward::new(&store);
            let h = features(&mut fw, 4, 8, 4);
            let logits = teacher_forward(&mut fw, tokens, h, &w.decoder, None, &d).unwrap();
            fw.tape.data(logits).to_vec()
        };
        let a = run(&[BOS, 4, 5]);
        let b = run(&[BOS, 6, 5]);
        assert_eq!(a[..12], b[..12]);
        assert_ne!(a[12..24], b[12..24]);
    }

    #[test]
    fn longitudinal_path_preserves_causality() {
        // The memory cross-attention runs per position over prior-visit
        // features, so future tokens still cannot reach earlier logits.
        let d = dims();
        let mut store = ParamStore::new();
        let grid = TokenGrid { t: 2, gh: 2, gw: 2 };
        let w = ModelWeights::init(&mut store, &d, 8, grid, true, 23).unwrap();
        let fusion = w.fusion.as_ref().unwrap();
        let mut rng = Rng::seed_from_u64(12);
        let h_data: Vec<f64> = (0..4 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hl_data: Vec<f64> = (0..6 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let run = |tokens: &[u32]| -> Vec<f64> {
            let mut fw = Forward::new(&store);
            let h = fw.tape.leaf(h_data.clone(), vec![4, 8]);
            let hl = fw.tape.leaf(hl_data.clone(), vec![6, 8]);
            let logits =
                teacher_forward(&mut fw, tokens, h, &w.decoder, Some((fusion, hl)), &d).unwrap();
            fw.tape.data(logits).to_vec()
        };
        let a = run(&[BOS, 4, 5, 6]);
        let b = run(&[BOS, 4, 9, 11]);
        assert_eq!(a[..2 * 12], b[..2 * 12]);
        assert_ne!(a[2 * 12..], b[2 * 12..]);
    }

    #[test]
    fn zero_deltas_reduce_to_memoryless_decoder() {
        // With every conditional-norm delta projection zeroed, the memory
        // pathway cannot reach the logits: swapping the learned initial
        // memory for a completely different matrix changes nothing.
        let (mut store, w, d) = setup();
        for block in &w.decoder.blocks {
            for mc in [&block.mcln1, &block.mcln2, &block.mcln3] {
                for pid in [mc.w_dg, mc.b_dg, mc.w_db, mc.b_db] {
                    let n = store.get(pid).numel();
                    store.set_data(pid, vec![0.0; n]);
                }
            }
        }
        let run = |store: &ParamStore| -> Vec<f64> {
            let mut fw = Forward::new(store);
            let h = features(&mut fw, 4, 8, 6);
            let logits = teacher_forward(&mut fw, &[BOS, 4, 5, 6], h, &w.decoder, None, &d).unwrap();
            fw.tape.data(logits).to_vec()
        };
        let a = run(&store);
        let n = store.get(w.decoder.rm.m0).numel();
        store.set_data(w.decoder.rm.m0, vec![7.5; n]);
        let b = run(&store);
        assert_eq!(a, b, "memory leaked into logits despite zero deltas");
    }
}
