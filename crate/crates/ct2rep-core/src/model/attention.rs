//! Multi-head attention and the pre-norm transformer block, composed from
//! tape primitives so gradients come for free.

use crate::tensor::TensorId;

use super::{AttnWeights, BlockWeights, Forward, MlpWeights, Result};

/// `softmax(Q K^T / sqrt(d_k)) V` per head, then the output projection.
/// Causal attention requires queries and keys of equal length and restricts
/// position t to keys 0..=t.
pub fn multi_head_attention(
    fw: &mut Forward,
    x_q: TensorId,
    x_kv: TensorId,
    w: &AttnWeights,
    heads: usize,
    causal: bool,
) -> Result<TensorId> {
    let d = fw.tape.shape(x_q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (wq, bq) = (fw.p(w.wq), fw.p(w.bq));
    let (wk, bk) = (fw.p(w.wk), fw.p(w.bk));
    let (wv, bv) = (fw.p(w.wv), fw.p(w.bv));
    let (wo, bo) = (fw.p(w.wo), fw.p(w.bo));

    let q = fw.tape.matmul(x_q, wq)?;
    let q = fw.tape.add_bias(q, bq)?;
    let k = fw.tape.matmul(x_kv, wk)?;
    let k = fw.tape.add_bias(k, bk)?;
    let v = fw.tape.matmul(x_kv, wv)?;
    let v = fw.tape.add_bias(v, bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = fw.tape.slice_cols(q, h * dh, dh)?;
        let kh = fw.tape.slice_cols(k, h * dh, dh)?;
        let vh = fw.tape.slice_cols(v, h * dh, dh)?;
        let kt = fw.tape.transpose(kh)?;
        let scores = fw.tape.matmul(qh, kt)?;
        let scores = fw.tape.scale(scores, scale);
        let attn = if causal {
            fw.tape.softmax_causal(scores)?
        } else {
            fw.tape.softmax(scores, 1)?
        };
        head_outs.push(fw.tape.matmul(attn, vh)?);
    }
    let merged = fw.tape.concat_cols(&head_outs)?;
    let out = fw.tape.matmul(merged, wo)?;
    Ok(fw.tape.add_bias(out, bo)?)
}

/// Two-layer MLP with GELU.
pub fn mlp(fw: &mut Forward, x: TensorId, w: &MlpWeights) -> Result<TensorId> {
    let (w1, b1, w2, b2) = (fw.p(w.w1), fw.p(w.b1), fw.p(w.w2), fw.p(w.b2));
    let h = fw.tape.matmul(x, w1)?;
    let h = fw.tape.add_bias(h, b1)?;
    let h = fw.tape.gelu(h);
    let out = fw.tape.matmul(h, w2)?;
    Ok(fw.tape.add_bias(out, b2)?)
}

/// Pre-norm transformer block: LN -> MHA -> residual, LN -> MLP -> residual.
pub fn transformer_block(
    fw: &mut Forward,
    x: TensorId,
    w: &BlockWeights,
    heads: usize,
    causal: bool,
    eps: f64,
) -> Result<TensorId> {
    let (g1, b1) = (fw.p(w.ln1_g), fw.p(w.ln1_b));
    let normed = fw.tape.layer_norm(x, g1, b1, eps)?;
    let attn = multi_head_attention(fw, normed, normed, &w.attn, heads, causal)?;
    let x = fw.tape.add(x, attn)?;
    let (g2, b2) = (fw.p(w.ln2_g), fw.p(w.ln2_b));
    let normed = fw.tape.layer_norm(x, g2, b2, eps)?;
    let ff = mlp(fw, normed, &w.mlp)?;
    Ok(fw.tape.add(x, ff)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::ParamStore;

    fn setup(d: usize) -> (ParamStore, AttnWeights) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(5);
        let w = AttnWeights::init(&mut store, "t.attn", d, &mut rng);
        (store, w)
    }

    #[test]
    fn attention_preserves_query_shape() {
        let (store, w) = setup(8);
        let mut fw = Forward::new(&store);
        let mut rng = Rng::seed_from_u64(1);
        let xq_data: Vec<f64> = (0..3 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xkv_data: Vec<f64> = (0..5 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xq = fw.tape.leaf(xq_data, vec![3, 8]);
        let xkv = fw.tape.leaf(xkv_data, vec![5, 8]);
        let out = multi_head_attention(&mut fw, xq, xkv, &w, 2, false).unwrap();
        assert_eq!(fw.tape.shape(out), &[3, 8]);
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        // With one key/value row the softmax weight is exactly 1, so the
        // output equals the projected value row regardless of the query.
        let (store, w) = setup(4);
        let mut fw = Forward::new(&store);
        let xq = fw.tape.leaf(vec![0.3, -0.1, 0.8, 0.2], vec![1, 4]);
        let xkv = fw.tape.leaf(vec![1.0, 2.0, -1.0, 0.5], vec![1, 4]);
        let out = multi_head_attention(&mut fw, xq, xkv, &w, 2, false).unwrap();

        let mut fw2 = Forward::new(&store);
        let xkv2 = fw2.tape.leaf(vec![1.0, 2.0, -1.0, 0.5], vec![1, 4]);
        let (wv, bv) = (fw2.p(w.wv), fw2.p(w.bv));
        let v = fw2.tape.matmul(xkv2, wv).unwrap();
        let v = fw2.tape.add_bias(v, bv).unwrap();
        let (wo, bo) = (fw2.p(w.wo), fw2.p(w.bo));
        let vo = fw2.tape.matmul(v, wo).unwrap();
        let vo = fw2.tape.add_bias(vo, bo).unwrap();

        for (a, b) in fw.tape.data(out).iter().zip(fw2.tape.data(vo)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_projections_make_block_identity() {
        let d = 6;
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(9);
        let w = BlockWeights::init(&mut store, "blk", d, 2 * d, &mut rng);
        // Zero the attention and MLP output projections: residual path only.
        for pid in [w.attn.wo, w.attn.bo, w.mlp.w2, w.mlp.b2] {
            let n = store.get(pid).numel();
            store.set_data(pid, vec![0.0; n]);
        }
        let mut fw = Forward::new(&store);
        let data: Vec<f64> = (0..4 * d).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let x = fw.tape.leaf(data.clone(), vec![4, d]);
        let out = transformer_block(&mut fw, x, &w, 2, false, 1e-5).unwrap();
        assert_eq!(fw.tape.data(out), data.as_slice());
    }
}
