//! Cross-attention fusion of a prior visit's volume features and report.
//!
//! Two attention maps are computed between the projected prior-report
//! features H_RP and prior-volume features H_IP:
//!   R* = softmax(q(H_RP) k(H_IP)^T / sqrt(d_k))
//!   I* = softmax(q(H_IP) k(H_RP)^T / sqrt(d_k))
//! The attended outputs R* v(H_IP) and I* v(H_RP) are stacked row-wise into
//! the longitudinal representation H_L.

use crate::tensor::TensorId;

use super::attention::transformer_block;
use super::{DecoderWeights, Forward, FusionWeights, ModelDims, ModelError, Result};

/// Fused longitudinal features plus the attended parts they came from.
#[derive(Clone, Copy, Debug)]
pub struct LongitudinalFeatures {
    /// Attended prior-volume rows (queries from the prior report).
    pub report_to_volume: TensorId,
    /// Attended prior-report rows (queries from the prior volume).
    pub volume_to_report: TensorId,
    /// Row-wise concatenation of the two attended outputs.
    pub h_l: TensorId,
    pub rows_rp: usize,
    pub rows_ip: usize,
}

/// Embed and lightly encode the prior report: shared token embedding plus
/// positional table, then one bidirectional block.
pub fn embed_prior_report(
    fw: &mut Forward,
    r_old: &[u32],
    dec: &DecoderWeights,
    w: &FusionWeights,
    dims: &ModelDims,
) -> Result<TensorId> {
    if r_old.is_empty() {
        return Err(ModelError::EmptyPriorReport);
    }
    // Clamp to the positional table; prior reports respect the token cap.
    let take = r_old.len().min(dims.max_tokens + 1);
    let ids: Vec<usize> = r_old[..take].iter().map(|&t| t as usize).collect();
    let table = fw.p(dec.tok_embed);
    let emb = fw.tape.gather_rows(table, &ids)?;
    let pos_table = fw.p(dec.pos_embed);
    let pos_ids: Vec<usize> = (0..take).collect();
    let pos = fw.tape.gather_rows(pos_table, &pos_ids)?;
    let x = fw.tape.add(emb, pos)?;
    transformer_block(fw, x, &w.rep_block, dims.heads_text, false, dims.eps)
}

/// Cross-attention fusion. `h_old_vol` are the prior volume's extracted
/// features `[N_v, D]`; `rep` the encoded prior report `[N_r, D]`.
pub fn fuse_prior(
    fw: &mut Forward,
    h_old_vol: TensorId,
    rep: TensorId,
    w: &FusionWeights,
    dims: &ModelDims,
) -> Result<LongitudinalFeatures> {
    let d = dims.d_model;
    let scale = 1.0 / (d as f64).sqrt();

    let proj_ip = fw.p(w.proj_ip);
    let proj_rp = fw.p(w.proj_rp);
    let h_ip = fw.tape.matmul(h_old_vol, proj_ip)?;
    let h_rp = fw.tape.matmul(rep, proj_rp)?;

    let (wq, wk, wv) = (fw.p(w.fuse_q), fw.p(w.fuse_k), fw.p(w.fuse_v));
    let q_rp = fw.tape.matmul(h_rp, wq)?;
    let k_ip = fw.tape.matmul(h_ip, wk)?;
    let v_ip = fw.tape.matmul(h_ip, wv)?;
    let q_ip = fw.tape.matmul(h_ip, wq)?;
    let k_rp = fw.tape.matmul(h_rp, wk)?;
    let v_rp = fw.tape.matmul(h_rp, wv)?;

    // R* = softmax(q(H_RP) k(H_IP)^T / sqrt(d_k)); rows sum to 1.
    let k_ip_t = fw.tape.transpose(k_ip)?;
    let r_scores = fw.tape.matmul(q_rp, k_ip_t)?;
    let r_scores = fw.tape.scale(r_scores, scale);
    let r_star = fw.tape.softmax(r_scores, 1)?;

    // I* = softmax(q(H_IP) k(H_RP)^T / sqrt(d_k)).
    let k_rp_t = fw.tape.transpose(k_rp)?;
    let i_scores = fw.tape.matmul(q_ip, k_rp_t)?;
    let i_scores = fw.tape.scale(i_scores, scale);
    let i_star = fw.tape.softmax(i_scores, 1)?;

    let report_to_volume = fw.tape.matmul(r_star, v_ip)?;
    let volume_to_report = fw.tape.matmul(i_star, v_rp)?;
    let h_l = fw.tape.concat_rows(&[report_to_volume, volume_to_report])?;

    Ok(LongitudinalFeatures {
        report_to_volume,
        volume_to_report,
        h_l,
        rows_rp: fw.tape.shape(rep)[0],
        rows_ip: fw.tape.shape(h_old_vol)[0],
    })
}

/// The two attention maps themselves, exposed for invariant checks.
pub fn fusion_attention_maps(
    fw: &mut Forward,
    h_old_vol: TensorId,
    rep: TensorId,
    w: &FusionWeights,
    dims: &ModelDims,
) -> Result<(TensorId, TensorId)> {
    let d = dims.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let proj_ip = fw.p(w.proj_ip);
    let proj_rp = fw.p(w.proj_rp);
    let h_ip = fw.tape.matmul(h_old_vol, proj_ip)?;
    let h_rp = fw.tape.matmul(rep, proj_rp)?;
    let (wq, wk) = (fw.p(w.fuse_q), fw.p(w.fuse_k));
    let q_rp = fw.tape.matmul(h_rp, wq)?;
    let k_ip = fw.tape.matmul(h_ip, wk)?;
    let q_ip = fw.tape.matmul(h_ip, wq)?;
    let k_rp = fw.tape.matmul(h_rp, wk)?;
    let k_ip_t = fw.tape.transpose(k_ip)?;
    let r_scores = fw.tape.matmul(q_rp, k_ip_t)?;
    let r_scores = fw.tape.scale(r_scores, scale);
    let r_star = fw.tape.softmax(r_scores, 1)?;
    let k_rp_t = fw.tape.transpose(k_rp)?;
    let i_scores = fw.tape.matmul(q_ip, k_rp_t)?;
    let i_scores = fw.tape.scale(i_scores, scale);
    let i_star = fw.tape.softmax(i_scores, 1)?;
    Ok((r_star, i_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelWeights, TokenGrid};
    use crate::rng::Rng;
    use crate::tensor::ParamStore;
    use crate::text::{BOS, EOS};

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            l_vision: 1,
            heads_vision: 2,
            l_encoder: 1,
            l_decoder: 1,
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
        let w = ModelWeights::init(&mut store, &d, 8, grid, true, 31).unwrap();
        (store, w, d)
    }

    fn rand_mat(fw: &mut Forward, rows: usize, d: usize, seed: u64) -> TensorId {
        let mut rng = Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        fw.tape.leaf(data, vec![rows, d])
    }

    #[test]
    fn attention_maps_are_row_stochastic_with_transposed_shapes() {
        let (store, w, d) = setup();
        let fusion = w.fusion.as_ref().unwrap();
        let mut fw = Forward::new(&store);
        let h_vol = rand_mat(&mut fw, 5, 8, 1);
        let rep = rand_mat(&mut fw, 3, 8, 2);
        let (r_star, i_star) =
            fusion_attention_maps(&mut fw, h_vol, rep, fusion, &d).unwrap();
        assert_eq!(fw.tape.shape(r_star), &[3, 5]);
        assert_eq!(fw.tape.shape(i_star), &[5, 3]);
        for r in 0..3 {
            let sum: f64 = fw.tape.data(r_star)[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        for r in 0..5 {
            let sum: f64 = fw.tape.data(i_star)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_rows_stack_both_attended_outputs() {
        let (store, w, d) = setup();
        let fusion = w.fusion.as_ref().unwrap();
        let mut fw = Forward::new(&store);
        let h_vol = rand_mat(&mut fw, 5, 8, 3);
        let rep = rand_mat(&mut fw, 3, 8, 4);
        let feats = fuse_prior(&mut fw, h_vol, rep, fusion, &d).unwrap();
        assert_eq!(fw.tape.shape(feats.h_l), &[8, 8]);
        assert_eq!(
            fw.tape.shape(feats.report_to_volume)[0] + fw.tape.shape(feats.volume_to_report)[0],
            fw.tape.shape(feats.h_l)[0]
        );
    }

    #[test]
    fn single_volume_row_gives_uniform_column_attention() {
        // With one key row, every query puts weight 1 on it, so the attended
        // output repeats v(H_IP) for every report row.
        let (store, w, d) = setup();
        let fusion = w.fusion.as_ref().unwrap();
        let mut fw = Forward::new(&store);
        let h_vol = rand_mat(&mut fw, 1, 8, 5);
        let rep = rand_mat(&mut fw, 4, 8, 6);
        let (r_star, _) = fusion_attention_maps(&mut fw, h_vol, rep, fusion, &d).unwrap();
        for &v in fw.tape.data(r_star) {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let feats = fuse_prior(&mut fw, h_vol, rep, fusion, &d).unwrap();
        let out = fw.tape.data(feats.report_to_volume);
        for r in 1..4 {
            assert_eq!(&out[..8], &out[r * 8..(r + 1) * 8]);
        }
    }

    #[test]
    fn empty_prior_report_is_contract_error() {
        let (store, w, d) = setup();
        let fusion = w.fusion.as_ref().unwrap();
        let mut fw = Forward::new(&store);
        assert!(matches!(
            embed_prior_report(&mut fw, &[], &w.decoder, fusion, &d),
            Err(ModelError::EmptyPriorReport)
        ));
        let ok = embed_prior_report(&mut fw, &[BOS, 5, EOS], &w.decoder, fusion, &d);
        assert!(ok.is_ok());
    }
}
