//! Relational memory and memory-driven conditional layer normalization.
//!
//! The memory is an S x D matrix carried across decoding steps. Each step
//! queries it with itself and attends over `[M_{t-1}; y_{t-1}]` (the matrix
//! with the previous output's embedding appended), refines the result with a
//! residual MLP, and blends it in through learned input/forget gates. The
//! decoder conditions every layer norm on a learned D-dimensional reduction
//! of the current memory.

use crate::tensor::TensorId;

use super::attention::mlp;
use super::{Forward, McLnWeights, ModelDims, Result, RmWeights};

/// One gated memory update. `m_prev` is `[S, D]`, `y_prev` is `[1, D]`.
/// The attention keys/values span S+1 rows: the memory plus the token.
pub fn rm_update(
    fw: &mut Forward,
    m_prev: TensorId,
    y_prev: TensorId,
    w: &RmWeights,
    dims: &ModelDims,
) -> Result<TensorId> {
    let d = dims.d_model;
    let heads = dims.heads_text;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if fw.tape.shape(y_prev) != [1, d] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "rm_update",
            lhs: fw.tape.shape(y_prev).to_vec(),
            rhs: vec![1, d],
        }
        .into());
    }

    // Q from the memory alone; K,V from [M; y]: S+1 key/value rows.
    let kv_src = fw.tape.concat_rows(&[m_prev, y_prev])?;
    let (wq, bq) = (fw.p(w.attn.wq), fw.p(w.attn.bq));
    let (wk, bk) = (fw.p(w.attn.wk), fw.p(w.attn.bk));
    let (wv, bv) = (fw.p(w.attn.wv), fw.p(w.attn.bv));
    let (wo, bo) = (fw.p(w.attn.wo), fw.p(w.attn.bo));
    let q = fw.tape.matmul(m_prev, wq)?;
    let q = fw.tape.add_bias(q, bq)?;
    let k = fw.tape.matmul(kv_src, wk)?;
    let k = fw.tape.add_bias(k, bk)?;
    let v = fw.tape.matmul(kv_src, wv)?;
    let v = fw.tape.add_bias(v, bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = fw.tape.slice_cols(q, h * dh, dh)?;
        let kh = fw.tape.slice_cols(k, h * dh, dh)?;
        let vh = fw.tape.slice_cols(v, h * dh, dh)?;
        let kt = fw.tape.transpose(kh)?;
        let scores = fw.tape.matmul(qh, kt)?;
        let scores = fw.tape.scale(scores, scale);
        let attn = fw.tape.softmax(scores, 1)?;
        head_outs.push(fw.tape.matmul(attn, vh)?);
    }
    let merged = fw.tape.concat_cols(&head_outs)?;
    let att = fw.tape.matmul(merged, wo)?;
    let att = fw.tape.add_bias(att, bo)?;

    // Residual attention, then residual MLP: the gate candidate.
    let m_tilde = fw.tape.add(att, m_prev)?;
    let ff = mlp(fw, m_tilde, &w.mlp)?;
    let candidate = fw.tape.add(ff, m_tilde)?;

    if !dims.rm_gated {
        return Ok(candidate);
    }

    // Gates from (M_{t-1}, y_{t-1}): sigmoid(y W + tanh(M) U + b).
    let slots = dims.memory_slots;
    let m_tanh = fw.tape.tanh(m_prev);
    let gate = |fw: &mut Forward, wy, um, b| -> Result<TensorId> {
        let (wy, um, b) = (fw.p(wy), fw.p(um), fw.p(b));
        let y_term = fw.tape.matmul(y_prev, wy)?;
        let y_vec = fw.tape.reshape(y_term, vec![d])?;
        let y_rows = fw.tape.broadcast_rows(y_vec, slots)?;
        let m_term = fw.tape.matmul(m_tanh, um)?;
        let summed = fw.tape.add(y_rows, m_term)?;
        let biased = fw.tape.add_bias(summed, b)?;
        Ok(fw.tape.sigmoid(biased))
    };
    let g_forget = gate(fw, w.w_forget_y, w.u_forget_m, w.b_forget)?;
    let g_input = gate(fw, w.w_input_y, w.u_input_m, w.b_input)?;

    let keep = fw.tape.mul(g_forget, m_prev)?;
    let cand_tanh = fw.tape.tanh(candidate);
    let write = fw.tape.mul(g_input, cand_tanh)?;
    Ok(fw.tape.add(keep, write)?)
}

/// Reduce an `[S, D]` memory matrix to the `[1, D]` state fed to the
/// conditional norms.
pub fn reduce_memory(
    fw: &mut Forward,
    m: TensorId,
    w: &RmWeights,
    dims: &ModelDims,
) -> Result<TensorId> {
    let flat = fw
        .tape
        .reshape(m, vec![1, dims.memory_slots * dims.d_model])?;
    let (rw, rb) = (fw.p(w.reduce_w), fw.p(w.reduce_b));
    let red = fw.tape.matmul(flat, rw)?;
    Ok(fw.tape.add_bias(red, rb)?)
}

/// Conditional layer norm over rows: `x[n,d]` normalized per row, scaled by
/// `gamma + dgamma(mem)` and shifted by `beta + dbeta(mem)` where `mem[n,d]`
/// carries one memory state per row. With zero delta projections this is
/// exactly the plain layer norm.
pub fn mcln(
    fw: &mut Forward,
    x: TensorId,
    mem: TensorId,
    w: &McLnWeights,
    eps: f64,
) -> Result<TensorId> {
    let (w_dg, b_dg) = (fw.p(w.w_dg), fw.p(w.b_dg));
    let (w_db, b_db) = (fw.p(w.w_db), fw.p(w.b_db));
    let dgamma = fw.tape.matmul(mem, w_dg)?;
    let dgamma = fw.tape.add_bias(dgamma, b_dg)?;
    let dbeta = fw.tape.matmul(mem, w_db)?;
    let dbeta = fw.tape.add_bias(dbeta, b_db)?;
    let (g, b) = (fw.p(w.gamma), fw.p(w.beta));
    let gamma_rows = fw.tape.add_bias(dgamma, g)?;
    let beta_rows = fw.tape.add_bias(dbeta, b)?;
    Ok(fw.tape.layer_norm_per_row(x, gamma_rows, beta_rows, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelWeights, TokenGrid};
    use crate::rng::Rng;
    use crate::tensor::ParamStore;

    fn dims(gated: bool) -> ModelDims {
        ModelDims {
            d_model: 8,
            l_vision: 1,
            heads_vision: 2,
            l_encoder: 1,
            l_decoder: 1,
            heads_text: 2,
            mlp_ratio: 2,
            memory_slots: 3,
            rm_gated: gated,
            vocab_size: 12,
            max_tokens: 16,
            eps: 1e-5,
        }
    }

    fn setup(gated: bool) -> (ParamStore, ModelWeights, ModelDims) {
        let d = dims(gated);
        let mut store = ParamStore::new();
        let grid = TokenGrid { t: 2, gh: 2, gw: 2 };
        let w = ModelWeights::init(&mut store, &d, 8, grid, false, 13).unwrap();
        (store, w, d)
    }

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn memory_shape_constant_across_steps() {
        let (store, w, d) = setup(true);
        let mut fw = Forward::new(&store);
        let mut m = fw.p(w.decoder.rm.m0);
        for step in 0..4 {
            let y = fw.tape.leaf(rand_vec(step, 8), vec![1, 8]);
            m = rm_update(&mut fw, m, y, &w.decoder.rm, &d).unwrap();
            assert_eq!(fw.tape.shape(m), &[3, 8]);
        }
    }

    #[test]
    fn forced_gates_freeze_memory() {
        // Saturate the forget gate at 1 and the input gate at 0 via biases:
        // M_t must equal M_{t-1} to floating-point rounding.
        let (mut store, w, d) = setup(true);
        for pid in [
            w.decoder.rm.w_forget_y,
            w.decoder.rm.u_forget_m,
            w.decoder.rm.w_input_y,
            w.decoder.rm.u_input_m,
        ] {
            let n = store.get(pid).numel();
            store.set_data(pid, vec![0.0; n]);
        }
        store.set_data(w.decoder.rm.b_forget, vec![60.0; 8]);
        store.set_data(w.decoder.rm.b_input, vec![-60.0; 8]);
        let mut fw = Forward::new(&store);
        let m0 = fw.p(w.decoder.rm.m0);
        let y = fw.tape.leaf(rand_vec(1, 8), vec![1, 8]);
        let m1 = rm_update(&mut fw, m0, y, &w.decoder.rm, &d).unwrap();
        for (a, b) in fw.tape.data(m1).iter().zip(fw.tape.data(m0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn update_requires_single_token_row() {
        // The attention inside the update spans exactly S+1 key/value rows:
        // the memory plus one token embedding. A multi-row y is a contract
        // violation.
        let (store, w, d) = setup(true);
        let mut fw = Forward::new(&store);
        let m0 = fw.p(w.decoder.rm.m0);
        let y2 = fw.tape.leaf(rand_vec(3, 16), vec![2, 8]);
        assert!(rm_update(&mut fw, m0, y2, &w.decoder.rm, &d).is_err());
    }

    #[test]
    fn ungated_update_is_residual_candidate() {
        let (store, w, d) = setup(false);
        let mut fw = Forward::new(&store);
        let m0 = fw.p(w.decoder.rm.m0);
        let y = fw.tape.leaf(rand_vec(2, 8), vec![1, 8]);
        let m1 = rm_update(&mut fw, m0, y, &w.decoder.rm, &d).unwrap();
        assert_eq!(fw.tape.shape(m1), &[3, 8]);
        // Ungated values are not squashed by tanh, so they may exceed 1.
        assert!(fw.tape.data(m1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mcln_with_zero_deltas_equals_layer_norm() {
        let (mut store, w, _) = setup(true);
        let mc = &w.decoder.blocks[0].mcln1;
        for pid in [mc.w_dg, mc.b_dg, mc.w_db, mc.b_db] {
            let n = store.get(pid).numel();
            store.set_data(pid, vec![0.0; n]);
        }
        // Non-trivial base gamma/beta.
        store.set_data(mc.gamma, rand_vec(5, 8));
        store.set_data(mc.beta, rand_vec(6, 8));

        let x_data = rand_vec(7, 4 * 8);
        let mem_data = rand_vec(8, 4 * 8);

        let mut fw = Forward::new(&store);
        let x = fw.tape.leaf(x_data.clone(), vec![4, 8]);
        let mem = fw.tape.leaf(mem_data, vec![4, 8]);
        let cond = mcln(&mut fw, x, mem, mc, 1e-5).unwrap();

        let x2 = fw.tape.leaf(x_data, vec![4, 8]);
        let (g, b) = (fw.p(mc.gamma), fw.p(mc.beta));
        let plain = fw.tape.layer_norm(x2, g, b, 1e-5).unwrap();

        for (a, b) in fw.tape.data(cond).iter().zip(fw.tape.data(plain)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mcln_gamma_cancellation_gives_constant_output() {
        // dgamma == -gamma makes the scale zero: output is beta + dbeta.
        let (mut store, w, _) = setup(true);
        let mc = &w.decoder.blocks[0].mcln1;
        let n = store.get(mc.w_dg).numel();
        store.set_data(mc.w_dg, vec![0.0; n]);
        store.set_data(mc.b_dg, vec![-1.0; 8]); // gamma defaults to ones
        let nb = store.get(mc.w_db).numel();
        store.set_data(mc.w_db, vec![0.0; nb]);
        store.set_data(mc.b_db, vec![0.5; 8]); // beta defaults to zeros

        let mut fw = Forward::new(&store);
        let x = fw.tape.leaf(rand_vec(9, 2 * 8), vec![2, 8]);
        let mem = fw.tape.leaf(rand_vec(10, 2 * 8), vec![2, 8]);
        let out = mcln(&mut fw, x, mem, mc, 1e-5).unwrap();
        for &v in fw.tape.data(out) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn mcln_gradient_flows_to_memory_state() {
        let (store, w, _) = setup(true);
        let mc = w.decoder.blocks[0].mcln1;
        let x_data = rand_vec(11, 2 * 8);
        let mem_data = rand_vec(12, 2 * 8);

        let eval = |inputs: &[Vec<f64>]| -> f64 {
            let mut fw = Forward::new(&store);
            let x = fw.tape.leaf(x_data.clone(), vec![2, 8]);
            let mem = fw.tape.leaf_grad(inputs[0].clone(), vec![2, 8]);
            let out = mcln(&mut fw, x, mem, &mc, 1e-5).unwrap();
            let sq = fw.tape.mul(out, out).unwrap();
            let loss = fw.tape.sum(sq);
            fw.tape.scalar(loss)
        };
        // Central finite differences on the memory input.
        let h = 1e-5;
        let mut fd = vec![0.0; mem_data.len()];
        for e in 0..mem_data.len() {
            let mut plus = mem_data.clone();
            plus[e] += h;
            let mut minus = mem_data.clone();
            minus[e] -= h;
            fd[e] = (eval(&[plus]) - eval(&[minus])) / (2.0 * h);
        }

        let mut fw = Forward::new(&store);
        let x = fw.tape.leaf(x_data.clone(), vec![2, 8]);
        let mem = fw.tape.leaf_grad(mem_data.clone(), vec![2, 8]);
        let out = mcln(&mut fw, x, mem, &mc, 1e-5).unwrap();
        let sq = fw.tape.mul(out, out).unwrap();
        let loss = fw.tape.sum(sq);
        fw.tape.backward(loss).unwrap();
        let got = fw.tape.grad(mem).unwrap();
        let max_abs = got.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max_abs > 1e-6, "memory gradient vanished");
        for (a, b) in got.iter().zip(&fd) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(rel < 1e-4, "rel {rel}");
        }
    }
}
