//! Transformer encoder over the extracted CT features.

use crate::tensor::TensorId;

use super::attention::transformer_block;
use super::{EncoderWeights, Forward, ModelDims, Result};

/// L_e bidirectional pre-norm blocks followed by a final norm; the feature
/// count N and width D are unchanged.
pub fn transformer_encode(
    fw: &mut Forward,
    z: TensorId,
    w: &EncoderWeights,
    dims: &ModelDims,
) -> Result<TensorId> {
    let mut h = z;
    for block in &w.blocks {
        h = transformer_block(fw, h, block, dims.heads_text, false, dims.eps)?;
    }
    let (g, b) = (fw.p(w.final_g), fw.p(w.final_b));
    Ok(fw.tape.layer_norm(h, g, b, dims.eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelWeights, TokenGrid};
    use crate::rng::Rng;
    use crate::tensor::ParamStore;

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            l_vision: 1,
            heads_vision: 2,
            l_encoder: 2,
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

    #[test]
    fn encode_preserves_feature_count() {
        let d = dims();
        let mut store = ParamStore::new();
        let grid = TokenGrid { t: 2, gh: 2, gw: 2 };
        let w = ModelWeights::init(&mut store, &d, 8, grid, false, 3).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        for n in [1usize, 3, 8] {
            let mut fw = Forward::new(&store);
            let data: Vec<f64> = (0..n * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let z = fw.tape.leaf(data, vec![n, 8]);
            let h = transformer_encode(&mut fw, z, &w.encoder, &d).unwrap();
            assert_eq!(fw.tape.shape(h), &[n, 8]);
        }
    }
}
