//! The report-generation models: volumetric vision feature extractor,
//! transformer encoder, relational-memory decoder with conditional layer
//! normalization, and the longitudinal fusion extension.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod fusion;
pub mod generate;
pub mod memory;
pub mod vision;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, TensorId};
use crate::volume::Unit;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("volume shape {shape:?} not divisible by patch {patch:?}")]
    ShapeNotDivisible { shape: [usize; 3], patch: [usize; 3] },
    #[error("expected a {expected} volume, got {actual}")]
    WrongUnit { expected: Unit, actual: Unit },
    #[error("decode prefix must be non-empty and start with BOS")]
    BadPrefix,
    #[error("prior report is empty; longitudinal decoding requires a prior")]
    EmptyPriorReport,
    #[error("model dimension {d_model} must be divisible by head count {heads}")]
    HeadsMismatch { d_model: usize, heads: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture dimensions shared by construction and forward passes.
#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub d_model: usize,
    pub l_vision: usize,
    pub heads_vision: usize,
    pub l_encoder: usize,
    pub l_decoder: usize,
    pub heads_text: usize,
    pub mlp_ratio: usize,
    pub memory_slots: usize,
    pub rm_gated: bool,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub eps: f64,
}

impl ModelDims {
    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        for heads in [self.heads_vision, self.heads_text] {
            if heads == 0 || self.d_model % heads != 0 {
                return Err(ModelError::HeadsMismatch {
                    d_model: self.d_model,
                    heads,
                });
            }
        }
        Ok(())
    }
}

// ── Weight bundles ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
}

impl AttnWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        AttnWeights {
            wq: store.linear(&format!("{prefix}.wq"), d, d, rng),
            wk: store.linear(&format!("{prefix}.wk"), d, d, rng),
            wv: store.linear(&format!("{prefix}.wv"), d, d, rng),
            wo: store.linear(&format!("{prefix}.wo"), d, d, rng),
            bq: store.zeros(&format!("{prefix}.bq"), vec![d]),
            bk: store.zeros(&format!("{prefix}.bk"), vec![d]),
            bv: store.zeros(&format!("{prefix}.bv"), vec![d]),
            bo: store.zeros(&format!("{prefix}.bo"), vec![d]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        MlpWeights {
            w1: store.linear(&format!("{prefix}.w1"), d, hidden, rng),
            b1: store.zeros(&format!("{prefix}.b1"), vec![hidden]),
            w2: store.linear(&format!("{prefix}.w2"), hidden, d, rng),
            b2: store.zeros(&format!("{prefix}.b2"), vec![d]),
        }
    }
}

/// Pre-norm transformer block with plain layer norms.
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub attn: AttnWeights,
    pub mlp: MlpWeights,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl BlockWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        BlockWeights {
            attn: AttnWeights::init(store, &format!("{prefix}.attn"), d, rng),
            mlp: MlpWeights::init(store, &format!("{prefix}.mlp"), d, hidden, rng),
            ln1_g: store.ones(&format!("{prefix}.ln1.g"), vec![d]),
            ln1_b: store.zeros(&format!("{prefix}.ln1.b"), vec![d]),
            ln2_g: store.ones(&format!("{prefix}.ln2.g"), vec![d]),
            ln2_b: store.zeros(&format!("{prefix}.ln2.b"), vec![d]),
        }
    }
}

/// Conditional layer norm: base scale/shift plus memory-driven deltas.
#[derive(Clone, Copy, Debug)]
pub struct McLnWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub w_dg: ParamId,
    pub b_dg: ParamId,
    pub w_db: ParamId,
    pub b_db: ParamId,
}

impl McLnWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        McLnWeights {
            gamma: store.ones(&format!("{prefix}.g"), vec![d]),
            beta: store.zeros(&format!("{prefix}.b"), vec![d]),
            w_dg: store.linear(&format!("{prefix}.w_dg"), d, d, rng),
            b_dg: store.zeros(&format!("{prefix}.b_dg"), vec![d]),
            w_db: store.linear(&format!("{prefix}.w_db"), d, d, rng),
            b_db: store.zeros(&format!("{prefix}.b_db"), vec![d]),
        }
    }
}

/// Relational memory: learned initial matrix, attention projections over
/// `[M; y]`, residual MLP, and input/forget gates.
#[derive(Clone, Copy, Debug)]
pub struct RmWeights {
    pub m0: ParamId,
    pub attn: AttnWeights,
    pub mlp: MlpWeights,
    pub w_forget_y: ParamId,
    pub u_forget_m: ParamId,
    pub b_forget: ParamId,
    pub w_input_y: ParamId,
    pub u_input_m: ParamId,
    pub b_input: ParamId,
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
}

impl RmWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, slots: usize, hidden: usize, rng: &mut Rng) -> Self {
        RmWeights {
            m0: store.embedding(&format!("{prefix}.m0"), vec![slots, d], rng),
            attn: AttnWeights::init(store, &format!("{prefix}.attn"), d, rng),
            mlp: MlpWeights::init(store, &format!("{prefix}.mlp"), d, hidden, rng),
            w_forget_y: store.linear(&format!("{prefix}.w_forget_y"), d, d, rng),
            u_forget_m: store.linear(&format!("{prefix}.u_forget_m"), d, d, rng),
            b_forget: store.zeros(&format!("{prefix}.b_forget"), vec![d]),
            w_input_y: store.linear(&format!("{prefix}.w_input_y"), d, d, rng),
            u_input_m: store.linear(&format!("{prefix}.u_input_m"), d, d, rng),
            b_input: store.zeros(&format!("{prefix}.b_input"), vec![d]),
            reduce_w: store.linear(&format!("{prefix}.reduce_w"), slots * d, d, rng),
            reduce_b: store.zeros(&format!("{prefix}.reduce_b"), vec![d]),
        }
    }
}

/// Decoder block where every norm is conditional on the memory state.
#[derive(Clone, Copy, Debug)]
pub struct DecBlockWeights {
    pub self_attn: AttnWeights,
    pub cross_attn: AttnWeights,
    pub mlp: MlpWeights,
    pub mcln1: McLnWeights,
    pub mcln2: McLnWeights,
    pub mcln3: McLnWeights,
}

impl DecBlockWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        DecBlockWeights {
            self_attn: AttnWeights::init(store, &format!("{prefix}.self_attn"), d, rng),
            cross_attn: AttnWeights::init(store, &format!("{prefix}.cross_attn"), d, rng),
            mlp: MlpWeights::init(store, &format!("{prefix}.mlp"), d, hidden, rng),
            mcln1: McLnWeights::init(store, &format!("{prefix}.mcln1"), d, rng),
            mcln2: McLnWeights::init(store, &format!("{prefix}.mcln2"), d, rng),
            mcln3: McLnWeights::init(store, &format!("{prefix}.mcln3"), d, rng),
        }
    }
}

/// Patch embedding plus the factorized spatial/causal transformer stack.
#[derive(Clone, Debug)]
pub struct VisionWeights {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_temporal: ParamId,
    pub pos_spatial: ParamId,
    pub spatial_blocks: Vec<BlockWeights>,
    pub causal_blocks: Vec<BlockWeights>,
}

/// Encoder stack over the flattened CT tokens.
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub blocks: Vec<BlockWeights>,
    pub final_g: ParamId,
    pub final_b: ParamId,
}

/// Token embedding, positional table, memory, decoder blocks, output head.
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub rm: RmWeights,
    pub blocks: Vec<DecBlockWeights>,
    pub final_g: ParamId,
    pub final_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// The longitudinal extension: prior-report block, modality projections, the
/// two fusion attentions' shared q/k/v, and the memory cross-attention.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub rep_block: BlockWeights,
    pub proj_ip: ParamId,
    pub proj_rp: ParamId,
    pub fuse_q: ParamId,
    pub fuse_k: ParamId,
    pub fuse_v: ParamId,
    pub mem_attn: AttnWeights,
}

/// All weights for one model instance. `fusion` is present only for the
/// longitudinal variant; the base sections are initialized from the same
/// seed stream either way, so a base and a longitudinal model built with the
/// same seed share base weights bit-for-bit.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub vision: VisionWeights,
    pub encoder: EncoderWeights,
    pub decoder: DecoderWeights,
    pub fusion: Option<FusionWeights>,
}

/// Grid of temporal/spatial patch counts, fixed by volume shape and patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub t: usize,
    pub gh: usize,
    pub gw: usize,
}

impl TokenGrid {
    pub fn token_count(&self) -> usize {
        self.t * self.gh * self.gw
    }

    pub fn spatial(&self) -> usize {
        self.gh * self.gw
    }
}

impl ModelWeights {
    /// Initialize every section. The visual extractor's parameters live under
    /// the `visual.` prefix, which the optimizer uses for its learning-rate
    /// group split. Base sections always consume the same seed stream, so a
    /// base and a longitudinal model with equal seeds share base weights.
    pub fn init(
        store: &mut ParamStore,
        dims: &ModelDims,
        patch_len: usize,
        grid: TokenGrid,
        longitudinal: bool,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let hidden = dims.mlp_hidden();
        let base_rng = Rng::seed_from_u64(seed);
        let mut rng = base_rng.derive(1);

        let vision = VisionWeights {
            patch_w: store.linear("visual.patch.w", patch_len, d, &mut rng),
            patch_b: store.zeros("visual.patch.b", vec![d]),
            pos_temporal: store.embedding("visual.pos_temporal", vec![grid.t, d], &mut rng),
            pos_spatial: store.embedding("visual.pos_spatial", vec![grid.spatial(), d], &mut rng),
            spatial_blocks: (0..dims.l_vision)
                .map(|i| BlockWeights::init(store, &format!("visual.spatial.{i}"), d, hidden, &mut rng))
                .collect(),
            causal_blocks: (0..dims.l_vision)
                .map(|i| BlockWeights::init(store, &format!("visual.causal.{i}"), d, hidden, &mut rng))
                .collect(),
        };

        let mut rng = base_rng.derive(2);
        let encoder = EncoderWeights {
            blocks: (0..dims.l_encoder)
                .map(|i| BlockWeights::init(store, &format!("enc.block.{i}"), d, hidden, &mut rng))
                .collect(),
            final_g: store.ones("enc.final.g", vec![d]),
            final_b: store.zeros("enc.final.b", vec![d]),
        };

        let mut rng = base_rng.derive(3);
        let decoder = DecoderWeights {
            tok_embed: store.embedding("dec.tok_embed", vec![dims.vocab_size, d], &mut rng),
            pos_embed: store.embedding("dec.pos_embed", vec![dims.max_tokens + 1, d], &mut rng),
            rm: RmWeights::init(store, "dec.rm", d, dims.memory_slots, hidden, &mut rng),
            blocks: (0..dims.l_decoder)
                .map(|i| DecBlockWeights::init(store, &format!("dec.block.{i}"), d, hidden, &mut rng))
                .collect(),
            final_g: store.ones("dec.final.g", vec![d]),
            final_b: store.zeros("dec.final.b", vec![d]),
            out_w: store.linear("dec.out.w", d, dims.vocab_size, &mut rng),
            out_b: store.zeros("dec.out.b", vec![dims.vocab_size]),
        };

        let fusion = if longitudinal {
            let mut rng = base_rng.derive(4);
            Some(FusionWeights {
                rep_block: BlockWeights::init(store, "long.rep_block", d, hidden, &mut rng),
                proj_ip: store.linear("long.proj_ip", d, d, &mut rng),
                proj_rp: store.linear("long.proj_rp", d, d, &mut rng),
                fuse_q: store.linear("long.fuse.q", d, d, &mut rng),
                fuse_k: store.linear("long.fuse.k", d, d, &mut rng),
                fuse_v: store.linear("long.fuse.v", d, d, &mut rng),
                mem_attn: AttnWeights::init(store, "long.mem_attn", d, &mut rng),
            })
        } else {
            None
        };

        Ok(ModelWeights {
            vision,
            encoder,
            decoder,
            fusion,
        })
    }

    /// Zero the memory cross-attention output projection (and its bias), the
    /// switch that cuts the longitudinal pathway out of the decoder exactly.
    pub fn zero_fusion_output(&self, store: &mut ParamStore) {
        if let Some(f) = &self.fusion {
            let n = store.get(f.mem_attn.wo).numel();
            store.set_data(f.mem_attn.wo, vec![0.0; n]);
            let n = store.get(f.mem_attn.bo).numel();
            store.set_data(f.mem_attn.bo, vec![0.0; n]);
        }
    }
}

/// Learning-rate group: the visual extractor trains at its own rate.
pub fn is_visual_param(name: &str) -> bool {
    name.starts_with("visual.")
}

/// One forward pass: a fresh tape plus bind-once access to stored parameters.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<TensorId>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Tape leaf for a parameter; each parameter binds at most once per tape,
    /// so fan-out gradients accumulate through the tape itself.
    pub fn p(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = self.tape.param(self.store, id);
        self.bound[id.0] = Some(t);
        t
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Release the store borrow, keeping the recorded tape (for backward and
    /// gradient scatter once forward work is done).
    pub fn into_tape(self) -> Tape {
        self.tape
    }
}
