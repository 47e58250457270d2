//! 3-D vision feature extractor: non-overlapping patch embedding followed by
//! alternating spatial and causal transformer stages.
//!
//! The token grid (T, H/p1, W/p2) survives every stage. The spatial stage
//! attends over in-slice positions independently per temporal index; the
//! causal stage attends over temporal indices independently per spatial
//! position, masked so index t sees only indices <= t.

use crate::tensor::TensorId;
use crate::volume::{Unit, Volume3D};

use super::attention::transformer_block;
use super::{Forward, ModelDims, ModelError, Result, TokenGrid, VisionWeights};

/// Temporal and spatial patch sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub p_t: usize,
    pub p1: usize,
    pub p2: usize,
}

impl PatchConfig {
    pub fn patch_len(&self) -> usize {
        self.p_t * self.p1 * self.p2
    }

    /// Token grid for a volume shape; the shape must divide evenly.
    pub fn grid_for(&self, shape: (usize, usize, usize)) -> Result<TokenGrid> {
        let (d, h, w) = shape;
        if self.p_t == 0
            || self.p1 == 0
            || self.p2 == 0
            || d % self.p_t != 0
            || h % self.p1 != 0
            || w % self.p2 != 0
        {
            return Err(ModelError::ShapeNotDivisible {
                shape: [d, h, w],
                patch: [self.p_t, self.p1, self.p2],
            });
        }
        Ok(TokenGrid {
            t: d / self.p_t,
            gh: h / self.p1,
            gw: w / self.p2,
        })
    }
}

/// Shape-only contract of the full extractor: (T, H/p1, W/p2, D) for any
/// divisible volume shape, without touching voxel data.
pub fn encoded_shape(
    patch: &PatchConfig,
    volume_shape: (usize, usize, usize),
    d_model: usize,
) -> Result<(usize, usize, usize, usize)> {
    let grid = patch.grid_for(volume_shape)?;
    Ok((grid.t, grid.gh, grid.gw, d_model))
}

/// Embedded CT tokens: an `[N, D]` matrix whose rows walk the grid in
/// (t, i, j) row-major order.
#[derive(Clone, Copy, Debug)]
pub struct CtTokens {
    pub grid: TokenGrid,
    pub d: usize,
    pub id: TensorId,
}

/// Flatten volume patches into an `[N, patch_len]` matrix in grid order.
fn patch_matrix(v: &Volume3D, patch: &PatchConfig, grid: TokenGrid) -> Vec<f64> {
    let (_, h, w) = v.shape;
    let plen = patch.patch_len();
    let mut out = vec![0.0; grid.token_count() * plen];
    let mut row = 0;
    for t in 0..grid.t {
        for i in 0..grid.gh {
            for j in 0..grid.gw {
                let base = row * plen;
                let mut k = 0;
                for dz in 0..patch.p_t {
                    let z = t * patch.p_t + dz;
                    for dy in 0..patch.p1 {
                        let y = i * patch.p1 + dy;
                        let src = (z * h + y) * w + j * patch.p2;
                        out[base + k..base + k + patch.p2]
                            .copy_from_slice(&v.data[src..src + patch.p2]);
                        k += patch.p2;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Patch embedding: flatten each (p_t, p1, p2) block, project to D dims, and
/// add the factorized temporal + spatial positional tables.
pub fn patch_embed(
    fw: &mut Forward,
    v: &Volume3D,
    patch: &PatchConfig,
    w: &VisionWeights,
    d_model: usize,
) -> Result<CtTokens> {
    if v.unit != Unit::Normalized {
        return Err(ModelError::WrongUnit {
            expected: Unit::Normalized,
            actual: v.unit,
        });
    }
    let grid = patch.grid_for(v.shape)?;
    let n = grid.token_count();
    let patches = patch_matrix(v, patch, grid);
    let patches = fw.tape.leaf(patches, vec![n, patch.patch_len()]);
    let (pw, pb) = (fw.p(w.patch_w), fw.p(w.patch_b));
    let z = fw.tape.matmul(patches, pw)?;
    let z = fw.tape.add_bias(z, pb)?;

    let mut t_idx = Vec::with_capacity(n);
    let mut s_idx = Vec::with_capacity(n);
    for t in 0..grid.t {
        for s in 0..grid.spatial() {
            t_idx.push(t);
            s_idx.push(s);
        }
    }
    let pos_t = fw.p(w.pos_temporal);
    let pos_s = fw.p(w.pos_spatial);
    let pt = fw.tape.gather_rows(pos_t, &t_idx)?;
    let ps = fw.tape.gather_rows(pos_s, &s_idx)?;
    let z = fw.tape.add(z, pt)?;
    let z = fw.tape.add(z, ps)?;
    Ok(CtTokens {
        grid,
        d: d_model,
        id: z,
    })
}

/// Row order that groups each spatial position's temporal fiber contiguously.
fn spatial_major_order(grid: TokenGrid) -> Vec<usize> {
    let spatial = grid.spatial();
    let mut idx = Vec::with_capacity(grid.token_count());
    for s in 0..spatial {
        for t in 0..grid.t {
            idx.push(t * spatial + s);
        }
    }
    idx
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (pos, &src) in perm.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// Bidirectional self-attention over the H/p1*W/p2 spatial positions,
/// independently for each temporal index. Grid shape is unchanged.
pub fn spatial_block(
    fw: &mut Forward,
    z: &CtTokens,
    w: &super::BlockWeights,
    dims: &ModelDims,
) -> Result<CtTokens> {
    let seg = z.grid.spatial();
    let mut parts = Vec::with_capacity(z.grid.t);
    for t in 0..z.grid.t {
        let slice = fw.tape.slice_rows(z.id, t * seg, seg)?;
        parts.push(transformer_block(
            fw,
            slice,
            w,
            dims.heads_vision,
            false,
            dims.eps,
        )?);
    }
    let out = fw.tape.concat_rows(&parts)?;
    Ok(CtTokens { id: out, ..*z })
}

/// Causally masked self-attention over the T temporal indices, independently
/// for each spatial position. Grid shape is unchanged.
pub fn causal_block(
    fw: &mut Forward,
    z: &CtTokens,
    w: &super::BlockWeights,
    dims: &ModelDims,
) -> Result<CtTokens> {
    let order = spatial_major_order(z.grid);
    let reordered = fw.tape.gather_rows(z.id, &order)?;
    let mut parts = Vec::with_capacity(z.grid.spatial());
    for s in 0..z.grid.spatial() {
        let slice = fw.tape.slice_rows(reordered, s * z.grid.t, z.grid.t)?;
        parts.push(transformer_block(
            fw,
            slice,
            w,
            dims.heads_vision,
            true,
            dims.eps,
        )?);
    }
    let merged = fw.tape.concat_rows(&parts)?;
    let back = inverse_permutation(&order);
    let out = fw.tape.gather_rows(merged, &back)?;
    Ok(CtTokens { id: out, ..*z })
}

/// Full extractor: patch embedding, then alternating spatial and causal
/// stages. Output rows are the N = T * (H/p1) * (W/p2) feature vectors in
/// grid row-major order.
pub fn encode_volume(
    fw: &mut Forward,
    v: &Volume3D,
    patch: &PatchConfig,
    w: &VisionWeights,
    dims: &ModelDims,
) -> Result<CtTokens> {
    let mut z = patch_embed(fw, v, patch, w, dims.d_model)?;
    for (sw, cw) in w.spatial_blocks.iter().zip(&w.causal_blocks) {
        z = spatial_block(fw, &z, sw, dims)?;
        z = causal_block(fw, &z, cw, dims)?;
    }
    Ok(z)
}
