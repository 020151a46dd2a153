//! Dual-path processing: half-overlapping segmentation, intra-block and
//! inter-block residual RNN passes, and overlap-add back to a frame
//! sequence.
//!
//! Layout: a frame sequence is `[F × …feature]` (frame axis first). A
//! segmented tensor is `[S × 2T × …feature]`: block index, position in the
//! block, then the feature axes. The last axis is always the one an RNN
//! consumes; any axes between position and feature (e.g. the group axis)
//! are treated as extra batch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::ResidualRnn;
use crate::params::{Bound, ParamRegistry};
use crate::tensor::Tensor;

/// Blocks of length `2·hop` taken every `hop` frames.
#[derive(Debug, Clone)]
pub struct SegmentedTensor {
    pub data: Tensor,
    pub hop: usize,
    pub frames: usize,
}

impl SegmentedTensor {
    pub fn blocks(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn block_len(&self) -> usize {
        2 * self.hop
    }

    /// Shape of one frame's feature (everything after the position axis).
    pub fn feature_shape(&self) -> &[usize] {
        &self.data.shape()[2..]
    }

    pub(crate) fn with_data(&self, data: Tensor) -> SegmentedTensor {
        SegmentedTensor {
            data,
            hop: self.hop,
            frames: self.frames,
        }
    }
}

/// `ceil(frames / hop) + 1`.
pub fn block_count(frames: usize, hop: usize) -> usize {
    frames.div_ceil(hop) + 1
}

/// Smallest `T` with `2·T² ≥ frames`, i.e. `ceil(sqrt(frames/2))`, so that
/// the block count is close to the block length.
pub fn default_hop(frames: usize) -> usize {
    let mut t = ((frames as f64 / 2.0).sqrt() as usize).max(1);
    while 2 * t * t < frames {
        t += 1;
    }
    while t > 1 && 2 * (t - 1) * (t - 1) >= frames {
        t -= 1;
    }
    t
}

/// Splits `h: [F × …]` into half-overlapping blocks. `hop` zero frames go in
/// front and enough at the end that every frame lands in exactly two blocks.
pub fn segment(h: &Tensor, hop: usize) -> Result<SegmentedTensor> {
    if h.rank() < 2 || hop == 0 {
        return Err(Error::Contract(format!(
            "segment needs [frames × features] and hop ≥ 1, got {:?}, hop {hop}",
            h.shape()
        )));
    }
    let frames = h.shape()[0];
    let feat = &h.shape()[1..];
    let d: usize = feat.iter().product();
    let blocks = block_count(frames, hop);
    let tail = hop + (hop - frames % hop) % hop;

    let padded = Tensor::concat(
        &[
            Tensor::zeros(&[hop, d]),
            h.reshape(&[frames, d])?,
            Tensor::zeros(&[tail, d]),
        ],
        0,
    )?;
    let first = padded.slice(0, 0, blocks * hop)?.reshape(&[blocks, hop, d])?;
    let second = padded.slice(0, hop, blocks * hop)?.reshape(&[blocks, hop, d])?;
    let mut shape = vec![blocks, 2 * hop];
    shape.extend_from_slice(feat);
    let data = Tensor::concat(&[first, second], 1)?.reshape(&shape)?;
    Ok(SegmentedTensor { data, hop, frames })
}

/// Sums the blocks back at their hop offsets and drops the padding.
pub fn overlap_add(t: &SegmentedTensor) -> Result<Tensor> {
    let shape = t.data.shape();
    let blocks = block_count(t.frames, t.hop);
    if shape.len() < 3 || shape[0] != blocks || shape[1] != 2 * t.hop || t.frames == 0 {
        return Err(Error::Contract(format!(
            "segmented tensor {shape:?} inconsistent with {} frames at hop {}",
            t.frames, t.hop
        )));
    }
    let hop = t.hop;
    let feat = &shape[2..];
    let d: usize = feat.iter().product();
    let data = t.data.reshape(&[blocks, 2 * hop, d])?;
    let first = data.slice(1, 0, hop)?.reshape(&[blocks * hop, d])?;
    let second = data.slice(1, hop, hop)?.reshape(&[blocks * hop, d])?;
    let pad = Tensor::zeros(&[hop, d]);
    let sum = Tensor::concat(&[first, pad.clone()], 0)?.add(&Tensor::concat(&[pad, second], 0)?)?;
    let mut out_shape = vec![t.frames];
    out_shape.extend_from_slice(feat);
    sum.slice(0, hop, t.frames)?.reshape(&out_shape)
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize, usize) {
    let d = *shape.last().expect("rank ≥ 3");
    let batch = shape[2..].iter().product::<usize>() / d;
    (shape[0], shape[1], batch, d)
}

/// Runs `branch` along the position axis of every block independently.
pub fn intra_block_pass(t: &SegmentedTensor, branch: &ResidualRnn, p: &Bound) -> Result<SegmentedTensor> {
    let shape = t.data.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::shape("intra_block_pass", &shape, &[branch.feature_dim()]));
    }
    let (s, l, b, d) = split_batch(&shape);
    let x = t
        .data
        .reshape(&[s, l, b, d])?
        .permute(&[1, 0, 2, 3])?
        .reshape(&[l, s * b, d])?;
    let y = branch
        .forward(p, &x)?
        .reshape(&[l, s, b, d])?
        .permute(&[1, 0, 2, 3])?
        .reshape(&shape)?;
    Ok(t.with_data(y))
}

/// Runs `branch` across blocks, once per in-block position.
pub fn inter_block_pass(t: &SegmentedTensor, branch: &ResidualRnn, p: &Bound) -> Result<SegmentedTensor> {
    let shape = t.data.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::shape("inter_block_pass", &shape, &[branch.feature_dim()]));
    }
    let (s, l, b, d) = split_batch(&shape);
    let y = branch.forward(p, &t.data.reshape(&[s, l * b, d])?)?.reshape(&shape)?;
    Ok(t.with_data(y))
}

/// Intra-block then inter-block residual RNN.
#[derive(Debug, Clone)]
pub struct DprnnBlock {
    pub intra: ResidualRnn,
    pub inter: ResidualRnn,
}

impl DprnnBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        feature_dim: usize,
        hidden_dim: usize,
        inter_bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DprnnBlock {
            intra: ResidualRnn::new(reg, &format!("{name}.intra"), feature_dim, hidden_dim, true, rng)?,
            inter: ResidualRnn::new(
                reg,
                &format!("{name}.inter"),
                feature_dim,
                hidden_dim,
                inter_bidirectional,
                rng,
            )?,
        })
    }

    pub fn forward(&self, t: &SegmentedTensor, p: &Bound) -> Result<SegmentedTensor> {
        let q = intra_block_pass(t, &self.intra, p)?;
        inter_block_pass(&q, &self.inter, p)
    }
}
