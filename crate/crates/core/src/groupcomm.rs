//! Group communication: view each `N`-dim frame as `K` contiguous groups of
//! `M = N/K` features, let a small shared residual BLSTM run across the
//! group axis, and keep the groups apart so downstream layers stay `M` wide.

use rand::Rng;

use crate::dprnn::SegmentedTensor;
use crate::error::{Error, Result};
use crate::layers::ResidualRnn;
use crate::params::{Bound, ParamRegistry};

/// Segmented tensor whose feature axis is split as `[… × K × M]`.
#[derive(Debug, Clone)]
pub struct GroupedTensor {
    pub seg: SegmentedTensor,
    pub groups: usize,
    pub group_size: usize,
}

/// Group `i` holds features `[i·M, (i+1)·M)`.
pub fn group_split(t: &SegmentedTensor, groups: usize) -> Result<GroupedTensor> {
    let shape = t.data.shape();
    if shape.len() != 3 {
        return Err(Error::shape("group_split", shape, &[groups]));
    }
    let n = shape[2];
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(Error::config(
            "groups",
            format!("{groups} groups do not divide {n} features"),
        ));
    }
    let m = n / groups;
    let data = t.data.reshape(&[shape[0], shape[1], groups, m])?;
    Ok(GroupedTensor {
        seg: t.with_data(data),
        groups,
        group_size: m,
    })
}

/// Exact inverse of [`group_split`].
pub fn group_merge(g: &GroupedTensor) -> Result<SegmentedTensor> {
    let shape = g.seg.data.shape();
    if shape.len() != 4 || shape[2] != g.groups || shape[3] != g.group_size {
        return Err(Error::Contract(format!(
            "grouped tensor {shape:?} inconsistent with K={} M={}",
            g.groups, g.group_size
        )));
    }
    let data = g.seg.data.reshape(&[shape[0], shape[1], g.groups * g.group_size])?;
    Ok(g.seg.with_data(data))
}

/// Shared inter-group module: residual BLSTM(M → H_o) + FC + LN.
#[derive(Debug, Clone)]
pub struct GroupComm {
    pub branch: ResidualRnn,
}

impl GroupComm {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        group_size: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GroupComm {
            branch: ResidualRnn::new(reg, name, group_size, hidden_dim, true, rng)?,
        })
    }

    /// Independent of `K`.
    pub fn param_count(group_size: usize, hidden_dim: usize) -> usize {
        ResidualRnn::param_count(group_size, hidden_dim, true)
    }
}

/// At every (block, position) the `K` group vectors form a length-`K`
/// sequence in natural group order; the residual branch runs over it.
pub fn group_communicate(g: &GroupedTensor, comm: &GroupComm, p: &Bound) -> Result<GroupedTensor> {
    let shape = g.seg.data.shape().to_vec();
    if shape.len() != 4 || shape[3] != comm.branch.feature_dim() {
        return Err(Error::shape("group_communicate", &shape, &[comm.branch.feature_dim()]));
    }
    let (s, l, k, m) = (shape[0], shape[1], shape[2], shape[3]);
    let x = g.seg.data.permute(&[2, 0, 1, 3])?.reshape(&[k, s * l, m])?;
    let y = comm
        .branch
        .forward(p, &x)?
        .reshape(&[k, s, l, m])?
        .permute(&[1, 2, 0, 3])?;
    Ok(GroupedTensor {
        seg: g.seg.with_data(y),
        groups: g.groups,
        group_size: g.group_size,
    })
}
