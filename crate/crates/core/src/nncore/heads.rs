//! Mapping between model output heads and dense representation channels.
//!
//! Each representation is produced by a fixed list of convolutional heads;
//! this module is the single source of truth for that list, for packing head
//! outputs into a [`DenseRep`], and for routing decode gradients back to the
//! right head channels.

use crate::awr::CandidateField;
use crate::repcodec::{DenseRep, RepTag, RepType};
use crate::{Error, Result};

/// One output head of the dense network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Joint coordinates broadcast per pixel: `3 * J` channels, ordered
    /// `j * 3 + axis`.
    Pose,
    /// Learned per-pixel weight logits for `P`: `J` channels.
    WeightLogits,
    /// Gaussian probability: `J` channels.
    Prob,
    /// Absolute joint depth: `J` channels.
    DepthAbs,
    /// Joint depth relative to the pixel depth: `J` channels.
    DepthOff,
    /// Unit offset vector: `dims * J` channels, ordered `j * dims + c`.
    UnitVec { dims: usize },
    /// Closeness: `J` channels.
    Closeness,
}

impl HeadKind {
    pub fn channels(self, n_joints: usize) -> usize {
        match self {
            HeadKind::Pose => 3 * n_joints,
            HeadKind::UnitVec { dims } => dims * n_joints,
            _ => n_joints,
        }
    }
}

/// The heads a representation needs, in canonical order.
pub fn head_spec(tag: RepTag) -> Vec<HeadKind> {
    match tag {
        RepTag::P => vec![HeadKind::Pose, HeadKind::WeightLogits],
        RepTag::H1 => vec![HeadKind::Prob, HeadKind::DepthAbs],
        RepTag::H2 => vec![HeadKind::Prob, HeadKind::DepthOff],
        RepTag::O1 => vec![HeadKind::UnitVec { dims: 2 }, HeadKind::Closeness, HeadKind::DepthAbs],
        RepTag::O2 => vec![HeadKind::UnitVec { dims: 2 }, HeadKind::Closeness, HeadKind::DepthOff],
        RepTag::O3 => vec![HeadKind::UnitVec { dims: 3 }, HeadKind::Closeness],
    }
}

/// For each head, the dense channel each of its per-joint channels feeds,
/// or None for heads that bypass the channel planes (weight logits).
fn channel_routes(tag: RepTag) -> Vec<Option<Vec<usize>>> {
    match tag {
        RepTag::P => vec![Some(vec![0, 1, 2]), None],
        RepTag::H1 | RepTag::H2 => vec![Some(vec![0]), Some(vec![1])],
        RepTag::O1 | RepTag::O2 => vec![Some(vec![0, 1]), Some(vec![2]), Some(vec![3])],
        RepTag::O3 => vec![Some(vec![0, 1, 2]), Some(vec![3])],
    }
}

/// Packs per-head channel buffers into a [`DenseRep`].
///
/// Each `values[h]` holds the h-th head's output, `channels x H*W` row-major
/// with the per-joint channel order documented on [`HeadKind`].
pub fn assemble_dense(
    rep: RepType,
    n_joints: usize,
    size: usize,
    values: &[&[f64]],
) -> Result<DenseRep> {
    let spec = head_spec(rep.tag);
    if values.len() != spec.len() {
        return Err(Error::Shape(format!(
            "{} expects {} heads, got {}",
            rep.tag,
            spec.len(),
            values.len()
        )));
    }
    let hw = size * size;
    let mut dense = DenseRep::zeros(rep, n_joints, size);
    let routes = channel_routes(rep.tag);
    for (h, (kind, route)) in spec.iter().zip(&routes).enumerate() {
        let want = kind.channels(n_joints) * hw;
        if values[h].len() != want {
            return Err(Error::Shape(format!(
                "head {h} of {} holds {} values, expected {want}",
                rep.tag,
                values[h].len()
            )));
        }
        let Some(route) = route else { continue };
        let per_joint = route.len();
        for j in 0..n_joints {
            for (c_local, &c_dense) in route.iter().enumerate() {
                let src = (j * per_joint + c_local) * hw;
                let dst = dense.idx(j, c_dense, 0, 0);
                dense.data[dst..dst + hw].copy_from_slice(&values[h][src..src + hw]);
            }
        }
    }
    Ok(dense)
}

/// Splits a dense map into per-head training targets, the inverse of
/// [`assemble_dense`]. Heads without a dense channel (weight logits) get
/// `None`: they are trained only through the decode loss.
pub fn split_dense(dense: &DenseRep) -> Vec<Option<Vec<f64>>> {
    let spec = head_spec(dense.rep.tag);
    let routes = channel_routes(dense.rep.tag);
    let hw = dense.size * dense.size;
    let nj = dense.n_joints;
    spec.iter()
        .zip(&routes)
        .map(|(kind, route)| {
            let route = route.as_ref()?;
            let per_joint = route.len();
            let mut out = vec![0.0; kind.channels(nj) * hw];
            for j in 0..nj {
                for (c_local, &c_dense) in route.iter().enumerate() {
                    let dst = (j * per_joint + c_local) * hw;
                    let src = dense.idx(j, c_dense, 0, 0);
                    out[dst..dst + hw].copy_from_slice(&dense.data[src..src + hw]);
                }
            }
            Some(out)
        })
        .collect()
}

/// The weight-logit head's buffer, if this representation has one.
pub fn p_logits<'a>(tag: RepTag, values: &[&'a [f64]]) -> Option<&'a [f64]> {
    match tag {
        RepTag::P => Some(values[1]),
        _ => None,
    }
}

/// Routes decode cotangents back to head buffers.
///
/// `grad_h` and `grad_l` are the hypothesis/logit cotangents from the
/// weighted-average decode; this applies the chain rule through each
/// representation's recovery rule and accumulates into `head_grads`
/// (same layout as the head values).
pub fn scatter_head_grads(
    dense: &DenseRep,
    cands: &CandidateField,
    grad_h: &[f64],
    grad_l: &[f64],
    head_grads: &mut [&mut [f64]],
) {
    let tag = dense.rep.tag;
    let k = dense.rep.kernel_k;
    let n = dense.size;
    let hw = n * n;
    let nj = dense.n_joints;

    for j in 0..nj {
        for pix in 0..hw {
            let fi = j * hw + pix;
            if !cands.valid[fi] {
                continue;
            }
            let gh = &grad_h[fi * 3..fi * 3 + 3];
            let gl = grad_l[fi];
            let (iy, ix) = (pix / n, pix % n);
            match tag {
                RepTag::P => {
                    for a in 0..3 {
                        head_grads[0][(j * 3 + a) * hw + pix] += gh[a];
                    }
                    head_grads[1][j * hw + pix] += gl;
                }
                RepTag::H1 | RepTag::H2 => {
                    // Hypothesis plane is the pixel itself (constant); only
                    // depth flows, with unit slope for both absolute and
                    // pixel-relative depth.
                    head_grads[0][j * hw + pix] += gl;
                    head_grads[1][j * hw + pix] += gh[2];
                }
                RepTag::O1 | RepTag::O2 => {
                    let s = dense.at(j, 2, iy, ix);
                    let vu = dense.at(j, 0, iy, ix);
                    let vv = dense.at(j, 1, iy, ix);
                    let r = k * (1.0 - s);
                    head_grads[0][(j * 2) * hw + pix] += -r * gh[0];
                    head_grads[0][(j * 2 + 1) * hw + pix] += -r * gh[1];
                    head_grads[1][j * hw + pix] += k * (vu * gh[0] + vv * gh[1]) + gl;
                    head_grads[2][j * hw + pix] += gh[2];
                }
                RepTag::O3 => {
                    let s = dense.at(j, 3, iy, ix);
                    let r = k * (1.0 - s);
                    let mut vdotg = 0.0;
                    for a in 0..3 {
                        let va = dense.at(j, a, iy, ix);
                        head_grads[0][(j * 3 + a) * hw + pix] += -r * gh[a];
                        vdotg += va * gh[a];
                    }
                    head_grads[1][j * hw + pix] += k * vdotg + gl;
                }
            }
        }
    }
}
