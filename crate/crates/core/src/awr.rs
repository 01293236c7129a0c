//! Adaptive weighted decoding of dense maps into joint coordinates.
//!
//! Every dense pixel proposes a joint hypothesis recovered from its channels;
//! a masked softmax over per-pixel confidences turns the proposals into
//! weights, and the joint estimate is the weighted average
//! `p_j = sum_i w_i * h_i`. The average is differentiable in both the
//! hypotheses and the weights, so supervision on `p_j` reshapes the weight
//! field instead of being locked to a hand-picked decoding rule.

use crate::repcodec::{DenseGrid, DenseRep, RepTag};
use crate::{Error, Result};

/// Which pixels may carry weight when decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSupport {
    /// All hand-mask pixels: the learned-weighting default.
    HandMask,
    /// Every pixel, ignoring the mask (ablation switch; background pixels
    /// then contribute their usually-meaningless hypotheses).
    AllPixels,
    /// Hand-mask pixels whose confidence channel is strictly positive; the
    /// support a fixed (non-learned) decoder uses.
    KernelOnly,
}

/// Per-pixel joint hypotheses with their weighting inputs.
///
/// Layouts: `hypotheses[(j * H*W + pixel) * 3 + axis]`,
/// `weight_logits[j * H*W + pixel]`, `valid` likewise.
#[derive(Debug, Clone)]
pub struct CandidateField {
    pub n_joints: usize,
    pub size: usize,
    pub hypotheses: Vec<f64>,
    pub weight_logits: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CandidateField {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }
}

/// Recovers per-pixel hypotheses and weight logits from dense maps.
///
/// Recovery rules, per representation (pixel at `(u, v)` with depth `z_i`):
///
/// * `P`: hypothesis is the channel triple itself; logits come from
///   `extra_logits` (a learned weight head), or are uniform when absent.
/// * `H1`: `(u, v, depth_channel)`, logits from the probability channel.
/// * `H2`: `(u, v, z_i + depth_channel)`, logits from probability.
/// * `O1`/`O2`: plane `(u, v) - k(1-S) * V`; depth from the depth channel
///   (absolute for `O1`, `z_i +` offset for `O2`); logits from `S`.
/// * `O3`: `(u, v, z_i) - k(1-S) * V`; logits from `S`.
pub fn recover_candidates(
    dense: &DenseRep,
    extra_logits: Option<&[f64]>,
    grid: &DenseGrid,
    support: WeightSupport,
) -> Result<CandidateField> {
    let n = dense.size;
    if grid.size != n {
        return Err(Error::Shape(format!("grid size {} vs dense size {}", grid.size, n)));
    }
    let hw = n * n;
    let nj = dense.n_joints;
    if let Some(l) = extra_logits {
        if l.len() != nj * hw {
            return Err(Error::Shape(format!(
                "extra logits len {} expected {}",
                l.len(),
                nj * hw
            )));
        }
    }
    let k = dense.rep.kernel_k;
    let tag = dense.rep.tag;

    let mut field = CandidateField {
        n_joints: nj,
        size: n,
        hypotheses: vec![0.0; nj * hw * 3],
        weight_logits: vec![0.0; nj * hw],
        valid: vec![false; nj * hw],
    };

    for j in 0..nj {
        for iy in 0..n {
            for ix in 0..n {
                let pix = iy * n + ix;
                let fi = j * hw + pix;
                let (u, v) = grid.coord(ix, iy);
                let zi = grid.zhat[pix];

                let (h, logit, conf): ([f64; 3], f64, f64) = match tag {
                    RepTag::P => {
                        let h = [dense.at(j, 0, iy, ix), dense.at(j, 1, iy, ix), dense.at(j, 2, iy, ix)];
                        let l = extra_logits.map_or(0.0, |el| el[fi]);
                        (h, l, 1.0)
                    }
                    RepTag::H1 => {
                        let prob = dense.at(j, 0, iy, ix);
                        ([u, v, dense.at(j, 1, iy, ix)], prob, prob)
                    }
                    RepTag::H2 => {
                        let prob = dense.at(j, 0, iy, ix);
                        ([u, v, zi + dense.at(j, 1, iy, ix)], prob, prob)
                    }
                    RepTag::O1 | RepTag::O2 => {
                        let s = dense.at(j, 2, iy, ix);
                        let r = k * (1.0 - s);
                        let depth = dense.at(j, 3, iy, ix);
                        let z = if tag == RepTag::O2 { zi + depth } else { depth };
                        let h = [
                            u - r * dense.at(j, 0, iy, ix),
                            v - r * dense.at(j, 1, iy, ix),
                            z,
                        ];
                        (h, s, s)
                    }
                    RepTag::O3 => {
                        let s = dense.at(j, 3, iy, ix);
                        let r = k * (1.0 - s);
                        let h = [
                            u - r * dense.at(j, 0, iy, ix),
                            v - r * dense.at(j, 1, iy, ix),
                            zi - r * dense.at(j, 2, iy, ix),
                        ];
                        (h, s, s)
                    }
                };

                field.hypotheses[fi * 3..fi * 3 + 3].copy_from_slice(&h);
                field.weight_logits[fi] = logit;
                field.valid[fi] = match support {
                    WeightSupport::HandMask => grid.mask[pix],
                    WeightSupport::AllPixels => true,
                    WeightSupport::KernelOnly => grid.mask[pix] && conf > 0.0,
                };
            }
        }
    }
    Ok(field)
}

/// Masked, shift-invariant softmax at a given temperature.
///
/// Invalid entries get weight exactly 0; valid weights are positive and sum
/// to 1. The maximum valid logit is subtracted before exponentiation, making
/// the result invariant to a common logit shift and safe against overflow.
pub fn softmax_weights(logits: &[f64], valid: &[bool], temperature: f64) -> Result<Vec<f64>> {
    if logits.len() != valid.len() {
        return Err(Error::Shape(format!(
            "logits len {} vs valid len {}",
            logits.len(),
            valid.len()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArg(format!("temperature must be positive, got {temperature}")));
    }
    let mut max = f64::NEG_INFINITY;
    for (l, &m) in logits.iter().zip(valid) {
        if m && *l > max {
            max = *l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidArg("softmax over empty support".into()));
    }
    let mut w = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if valid[i] {
            let e = ((logits[i] - max) / temperature).exp();
            w[i] = e;
            sum += e;
        }
    }
    for wi in w.iter_mut() {
        *wi /= sum;
    }
    Ok(w)
}

/// Linear normalization of non-negative confidences over valid pixels.
/// Used by fixed decoders and ground-truth decoding, where the confidence
/// channel is already a proper (unnormalized) weight.
pub fn linear_weights(values: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if values.len() != valid.len() {
        return Err(Error::Shape(format!(
            "values len {} vs valid len {}",
            values.len(),
            valid.len()
        )));
    }
    let mut sum = 0.0;
    for i in 0..values.len() {
        if valid[i] {
            if values[i] < 0.0 {
                return Err(Error::InvalidArg(format!(
                    "linear weights need non-negative values, got {}",
                    values[i]
                )));
            }
            sum += values[i];
        }
    }
    if sum <= 0.0 {
        return Err(Error::InvalidArg("linear weights over empty support".into()));
    }
    let mut w = vec![0.0; values.len()];
    for i in 0..values.len() {
        if valid[i] {
            w[i] = values[i] / sum;
        }
    }
    Ok(w)
}

/// Fuses candidates into one estimate per joint: `p_j = sum_i w_i h_i` with
/// softmax weights over the valid pixels.
pub fn awr_aggregate(cands: &CandidateField, temperature: f64) -> Result<Vec<[f64; 3]>> {
    let hw = cands.pixels();
    let mut out = Vec::with_capacity(cands.n_joints);
    for j in 0..cands.n_joints {
        let sl = j * hw..(j + 1) * hw;
        let w = softmax_weights(&cands.weight_logits[sl.clone()], &cands.valid[sl.clone()], temperature)
            .map_err(|e| match e {
                Error::InvalidArg(msg) if msg.contains("empty support") => {
                    Error::UndecodableJoint { joint: j }
                }
                other => other,
            })?;
        let mut p = [0.0; 3];
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let h = &cands.hypotheses[(j * hw + i) * 3..(j * hw + i) * 3 + 3];
                p[0] += wi * h[0];
                p[1] += wi * h[1];
                p[2] += wi * h[2];
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Exact cotangents of [`awr_aggregate`] with respect to the hypotheses and
/// the weight logits.
///
/// With `w = softmax(l / T)` and `p = sum w_i h_i`, an upstream gradient `g`
/// on `p` pulls back to `dL/dh_i = w_i * g` and
/// `dL/dl_i = (w_i / T) * (h_i - p) . g`. Invalid pixels receive zeros.
pub fn awr_gradients(
    cands: &CandidateField,
    temperature: f64,
    upstream: &[[f64; 3]],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if upstream.len() != cands.n_joints {
        return Err(Error::Shape(format!(
            "upstream len {} vs {} joints",
            upstream.len(),
            cands.n_joints
        )));
    }
    let hw = cands.pixels();
    let mut grad_h = vec![0.0; cands.hypotheses.len()];
    let mut grad_l = vec![0.0; cands.weight_logits.len()];
    for j in 0..cands.n_joints {
        let sl = j * hw..(j + 1) * hw;
        let w = softmax_weights(&cands.weight_logits[sl.clone()], &cands.valid[sl], temperature)
            .map_err(|e| match e {
                Error::InvalidArg(msg) if msg.contains("empty support") => {
                    Error::UndecodableJoint { joint: j }
                }
                other => other,
            })?;
        let mut p = [0.0; 3];
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let h = &cands.hypotheses[(j * hw + i) * 3..(j * hw + i) * 3 + 3];
                for a in 0..3 {
                    p[a] += wi * h[a];
                }
            }
        }
        let g = upstream[j];
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let base = (j * hw + i) * 3;
                let h = &cands.hypotheses[base..base + 3];
                let mut dot = 0.0;
                for a in 0..3 {
                    grad_h[base + a] = wi * g[a];
                    dot += (h[a] - p[a]) * g[a];
                }
                grad_l[j * hw + i] = wi / temperature * dot;
            }
        }
    }
    Ok((grad_h, grad_l))
}

/// Fixed decoding without learned weights, the way detection-style methods
/// read dense maps: the argmax pixel for probability maps, linear
/// closeness-weighted averaging for offset maps, and a plain mean for `P`.
pub fn detection_decode(dense: &DenseRep, grid: &DenseGrid) -> Result<Vec<[f64; 3]>> {
    // Only offset closeness carries a positive-support restriction; argmax
    // over a heatmap (and the plain mean for P) runs on the whole hand mask,
    // so maps whose values drift negative stay decodable.
    let support = match dense.rep.tag {
        RepTag::P | RepTag::H1 | RepTag::H2 => WeightSupport::HandMask,
        RepTag::O1 | RepTag::O2 | RepTag::O3 => WeightSupport::KernelOnly,
    };
    let cands = recover_candidates(dense, None, grid, support)?;
    let hw = cands.pixels();
    let mut out = Vec::with_capacity(cands.n_joints);
    for j in 0..cands.n_joints {
        let valid = &cands.valid[j * hw..(j + 1) * hw];
        let logits = &cands.weight_logits[j * hw..(j + 1) * hw];
        let p = match dense.rep.tag {
            RepTag::H1 | RepTag::H2 => {
                // Maximum-response pixel; ties resolve to the first index.
                let mut best: Option<usize> = None;
                for i in 0..hw {
                    if valid[i] && best.map_or(true, |b| logits[i] > logits[b]) {
                        best = Some(i);
                    }
                }
                let i = best.ok_or(Error::UndecodableJoint { joint: j })?;
                let h = &cands.hypotheses[(j * hw + i) * 3..(j * hw + i) * 3 + 3];
                [h[0], h[1], h[2]]
            }
            _ => {
                let values: Vec<f64> = match dense.rep.tag {
                    RepTag::P => valid.iter().map(|&m| f64::from(m)).collect(),
                    _ => logits.to_vec(),
                };
                let w = linear_weights(&values, valid)
                    .map_err(|_| Error::UndecodableJoint { joint: j })?;
                let mut p = [0.0; 3];
                for (i, &wi) in w.iter().enumerate() {
                    if wi > 0.0 {
                        let h = &cands.hypotheses[(j * hw + i) * 3..(j * hw + i) * 3 + 3];
                        for a in 0..3 {
                            p[a] += wi * h[a];
                        }
                    }
                }
                p
            }
        };
        out.push(p);
    }
    Ok(out)
}
