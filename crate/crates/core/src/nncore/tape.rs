//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations append value nodes and a backward closure; [`Tape::backward`]
//! walks the tape in reverse creation order (already a topological order)
//! and accumulates cotangents additively, so shared inputs and fan-out work
//! without bookkeeping. All math is f64.

use crate::awr::{self, WeightSupport};
use crate::nncore::heads::{assemble_dense, head_spec, p_logits, scatter_head_grads};
use crate::nncore::tensor::Tensor;
use crate::repcodec::{DenseGrid, RepType};
use crate::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    #[inline]
    pub fn id(self) -> usize {
        self.0
    }
}

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut [Tensor])>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    /// When set, every op verifies its output is finite and errors otherwise.
    checked: bool,
}

/// Pointwise loss flavour for [`Tape::loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Huber-style: `0.5 d^2 / delta` for `|d| < delta`, else `|d| - delta/2`.
    /// Continuously differentiable at the crossover.
    SmoothL1 { delta: f64 },
    /// Plain squared error `d^2`.
    L2,
}

impl LossKind {
    #[inline]
    fn eval(self, d: f64) -> f64 {
        match self {
            LossKind::SmoothL1 { delta } => {
                if d.abs() < delta {
                    0.5 * d * d / delta
                } else {
                    d.abs() - 0.5 * delta
                }
            }
            LossKind::L2 => d * d,
        }
    }

    #[inline]
    fn slope(self, d: f64) -> f64 {
        match self {
            LossKind::SmoothL1 { delta } => {
                if d.abs() < delta {
                    d / delta
                } else {
                    d.signum()
                }
            }
            LossKind::L2 => 2.0 * d,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that verifies every op output is finite (gradient-check mode).
    pub fn new_checked() -> Self {
        Tape { checked: true, ..Tape::default() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>, op: &'static str) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.values.push(value);
        self.backs.push(back);
        Ok(Var(self.values.len() - 1))
    }

    /// Leaf with no gradient of interest (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, None, "constant")
    }

    /// Leaf whose gradient the caller will read after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, None, "param")
    }

    /// 2D cross-correlation: `x [C,H,W] * w [O,C,kh,kw] + b [O]`, zero
    /// padding `pad`, stride `stride`; output `[O, OH, OW]` with
    /// `OH = (H + 2*pad - kh) / stride + 1` (floor).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects x [C,H,W], w [O,C,kh,kw], b [O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (c, h, wid) = (xs[0], xs[1], xs[2]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c || bs[0] != o {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: x has {c}, w expects {wc}, bias {} for {o} outputs",
                bs[0]
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} stride {stride} does not fit {h}x{wid} with pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;

        let y = conv2d_forward(
            self.values[x.0].data(),
            self.values[w.0].data(),
            self.values[b.0].data(),
            [c, h, wid],
            [o, kh, kw],
            stride,
            pad,
        );
        let out = Tensor::new(vec![o, oh, ow], y)?;

        let (xid, wid_, bid) = (x.0, w.0, b.0);
        let dims = ([c, h, wid], [o, kh, kw], stride, pad);
        let back: BackFn = Box::new(move |values, gy, grads| {
            let (xd, wd) = (values[xid].data(), values[wid_].data());
            // Split the grads array so x/w/b accumulators can be borrowed
            // together no matter their tape order.
            let gyd = gy.data();
            conv2d_backward(xd, wd, gyd, dims, xid, wid_, bid, grads);
        });
        self.push(out, Some(back), "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y: Vec<f64> = self.values[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(self.values[x.0].shape().to_vec(), y)?;
        let xid = x.0;
        let back: BackFn = Box::new(move |values, gy, grads| {
            let xd = values[xid].data();
            let g = grads[xid].data_mut();
            for i in 0..xd.len() {
                if xd[i] > 0.0 {
                    g[i] += gy.data()[i];
                }
            }
        });
        self.push(out, Some(back), "relu")
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]` to `[C,2H,2W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("upsample2x expects [C,H,W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.values[x.0].data();
        let mut y = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for iy in 0..h {
                let src = (ci * h + iy) * w;
                let d0 = (ci * 2 * h + 2 * iy) * 2 * w;
                let d1 = d0 + 2 * w;
                for ix in 0..w {
                    let v = xd[src + ix];
                    y[d0 + 2 * ix] = v;
                    y[d0 + 2 * ix + 1] = v;
                    y[d1 + 2 * ix] = v;
                    y[d1 + 2 * ix + 1] = v;
                }
            }
        }
        let out = Tensor::new(vec![c, 2 * h, 2 * w], y)?;
        let xid = x.0;
        let back: BackFn = Box::new(move |_values, gy, grads| {
            let g = grads[xid].data_mut();
            let gyd = gy.data();
            for ci in 0..c {
                for iy in 0..h {
                    let dst = (ci * h + iy) * w;
                    let s0 = (ci * 2 * h + 2 * iy) * 2 * w;
                    let s1 = s0 + 2 * w;
                    for ix in 0..w {
                        g[dst + ix] +=
                            gyd[s0 + 2 * ix] + gyd[s0 + 2 * ix + 1] + gyd[s1 + 2 * ix] + gyd[s1 + 2 * ix + 1];
                    }
                }
            }
        });
        self.push(out, Some(back), "upsample2x")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let y: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, z)| x + z)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), y)?;
        let (aid, bid) = (a.0, b.0);
        let back: BackFn = Box::new(move |_values, gy, grads| {
            let gyd = gy.data().to_vec();
            for (g, v) in grads[aid].data_mut().iter_mut().zip(&gyd) {
                *g += v;
            }
            for (g, v) in grads[bid].data_mut().iter_mut().zip(&gyd) {
                *g += v;
            }
        });
        self.push(out, Some(back), "add")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let y: Vec<f64> = self.values[a.0].data().iter().map(|&v| c * v).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), y)?;
        let aid = a.0;
        let back: BackFn = Box::new(move |_values, gy, grads| {
            let g = grads[aid].data_mut();
            for (gi, &v) in g.iter_mut().zip(gy.data()) {
                *gi += c * v;
            }
        });
        self.push(out, Some(back), "scale")
    }

    /// Weighted mean pointwise loss between `pred` and a constant target:
    /// `sum_i w_i * loss(pred_i - t_i) / sum_i w_i`. `weights` of `None`
    /// means uniform (a plain mean); weights must be non-negative with a
    /// positive sum.
    pub fn loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        weights: Option<&Tensor>,
        kind: LossKind,
    ) -> Result<Var> {
        let ps = self.values[pred.0].shape();
        if ps != target.shape() {
            return Err(Error::Shape(format!(
                "loss target shape {:?} vs pred {:?}",
                target.shape(),
                ps
            )));
        }
        if let LossKind::SmoothL1 { delta } = kind {
            if !(delta.is_finite() && delta > 0.0) {
                return Err(Error::InvalidArg(format!("smooth-l1 delta must be positive, got {delta}")));
            }
        }
        let wsum = match weights {
            Some(w) => {
                if w.shape() != ps {
                    return Err(Error::Shape(format!(
                        "loss weights shape {:?} vs pred {:?}",
                        w.shape(),
                        ps
                    )));
                }
                if w.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidArg("loss weights must be non-negative".into()));
                }
                let s: f64 = w.data().iter().sum();
                if s <= 0.0 {
                    return Err(Error::InvalidArg("loss weights sum to zero".into()));
                }
                s
            }
            None => target.numel() as f64,
        };

        let pd = self.values[pred.0].data();
        let mut acc = 0.0;
        match weights {
            Some(w) => {
                for i in 0..pd.len() {
                    let wi = w.data()[i];
                    if wi != 0.0 {
                        acc += wi * kind.eval(pd[i] - target.data()[i]);
                    }
                }
            }
            None => {
                for i in 0..pd.len() {
                    acc += kind.eval(pd[i] - target.data()[i]);
                }
            }
        }
        let out = Tensor::scalar(acc / wsum);

        let pid = pred.0;
        let t = target.clone();
        let w = weights.cloned();
        let back: BackFn = Box::new(move |values, gy, grads| {
            let scale = gy.item() / wsum;
            let pd = values[pid].data();
            let g = grads[pid].data_mut();
            match &w {
                Some(w) => {
                    for i in 0..pd.len() {
                        let wi = w.data()[i];
                        if wi != 0.0 {
                            g[i] += scale * wi * kind.slope(pd[i] - t.data()[i]);
                        }
                    }
                }
                None => {
                    for i in 0..pd.len() {
                        g[i] += scale * kind.slope(pd[i] - t.data()[i]);
                    }
                }
            }
        });
        self.push(out, Some(back), "loss")
    }

    /// Differentiable dense-map decode: packs head outputs into dense maps,
    /// recovers per-pixel hypotheses, and fuses them with a masked softmax
    /// over the chosen support. Output is `[J, 3]` in normalized crop space.
    ///
    /// Heads must be `[channels, H, W]` tensors matching the representation's
    /// head list. The backward pass routes cotangents through the exact
    /// decode Jacobian onto every head.
    pub fn awr_decode(
        &mut self,
        rep: RepType,
        n_joints: usize,
        heads: &[Var],
        grid: &DenseGrid,
        support: WeightSupport,
        temperature: f64,
    ) -> Result<Var> {
        rep.validate()?;
        let spec = head_spec(rep.tag);
        if heads.len() != spec.len() {
            return Err(Error::Shape(format!(
                "{} expects {} heads, got {}",
                rep.tag,
                spec.len(),
                heads.len()
            )));
        }
        let size = grid.size;
        for (h, kind) in spec.iter().enumerate() {
            let s = self.values[heads[h].0].shape();
            let want = [kind.channels(n_joints), size, size];
            if s != want {
                return Err(Error::Shape(format!(
                    "head {h} of {} has shape {s:?}, expected {want:?}",
                    rep.tag
                )));
            }
        }

        let head_ids: Vec<usize> = heads.iter().map(|v| v.0).collect();
        let decode = {
            let grid = grid.clone();
            move |values: &[Tensor]| -> Result<(crate::repcodec::DenseRep, awr::CandidateField)> {
                let bufs: Vec<&[f64]> = head_ids.iter().map(|&id| values[id].data()).collect();
                let dense = assemble_dense(rep, n_joints, size, &bufs)?;
                let logits = p_logits(rep.tag, &bufs);
                let cands = awr::recover_candidates(&dense, logits, &grid, support)?;
                Ok((dense, cands))
            }
        };

        let (_, cands) = decode(&self.values)?;
        let fused = awr::awr_aggregate(&cands, temperature)?;
        let mut data = Vec::with_capacity(n_joints * 3);
        for p in &fused {
            data.extend_from_slice(p);
        }
        let out = Tensor::new(vec![n_joints, 3], data)?;

        let head_ids: Vec<usize> = heads.iter().map(|v| v.0).collect();
        let back: BackFn = Box::new(move |values, gy, grads| {
            // Recompute the candidate field from the stored head values; the
            // decode is cheap next to the convolutions that feed it.
            let (dense, cands) = decode(values).expect("decode succeeded in forward");
            let gyd = gy.data();
            let upstream: Vec<[f64; 3]> =
                (0..n_joints).map(|j| [gyd[j * 3], gyd[j * 3 + 1], gyd[j * 3 + 2]]).collect();
            let (gh, gl) = awr::awr_gradients(&cands, temperature, &upstream)
                .expect("gradients of a decodable field");
            // Scatter into scratch buffers, then accumulate; sidesteps the
            // aliasing question if two heads share a tape node.
            let mut local: Vec<Vec<f64>> =
                head_ids.iter().map(|&id| vec![0.0; values[id].numel()]).collect();
            let mut bufs: Vec<&mut [f64]> = local.iter_mut().map(Vec::as_mut_slice).collect();
            scatter_head_grads(&dense, &cands, &gh, &gl, &mut bufs);
            for (i, &id) in head_ids.iter().enumerate() {
                for (g, v) in grads[id].data_mut().iter_mut().zip(&local[i]) {
                    *g += v;
                }
            }
        });
        self.push(out, Some(back), "awr_decode")
    }

    /// Runs reverse accumulation from a scalar loss; returns one gradient
    /// tensor per tape node (zeros where nothing flows).
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Tensor> = self.values.iter().map(Tensor::zeros_like).collect();
        grads[loss.0].data_mut()[0] = 1.0;
        for id in (0..=loss.0).rev() {
            if let Some(back) = &self.backs[id] {
                let g = std::mem::take(&mut grads[id]);
                back(&self.values, &g, &mut grads);
            }
        }
        Ok(grads)
    }
}

fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    [c, h, width]: [usize; 3],
    [o, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let plane = &mut y[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(b[oc]);
        for ic in 0..c {
            let xplane = &x[ic * h * width..(ic + 1) * h * width];
            let wbase = ((oc * c) + ic) * kh * kw;
            for ky in 0..kh {
                // Output rows whose sampled input row iy = oy*stride + ky - pad
                // lands inside the image.
                let oy_lo = if ky >= pad { 0 } else { (pad - ky + stride - 1) / stride };
                let oy_hi_excl = ((h + pad - ky - 1) / stride + 1).min(oh);
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox_lo = if kx >= pad { 0 } else { (pad - kx + stride - 1) / stride };
                    let ox_hi_excl = ((width + pad - kx - 1) / stride + 1).min(ow);
                    for oy in oy_lo..oy_hi_excl {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xplane[iy * width..(iy + 1) * width];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            for ox in ox_lo..ox_hi_excl {
                                orow[ox] += wv * xrow[(ox as isize + shift) as usize];
                            }
                        } else {
                            for ox in ox_lo..ox_hi_excl {
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    ([c, h, width], [o, kh, kw], stride, pad): ([usize; 3], [usize; 3], usize, usize),
    xid: usize,
    wid: usize,
    bid: usize,
    grads: &mut [Tensor],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;

    // Bias: plain sums over output planes.
    {
        let gb = grads[bid].data_mut();
        for oc in 0..o {
            let mut s = 0.0;
            for v in &gy[oc * oh * ow..(oc + 1) * oh * ow] {
                s += v;
            }
            gb[oc] += s;
        }
    }

    // Weights: correlate input with output gradient.
    {
        let gw = grads[wid].data_mut();
        for oc in 0..o {
            let gplane = &gy[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                let xplane = &x[ic * h * width..(ic + 1) * h * width];
                let wbase = ((oc * c) + ic) * kh * kw;
                for ky in 0..kh {
                    let oy_lo = if ky >= pad { 0 } else { (pad - ky + stride - 1) / stride };
                    let oy_hi_excl = ((h + pad - ky - 1) / stride + 1).min(oh);
                    for kx in 0..kw {
                        let ox_lo = if kx >= pad { 0 } else { (pad - kx + stride - 1) / stride };
                        let ox_hi_excl = ((width + pad - kx - 1) / stride + 1).min(ow);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi_excl {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xplane[iy * width..(iy + 1) * width];
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi_excl {
                                acc += grow[ox] * xrow[ox * stride + kx - pad];
                            }
                        }
                        gw[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }

    // Input: scatter the weighted output gradient back.
    {
        let gx = grads[xid].data_mut();
        for oc in 0..o {
            let gplane = &gy[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                let xbase = ic * h * width;
                let wbase = ((oc * c) + ic) * kh * kw;
                for ky in 0..kh {
                    let oy_lo = if ky >= pad { 0 } else { (pad - ky + stride - 1) / stride };
                    let oy_hi_excl = ((h + pad - ky - 1) / stride + 1).min(oh);
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let ox_lo = if kx >= pad { 0 } else { (pad - kx + stride - 1) / stride };
                        let ox_hi_excl = ((width + pad - kx - 1) / stride + 1).min(ow);
                        for oy in oy_lo..oy_hi_excl {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &mut gx[xbase + iy * width..xbase + (iy + 1) * width];
                            for ox in ox_lo..ox_hi_excl {
                                xrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv2d_matches_hand_computed_example() {
        // 1x3x3 input, single 2x2 kernel, no pad, stride 1.
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap())
            .unwrap();
        let w = tape
            .param(Tensor::new(vec![1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap())
            .unwrap();
        let b = tape.param(Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        // y = x[i] + x[i+diag] + 0.5
        assert_eq!(tape.value(y).data(), &[6.5, 8.5, 12.5, 14.5]);
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 8, 8])).unwrap();
        let w = tape.param(Tensor::zeros(vec![4, 2, 3, 3])).unwrap();
        let b = tape.param(Tensor::zeros(vec![4])).unwrap();
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 4, 4]);
        let y2 = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y2).shape(), &[4, 8, 8]);
    }

    #[test]
    fn conv2d_rejects_mismatched_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 4, 4])).unwrap();
        let w = tape.param(Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
        let b = tape.param(Tensor::zeros(vec![2])).unwrap();
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn upsample_doubles_and_backward_sums_quads() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        // Sum(y) as loss: every input grad is 4.
        let target = Tensor::zeros(vec![1, 4, 4]);
        let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
        let grads = tape.backward(l).unwrap();
        // d/dx of mean(y^2) pulled back: each x contributes 4 pixels.
        let g = grads[x.id()].data();
        for (i, &xv) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let expect = 4.0 * 2.0 * xv / 16.0;
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_value_and_kink_continuity() {
        let k = LossKind::SmoothL1 { delta: 1.0 };
        assert_eq!(k.eval(0.0), 0.0);
        assert!((k.eval(0.5) - 0.125).abs() < 1e-15);
        assert!((k.eval(2.0) - 1.5).abs() < 1e-15);
        // C1 at |d| = delta: slope approaches 1 from both sides.
        assert!((k.slope(1.0 - 1e-9) - 1.0).abs() < 1e-8);
        assert_eq!(k.slope(1.5), 1.0);
        assert_eq!(k.slope(-2.0), -1.0);
    }

    #[test]
    fn weighted_loss_ignores_zero_weight_pixels() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::new(vec![4], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let target = Tensor::new(vec![4], vec![0., 0., 0., 0.]).unwrap();
        let weights = Tensor::new(vec![4], vec![1., 0., 1., 0.]).unwrap();
        let l = tape.loss(pred, &target, Some(&weights), LossKind::L2).unwrap();
        // (1 + 9) / 2
        assert!((tape.value(l).item() - 5.0).abs() < 1e-12);
        let grads = tape.backward(l).unwrap();
        let g = grads[pred.id()].data();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!((g[0] - 1.0).abs() < 1e-12); // 2*1/2
    }

    #[test]
    fn loss_validates_weights() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::zeros(vec![3])).unwrap();
        let target = Tensor::zeros(vec![3]);
        let neg = Tensor::new(vec![3], vec![1., -1., 0.]).unwrap();
        assert!(tape.loss(pred, &target, Some(&neg), LossKind::L2).is_err());
        let zero = Tensor::zeros(vec![3]);
        assert!(tape.loss(pred, &target, Some(&zero), LossKind::L2).is_err());
    }

    #[test]
    fn checked_tape_rejects_non_finite() {
        let mut tape = Tape::new_checked();
        let x = tape.param(Tensor::new(vec![1], vec![1e308]).unwrap()).unwrap();
        // 1e308 * 10 overflows to inf.
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_accumulates_through_shared_inputs() {
        // y = x + x; L = mean((y - 0)^2) with x scalar v: L = 4v^2,
        // dL/dx = 8v.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1], vec![1.5]).unwrap()).unwrap();
        let y = tape.add(x, x).unwrap();
        let l = tape.loss(y, &Tensor::zeros(vec![1]), None, LossKind::L2).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!((grads[x.id()].data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x0 = rand_tensor(&mut rng, vec![2, 5, 5]);
            let w0 = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
            let b0 = rand_tensor(&mut rng, vec![3]);
            let target = rand_tensor(
                &mut rng,
                vec![3, (5 + 2 * pad - 3) / stride + 1, (5 + 2 * pad - 3) / stride + 1],
            );

            let eval = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
                let mut tape = Tape::new();
                let x = tape.param(xv.clone()).unwrap();
                let w = tape.param(wv.clone()).unwrap();
                let b = tape.param(bv.clone()).unwrap();
                let y = tape.conv2d(x, w, b, stride, pad).unwrap();
                let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
                let grads = tape.backward(l).unwrap();
                (
                    tape.value(l).item(),
                    grads[x.id()].data().to_vec(),
                    grads[w.id()].data().to_vec(),
                    grads[b.id()].data().to_vec(),
                )
            };
            let (_, gx, gw, gb) = eval(&x0, &w0, &b0);

            let eps = 1e-6;
            let check = |which: usize, idx: usize, analytic: f64| {
                let mut xp = x0.clone();
                let mut wp = w0.clone();
                let mut bp = b0.clone();
                let mut xm = x0.clone();
                let mut wm = w0.clone();
                let mut bm = b0.clone();
                match which {
                    0 => {
                        xp.data_mut()[idx] += eps;
                        xm.data_mut()[idx] -= eps;
                    }
                    1 => {
                        wp.data_mut()[idx] += eps;
                        wm.data_mut()[idx] -= eps;
                    }
                    _ => {
                        bp.data_mut()[idx] += eps;
                        bm.data_mut()[idx] -= eps;
                    }
                }
                let (lp, ..) = eval(&xp, &wp, &bp);
                let (lm, ..) = eval(&xm, &wm, &bm);
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - analytic).abs() < 1e-6 * (1.0 + fd.abs().max(analytic.abs())),
                    "stride {stride} pad {pad} which {which} idx {idx}: fd {fd} vs {analytic}"
                );
            };
            for idx in [0, 7, 23, 49] {
                check(0, idx, gx[idx]);
            }
            for idx in [0, 11, 35, 53] {
                check(1, idx, gw[idx]);
            }
            for idx in 0..3 {
                check(2, idx, gb[idx]);
            }
        }
    }
}
