//! Dense per-joint map representations and their codec.
//!
//! Six interchangeable encodings of a pose into `J x C x H x W` maps over the
//! dense grid. Positions live in normalized crop coordinates (plane and depth
//! in `[-1, 1]`). For a grid pixel `p_i` and joint `p_j` with distance
//! `d = ||p_i - p_j||` (2D in the crop plane, or 3D including depth):
//!
//! * closeness `S = (k - d) / k` inside the kernel radius `k`, else 0;
//! * unit offset `V = (p_i - p_j) / d`, with `V = 0` at `d = 0`;
//! * Gaussian probability `exp(-d^2 / (2 sigma^2))`.
//!
//! Channel layouts (off-mask pixels are zero everywhere):
//!
//! | tag | C | channels                                                     |
//! |-----|---|--------------------------------------------------------------|
//! | P   | 3 | joint coordinates broadcast over the hand mask               |
//! | H1  | 2 | 2D probability; absolute joint depth over kernel support     |
//! | H2  | 2 | 2D probability; joint depth minus pixel depth over support   |
//! | O1  | 4 | 2D unit offset (u, v); 2D closeness; absolute joint depth    |
//! | O2  | 4 | 2D unit offset (u, v); 2D closeness; depth offset            |
//! | O3  | 4 | 3D unit offset (u, v, z); 3D closeness                       |

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::awr;
use crate::geometry::{normalize_pose, CropFrame, HandPose};
use crate::{Error, Result};

/// Dimensionality of the distance used by a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    pub fn n(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepTag {
    P,
    H1,
    H2,
    O1,
    O2,
    O3,
}

impl RepTag {
    pub const ALL: [RepTag; 6] = [RepTag::P, RepTag::H1, RepTag::H2, RepTag::O1, RepTag::O2, RepTag::O3];

    pub fn channels(self) -> usize {
        match self {
            RepTag::P => 3,
            RepTag::H1 | RepTag::H2 => 2,
            RepTag::O1 | RepTag::O2 | RepTag::O3 => 4,
        }
    }

    /// Distance dimensionality used for probabilities/closeness.
    pub fn dims(self) -> Dims {
        match self {
            RepTag::O3 => Dims::Three,
            _ => Dims::Two,
        }
    }

    /// True when the depth channel stores joint depth relative to the pixel.
    pub fn depth_is_offset(self) -> bool {
        matches!(self, RepTag::H2 | RepTag::O2)
    }
}

impl fmt::Display for RepTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RepTag::P => "P",
            RepTag::H1 => "H1",
            RepTag::H2 => "H2",
            RepTag::O1 => "O1",
            RepTag::O2 => "O2",
            RepTag::O3 => "O3",
        };
        f.write_str(s)
    }
}

impl FromStr for RepTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(RepTag::P),
            "H1" | "h1" => Ok(RepTag::H1),
            "H2" | "h2" => Ok(RepTag::H2),
            "O1" | "o1" => Ok(RepTag::O1),
            "O2" | "o2" => Ok(RepTag::O2),
            "O3" | "o3" => Ok(RepTag::O3),
            other => Err(Error::InvalidArg(format!("unknown representation '{other}'"))),
        }
    }
}

/// A representation tag plus its codec parameters, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepType {
    pub tag: RepTag,
    /// Kernel radius bounding offset/closeness support.
    pub kernel_k: f64,
    /// Standard deviation of the probability channel's Gaussian.
    pub heat_sigma: f64,
}

impl RepType {
    pub fn new(tag: RepTag) -> Self {
        RepType { tag, kernel_k: 1.0, heat_sigma: 0.1 }
    }

    pub fn with_kernel(tag: RepTag, kernel_k: f64) -> Self {
        RepType { kernel_k, ..RepType::new(tag) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_k.is_finite() && self.kernel_k > 0.0) {
            return Err(Error::InvalidArg(format!("kernel_k must be positive, got {}", self.kernel_k)));
        }
        if !(self.heat_sigma.is_finite() && self.heat_sigma > 0.0) {
            return Err(Error::InvalidArg(format!("heat_sigma must be positive, got {}", self.heat_sigma)));
        }
        Ok(())
    }
}

/// The dense grid a representation lives on: pixel-centre coordinates plus
/// the normalized depth and hand mask resampled from a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub size: usize,
    pub zhat: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Normalized coordinate of pixel-centre `i` on an `n`-pixel axis.
#[inline]
pub fn grid_coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Resamples a crop to the dense resolution by nearest neighbour.
/// `dense_size` must divide the crop size so grids stay aligned.
pub fn dense_grid(crop: &CropFrame, dense_size: usize) -> Result<DenseGrid> {
    if dense_size == 0 || crop.size % dense_size != 0 {
        return Err(Error::InvalidArg(format!(
            "dense_size {} must divide crop size {}",
            dense_size, crop.size
        )));
    }
    let ratio = crop.size / dense_size;
    let mut zhat = Vec::with_capacity(dense_size * dense_size);
    let mut mask = Vec::with_capacity(dense_size * dense_size);
    for iy in 0..dense_size {
        let sy = iy * ratio + ratio / 2;
        for ix in 0..dense_size {
            let sx = ix * ratio + ratio / 2;
            let k = crop.idx(sx, sy);
            zhat.push(crop.depth[k]);
            mask.push(crop.mask[k]);
        }
    }
    Ok(DenseGrid { size: dense_size, zhat, mask })
}

impl DenseGrid {
    #[inline]
    pub fn coord(&self, ix: usize, iy: usize) -> (f64, f64) {
        (grid_coord(ix, self.size), grid_coord(iy, self.size))
    }
}

/// Offset field of one pose over a grid: for each joint and pixel, the raw
/// offset `p_i - p_j` inside the kernel radius (masked pixels only), else 0.
/// Layout: `[(j * H*W + pixel) * dims.n() + component]`.
pub fn offset_field(pose_norm: &[[f64; 3]], grid: &DenseGrid, k: f64, dims: Dims) -> Vec<f64> {
    let n = grid.size;
    let hw = n * n;
    let nd = dims.n();
    let mut out = vec![0.0; pose_norm.len() * hw * nd];
    for (j, joint) in pose_norm.iter().enumerate() {
        for iy in 0..n {
            for ix in 0..n {
                let pix = iy * n + ix;
                if !grid.mask[pix] {
                    continue;
                }
                let (u, v) = grid.coord(ix, iy);
                let mut off = [u - joint[0], v - joint[1], 0.0];
                if let Dims::Three = dims {
                    off[2] = grid.zhat[pix] - joint[2];
                }
                let d = norm(&off[..nd]);
                if d <= k {
                    let base = (j * hw + pix) * nd;
                    out[base..base + nd].copy_from_slice(&off[..nd]);
                }
            }
        }
    }
    out
}

/// Closeness and unit-offset fields of one pose over a grid.
///
/// Returns `(S, V)`: `S[j * H*W + pixel] = (k - d)/k` inside the kernel
/// (1 at the joint itself), and `V` the unit offset with the same layout as
/// [`offset_field`] (`V = 0` where the pixel coincides with the joint).
pub fn closeness_and_unit(
    pose_norm: &[[f64; 3]],
    grid: &DenseGrid,
    k: f64,
    dims: Dims,
) -> (Vec<f64>, Vec<f64>) {
    let n = grid.size;
    let hw = n * n;
    let nd = dims.n();
    let mut s = vec![0.0; pose_norm.len() * hw];
    let mut vu = vec![0.0; pose_norm.len() * hw * nd];
    for (j, joint) in pose_norm.iter().enumerate() {
        for iy in 0..n {
            for ix in 0..n {
                let pix = iy * n + ix;
                if !grid.mask[pix] {
                    continue;
                }
                let (u, v) = grid.coord(ix, iy);
                let mut off = [u - joint[0], v - joint[1], 0.0];
                if let Dims::Three = dims {
                    off[2] = grid.zhat[pix] - joint[2];
                }
                let d = norm(&off[..nd]);
                if d <= k {
                    s[j * hw + pix] = (k - d) / k;
                    if d > 0.0 {
                        let base = (j * hw + pix) * nd;
                        for c in 0..nd {
                            vu[base + c] = off[c] / d;
                        }
                    }
                }
            }
        }
    }
    (s, vu)
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A dense representation of one pose: `J x C x H x W`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRep {
    pub rep: RepType,
    pub n_joints: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseRepHeader {
    rep_type: RepTag,
    n_joints: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel_k: f64,
    heat_sigma: f64,
}

impl DenseRep {
    pub fn zeros(rep: RepType, n_joints: usize, size: usize) -> Self {
        let c = rep.tag.channels();
        DenseRep { rep, n_joints, size, data: vec![0.0; n_joints * c * size * size] }
    }

    #[inline]
    pub fn idx(&self, j: usize, c: usize, y: usize, x: usize) -> usize {
        ((j * self.rep.tag.channels() + c) * self.size + y) * self.size + x
    }

    #[inline]
    pub fn at(&self, j: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(j, c, y, x)]
    }

    /// Channel plane of one joint as a contiguous slice.
    pub fn plane(&self, j: usize, c: usize) -> &[f64] {
        let hw = self.size * self.size;
        let base = (j * self.rep.tag.channels() + c) * hw;
        &self.data[base..base + hw]
    }

    /// Writes a little-endian f32 blob prefixed by a length-framed JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DenseRepHeader {
            rep_type: self.rep.tag,
            n_joints: self.n_joints,
            channels: self.rep.tag.channels(),
            height: self.size,
            width: self.size,
            kernel_k: self.rep.kernel_k,
            heat_sigma: self.rep.heat_sigma,
        };
        let hbytes = serde_json::to_vec(&header)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(hbytes.len() as u32).to_le_bytes())?;
        f.write_all(&hbytes)?;
        let mut blob = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 4 {
            return Err(Error::Format("dense map file too short".into()));
        }
        let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if bytes.len() < 4 + hlen {
            return Err(Error::Format("dense map header truncated".into()));
        }
        let header: DenseRepHeader = serde_json::from_slice(&bytes[4..4 + hlen])?;
        if header.height != header.width {
            return Err(Error::Format("dense maps must be square".into()));
        }
        if header.channels != header.rep_type.channels() {
            return Err(Error::Format(format!(
                "channel count {} does not match representation {}",
                header.channels, header.rep_type
            )));
        }
        let n = header.n_joints * header.channels * header.height * header.width;
        let blob = &bytes[4 + hlen..];
        if blob.len() != n * 4 {
            return Err(Error::Format(format!(
                "dense map blob holds {} bytes, expected {}",
                blob.len(),
                n * 4
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        let rep = RepType { tag: header.rep_type, kernel_k: header.kernel_k, heat_sigma: header.heat_sigma };
        rep.validate()?;
        Ok(DenseRep { rep, n_joints: header.n_joints, size: header.height, data })
    }
}

/// Encodes a world-space pose into dense maps over the crop's dense grid.
pub fn encode(rep: RepType, pose: &HandPose, crop: &CropFrame, dense_size: usize) -> Result<DenseRep> {
    rep.validate()?;
    let grid = dense_grid(crop, dense_size)?;
    let pose_norm = normalize_pose(pose, crop);
    encode_norm(rep, &pose_norm, &grid)
}

/// Encodes an already-normalized pose over a prepared grid.
pub fn encode_norm(rep: RepType, pose_norm: &[[f64; 3]], grid: &DenseGrid) -> Result<DenseRep> {
    rep.validate()?;
    let n = grid.size;
    let hw = n * n;
    let k = rep.kernel_k;
    let two_sig_sq = 2.0 * rep.heat_sigma * rep.heat_sigma;
    let mut out = DenseRep::zeros(rep, pose_norm.len(), n);

    for (j, joint) in pose_norm.iter().enumerate() {
        for iy in 0..n {
            for ix in 0..n {
                let pix = iy * n + ix;
                if !grid.mask[pix] {
                    continue;
                }
                let (u, v) = grid.coord(ix, iy);
                let du = u - joint[0];
                let dv = v - joint[1];
                let dz = grid.zhat[pix] - joint[2];
                let d2 = (du * du + dv * dv).sqrt();
                match rep.tag {
                    RepTag::P => {
                        let base = out.idx(j, 0, iy, ix);
                        out.data[base] = joint[0];
                        out.data[base + hw] = joint[1];
                        out.data[base + 2 * hw] = joint[2];
                    }
                    RepTag::H1 | RepTag::H2 => {
                        let base = out.idx(j, 0, iy, ix);
                        out.data[base] = (-d2 * d2 / two_sig_sq).exp();
                        if d2 <= k {
                            out.data[base + hw] =
                                if rep.tag == RepTag::H2 { -dz } else { joint[2] };
                        }
                    }
                    RepTag::O1 | RepTag::O2 => {
                        if d2 <= k {
                            let base = out.idx(j, 0, iy, ix);
                            if d2 > 0.0 {
                                out.data[base] = du / d2;
                                out.data[base + hw] = dv / d2;
                            }
                            out.data[base + 2 * hw] = (k - d2) / k;
                            out.data[base + 3 * hw] =
                                if rep.tag == RepTag::O2 { -dz } else { joint[2] };
                        }
                    }
                    RepTag::O3 => {
                        let d3 = (du * du + dv * dv + dz * dz).sqrt();
                        if d3 <= k {
                            let base = out.idx(j, 0, iy, ix);
                            if d3 > 0.0 {
                                out.data[base] = du / d3;
                                out.data[base + hw] = dv / d3;
                                out.data[base + 2 * hw] = dz / d3;
                            }
                            out.data[base + 3 * hw] = (k - d3) / k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Decodes ground-truth maps back to a normalized pose using the maps' own
/// confidence channels as linear weights (uniform over the mask for `P`).
///
/// This is the codec-consistency decoder: on maps produced by [`encode`] it
/// recovers the pose up to grid-sampling error, independent of any model.
pub fn decode_gt(dense: &DenseRep, crop: &CropFrame) -> Result<Vec<[f64; 3]>> {
    let grid = dense_grid(crop, dense.size)?;
    let cands = awr::recover_candidates(dense, None, &grid, awr::WeightSupport::KernelOnly)?;
    let hw = dense.size * dense.size;
    let mut pose = Vec::with_capacity(dense.n_joints);
    for j in 0..dense.n_joints {
        let values: Vec<f64> = match dense.rep.tag {
            // No confidence channel: every masked pixel counts equally.
            RepTag::P => cands.valid[j * hw..(j + 1) * hw].iter().map(|&m| f64::from(m)).collect(),
            _ => cands.weight_logits[j * hw..(j + 1) * hw].to_vec(),
        };
        let w = awr::linear_weights(&values, &cands.valid[j * hw..(j + 1) * hw])
            .map_err(|_| Error::UndecodableJoint { joint: j })?;
        let mut p = [0.0; 3];
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let h = &cands.hypotheses[(j * hw + i) * 3..(j * hw + i) * 3 + 3];
                p[0] += wi * h[0];
                p[1] += wi * h[1];
                p[2] += wi * h[2];
            }
        }
        pose.push(p);
    }
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{crop_hand, CameraIntrinsics, DepthImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 240.0, fy: 240.0, cx: 80.0, cy: 80.0, width: 160, height: 160 }
    }

    /// Crop of a flat depth patch: every crop pixel masked, zhat = 0.
    fn flat_crop(size: usize) -> CropFrame {
        let intr = test_intrinsics();
        let mut img = DepthImage::new(intr.width, intr.height);
        for v in img.data.iter_mut() {
            *v = 500.0;
        }
        crop_hand(&img, [0.0, 0.0, 500.0], 250.0, size, &intr).unwrap()
    }

    /// Grid with every pixel masked and the given constant depth.
    fn full_grid(size: usize, zhat: f64) -> DenseGrid {
        DenseGrid { size, zhat: vec![zhat; size * size], mask: vec![true; size * size] }
    }

    fn rand_joint(rng: &mut ChaCha8Rng) -> [f64; 3] {
        [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)]
    }

    #[test]
    fn grid_coords_are_pixel_centres() {
        assert_eq!(grid_coord(0, 2), -0.5);
        assert_eq!(grid_coord(1, 2), 0.5);
        assert_eq!(grid_coord(0, 4), -0.75);
        assert_eq!(grid_coord(3, 4), 0.75);
    }

    #[test]
    fn dense_grid_requires_divisible_sizes() {
        let crop = flat_crop(32);
        assert!(dense_grid(&crop, 16).is_ok());
        assert!(dense_grid(&crop, 12).is_err());
        assert!(dense_grid(&crop, 0).is_err());
    }

    #[test]
    fn dense_grid_aligns_pixel_centres() {
        // At ratio 2 the dense pixel centre falls between four crop pixels;
        // nearest-neighbour picks the lower-right of the upper-left block,
        // i.e. source index 2*i + 1.
        let crop = flat_crop(8);
        let mut crop = crop;
        for i in 0..crop.depth.len() {
            crop.depth[i] = i as f64 * 1e-3; // unique, strictly inside (-1,1)
            crop.mask[i] = true;
        }
        let g = dense_grid(&crop, 4).unwrap();
        for iy in 0..4 {
            for ix in 0..4 {
                let src = (iy * 2 + 1) * 8 + (ix * 2 + 1);
                assert_eq!(g.zhat[iy * 4 + ix], src as f64 * 1e-3);
            }
        }
    }

    #[test]
    fn offset_field_hand_computed_case() {
        // 4x4 grid, pitch 0.5. Joint at the centre of pixel (1, 1).
        let grid = full_grid(4, 0.0);
        let joint = [grid_coord(1, 4), grid_coord(1, 4), 0.0];
        let phi = offset_field(&[joint], &grid, 1.0, Dims::Two);
        let at = |ix: usize, iy: usize| {
            let pix = iy * 4 + ix;
            [phi[pix * 2], phi[pix * 2 + 1]]
        };
        assert_eq!(at(1, 1), [0.0, 0.0]); // at the joint
        assert_eq!(at(2, 1), [0.5, 0.0]); // one pitch right
        assert_eq!(at(1, 3), [0.0, 1.0]); // two pitches down, exactly k
        assert_eq!(at(3, 3), [0.0, 0.0]); // distance sqrt(2) > k: zeroed
    }

    #[test]
    fn offset_field_zero_beyond_kernel_and_off_mask() {
        let mut grid = full_grid(4, 0.0);
        grid.mask[0] = false;
        let joint = [grid_coord(0, 4), grid_coord(0, 4), 0.0];
        let phi = offset_field(&[joint], &grid, 0.6, Dims::Two);
        // Unmasked pixel holding the joint itself: still zero.
        assert_eq!([phi[0], phi[1]], [0.0, 0.0]);
        // Pixel at distance 1.0 > k = 0.6.
        let pix = 2;
        assert_eq!([phi[pix * 2], phi[pix * 2 + 1]], [0.0, 0.0]);
        // Pixel at distance 0.5 < k keeps its offset.
        let pix = 1;
        assert_eq!([phi[pix * 2], phi[pix * 2 + 1]], [0.5, 0.0]);
    }

    #[test]
    fn closeness_hand_computed_case() {
        let grid = full_grid(4, 0.0);
        let joint = [grid_coord(1, 4), grid_coord(1, 4), 0.0];
        let (s, v) = closeness_and_unit(&[joint], &grid, 1.0, Dims::Two);
        let pix = |ix: usize, iy: usize| iy * 4 + ix;
        assert_eq!(s[pix(1, 1)], 1.0); // d = 0
        assert_eq!(s[pix(2, 1)], 0.5); // d = 0.5
        assert_eq!(s[pix(1, 3)], 0.0); // d = k exactly
        // Unit vector at (2, 1) points +u; at the joint it is zeroed.
        assert_eq!([v[pix(2, 1) * 2], v[pix(2, 1) * 2 + 1]], [1.0, 0.0]);
        assert_eq!([v[pix(1, 1) * 2], v[pix(1, 1) * 2 + 1]], [0.0, 0.0]);
    }

    #[test]
    fn closeness_support_matches_kernel_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let size = rng.gen_range(3..9);
            let mut grid = full_grid(size, 0.0);
            for m in grid.mask.iter_mut() {
                *m = rng.gen_bool(0.7);
            }
            for z in grid.zhat.iter_mut() {
                *z = rng.gen_range(-0.9..0.9);
            }
            let joint = rand_joint(&mut rng);
            let k = rng.gen_range(0.3..1.5);
            let (s, v) = closeness_and_unit(&[joint], &grid, k, Dims::Three);
            for iy in 0..size {
                for ix in 0..size {
                    let pix = iy * size + ix;
                    let (u, vv) = grid.coord(ix, iy);
                    let off = [u - joint[0], vv - joint[1], grid.zhat[pix] - joint[2]];
                    let d = (off.iter().map(|x| x * x).sum::<f64>()).sqrt();
                    let vn = (v[pix * 3..pix * 3 + 3].iter().map(|x| x * x).sum::<f64>()).sqrt();
                    if grid.mask[pix] && d < k {
                        assert!(s[pix] > 0.0);
                        if d > 0.0 {
                            assert!((vn - 1.0).abs() < 1e-12, "unit offset must have norm 1");
                        }
                    } else {
                        assert_eq!(s[pix], 0.0);
                    }
                    if !grid.mask[pix] {
                        assert_eq!(vn, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn encode_off_mask_pixels_are_zero_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut grid = full_grid(6, 0.0);
        for m in grid.mask.iter_mut() {
            *m = rng.gen_bool(0.5);
        }
        let pose = vec![rand_joint(&mut rng), rand_joint(&mut rng)];
        for tag in RepTag::ALL {
            let rep = RepType::new(tag);
            let dense = encode_norm(rep, &pose, &grid).unwrap();
            for j in 0..2 {
                for c in 0..tag.channels() {
                    for iy in 0..6 {
                        for ix in 0..6 {
                            if !grid.mask[iy * 6 + ix] {
                                assert_eq!(dense.at(j, c, iy, ix), 0.0, "{tag} j{j} c{c}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn encode_p_broadcasts_joint_coordinates() {
        let grid = full_grid(4, 0.2);
        let joint = [0.3, -0.4, 0.1];
        let dense = encode_norm(RepType::new(RepTag::P), &[joint], &grid).unwrap();
        for iy in 0..4 {
            for ix in 0..4 {
                assert_eq!(dense.at(0, 0, iy, ix), 0.3);
                assert_eq!(dense.at(0, 1, iy, ix), -0.4);
                assert_eq!(dense.at(0, 2, iy, ix), 0.1);
            }
        }
    }

    #[test]
    fn encode_h1_probability_peaks_at_joint_pixel() {
        let grid = full_grid(8, 0.0);
        let joint = [grid_coord(3, 8), grid_coord(4, 8), 0.0];
        let dense = encode_norm(RepType::new(RepTag::H1), &[joint], &grid).unwrap();
        let peak = dense.at(0, 0, 4, 3);
        assert_eq!(peak, 1.0); // exactly on a pixel centre
        for iy in 0..8 {
            for ix in 0..8 {
                assert!(dense.at(0, 0, iy, ix) <= peak);
            }
        }
        // Depth channel carries the joint depth over kernel support only.
        assert_eq!(dense.at(0, 1, 4, 3), 0.0); // joint z is 0 here
        let joint2 = [grid_coord(3, 8), grid_coord(4, 8), 0.25];
        let dense2 = encode_norm(RepType::new(RepTag::H1), &[joint2], &grid).unwrap();
        assert_eq!(dense2.at(0, 1, 4, 3), 0.25);
    }

    #[test]
    fn recovery_inverts_encoding_on_support() {
        // For every representation, reconstructing the joint from a pixel's
        // encoded channels must return the joint exactly (up to fp error).
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let size = rng.gen_range(4..10);
            let mut grid = full_grid(size, 0.0);
            for z in grid.zhat.iter_mut() {
                *z = rng.gen_range(-0.9..0.9);
            }
            let joint = rand_joint(&mut rng);
            let k = rng.gen_range(0.5..1.5);
            let hw = size * size;

            for tag in [RepTag::O1, RepTag::O2, RepTag::O3, RepTag::H2] {
                let rep = RepType::with_kernel(tag, k);
                let dense = encode_norm(rep, &[joint], &grid).unwrap();
                for iy in 0..size {
                    for ix in 0..size {
                        let pix = iy * size + ix;
                        let (u, v) = grid.coord(ix, iy);
                        let zi = grid.zhat[pix];
                        let rec: Option<[f64; 3]> = match tag {
                            RepTag::O1 | RepTag::O2 => {
                                let s = dense.at(0, 2, iy, ix);
                                if s <= 0.0 {
                                    None
                                } else {
                                    let vu = dense.at(0, 0, iy, ix);
                                    let vv = dense.at(0, 1, iy, ix);
                                    let depth = dense.at(0, 3, iy, ix);
                                    let z = if tag == RepTag::O2 { zi + depth } else { depth };
                                    Some([u - k * (1.0 - s) * vu, v - k * (1.0 - s) * vv, z])
                                }
                            }
                            RepTag::O3 => {
                                let s = dense.at(0, 3, iy, ix);
                                if s <= 0.0 {
                                    None
                                } else {
                                    Some([
                                        u - k * (1.0 - s) * dense.at(0, 0, iy, ix),
                                        v - k * (1.0 - s) * dense.at(0, 1, iy, ix),
                                        zi - k * (1.0 - s) * dense.at(0, 2, iy, ix),
                                    ])
                                }
                            }
                            RepTag::H2 => {
                                let prob = dense.at(0, 0, iy, ix);
                                let du = u - joint[0];
                                let dv = v - joint[1];
                                let within = (du * du + dv * dv).sqrt() <= k;
                                if prob > 0.0 && within {
                                    // Plane is quantized to the pixel; depth must
                                    // still be exact.
                                    Some([joint[0], joint[1], zi + dense.at(0, 1, iy, ix)])
                                } else {
                                    None
                                }
                            }
                            _ => None,
                        };
                        if let Some(r) = rec {
                            let _ = hw;
                            for a in 0..3 {
                                assert!(
                                    (r[a] - joint[a]).abs() < 1e-12,
                                    "{tag} axis {a}: {} vs {}",
                                    r[a],
                                    joint[a]
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn decode_gt_recovers_pose_from_encoded_maps() {
        let crop = flat_crop(64);
        // Joints spread through the cube interior, including off-centre depth.
        let pose = HandPose::new(vec![
            [0.0, 0.0, 500.0],
            [30.0, -25.0, 470.0],
            [-45.0, 40.0, 530.0],
            [60.0, 10.0, 510.0],
        ]);
        let dense_size = 32;
        let half_pitch = 1.0 / dense_size as f64; // normalized units
        let pose_norm = normalize_pose(&pose, &crop);
        for tag in RepTag::ALL {
            let dense = encode(RepType::new(tag), &pose, &crop, dense_size).unwrap();
            let decoded = decode_gt(&dense, &crop).unwrap();
            for (j, (d, g)) in decoded.iter().zip(&pose_norm).enumerate() {
                let plane = ((d[0] - g[0]).powi(2) + (d[1] - g[1]).powi(2)).sqrt();
                let depth = (d[2] - g[2]).abs();
                match tag {
                    RepTag::H1 | RepTag::H2 => {
                        assert!(plane <= half_pitch, "{tag} j{j} plane err {plane}");
                        assert!(depth < 1e-9, "{tag} j{j} depth err {depth}");
                    }
                    _ => {
                        assert!(plane < 1e-9, "{tag} j{j} plane err {plane}");
                        assert!(depth < 1e-9, "{tag} j{j} depth err {depth}");
                    }
                }
            }
        }
    }

    #[test]
    fn decode_gt_errors_without_support() {
        let crop = flat_crop(32);
        // A joint so far outside the crop that no masked pixel lies within the
        // kernel radius.
        let pose = HandPose::new(vec![[400.0, 400.0, 500.0]]);
        let dense = encode(RepType::new(RepTag::O3), &pose, &crop, 16).unwrap();
        let err = decode_gt(&dense, &crop).unwrap_err();
        assert!(matches!(err, Error::UndecodableJoint { joint: 0 }));
    }

    #[test]
    fn dense_rep_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = full_grid(8, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = vec![rand_joint(&mut rng), rand_joint(&mut rng), rand_joint(&mut rng)];
        let dense = encode_norm(RepType::new(RepTag::O3), &pose, &grid).unwrap();
        let path = dir.path().join("maps.bin");
        dense.save(&path).unwrap();
        let back = DenseRep::load(&path).unwrap();
        assert_eq!(back.rep, dense.rep);
        assert_eq!(back.n_joints, 3);
        assert_eq!(back.size, 8);
        for (a, b) in dense.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6); // f32 storage quantization
        }
    }

    #[test]
    fn dense_rep_load_rejects_bad_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.bin");
        let grid = full_grid(4, 0.0);
        let dense = encode_norm(RepType::new(RepTag::H1), &[[0.0, 0.0, 0.0]], &grid).unwrap();
        dense.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(DenseRep::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rep_tag_parses_cli_names() {
        for tag in RepTag::ALL {
            assert_eq!(tag.to_string().parse::<RepTag>().unwrap(), tag);
        }
        assert!("X9".parse::<RepTag>().is_err());
    }
}
