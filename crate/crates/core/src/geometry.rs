//! Pinhole camera geometry, metric hand cropping, pose normalization, and
//! world-space augmentation.
//!
//! All world coordinates are millimetres in the camera frame: x right,
//! y down, z along the optical axis. Pixel coordinate `u` covers column
//! `i` on the half-open interval `[i, i+1)`, so the centre of column `i`
//! is `i + 0.5`; rows are treated the same way.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Normalized depth written to crop pixels that carry no hand surface.
pub const BACKGROUND_SENTINEL: f64 = 1.0;

/// Default side length of the metric crop cube, in millimetres.
pub const DEFAULT_CUBE_SIDE_MM: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::BadIntrinsics(format!(
                "focal lengths must be finite and positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::BadIntrinsics("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::BadIntrinsics("image dimensions must be non-zero".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let intr: CameraIntrinsics = serde_json::from_str(&text)?;
        intr.validate()?;
        Ok(intr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// A hand pose as world-space joint positions in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub joints: Vec<[f64; 3]>,
}

impl HandPose {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        HandPose { joints }
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Arithmetic mean of the joints; used as the crop centre.
    pub fn centroid(&self) -> [f64; 3] {
        let n = self.joints.len().max(1) as f64;
        let mut c = [0.0; 3];
        for j in &self.joints {
            for a in 0..3 {
                c[a] += j[a];
            }
        }
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

/// A depth image in millimetres; values `<= 0` mark missing measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthSidecar {
    width: usize,
    height: usize,
    unit: String,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        DepthImage { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }

    /// Writes `<path>` as raw little-endian f32 rows plus `<path>.json`
    /// describing the dimensions.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        let sidecar = DepthSidecar { width: self.width, height: self.height, unit: "mm".into() };
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: DepthSidecar = serde_json::from_str(&text)?;
        if sidecar.unit != "mm" {
            return Err(Error::Format(format!("depth unit must be mm, got {}", sidecar.unit)));
        }
        let n = sidecar.width * sidecar.height;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "depth blob {} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                n * 4
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        Ok(DepthImage { width: sidecar.width, height: sidecar.height, data })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Lifts pixel `(u, v)` at depth `d` mm into the camera frame.
pub fn backproject(u: f64, v: f64, d: f64, intr: &CameraIntrinsics) -> Result<[f64; 3]> {
    if !d.is_finite() || d <= 0.0 {
        return Err(Error::InvalidDepth(d));
    }
    Ok([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d])
}

/// Projects a camera-frame point to `(u, v, depth)`; the point must lie
/// strictly in front of the camera.
pub fn project(p: [f64; 3], intr: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    if !p[2].is_finite() || p[2] <= 0.0 {
        return Err(Error::InvalidDepth(p[2]));
    }
    Ok((intr.cx + intr.fx * p[0] / p[2], intr.cy + intr.fy * p[1] / p[2], p[2]))
}

/// Affine map from crop pixel coordinates to original image pixels:
/// `u_orig = offset_u + scale_u * u_crop` (and likewise for v).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale_u: f64,
    pub scale_v: f64,
    pub offset_u: f64,
    pub offset_v: f64,
}

/// A depth crop resampled to a square grid and normalized to the crop cube.
///
/// `depth` holds `(z - center.z) / (cube_side / 2)`, so hand pixels lie
/// strictly inside `(-1, 1)`; pixels without hand surface hold
/// [`BACKGROUND_SENTINEL`] and `mask` is false there.
#[derive(Debug, Clone, PartialEq)]
pub struct CropFrame {
    pub size: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub center: [f64; 3],
    pub cube_side: f64,
    pub transform: CropTransform,
    pub intr: CameraIntrinsics,
}

impl CropFrame {
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.size + x
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Cuts a metric cube of side `cube_side` mm around `center` out of a depth
/// image and resamples it to `out_size` x `out_size` by nearest neighbour.
///
/// The crop window half-extents in pixels are `fx * (cube_side/2) / center_z`
/// (resp. fy), so the window covers the cube's cross-section at the centre
/// depth. A resampled pixel joins the mask only when its source measurement
/// backprojects strictly inside the cube on all three axes.
pub fn crop_hand(
    depth: &DepthImage,
    center: [f64; 3],
    cube_side: f64,
    out_size: usize,
    intr: &CameraIntrinsics,
) -> Result<CropFrame> {
    intr.validate()?;
    if !center[2].is_finite() || center[2] <= 0.0 {
        return Err(Error::InvalidDepth(center[2]));
    }
    if !(cube_side.is_finite() && cube_side > 0.0) {
        return Err(Error::InvalidArg(format!("cube_side must be positive, got {cube_side}")));
    }
    if out_size == 0 {
        return Err(Error::InvalidArg("out_size must be non-zero".into()));
    }

    let half = cube_side / 2.0;
    let (cu, cv, cz) = project(center, intr)?;
    let hu = intr.fx * half / cz;
    let hv = intr.fy * half / cz;
    let transform = CropTransform {
        scale_u: 2.0 * hu / out_size as f64,
        scale_v: 2.0 * hv / out_size as f64,
        offset_u: cu - hu,
        offset_v: cv - hv,
    };

    let mut crop = CropFrame {
        size: out_size,
        depth: vec![BACKGROUND_SENTINEL; out_size * out_size],
        mask: vec![false; out_size * out_size],
        center,
        cube_side,
        transform,
        intr: *intr,
    };

    for iy in 0..out_size {
        let v = transform.offset_v + (iy as f64 + 0.5) * transform.scale_v;
        let py = v.floor();
        if py < 0.0 || py >= depth.height as f64 {
            continue;
        }
        for ix in 0..out_size {
            let u = transform.offset_u + (ix as f64 + 0.5) * transform.scale_u;
            let px = u.floor();
            if px < 0.0 || px >= depth.width as f64 {
                continue;
            }
            let d = depth.at(px as usize, py as usize);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            // World position of the sampled measurement at its own pixel centre.
            let p = backproject(px + 0.5, py + 0.5, d, intr)?;
            let inside = (p[0] - center[0]).abs() < half
                && (p[1] - center[1]).abs() < half
                && (p[2] - center[2]).abs() < half;
            if inside {
                let k = crop.idx(ix, iy);
                crop.depth[k] = (d - cz) / half;
                crop.mask[k] = true;
            }
        }
    }

    if crop.mask_count() == 0 {
        return Err(Error::EmptyCrop);
    }
    Ok(crop)
}

/// Maps world-space joints into normalized crop coordinates.
///
/// Each joint becomes `(u_hat, v_hat, z_hat)` with `u_hat = 2*u_crop/size - 1`
/// and `z_hat = (z - center_z) / (cube_side/2)`. Joints outside the crop are
/// allowed and simply map outside `[-1, 1]`.
pub fn normalize_pose(pose: &HandPose, crop: &CropFrame) -> Vec<[f64; 3]> {
    let t = crop.transform;
    let half = crop.cube_side / 2.0;
    let s = crop.size as f64;
    pose.joints
        .iter()
        .map(|&[x, y, z]| {
            let u = crop.intr.cx + crop.intr.fx * x / z;
            let v = crop.intr.cy + crop.intr.fy * y / z;
            let u_crop = (u - t.offset_u) / t.scale_u;
            let v_crop = (v - t.offset_v) / t.scale_v;
            [2.0 * u_crop / s - 1.0, 2.0 * v_crop / s - 1.0, (z - crop.center[2]) / half]
        })
        .collect()
}

/// Inverse of [`normalize_pose`]: normalized crop coordinates back to world mm.
pub fn denormalize_pose(norm: &[[f64; 3]], crop: &CropFrame) -> HandPose {
    let t = crop.transform;
    let half = crop.cube_side / 2.0;
    let s = crop.size as f64;
    let joints = norm
        .iter()
        .map(|&[uh, vh, zh]| {
            let u_crop = (uh + 1.0) * s / 2.0;
            let v_crop = (vh + 1.0) * s / 2.0;
            let u = t.offset_u + u_crop * t.scale_u;
            let v = t.offset_v + v_crop * t.scale_v;
            let z = crop.center[2] + zh * half;
            [(u - crop.intr.cx) * z / crop.intr.fx, (v - crop.intr.cy) * z / crop.intr.fy, z]
        })
        .collect();
    HandPose::new(joints)
}

/// World-space augmentation: rotation about the optical axis and scaling,
/// both centred on the pose centroid, followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// In-plane rotation in degrees, limited to [-180, 180].
    pub rotation_deg: f64,
    /// Per-axis translation in millimetres, each limited to [-10, 10].
    pub translation_mm: [f64; 3],
    /// Isotropic scale about the centroid, limited to [0.9, 1.1].
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { rotation_deg: 0.0, translation_mm: [0.0; 3], scale: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg.is_finite() && self.rotation_deg.abs() <= 180.0) {
            return Err(Error::InvalidArg(format!(
                "rotation_deg must lie in [-180, 180], got {}",
                self.rotation_deg
            )));
        }
        for (axis, &t) in ["x", "y", "z"].iter().zip(&self.translation_mm) {
            if !(t.is_finite() && t.abs() <= 10.0) {
                return Err(Error::InvalidArg(format!(
                    "translation_mm.{axis} must lie in [-10, 10], got {t}"
                )));
            }
        }
        if !(self.scale.is_finite() && (0.9..=1.1).contains(&self.scale)) {
            return Err(Error::InvalidArg(format!(
                "scale must lie in [0.9, 1.1], got {}",
                self.scale
            )));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation_mm == [0.0; 3] && self.scale == 1.0
    }
}

/// Sine/cosine of a degree angle, snapped to exact values at multiples of
/// 90 degrees so quarter-turn augmentations are exact permutations.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.trunc() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Applies the same world transform `p' = c + s * Rz * (p - c) + t` to the
/// pose and, pixel by pixel, to the depth image.
///
/// Depth pixels are backprojected, transformed, and re-projected with a
/// z-buffered splat (nearest target pixel, minimum depth wins), which keeps
/// the warp deterministic. Identity parameters return unchanged clones.
pub fn augment(
    pose: &HandPose,
    depth: &DepthImage,
    params: &AugmentParams,
    intr: &CameraIntrinsics,
) -> Result<(HandPose, DepthImage)> {
    params.validate()?;
    intr.validate()?;
    if params.is_identity() {
        return Ok((pose.clone(), depth.clone()));
    }

    let c = pose.centroid();
    let (sin, cos) = sin_cos_deg(params.rotation_deg);
    let s = params.scale;
    let t = params.translation_mm;
    let apply = |p: [f64; 3]| -> [f64; 3] {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        let dz = p[2] - c[2];
        let rx = cos * dx - sin * dy;
        let ry = sin * dx + cos * dy;
        // Rotation is about the optical axis, so z offsets pass through the
        // rotation untouched; s == 1 then preserves depth exactly.
        [c[0] + s * rx + t[0], c[1] + s * ry + t[1], c[2] + s * dz + t[2]]
    };

    let new_pose = HandPose::new(pose.joints.iter().map(|&p| apply(p)).collect());

    let mut out = DepthImage::new(depth.width, depth.height);
    for py in 0..depth.height {
        for px in 0..depth.width {
            let d = depth.at(px, py);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let p = backproject(px as f64 + 0.5, py as f64 + 0.5, d, intr)?;
            let q = apply(p);
            if q[2] <= 0.0 {
                continue;
            }
            let (u, v, z) = project(q, intr)?;
            let (tx, ty) = (u.floor(), v.floor());
            if tx < 0.0 || ty < 0.0 || tx >= depth.width as f64 || ty >= depth.height as f64 {
                continue;
            }
            let cell = out.at_mut(tx as usize, ty as usize);
            if *cell <= 0.0 || z < *cell {
                *cell = z;
            }
        }
    }

    Ok((new_pose, out))
}
