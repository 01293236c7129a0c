//! Deterministic synthetic depth frames of an articulated hand.
//!
//! A 14-joint kinematic chain (palm, two wrist points, a three-joint thumb,
//! and two joints for each of four fingers) is posed by sampling flexion
//! angles, a spread factor, and a root transform from a configurable space,
//! then rendered by ray-casting capsules around every bone into a z-buffer.
//! Rays go through pixel centres, so a rendered depth pixel back-projects
//! exactly onto a capsule surface. Per-frame seeds drive three independent
//! RNG streams (pose, depth noise, dropout), which keeps poses identical
//! when only the noise or dropout settings change.
//!
//! The z-buffer also yields per-joint visibility ground truth: a joint is
//! visible when a capsule it touches owns the z-buffer at the joint's
//! projected pixel and that pixel survived dropout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, CameraIntrinsics, DepthImage, HandPose};
use crate::{Error, Result};

pub const N_JOINTS: usize = 14;
pub const PALM: usize = 0;
const N_FLEX: usize = 11;
const MANIFEST_VERSION: u32 = 1;

/// Joint tree and bone geometry. Index 0 is the palm (root); every other
/// joint hangs off its parent by a fixed bone length and carries the capsule
/// radius of that bone.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicHand {
    /// `parents[j]` for j > 0; the palm has no parent.
    pub parents: [usize; N_JOINTS],
    /// `bone_mm[j]` is the length of the bone parent→j (0 for the palm).
    pub bone_mm: [f64; N_JOINTS],
    /// Capsule radius of the bone ending at j; index 0 is the palm sphere.
    pub radius_mm: [f64; N_JOINTS],
}

/// Chain layout: (first joint, joints in chain, flexion dof offset, base
/// angle in degrees from the finger axis, whether spread scales the angle).
const CHAINS: [(usize, usize, usize, f64, bool); 7] = [
    (1, 1, usize::MAX, 160.0, false),  // wrist, ulnar side
    (2, 1, usize::MAX, 200.0, false),  // wrist, radial side
    (3, 3, 0, 62.0, true),             // thumb
    (6, 2, 3, 22.0, true),             // index
    (8, 2, 5, 6.0, true),              // middle
    (10, 2, 7, -10.0, true),           // ring
    (12, 2, 9, -27.0, true),           // pinky
];

impl KinematicHand {
    pub fn standard() -> Self {
        KinematicHand {
            parents: [usize::MAX, 0, 0, 0, 3, 4, 0, 6, 0, 8, 0, 10, 0, 12],
            bone_mm: [0.0, 45.0, 45.0, 32.0, 34.0, 28.0, 62.0, 38.0, 66.0, 42.0, 62.0, 38.0, 54.0, 32.0],
            radius_mm: [22.0, 20.0, 20.0, 14.0, 10.0, 9.0, 11.0, 8.5, 11.0, 8.5, 11.0, 8.5, 11.0, 8.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for j in 1..N_JOINTS {
            if self.parents[j] >= j {
                return Err(Error::InvalidArg(format!("joint {j} must have a lower-index parent")));
            }
            if !(self.bone_mm[j].is_finite() && self.bone_mm[j] > 0.0) {
                return Err(Error::InvalidArg(format!("bone {j} length must be positive")));
            }
        }
        if self.radius_mm.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::InvalidArg("capsule radii must be positive".into()));
        }
        Ok(())
    }

    pub fn max_radius(&self) -> f64 {
        self.radius_mm.iter().cloned().fold(0.0, f64::max)
    }
}

/// Articulation state: flexions per chain dof, finger spread, root transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandDofs {
    /// Thumb root/mid/tip, then (mid, tip) for index, middle, ring, pinky.
    pub flex_deg: [f64; N_FLEX],
    /// Scales the in-plane base angle of thumb and fingers.
    pub spread: f64,
    /// Rotation about camera x, y, z axes, applied in that order.
    pub root_rot_deg: [f64; 3],
    pub root_pos_mm: [f64; 3],
}

/// Sampling ranges for every degree of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSpace {
    pub root_min_mm: [f64; 3],
    pub root_max_mm: [f64; 3],
    pub rot_min_deg: [f64; 3],
    pub rot_max_deg: [f64; 3],
    pub spread_min: f64,
    pub spread_max: f64,
    pub flex_min_deg: f64,
    pub flex_max_deg: f64,
}

impl Default for PoseSpace {
    fn default() -> Self {
        PoseSpace {
            root_min_mm: [-30.0, -30.0, 360.0],
            root_max_mm: [30.0, 30.0, 460.0],
            rot_min_deg: [-25.0, -25.0, -60.0],
            rot_max_deg: [25.0, 25.0, 60.0],
            spread_min: 0.85,
            spread_max: 1.15,
            flex_min_deg: 0.0,
            flex_max_deg: 65.0,
        }
    }
}

impl PoseSpace {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.root_min_mm[a] > self.root_max_mm[a] || self.rot_min_deg[a] > self.rot_max_deg[a] {
                return Err(Error::InvalidArg("pose space has an inverted range".into()));
            }
        }
        if self.root_min_mm[2] <= 0.0 {
            return Err(Error::InvalidArg("root depth range must stay in front of the camera".into()));
        }
        if self.spread_min > self.spread_max || self.flex_min_deg > self.flex_max_deg {
            return Err(Error::InvalidArg("pose space has an inverted range".into()));
        }
        Ok(())
    }
}

/// Rendering parameters independent of the pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub intr: CameraIntrinsics,
    pub noise_sigma_mm: f64,
    pub dropout: f64,
}

/// Camera used by the synthetic generator by default.
pub fn synth_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics { fx: 240.0, fy: 240.0, cx: 80.0, cy: 80.0, width: 160, height: 160 }
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { intr: synth_intrinsics(), noise_sigma_mm: 2.0, dropout: 0.05 }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        self.intr.validate()?;
        if !(self.noise_sigma_mm.is_finite() && self.noise_sigma_mm >= 0.0) {
            return Err(Error::InvalidArg("noise sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::InvalidArg(format!("dropout must be in [0, 1], got {}", self.dropout)));
        }
        Ok(())
    }
}

fn rot_xyz(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = deg[0].to_radians().sin_cos();
    let (sy, cy) = deg[1].to_radians().sin_cos();
    let (sz, cz) = deg[2].to_radians().sin_cos();
    // Rz * Ry * Rx.
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

fn mat_mul(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// World joint positions for a given articulation.
///
/// In the hand frame the palm sits at the origin with fingers along +y and
/// the palm normal along +z; flexion tips each chain direction from the palm
/// plane towards -z, accumulating along the chain.
pub fn forward_kinematics(hand: &KinematicHand, dofs: &HandDofs) -> Result<HandPose> {
    hand.validate()?;
    let mut local = [[0.0f64; 3]; N_JOINTS];
    for &(first, len, flex_off, base_deg, spread) in &CHAINS {
        let gamma = (if spread { base_deg * dofs.spread } else { base_deg }).to_radians();
        let d0 = [gamma.sin(), gamma.cos(), 0.0];
        let mut beta = 0.0;
        for i in 0..len {
            let j = first + i;
            if flex_off != usize::MAX {
                beta += dofs.flex_deg[flex_off + i].to_radians();
            }
            let dir = [beta.cos() * d0[0], beta.cos() * d0[1], -beta.sin()];
            let parent = local[hand.parents[j]];
            for a in 0..3 {
                local[j][a] = parent[a] + hand.bone_mm[j] * dir[a];
            }
        }
    }
    let rot = rot_xyz(dofs.root_rot_deg);
    let joints = local
        .iter()
        .map(|&p| {
            let r = mat_mul(&rot, p);
            [
                r[0] + dofs.root_pos_mm[0],
                r[1] + dofs.root_pos_mm[1],
                r[2] + dofs.root_pos_mm[2],
            ]
        })
        .collect();
    Ok(HandPose::new(joints))
}

#[derive(Debug, Clone)]
pub struct SampledPose {
    pub dofs: HandDofs,
    pub pose: HandPose,
}

/// Draws one articulation uniformly from the space. The pose stream is
/// separate from the render streams, so the same seed gives the same pose
/// under any noise or dropout setting.
pub fn sample_pose(seed: u64, space: &PoseSpace, hand: &KinematicHand) -> Result<SampledPose> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut range = |lo: f64, hi: f64| rng.gen_range(lo..=hi);
    let root_pos_mm = [
        range(space.root_min_mm[0], space.root_max_mm[0]),
        range(space.root_min_mm[1], space.root_max_mm[1]),
        range(space.root_min_mm[2], space.root_max_mm[2]),
    ];
    let root_rot_deg = [
        range(space.rot_min_deg[0], space.rot_max_deg[0]),
        range(space.rot_min_deg[1], space.rot_max_deg[1]),
        range(space.rot_min_deg[2], space.rot_max_deg[2]),
    ];
    let spread = range(space.spread_min, space.spread_max);
    let mut flex_deg = [0.0; N_FLEX];
    for f in &mut flex_deg {
        *f = range(space.flex_min_deg, space.flex_max_deg);
    }
    let dofs = HandDofs { flex_deg, spread, root_rot_deg, root_pos_mm };
    let pose = forward_kinematics(hand, &dofs)?;
    Ok(SampledPose { dofs, pose })
}

struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    r: f64,
    /// Joints this capsule is incident to, for visibility attribution.
    joints: (usize, usize),
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Smallest `t > t_min` where the ray `t * d` (d unnormalized, d.z = 1, so t
/// is camera depth) enters the capsule, if any.
fn capsule_entry(d: [f64; 3], cap: &Capsule, t_min: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > t_min && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    let sphere = |c: [f64; 3], consider: &mut dyn FnMut(f64)| {
        let a2 = dot(d, d);
        let b = dot(d, c);
        let disc = b * b - a2 * (dot(c, c) - cap.r * cap.r);
        if disc >= 0.0 {
            let s = disc.sqrt();
            consider((b - s) / a2);
            consider((b + s) / a2);
        }
    };
    let ab = [cap.b[0] - cap.a[0], cap.b[1] - cap.a[1], cap.b[2] - cap.a[2]];
    let len = dot(ab, ab).sqrt();
    if len > 1e-9 {
        let u = [ab[0] / len, ab[1] / len, ab[2] / len];
        let du = dot(d, u);
        let au = dot(cap.a, u);
        let e = [d[0] - du * u[0], d[1] - du * u[1], d[2] - du * u[2]];
        let g = [cap.a[0] - au * u[0], cap.a[1] - au * u[1], cap.a[2] - au * u[2]];
        let a2 = dot(e, e);
        if a2 > 1e-15 {
            let b = dot(e, g);
            let disc = b * b - a2 * (dot(g, g) - cap.r * cap.r);
            if disc >= 0.0 {
                let s = disc.sqrt();
                for t in [(b - s) / a2, (b + s) / a2] {
                    let along = t * du - au;
                    if (0.0..=len).contains(&along) {
                        consider(t);
                    }
                }
            }
        }
    }
    sphere(cap.a, &mut consider);
    sphere(cap.b, &mut consider);
    best
}

/// Z-buffers the capsules into `depth` (mm; 0 = background) and records the
/// winning capsule index per pixel in `owner` (-1 = background).
fn render_capsules(caps: &[Capsule], intr: &CameraIntrinsics, depth: &mut DepthImage, owner: &mut [i32]) {
    let (w, h) = (intr.width, intr.height);
    for (ci, cap) in caps.iter().enumerate() {
        if cap.a[2] <= cap.r && cap.b[2] <= cap.r {
            continue; // entirely behind or straddling the camera plane
        }
        // Conservative pixel bounding box from the projected endpoints.
        let zmin = cap.a[2].min(cap.b[2]).max(1.0);
        let pad_u = cap.r * intr.fx / zmin + 2.0;
        let pad_v = cap.r * intr.fy / zmin + 2.0;
        let (mut u0, mut u1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in [cap.a, cap.b] {
            let z = p[2].max(1.0);
            let u = intr.cx + intr.fx * p[0] / z;
            let v = intr.cy + intr.fy * p[1] / z;
            u0 = u0.min(u - pad_u);
            u1 = u1.max(u + pad_u);
            v0 = v0.min(v - pad_v);
            v1 = v1.max(v + pad_v);
        }
        let px0 = (u0.floor().max(0.0)) as usize;
        let px1 = (u1.ceil().min(w as f64 - 1.0)).max(0.0) as usize;
        let py0 = (v0.floor().max(0.0)) as usize;
        let py1 = (v1.ceil().min(h as f64 - 1.0)).max(0.0) as usize;
        if px0 > px1 || py0 > py1 {
            continue;
        }
        for py in py0..=py1 {
            for px in px0..=px1 {
                let d = [
                    (px as f64 + 0.5 - intr.cx) / intr.fx,
                    (py as f64 + 0.5 - intr.cy) / intr.fy,
                    1.0,
                ];
                if let Some(t) = capsule_entry(d, cap, 0.5) {
                    let i = py * w + px;
                    if depth.data[i] <= 0.0 || t < depth.data[i] {
                        depth.data[i] = t;
                        owner[i] = ci as i32;
                    }
                }
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders one frame and its per-joint visibility.
///
/// Stream 1 of the seed drives additive Gaussian depth noise on hand pixels,
/// stream 2 the per-pixel dropout to background. A joint counts as visible
/// when its projected pixel is owned by one of its own capsules and was not
/// dropped.
pub fn render_depth(
    pose: &HandPose,
    hand: &KinematicHand,
    scene: &SceneParams,
    seed: u64,
) -> Result<(DepthImage, Vec<bool>)> {
    scene.validate()?;
    hand.validate()?;
    if pose.joints.len() != N_JOINTS {
        return Err(Error::Shape(format!(
            "expected {N_JOINTS} joints, got {}",
            pose.joints.len()
        )));
    }
    if pose.joints.iter().all(|j| j[2] <= 0.0) {
        return Err(Error::Render("hand is entirely behind the camera".into()));
    }

    let mut caps = Vec::with_capacity(N_JOINTS);
    caps.push(Capsule { a: pose.joints[PALM], b: pose.joints[PALM], r: hand.radius_mm[PALM], joints: (PALM, PALM) });
    for j in 1..N_JOINTS {
        let p = hand.parents[j];
        caps.push(Capsule { a: pose.joints[p], b: pose.joints[j], r: hand.radius_mm[j], joints: (p, j) });
    }

    let mut depth = DepthImage::new(scene.intr.width, scene.intr.height);
    let mut owner = vec![-1i32; scene.intr.width * scene.intr.height];
    render_capsules(&caps, &scene.intr, &mut depth, &mut owner);

    if scene.noise_sigma_mm > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for v in depth.data.iter_mut() {
            if *v > 0.0 {
                *v += scene.noise_sigma_mm * gaussian(&mut rng);
            }
        }
    }
    if scene.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        for (v, o) in depth.data.iter_mut().zip(owner.iter_mut()) {
            if *v > 0.0 && rng.gen_bool(scene.dropout) {
                *v = 0.0;
                *o = -1;
            }
        }
    }

    let visibility = (0..N_JOINTS)
        .map(|j| {
            let p = pose.joints[j];
            if p[2] <= 0.0 {
                return false;
            }
            let Ok((u, v, _)) = project(p, &scene.intr) else { return false };
            let (px, py) = (u.floor(), v.floor());
            if px < 0.0 || py < 0.0 || px >= scene.intr.width as f64 || py >= scene.intr.height as f64 {
                return false;
            }
            let o = owner[py as usize * scene.intr.width + px as usize];
            o >= 0 && {
                let inc = caps[o as usize].joints;
                inc.0 == j || inc.1 == j
            }
        })
        .collect();
    Ok((depth, visibility))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub id: String,
    pub depth_file: String,
    /// Ground-truth joints, J x 3 camera-space mm.
    pub pose: Vec<[f64; 3]>,
    pub seed: u64,
    pub visibility: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameMeta>,
}

#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub id: String,
    pub seed: u64,
    pub depth: DepthImage,
    pub pose: HandPose,
    pub visibility: Vec<bool>,
}

/// Derives decorrelated per-frame seeds from the dataset seed.
fn frame_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generates `n_frames` labelled frames under `out_dir` and writes
/// `manifest.json`. Regenerating with the same arguments is byte-identical.
pub fn make_dataset(
    n_frames: usize,
    seed: u64,
    hand: &KinematicHand,
    space: &PoseSpace,
    scene: &SceneParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_frames == 0 {
        return Err(Error::InvalidArg("dataset needs at least one frame".into()));
    }
    scene.validate()?;
    space.validate()?;
    hand.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let rendered: Vec<Result<(u64, HandPose, DepthImage, Vec<bool>)>> = (0..n_frames as u64)
        .into_par_iter()
        .map(|i| {
            let fs = frame_seed(seed, i);
            let sampled = sample_pose(fs, space, hand)?;
            let (depth, vis) = render_depth(&sampled.pose, hand, scene, fs)?;
            Ok((fs, sampled.pose, depth, vis))
        })
        .collect();

    let mut frames = Vec::with_capacity(n_frames);
    for (i, r) in rendered.into_iter().enumerate() {
        let (fs, pose, depth, vis) = r?;
        let id = format!("frame_{i:05}");
        let depth_file = format!("{id}.depth");
        depth.save(&out_dir.join(&depth_file))?;
        frames.push(FrameMeta { id, depth_file, pose: pose.joints, seed: fs, visibility: vis });
    }
    let manifest = DatasetManifest { version: MANIFEST_VERSION, intrinsics: scene.intr, frames };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads a dataset written by [`make_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedFrame>)> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let frames: Vec<Result<LoadedFrame>> = manifest
        .frames
        .par_iter()
        .map(|m| {
            let depth = DepthImage::load(&dir.join(&m.depth_file))?;
            Ok(LoadedFrame {
                id: m.id.clone(),
                seed: m.seed,
                depth,
                pose: HandPose::new(m.pose.clone()),
                visibility: m.visibility.clone(),
            })
        })
        .collect();
    let frames = frames.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((manifest, frames))
}
