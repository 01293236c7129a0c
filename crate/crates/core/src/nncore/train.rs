//! Two-stage training: dense-map supervision, then joint fine-tuning that
//! backpropagates through the weighted-average decode.
//!
//! The first stage fits the dense maps alone with per-head losses (L2 for
//! probability maps, smooth-L1 for everything else; pixel losses are
//! restricted to the hand mask for representations whose targets are only
//! defined there). The second stage keeps those losses and adds a smooth-L1
//! loss on the decoded joint coordinates, which is what lets the weight maps
//! adapt instead of acting as a fixed readout.
//!
//! Training is deterministic for a given seed: epoch shuffles come from a
//! dedicated counter-mode RNG stream per epoch, per-frame gradients are
//! computed in parallel but reduced in index order, and the optimizer is
//! plain Adam.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::awr::{self, WeightSupport};
use crate::geometry::{
    crop_hand, denormalize_pose, normalize_pose, CameraIntrinsics, CropFrame, DepthImage, HandPose,
};
use crate::nncore::heads::{head_spec, split_dense, HeadKind};
use crate::nncore::model::{Model, ModelConfig};
use crate::nncore::optim::{adam_step, AdamState};
use crate::nncore::tape::{LossKind, Tape, Var};
use crate::nncore::tensor::Tensor;
use crate::repcodec::{dense_grid, encode_norm, DenseGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Dense-map supervision only.
    Dense,
    /// Decode loss added to the dense losses (fine-tuning an existing model).
    Joint,
    /// Dense stage followed by the joint stage.
    Both,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dense_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the dense-map term in the joint-stage objective.
    /// Pretraining always minimizes the unscaled dense loss. Defaults to
    /// zero — fine-tuning on the decoded joints alone — because keeping
    /// the dense anchor pins the weight channels to their [0, 1] targets,
    /// and a softmax over logits that flat cannot sharpen.
    pub lambda_dense: f64,
    /// Weight of the decoded-joint term in the joint-stage objective.
    pub lambda_joint: f64,
    /// Softmax temperature of the differentiable decode.
    pub temperature: f64,
    /// Pixel support of the decode weights during training and AWR validation.
    pub support: WeightSupport,
    pub seed: u64,
    /// Consecutive epochs without a relative validation improvement of at
    /// least `plateau_min_improve` before the learning rate is scaled by
    /// `lr_factor`.
    pub plateau_window: usize,
    pub plateau_min_improve: f64,
    pub lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dense_epochs: 10,
            joint_epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            lambda_dense: 0.0,
            lambda_joint: 1.0,
            temperature: 1.0,
            support: WeightSupport::HandMask,
            seed: 0,
            plateau_window: 5,
            plateau_min_improve: 0.01,
            lr_factor: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be non-zero".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArg(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArg("weight_decay must be non-negative".into()));
        }
        if !(self.lambda_dense.is_finite() && self.lambda_dense >= 0.0)
            || !(self.lambda_joint.is_finite() && self.lambda_joint >= 0.0)
        {
            return Err(Error::InvalidArg("loss multipliers must be non-negative".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArg("temperature must be positive".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::InvalidArg("plateau_window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_min_improve) {
            return Err(Error::InvalidArg("plateau_min_improve must be in [0, 1)".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::InvalidArg("lr_factor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One frame, fully preprocessed for the training loop.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    /// Normalized crop, `[1, S, S]`.
    pub input: Tensor,
    pub grid: DenseGrid,
    /// Per-head dense targets; `None` for heads without dense supervision
    /// (the learned weight logits).
    pub head_targets: Vec<Option<Tensor>>,
    /// Per-head pixel weights; `None` means every pixel counts equally.
    pub head_weights: Vec<Option<Tensor>>,
    /// Ground-truth joints in normalized crop coordinates, `[J, 3]`.
    pub gt_norm: Tensor,
    /// Ground-truth joints in camera-space millimetres.
    pub gt_world: Vec<[f64; 3]>,
    pub crop: CropFrame,
}

/// Crops, normalizes, and encodes one labelled depth frame.
pub fn prepare_frame(
    depth: &DepthImage,
    pose: &HandPose,
    intr: &CameraIntrinsics,
    cfg: &ModelConfig,
) -> Result<TrainFrame> {
    cfg.validate()?;
    if pose.joints.len() != cfg.n_joints {
        return Err(Error::Shape(format!(
            "pose has {} joints, model expects {}",
            pose.joints.len(),
            cfg.n_joints
        )));
    }
    let crop = crop_hand(depth, pose.centroid(), cfg.cube_side_mm, cfg.input_size, intr)?;
    let grid = dense_grid(&crop, cfg.dense_size)?;
    let pose_norm = normalize_pose(pose, &crop);
    let dense = encode_norm(cfg.rep, &pose_norm, &grid)?;

    let spec = head_spec(cfg.rep.tag);
    let hw = cfg.dense_size * cfg.dense_size;
    // Targets for the heatmap-style representations are only defined on the
    // hand mask; offset fields are supervised everywhere so the background
    // learns its zero level.
    let masked = matches!(
        cfg.rep.tag,
        crate::repcodec::RepTag::P | crate::repcodec::RepTag::H1 | crate::repcodec::RepTag::H2
    );
    let mask_row: Vec<f64> = grid.mask.iter().map(|&m| f64::from(m)).collect();

    let mut head_targets = Vec::with_capacity(spec.len());
    let mut head_weights = Vec::with_capacity(spec.len());
    for (kind, part) in spec.iter().zip(split_dense(&dense)) {
        let c = kind.channels(cfg.n_joints);
        match part {
            Some(data) => {
                head_targets.push(Some(Tensor::new(vec![c, cfg.dense_size, cfg.dense_size], data)?));
                head_weights.push(if masked {
                    let mut w = Vec::with_capacity(c * hw);
                    for _ in 0..c {
                        w.extend_from_slice(&mask_row);
                    }
                    Some(Tensor::new(vec![c, cfg.dense_size, cfg.dense_size], w)?)
                } else {
                    None
                });
            }
            None => {
                head_targets.push(None);
                head_weights.push(None);
            }
        }
    }

    let input = Tensor::new(vec![1, cfg.input_size, cfg.input_size], crop.depth.clone())?;
    let gt_norm = Tensor::new(
        vec![cfg.n_joints, 3],
        pose_norm.iter().flat_map(|p| p.iter().copied()).collect(),
    )?;
    Ok(TrainFrame {
        input,
        grid,
        head_targets,
        head_weights,
        gt_norm,
        gt_world: pose.joints.clone(),
        crop,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    /// Global epoch index across both stages.
    pub epoch: usize,
    /// `"dense"` or `"joint"`.
    pub stage: &'static str,
    /// Mean summed dense-map loss over the epoch's frames.
    pub dense_loss: f64,
    /// Mean decode loss; `None` during the dense stage.
    pub joint_loss: Option<f64>,
    /// Mean per-joint validation error in millimetres; `None` without a
    /// validation set. Dense-stage epochs score a fixed detection-style
    /// decode, joint-stage epochs the adaptive decode.
    pub val_error_mm: Option<f64>,
    /// Learning rate in effect during this epoch.
    pub learning_rate: f64,
}

struct FrameGrads {
    grads: Vec<f64>,
    dense_loss: f64,
    joint_loss: Option<f64>,
}

fn frame_step(
    model: &Model,
    frame: &TrainFrame,
    cfg: &TrainConfig,
    include_joint: bool,
) -> Result<FrameGrads> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &frame.input)?;
    let spec = head_spec(model.cfg.rep.tag);

    let mut dense_var: Option<Var> = None;
    for (h, kind) in spec.iter().enumerate() {
        let Some(target) = &frame.head_targets[h] else { continue };
        let lk = match kind {
            HeadKind::Prob => LossKind::L2,
            _ => LossKind::SmoothL1 { delta: 1.0 },
        };
        let l = tape.loss(pass.heads[h], target, frame.head_weights[h].as_ref(), lk)?;
        dense_var = Some(match dense_var {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let dense_var =
        dense_var.ok_or_else(|| Error::InvalidArg("representation has no dense-supervised head".into()))?;
    let dense_loss = tape.value(dense_var).item();

    let (total, joint_loss) = if include_joint {
        let decoded = tape.awr_decode(
            model.cfg.rep,
            model.cfg.n_joints,
            &pass.heads,
            &frame.grid,
            cfg.support,
            cfg.temperature,
        )?;
        let lj = tape.loss(decoded, &frame.gt_norm, None, LossKind::SmoothL1 { delta: 1.0 })?;
        let joint_loss = tape.value(lj).item();
        let sd = tape.scale(dense_var, cfg.lambda_dense)?;
        let sj = tape.scale(lj, cfg.lambda_joint)?;
        (tape.add(sd, sj)?, Some(joint_loss))
    } else {
        // The pretraining stage minimizes the dense loss alone; the loss
        // multipliers only weight the mixed objective of the joint stage,
        // so lambda_dense = 0 means "fine-tune on the decoded joints only"
        // without silencing pretraining.
        (dense_var, None)
    };

    let grads = tape.backward(total)?;
    Ok(FrameGrads { grads: model.flat_grads(&grads, &pass), dense_loss, joint_loss })
}

/// Mask-centroid pose used when a decode has no usable support, which can
/// happen in the first epochs before the confidence channels lift off zero.
pub fn mask_centroid_pose(grid: &DenseGrid, n_joints: usize) -> Vec<[f64; 3]> {
    let mut c = [0.0f64; 3];
    let mut n = 0.0;
    for iy in 0..grid.size {
        for ix in 0..grid.size {
            let pix = iy * grid.size + ix;
            if grid.mask[pix] {
                let (u, v) = grid.coord(ix, iy);
                c[0] += u;
                c[1] += v;
                c[2] += grid.zhat[pix];
                n += 1.0;
            }
        }
    }
    if n > 0.0 {
        for a in &mut c {
            *a /= n;
        }
    }
    vec![c; n_joints]
}

fn frame_val_error(
    model: &Model,
    frame: &TrainFrame,
    cfg: &TrainConfig,
    adaptive: bool,
) -> Result<f64> {
    let (dense, logits) = model.predict_dense(&frame.input)?;
    let decoded = if adaptive {
        awr::recover_candidates(&dense, logits.as_deref(), &frame.grid, cfg.support)
            .and_then(|c| awr::awr_aggregate(&c, cfg.temperature))
    } else {
        awr::detection_decode(&dense, &frame.grid)
    };
    let norm = match decoded {
        Ok(p) => p,
        Err(Error::UndecodableJoint { .. }) => mask_centroid_pose(&frame.grid, model.cfg.n_joints),
        Err(e) => return Err(e),
    };
    let pred = denormalize_pose(&norm, &frame.crop);
    let mut err = 0.0;
    for (p, g) in pred.joints.iter().zip(&frame.gt_world) {
        err += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
    }
    Ok(err / frame.gt_world.len() as f64)
}

fn validate_frames(model: &Model, frames: &[TrainFrame], what: &str) -> Result<()> {
    let cfg = &model.cfg;
    let spec_len = head_spec(cfg.rep.tag).len();
    for (i, f) in frames.iter().enumerate() {
        if f.input.shape() != [1, cfg.input_size, cfg.input_size]
            || f.grid.size != cfg.dense_size
            || f.head_targets.len() != spec_len
            || f.head_weights.len() != spec_len
            || f.gt_norm.shape() != [cfg.n_joints, 3]
            || f.gt_world.len() != cfg.n_joints
        {
            return Err(Error::Shape(format!(
                "{what} frame {i} does not match the model configuration"
            )));
        }
    }
    Ok(())
}

/// Trains `model` in place and returns one log entry per epoch.
///
/// `TrainMode::Both` runs the dense stage followed by the joint stage; the
/// other modes run a single stage, which is how a dense-pretrained model is
/// fine-tuned further. The learning rate restarts from the configured value
/// at each stage boundary and is scaled by `lr_factor` whenever the
/// validation error stops improving for `plateau_window` consecutive epochs.
/// A non-finite loss anywhere aborts with [`Error::TrainingDiverged`].
pub fn train_two_stage(
    model: &mut Model,
    train: &[TrainFrame],
    val: &[TrainFrame],
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    model.cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArg("training set is empty".into()));
    }
    validate_frames(model, train, "training")?;
    validate_frames(model, val, "validation")?;

    let stages: &[(&'static str, usize)] = match mode {
        TrainMode::Dense => &[("dense", cfg.dense_epochs)],
        TrainMode::Joint => &[("joint", cfg.joint_epochs)],
        TrainMode::Both => &[("dense", cfg.dense_epochs), ("joint", cfg.joint_epochs)],
    };

    let n_params = model.params.len();
    let mut adam = AdamState::new(n_params);
    let mut step = 0u64;
    let mut logs = Vec::new();
    let mut epoch = 0usize;

    for &(stage, n_epochs) in stages {
        let include_joint = stage == "joint";
        let mut lr = cfg.learning_rate;
        let mut best = f64::INFINITY;
        let mut stale = 0usize;

        for _ in 0..n_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);

            let mut dense_sum = 0.0;
            let mut joint_sum = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let shared: &Model = model;
                let results: Vec<Result<FrameGrads>> = chunk
                    .par_iter()
                    .map(|&i| frame_step(shared, &train[i], cfg, include_joint))
                    .collect();
                let mut gsum = vec![0.0f64; n_params];
                for r in results {
                    let fg = r?;
                    if !fg.dense_loss.is_finite()
                        || fg.joint_loss.is_some_and(|v| !v.is_finite())
                    {
                        return Err(Error::TrainingDiverged { epoch });
                    }
                    dense_sum += fg.dense_loss;
                    joint_sum += fg.joint_loss.unwrap_or(0.0);
                    seen += 1;
                    for (a, g) in gsum.iter_mut().zip(&fg.grads) {
                        *a += g;
                    }
                }
                let inv = 1.0 / chunk.len() as f64;
                for g in &mut gsum {
                    *g *= inv;
                }
                if gsum.iter().any(|g| !g.is_finite()) {
                    return Err(Error::TrainingDiverged { epoch });
                }
                step += 1;
                adam_step(&mut model.params, &gsum, &mut adam, lr, cfg.weight_decay, step)?;
            }

            let val_error = if val.is_empty() {
                None
            } else {
                let errs: Vec<Result<f64>> = val
                    .par_iter()
                    .map(|f| frame_val_error(model, f, cfg, include_joint))
                    .collect();
                let mut sum = 0.0;
                for e in errs {
                    sum += e?;
                }
                Some(sum / val.len() as f64)
            };

            logs.push(EpochLog {
                epoch,
                stage,
                dense_loss: dense_sum / seen as f64,
                joint_loss: include_joint.then(|| joint_sum / seen as f64),
                val_error_mm: val_error,
                learning_rate: lr,
            });

            if let Some(m) = val_error {
                if !m.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                if m < best * (1.0 - cfg.plateau_min_improve) {
                    best = m;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.plateau_window {
                        lr *= cfg.lr_factor;
                        stale = 0;
                    }
                }
            }
            epoch += 1;
        }
    }
    Ok(logs)
}

/// Writes the per-epoch metrics as CSV, one row per epoch.
pub fn write_metrics_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,stage,dense_loss,joint_loss,val_error_mm,learning_rate\n");
    for l in logs {
        let joint = l.joint_loss.map_or(String::new(), |v| format!("{v:.9}"));
        let val = l.val_error_mm.map_or(String::new(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{},{},{:.9},{},{},{:.9}\n",
            l.epoch, l.stage, l.dense_loss, joint, val, l.learning_rate
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
