//! The dense regression network.
//!
//! A deliberately small fully-convolutional stack: a stem conv, strided
//! downsampling convs, a trunk at the bottleneck, nearest-neighbour
//! upsampling back to the dense resolution, and one 1x1 head per
//! representation component. All parameters live in one flat `Vec<f64>`
//! whose layout (body convs in order, then heads; weights before bias) is
//! also the checkpoint blob order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::DEFAULT_CUBE_SIDE_MM;
use crate::nncore::heads::{assemble_dense, head_spec, p_logits, HeadKind};
use crate::nncore::tape::{Tape, Var};
use crate::nncore::tensor::Tensor;
use crate::repcodec::{DenseRep, RepTag, RepType};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rep: RepType,
    pub n_joints: usize,
    /// Crop resolution fed to the network.
    pub input_size: usize,
    /// Resolution of the dense output maps.
    pub dense_size: usize,
    /// Channel widths: `channels[0]` for the stem, each later entry is a
    /// stride-2 downsampling conv, so the bottleneck runs at
    /// `input_size >> (channels.len() - 1)`.
    pub channels: Vec<usize>,
    /// Number of 3x3 convs at the bottleneck.
    pub trunk_layers: usize,
    pub cube_side_mm: f64,
}

impl ModelConfig {
    pub fn new(rep: RepType, n_joints: usize) -> Self {
        ModelConfig {
            rep,
            n_joints,
            input_size: 64,
            dense_size: 32,
            channels: vec![16, 24, 32],
            trunk_layers: 2,
            cube_side_mm: DEFAULT_CUBE_SIDE_MM,
        }
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> (self.channels.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.rep.validate()?;
        if self.n_joints == 0 {
            return Err(Error::InvalidArg("n_joints must be non-zero".into()));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArg("channels must be non-empty and non-zero".into()));
        }
        if self.trunk_layers == 0 {
            return Err(Error::InvalidArg("trunk_layers must be at least 1".into()));
        }
        if !(self.cube_side_mm.is_finite() && self.cube_side_mm > 0.0) {
            return Err(Error::InvalidArg("cube_side_mm must be positive".into()));
        }
        let downs = self.channels.len() - 1;
        if self.input_size == 0 || self.input_size % (1 << downs) != 0 {
            return Err(Error::InvalidArg(format!(
                "input_size {} must be divisible by 2^{downs}",
                self.input_size
            )));
        }
        let bottleneck = self.bottleneck_size();
        if bottleneck < 2 {
            return Err(Error::InvalidArg(format!(
                "bottleneck {bottleneck} too small; reduce downsampling stages"
            )));
        }
        if self.dense_size < bottleneck
            || self.dense_size % bottleneck != 0
            || !(self.dense_size / bottleneck).is_power_of_two()
        {
            return Err(Error::InvalidArg(format!(
                "dense_size {} must be bottleneck {bottleneck} times a power of two",
                self.dense_size
            )));
        }
        if self.dense_size > self.input_size || self.input_size % self.dense_size != 0 {
            return Err(Error::InvalidArg(format!(
                "dense_size {} must divide input_size {}",
                self.dense_size, self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
    w_off: usize,
    b_off: usize,
}

impl ConvSpec {
    fn n_weights(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k
    }
}

#[derive(Debug, Clone)]
enum Step {
    Conv(usize),
    Upsample,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
    steps: Vec<Step>,
    convs: Vec<ConvSpec>,
    head_convs: Vec<ConvSpec>,
}

/// Tape handles from one forward pass: head outputs plus the parameter
/// variables needed to read gradients back out.
pub struct ForwardPass {
    pub heads: Vec<Var>,
    param_vars: Vec<(Var, Var)>,
}

impl Model {
    /// Builds and initializes a model: weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero. The `P` weight-logit
    /// head starts at exactly zero so adaptive weighting begins uniform.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut steps = Vec::new();
        let mut offset = 0usize;

        let push_conv = |convs: &mut Vec<ConvSpec>,
                             offset: &mut usize,
                             in_ch: usize,
                             out_ch: usize,
                             k: usize,
                             stride: usize,
                             pad: usize,
                             relu: bool|
         -> usize {
            let spec = ConvSpec { in_ch, out_ch, k, stride, pad, relu, w_off: *offset, b_off: *offset + out_ch * in_ch * k * k };
            *offset = spec.b_off + out_ch;
            convs.push(spec);
            convs.len() - 1
        };

        // Stem.
        let stem = push_conv(&mut convs, &mut offset, 1, cfg.channels[0], 3, 1, 1, true);
        steps.push(Step::Conv(stem));
        // Downsampling stack.
        for i in 1..cfg.channels.len() {
            let id = push_conv(&mut convs, &mut offset, cfg.channels[i - 1], cfg.channels[i], 3, 2, 1, true);
            steps.push(Step::Conv(id));
        }
        // Trunk at the bottleneck.
        let deep = *cfg.channels.last().expect("non-empty");
        for _ in 0..cfg.trunk_layers {
            let id = push_conv(&mut convs, &mut offset, deep, deep, 3, 1, 1, true);
            steps.push(Step::Conv(id));
        }
        // Upsample back to the dense resolution, halving channels per level.
        let levels = (cfg.dense_size / cfg.bottleneck_size()).trailing_zeros();
        let mut ch = deep;
        for _ in 0..levels {
            steps.push(Step::Upsample);
            let next = (ch / 2).max(4);
            let id = push_conv(&mut convs, &mut offset, ch, next, 3, 1, 1, true);
            steps.push(Step::Conv(id));
            ch = next;
        }
        // Per-component 1x1 heads.
        let mut head_convs = Vec::new();
        for kind in head_spec(cfg.rep.tag) {
            push_conv(&mut head_convs, &mut offset, ch, kind.channels(cfg.n_joints), 1, 1, 0, false);
        }

        let mut params = vec![0.0; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero_head: Option<usize> = head_spec(cfg.rep.tag)
            .iter()
            .position(|k| *k == HeadKind::WeightLogits);
        for (i, spec) in convs.iter().chain(head_convs.iter()).enumerate() {
            let is_zeroed = zero_head.map_or(false, |z| i == convs.len() + z);
            let fan_in = (spec.in_ch * spec.k * spec.k) as f64;
            let a = 1.0 / fan_in.sqrt();
            for p in params[spec.w_off..spec.w_off + spec.n_weights()].iter_mut() {
                let v = rng.gen_range(-a..a);
                if !is_zeroed {
                    *p = v;
                }
            }
            // Biases stay zero.
        }

        Ok(Model { cfg, params, steps, convs, head_convs })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn conv_tensors(&self, spec: &ConvSpec) -> Result<(Tensor, Tensor)> {
        let w = Tensor::new(
            vec![spec.out_ch, spec.in_ch, spec.k, spec.k],
            self.params[spec.w_off..spec.w_off + spec.n_weights()].to_vec(),
        )?;
        let b = Tensor::new(vec![spec.out_ch], self.params[spec.b_off..spec.b_off + spec.out_ch].to_vec())?;
        Ok((w, b))
    }

    /// Runs the network on a `[1, input_size, input_size]` crop tensor.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<ForwardPass> {
        let want = [1, self.cfg.input_size, self.cfg.input_size];
        if input.shape() != want {
            return Err(Error::Shape(format!(
                "model input shape {:?}, expected {:?}",
                input.shape(),
                want
            )));
        }
        let mut param_vars = Vec::with_capacity(self.convs.len() + self.head_convs.len());
        let mut cur = tape.constant(input.clone())?;
        let apply_conv = |tape: &mut Tape, cur: Var, spec: &ConvSpec| -> Result<(Var, (Var, Var))> {
            let (wt, bt) = self.conv_tensors(spec)?;
            let w = tape.param(wt)?;
            let b = tape.param(bt)?;
            let mut y = tape.conv2d(cur, w, b, spec.stride, spec.pad)?;
            if spec.relu {
                y = tape.relu(y)?;
            }
            Ok((y, (w, b)))
        };
        for step in &self.steps {
            match step {
                Step::Conv(i) => {
                    let (y, wb) = apply_conv(tape, cur, &self.convs[*i])?;
                    param_vars.push(wb);
                    cur = y;
                }
                Step::Upsample => {
                    cur = tape.upsample2x(cur)?;
                }
            }
        }
        let mut heads = Vec::with_capacity(self.head_convs.len());
        for spec in &self.head_convs {
            let (y, wb) = apply_conv(tape, cur, spec)?;
            param_vars.push(wb);
            heads.push(y);
        }
        Ok(ForwardPass { heads, param_vars })
    }

    /// Plain inference: dense maps plus the weight logits for `P`.
    pub fn predict_dense(&self, input: &Tensor) -> Result<(DenseRep, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        let bufs: Vec<&[f64]> = pass.heads.iter().map(|&v| tape.value(v).data()).collect();
        let dense = assemble_dense(self.cfg.rep, self.cfg.n_joints, self.cfg.dense_size, &bufs)?;
        let logits = p_logits(self.cfg.rep.tag, &bufs).map(<[f64]>::to_vec);
        Ok((dense, logits))
    }

    /// Collects per-node gradients into the flat parameter layout.
    pub fn flat_grads(&self, grads: &[Tensor], pass: &ForwardPass) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        for (spec, (wv, bv)) in self.convs.iter().chain(self.head_convs.iter()).zip(&pass.param_vars) {
            out[spec.w_off..spec.w_off + spec.n_weights()].copy_from_slice(grads[wv.id()].data());
            out[spec.b_off..spec.b_off + spec.out_ch].copy_from_slice(grads[bv.id()].data());
        }
        out
    }

    /// True when this configuration carries a learned weight-logit head.
    pub fn has_weight_head(&self) -> bool {
        self.cfg.rep.tag == RepTag::P
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(tag: RepTag) -> ModelConfig {
        ModelConfig {
            rep: RepType::new(tag),
            n_joints: 3,
            input_size: 16,
            dense_size: 8,
            channels: vec![4, 6],
            trunk_layers: 1,
            cube_side_mm: 250.0,
        }
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = small_cfg(RepTag::O3);
        assert!(cfg.validate().is_ok());
        cfg.input_size = 15; // not divisible by 2
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(RepTag::O3);
        cfg.dense_size = 6; // not bottleneck * 2^m
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(RepTag::O3);
        cfg.dense_size = 32; // larger than input
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(RepTag::O3);
        cfg.channels.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::init(small_cfg(RepTag::O3), 9).unwrap();
        let b = Model::init(small_cfg(RepTag::O3), 9).unwrap();
        let c = Model::init(small_cfg(RepTag::O3), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn forward_produces_head_shapes() {
        for tag in RepTag::ALL {
            let cfg = small_cfg(tag);
            let model = Model::init(cfg.clone(), 1).unwrap();
            let mut tape = Tape::new();
            let input = Tensor::zeros(vec![1, 16, 16]);
            let pass = model.forward(&mut tape, &input).unwrap();
            let spec = head_spec(tag);
            assert_eq!(pass.heads.len(), spec.len());
            for (v, kind) in pass.heads.iter().zip(&spec) {
                assert_eq!(
                    tape.value(*v).shape(),
                    &[kind.channels(3), 8, 8],
                    "{tag}"
                );
            }
        }
    }

    #[test]
    fn p_weight_head_starts_uniform() {
        let model = Model::init(small_cfg(RepTag::P), 4).unwrap();
        let input = Tensor::zeros(vec![1, 16, 16]);
        let (_, logits) = model.predict_dense(&input).unwrap();
        let logits = logits.expect("P carries a weight head");
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn non_p_reps_have_no_weight_head() {
        let model = Model::init(small_cfg(RepTag::H2), 4).unwrap();
        let input = Tensor::zeros(vec![1, 16, 16]);
        let (dense, logits) = model.predict_dense(&input).unwrap();
        assert!(logits.is_none());
        assert_eq!(dense.n_joints, 3);
        assert_eq!(dense.size, 8);
    }

    #[test]
    fn flat_grads_align_with_param_layout() {
        let cfg = small_cfg(RepTag::O3);
        let model = Model::init(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let input = Tensor::new(
            vec![1, 16, 16],
            (0..256).map(|i| (i as f64 / 256.0) - 0.5).collect(),
        )
        .unwrap();
        let pass = model.forward(&mut tape, &input).unwrap();
        // Mean-square of the first head as a loss.
        let t = Tensor::zeros(tape.value(pass.heads[0]).shape().to_vec());
        let l = tape.loss(pass.heads[0], &t, None, crate::nncore::tape::LossKind::L2).unwrap();
        let grads = tape.backward(l).unwrap();
        let flat = model.flat_grads(&grads, &pass);
        assert_eq!(flat.len(), model.n_params());
        // Something must flow to the stem weights.
        assert!(flat[..9].iter().any(|&g| g != 0.0));
    }
}
