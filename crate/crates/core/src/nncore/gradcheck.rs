//! Central-difference verification of every differentiable primitive.
//!
//! Each check builds a small random instance, computes a scalar loss through
//! the production code path, and compares the analytic gradient of every
//! input coordinate against `(f(x+eps) - f(x-eps)) / 2eps` with `eps = 1e-6`
//! in f64. A sabotage switch negates the analytic gradient of one op so the
//! harness itself can be shown to catch a wrong derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::awr::{self, CandidateField, WeightSupport};
use crate::nncore::heads::head_spec;
use crate::nncore::model::{Model, ModelConfig};
use crate::nncore::tape::{LossKind, Tape};
use crate::nncore::tensor::Tensor;
use crate::repcodec::{DenseGrid, RepTag, RepType};
use crate::{Error, Result};

pub const REL_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub fn op_names() -> &'static [&'static str] {
    &[
        "conv2d",
        "relu",
        "upsample2x",
        "add",
        "scale",
        "smooth_l1",
        "l2",
        "weighted_smooth_l1",
        "weighted_l2",
        "awr_aggregate",
        "awr_decode_p",
        "awr_decode_h1",
        "awr_decode_h2",
        "awr_decode_o1",
        "awr_decode_o2",
        "awr_decode_o3",
        "model",
    ]
}

#[inline]
fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1.0)
}

/// Evaluator: maps a flat input vector to (loss, analytic gradient).
/// The gradient is only needed when `want_grads` is set.
type Eval<'a> = Box<dyn Fn(&[f64], bool) -> (f64, Vec<f64>) + 'a>;

fn fd_max_rel(x0: &[f64], eval: &Eval, sabotage: bool) -> f64 {
    let (_, analytic) = eval(x0, true);
    let mut x = x0.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + EPS;
        let (lp, _) = eval(&x, false);
        x[i] = orig - EPS;
        let (lm, _) = eval(&x, false);
        x[i] = orig;
        let fd = (lp - lm) / (2.0 * EPS);
        let an = if sabotage { -analytic[i] } else { analytic[i] };
        max_rel = max_rel.max(rel_err(an, fd));
    }
    max_rel
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random values kept away from zero so the relu kink never sits within an
/// FD step of a sample.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(1e-3..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Random values whose offset from `target` keeps clear of the smooth-l1
/// crossover at |d| = delta.
fn rand_vec_off_kink(rng: &mut ChaCha8Rng, target: &[f64], delta: f64) -> Vec<f64> {
    target
        .iter()
        .map(|&t| loop {
            let d: f64 = rng.gen_range(-2.0..2.0);
            if (d.abs() - delta).abs() > 1e-3 {
                break t + d;
            }
        })
        .collect()
}

fn check_tape_unary<F>(rng: &mut ChaCha8Rng, trials: usize, sabotage: bool, make: F) -> f64
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<f64>, Eval<'static>),
{
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (x0, eval) = make(rng);
        worst = worst.max(fd_max_rel(&x0, &eval, sabotage));
    }
    worst
}

fn conv_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Eval<'static>) {
    let (stride, pad) = *[(1usize, 1usize), (2, 1), (1, 0)]
        .get(rng.gen_range(0..3))
        .unwrap();
    let (c, h, w) = (2usize, 5usize, 5usize);
    let o = 3usize;
    let oh = (h + 2 * pad - 3) / stride + 1;
    let x0 = [rand_vec(rng, c * h * w), rand_vec(rng, o * c * 9), rand_vec(rng, o)].concat();
    let target = Tensor::new(vec![o, oh, oh], rand_vec(rng, o * oh * oh)).unwrap();
    let nx = c * h * w;
    let nw = o * c * 9;
    let eval: Eval = Box::new(move |flat, want| {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![c, h, w], flat[..nx].to_vec()).unwrap()).unwrap();
        let wv = tape.param(Tensor::new(vec![o, c, 3, 3], flat[nx..nx + nw].to_vec()).unwrap()).unwrap();
        let b = tape.param(Tensor::new(vec![o], flat[nx + nw..].to_vec()).unwrap()).unwrap();
        let y = tape.conv2d(x, wv, b, stride, pad).unwrap();
        let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
        let loss = tape.value(l).item();
        let g = if want {
            let grads = tape.backward(l).unwrap();
            [
                grads[x.id()].data().to_vec(),
                grads[wv.id()].data().to_vec(),
                grads[b.id()].data().to_vec(),
            ]
            .concat()
        } else {
            Vec::new()
        };
        (loss, g)
    });
    (x0, eval)
}

fn simple_case(
    rng: &mut ChaCha8Rng,
    op: &'static str,
) -> (Vec<f64>, Eval<'static>) {
    match op {
        "relu" => {
            let x0 = rand_vec_off_zero(rng, 24);
            let target = Tensor::new(vec![24], rand_vec(rng, 24)).unwrap();
            let eval: Eval = Box::new(move |flat, want| {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::new(vec![24], flat.to_vec()).unwrap()).unwrap();
                let y = tape.relu(x).unwrap();
                let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
                let loss = tape.value(l).item();
                let g = if want { tape.backward(l).unwrap()[x.id()].data().to_vec() } else { Vec::new() };
                (loss, g)
            });
            (x0, eval)
        }
        "upsample2x" => {
            let x0 = rand_vec(rng, 2 * 9);
            let target = Tensor::new(vec![2, 6, 6], rand_vec(rng, 72)).unwrap();
            let eval: Eval = Box::new(move |flat, want| {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::new(vec![2, 3, 3], flat.to_vec()).unwrap()).unwrap();
                let y = tape.upsample2x(x).unwrap();
                let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
                let loss = tape.value(l).item();
                let g = if want { tape.backward(l).unwrap()[x.id()].data().to_vec() } else { Vec::new() };
                (loss, g)
            });
            (x0, eval)
        }
        "add" => {
            let x0 = rand_vec(rng, 20);
            let target = Tensor::new(vec![10], rand_vec(rng, 10)).unwrap();
            let eval: Eval = Box::new(move |flat, want| {
                let mut tape = Tape::new();
                let a = tape.param(Tensor::new(vec![10], flat[..10].to_vec()).unwrap()).unwrap();
                let b = tape.param(Tensor::new(vec![10], flat[10..].to_vec()).unwrap()).unwrap();
                let y = tape.add(a, b).unwrap();
                let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
                let loss = tape.value(l).item();
                let g = if want {
                    let grads = tape.backward(l).unwrap();
                    [grads[a.id()].data().to_vec(), grads[b.id()].data().to_vec()].concat()
                } else {
                    Vec::new()
                };
                (loss, g)
            });
            (x0, eval)
        }
        "scale" => {
            let x0 = rand_vec(rng, 10);
            let c = rng.gen_range(-2.0..2.0);
            let target = Tensor::new(vec![10], rand_vec(rng, 10)).unwrap();
            let eval: Eval = Box::new(move |flat, want| {
                let mut tape = Tape::new();
                let a = tape.param(Tensor::new(vec![10], flat.to_vec()).unwrap()).unwrap();
                let y = tape.scale(a, c).unwrap();
                let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
                let loss = tape.value(l).item();
                let g = if want { tape.backward(l).unwrap()[a.id()].data().to_vec() } else { Vec::new() };
                (loss, g)
            });
            (x0, eval)
        }
        _ => unreachable!("unknown simple op {op}"),
    }
}

fn loss_case(rng: &mut ChaCha8Rng, kind: LossKind, weighted: bool) -> (Vec<f64>, Eval<'static>) {
    let n = 20;
    let target_v = rand_vec(rng, n);
    let x0 = match kind {
        LossKind::SmoothL1 { delta } => rand_vec_off_kink(rng, &target_v, delta),
        LossKind::L2 => rand_vec(rng, n),
    };
    let target = Tensor::new(vec![n], target_v).unwrap();
    let weights = if weighted {
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        for i in 0..n / 4 {
            w[i * 4] = 0.0; // exercise zero-weight pixels
        }
        Some(Tensor::new(vec![n], w).unwrap())
    } else {
        None
    };
    let eval: Eval = Box::new(move |flat, want| {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![n], flat.to_vec()).unwrap()).unwrap();
        let l = tape.loss(p, &target, weights.as_ref(), kind).unwrap();
        let loss = tape.value(l).item();
        let g = if want { tape.backward(l).unwrap()[p.id()].data().to_vec() } else { Vec::new() };
        (loss, g)
    });
    (x0, eval)
}

fn aggregate_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Eval<'static>) {
    let size = 4usize;
    let nj = 2usize;
    let hw = size * size;
    let t = rng.gen_range(0.5..1.5);
    let valid: Vec<bool> = {
        let mut v: Vec<bool> = (0..nj * hw).map(|_| rng.gen_bool(0.7)).collect();
        for j in 0..nj {
            v[j * hw] = true;
        }
        v
    };
    let upstream: Vec<[f64; 3]> = (0..nj)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let x0 = [rand_vec(rng, nj * hw * 3), rand_vec(rng, nj * hw)].concat();
    let nh = nj * hw * 3;
    let eval: Eval = Box::new(move |flat, want| {
        let field = CandidateField {
            n_joints: nj,
            size,
            hypotheses: flat[..nh].to_vec(),
            weight_logits: flat[nh..].to_vec(),
            valid: valid.clone(),
        };
        let fused = awr::awr_aggregate(&field, t).unwrap();
        let loss: f64 = fused
            .iter()
            .zip(&upstream)
            .map(|(p, u)| p[0] * u[0] + p[1] * u[1] + p[2] * u[2])
            .sum();
        let g = if want {
            let (gh, gl) = awr::awr_gradients(&field, t, &upstream).unwrap();
            [gh, gl].concat()
        } else {
            Vec::new()
        };
        (loss, g)
    });
    (x0, eval)
}

fn decode_case(rng: &mut ChaCha8Rng, tag: RepTag) -> (Vec<f64>, Eval<'static>) {
    let size = 4usize;
    let nj = 2usize;
    let hw = size * size;
    let rep = RepType { tag, kernel_k: rng.gen_range(0.6..1.4), heat_sigma: 0.1 };
    let t = rng.gen_range(0.5..1.5);
    let grid = {
        let mut mask: Vec<bool> = (0..hw).map(|_| rng.gen_bool(0.75)).collect();
        mask[0] = true;
        mask[hw - 1] = true;
        DenseGrid { size, zhat: rand_vec(rng, hw), mask }
    };
    let spec = head_spec(tag);
    let sizes: Vec<usize> = spec.iter().map(|k| k.channels(nj) * hw).collect();
    let total: usize = sizes.iter().sum();
    let x0 = rand_vec(rng, total);
    let target = Tensor::new(vec![nj, 3], rand_vec(rng, nj * 3)).unwrap();
    let eval: Eval = Box::new(move |flat, want| {
        let mut tape = Tape::new();
        let mut heads = Vec::new();
        let mut off = 0;
        for (kind, &sz) in spec.iter().zip(&sizes) {
            let t = Tensor::new(vec![kind.channels(nj), size, size], flat[off..off + sz].to_vec()).unwrap();
            heads.push(tape.param(t).unwrap());
            off += sz;
        }
        let y = tape.awr_decode(rep, nj, &heads, &grid, WeightSupport::HandMask, t).unwrap();
        let l = tape.loss(y, &target, None, LossKind::L2).unwrap();
        let loss = tape.value(l).item();
        let g = if want {
            let grads = tape.backward(l).unwrap();
            let mut out = Vec::with_capacity(flat.len());
            for h in &heads {
                out.extend_from_slice(grads[h.id()].data());
            }
            out
        } else {
            Vec::new()
        };
        (loss, g)
    });
    (x0, eval)
}

fn model_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Eval<'static>) {
    let cfg = ModelConfig {
        rep: RepType::new(RepTag::O3),
        n_joints: 2,
        input_size: 8,
        dense_size: 4,
        channels: vec![3, 4],
        trunk_layers: 1,
        cube_side_mm: 250.0,
    };
    let seed = rng.gen::<u64>();
    let model = Model::init(cfg.clone(), seed).unwrap();
    let input = Tensor::new(vec![1, 8, 8], rand_vec(rng, 64)).unwrap();
    let grid = DenseGrid { size: 4, zhat: rand_vec(rng, 16), mask: vec![true; 16] };
    let hw = 16;
    let dense_targets =
        vec![rand_vec(rng, 3 * 2 * hw), rand_vec(rng, 2 * hw)];
    let joint_target = Tensor::new(vec![2, 3], rand_vec(rng, 6)).unwrap();
    let x0 = model.params.clone();
    let eval: Eval = Box::new(move |flat, want| {
        let mut m = model.clone();
        m.params.copy_from_slice(flat);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &input).unwrap();
        let t0 = Tensor::new(vec![6, 4, 4], dense_targets[0].clone()).unwrap();
        let t1 = Tensor::new(vec![2, 4, 4], dense_targets[1].clone()).unwrap();
        let l0 = tape.loss(pass.heads[0], &t0, None, LossKind::SmoothL1 { delta: 1.0 }).unwrap();
        let l1 = tape.loss(pass.heads[1], &t1, None, LossKind::L2).unwrap();
        let y = tape
            .awr_decode(cfg.rep, 2, &pass.heads, &grid, WeightSupport::HandMask, 1.0)
            .unwrap();
        let lj = tape.loss(y, &joint_target, None, LossKind::SmoothL1 { delta: 1.0 }).unwrap();
        let s = tape.add(l0, l1).unwrap();
        let total = tape.add(s, lj).unwrap();
        let loss = tape.value(total).item();
        let g = if want {
            let grads = tape.backward(total).unwrap();
            m.flat_grads(&grads, &pass)
        } else {
            Vec::new()
        };
        (loss, g)
    });
    (x0, eval)
}

fn check_op(name: &'static str, trials: usize, seed: u64, sabotage: bool) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
    let effective_trials = if name == "model" { trials.div_ceil(10) } else { trials };
    let max_rel = match name {
        "conv2d" => check_tape_unary(&mut rng, effective_trials, sabotage, conv_case),
        "relu" | "upsample2x" | "add" | "scale" => {
            check_tape_unary(&mut rng, effective_trials, sabotage, |r| simple_case(r, name))
        }
        "smooth_l1" => check_tape_unary(&mut rng, effective_trials, sabotage, |r| {
            loss_case(r, LossKind::SmoothL1 { delta: 1.0 }, false)
        }),
        "l2" => check_tape_unary(&mut rng, effective_trials, sabotage, |r| {
            loss_case(r, LossKind::L2, false)
        }),
        "weighted_smooth_l1" => check_tape_unary(&mut rng, effective_trials, sabotage, |r| {
            loss_case(r, LossKind::SmoothL1 { delta: 1.0 }, true)
        }),
        "weighted_l2" => check_tape_unary(&mut rng, effective_trials, sabotage, |r| {
            loss_case(r, LossKind::L2, true)
        }),
        "awr_aggregate" => check_tape_unary(&mut rng, effective_trials, sabotage, aggregate_case),
        "awr_decode_p" => check_tape_unary(&mut rng, effective_trials, sabotage, |r| decode_case(r, RepTag::P)),
        "awr_decode_h1" => {
            check_tape_unary(&mut rng, effective_trials, sabotage, |r| decode_case(r, RepTag::H1))
        }
        "awr_decode_h2" => {
            check_tape_unary(&mut rng, effective_trials, sabotage, |r| decode_case(r, RepTag::H2))
        }
        "awr_decode_o1" => {
            check_tape_unary(&mut rng, effective_trials, sabotage, |r| decode_case(r, RepTag::O1))
        }
        "awr_decode_o2" => {
            check_tape_unary(&mut rng, effective_trials, sabotage, |r| decode_case(r, RepTag::O2))
        }
        "awr_decode_o3" => {
            check_tape_unary(&mut rng, effective_trials, sabotage, |r| decode_case(r, RepTag::O3))
        }
        "model" => check_tape_unary(&mut rng, effective_trials, sabotage, model_case),
        other => return Err(Error::InvalidArg(format!("unknown gradcheck op '{other}'"))),
    };
    Ok(OpReport { name, trials: effective_trials, max_rel_err: max_rel, pass: max_rel < REL_TOL })
}

/// Stable tiny string hash to decorrelate per-op RNG streams.
fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Checks every op. `sabotage` names one op whose analytic gradient is
/// negated before comparison; its report must then fail while all others
/// pass, demonstrating the harness has teeth.
pub fn run_all(trials: usize, seed: u64, sabotage: Option<&str>) -> Result<Vec<OpReport>> {
    if trials == 0 {
        return Err(Error::InvalidArg("gradcheck needs at least one trial".into()));
    }
    if let Some(s) = sabotage {
        if !op_names().contains(&s) {
            return Err(Error::InvalidArg(format!("unknown sabotage target '{s}'")));
        }
    }
    let mut reports = Vec::new();
    for &name in op_names() {
        reports.push(check_op(name, trials, seed, sabotage == Some(name))?);
    }
    Ok(reports)
}
