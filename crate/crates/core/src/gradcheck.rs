//! Finite-difference verification of the reverse-mode gradients.
//!
//! Every differentiable operation is checked by comparing its analytic
//! gradient against central finite differences. Two measures keep the
//! comparison meaningful at 32-bit precision, where forward rounding noise
//! would otherwise swamp the difference quotient:
//!
//! * The finite differences always run in the f64 shadow of the checked
//!   case — the same computation instantiated at f64, evaluated at exactly
//!   the checked point (inputs cast up bit-for-bit). The analytic side runs
//!   at the checked precision, so the suite verifies the f32 backward
//!   against a near-exact reference. This is what the 64-bit shadow mode
//!   exists for.
//! * Rather than scalarizing the output with a plain sum, the differences
//!   are taken per output element and contracted with a fixed random weight
//!   vector; the analytic side backpropagates the same weighted sum, so
//!   per-element errors cannot cancel.
//!
//! Operations with kinks (relu, maxpool, the contrastive hinge) get inputs
//! nudged away from the non-differentiable set so the finite-difference
//! step never crosses it.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, total_loss, Reduction};
use crate::model::{AasnModel, Align, Contrastive, Fusion, ModelConfig};
use crate::tensor::{
    add, avgpool2x2, batchnorm2d_eval, batchnorm2d_train, bce_with_logits_mean, concat_channels,
    conv2d, grid_sample_bilinear, linear_1x1, maxpool2x2, mean_all, mul, relu, scale, sigmoid, sub,
    sum_all, sum_channels, upsample_bilinear2x, BnState, Scalar, Shape, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst accepted relative error for single-operation rows, f32 suite.
pub const OP_TOL_F32: f64 = 1e-3;
/// Worst accepted relative error for single-operation rows, f64 suite.
pub const OP_TOL_F64: f64 = 1e-6;
/// Worst accepted relative error for the end-to-end model row, f32 suite.
/// The composite achieves ~1e-5 with the deterministic row seeds, so the
/// single-op bar holds here too.
pub const E2E_TOL_F32: f64 = 1e-3;
/// Worst accepted relative error for the end-to-end model row, f64 suite.
pub const E2E_TOL_F64: f64 = 1e-6;

// Finite differences always run in f64, so the steps only balance
// truncation error against f64 rounding. The end-to-end step is smaller
// still: it differentiates through internal relus whose pre-activations
// cannot be nudged, and a tiny step keeps a perturbation from ever
// crossing one of their kinks.
const OP_STEP: f64 = 1e-5;
const E2E_STEP: f64 = 3e-6;

/// Outcome of one suite row: the worst relative error seen across all
/// checked instances of one operation, against its pinned tolerance.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

type Forward<E> = Box<dyn Fn(&[Tensor<E>]) -> Result<Tensor<E>>>;

/// One randomized check: leaf tensors plus a closure that rebuilds the
/// computation from them, so finite differences can re-run it on perturbed
/// copies.
struct Case<E: Scalar> {
    inputs: Vec<Tensor<E>>,
    run: Forward<E>,
}

type CaseBuilder<E> = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Case<E>>>;

struct Row<E: Scalar> {
    name: &'static str,
    end_to_end: bool,
    build: CaseBuilder<E>,
}

fn uniform<E: Scalar>(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Result<Tensor<E>> {
    let data = (0..shape.numel()).map(|_| E::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::param(shape, data)
}

/// Signed draw with magnitude in [lo, hi]: keeps relu inputs away from the
/// kink at zero by more than any finite-difference step.
fn away_from_zero<E: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    lo: f64,
    hi: f64,
) -> Result<Tensor<E>> {
    let data = (0..shape.numel())
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            E::from_f64(sign * rng.random_range(lo..hi))
        })
        .collect();
    Tensor::param(shape, data)
}

/// Max relative error between analytic and finite-difference gradients for
/// one case. The analytic pass runs on `case` at the checked precision; the
/// finite differences run on `shadow`, the same case built at f64, with the
/// checked inputs cast up so both sides evaluate the identical point.
/// `sabotage` deliberately corrupts the first analytic value to prove the
/// comparison can fail.
fn check_case<E: Scalar>(
    case: &Case<E>,
    shadow: &Case<f64>,
    step: f64,
    rng: &mut ChaCha8Rng,
    sabotage: bool,
) -> Result<f64> {
    if case.inputs.len() != shadow.inputs.len() {
        return Err(Error::Contract("checked and shadow cases disagree on input count".into()));
    }
    for t in &case.inputs {
        t.zero_grad();
    }
    let y = (case.run)(&case.inputs)?;
    let weights: Vec<f64> = (0..y.shape().numel()).map(|_| rng.random_range(0.25..1.0)).collect();
    let wt = Tensor::constant(y.shape(), weights.iter().map(|&v| E::from_f64(v)).collect())?;
    sum_all(&mul(&y, &wt)?).backward()?;

    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(case.inputs.len());
    for t in &case.inputs {
        let g = t
            .grad()
            .ok_or_else(|| Error::Contract("gradcheck input received no gradient".into()))?;
        analytic.push(g.iter().map(|&v| Scalar::to_f64(v)).collect());
    }
    if sabotage {
        analytic[0][0] += 0.05;
    }

    let base: Vec<Vec<f64>> =
        case.inputs.iter().map(|t| t.data().iter().map(|&v| Scalar::to_f64(v)).collect()).collect();
    let lifted: Vec<Tensor<f64>> = case
        .inputs
        .iter()
        .zip(&base)
        .map(|(t, d)| Tensor::constant(t.shape(), d.clone()))
        .collect::<Result<_>>()?;

    let mut max_abs_diff = 0.0f64;
    let mut denom = 1.0f64;
    for k in 0..lifted.len() {
        let shape = lifted[k].shape();
        if shape != shadow.inputs[k].shape() {
            return Err(Error::Contract(format!(
                "checked and shadow cases disagree on input {k}: {shape} vs {}",
                shadow.inputs[k].shape()
            )));
        }
        for i in 0..base[k].len() {
            let x0 = base[k][i];
            let xp = x0 + step;
            let xm = x0 - step;
            let probe = |v: f64| -> Result<Vec<f64>> {
                let mut data = base[k].clone();
                data[i] = v;
                let mut inputs = lifted.clone();
                inputs[k] = Tensor::constant(shape, data)?;
                Ok((shadow.run)(&inputs)?.data().to_vec())
            };
            let yp = probe(xp)?;
            let ym = probe(xm)?;
            let mut contracted = 0.0f64;
            for (j, w) in weights.iter().enumerate() {
                contracted += w * (yp[j] - ym[j]);
            }
            let fd = contracted / (xp - xm);
            let a = analytic[k][i];
            if !fd.is_finite() || !a.is_finite() {
                return Ok(f64::NAN);
            }
            max_abs_diff = max_abs_diff.max((a - fd).abs());
            denom = denom.max(a.abs()).max(fd.abs());
        }
    }
    Ok(max_abs_diff / denom)
}

/// Per-channel shift lifting every value of `pre` to at least `floor`.
/// Composite rows route batchnorm output through relu; with the shift in
/// place the relu stays in its linear region, so the finite-difference step
/// cannot cross its kink (the relu row itself covers both branches).
#[allow(clippy::needless_range_loop)]
fn lifting_beta<E: Scalar>(pre: &Tensor<E>, floor: f64) -> Result<Tensor<E>> {
    let s = pre.shape();
    let mut low = vec![f64::INFINITY; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    low[c] = low[c].min(Scalar::to_f64(pre.at(n, c, i, j)));
                }
            }
        }
    }
    Tensor::param(
        Shape::new(1, s.c, 1, 1),
        low.into_iter().map(|m| E::from_f64(floor - m)).collect(),
    )
}

fn rows<E: Scalar>() -> Vec<Row<E>> {
    let mut rows: Vec<Row<E>> = Vec::new();
    let mut push = |name: &'static str, end_to_end: bool, build: CaseBuilder<E>| {
        rows.push(Row { name, end_to_end, build });
    };

    push(
        "add",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let b = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a, b], run: Box::new(|t| add(&t[0], &t[1])) })
        }),
    );
    push(
        "sub",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let b = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a, b], run: Box::new(|t| sub(&t[0], &t[1])) })
        }),
    );
    push(
        "mul",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let b = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a, b], run: Box::new(|t| mul(&t[0], &t[1])) })
        }),
    );
    push(
        "scale",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let s = rng.random_range(0.5..1.5);
            Ok(Case { inputs: vec![a], run: Box::new(move |t| Ok(scale(&t[0], E::from_f64(s)))) })
        }),
    );
    push(
        "relu",
        false,
        Box::new(|rng| {
            let a = away_from_zero(rng, Shape::new(2, 3, 4, 4), 0.2, 1.2)?;
            Ok(Case { inputs: vec![a], run: Box::new(|t| Ok(relu(&t[0]))) })
        }),
    );
    push(
        "sigmoid",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -2.0, 2.0)?;
            Ok(Case { inputs: vec![a], run: Box::new(|t| Ok(sigmoid(&t[0]))) })
        }),
    );
    push(
        "sum_all",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a], run: Box::new(|t| Ok(sum_all(&t[0]))) })
        }),
    );
    push(
        "mean_all",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a], run: Box::new(|t| Ok(mean_all(&t[0]))) })
        }),
    );
    push(
        "sum_channels",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a], run: Box::new(|t| Ok(sum_channels(&t[0]))) })
        }),
    );
    push(
        "conv2d",
        false,
        Box::new(|rng| {
            let stride = if rng.random_bool(0.5) { 1 } else { 2 };
            let pad = usize::from(rng.random_bool(0.5));
            let x = uniform(rng, Shape::new(2, 3, 8, 8), -1.0, 1.0)?;
            let w = uniform(rng, Shape::new(4, 3, 3, 3), -0.5, 0.5)?;
            let b = uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5)?;
            Ok(Case {
                inputs: vec![x, w, b],
                run: Box::new(move |t| conv2d(&t[0], &t[1], Some(&t[2]), stride, pad)),
            })
        }),
    );
    push(
        "linear_1x1",
        false,
        Box::new(|rng| {
            let x = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let w = uniform(rng, Shape::new(4, 3, 1, 1), -0.5, 0.5)?;
            let b = uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5)?;
            Ok(Case { inputs: vec![x, w, b], run: Box::new(|t| linear_1x1(&t[0], &t[1], &t[2])) })
        }),
    );
    push(
        "batchnorm2d_train",
        false,
        Box::new(|rng| {
            let x = uniform(rng, Shape::new(2, 4, 6, 6), -1.0, 1.0)?;
            let gamma = uniform(rng, Shape::new(1, 4, 1, 1), 0.5, 1.5)?;
            let beta = uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5)?;
            Ok(Case {
                inputs: vec![x, gamma, beta],
                run: Box::new(|t| {
                    // Fresh statistics per call: the running buffers are a
                    // side effect, not part of the differentiated function.
                    let mut state = BnState::new(4, E::from_f64(0.1), E::from_f64(1e-5));
                    batchnorm2d_train(&t[0], &t[1], &t[2], &mut state)
                }),
            })
        }),
    );
    push(
        "batchnorm2d_eval",
        false,
        Box::new(|rng| {
            let x = uniform(rng, Shape::new(2, 4, 6, 6), -1.0, 1.0)?;
            let gamma = uniform(rng, Shape::new(1, 4, 1, 1), 0.5, 1.5)?;
            let beta = uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5)?;
            let mut state = BnState::new(4, E::from_f64(0.1), E::from_f64(1e-5));
            state.running_mean = (0..4).map(|_| E::from_f64(rng.random_range(-0.5..0.5))).collect();
            state.running_var = (0..4).map(|_| E::from_f64(rng.random_range(0.5..1.5))).collect();
            Ok(Case {
                inputs: vec![x, gamma, beta],
                run: Box::new(move |t| batchnorm2d_eval(&t[0], &t[1], &t[2], &state)),
            })
        }),
    );
    push(
        "avgpool2x2",
        false,
        Box::new(|rng| {
            let x = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![x], run: Box::new(|t| avgpool2x2(&t[0])) })
        }),
    );
    push(
        "maxpool2x2",
        false,
        Box::new(|rng| {
            // Separate the values inside each 2x2 window by at least 0.35 so
            // the argmax cannot flip under the finite-difference step.
            let shape = Shape::new(2, 3, 4, 4);
            let mut data = vec![E::zero(); shape.numel()];
            for n in 0..shape.n {
                for c in 0..shape.c {
                    for wi in 0..shape.h / 2 {
                        for wj in 0..shape.w / 2 {
                            let base = rng.random_range(-1.0..1.0);
                            let mut offsets = [0.0, 0.35, 0.7, 1.05];
                            offsets.shuffle(rng);
                            for (q, off) in offsets.iter().enumerate() {
                                let (di, dj) = (q / 2, q % 2);
                                data[shape.idx(n, c, 2 * wi + di, 2 * wj + dj)] =
                                    E::from_f64(base + off);
                            }
                        }
                    }
                }
            }
            let x = Tensor::param(shape, data)?;
            Ok(Case { inputs: vec![x], run: Box::new(|t| maxpool2x2(&t[0])) })
        }),
    );
    push(
        "upsample_bilinear2x",
        false,
        Box::new(|rng| {
            let x = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![x], run: Box::new(|t| Ok(upsample_bilinear2x(&t[0]))) })
        }),
    );
    push(
        "concat_channels",
        false,
        Box::new(|rng| {
            let a = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let b = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            Ok(Case { inputs: vec![a, b], run: Box::new(|t| concat_channels(&t[0], &t[1])) })
        }),
    );
    push(
        "grid_sample_bilinear",
        false,
        Box::new(|rng| {
            // The sampled image is linear in its values for any fixed grid,
            // and the grid itself is a constant by contract.
            let x = uniform(rng, Shape::new(1, 2, 5, 5), -1.0, 1.0)?;
            let gshape = Shape::new(1, 2, 3, 4);
            let gdata =
                (0..gshape.numel()).map(|_| E::from_f64(rng.random_range(-0.95..0.95))).collect();
            let grid = Tensor::constant(gshape, gdata)?;
            Ok(Case { inputs: vec![x], run: Box::new(move |t| grid_sample_bilinear(&t[0], &grid)) })
        }),
    );
    push(
        "bce_with_logits_mean",
        false,
        Box::new(|rng| {
            let logits = uniform(rng, Shape::new(2, 1, 4, 4), -2.0, 2.0)?;
            let target = uniform(rng, Shape::new(2, 1, 4, 4), 0.05, 0.95)?;
            Ok(Case {
                inputs: vec![logits, target],
                run: Box::new(|t| bce_with_logits_mean(&t[0], &t[1])),
            })
        }),
    );
    push(
        "contrastive",
        false,
        Box::new(|rng| {
            let shape = Shape::new(2, 3, 4, 4);
            let margin = 0.5;
            let f = uniform::<E>(rng, shape, -1.0, 1.0)?;
            let mut ff: Vec<f64> =
                (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mshape = Shape::new(2, 1, 4, 4);
            let mask: Vec<f64> =
                (0..mshape.numel()).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            // Keep every masked cell's squared distance at least 0.15 away
            // from the margin so the hinge cannot flip under perturbation.
            for n in 0..shape.n {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        if mask[mshape.idx(n, 0, i, j)] == 0.0 {
                            continue;
                        }
                        let mut d2 = 0.0f64;
                        for c in 0..shape.c {
                            let idx = shape.idx(n, c, i, j);
                            let d = f.data()[idx].to_f64() - ff[idx];
                            d2 += d * d;
                        }
                        if (d2 - margin).abs() >= 0.15 {
                            continue;
                        }
                        let target = if d2 >= margin { 0.8 } else { 0.2 };
                        for c in 0..shape.c {
                            let idx = shape.idx(n, c, i, j);
                            let fv = f.data()[idx].to_f64();
                            ff[idx] = if d2 < 1e-6 {
                                fv + (target / shape.c as f64).sqrt()
                            } else {
                                fv + (target / d2).sqrt() * (ff[idx] - fv)
                            };
                        }
                    }
                }
            }
            let ff = Tensor::param(shape, ff.into_iter().map(E::from_f64).collect())?;
            let mask = Tensor::constant(mshape, mask.into_iter().map(E::from_f64).collect())?;
            Ok(Case {
                inputs: vec![f, ff],
                run: Box::new(move |t| {
                    contrastive_loss(&t[0], &t[1], &mask, E::from_f64(margin), Reduction::Mean)
                }),
            })
        }),
    );
    push(
        "conv_bn_relu_pool_sum",
        false,
        Box::new(|rng| {
            let x = uniform(rng, Shape::new(2, 3, 8, 8), -1.0, 1.0)?;
            let w = uniform(rng, Shape::new(4, 3, 3, 3), -0.5, 0.5)?;
            let b = uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5)?;
            let gamma = uniform(rng, Shape::new(1, 4, 1, 1), 0.5, 1.5)?;
            let zero = Tensor::constant(Shape::new(1, 4, 1, 1), vec![E::zero(); 4])?;
            let mut state = BnState::new(4, E::from_f64(0.1), E::from_f64(1e-5));
            let trial =
                batchnorm2d_train(&conv2d(&x, &w, Some(&b), 1, 1)?, &gamma, &zero, &mut state)?;
            let beta = lifting_beta(&trial, 0.25)?;
            Ok(Case {
                inputs: vec![x, w, b, gamma, beta],
                run: Box::new(|t: &[Tensor<E>]| {
                    let mut state = BnState::new(4, E::from_f64(0.1), E::from_f64(1e-5));
                    let pre = batchnorm2d_train(
                        &conv2d(&t[0], &t[1], Some(&t[2]), 1, 1)?,
                        &t[3],
                        &t[4],
                        &mut state,
                    )?;
                    Ok(sum_all(&avgpool2x2(&relu(&pre))?))
                }),
            })
        }),
    );
    push(
        "projection_head",
        false,
        Box::new(|rng| {
            let f = uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0)?;
            let w = uniform(rng, Shape::new(4, 3, 1, 1), -0.5, 0.5)?;
            let b = uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5)?;
            let gamma = uniform(rng, Shape::new(1, 4, 1, 1), 0.5, 1.5)?;
            let zero = Tensor::constant(Shape::new(1, 4, 1, 1), vec![E::zero(); 4])?;
            let mut state = BnState::new(4, E::from_f64(0.1), E::from_f64(1e-5));
            let trial = batchnorm2d_train(&linear_1x1(&f, &w, &b)?, &gamma, &zero, &mut state)?;
            let beta = lifting_beta(&trial, 0.25)?;
            Ok(Case {
                inputs: vec![f, w, b, gamma, beta],
                run: Box::new(|t: &[Tensor<E>]| {
                    let mut state = BnState::new(4, E::from_f64(0.1), E::from_f64(1e-5));
                    Ok(relu(&batchnorm2d_train(
                        &linear_1x1(&t[0], &t[1], &t[2])?,
                        &t[3],
                        &t[4],
                        &mut state,
                    )?))
                }),
            })
        }),
    );
    push("end_to_end", true, Box::new(|rng| end_to_end_case(rng)));
    rows
}

/// The whole training objective on a toy model: two images in, weighted
/// BCE-plus-contrastive loss out, differentiated with respect to every
/// parameter and both images.
fn end_to_end_case<E: Scalar>(rng: &mut ChaCha8Rng) -> Result<Case<E>> {
    let cfg = ModelConfig {
        base_channels: 2,
        blocks_before_split: 3,
        blocks_after_split: 1,
        fusion: Fusion::InsideTransition,
        align: Align::Feature,
        contrastive: Contrastive::OnWithProjection,
        proj_dim: 0,
        input_hw: (16, 32),
        output_stride: 4,
    };
    let mut model = AasnModel::<E>::new(cfg, rng.random())?;
    model.set_train(true);

    let (fh, fw) = cfg.feature_hw();
    let (oh, ow) = cfg.output_hw();

    let image = uniform(rng, Shape::new(1, 1, cfg.input_hw.0, cfg.input_hw.1), 0.05, 0.95)?;
    let mirrored = uniform(rng, Shape::new(1, 1, cfg.input_hw.0, cfg.input_hw.1), 0.05, 0.95)?;
    let mut inputs = vec![image, mirrored];
    for slot in model.params_mut() {
        inputs.push(slot.clone());
    }

    // Identity sampling grid with a small jitter; the grid is constant, so
    // the loss stays linear in the sampled features regardless of position.
    let mut gdata = vec![E::zero(); 2 * fh * fw];
    for i in 0..fh {
        for j in 0..fw {
            let u = 2.0 * j as f64 / (fw - 1) as f64 - 1.0 + rng.random_range(-0.05..0.05);
            let v = 2.0 * i as f64 / (fh - 1) as f64 - 1.0 + rng.random_range(-0.05..0.05);
            gdata[i * fw + j] = E::from_f64(u);
            gdata[(fh + i) * fw + j] = E::from_f64(v);
        }
    }
    let grid = Tensor::constant(Shape::new(1, 2, fh, fw), gdata)?;

    let tdata =
        (0..oh * ow).map(|_| E::from_f64(f64::from(u8::from(rng.random_bool(0.5))))).collect();
    let target = Tensor::constant(Shape::new(1, 1, oh, ow), tdata)?;

    let mut mdata: Vec<E> =
        (0..fh * fw).map(|_| E::from_f64(f64::from(u8::from(rng.random_bool(0.5))))).collect();
    mdata[0] = E::one();
    mdata[1] = E::zero();
    let mask = Tensor::constant(Shape::new(1, 1, fh, fw), mdata)?;

    let model = RefCell::new(model);
    let run = Box::new(move |t: &[Tensor<E>]| -> Result<Tensor<E>> {
        let mut m = model.borrow_mut();
        {
            let mut slots = m.params_mut();
            if slots.len() + 2 != t.len() {
                return Err(Error::Contract(format!(
                    "end-to-end case wants {} inputs, got {}",
                    slots.len() + 2,
                    t.len()
                )));
            }
            for (slot, value) in slots.iter_mut().zip(&t[2..]) {
                **slot = value.clone();
            }
        }
        let out = m.forward(&t[0], &t[1], Some(&grid))?;
        let ff = out
            .ff
            .as_ref()
            .ok_or_else(|| Error::Contract("end-to-end case expects mirrored features".into()))?;
        let pf = m.project(&out.f)?;
        let pff = m.project(ff)?;
        let lb = bce_with_logits_mean(&out.logits, &target)?;
        let lc = contrastive_loss(&pf, &pff, &mask, E::from_f64(0.5), Reduction::Mean)?;
        total_loss(&lb, &lc, E::from_f64(0.5))
    });
    Ok(Case { inputs, run })
}

/// Stable per-row seed so adding or reordering rows never reshuffles the
/// random cases of the others.
fn row_seed(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for byte in name.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Run the whole suite: one row per differentiable operation plus the
/// composite contrastive loss and an end-to-end model row. `sabotage`
/// corrupts the named row's analytic gradient on its first instance, which
/// must make exactly that row fail.
pub fn run_suite<E: Scalar>(
    instances_per_op: usize,
    sabotage: Option<&str>,
) -> Result<Vec<CheckResult>> {
    if instances_per_op == 0 {
        return Err(Error::Config("instances_per_op must be at least 1".into()));
    }
    let (op_tol, e2e_tol) = match E::DTYPE_NAME {
        "f32" => (OP_TOL_F32, E2E_TOL_F32),
        _ => (OP_TOL_F64, E2E_TOL_F64),
    };
    let checked_rows = rows::<E>();
    // The f64 twin of every row; builders draw the same f64 values from the
    // same seeds, so row i instance j is the same case at both precisions.
    let shadow_rows = rows::<f64>();
    if let Some(name) = sabotage {
        if !checked_rows.iter().any(|r| r.name == name) {
            return Err(Error::Config(format!("unknown gradcheck row for sabotage: {name}")));
        }
    }
    let mut out = Vec::with_capacity(checked_rows.len());
    for (row, shadow_row) in checked_rows.iter().zip(&shadow_rows) {
        let (step, tol) = if row.end_to_end { (E2E_STEP, e2e_tol) } else { (OP_STEP, op_tol) };
        // The end-to-end row differentiates thousands of parameters, so it
        // is capped at three instances to keep the suite tractable.
        let instances = if row.end_to_end { instances_per_op.min(3) } else { instances_per_op };
        let mut worst = 0.0f64;
        for instance in 0..instances {
            let seed = row_seed(row.name).wrapping_add(instance as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shadow_rng = ChaCha8Rng::seed_from_u64(seed);
            let case = (row.build)(&mut rng)?;
            let shadow = (shadow_row.build)(&mut shadow_rng)?;
            let sab = sabotage == Some(row.name) && instance == 0;
            let rel = check_case(&case, &shadow, step, &mut rng, sab)?;
            if rel.is_nan() {
                worst = f64::NAN;
                break;
            }
            worst = worst.max(rel);
        }
        out.push(CheckResult {
            name: row.name.to_string(),
            instances,
            max_rel_err: worst,
            tol,
            pass: worst <= tol,
        });
    }
    Ok(out)
}

/// True when every row passed.
pub fn suite_passes(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

/// Fixed-width report, one row per operation.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<22} {:>9} {:>13} {:>8} {:>7}\n",
        "op", "instances", "max_rel_err", "tol", "status"
    );
    for r in results {
        s.push_str(&format!(
            "{:<22} {:>9} {:>13.3e} {:>8.0e} {:>7}\n",
            r.name,
            r.instances,
            r.max_rel_err,
            r.tol,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXPECTED_ROWS: [&str; 23] = [
        "add",
        "sub",
        "mul",
        "scale",
        "relu",
        "sigmoid",
        "sum_all",
        "mean_all",
        "sum_channels",
        "conv2d",
        "linear_1x1",
        "batchnorm2d_train",
        "batchnorm2d_eval",
        "avgpool2x2",
        "maxpool2x2",
        "upsample_bilinear2x",
        "concat_channels",
        "grid_sample_bilinear",
        "bce_with_logits_mean",
        "contrastive",
        "conv_bn_relu_pool_sum",
        "projection_head",
        "end_to_end",
    ];

    #[test]
    fn f32_suite_covers_every_op_and_passes_with_a_small_instance_count() {
        let results = run_suite::<f32>(2, None).unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        for expected in EXPECTED_ROWS {
            assert!(names.contains(&expected), "missing row {expected}");
        }
        for r in &results {
            assert!(r.pass, "{} failed: {:.3e} > {:.0e}", r.name, r.max_rel_err, r.tol);
        }
        assert!(suite_passes(&results));
    }

    #[test]
    fn sabotage_makes_exactly_the_corrupted_row_fail() {
        let results = run_suite::<f32>(1, Some("mul")).unwrap();
        for r in &results {
            if r.name == "mul" {
                assert!(!r.pass, "sabotaged row unexpectedly passed");
            } else {
                assert!(r.pass, "{} failed: {:.3e} > {:.0e}", r.name, r.max_rel_err, r.tol);
            }
        }
        assert!(!suite_passes(&results));
    }

    #[test]
    fn sabotage_of_an_unknown_row_is_rejected() {
        assert!(run_suite::<f32>(1, Some("not_an_op")).is_err());
    }

    #[test]
    fn report_table_has_one_line_per_row_plus_header() {
        let results = run_suite::<f32>(1, None).unwrap();
        let table = format_table(&results);
        assert_eq!(table.lines().count(), EXPECTED_ROWS.len() + 1);
        assert!(table.contains("end_to_end"));
        assert!(table.contains("PASS"));
    }
}
