//! Forward evaluation and reverse-mode gradients for [`NetworkSpec`] classifiers.
//!
//! Every item of a batch is pushed through the layer stack independently, keeping the
//! activations needed for the backward pass (pool switches, dropout masks). Items are
//! processed in fixed-size chunks whose partial results are summed in chunk order, so
//! outputs are bit-identical regardless of how many worker threads run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{ActShape, Layer, NetworkSpec, ParamLayout, ParamSlot};
use super::tensor::Tensor;
use crate::error::{BnnError, Result};
use crate::par;

const CHUNK: usize = 8;

/// Whether dropout layers are stochastic for this evaluation.
///
/// Active masks are drawn from a ChaCha8 stream seeded with `seed` and selected by the
/// item's position in the batch, so a `(seed, batch)` pair fixes every mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Inactive,
    Active { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

struct Plan<'a> {
    spec: &'a NetworkSpec,
    /// `shapes[i]` is the input to layer `i`; the last entry is the logits shape.
    shapes: Vec<ActShape>,
    slots: Vec<Option<ParamSlot>>,
    num_classes: usize,
}

impl<'a> Plan<'a> {
    fn new(spec: &'a NetworkSpec, params: &[f64]) -> Result<Self> {
        let outputs = spec.shapes()?;
        let layout: std::sync::Arc<ParamLayout> = spec.layout()?;
        if params.len() != layout.total {
            return Err(BnnError::InvalidArgument(format!(
                "network has {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let (h, w) = spec.input_shape;
        let mut shapes = vec![ActShape::Image {
            channels: 1,
            height: h,
            width: w,
        }];
        shapes.extend(outputs);
        let slots = (0..spec.layers.len())
            .map(|i| layout.slot_for_layer(i).cloned())
            .collect();
        Ok(Self {
            spec,
            shapes,
            slots,
            num_classes: spec.num_classes(),
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (h, w) = self.spec.input_shape;
        let shape = batch.shape();
        let ok = match shape.len() {
            3 => shape[1] == h && shape[2] == w,
            4 => shape[1] == 1 && shape[2] == h && shape[3] == w,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(BnnError::InputShape {
                expected: vec![shape.first().copied().unwrap_or(0), h, w],
                actual: shape.to_vec(),
            })
        }
    }
}

/// Cached intermediate state of one item's forward pass.
struct ItemTrace {
    /// `acts[i]` is the input of layer `i`; the final entry holds the logits.
    acts: Vec<Vec<f64>>,
    pool_switch: Vec<Vec<u32>>,
    masks: Vec<Vec<f64>>,
}

fn item_rng(mode: DropoutMode, item: usize) -> Option<ChaCha8Rng> {
    match mode {
        DropoutMode::Inactive => None,
        DropoutMode::Active { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(item as u64);
            Some(rng)
        }
    }
}

fn forward_item(plan: &Plan, params: &[f64], input: &[f64], mode: DropoutMode, item: usize, keep: bool) -> ItemTrace {
    let mut rng = item_rng(mode, item);
    let n_layers = plan.spec.layers.len();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    let mut pool_switch = Vec::new();
    let mut masks = Vec::new();
    let mut current = input.to_vec();
    for (i, layer) in plan.spec.layers.iter().enumerate() {
        let in_shape = plan.shapes[i];
        let out_shape = plan.shapes[i + 1];
        let next = match *layer {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let slot = plan.slots[i].as_ref().expect("conv has parameters");
                let (ih, iw) = image_hw(in_shape);
                let (oh, ow) = image_hw(out_shape);
                conv_forward(
                    &current,
                    &params[slot.weight_range()],
                    &params[slot.bias_range()],
                    ConvGeom {
                        in_channels,
                        out_channels,
                        kernel,
                        padding,
                        ih,
                        iw,
                        oh,
                        ow,
                    },
                )
            }
            Layer::MaxPool2d { window } => {
                let (out, switch) = pool_forward(&current, in_shape, out_shape, window);
                if keep {
                    pool_switch.push(switch);
                }
                out
            }
            Layer::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Flatten => current.clone(),
            Layer::Linear {
                in_features,
                out_features,
            } => {
                let slot = plan.slots[i].as_ref().expect("linear has parameters");
                let weight = &params[slot.weight_range()];
                let bias = &params[slot.bias_range()];
                (0..out_features)
                    .map(|j| {
                        let row = &weight[j * in_features..(j + 1) * in_features];
                        bias[j] + dot(row, &current)
                    })
                    .collect()
            }
            Layer::Dropout { rate } => match rng.as_mut() {
                None => current.clone(),
                Some(rng) => {
                    let scale = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..current.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                        .collect();
                    let out = current.iter().zip(&mask).map(|(a, m)| a * m).collect();
                    if keep {
                        masks.push(mask);
                    }
                    out
                }
            },
        };
        if keep {
            acts.push(std::mem::replace(&mut current, next));
        } else {
            current = next;
        }
    }
    acts.push(current);
    ItemTrace {
        acts,
        pool_switch,
        masks,
    }
}

/// Backpropagates `grad_logits` through one item's trace, accumulating into `grad`.
fn backward_item(plan: &Plan, params: &[f64], trace: &ItemTrace, grad_logits: Vec<f64>, grad: &mut [f64]) {
    let mut g = grad_logits;
    let mut pool_idx = trace.pool_switch.len();
    let mut mask_idx = trace.masks.len();
    for (i, layer) in plan.spec.layers.iter().enumerate().rev() {
        let input = &trace.acts[i];
        let output = &trace.acts[i + 1];
        let need_input_grad = i > 0;
        g = match *layer {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let slot = plan.slots[i].as_ref().expect("conv has parameters");
                let (ih, iw) = image_hw(plan.shapes[i]);
                let (oh, ow) = image_hw(plan.shapes[i + 1]);
                let geom = ConvGeom {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    ih,
                    iw,
                    oh,
                    ow,
                };
                let (gw, rest) = grad[slot.weight_offset..].split_at_mut(slot.bias_offset - slot.weight_offset);
                let gb = &mut rest[..slot.bias_len];
                conv_backward(input, &params[slot.weight_range()], &g, geom, gw, gb, need_input_grad)
            }
            Layer::MaxPool2d { .. } => {
                pool_idx -= 1;
                let mut gi = vec![0.0; input.len()];
                for (o, &src) in trace.pool_switch[pool_idx].iter().enumerate() {
                    gi[src as usize] += g[o];
                }
                gi
            }
            Layer::Relu => g
                .iter()
                .zip(output)
                .map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 })
                .collect(),
            Layer::Flatten => g,
            Layer::Linear {
                in_features,
                out_features,
            } => {
                let slot = plan.slots[i].as_ref().expect("linear has parameters");
                let weight = &params[slot.weight_range()];
                let mut gi = if need_input_grad { vec![0.0; in_features] } else { Vec::new() };
                for j in 0..out_features {
                    let gj = g[j];
                    if gj == 0.0 {
                        continue;
                    }
                    grad[slot.bias_offset + j] += gj;
                    let off = slot.weight_offset + j * in_features;
                    axpy(gj, input, &mut grad[off..off + in_features]);
                    if need_input_grad {
                        axpy(gj, &weight[j * in_features..(j + 1) * in_features], &mut gi);
                    }
                }
                gi
            }
            Layer::Dropout { .. } => {
                if trace.masks.is_empty() {
                    g
                } else {
                    mask_idx -= 1;
                    g.iter().zip(&trace.masks[mask_idx]).map(|(a, m)| a * m).collect()
                }
            }
        };
        if !need_input_grad {
            break;
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    padding: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Valid output columns for kernel column `kx`, and the matching input column offset.
    #[inline]
    fn x_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = (self.iw + self.padding).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, y: usize, ky: usize) -> Option<usize> {
        let iy = (y + ky).checked_sub(self.padding)?;
        (iy < self.ih).then_some(iy)
    }
}

fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], geom: ConvGeom) -> Vec<f64> {
    let ConvGeom {
        in_channels,
        out_channels,
        kernel,
        padding,
        ih,
        iw,
        oh,
        ow,
    } = geom;
    let plane = oh * ow;
    let mut out = vec![0.0; out_channels * plane];
    for o in 0..out_channels {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..in_channels {
            let in_plane = &input[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = weight[((o * in_channels + c) * kernel + ky) * kernel + kx];
                    let (x_lo, x_hi) = geom.x_span(kx);
                    for y in 0..oh {
                        let Some(iy) = geom.input_row(y, ky) else { continue };
                        let src = &in_plane[iy * iw + x_lo + kx - padding..iy * iw + x_hi + kx - padding];
                        let dst = &mut out_plane[y * ow + x_lo..y * ow + x_hi];
                        axpy(wv, src, dst);
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &[f64],
    weight: &[f64],
    g: &[f64],
    geom: ConvGeom,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let ConvGeom {
        in_channels,
        out_channels,
        kernel,
        padding,
        ih,
        iw,
        oh,
        ow,
    } = geom;
    let plane = oh * ow;
    let mut gi = if need_input_grad { vec![0.0; input.len()] } else { Vec::new() };
    for o in 0..out_channels {
        let g_plane = &g[o * plane..(o + 1) * plane];
        grad_b[o] += g_plane.iter().sum::<f64>();
        for c in 0..in_channels {
            let in_off = c * ih * iw;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let w_idx = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                    let wv = weight[w_idx];
                    let (x_lo, x_hi) = geom.x_span(kx);
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let Some(iy) = geom.input_row(y, ky) else { continue };
                        let start = in_off + iy * iw + x_lo + kx - padding;
                        let len = x_hi - x_lo;
                        let gs = &g_plane[y * ow + x_lo..y * ow + x_hi];
                        acc += dot(gs, &input[start..start + len]);
                        if need_input_grad {
                            axpy(wv, gs, &mut gi[start..start + len]);
                        }
                    }
                    grad_w[w_idx] += acc;
                }
            }
        }
    }
    gi
}

fn pool_forward(input: &[f64], in_shape: ActShape, out_shape: ActShape, window: usize) -> (Vec<f64>, Vec<u32>) {
    let ActShape::Image { channels, height, width } = in_shape else {
        unreachable!("pooling validated on image activations")
    };
    let (oh, ow) = image_hw(out_shape);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut switch = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (y * window + dy) * width + x * window + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                switch.push(best_idx as u32);
            }
        }
    }
    (out, switch)
}

fn image_hw(shape: ActShape) -> (usize, usize) {
    match shape {
        ActShape::Image { height, width, .. } => (height, width),
        ActShape::Flat(n) => (1, n),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Numerically stable log-sum-exp.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

/// Cross-entropy of one row of logits and d(loss)/d(logits).
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = logsumexp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(BnnError::InvalidArgument(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(BnnError::InvalidArgument(format!(
            "label {bad} outside 0..{classes}"
        )));
    }
    Ok(())
}

/// Logits (batch x classes) for a batch of single-channel images.
pub fn forward(spec: &NetworkSpec, params: &[f64], batch: &Tensor, dropout: DropoutMode) -> Result<Tensor> {
    let plan = Plan::new(spec, params)?;
    plan.check_batch(batch)?;
    let n = batch.batch_len();
    let k = plan.num_classes;
    let chunks = par::map_chunks(n, CHUNK, |range| {
        let mut out = Vec::with_capacity(range.len() * k);
        for i in range {
            let trace = forward_item(&plan, params, batch.item(i), dropout, i, false);
            out.extend_from_slice(trace.acts.last().expect("logits"));
        }
        out
    });
    let data: Vec<f64> = chunks.concat();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(BnnError::NonFinite {
            context: "forward activations".into(),
        });
    }
    Ok(Tensor::from_parts_unchecked(vec![n, k], data))
}

/// Inputs to the terminal linear layer (batch x features), dropout inactive.
pub fn forward_features(spec: &NetworkSpec, params: &[f64], batch: &Tensor) -> Result<Tensor> {
    let plan = Plan::new(spec, params)?;
    plan.check_batch(batch)?;
    let n = batch.batch_len();
    let last = spec.layers.len() - 1;
    let width = plan.shapes[last].len();
    let chunks = par::map_chunks(n, CHUNK, |range| {
        let mut out = Vec::with_capacity(range.len() * width);
        for i in range {
            let trace = forward_item(&plan, params, batch.item(i), DropoutMode::Inactive, i, true);
            out.extend_from_slice(&trace.acts[last]);
        }
        out
    });
    let data: Vec<f64> = chunks.concat();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(BnnError::NonFinite {
            context: "feature activations".into(),
        });
    }
    Ok(Tensor::from_parts_unchecked(vec![n, width], data))
}

/// Softmax cross-entropy over the batch and its gradient with respect to `params`.
pub fn loss_grad(
    spec: &NetworkSpec,
    params: &[f64],
    batch: &Tensor,
    labels: &[usize],
    reduction: Reduction,
    dropout: DropoutMode,
) -> Result<(f64, Vec<f64>)> {
    let plan = Plan::new(spec, params)?;
    plan.check_batch(batch)?;
    let n = batch.batch_len();
    check_labels(labels, n, plan.num_classes)?;
    let d = params.len();
    let partials = par::map_chunks(n, CHUNK, |range| {
        let mut grad = vec![0.0; d];
        let mut loss = 0.0;
        for i in range {
            let trace = forward_item(&plan, params, batch.item(i), dropout, i, true);
            let (l, g) = cross_entropy(trace.acts.last().expect("logits"), labels[i]);
            loss += l;
            backward_item(&plan, params, &trace, g, &mut grad);
        }
        (loss, grad)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for (l, g) in partials {
        loss += l;
        axpy(1.0, &g, &mut grad);
    }
    if reduction == Reduction::Mean {
        let scale = 1.0 / n as f64;
        loss *= scale;
        grad.iter_mut().for_each(|v| *v *= scale);
    }
    if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(BnnError::NonFinite {
            context: "loss or gradient".into(),
        });
    }
    Ok((loss, grad))
}

/// Per-item negative log-likelihood, dropout inactive.
pub fn item_nll(spec: &NetworkSpec, params: &[f64], batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = forward(spec, params, batch, DropoutMode::Inactive)?;
    check_labels(labels, batch.batch_len(), spec.num_classes())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            logsumexp(row) - row[y]
        })
        .collect())
}
