//! Reverse-mode differentiation over the recorded op graph.

use std::collections::{HashMap, HashSet};

use super::tensor::{axis_split, broadcast_strides, chamfer_forward, for_each_broadcast, nearest_sq, Op, Tensor};
use super::{NnError, Result};

/// Gradients keyed by tensor id, populated by [`backward`].
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, or zeros when the loss did not reach it.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.grads.get(&t.id()).cloned().unwrap_or_else(|| vec![0.0; t.numel()])
    }

    fn acc(&mut self, t: &Tensor, contribution: &[f64]) {
        let entry = self.grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
        for (e, c) in entry.iter_mut().zip(contribution) {
            *e += c;
        }
    }
}

/// Tensors reachable from `root` through grad-requiring edges, each
/// consumer strictly before its inputs.
fn sorted_nodes(root: &Tensor) -> Vec<Tensor> {
    let mut post = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    visited.insert(root.id());
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            post.push(node);
            continue;
        }
        stack.push((node.clone(), true));
        for input in grad_inputs(&node) {
            if input.needs_grad() && visited.insert(input.id()) {
                stack.push((input, false));
            }
        }
    }
    post.reverse();
    post
}

fn grad_inputs(t: &Tensor) -> Vec<Tensor> {
    match t.op() {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a.clone(), b.clone()],
        Op::Scale(a, _) | Op::Relu(a) | Op::Tanh(a) | Op::SquashXy(a) | Op::Reshape(a) => vec![a.clone()],
        Op::Conv2d { input, kernel } => vec![input.clone(), kernel.clone()],
        Op::AffineChannels { input, gamma, beta } => vec![input.clone(), gamma.clone(), beta.clone()],
        Op::ReduceMax { input, .. } | Op::ReduceMean { input, .. } | Op::ReduceSum { input, .. } => {
            vec![input.clone()]
        }
        Op::Softmax { input, .. } => vec![input.clone()],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::SliceAxis0 { input, .. } => vec![input.clone()],
        Op::ScatterBev { pillars, .. } => vec![pillars.clone()],
        Op::GatherCells { bev, .. } => vec![bev.clone()],
        Op::Chamfer { pred, target } => vec![pred.clone(), target.clone()],
        Op::ChamferBatch { pred, .. } => vec![pred.clone()],
        Op::BceWithLogitsMean { logits, .. } => vec![logits.clone()],
        Op::SmoothL1Mean { pred, .. } => vec![pred.clone()],
    }
}

/// Sum a broadcast-shaped gradient back down to the input shape.
fn reduce_grad_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(in_shape, out_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for_each_broadcast(out_shape, |flat, idx| {
        let ii: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[ii] += grad[flat];
    });
    out
}

/// Elementwise product of the upstream grad with the broadcast `other`
/// input, then reduced to `into_shape`.
fn mul_grad(grad: &[f64], out_shape: &[usize], other: &Tensor, into_shape: &[usize]) -> Vec<f64> {
    let strides = broadcast_strides(other.shape(), out_shape);
    let mut scaled = vec![0.0; grad.len()];
    if other.shape() == out_shape {
        for ((s, &g), &o) in scaled.iter_mut().zip(grad).zip(other.data()) {
            *s = g * o;
        }
    } else {
        for_each_broadcast(out_shape, |flat, idx| {
            let io: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            scaled[flat] = grad[flat] * other.data()[io];
        });
    }
    reduce_grad_to(&scaled, out_shape, into_shape)
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Populate gradients of everything reachable from a scalar loss.
pub fn backward(loss: &Tensor) -> Result<GradStore> {
    if loss.numel() != 1 {
        return Err(NnError::NonScalarLoss { shape: loss.shape().to_vec() });
    }
    let mut store = GradStore::default();
    if !loss.needs_grad() {
        return Ok(store);
    }
    store.grads.insert(loss.id(), vec![1.0]);
    let order = sorted_nodes(loss);
    for node in &order {
        let grad = store.grads.get(&node.id()).expect("consumers processed first").clone();
        accumulate(node, &grad, &mut store);
    }
    Ok(store)
}

fn accumulate(node: &Tensor, grad: &[f64], store: &mut GradStore) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.needs_grad() {
                store.acc(a, &reduce_grad_to(grad, node.shape(), a.shape()));
            }
            if b.needs_grad() {
                store.acc(b, &reduce_grad_to(grad, node.shape(), b.shape()));
            }
        }
        Op::Sub(a, b) => {
            if a.needs_grad() {
                store.acc(a, &reduce_grad_to(grad, node.shape(), a.shape()));
            }
            if b.needs_grad() {
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                store.acc(b, &reduce_grad_to(&neg, node.shape(), b.shape()));
            }
        }
        Op::Mul(a, b) => {
            if a.needs_grad() {
                store.acc(a, &mul_grad(grad, node.shape(), b, a.shape()));
            }
            if b.needs_grad() {
                store.acc(b, &mul_grad(grad, node.shape(), a, b.shape()));
            }
        }
        Op::Scale(a, c) => {
            if a.needs_grad() {
                let g: Vec<f64> = grad.iter().map(|g| g * c).collect();
                store.acc(a, &g);
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.needs_grad() {
                let bt = transpose_raw(b.data(), k, n);
                store.acc(a, &matmul_raw(grad, m, n, &bt, k));
            }
            if b.needs_grad() {
                let at = transpose_raw(a.data(), m, k);
                store.acc(b, &matmul_raw(&at, k, m, grad, n));
            }
        }
        Op::Conv2d { input, kernel } => {
            let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
            let (ph, pw) = (kh / 2, kw / 2);
            if input.needs_grad() {
                let mut gin = vec![0.0; input.numel()];
                for co in 0..cout {
                    let gout = &grad[co * h * w..(co + 1) * h * w];
                    for ci in 0..cin {
                        let gplane = &mut gin[ci * h * w..(ci + 1) * h * w];
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let wgt = kernel.data()[((co * cin + ci) * kh + dh) * kw + dw];
                                if wgt == 0.0 {
                                    continue;
                                }
                                let oh_lo = ph.saturating_sub(dh);
                                let oh_hi = (h + ph - dh).min(h);
                                let ow_lo = pw.saturating_sub(dw);
                                let ow_hi = (w + pw - dw).min(w);
                                for oh in oh_lo..oh_hi {
                                    let ih = oh + dh - ph;
                                    let grow = &gout[oh * w + ow_lo..oh * w + ow_hi];
                                    let irow = &mut gplane[ih * w + (ow_lo + dw - pw)..ih * w + (ow_hi + dw - pw)];
                                    for (o, &g) in irow.iter_mut().zip(grow) {
                                        *o += wgt * g;
                                    }
                                }
                            }
                        }
                    }
                }
                store.acc(input, &gin);
            }
            if kernel.needs_grad() {
                let mut gker = vec![0.0; kernel.numel()];
                for co in 0..cout {
                    let gout = &grad[co * h * w..(co + 1) * h * w];
                    for ci in 0..cin {
                        let in_plane = &input.data()[ci * h * w..(ci + 1) * h * w];
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let oh_lo = ph.saturating_sub(dh);
                                let oh_hi = (h + ph - dh).min(h);
                                let ow_lo = pw.saturating_sub(dw);
                                let ow_hi = (w + pw - dw).min(w);
                                let mut acc = 0.0;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh + dh - ph;
                                    let grow = &gout[oh * w + ow_lo..oh * w + ow_hi];
                                    let irow = &in_plane[ih * w + (ow_lo + dw - pw)..ih * w + (ow_hi + dw - pw)];
                                    for (&g, &iv) in grow.iter().zip(irow) {
                                        acc += g * iv;
                                    }
                                }
                                gker[((co * cin + ci) * kh + dh) * kw + dw] += acc;
                            }
                        }
                    }
                }
                store.acc(kernel, &gker);
            }
        }
        Op::AffineChannels { input, gamma, beta } => {
            let (c, hw) = (input.shape()[0], input.shape()[1] * input.shape()[2]);
            if input.needs_grad() {
                let mut gin = vec![0.0; input.numel()];
                for ci in 0..c {
                    let g = gamma.data()[ci];
                    for i in 0..hw {
                        gin[ci * hw + i] = grad[ci * hw + i] * g;
                    }
                }
                store.acc(input, &gin);
            }
            if gamma.needs_grad() {
                let mut gg = vec![0.0; c];
                for ci in 0..c {
                    for i in 0..hw {
                        gg[ci] += grad[ci * hw + i] * input.data()[ci * hw + i];
                    }
                }
                store.acc(gamma, &gg);
            }
            if beta.needs_grad() {
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    for i in 0..hw {
                        gb[ci] += grad[ci * hw + i];
                    }
                }
                store.acc(beta, &gb);
            }
        }
        Op::Relu(a) => {
            if a.needs_grad() {
                let g: Vec<f64> =
                    grad.iter().zip(a.data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                store.acc(a, &g);
            }
        }
        Op::Tanh(a) => {
            if a.needs_grad() {
                let g: Vec<f64> = grad.iter().zip(node.data()).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                store.acc(a, &g);
            }
        }
        Op::SquashXy(a) => {
            if a.needs_grad() {
                let g: Vec<f64> = grad
                    .iter()
                    .zip(node.data())
                    .enumerate()
                    .map(|(i, (&g, &y))| if i % 3 < 2 { g * (1.0 - y * y) } else { g })
                    .collect();
                store.acc(a, &g);
            }
        }
        Op::ReduceMax { input, axis, .. } => {
            if input.needs_grad() {
                let (outer, len, inner) = axis_split(input.shape(), *axis);
                let mut gin = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        // First max wins, matching forward ties.
                        let mut best = (0usize, f64::NEG_INFINITY);
                        for a in 0..len {
                            let v = input.data()[(o * len + a) * inner + i];
                            if v > best.1 {
                                best = (a, v);
                            }
                        }
                        gin[(o * len + best.0) * inner + i] = grad[o * inner + i];
                    }
                }
                store.acc(input, &gin);
            }
        }
        Op::ReduceMean { input, axis, .. } => {
            if input.needs_grad() {
                let (outer, len, inner) = axis_split(input.shape(), *axis);
                let inv = 1.0 / len as f64;
                let mut gin = vec![0.0; input.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            gin[(o * len + a) * inner + i] = grad[o * inner + i] * inv;
                        }
                    }
                }
                store.acc(input, &gin);
            }
        }
        Op::ReduceSum { input, axis, .. } => {
            if input.needs_grad() {
                let (outer, len, inner) = axis_split(input.shape(), *axis);
                let mut gin = vec![0.0; input.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            gin[(o * len + a) * inner + i] = grad[o * inner + i];
                        }
                    }
                }
                store.acc(input, &gin);
            }
        }
        Op::Softmax { input, axis } => {
            if input.needs_grad() {
                let y = node.data();
                let (outer, len, inner) = axis_split(input.shape(), *axis);
                let mut gin = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for a in 0..len {
                            let idx = (o * len + a) * inner + i;
                            dot += grad[idx] * y[idx];
                        }
                        for a in 0..len {
                            let idx = (o * len + a) * inner + i;
                            gin[idx] = y[idx] * (grad[idx] - dot);
                        }
                    }
                }
                store.acc(input, &gin);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(node.shape(), *axis);
            let mut offset = 0;
            for t in inputs {
                let len = t.shape()[*axis];
                if t.needs_grad() {
                    let mut g = vec![0.0; t.numel()];
                    for o in 0..outer {
                        for a in 0..len {
                            let src = (o * total + offset + a) * inner;
                            let dst = (o * len + a) * inner;
                            g[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                        }
                    }
                    store.acc(t, &g);
                }
                offset += len;
            }
        }
        Op::SliceAxis0 { input, index } => {
            if input.needs_grad() {
                let inner: usize = input.shape()[1..].iter().product();
                let mut g = vec![0.0; input.numel()];
                g[index * inner..(index + 1) * inner].copy_from_slice(grad);
                store.acc(input, &g);
            }
        }
        Op::Reshape(a) => {
            if a.needs_grad() {
                store.acc(a, grad);
            }
        }
        Op::ScatterBev { pillars, cells, nx: _, ny } => {
            if pillars.needs_grad() {
                let c = pillars.shape()[1];
                let plane = node.shape()[1] * node.shape()[2];
                let ny = *ny;
                let mut g = vec![0.0; pillars.numel()];
                for (p, &(i, j)) in cells.iter().enumerate() {
                    for ch in 0..c {
                        g[p * c + ch] = grad[ch * plane + i * ny + j];
                    }
                }
                store.acc(pillars, &g);
            }
        }
        Op::GatherCells { bev, cells } => {
            if bev.needs_grad() {
                let (c, _nx, ny) = (bev.shape()[0], bev.shape()[1], bev.shape()[2]);
                let plane = bev.shape()[1] * bev.shape()[2];
                let mut g = vec![0.0; bev.numel()];
                for (gi, &(i, j)) in cells.iter().enumerate() {
                    for ch in 0..c {
                        g[ch * plane + i * ny + j] += grad[gi * c + ch];
                    }
                }
                store.acc(bev, &g);
            }
        }
        Op::Chamfer { pred, target } => {
            let g = grad[0];
            let (gp, gt) = chamfer_grads(pred.data(), target.data(), g);
            if pred.needs_grad() {
                store.acc(pred, &gp);
            }
            if target.needs_grad() {
                store.acc(target, &gt);
            }
        }
        Op::ChamferBatch { pred, targets } => {
            if pred.needs_grad() {
                let (gcount, k) = (pred.shape()[0], pred.shape()[1]);
                let g = grad[0] / gcount as f64;
                let mut gp = vec![0.0; pred.numel()];
                for gi in 0..gcount {
                    let flat: Vec<f64> = targets[gi].iter().flatten().copied().collect();
                    let (gpg, _) = chamfer_grads(&pred.data()[gi * k * 3..(gi + 1) * k * 3], &flat, g);
                    gp[gi * k * 3..(gi + 1) * k * 3].copy_from_slice(&gpg);
                }
                store.acc(pred, &gp);
            }
        }
        Op::BceWithLogitsMean { logits, targets } => {
            if logits.needs_grad() {
                let inv = grad[0] / targets.len() as f64;
                let g: Vec<f64> = logits
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &t)| (sigmoid(x) - t) * inv)
                    .collect();
                store.acc(logits, &g);
            }
        }
        Op::SmoothL1Mean { pred, target, beta } => {
            if pred.needs_grad() {
                let inv = grad[0] / target.len() as f64;
                let g: Vec<f64> = pred
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&p, &t)| {
                        let e = p - t;
                        (e / beta).clamp(-1.0, 1.0) * inv
                    })
                    .collect();
                store.acc(pred, &g);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Analytic Chamfer gradient for both point sets (flat xyz buffers).
fn chamfer_grads(pred: &[f64], target: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let k = pred.len() / 3;
    let n = target.len() / 3;
    let mut gp = vec![0.0; pred.len()];
    let mut gt = vec![0.0; target.len()];
    let wk = 2.0 * upstream / k as f64;
    for i in 0..k {
        let (j, _) = nearest_sq(&pred[i * 3..i * 3 + 3], target);
        for d in 0..3 {
            let diff = pred[i * 3 + d] - target[j * 3 + d];
            gp[i * 3 + d] += wk * diff;
            gt[j * 3 + d] -= wk * diff;
        }
    }
    let wn = 2.0 * upstream / n as f64;
    for j in 0..n {
        let (i, _) = nearest_sq(&target[j * 3..j * 3 + 3], pred);
        for d in 0..3 {
            let diff = target[j * 3 + d] - pred[i * 3 + d];
            gt[j * 3 + d] += wn * diff;
            gp[i * 3 + d] -= wn * diff;
        }
    }
    let _ = chamfer_forward; // shared forward lives in tensor.rs
    (gp, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_weighted_sum_is_the_weights() {
        // loss = sum(w * x) with fixed x => dloss/dw = x.
        let w = Tensor::var(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let x = Tensor::from_vec(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        let loss = w.mul(&x).unwrap().sum_axis(0, false).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn two_linear_layers_match_hand_product_rule() {
        // y = b * (a * x); dy/da = b*x, dy/db = a*x.
        let a = Tensor::var(vec![3.0], &[1]).unwrap();
        let b = Tensor::var(vec![5.0], &[1]).unwrap();
        let x = Tensor::from_vec(vec![2.0], &[1]).unwrap();
        let y = b.mul(&a.mul(&x).unwrap()).unwrap().sum_axis(0, false).unwrap();
        let grads = backward(&y).unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[10.0]);
        assert_eq!(grads.get(&b).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_parameters_get_zero_grad() {
        let used = Tensor::var(vec![1.0], &[1]).unwrap();
        let unused = Tensor::var(vec![1.0], &[1]).unwrap();
        let loss = used.scale(2.0).unwrap().sum_axis(0, false).unwrap();
        let grads = backward(&loss).unwrap();
        assert!(grads.get(&unused).is_none());
        assert_eq!(grads.grad_or_zeros(&unused), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let t = Tensor::var(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(backward(&t), Err(NnError::NonScalarLoss { .. })));
    }

    #[test]
    fn diamond_graph_accumulates_once_per_node() {
        // loss = x*x + x (the x node has two consumers).
        let x = Tensor::var(vec![3.0], &[1]).unwrap();
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&x).unwrap().sum_axis(0, false).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[7.0]); // 2x + 1
    }
}
