//! Tensor type and forward ops.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{NnError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// The op that produced a tensor, with the inputs saved for backward.
#[derive(Debug)]
pub enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Matmul(Tensor, Tensor),
    Conv2d { input: Tensor, kernel: Tensor },
    AffineChannels { input: Tensor, gamma: Tensor, beta: Tensor },
    Relu(Tensor),
    Tanh(Tensor),
    /// Rows of shape 3: tanh on x and y, identity on z.
    SquashXy(Tensor),
    ReduceMax { input: Tensor, axis: usize, keepdim: bool },
    ReduceMean { input: Tensor, axis: usize, keepdim: bool },
    ReduceSum { input: Tensor, axis: usize, keepdim: bool },
    Softmax { input: Tensor, axis: usize },
    Concat { inputs: Vec<Tensor>, axis: usize },
    SliceAxis0 { input: Tensor, index: usize },
    Reshape(Tensor),
    ScatterBev { pillars: Tensor, cells: Rc<Vec<(usize, usize)>>, nx: usize, ny: usize },
    GatherCells { bev: Tensor, cells: Rc<Vec<(usize, usize)>> },
    Chamfer { pred: Tensor, target: Tensor },
    ChamferBatch { pred: Tensor, targets: Rc<Vec<Vec<[f64; 3]>>> },
    BceWithLogitsMean { logits: Tensor, targets: Rc<Vec<f64>> },
    SmoothL1Mean { pred: Tensor, target: Rc<Vec<f64>>, beta: f64 },
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Immutable dense f64 tensor participating in reverse-mode autodiff.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("needs_grad", &self.0.needs_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn make(op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Tensor> {
    debug_assert_eq!(numel(&shape), data.len());
    if shape.iter().any(|&d| d == 0) {
        return Err(NnError::InvalidArgument { op: op_name, detail: format!("zero dimension in shape {shape:?}") });
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(NnError::NonFinite { op: op_name });
    }
    Ok(Tensor(Rc::new(Inner { id: fresh_id(), shape, data, op, needs_grad })))
}

/// Shape of an elementwise broadcast; same rank, each dim equal or 1.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(NnError::ShapeMismatch { op, detail: format!("rank {:?} vs {:?}", a, b) });
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(NnError::ShapeMismatch { op, detail: format!("dims {:?} vs {:?}", a, b) })
            }
        })
        .collect()
}

/// Row-major strides with 0 where the dim is broadcast (size 1).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub(crate) fn for_each_broadcast(out_shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let total = numel(out_shape);
    for flat in 0..total {
        f(flat, &idx);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn binary_broadcast(
    op_name: &'static str,
    a: &Tensor,
    b: &Tensor,
    op: impl Fn(f64, f64) -> f64,
    make_op: impl Fn(Tensor, Tensor) -> Op,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op_name, a.shape(), b.shape())?;
    let mut data = vec![0.0; numel(&out_shape)];
    if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        for ((o, &x), &y) in data.iter_mut().zip(&a.0.data).zip(&b.0.data) {
            *o = op(x, y);
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        for_each_broadcast(&out_shape, |flat, idx| {
            let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            data[flat] = op(a.0.data[ia], b.0.data[ib]);
        });
    }
    let needs = a.0.needs_grad || b.0.needs_grad;
    make(op_name, out_shape, data, make_op(a.clone(), b.clone()), needs)
}

/// (outer, axis_len, inner) decomposition for axis ops.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
    }
    s
}

impl Tensor {
    /// Constant tensor (no gradient tracked).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        make("from_vec", shape.to_vec(), data, Op::Leaf, false)
    }

    /// Leaf variable: gradients will be accumulated for it.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "var",
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        make("var", shape.to_vec(), data, Op::Leaf, true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(NnError::ShapeMismatch { op: "item", detail: format!("shape {:?}", self.shape()) });
        }
        Ok(self.0.data[0])
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("add", self, other, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("sub", self, other, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("mul", self, other, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.0.data.iter().map(|v| v * c).collect();
        make("scale", self.0.shape.clone(), data, Op::Scale(self.clone(), c), self.0.needs_grad)
    }

    /// 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.0.data[i * k..(i + 1) * k];
            let orow = &mut data[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b.0.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let needs = a.0.needs_grad || b.0.needs_grad;
        make("matmul", vec![m, n], data, Op::Matmul(a.clone(), b.clone()), needs)
    }

    /// Same-padding stride-1 convolution: input (Cin,H,W), kernel
    /// (Cout,Cin,kh,kw) with odd kh,kw -> (Cout,H,W).
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (inp, ker) = (self, kernel);
        if inp.shape().len() != 3 || ker.shape().len() != 4 || ker.shape()[1] != inp.shape()[0] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}", inp.shape(), ker.shape()),
            });
        }
        let (cin, h, w) = (inp.shape()[0], inp.shape()[1], inp.shape()[2]);
        let (cout, kh, kw) = (ker.shape()[0], ker.shape()[2], ker.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NnError::InvalidArgument { op: "conv2d", detail: "kernel dims must be odd".into() });
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut data = vec![0.0; cout * h * w];
        for co in 0..cout {
            let out_plane = &mut data[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                let in_plane = &inp.0.data[ci * h * w..(ci + 1) * h * w];
                for dh in 0..kh {
                    for dw in 0..kw {
                        let wgt = ker.0.data[((co * cin + ci) * kh + dh) * kw + dw];
                        if wgt == 0.0 {
                            continue;
                        }
                        let oh_lo = ph.saturating_sub(dh);
                        let oh_hi = (h + ph - dh).min(h);
                        let ow_lo = pw.saturating_sub(dw);
                        let ow_hi = (w + pw - dw).min(w);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + dh - ph;
                            let orow = &mut out_plane[oh * w + ow_lo..oh * w + ow_hi];
                            let irow = &in_plane[ih * w + (ow_lo + dw - pw)..ih * w + (ow_hi + dw - pw)];
                            for (o, &iv) in orow.iter_mut().zip(irow) {
                                *o += wgt * iv;
                            }
                        }
                    }
                }
            }
        }
        let needs = inp.0.needs_grad || ker.0.needs_grad;
        make("conv2d", vec![cout, h, w], data, Op::Conv2d { input: inp.clone(), kernel: ker.clone() }, needs)
    }

    /// Per-channel affine on (C,H,W): `x * gamma[c] + beta[c]`.
    pub fn affine_channels(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let x = self;
        if x.shape().len() != 3 || gamma.shape() != [x.shape()[0]] || beta.shape() != [x.shape()[0]] {
            return Err(NnError::ShapeMismatch {
                op: "affine_channels",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
            });
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            let (g, b) = (gamma.0.data[ci], beta.0.data[ci]);
            for i in 0..h * w {
                data[ci * h * w + i] = x.0.data[ci * h * w + i] * g + b;
            }
        }
        let needs = x.0.needs_grad || gamma.0.needs_grad || beta.0.needs_grad;
        make(
            "affine_channels",
            vec![c, h, w],
            data,
            Op::AffineChannels { input: x.clone(), gamma: gamma.clone(), beta: beta.clone() },
            needs,
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.0.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        make("relu", self.0.shape.clone(), data, Op::Relu(self.clone()), self.0.needs_grad)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data = self.0.data.iter().map(|v| v.tanh()).collect();
        make("tanh", self.0.shape.clone(), data, Op::Tanh(self.clone()), self.0.needs_grad)
    }

    /// Rows (M,3): tanh on columns 0 and 1, identity on column 2.
    pub fn squash_xy(&self) -> Result<Tensor> {
        if self.shape().len() != 2 || self.shape()[1] != 3 {
            return Err(NnError::ShapeMismatch { op: "squash_xy", detail: format!("{:?}", self.shape()) });
        }
        let data = self
            .0
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 3 < 2 { v.tanh() } else { v })
            .collect();
        make("squash_xy", self.0.shape.clone(), data, Op::SquashXy(self.clone()), self.0.needs_grad)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.shape().len() {
            return Err(NnError::InvalidArgument {
                op,
                detail: format!("axis {axis} out of range for shape {:?}", self.shape()),
            });
        }
        Ok(())
    }

    /// Max over one axis; ties resolve to the first index in backward.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = self.0.data[(o * len + a) * inner + i];
                    let slot = &mut data[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        make(
            "max_axis",
            reduced_shape(self.shape(), axis, keepdim),
            data,
            Op::ReduceMax { input: self.clone(), axis, keepdim },
            self.0.needs_grad,
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("mean_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += self.0.data[(o * len + a) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v /= len as f64;
        }
        make(
            "mean_axis",
            reduced_shape(self.shape(), axis, keepdim),
            data,
            Op::ReduceMean { input: self.clone(), axis, keepdim },
            self.0.needs_grad,
        )
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += self.0.data[(o * len + a) * inner + i];
                }
            }
        }
        make(
            "sum_axis",
            reduced_shape(self.shape(), axis, keepdim),
            data,
            Op::ReduceSum { input: self.clone(), axis, keepdim },
            self.0.needs_grad,
        )
    }

    /// Numerically stable softmax along one axis.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("softmax_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(self.0.data[(o * len + a) * inner + i]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (self.0.data[(o * len + a) * inner + i] - max).exp();
                    data[(o * len + a) * inner + i] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[(o * len + a) * inner + i] /= sum;
                }
            }
        }
        make(
            "softmax_axis",
            self.0.shape.clone(),
            data,
            Op::Softmax { input: self.clone(), axis },
            self.0.needs_grad,
        )
    }

    /// Concatenate along `axis`; every other dim must match.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(NnError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let rank = tensors[0].shape().len();
        if axis >= rank {
            return Err(NnError::InvalidArgument { op: "concat", detail: format!("axis {axis} rank {rank}") });
        }
        let mut out_shape = tensors[0].shape().to_vec();
        out_shape[axis] = 0;
        for t in tensors {
            if t.shape().len() != rank {
                return Err(NnError::ShapeMismatch { op: "concat", detail: "rank mismatch".into() });
            }
            for (ax, (&a, &b)) in t.shape().iter().zip(&out_shape).enumerate() {
                if ax != axis && a != b {
                    return Err(NnError::ShapeMismatch {
                        op: "concat",
                        detail: format!("dim {ax}: {a} vs {b}"),
                    });
                }
            }
            out_shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; numel(&out_shape)];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for t in tensors {
            let len = t.shape()[axis];
            for o in 0..outer {
                for a in 0..len {
                    let src = &t.0.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                    let dst_start = (o * total_axis + offset + a) * inner;
                    data[dst_start..dst_start + inner].copy_from_slice(src);
                }
            }
            offset += len;
        }
        let needs = tensors.iter().any(|t| t.0.needs_grad);
        make("concat", out_shape, data, Op::Concat { inputs: tensors.to_vec(), axis }, needs)
    }

    /// Row `index` of the leading axis, kept as a size-1 axis.
    pub fn slice_axis0(&self, index: usize) -> Result<Tensor> {
        if self.shape().is_empty() || index >= self.shape()[0] {
            return Err(NnError::InvalidArgument {
                op: "slice_axis0",
                detail: format!("index {index} for shape {:?}", self.shape()),
            });
        }
        let inner: usize = self.shape()[1..].iter().product();
        let data = self.0.data[index * inner..(index + 1) * inner].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = 1;
        make("slice_axis0", shape, data, Op::SliceAxis0 { input: self.clone(), index }, self.0.needs_grad)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        make("reshape", shape.to_vec(), self.0.data.clone(), Op::Reshape(self.clone()), self.0.needs_grad)
    }

    /// Place per-pillar vectors (P,C) at distinct BEV cells, zeros
    /// elsewhere: -> (C, nx, ny).
    pub fn scatter_to_bev(&self, cells: Rc<Vec<(usize, usize)>>, nx: usize, ny: usize) -> Result<Tensor> {
        if self.shape().len() != 2 || self.shape()[0] != cells.len() {
            return Err(NnError::ShapeMismatch {
                op: "scatter_to_bev",
                detail: format!("pillars {:?} vs {} cells", self.shape(), cells.len()),
            });
        }
        let c = self.shape()[1];
        let mut seen = std::collections::HashSet::with_capacity(cells.len());
        for &(i, j) in cells.iter() {
            if i >= nx || j >= ny {
                return Err(NnError::InvalidArgument {
                    op: "scatter_to_bev",
                    detail: format!("cell ({i},{j}) outside {nx}x{ny}"),
                });
            }
            if !seen.insert((i, j)) {
                return Err(NnError::InvalidArgument {
                    op: "scatter_to_bev",
                    detail: format!("duplicate cell ({i},{j})"),
                });
            }
        }
        let mut data = vec![0.0; c * nx * ny];
        for (p, &(i, j)) in cells.iter().enumerate() {
            for ch in 0..c {
                data[ch * nx * ny + i * ny + j] = self.0.data[p * c + ch];
            }
        }
        make(
            "scatter_to_bev",
            vec![c, nx, ny],
            data,
            Op::ScatterBev { pillars: self.clone(), cells, nx, ny },
            self.0.needs_grad,
        )
    }

    /// Read cell vectors from a (C,nx,ny) map: -> (G, C).
    pub fn gather_cells(&self, cells: Rc<Vec<(usize, usize)>>) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(NnError::ShapeMismatch { op: "gather_cells", detail: format!("{:?}", self.shape()) });
        }
        let (c, nx, ny) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if cells.is_empty() {
            return Err(NnError::InvalidArgument { op: "gather_cells", detail: "no cells".into() });
        }
        let mut data = vec![0.0; cells.len() * c];
        for (g, &(i, j)) in cells.iter().enumerate() {
            if i >= nx || j >= ny {
                return Err(NnError::InvalidArgument {
                    op: "gather_cells",
                    detail: format!("cell ({i},{j}) outside {nx}x{ny}"),
                });
            }
            for ch in 0..c {
                data[g * c + ch] = self.0.data[ch * nx * ny + i * ny + j];
            }
        }
        make("gather_cells", vec![cells.len(), c], data, Op::GatherCells { bev: self.clone(), cells }, self.0.needs_grad)
    }

    /// Symmetric Chamfer objective between `self` (K,3) and `target`
    /// (N,3): mean over each set of the squared distance to the nearest
    /// point of the other set, summed over both directions.
    pub fn chamfer(&self, target: &Tensor) -> Result<Tensor> {
        for (name, t) in [("pred", self), ("target", target)] {
            if t.shape().len() != 2 || t.shape()[1] != 3 {
                return Err(NnError::ShapeMismatch { op: "chamfer", detail: format!("{name} {:?}", t.shape()) });
            }
        }
        let value = chamfer_forward(&self.0.data, &target.0.data);
        let needs = self.0.needs_grad || target.0.needs_grad;
        make("chamfer", vec![1], vec![value], Op::Chamfer { pred: self.clone(), target: target.clone() }, needs)
    }

    /// Mean per-grid Chamfer over G grids: `self` is (G,K,3),
    /// `targets[g]` the (variable-size, non-empty) target set of grid g.
    pub fn chamfer_batch(&self, targets: Rc<Vec<Vec<[f64; 3]>>> ) -> Result<Tensor> {
        if self.shape().len() != 3 || self.shape()[2] != 3 || self.shape()[0] != targets.len() {
            return Err(NnError::ShapeMismatch {
                op: "chamfer_batch",
                detail: format!("pred {:?} vs {} target sets", self.shape(), targets.len()),
            });
        }
        if targets.iter().any(|t| t.is_empty()) {
            return Err(NnError::InvalidArgument { op: "chamfer_batch", detail: "empty target set".into() });
        }
        let (g, k) = (self.shape()[0], self.shape()[1]);
        let mut sum = 0.0;
        for gi in 0..g {
            let pred = &self.0.data[gi * k * 3..(gi + 1) * k * 3];
            let flat: Vec<f64> = targets[gi].iter().flatten().copied().collect();
            sum += chamfer_forward(pred, &flat);
        }
        let value = sum / g as f64;
        make(
            "chamfer_batch",
            vec![1],
            vec![value],
            Op::ChamferBatch { pred: self.clone(), targets },
            self.0.needs_grad,
        )
    }

    /// Mean binary cross-entropy on logits (numerically stable).
    pub fn bce_with_logits_mean(&self, targets: Rc<Vec<f64>>) -> Result<Tensor> {
        if self.numel() != targets.len() {
            return Err(NnError::ShapeMismatch {
                op: "bce_with_logits_mean",
                detail: format!("{} logits vs {} targets", self.numel(), targets.len()),
            });
        }
        let mut sum = 0.0;
        for (&x, &t) in self.0.data.iter().zip(targets.iter()) {
            sum += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let value = sum / targets.len() as f64;
        make(
            "bce_with_logits_mean",
            vec![1],
            vec![value],
            Op::BceWithLogitsMean { logits: self.clone(), targets },
            self.0.needs_grad,
        )
    }

    /// Mean smooth-L1 (Huber) against a constant target.
    pub fn smooth_l1_mean(&self, target: Rc<Vec<f64>>, beta: f64) -> Result<Tensor> {
        if self.numel() != target.len() {
            return Err(NnError::ShapeMismatch {
                op: "smooth_l1_mean",
                detail: format!("{} values vs {} targets", self.numel(), target.len()),
            });
        }
        if beta <= 0.0 {
            return Err(NnError::InvalidArgument { op: "smooth_l1_mean", detail: "beta must be > 0".into() });
        }
        let mut sum = 0.0;
        for (&p, &t) in self.0.data.iter().zip(target.iter()) {
            let e = (p - t).abs();
            sum += if e < beta { 0.5 * e * e / beta } else { e - 0.5 * beta };
        }
        let value = sum / target.len() as f64;
        make(
            "smooth_l1_mean",
            vec![1],
            vec![value],
            Op::SmoothL1Mean { pred: self.clone(), target, beta },
            self.0.needs_grad,
        )
    }

    /// Mean over every element.
    pub fn mean_all(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])?.mean_axis(0, false)
    }
}

/// Shared by `chamfer` and `chamfer_batch`; flat xyz buffers.
pub(crate) fn chamfer_forward(pred: &[f64], target: &[f64]) -> f64 {
    let k = pred.len() / 3;
    let n = target.len() / 3;
    let mut s1 = 0.0;
    for i in 0..k {
        s1 += nearest_sq(&pred[i * 3..i * 3 + 3], target).1;
    }
    let mut s2 = 0.0;
    for j in 0..n {
        s2 += nearest_sq(&target[j * 3..j * 3 + 3], pred).1;
    }
    s1 / k as f64 + s2 / n as f64
}

/// Index and squared distance of the nearest point in `set` (first
/// index wins ties).
pub(crate) fn nearest_sq(p: &[f64], set: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, q) in set.chunks_exact(3).enumerate() {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dz = p[2] - q[2];
        let d = dx * dx + dy * dy + dz * dz;
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}
