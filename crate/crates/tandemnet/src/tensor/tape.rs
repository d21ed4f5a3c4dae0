//! Wengert-list reverse-mode autodiff.
//!
//! Every differentiable op appends one node (the output value) and one op
//! record. `backward` walks the records once in reverse, accumulating node
//! gradients, then flushes gradients of registered parameters back into
//! their [`SharedTensor`] cells. Output ids are always larger than input
//! ids, so reverse record order is a valid reverse topological order.
//!
//! The tape is single-threaded; heavy kernels may split work internally
//! (see [`kernels::set_worker_threads`]).

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{fmt_shape, Elem, SharedTensor, Tensor};
use crate::error::{Error, Result};

/// Train/eval switch for stochastic and statistics-bearing ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<Elem>,
    requires: bool,
    src: Option<SharedTensor>,
}

struct BnSaved {
    xhat: Vec<Elem>,
    inv_std: Vec<Elem>,
    train: bool,
}

enum Op {
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, factor: Elem, out: TensorId },
    Tanh { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Softmax { x: TensorId, out: TensorId },
    BcastCol { mat: TensorId, col: TensorId, out: TensorId },
    AddScalar { x: TensorId, s: TensorId, out: TensorId },
    Gap { x: TensorId, out: TensorId },
    ConcatCols { a: TensorId, b: TensorId, out: TensorId },
    Reshape { x: TensorId, out: TensorId },
    Slice { x: TensorId, start: usize, out: TensorId },
    Row { table: TensorId, index: usize, out: TensorId },
    BatchSlice { x: TensorId, index: usize, out: TensorId },
    Conv2d { x: TensorId, w: TensorId, bias: TensorId, geom: ConvGeom, out: TensorId },
    AvgPool2d { x: TensorId, k: usize, stride: usize, out: TensorId },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, saved: BnSaved, out: TensorId },
    Dropout { x: TensorId, mask: Vec<Elem>, out: TensorId },
    CrossEntropy { logits: TensorId, target: usize, probs: Vec<Elem>, out: TensorId },
}

impl Op {
    fn out(&self) -> TensorId {
        match self {
            Op::MatMul { out, .. }
            | Op::Add { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Tanh { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Relu { out, .. }
            | Op::Softmax { out, .. }
            | Op::BcastCol { out, .. }
            | Op::AddScalar { out, .. }
            | Op::Gap { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::Reshape { out, .. }
            | Op::Slice { out, .. }
            | Op::Row { out, .. }
            | Op::BatchSlice { out, .. }
            | Op::Conv2d { out, .. }
            | Op::AvgPool2d { out, .. }
            | Op::BatchNorm { out, .. }
            | Op::Dropout { out, .. }
            | Op::CrossEntropy { out, .. } => *out,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<Elem>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, op and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.ops.clear();
        self.grads.clear();
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[Elem] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[Elem]> {
        self.grads[id.0].as_deref()
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape/data consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Elem>, requires: bool, src: Option<SharedTensor>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires, src });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Non-differentiable input (e.g. an image batch).
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    /// Differentiable leaf without a backing parameter; its gradient is read
    /// off the tape with [`Tape::grad`]. Used by gradient checks and tests.
    pub fn var(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, None)
    }

    /// Registers a parameter: snapshots its data and remembers the cell so
    /// `backward` can flush the gradient into it.
    pub fn param(&mut self, p: &SharedTensor) -> TensorId {
        let t = p.borrow();
        let requires = t.requires_grad();
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        drop(t);
        self.push(shape, data, requires, requires.then(|| p.clone()))
    }

    /// Registers a parameter as a constant: no gradient is ever computed or
    /// flushed for it. This is how frozen parameter groups are bound.
    pub fn frozen(&mut self, p: &SharedTensor) -> TensorId {
        let t = p.borrow();
        self.push(t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let Tensor { shape, data, .. } = t;
        self.push(shape, data, false, None)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let numel = shape.iter().product();
        self.push(shape, vec![0.0; numel], false, None)
    }

    /// Copies a value off the graph: same data, no gradient flow.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let n = &self.nodes[x.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, false, None)
    }

    // ── Shape helpers ────────────────────────────────────────────────────

    fn want_rank(&self, op: &'static str, id: TensorId, rank: usize) -> Result<()> {
        let s = self.shape(id);
        if s.len() != rank {
            return Err(Error::dim(op, format!("expected rank {rank}, got shape {}", fmt_shape(s))));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        self.want_rank(op, id, 2)?;
        let s = self.shape(id);
        Ok((s[0], s[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::dim(
                "matmul",
                format!("{} · {}", fmt_shape(self.shape(a)), fmt_shape(self.shape(b))),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, ka, n);
        let req = self.requires(a) || self.requires(b);
        let out = self.push(vec![m, n], out, req, None);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{} vs {}", fmt_shape(self.shape(a)), fmt_shape(self.shape(b))),
            ));
        }
        let data: Vec<Elem> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{} vs {}", fmt_shape(self.shape(a)), fmt_shape(self.shape(b))),
            ));
        }
        let data: Vec<Elem> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, factor: Elem) -> TensorId {
        let data: Vec<Elem> = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let (shape, req) = (self.nodes[x.0].shape.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Scale { x, factor, out });
        out
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<Elem> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let (shape, req) = (self.nodes[x.0].shape.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Tanh { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<Elem> =
            self.nodes[x.0].data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let (shape, req) = (self.nodes[x.0].shape.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<Elem> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let (shape, req) = (self.nodes[x.0].shape.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Relu { x, out });
        out
    }

    /// Softmax over a rank-1 tensor, with max subtraction for stability.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.want_rank("softmax", x, 1)?;
        let xs = &self.nodes[x.0].data;
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let max = xs.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
        let exps: Vec<Elem> = xs.iter().map(|v| (v - max).exp()).collect();
        let sum: Elem = exps.iter().sum();
        let data: Vec<Elem> = exps.iter().map(|e| e / sum).collect();
        let (shape, req) = (self.nodes[x.0].shape.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Softmax { x, out });
        Ok(out)
    }

    /// mat[r,c] + col[r]: the one sanctioned broadcast, a column vector
    /// replicated across the trailing axis.
    pub fn bcast_col(&mut self, mat: TensorId, col: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2("bcast_col", mat)?;
        self.want_rank("bcast_col", col, 1)?;
        if self.shape(col)[0] != rows {
            return Err(Error::dim(
                "bcast_col",
                format!("matrix {} vs column {}", fmt_shape(self.shape(mat)), fmt_shape(self.shape(col))),
            ));
        }
        let mut data = self.nodes[mat.0].data.clone();
        for r in 0..rows {
            let cv = self.nodes[col.0].data[r];
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v += cv;
            }
        }
        let req = self.requires(mat) || self.requires(col);
        let out = self.push(vec![rows, cols], data, req, None);
        self.ops.push(Op::BcastCol { mat, col, out });
        Ok(out)
    }

    /// x + s with s a single-element tensor broadcast over all of x.
    pub fn add_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::dim(
                "add_scalar",
                format!("scalar operand has shape {}", fmt_shape(self.shape(s))),
            ));
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<Elem> = self.nodes[x.0].data.iter().map(|v| v + sv).collect();
        let req = self.requires(x) || self.requires(s);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::AddScalar { x, s, out });
        Ok(out)
    }

    /// Row means of a matrix: [A×B] -> [A]. This is the Δ operator.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2("global_avg_pool", x)?;
        if cols == 0 {
            return Err(Error::dim("global_avg_pool", "matrix has zero columns".to_string()));
        }
        let data: Vec<Elem> = (0..rows)
            .map(|r| self.nodes[x.0].data[r * cols..(r + 1) * cols].iter().sum::<Elem>() / cols as Elem)
            .collect();
        let req = self.requires(x);
        let out = self.push(vec![rows], data, req, None);
        self.ops.push(Op::Gap { x, out });
        Ok(out)
    }

    /// [A×B1] ⧺ [A×B2] -> [A×(B1+B2)]; either side may have zero columns.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::dim(
                "concat_cols",
                format!("{} vs {}", fmt_shape(self.shape(a)), fmt_shape(self.shape(b))),
            ));
        }
        let mut data = vec![0.0; ra * (ca + cb)];
        for r in 0..ra {
            data[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        let req = self.requires(a) || self.requires(b);
        let out = self.push(vec![ra, ca + cb], data, req, None);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{} -> {}", fmt_shape(self.shape(x)), fmt_shape(&shape)),
            ));
        }
        let (data, req) = (self.nodes[x.0].data.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Contiguous sub-range of a rank-1 tensor.
    pub fn slice(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.want_rank("slice", x, 1)?;
        let total = self.nodes[x.0].data.len();
        if start + len > total {
            return Err(Error::dim("slice", format!("[{start}, {}) out of length {total}", start + len)));
        }
        let data = self.nodes[x.0].data[start..start + len].to_vec();
        let req = self.requires(x);
        let out = self.push(vec![len], data, req, None);
        self.ops.push(Op::Slice { x, start, out });
        Ok(out)
    }

    /// One row of a [V×K] table, the embedding lookup. Backward scatter-adds
    /// into that row only.
    pub fn row(&mut self, table: TensorId, index: usize) -> Result<TensorId> {
        let (v, k) = self.dims2("row", table)?;
        if index >= v {
            return Err(Error::dim("row", format!("row {index} out of {v}")));
        }
        let data = self.nodes[table.0].data[index * k..(index + 1) * k].to_vec();
        let req = self.requires(table);
        let out = self.push(vec![k], data, req, None);
        self.ops.push(Op::Row { table, index, out });
        Ok(out)
    }

    /// Picks entry `index` from the leading axis: [B, d...] -> [d...].
    pub fn batch_slice(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::dim("batch_slice", format!("need rank >= 2, got {}", fmt_shape(s))));
        }
        if index >= s[0] {
            return Err(Error::dim("batch_slice", format!("index {index} out of batch {}", s[0])));
        }
        let block: usize = s[1..].iter().product();
        let shape = s[1..].to_vec();
        let data = self.nodes[x.0].data[index * block..(index + 1) * block].to_vec();
        let req = self.requires(x);
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::BatchSlice { x, index, out });
        Ok(out)
    }

    /// 2-D convolution over [B,Cin,H,W] with weight [Cout,Cin,kh,kw], zero
    /// padding `pad`, square stride. im2col + GEMM inside.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, bias: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        self.want_rank("conv2d", x, 4)?;
        self.want_rank("conv2d", w, 4)?;
        self.want_rank("conv2d", bias, 1)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::dim("conv2d", format!("input {} vs weight {}", fmt_shape(&xs), fmt_shape(&ws))));
        }
        if self.shape(bias)[0] != cout {
            return Err(Error::dim("conv2d", format!("bias {} vs cout {cout}", fmt_shape(self.shape(bias)))));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive".to_string()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, oh, ow };

        let mut out = vec![0.0; b * cout * oh * ow];
        let mut col = vec![0.0; geom.col_rows() * geom.col_cols()];
        let wdat = &self.nodes[w.0].data;
        let bdat = &self.nodes[bias.0].data;
        let xdat = &self.nodes[x.0].data;
        let in_block = cin * h * wd;
        let out_block = cout * oh * ow;
        for s in 0..b {
            kernels::im2col(&xdat[s * in_block..(s + 1) * in_block], &geom, &mut col);
            let dst = &mut out[s * out_block..(s + 1) * out_block];
            kernels::gemm_nn(wdat, &col, dst, cout, geom.col_rows(), geom.col_cols());
            for c in 0..cout {
                let bc = bdat[c];
                for v in &mut dst[c * oh * ow..(c + 1) * oh * ow] {
                    *v += bc;
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        let out = self.push(vec![b, cout, oh, ow], out, req, None);
        self.ops.push(Op::Conv2d { x, w, bias, geom, out });
        Ok(out)
    }

    /// Non-overlapping-style average pooling with square kernel and stride.
    pub fn avg_pool2d(&mut self, x: TensorId, k: usize, stride: usize) -> Result<TensorId> {
        self.want_rank("avg_pool2d", x, 4)?;
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::dim("avg_pool2d", format!("kernel {k} stride {stride} on {}", fmt_shape(&s))));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; b * c * oh * ow];
        let norm = 1.0 / (k * k) as Elem;
        let xdat = &self.nodes[x.0].data;
        for bc in 0..b * c {
            let plane = &xdat[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = &plane[(oy * stride + ky) * w + ox * stride..][..k];
                        acc += row.iter().sum::<Elem>();
                    }
                    dst[oy * ow + ox] = acc * norm;
                }
            }
        }
        let req = self.requires(x);
        let out = self.push(vec![b, c, oh, ow], out, req, None);
        self.ops.push(Op::AvgPool2d { x, k, stride, out });
        Ok(out)
    }

    /// Per-channel batch normalization over (B,H,W). Train mode uses batch
    /// statistics (biased variance) and folds them into the running buffers;
    /// eval mode normalizes with the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &SharedTensor,
        running_var: &SharedTensor,
        mode: Mode,
        momentum: Elem,
        eps: Elem,
    ) -> Result<TensorId> {
        self.want_rank("batch_norm", x, 4)?;
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("gamma {} beta {} vs {c} channels", fmt_shape(self.shape(gamma)), fmt_shape(self.shape(beta))),
            ));
        }
        let plane = h * w;
        let n = (b * plane) as Elem;
        let xdat = &self.nodes[x.0].data;

        let (mean, var): (Vec<Elem>, Vec<Elem>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..b {
                        let base = (s * c + ch) * plane;
                        acc += xdat[base..base + plane].iter().sum::<Elem>();
                    }
                    let m = acc / n;
                    let mut vacc = 0.0;
                    for s in 0..b {
                        let base = (s * c + ch) * plane;
                        vacc += xdat[base..base + plane].iter().map(|v| (v - m) * (v - m)).sum::<Elem>();
                    }
                    mean[ch] = m;
                    var[ch] = vacc / n;
                }
                {
                    let mut rm = running_mean.borrow_mut();
                    let mut rv = running_var.borrow_mut();
                    for ch in 0..c {
                        rm.data_mut()[ch] = (1.0 - momentum) * rm.data()[ch] + momentum * mean[ch];
                        rv.data_mut()[ch] = (1.0 - momentum) * rv.data()[ch] + momentum * var[ch];
                    }
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.borrow().data().to_vec(), running_var.borrow().data().to_vec()),
        };

        let inv_std: Vec<Elem> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gdat = &self.nodes[gamma.0].data;
        let bdat = &self.nodes[beta.0].data;
        let mut xhat = vec![0.0; xdat.len()];
        let mut out = vec![0.0; xdat.len()];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (m, is, g, bt) = (mean[ch], inv_std[ch], gdat[ch], bdat[ch]);
                for i in base..base + plane {
                    let xh = (xdat[i] - m) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + bt;
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let saved = BnSaved { xhat, inv_std, train: mode == Mode::Train };
        let out = self.push(s, out, req, None);
        self.ops.push(Op::BatchNorm { x, gamma, beta, saved, out });
        Ok(out)
    }

    /// Inverted dropout: kept activations are divided by 1−p so eval is the
    /// identity (and is literally a no-op here).
    pub fn dropout<R: Rng>(&mut self, x: TensorId, p: Elem, mode: Mode, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("dropout.p", format!("{p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let mask: Vec<Elem> =
            (0..self.nodes[x.0].data.len()).map(|_| if rng.gen::<Elem>() < keep { inv } else { 0.0 }).collect();
        let data: Vec<Elem> = self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (shape, req) = (self.nodes[x.0].shape.clone(), self.requires(x));
        let out = self.push(shape, data, req, None);
        self.ops.push(Op::Dropout { x, mask, out });
        Ok(out)
    }

    /// Softmax cross-entropy against a class index, fused for stability:
    /// loss = logsumexp(z) − z[target].
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        self.want_rank("cross_entropy", logits, 1)?;
        let z = &self.nodes[logits.0].data;
        if target >= z.len() {
            return Err(Error::dim("cross_entropy", format!("target {target} out of {} classes", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("cross_entropy", "non-finite logits"));
        }
        let max = z.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
        let exps: Vec<Elem> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: Elem = exps.iter().sum();
        let probs: Vec<Elem> = exps.iter().map(|e| e / sum).collect();
        let loss = max + sum.ln() - z[target];
        let req = self.requires(logits);
        let out = self.push(vec![1], vec![loss], req, None);
        self.ops.push(Op::CrossEntropy { logits, target, probs, out });
        Ok(out)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Seeds d(loss)/d(loss) = 1 and replays every recorded op once in
    /// reverse, then flushes gradients into registered parameter cells.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {}", fmt_shape(&ln.shape))));
        }
        if !ln.data[0].is_finite() {
            return Err(Error::numeric("backward", format!("loss is {}", ln.data[0])));
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for oi in (0..self.ops.len()).rev() {
            let out = self.ops[oi].out();
            if !self.nodes[out.0].requires {
                continue;
            }
            let Some(g) = self.grads[out.0].take() else { continue };
            self.backward_op(oi, &g);
            self.grads[out.0] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(src), Some(grad)) = (&node.src, &self.grads[i]) {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric("backward", "non-finite parameter gradient"));
                }
                src.borrow_mut().accumulate_grad(grad);
            }
        }
        Ok(())
    }

    fn acc(grads: &mut [Option<Vec<Elem>>], nodes: &[Node], id: TensorId, f: impl FnOnce(&mut [Elem])) {
        if !nodes[id.0].requires {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].data.len()]);
        f(slot);
    }

    fn backward_op(&mut self, oi: usize, g: &[Elem]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &self.ops[oi] {
            Op::MatMul { a, b, out } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[out.0].shape[1];
                Self::acc(grads, nodes, *a, |da| kernels::gemm_nt(g, &nodes[b.0].data, da, m, n, k));
                Self::acc(grads, nodes, *b, |db| kernels::gemm_tn(&nodes[a.0].data, g, db, m, k, n));
            }
            Op::Add { a, b, out: _ } => {
                for id in [a, b] {
                    Self::acc(grads, nodes, *id, |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
            }
            Op::Mul { a, b, out: _ } => {
                Self::acc(grads, nodes, *a, |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(&nodes[b.0].data) {
                        *dv += gv * bv;
                    }
                });
                Self::acc(grads, nodes, *b, |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(&nodes[a.0].data) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale { x, factor, out: _ } => {
                let f = *factor;
                Self::acc(grads, nodes, *x, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv * f;
                    }
                });
            }
            Op::Tanh { x, out } => {
                Self::acc(grads, nodes, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(&nodes[out.0].data) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { x, out } => {
                Self::acc(grads, nodes, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(&nodes[out.0].data) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Relu { x, out } => {
                Self::acc(grads, nodes, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(&nodes[out.0].data) {
                        if *yv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Softmax { x, out } => {
                let y = &nodes[out.0].data;
                let dot: Elem = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                Self::acc(grads, nodes, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += yv * (gv - dot);
                    }
                });
            }
            Op::BcastCol { mat, col, out } => {
                let cols = nodes[out.0].shape[1];
                Self::acc(grads, nodes, *mat, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                Self::acc(grads, nodes, *col, |d| {
                    for (r, dv) in d.iter_mut().enumerate() {
                        *dv += g[r * cols..(r + 1) * cols].iter().sum::<Elem>();
                    }
                });
            }
            Op::AddScalar { x, s, out: _ } => {
                Self::acc(grads, nodes, *x, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                Self::acc(grads, nodes, *s, |d| d[0] += g.iter().sum::<Elem>());
            }
            Op::Gap { x, out: _ } => {
                let cols = nodes[x.0].shape[1];
                let inv = 1.0 / cols as Elem;
                Self::acc(grads, nodes, *x, |d| {
                    for (r, gv) in g.iter().enumerate() {
                        let gvc = gv * inv;
                        for dv in &mut d[r * cols..(r + 1) * cols] {
                            *dv += gvc;
                        }
                    }
                });
            }
            Op::ConcatCols { a, b, out: _ } => {
                let (rows, ca) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let cb = nodes[b.0].shape[1];
                Self::acc(grads, nodes, *a, |d| {
                    for r in 0..rows {
                        for (dv, gv) in d[r * ca..(r + 1) * ca].iter_mut().zip(&g[r * (ca + cb)..]) {
                            *dv += gv;
                        }
                    }
                });
                Self::acc(grads, nodes, *b, |d| {
                    for r in 0..rows {
                        for (dv, gv) in d[r * cb..(r + 1) * cb].iter_mut().zip(&g[r * (ca + cb) + ca..]) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Reshape { x, out: _ } => {
                Self::acc(grads, nodes, *x, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Slice { x, start, out } => {
                let (start, len) = (*start, nodes[out.0].data.len());
                Self::acc(grads, nodes, *x, |d| {
                    for (dv, gv) in d[start..start + len].iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Row { table, index, out } => {
                let k = nodes[out.0].data.len();
                let index = *index;
                Self::acc(grads, nodes, *table, |d| {
                    for (dv, gv) in d[index * k..(index + 1) * k].iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::BatchSlice { x, index, out } => {
                let block = nodes[out.0].data.len();
                let index = *index;
                Self::acc(grads, nodes, *x, |d| {
                    for (dv, gv) in d[index * block..(index + 1) * block].iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Conv2d { x, w, bias, geom, out } => {
                let b = nodes[x.0].shape[0];
                let cout = nodes[out.0].shape[1];
                let in_block = geom.cin * geom.h * geom.w;
                let out_block = cout * geom.oh * geom.ow;
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let mut col = vec![0.0; rows * cols];
                // dW and db accumulate over samples; dX is per-sample.
                Self::acc(grads, nodes, *bias, |d| {
                    for s in 0..b {
                        for c in 0..cout {
                            d[c] += g[s * out_block + c * geom.oh * geom.ow..][..geom.oh * geom.ow]
                                .iter()
                                .sum::<Elem>();
                        }
                    }
                });
                if nodes[w.0].requires {
                    for s in 0..b {
                        kernels::im2col(&nodes[x.0].data[s * in_block..(s + 1) * in_block], geom, &mut col);
                        let gs = &g[s * out_block..(s + 1) * out_block];
                        Self::acc(grads, nodes, *w, |d| kernels::gemm_nt(gs, &col, d, cout, cols, rows));
                    }
                }
                if nodes[x.0].requires {
                    let wdat = &nodes[w.0].data;
                    let mut dcol = vec![0.0; rows * cols];
                    for s in 0..b {
                        dcol.fill(0.0);
                        let gs = &g[s * out_block..(s + 1) * out_block];
                        kernels::gemm_tn(wdat, gs, &mut dcol, cout, rows, cols);
                        Self::acc(grads, nodes, *x, |d| {
                            kernels::col2im(&dcol, geom, &mut d[s * in_block..(s + 1) * in_block]);
                        });
                    }
                }
            }
            Op::AvgPool2d { x, k, stride, out } => {
                let (k, stride) = (*k, *stride);
                let xs = &nodes[x.0].shape;
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = &nodes[out.0].shape;
                let (oh, ow) = (os[2], os[3]);
                let norm = 1.0 / (k * k) as Elem;
                Self::acc(grads, nodes, *x, |d| {
                    for bc in 0..b * c {
                        let gplane = &g[bc * oh * ow..(bc + 1) * oh * ow];
                        let dplane = &mut d[bc * h * w..(bc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gplane[oy * ow + ox] * norm;
                                for ky in 0..k {
                                    let base = (oy * stride + ky) * w + ox * stride;
                                    for dv in &mut dplane[base..base + k] {
                                        *dv += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, saved, out } => {
                let s = &nodes[out.0].shape;
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let n = (b * plane) as Elem;
                let gdat = &nodes[gamma.0].data;
                // Per-channel reductions over the (B,H,W) set.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for smp in 0..b {
                    for ch in 0..c {
                        let base = (smp * c + ch) * plane;
                        for (gv, xv) in g[base..base + plane].iter().zip(&saved.xhat[base..base + plane]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xv;
                        }
                    }
                }
                Self::acc(grads, nodes, *beta, |d| {
                    for ch in 0..c {
                        d[ch] += sum_g[ch];
                    }
                });
                Self::acc(grads, nodes, *gamma, |d| {
                    for ch in 0..c {
                        d[ch] += sum_gx[ch];
                    }
                });
                Self::acc(grads, nodes, *x, |d| {
                    for smp in 0..b {
                        for ch in 0..c {
                            let base = (smp * c + ch) * plane;
                            let gis = gdat[ch] * saved.inv_std[ch];
                            if saved.train {
                                let mg = sum_g[ch] / n;
                                let mgx = sum_gx[ch] / n;
                                for i in base..base + plane {
                                    d[i] += gis * (g[i] - mg - saved.xhat[i] * mgx);
                                }
                            } else {
                                for i in base..base + plane {
                                    d[i] += gis * g[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask, out: _ } => {
                Self::acc(grads, nodes, *x, |d| {
                    for ((dv, gv), mv) in d.iter_mut().zip(g).zip(mask) {
                        *dv += gv * mv;
                    }
                });
            }
            Op::CrossEntropy { logits, target, probs, out: _ } => {
                let g0 = g[0];
                let target = *target;
                Self::acc(grads, nodes, *logits, |d| {
                    for (i, (dv, pv)) in d.iter_mut().zip(probs).enumerate() {
                        *dv += g0 * (pv - if i == target { 1.0 } else { 0.0 });
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{shared, tol};

    fn t2(rows: usize, cols: usize, data: &[Elem]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.var(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(&t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        // loss = sum(a·b): da = 1·bᵀ pattern, db = aᵀ·1 pattern.
        let mut tape = Tape::new();
        let a = tape.var(&t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.var(&t2(3, 1, &[7.0, 8.0, 9.0]));
        let c = tape.matmul(a, b).unwrap();
        let ones = tape.var(&t2(1, 2, &[1.0, 1.0]));
        let s = tape.matmul(ones, c).unwrap();
        let s = tape.reshape(s, vec![1]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
        assert_eq!(tape.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes_naming_both() {
        let mut tape = Tape::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![3, 2]);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("3x2"), "got: {err}");
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = 2x + 3x ⇒ dy/dx = 5.
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::scalar(1.5));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let y = tape.add(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_stable() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::new(vec![3], vec![1000.0, 1001.0, 1002.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let sum: Elem = tape.data(y).iter().sum();
        assert!((sum - 1.0).abs() < tol::abs_bound(1e-12), "softmax sum {sum}");
        assert!(tape.data(y).iter().all(|v| v.is_finite()), "overflowed on large inputs");
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::new(vec![2], vec![Elem::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn global_avg_pool_row_means_and_backward() {
        let mut tape = Tape::new();
        let x = tape.var(&t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.data(y), &[2.0, 5.0]);
        let s = tape.slice(y, 0, 1).unwrap();
        tape.backward(s).unwrap();
        // Only row 0 contributes; each of its 3 entries gets 1/3.
        let g = tape.grad(x).unwrap();
        assert_eq!(&g[..3], &[1.0 / 3.0; 3]);
        assert_eq!(&g[3..], &[0.0; 3]);
    }

    #[test]
    fn concat_cols_roundtrip_and_empty() {
        let mut tape = Tape::new();
        let a = tape.var(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(&t2(2, 1, &[9.0, 8.0]));
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let empty = tape.zeros(vec![2, 0]);
        let same = tape.concat_cols(a, empty).unwrap();
        assert_eq!(tape.data(same), tape.data(a));
    }

    #[test]
    fn bcast_col_adds_column_everywhere() {
        let mut tape = Tape::new();
        let m = tape.var(&t2(2, 3, &[0.0; 6]));
        let c = tape.var(&Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let y = tape.bcast_col(m, c).unwrap();
        assert_eq!(tape.data(y), &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn conv2d_ones_kernel_counts_taps() {
        // 3x3 ones over constant-1 input with pad 1: interior 9, edge 6, corner 4.
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = tape.input(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.input(&Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let d = tape.data(y);
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        assert_eq!(d[0], 4.0, "corner");
        assert_eq!(d[1], 6.0, "edge");
        assert_eq!(d[5], 9.0, "interior");
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.zeros(vec![1, 1, 2, 2]);
        let w = tape.zeros(vec![1, 1, 5, 5]);
        let b = tape.zeros(vec![1]);
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("larger than padded input"), "got: {err}");
    }

    #[test]
    fn avg_pool_known_window_means() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.input(&Tensor::full(vec![1], 1.0));
        let beta = tape.input(&Tensor::zeros(vec![1]));
        let rm = shared(Tensor::zeros(vec![1]));
        let rv = shared(Tensor::full(vec![1], 1.0));
        let y = tape.batch_norm(x, gamma, beta, &rm, &rv, Mode::Train, 0.1, 1e-5).unwrap();
        let d = tape.data(y);
        let mean: Elem = d.iter().sum::<Elem>() / 4.0;
        let var: Elem = d.iter().map(|v| (v - mean) * (v - mean)).sum::<Elem>() / 4.0;
        assert!(mean.abs() < tol::abs_bound(1e-12), "normalized mean {mean}");
        assert!((var - 1.0).abs() < tol::abs_bound(1e-4), "normalized var {var}");
        assert!((rm.borrow().data()[0] - 0.25).abs() < tol::abs_bound(1e-12), "running mean blended at momentum 0.1");
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap());
        let gamma = tape.input(&Tensor::full(vec![1], 1.0));
        let beta = tape.input(&Tensor::zeros(vec![1]));
        let rm = shared(Tensor::full(vec![1], 3.0));
        let rv = shared(Tensor::full(vec![1], 4.0));
        let y = tape.batch_norm(x, gamma, beta, &rm, &rv, Mode::Eval, 0.1, 0.0).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.0).abs() < tol::abs_bound(1e-12) && (d[1] - 1.0).abs() < tol::abs_bound(1e-12), "got {d:?}");
    }

    #[test]
    fn dropout_eval_and_p0_are_identity() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::full(vec![8], 2.0));
        let e = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e, x, "eval mode must be a no-op");
        let z = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(z, x, "p = 0 must be a no-op");
    }

    #[test]
    fn dropout_train_scales_kept_by_inverse_keep() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::full(vec![1000], 1.0));
        let y = tape.dropout(x, 0.25, Mode::Train, &mut rng).unwrap();
        let d = tape.data(y);
        let expected = 1.0 / 0.75;
        assert!(d.iter().all(|&v| v == 0.0 || (v - expected).abs() < tol::abs_bound(1e-12)));
        let kept = d.iter().filter(|&&v| v != 0.0).count();
        assert!((600..900).contains(&kept), "kept {kept} of 1000 at p=0.25");
    }

    #[test]
    fn cross_entropy_matches_log_softmax_and_grad() {
        let mut tape = Tape::new();
        let z = tape.var(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.cross_entropy(z, 2).unwrap();
        let zs = [1.0_f64, 2.0, 3.0];
        let lse = zs.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((tape.data(loss)[0] - (lse - 3.0) as Elem).abs() < tol::abs_bound(1e-12));
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        let sum: Elem = g.iter().sum();
        assert!(sum.abs() < tol::abs_bound(1e-12), "softmax-minus-onehot sums to 0, got {sum}");
        assert!(g[2] < 0.0 && g[0] > 0.0);
    }

    #[test]
    fn cross_entropy_extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let z = tape.var(&Tensor::new(vec![2], vec![800.0, -800.0]).unwrap());
        let loss = tape.cross_entropy(z, 1).unwrap();
        assert!(tape.data(loss)[0].is_finite());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::zeros(vec![3]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn param_grad_flushes_into_shared_cell_and_sums() {
        let p = shared(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        // Register the same parameter twice: gradients must sum.
        let a = tape.param(&p);
        let b = tape.param(&p);
        let y = tape.add(a, b).unwrap();
        let w = tape.var(&t2(1, 2, &[1.0, 1.0]));
        let y2 = tape.reshape(y, vec![2, 1]).unwrap();
        let s = tape.matmul(w, y2).unwrap();
        let s = tape.reshape(s, vec![1]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(p.borrow().grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let p = shared(Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.frozen(&p);
        let y = tape.scale(a, 2.0);
        tape.backward(y).unwrap();
        assert!(p.borrow().grad().is_none(), "frozen binding must never write a grad");
    }

    #[test]
    fn clear_releases_everything() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::zeros(vec![4]));
        let _ = tape.tanh(x);
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn batch_slice_picks_block_and_scatters_grad() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s1 = tape.batch_slice(x, 1).unwrap();
        assert_eq!(tape.data(s1), &[4.0, 5.0, 6.0]);
        let s = tape.slice(s1, 2, 1).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
