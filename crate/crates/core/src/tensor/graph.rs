use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Log,
    Exp,
    Abs,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Vector-Jacobian product of a custom op: output gradient in, one gradient
/// buffer per input out.
pub type Vjp = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Clamp(Var, f64, f64),
    Reduce {
        input: Var,
        kind: ReduceKind,
        /// output flat index for every input element (sum/mean)
        /// or the argmax input index for every output element (max)
        map: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SampleBilinear {
        input: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: Vjp,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only tape of operations. Record order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a value. Only leaves with `requires_grad` accumulate gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(id)
    }

    /// Record `op` only when some input carries gradient.
    fn record(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op() } else { Op::Leaf };
        self.push(value, rg, op)
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return shape_err(format!(
                "{kind:?}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinaryOp::Add => at(i) + bt(i),
                BinaryOp::Sub => at(i) - bt(i),
                BinaryOp::Mul => at(i) * bt(i),
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[a, b], || Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let src = self.value(a);
        match kind {
            UnaryOp::Log if src.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain("log of a non-positive entry".into()));
            }
            UnaryOp::Sqrt if src.data().iter().any(|&v| v < 0.0) => {
                return Err(Error::Domain("sqrt of a negative entry".into()));
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryOp::Relu => |v| v.max(0.0),
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Log => f64::ln,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Abs => f64::abs,
            UnaryOp::Sqrt => f64::sqrt,
        };
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.record(value, &[a], || Op::Unary(kind, a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a).expect("abs is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v + c).collect(),
        };
        self.record(value, &[a], || Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v * c).collect(),
        };
        self.record(value, &[a], || Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        self.record(value, &[a], || Op::Clamp(a, lo, hi))
    }

    // ---- reductions and shape ----------------------------------------

    /// Reduce over `axes` (empty slice reduces every axis). Reduced axes are removed.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        let ndim = shape.len();
        let mut reduced = vec![axes.is_empty(); ndim];
        for &ax in axes {
            if ax >= ndim {
                return shape_err(format!("axis {ax} out of range for shape {shape:?}"));
            }
            if reduced[ax] {
                return shape_err(format!("axis {ax} repeated"));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_n: usize = out_shape.iter().product();
        let count = if out_n == 0 { 0 } else { src.numel() / out_n };

        // output flat index for every input element
        let mut out_index = Vec::with_capacity(src.numel());
        let mut idx = vec![0usize; ndim];
        for _ in 0..src.numel() {
            let mut o = 0;
            for d in 0..ndim {
                if !reduced[d] {
                    o = o * shape[d] + idx[d];
                }
            }
            out_index.push(o);
            for d in (0..ndim).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let data = src.data();
        let (out, map) = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut out = vec![0.0; out_n];
                for (i, &o) in out_index.iter().enumerate() {
                    out[o] += data[i];
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / count as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                (out, out_index)
            }
            ReduceKind::Max => {
                let mut out = vec![f64::NEG_INFINITY; out_n];
                let mut arg = vec![usize::MAX; out_n];
                for (i, &o) in out_index.iter().enumerate() {
                    if data[i] > out[o] || arg[o] == usize::MAX {
                        out[o] = data[i];
                        arg[o] = i;
                    }
                }
                (out, arg)
            }
        };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.record(value, &[a], || Op::Reduce {
            input: a,
            kind,
            map,
            count,
        }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Sum, a, &[]).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Mean, a, &[]).expect("full reduction")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.record(value, &[a], || Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let &[r, c] = src.shape() else {
            return shape_err(format!("transpose needs a matrix, got {:?}", src.shape()));
        };
        let d = src.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.record(value, &[a], || Op::Transpose(a)))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return shape_err(format!(
                "matmul needs matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        };
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} and {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(ta.data(), m, k), Mat::new(tb.data(), k, n), &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, &[a, b], || Op::MatMul(a, b)))
    }

    /// Select rows of an `[n, d]` matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let &[n, d] = src.shape() else {
            return shape_err(format!("gather_rows needs a matrix, got {:?}", src.shape()));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} of {n}")));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src.data()[r * d..(r + 1) * d]);
        }
        let value = if rows.is_empty() {
            Tensor { shape: vec![0, d], data: out }
        } else {
            Tensor::new(vec![rows.len(), d], out)?
        };
        let rows = rows.to_vec();
        Ok(self.record(value, &[a], || Op::GatherRows { input: a, rows }))
    }

    /// Stack `[n_i, d]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows needs at least one input");
        };
        let d = match self.shape(first) {
            &[_, d] => d,
            s => return shape_err(format!("concat_rows needs matrices, got {s:?}")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            match t.shape() {
                &[n, dd] if dd == d => {
                    rows += n;
                    data.extend_from_slice(t.data());
                }
                s => return shape_err(format!("concat_rows: {s:?} does not have {d} columns")),
            }
        }
        let value = Tensor {
            shape: vec![rows, d],
            data,
        };
        let inputs = parts.to_vec();
        Ok(self.record(value, parts, || Op::ConcatRows(inputs)))
    }

    // ---- spatial ----------------------------------------------------

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`, optional `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let &[c_in, h, w] = ti.shape() else {
            return shape_err(format!("conv2d input must be [C,H,W], got {:?}", ti.shape()));
        };
        let &[c_out, kc, k, k2] = tk.shape() else {
            return shape_err(format!("conv2d kernel must be 4-D, got {:?}", tk.shape()));
        };
        if kc != c_in {
            return shape_err(format!("conv2d channel mismatch: input {c_in}, kernel {kc}"));
        }
        if k != k2 || k % 2 == 0 {
            return shape_err(format!("conv2d kernel must be square and odd, got {k}x{k2}"));
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return shape_err("conv2d window does not fit");
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return shape_err(format!("conv2d bias must be [{c_out}]"));
            }
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        };
        let cols = im2col(ti.data(), &geom);
        let ckk = c_in * k * k;
        let hw = h_out * w_out;
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (o, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bd[o]);
            }
        }
        gemm(
            Mat::new(tk.data(), c_out, ckk),
            Mat::new(&cols, ckk, hw),
            &mut out,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
        let value = Tensor::new(vec![c_out, h_out, w_out], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.record(value, &inputs, || Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        }))
    }

    /// Bilinear upsampling of `[C, h, w]` by an integer factor (half-pixel centers).
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let src = self.value(input);
        let &[c, h, w] = src.shape() else {
            return shape_err(format!("upsample input must be [C,H,W], got {:?}", src.shape()));
        };
        if factor == 0 {
            return shape_err("upsample factor must be positive");
        }
        let (ho, wo) = (h * factor, w * factor);
        let ys = axis_taps(h, factor);
        let xs = axis_taps(w, factor);
        let d = src.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                    dst[oy * wo + ox] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.record(value, &[input], || Op::Upsample { input, factor }))
    }

    /// Bilinear samples of a `[D, h, w]` map at `(u, v)` map coordinates,
    /// clamped to the map; returns `[n, D]`.
    pub fn sample_bilinear(&mut self, input: Var, points: &[(f64, f64)]) -> Result<Var> {
        let src = self.value(input);
        let &[dim, h, w] = src.shape() else {
            return shape_err(format!("sampling needs a [D,h,w] map, got {:?}", src.shape()));
        };
        let taps: Vec<[(usize, f64); 4]> = points
            .iter()
            .map(|&(u, v)| bilinear_taps(u, v, w, h))
            .collect();
        let d = src.data();
        let hw = h * w;
        let mut out = Vec::with_capacity(points.len() * dim);
        for t in &taps {
            for ch in 0..dim {
                let plane = &d[ch * hw..(ch + 1) * hw];
                out.push(t.iter().map(|&(i, wt)| plane[i] * wt).sum());
            }
        }
        let value = Tensor {
            shape: vec![points.len(), dim],
            data: out,
        };
        Ok(self.record(value, &[input], || Op::SampleBilinear { input, taps }))
    }

    /// L2-normalize each row of `[n, d]`; an all-zero row becomes the uniform unit vector.
    pub fn normalize_rows(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let &[n, d] = src.shape() else {
            return shape_err(format!("normalize_rows needs a matrix, got {:?}", src.shape()));
        };
        let mut out = src.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(d.max(1)).take(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                let u = 1.0 / (d as f64).sqrt();
                row.iter_mut().for_each(|v| *v = u);
            }
            norms.push(norm);
        }
        let value = Tensor {
            shape: vec![n, d],
            data: out,
        };
        Ok(self.record(value, &[input], || Op::NormalizeRows { input, norms }))
    }

    /// Record an operation whose forward value and vector-Jacobian product
    /// are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: Vjp) -> Var {
        let inputs_v = inputs.to_vec();
        self.record(value, inputs, move || Op::Custom {
            inputs: inputs_v,
            vjp,
        })
    }

    // ---- backward ---------------------------------------------------

    /// Accumulate d`loss`/d`leaf` into every gradient-carrying leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).shape().is_empty() {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_updates.push((id, g));
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        for (id, g) in leaf_updates {
            match &mut self.nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Binary(kind, a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let get = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let (a, b) = (*a, *b);
                if let Some(ga) = slot(nodes, grads, a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let c = match kind {
                            BinaryOp::Add | BinaryOp::Sub => gi,
                            BinaryOp::Mul => gi * get(vb, i),
                        };
                        if ga.len() == 1 {
                            ga[0] += c;
                        } else {
                            ga[i] += c;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let c = match kind {
                            BinaryOp::Add => gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * get(va, i),
                        };
                        if gb.len() == 1 {
                            gb[0] += c;
                        } else {
                            gb[i] += c;
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = nodes[a.0].value.data();
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Log => 1.0 / x[i],
                            UnaryOp::Exp => y[i],
                            UnaryOp::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sqrt => {
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::MulScalar(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = nodes[a.0].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Reduce {
                input,
                kind,
                map,
                count,
            } => {
                if let Some(ga) = slot(nodes, grads, *input) {
                    match kind {
                        ReduceKind::Sum => {
                            for (i, &o) in map.iter().enumerate() {
                                ga[i] += g[o];
                            }
                        }
                        ReduceKind::Mean => {
                            let inv = 1.0 / *count as f64;
                            for (i, &o) in map.iter().enumerate() {
                                ga[i] += g[o] * inv;
                            }
                        }
                        ReduceKind::Max => {
                            for (o, &i) in map.iter().enumerate() {
                                ga[i] += g[o];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let &[r, c] = nodes[a.0].value.shape() else { unreachable!() };
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (a, b) = (*a, *b);
                if let Some(ga) = slot(nodes, grads, a) {
                    gemm(Mat::new(g, m, n), Mat::new(tb.data(), k, n).t(), ga, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    gemm(Mat::new(ta.data(), m, k).t(), Mat::new(g, m, n), gb, 1.0);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let ckk = geom.c_in * geom.k * geom.k;
                let hw = geom.h_out * geom.w_out;
                if let Some(gk) = slot(nodes, grads, *kernel) {
                    gemm(Mat::new(g, geom.c_out, hw), Mat::new(cols, ckk, hw).t(), gk, 1.0);
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for (o, chunk) in g.chunks(hw).enumerate() {
                            gb[o] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                if nodes[input.0].requires_grad {
                    let kd = nodes[kernel.0].value.data();
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(
                        Mat::new(kd, geom.c_out, ckk).t(),
                        Mat::new(g, geom.c_out, hw),
                        &mut dcols,
                        0.0,
                    );
                    if let Some(gi) = slot(nodes, grads, *input) {
                        col2im(&dcols, geom, gi);
                    }
                }
            }
            Op::Upsample { input, factor } => {
                let &[c, h, w] = nodes[input.0].value.shape() else { unreachable!() };
                let (ho, wo) = (h * factor, w * factor);
                let ys = axis_taps(h, *factor);
                let xs = axis_taps(w, *factor);
                if let Some(gi) = slot(nodes, grads, *input) {
                    for ch in 0..c {
                        let src = &g[ch * ho * wo..(ch + 1) * ho * wo];
                        let dst = &mut gi[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                                let v = src[oy * wo + ox];
                                dst[y0 * w + x0] += v * (1.0 - ty) * (1.0 - tx);
                                dst[y0 * w + x1] += v * (1.0 - ty) * tx;
                                dst[y1 * w + x0] += v * ty * (1.0 - tx);
                                dst[y1 * w + x1] += v * ty * tx;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { input, rows } => {
                let d = nodes[input.0].value.shape()[1];
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gi[r * d + j] += g[k * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(inputs) => {
                let mut offset = 0;
                for v in inputs {
                    let n = nodes[v.0].value.numel();
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::SampleBilinear { input, taps } => {
                let &[dim, h, w] = nodes[input.0].value.shape() else { unreachable!() };
                let hw = h * w;
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (p, t) in taps.iter().enumerate() {
                        for ch in 0..dim {
                            let gv = g[p * dim + ch];
                            for &(i, wt) in t {
                                gi[ch * hw + i] += gv * wt;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                let d = node.value.shape()[1];
                let y = node.value.data();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm <= 1e-12 {
                            continue;
                        }
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gi[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Custom { inputs, vjp } => {
                let parts = vjp(g);
                for (v, part) in inputs.iter().zip(parts) {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv.iter_mut().zip(&part).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Source taps `(i0, i1, t)` for each output index of a half-pixel-center upsample.
fn axis_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Four `(flat index, weight)` taps for bilinear sampling at `(u, v)`.
pub(crate) fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = u - x0 as f64;
    let ty = v - y0 as f64;
    [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ]
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * hw];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let hw = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
