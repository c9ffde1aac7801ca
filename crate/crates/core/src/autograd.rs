//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are borrowed rather than copied, so building a graph per sample is cheap.
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar node with respect to every node that requires one.

use std::borrow::Cow;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor; a rank-1 tensor is one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("expected a rank-1 or rank-2 tensor, got shape {s:?}"),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Region-of-interest pooling geometry, in feature-map coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub grid: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    RoiAlign(Var, RoiSpec),
    WeightedBce {
        scores: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
        eps: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        beta: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the differentiated node with respect to `v`; `None` when
    /// `v` does not influence it or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// An owned leaf that receives a gradient (e.g. input pixels).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        self.derived(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let av = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.derived(Tensor::matrix(n, m, out), Op::Transpose(a), &[a])
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape.clone();
        self.derived(Tensor::new(shape, data), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(row).len(), n, "row broadcast width");
        let av = &self.value(a).data;
        let rv = &self.value(row).data;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(av[i * n..(i + 1) * n].iter().zip(rv).map(|(x, r)| f(*x, *r)));
        }
        let shape = self.value(a).shape.clone();
        self.derived(Tensor::new(shape, data), op, &[a, row])
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * s).collect();
        let shape = t.shape.clone();
        self.derived(Tensor::new(shape, data), Op::Scale(a, s), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| f(*x)).collect();
        let shape = t.shape.clone();
        self.derived(Tensor::new(shape, data), op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let av = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let shape = self.value(a).shape.clone();
        self.derived(Tensor::new(shape, out), Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without an
    /// affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.value(a).dims2();
        let av = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let shape = self.value(a).shape.clone();
        self.derived(Tensor::new(shape, out), Op::LayerNormRows(a, eps), &[a])
    }

    /// Scales every row to unit Euclidean norm (rows of zeros stay zero).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let av = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        let shape = self.value(a).shape.clone();
        self.derived(Tensor::new(shape, out), Op::L2NormalizeRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.value(*p).dims2();
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data[i * w..(i + 1) * w]);
            }
        }
        self.derived(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (r, c) = self.value(*p).dims2();
            assert_eq!(c, n, "concat_rows width mismatch");
            out.extend_from_slice(&self.value(*p).data);
            m += r;
        }
        self.derived(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let av = &self.value(a).data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        self.derived(Tensor::matrix(m, len, out), Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.value(a).data[start * n..(start + len) * n].to_vec();
        self.derived(Tensor::matrix(len, n, out), Op::SliceRows(a, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a);
        assert_eq!(shape.iter().product::<usize>(), t.len(), "reshape size");
        let data = t.data.clone();
        self.derived(Tensor::new(shape, data), Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// 2D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights and
    /// `[O]` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (c, h, w) = dims3(self.shape(input));
        let ws = self.shape(weight).to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv2d weight shape {ws:?}");
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(self.value(bias).len(), o, "conv2d bias");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..c {
                let xin = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *ov += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.derived(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &[input, weight, bias],
        )
    }

    /// Bilinear RoI pooling of a `[C, H, W]` map onto a `grid × grid` lattice
    /// with `samples × samples` points per bin; output `[C * grid * grid]`.
    pub fn roi_align(&mut self, input: Var, spec: RoiSpec) -> Var {
        let (c, h, w) = dims3(self.shape(input));
        let x = &self.value(input).data;
        let g = spec.grid;
        let mut out = vec![0.0; c * g * g];
        for_each_roi_tap(&spec, h, w, |bin, idx, weight| {
            for ch in 0..c {
                out[ch * g * g + bin] += weight * x[ch * h * w + idx];
            }
        });
        self.derived(Tensor::vector(out), Op::RoiAlign(input, spec), &[input])
    }

    /// Weighted mean binary cross-entropy of probabilities `scores` against
    /// `labels`, with scores clamped to `[eps, 1 - eps]`.
    pub fn weighted_bce(&mut self, scores: Var, labels: Vec<f64>, weights: Vec<f64>, eps: f64) -> Var {
        let s = &self.value(scores).data;
        assert_eq!(s.len(), labels.len(), "bce label count");
        assert_eq!(s.len(), weights.len(), "bce weight count");
        let n = s.len() as f64;
        let loss = s
            .iter()
            .zip(&labels)
            .zip(&weights)
            .map(|((p, y), wt)| {
                let p = p.clamp(eps, 1.0 - eps);
                -wt * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        self.derived(
            Tensor::scalar(loss),
            Op::WeightedBce {
                scores,
                labels,
                weights,
                eps,
            },
            &[scores],
        )
    }

    /// Smooth-L1 between rows of `pred` and `target` (same shape), summed over
    /// columns and averaged over the masked rows.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f64>, mask: Vec<bool>, beta: f64) -> Var {
        let (m, n) = self.value(pred).dims2();
        assert_eq!(target.len(), m * n, "smooth_l1 target size");
        assert_eq!(mask.len(), m, "smooth_l1 mask size");
        let p = &self.value(pred).data;
        let count = mask.iter().filter(|b| **b).count().max(1) as f64;
        let mut loss = 0.0;
        for i in (0..m).filter(|i| mask[*i]) {
            for j in 0..n {
                let d = (p[i * n + j] - target[i * n + j]).abs();
                loss += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            }
        }
        self.derived(
            Tensor::scalar(loss / count),
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
            },
            &[pred],
        )
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g);
    }

    fn propagate(&self, op: &Op, out: &Tensor, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gbv += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.accumulate(grads, *a, |g| {
                    for ((x, y), go) in g.iter_mut().zip(bv).zip(gout) {
                        *x += y * go;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((x, y), go) in g.iter_mut().zip(av).zip(gout) {
                        *x += y * go;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.value(*a).dims2();
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *row, |g| {
                    for i in 0..m {
                        add_into(g, &gout[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (m, n) = self.value(*a).dims2();
                let av = &self.value(*a).data;
                let rv = &self.value(*row).data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[i * n + j] * rv[j];
                        }
                    }
                });
                self.accumulate(grads, *row, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += gout[i * n + j] * av[i * n + j];
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += s * y));
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                self.accumulate(grads, *a, |g| {
                    for ((x, inp), go) in g.iter_mut().zip(av).zip(gout) {
                        if *inp > 0.0 {
                            *x += go;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |g| {
                    for ((x, y), go) in g.iter_mut().zip(&out.data).zip(gout) {
                        *x += go * y * (1.0 - y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2();
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        let y = &out.data[i * n..(i + 1) * n];
                        let go = &gout[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[i * n + j] += y[j] * (go[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let (m, n) = out.dims2();
                let av = &self.value(*a).data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y = &out.data[i * n..(i + 1) * n];
                        let go = &gout[i * n..(i + 1) * n];
                        let mean_go = go.iter().sum::<f64>() / n as f64;
                        let mean_goy = go.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            g[i * n + j] += inv * (go[j] - mean_go - y[j] * mean_goy);
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = out.dims2();
                let av = &self.value(*a).data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                        let y = &out.data[i * n..(i + 1) * n];
                        let go = &gout[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[i * n + j] += (go[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    self.accumulate(grads, *p, |g| {
                        for i in 0..m {
                            add_into(&mut g[i * w..(i + 1) * w], &gout[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |g| add_into(g, &gout[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).dims2().1;
                let (m, len) = out.dims2();
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        add_into(&mut g[i * n + start..i * n + start + len], &gout[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).dims2().1;
                self.accumulate(grads, *a, |g| add_into(&mut g[start * n..start * n + gout.len()], gout));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
            }
            Op::Sum(a) => {
                let go = gout[0];
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += go));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(*input, *weight, *bias, *stride, *pad, out, gout, grads),
            Op::RoiAlign(input, spec) => {
                let (c, h, w) = dims3(self.shape(*input));
                let g2 = spec.grid * spec.grid;
                self.accumulate(grads, *input, |g| {
                    for_each_roi_tap(spec, h, w, |bin, idx, weight| {
                        for ch in 0..c {
                            g[ch * h * w + idx] += weight * gout[ch * g2 + bin];
                        }
                    });
                });
            }
            Op::WeightedBce {
                scores,
                labels,
                weights,
                eps,
            } => {
                let s = &self.value(*scores).data;
                let n = s.len() as f64;
                let go = gout[0];
                self.accumulate(grads, *scores, |g| {
                    for j in 0..s.len() {
                        let p = s[j];
                        if p <= *eps || p >= 1.0 - eps {
                            continue;
                        }
                        let y = labels[j];
                        g[j] += go * -weights[j] * (y / p - (1.0 - y) / (1.0 - p)) / n;
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
            } => {
                let (m, n) = self.value(*pred).dims2();
                let p = &self.value(*pred).data;
                let count = mask.iter().filter(|b| **b).count().max(1) as f64;
                let go = gout[0];
                self.accumulate(grads, *pred, |g| {
                    for i in (0..m).filter(|i| mask[*i]) {
                        for j in 0..n {
                            let d = p[i * n + j] - target[i * n + j];
                            let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                            g[i * n + j] += go * dd / count;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        out: &Tensor,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (c, h, w) = dims3(self.shape(input));
        let (o, ho, wo) = dims3(&out.shape);
        let k = self.shape(weight)[2];
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        self.accumulate(grads, bias, |gb| {
            for oc in 0..o {
                gb[oc] += gout[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
            }
        });
        let taps = |f: &mut dyn FnMut(usize, usize, usize, usize, usize, usize)| {
            for oc in 0..o {
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oc * c + ic) * k + ky) * k + kx;
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                f(oc, ic, widx, oy, iy as usize, kx);
                            }
                        }
                    }
                }
            }
        };
        self.accumulate(grads, weight, |gw| {
            taps(&mut |oc, ic, widx, oy, iy, kx| {
                let grow = &gout[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                let xrow = &x[(ic * h + iy) * w..(ic * h + iy + 1) * w];
                let mut acc = 0.0;
                for (ox, gv) in grow.iter().enumerate() {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        acc += gv * xrow[ix as usize];
                    }
                }
                gw[widx] += acc;
            });
        });
        self.accumulate(grads, input, |gx| {
            taps(&mut |oc, ic, widx, oy, iy, kx| {
                let wv = wt[widx];
                let grow = &gout[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                let xrow = &mut gx[(ic * h + iy) * w..(ic * h + iy + 1) * w];
                for (ox, gv) in grow.iter().enumerate() {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        xrow[ix as usize] += wv * gv;
                    }
                }
            });
        });
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        s => panic!("expected a [C, H, W] tensor, got shape {s:?}"),
    }
}

/// Visits every bilinear tap of the RoI lattice: `(bin, flat pixel index,
/// weight)`. Map cell `i` is centred at coordinate `i + 0.5`; samples more
/// than one cell outside the map contribute nothing, others are clamped.
fn for_each_roi_tap(spec: &RoiSpec, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
    let g = spec.grid;
    let s = spec.samples;
    let bin_w = (spec.x1 - spec.x0) / g as f64;
    let bin_h = (spec.y1 - spec.y0) / g as f64;
    let norm = 1.0 / (s * s) as f64;
    for gy in 0..g {
        for gx in 0..g {
            let bin = gy * g + gx;
            for sy in 0..s {
                let yc = spec.y0 + bin_h * (gy as f64 + (sy as f64 + 0.5) / s as f64) - 0.5;
                for sx in 0..s {
                    let xc = spec.x0 + bin_w * (gx as f64 + (sx as f64 + 0.5) / s as f64) - 0.5;
                    bilinear_taps(xc, yc, w, h, |idx, wt| f(bin, idx, wt * norm));
                }
            }
        }
    }
}

fn bilinear_taps(x: f64, y: f64, w: usize, h: usize, mut f: impl FnMut(usize, f64)) {
    if x < -1.0 || x > w as f64 || y < -1.0 || y > h as f64 {
        return;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    f(y0 * w + x0, (1.0 - ly) * (1.0 - lx));
    f(y0 * w + x1, (1.0 - ly) * lx);
    f(y1 * w + x0, ly * (1.0 - lx));
    f(y1 * w + x1, ly * lx);
}
