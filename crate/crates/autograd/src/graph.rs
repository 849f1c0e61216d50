use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis-aligned region in input-image pixels, `(left, top, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolRegion {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
    ChwToRows(Var),
    Reshape(Var),
    RoiAlign {
        input: Var,
        regions: Vec<PoolRegion>,
        scale: f64,
        bins: usize,
    },
    LogSoftmax(Var),
    Softmax(Var),
    WeightedNll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        row_weights: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    L2Norm(Var),
    ClipRowNorms(Var, f64),
    Grl(Var, f64),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that gradients can be propagated back
/// to its leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

const ROI_SAMPLES: usize = 2;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x * s).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = va.cols();
        assert_eq!(vb.len(), n, "add_bias: width mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(&[va.rows(), n], data);
        let rg = self.rg(&[a, bias]);
        self.push(t, Op::AddBias(a, bias), rg)
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_bias(h, bias)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x.max(0.0)).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let vi = self.value(input);
        let vw = self.value(weight);
        let (c, h, w) = chw(vi);
        let ws = vw.shape();
        assert_eq!(ws.len(), 4, "conv2d: weight must be [O, C, k, k]");
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d: channel mismatch {} vs {}", ws[1], c);
        assert_eq!(self.value(bias).len(), o, "conv2d: bias length");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cols = im2col(vi.data(), c, h, w, k, stride, pad, ho, wo);
        let p = ho * wo;
        let mut out = vec![0.0; o * p];
        gemm(o, c * k * k, p, vw.data(), false, &cols, false, &mut out);
        let vb = self.value(bias).data();
        for (oc, row) in out.chunks_mut(p).enumerate() {
            for x in row.iter_mut() {
                *x += vb[oc];
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        let cols = if rg { cols } else { Vec::new() };
        self.push(
            Tensor::new(&[o, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// `[C, H, W] -> [1, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (c, h, w) = chw(va);
        let inv = 1.0 / (h * w) as f64;
        let data = va
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() * inv)
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[1, c], data), Op::GlobalAvgPool(a), rg)
    }

    /// `[C, H, W] -> [H*W, C]`, one row per spatial cell.
    pub fn chw_to_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (c, h, w) = chw(va);
        let p = h * w;
        let mut data = vec![0.0; p * c];
        for ch in 0..c {
            for i in 0..p {
                data[i * c + ch] = va.data()[ch * p + i];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[p, c], data), Op::ChwToRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Bilinear region pooling of a `[C, H, W]` map into `bins x bins` cells per
    /// region, averaging a 2x2 sample grid per cell. Regions are given in input
    /// pixels; `scale` maps pixels to feature cells. Output is
    /// `[R, C * bins * bins]`.
    pub fn roi_align(&mut self, input: Var, regions: &[PoolRegion], scale: f64, bins: usize) -> Var {
        let vi = self.value(input);
        let (c, h, w) = chw(vi);
        let width = c * bins * bins;
        let mut out = vec![0.0; regions.len() * width];
        for (r, region) in regions.iter().enumerate() {
            let row = &mut out[r * width..(r + 1) * width];
            for_each_roi_sample(region, scale, bins, h, w, |cell, taps| {
                for ch in 0..c {
                    let plane = &vi.data()[ch * h * w..(ch + 1) * h * w];
                    let mut acc = 0.0;
                    for &(idx, wt) in taps {
                        acc += plane[idx] * wt;
                    }
                    row[ch * bins * bins + cell] += acc;
                }
            });
        }
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(&[regions.len(), width], out),
            Op::RoiAlign {
                input,
                regions: regions.to_vec(),
                scale,
                bins,
            },
            rg,
        )
    }

    /// Row-wise log-softmax of an `[R, C]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(&[va.rows(), n], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Row-wise softmax of an `[R, C]` matrix.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(&[va.rows(), n], data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// `-sum_i w_i * logp[i, t_i]` over the rows of a log-probability matrix.
    pub fn weighted_nll(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Var {
        let vl = self.value(logp);
        let n = vl.cols();
        assert_eq!(targets.len(), vl.rows(), "weighted_nll: one target per row");
        assert_eq!(weights.len(), vl.rows(), "weighted_nll: one weight per row");
        let mut s = 0.0;
        for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
            assert!(t < n, "weighted_nll: target {t} out of range {n}");
            if wt != 0.0 {
                s -= wt * vl.data()[i * n + t];
            }
        }
        let rg = self.rg(&[logp]);
        self.push(
            Tensor::scalar(s),
            Op::WeightedNll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood over all rows.
    pub fn nll_mean(&mut self, logp: Var, targets: &[usize]) -> Var {
        let r = targets.len();
        let w = vec![1.0 / r as f64; r];
        self.weighted_nll(logp, targets, &w)
    }

    /// `sum_r w_r * sum_c smoothL1(pred[r, c] - target[r, c])` with unit
    /// transition point.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, row_weights: &[f64]) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "smooth_l1: shape mismatch");
        assert_eq!(row_weights.len(), vp.rows());
        let n = vp.cols();
        let mut s = 0.0;
        for (r, &wt) in row_weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for c in 0..n {
                let d = vp.data()[r * n + c] - target.data()[r * n + c];
                s += wt * smooth_l1_value(d);
            }
        }
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(s),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                row_weights: row_weights.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[R, C] -> [1, C]` column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        assert!(r > 0, "mean_rows on empty matrix");
        let mut data = vec![0.0; c];
        for row in va.data().chunks(c) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= r as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[1, c], data), Op::MeanRows(a), rg)
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// to be zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::L2Norm(a), rg)
    }

    /// Rows whose Euclidean norm exceeds `max_norm` are rescaled to that
    /// norm; shorter rows pass through unchanged.
    pub fn clip_row_norms(&mut self, a: Var, max_norm: f64) -> Var {
        let v = self.value(a);
        let c = v.cols().max(1);
        let mut d = v.data().to_vec();
        for row in d.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > max_norm {
                row.iter_mut().for_each(|x| *x *= max_norm / n);
            }
        }
        let t = Tensor::new(v.shape(), d);
        let rg = self.rg(&[a]);
        self.push(t, Op::ClipRowNorms(a, max_norm), rg)
    }

    /// Gradient reversal: the forward value is an exact copy of `a`; the
    /// backward pass multiplies incoming gradients by `-lambda`.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let t = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(t, Op::Grl(a, lambda), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows: width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(&[rows, c], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(&[idx.len(), c], data),
            Op::SelectRows(a, idx.to_vec()),
            rg,
        )
    }

    /// Reverse-mode sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = g.data().iter().map(|x| -x).collect();
                self.accumulate(grads, *b, Tensor::new(g.shape(), neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut da);
                    self.accumulate(grads, *a, Tensor::new(va.shape(), da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vb.shape(), db));
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone().reshaped(self.value(*a).shape()));
                if self.requires_grad(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(&shape, db));
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let vi = self.value(*input);
                let vw = self.value(*weight);
                let (c, h, w) = chw(vi);
                let (o, k) = (vw.shape()[0], vw.shape()[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[1], os[2]);
                let p = ho * wo;
                let ck = c * k * k;
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; o * ck];
                    gemm(o, p, ck, g.data(), false, cols, true, &mut dw);
                    self.accumulate(grads, *weight, Tensor::new(vw.shape(), dw));
                }
                if self.requires_grad(*bias) {
                    let db = g.data().chunks(p).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(&[o], db));
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; ck * p];
                    gemm(ck, o, p, vw.data(), true, g.data(), false, &mut dcols);
                    let dx = col2im(&dcols, c, h, w, k, *stride, *pad, ho, wo);
                    self.accumulate(grads, *input, Tensor::new(vi.shape(), dx));
                }
            }
            Op::GlobalAvgPool(a) => {
                let va = self.value(*a);
                let (_, h, w) = chw(va);
                let inv = 1.0 / (h * w) as f64;
                let mut d = Vec::with_capacity(va.len());
                for &gc in g.data() {
                    d.extend(std::iter::repeat(gc * inv).take(h * w));
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::ChwToRows(a) => {
                let va = self.value(*a);
                let (c, h, w) = chw(va);
                let p = h * w;
                let mut d = vec![0.0; c * p];
                for ch in 0..c {
                    for i in 0..p {
                        d[ch * p + i] = g.data()[i * c + ch];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshaped(self.value(*a).shape()));
            }
            Op::RoiAlign {
                input,
                regions,
                scale,
                bins,
            } => {
                let vi = self.value(*input);
                let (c, h, w) = chw(vi);
                let width = c * bins * bins;
                let mut d = vec![0.0; vi.len()];
                for (r, region) in regions.iter().enumerate() {
                    let grow = &g.data()[r * width..(r + 1) * width];
                    for_each_roi_sample(region, *scale, *bins, h, w, |cell, taps| {
                        for ch in 0..c {
                            let go = grow[ch * bins * bins + cell];
                            if go == 0.0 {
                                continue;
                            }
                            let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                            for &(idx, wt) in taps {
                                plane[idx] += go * wt;
                            }
                        }
                    });
                }
                self.accumulate(grads, *input, Tensor::new(vi.shape(), d));
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut d = g.data().to_vec();
                for (drow, lrow) in d.chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let gs: f64 = drow.iter().sum();
                    for (x, l) in drow.iter_mut().zip(lrow) {
                        *x -= l.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape(), d));
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut d = g.data().to_vec();
                for (drow, srow) in d.chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(srow).map(|(x, s)| x * s).sum();
                    for (x, s) in drow.iter_mut().zip(srow) {
                        *x = s * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape(), d));
            }
            Op::WeightedNll {
                logp,
                targets,
                weights,
            } => {
                let vl = self.value(*logp);
                let n = vl.cols();
                let g0 = g.item();
                let mut d = vec![0.0; vl.len()];
                for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    d[i * n + t] = -wt * g0;
                }
                self.accumulate(grads, *logp, Tensor::new(vl.shape(), d));
            }
            Op::SmoothL1 {
                pred,
                target,
                row_weights,
            } => {
                let vp = self.value(*pred);
                let n = vp.cols();
                let g0 = g.item();
                let mut d = vec![0.0; vp.len()];
                for (r, &wt) in row_weights.iter().enumerate() {
                    for c in 0..n {
                        let diff = vp.data()[r * n + c] - target[r * n + c];
                        d[r * n + c] = g0 * wt * diff.clamp(-1.0, 1.0);
                    }
                }
                self.accumulate(grads, *pred, Tensor::new(vp.shape(), d));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(va.shape(), g.item()));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let r = va.rows();
                let mut d = Vec::with_capacity(va.len());
                for _ in 0..r {
                    d.extend(g.data().iter().map(|x| x / r as f64));
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::L2Norm(a) => {
                let va = self.value(*a);
                let norm = node.value.item();
                let d = if norm > 0.0 {
                    va.data().iter().map(|x| g.item() * x / norm).collect()
                } else {
                    vec![0.0; va.len()]
                };
                self.accumulate(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::ClipRowNorms(a, max_norm) => {
                let va = self.value(*a);
                let c = va.cols().max(1);
                let mut d = g.data().to_vec();
                for (x, out) in va.data().chunks(c).zip(d.chunks_mut(c)) {
                    let s = x.iter().map(|v| v * v).sum::<f64>();
                    let n = s.sqrt();
                    if n > *max_norm {
                        let xg: f64 = x.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = max_norm * (out[j] / n - x[j] * xg / (n * s));
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::Grl(a, lambda) => {
                let d = g.data().iter().map(|x| -lambda * x).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.len();
                    if self.requires_grad(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(vp.shape(), d));
                    }
                    offset += len;
                }
            }
            Op::SelectRows(a, idx) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut d = vec![0.0; va.len()];
                for (j, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        d[i * c + k] += g.data()[j * c + k];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), d));
            }
        }
    }
}

/// Smooth-L1 with unit transition point: `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1_value(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

/// `c = op(a) * op(b)` where `op` optionally transposes. Shapes are given
/// post-transpose: `op(a)` is `[m, k]`, `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c * k * k * p];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ch * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// Calls `f(cell, taps)` for every bin of `region`, where `taps` are the
/// `(plane index, weight)` pairs whose weighted sum gives that bin's value.
fn for_each_roi_sample<F>(region: &PoolRegion, scale: f64, bins: usize, h: usize, w: usize, mut f: F)
where
    F: FnMut(usize, &[(usize, f64)]),
{
    let x0 = region.x * scale - 0.5;
    let y0 = region.y * scale - 0.5;
    let bw = region.w * scale / bins as f64;
    let bh = region.h * scale / bins as f64;
    let norm = 1.0 / (ROI_SAMPLES * ROI_SAMPLES) as f64;
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4 * ROI_SAMPLES * ROI_SAMPLES);
    for by in 0..bins {
        for bx in 0..bins {
            taps.clear();
            for sy in 0..ROI_SAMPLES {
                let y = y0 + bh * (by as f64 + (sy as f64 + 0.5) / ROI_SAMPLES as f64);
                for sx in 0..ROI_SAMPLES {
                    let x = x0 + bw * (bx as f64 + (sx as f64 + 0.5) / ROI_SAMPLES as f64);
                    bilinear_taps(y, x, h, w, norm, &mut taps);
                }
            }
            f(by * bins + bx, &taps);
        }
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut yl, mut xl) = (y.floor() as usize, x.floor() as usize);
    let (yh, xh, ly, lx);
    if yl >= h - 1 {
        yl = h - 1;
        yh = h - 1;
        ly = 0.0;
    } else {
        yh = yl + 1;
        ly = y - yl as f64;
    }
    if xl >= w - 1 {
        xl = w - 1;
        xh = w - 1;
        lx = 0.0;
    } else {
        xh = xl + 1;
        lx = x - xl as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((yl * w + xl, hy * hx * scale));
    taps.push((yl * w + xh, hy * lx * scale));
    taps.push((yh * w + xl, ly * hx * scale));
    taps.push((yh * w + xh, ly * lx * scale));
}
