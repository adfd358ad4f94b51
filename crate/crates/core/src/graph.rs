//! Reverse-mode autodiff over dense `f64` arrays.
//!
//! A [`Graph`] is a define-by-run tape: forward calls append nodes and compute
//! values eagerly, [`Graph::backward`] walks the tape in reverse. The op set
//! is exactly what the segmentation network and its losses need. Convolution,
//! matmul and softmax route through [`crate::kernels`]; cheap elementwise ops
//! run inline via ndarray.

use ndarray::{ArrayD, IxDyn};

use crate::kernels;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Reshape(Var),
    Transpose2(Var),
    ConcatAx0(Var, Var),
    ReplicatePad(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MatMul(Var, Var),
    SoftmaxRows(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar root with respect to graph nodes.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, if it was reached and requires grad.
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, taking ownership.
    pub fn take(&mut self, var: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

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

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Min(a, b)
            | Op::Max(a, b)
            | Op::ConcatAx0(a, b)
            | Op::MatMul(a, b) => self.ng(*a) || self.ng(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Ln(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Transpose2(a)
            | Op::ReplicatePad(a, _)
            | Op::SoftmaxRows(a) => self.ng(*a),
            Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => {
                self.ng(*x) || self.ng(*w) || b.map_or(false, |b| self.ng(b))
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        self.val(v)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.val(v);
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("scalar node")
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) * self.val(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) / self.val(b);
        self.push(v, Op::Div(a, b))
    }

    /// Elementwise minimum; ties split the gradient evenly.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.val(a).clone();
        v.zip_mut_with(self.val(b), |x, &y| *x = x.min(y));
        self.push(v, Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.val(a).clone();
        v.zip_mut_with(self.val(b), |x, &y| *x = x.max(y));
        self.push(v, Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.val(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    // -- reductions / shape ------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::Sum(a),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .val(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Transpose of a 2-D node.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self.val(a).t().as_standard_layout().into_owned();
        self.push(v, Op::Transpose2(a))
    }

    /// Concatenate along axis 0 (rows of a matrix, channels of a 3-D map).
    pub fn concat_ax0(&mut self, a: Var, b: Var) -> Var {
        let va = self.val(a).view();
        let vb = self.val(b).view();
        let v = ndarray::concatenate(ndarray::Axis(0), &[va, vb])
            .expect("concat_ax0: trailing shape mismatch");
        self.push(v, Op::ConcatAx0(a, b))
    }

    /// Replicate-pad a `(c,h,w)` map by `p` on each spatial border.
    pub fn replicate_pad(&mut self, a: Var, p: usize) -> Var {
        let x = self.val(a);
        let sh = x.shape();
        assert_eq!(sh.len(), 3, "replicate_pad expects (c,h,w)");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, h + 2 * p, w + 2 * p]));
        {
            let xs = x.as_slice().expect("contiguous");
            let os = out.as_slice_mut().expect("contiguous");
            let (hp, wp) = (h + 2 * p, w + 2 * p);
            for ci in 0..c {
                for oy in 0..hp {
                    let sy = oy.saturating_sub(p).min(h - 1);
                    for ox in 0..wp {
                        let sx = ox.saturating_sub(p).min(w - 1);
                        os[(ci * hp + oy) * wp + ox] = xs[(ci * h + sy) * w + sx];
                    }
                }
            }
        }
        self.push(out, Op::ReplicatePad(a, p))
    }

    // -- dense ops ----------------------------------------------------------

    /// 2-D convolution. `x: (c_in,h,w)`, `w: (c_out,c_in,k,k)`, `b: (c_out,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv2d: input channels");
        let (c_out, k) = (ws[0], ws[2]);
        let ho = kernels::conv_out_len(xs[1], k, stride, pad);
        let wo = kernels::conv_out_len(xs[2], k, stride, pad);
        let mut out = ArrayD::zeros(IxDyn(&[c_out, ho, wo]));
        kernels::conv2d_fwd(
            self.val(x).as_slice().unwrap(),
            (xs[0], xs[1], xs[2]),
            self.val(w).as_slice().unwrap(),
            b.map(|b| self.val(b).as_slice().unwrap()),
            c_out,
            k,
            stride,
            pad,
            out.as_slice_mut().unwrap(),
        );
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Transposed 2-D convolution. `x: (c_in,h,w)`, `w: (c_in,c_out,k,k)`.
    /// The spatial output size is explicit so odd input sizes round-trip.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[0], "conv_transpose2d: input channels");
        let (c_out, k) = (ws[1], ws[2]);
        let lo = (xs[1] - 1) * stride + k - 2 * pad;
        assert!(
            out_hw.0 >= lo && out_hw.0 < lo + stride && {
                let lw = (xs[2] - 1) * stride + k - 2 * pad;
                out_hw.1 >= lw && out_hw.1 < lw + stride
            },
            "conv_transpose2d: out size {:?} unreachable from input {:?}",
            out_hw,
            xs
        );
        let mut out = ArrayD::zeros(IxDyn(&[c_out, out_hw.0, out_hw.1]));
        kernels::convt2d_fwd(
            self.val(x).as_slice().unwrap(),
            (xs[0], xs[1], xs[2]),
            self.val(w).as_slice().unwrap(),
            b.map(|b| self.val(b).as_slice().unwrap()),
            c_out,
            k,
            stride,
            pad,
            out_hw,
            out.as_slice_mut().unwrap(),
        );
        self.push(
            out,
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let asym = self.val(a).shape().to_vec();
        let bsym = self.val(b).shape().to_vec();
        assert_eq!(asym.len(), 2);
        assert_eq!(bsym.len(), 2);
        assert_eq!(asym[1], bsym[0], "matmul inner dims");
        let (m, k, n) = (asym[0], asym[1], bsym[1]);
        let mut out = ArrayD::zeros(IxDyn(&[m, n]));
        kernels::matmul_nn(
            self.val(a).as_slice().unwrap(),
            self.val(b).as_slice().unwrap(),
            m,
            k,
            n,
            out.as_slice_mut().unwrap(),
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let sh = self.val(a).shape().to_vec();
        assert_eq!(sh.len(), 2);
        let mut out = ArrayD::zeros(IxDyn(&sh));
        kernels::softmax_rows(
            self.val(a).as_slice().unwrap(),
            sh[0],
            sh[1],
            out.as_slice_mut().unwrap(),
        );
        self.push(out, Op::SoftmaxRows(a))
    }

    // -- backward ------------------------------------------------------------

    /// Backpropagate from a scalar root. Returns per-node gradients for every
    /// node that requires grad and was reached.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.val(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.val(root).raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.step_back(i, &dy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_back(&self, i: usize, dy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, dy * self.val(*b));
                self.acc(grads, *b, dy * self.val(*a));
            }
            Op::Div(a, b) => {
                let vb = self.val(*b);
                self.acc(grads, *a, dy / vb);
                let va = self.val(*a);
                let db = dy.mapv(|x| -x) * va / (vb * vb);
                self.acc(grads, *b, db);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let take_a = matches!(self.nodes[i].op, Op::Min(..));
                let va = self.val(*a);
                let vb = self.val(*b);
                let mut da = dy.clone();
                let mut db = dy.clone();
                ndarray::Zip::from(&mut da)
                    .and(&mut db)
                    .and(va)
                    .and(vb)
                    .for_each(|da, db, &x, &y| {
                        let wa = if x == y {
                            0.5
                        } else if (x < y) == take_a {
                            1.0
                        } else {
                            0.0
                        };
                        *db = *da * (1.0 - wa);
                        *da *= wa;
                    });
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(a, c) => self.acc(grads, *a, dy.mapv(|x| x * c)),
            Op::AddScalar(a) => self.acc(grads, *a, dy.clone()),
            Op::Relu(a) => {
                let mut d = dy.clone();
                d.zip_mut_with(self.val(*a), |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, dy * y * &y.mapv(|v| 1.0 - v));
            }
            Op::Square(a) => {
                self.acc(grads, *a, dy * &self.val(*a).mapv(|x| 2.0 * x));
            }
            Op::Ln(a) => self.acc(grads, *a, dy / self.val(*a)),
            Op::Clamp(a, lo, hi) => {
                let mut d = dy.clone();
                d.zip_mut_with(self.val(*a), |g, &x| {
                    if x < *lo || x > *hi {
                        *g = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = dy.iter().next().copied().unwrap();
                self.acc(grads, *a, ArrayD::from_elem(self.val(*a).raw_dim(), s));
            }
            Op::Reshape(a) => {
                let d = dy
                    .clone()
                    .into_shape_with_order(self.val(*a).raw_dim())
                    .unwrap();
                self.acc(grads, *a, d);
            }
            Op::Transpose2(a) => {
                self.acc(grads, *a, dy.t().as_standard_layout().into_owned());
            }
            Op::ConcatAx0(a, b) => {
                let na = self.val(*a).shape()[0];
                let da = dy
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..na))
                    .to_owned();
                let db = dy
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(na..))
                    .to_owned();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::ReplicatePad(a, p) => {
                let sh = self.val(*a).shape();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                {
                    let ds = dx.as_slice_mut().unwrap();
                    let dyv = dy.as_slice().unwrap();
                    let (hp, wp) = (h + 2 * p, w + 2 * p);
                    for ci in 0..c {
                        for oy in 0..hp {
                            let sy = oy.saturating_sub(*p).min(h - 1);
                            for ox in 0..wp {
                                let sx = ox.saturating_sub(*p).min(w - 1);
                                ds[(ci * h + sy) * w + sx] += dyv[(ci * hp + oy) * wp + ox];
                            }
                        }
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.val(*x).shape().to_vec();
                let ws = self.val(*w).shape().to_vec();
                let dys = dy.shape().to_vec();
                let dims_x = (xs[0], xs[1], xs[2]);
                let dims_y = (dys[0], dys[1], dys[2]);
                let k = ws[2];
                if self.ng(*x) {
                    let mut dx = ArrayD::zeros(IxDyn(&xs));
                    kernels::conv2d_bwd_input(
                        dy.as_slice().unwrap(),
                        dims_y,
                        self.val(*w).as_slice().unwrap(),
                        dims_x,
                        k,
                        *stride,
                        *pad,
                        dx.as_slice_mut().unwrap(),
                    );
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = ArrayD::zeros(IxDyn(&ws));
                    kernels::conv2d_bwd_weight(
                        dy.as_slice().unwrap(),
                        dims_y,
                        self.val(*x).as_slice().unwrap(),
                        dims_x,
                        k,
                        *stride,
                        *pad,
                        dw.as_slice_mut().unwrap(),
                    );
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = ArrayD::zeros(IxDyn(&[dims_y.0]));
                        for o in 0..dims_y.0 {
                            db[o] = dy
                                .index_axis(ndarray::Axis(0), o)
                                .sum();
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.val(*x).shape().to_vec();
                let ws = self.val(*w).shape().to_vec();
                let dys = dy.shape().to_vec();
                let dims_x = (xs[0], xs[1], xs[2]);
                let dims_y = (dys[0], dys[1], dys[2]);
                let k = ws[2];
                if self.ng(*x) {
                    let mut dx = ArrayD::zeros(IxDyn(&xs));
                    kernels::convt2d_bwd_input(
                        dy.as_slice().unwrap(),
                        dims_y,
                        self.val(*w).as_slice().unwrap(),
                        dims_x,
                        k,
                        *stride,
                        *pad,
                        dx.as_slice_mut().unwrap(),
                    );
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = ArrayD::zeros(IxDyn(&ws));
                    kernels::convt2d_bwd_weight(
                        dy.as_slice().unwrap(),
                        dims_y,
                        self.val(*x).as_slice().unwrap(),
                        dims_x,
                        k,
                        *stride,
                        *pad,
                        dw.as_slice_mut().unwrap(),
                    );
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = ArrayD::zeros(IxDyn(&[dims_y.0]));
                        for o in 0..dims_y.0 {
                            db[o] = dy.index_axis(ndarray::Axis(0), o).sum();
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let asym = self.val(*a).shape().to_vec();
                let bsym = self.val(*b).shape().to_vec();
                let (m, k, n) = (asym[0], asym[1], bsym[1]);
                if self.ng(*a) {
                    let mut da = ArrayD::zeros(IxDyn(&asym));
                    kernels::matmul_nt(
                        dy.as_slice().unwrap(),
                        self.val(*b).as_slice().unwrap(),
                        m,
                        n,
                        k,
                        da.as_slice_mut().unwrap(),
                    );
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = ArrayD::zeros(IxDyn(&bsym));
                    kernels::matmul_tn(
                        self.val(*a).as_slice().unwrap(),
                        dy.as_slice().unwrap(),
                        m,
                        k,
                        n,
                        db.as_slice_mut().unwrap(),
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::SoftmaxRows(a) => {
                let sh = dy.shape();
                let (m, n) = (sh[0], sh[1]);
                let mut dx = ArrayD::zeros(dy.raw_dim());
                kernels::softmax_rows_bwd(
                    self.nodes[i].value.as_slice().unwrap(),
                    dy.as_slice().unwrap(),
                    m,
                    n,
                    dx.as_slice_mut().unwrap(),
                );
                self.acc(grads, *a, dx);
            }
        }
    }
}
