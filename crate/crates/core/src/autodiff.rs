//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Every operation appends a node to a [`Tape`] holding its value and, when
//! any input requires gradients, a closure computing the vector-Jacobian
//! product for each parent. The unrolled learners are written entirely in
//! terms of these ops, so the training loss differentiates through every
//! solver iteration.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

pub type Array = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Array) -> Vec<Option<Array>>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, shape={:?})", self.id, self.shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(IxDyn(&v.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn param(&self, value: Array) -> Var<'_> {
        self.push_leaf(value, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), v))
    }

    fn push_op<F>(&self, value: Array, parents: &[usize], make_backward: F) -> Var<'_>
    where
        F: FnOnce() -> BackwardFn,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward = if requires_grad {
            Some(make_backward())
        } else {
            None
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Array::ones(nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            grads[id] = Some(g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Sum `g` down to `shape`, undoing numpy-style broadcasting.
fn unbroadcast(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &n) in shape.iter().enumerate() {
        if n == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn as2(a: &Array) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("matmul operand must be 2-D")
}

/// Geometry of an im2col unfolding over a `C × H × W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Im2Col {
    pub kernel: (usize, usize),
    pub stride: usize,
    /// (top, bottom, left, right) zero padding.
    pub pad: (usize, usize, usize, usize),
}

impl Im2Col {
    /// Kernel `k`, stride `s`, padding that preserves size at stride 1.
    pub fn same(k: usize, stride: usize) -> Self {
        let total = k - 1;
        let lo = total / 2;
        let hi = total - lo;
        Self {
            kernel: (k, k),
            stride,
            pad: (lo, hi, lo, hi),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (pt, pb, pl, pr) = self.pad;
        (
            (h + pt + pb - kh) / self.stride + 1,
            (w + pl + pr - kw) / self.stride + 1,
        )
    }
}

fn im2col_forward(x: &Array, g: Im2Col) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = g.kernel;
    let (pt, _, pl, _) = g.pad;
    let (ho, wo) = g.output_size(h, w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut os[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - pl as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &Array, shape: (usize, usize, usize), g: Im2Col) -> Array {
    let (c, h, w) = shape;
    let (kh, kw) = g.kernel;
    let (pt, _, pl, _) = g.pad;
    let (ho, wo) = g.output_size(h, w);
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut out = Array::zeros(IxDyn(&[c, h, w]));
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - pl as isize;
                        if ix >= 0 && ix < w as isize {
                            os[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-axis taps of an align-corners-false bilinear resize.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Bilinear resize of a `C × H × W` array (align-corners-false).
pub fn resize_bilinear(x: &Array, out_h: usize, out_w: usize) -> Array {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array::zeros(IxDyn(&[c, out_h, out_w]));
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                os[(ci * out_h + oy) * out_w + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                    + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
            }
        }
    }
    out
}

fn resize_bilinear_adjoint(g: &Array, in_h: usize, in_w: usize) -> Array {
    let (c, out_h, out_w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let mut out = Array::zeros(IxDyn(&[c, in_h, in_w]));
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let base = ci * in_h * in_w;
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = gs[(ci * out_h + oy) * out_w + ox];
                os[base + y0 * in_w + x0] += v * wy0 * wx0;
                os[base + y0 * in_w + x1] += v * wy0 * wx1;
                os[base + y1 * in_w + x0] += v * wy1 * wx0;
                os[base + y1 * in_w + x1] += v * wy1 * wx1;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().sum();
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for (k, &g) in gt_sorted.iter().enumerate() {
        cum_fg += g;
        cum_bg += 1.0 - g;
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jac = 1.0 - inter / union;
        grad.push(if k == 0 { jac } else { jac - prev });
        prev = jac;
    }
    grad
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn binary<F, G>(self, other: Var<'t>, f: F, grads: G) -> Var<'t>
    where
        F: Fn(&Array, &Array) -> Array,
        G: Fn(&Array, &Array, &Array) -> (Array, Array) + 'static,
    {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let a = self.value();
        let b = other.value();
        let out = f(&a, &b);
        self.tape.push_op(out, &[self.id, other.id], move || {
            Box::new(move |g: &Array| {
                let (ga, gb) = grads(g, &a, &b);
                vec![
                    Some(unbroadcast(&ga, a.shape())),
                    Some(unbroadcast(&gb, b.shape())),
                ]
            })
        })
    }

    fn unary<F, G>(self, f: F, grad: G) -> Var<'t>
    where
        F: Fn(&Array) -> Array,
        G: Fn(&Array, &Array) -> Array + 'static,
    {
        let a = self.value();
        let out = f(&a);
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| vec![Some(grad(g, &a))])
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a / b,
            |g, a, b| {
                let ga = g / b;
                let gb = -(g * a) / (b * b);
                (ga, gb)
            },
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |a| a * c, move |g, _| g * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |a| a + c, |g, _| g.clone())
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|a| a * a, |g, a| g * a * 2.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |a| a.mapv(|v| v.max(0.0)),
            |g, a| {
                let mut out = g.clone();
                out.zip_mut_with(a, |o, &x| {
                    if x <= 0.0 {
                        *o = 0.0
                    }
                });
                out
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |a| a.mapv(sigmoid),
            |g, a| {
                let mut out = g.clone();
                out.zip_mut_with(a, |o, &x| {
                    let s = sigmoid(x);
                    *o *= s * (1.0 - s)
                });
                out
            },
        )
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(
            |a| a.mapv(softplus),
            |g, a| {
                let mut out = g.clone();
                out.zip_mut_with(a, |o, &x| *o *= sigmoid(x));
                out
            },
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(
            |a| a.mapv(f64::exp),
            |g, a| g * &a.mapv(f64::exp),
        )
    }

    /// Sum of all elements as a 0-d array.
    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.raw_dim();
        let out = Array::from_elem(IxDyn(&[]), a.sum());
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| {
                let gv = *g.iter().next().unwrap();
                vec![Some(Array::from_elem(shape.clone(), gv))]
            })
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Inner product of two same-shaped variables.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let in_shape = a.shape().to_vec();
        let out = a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&in_shape))
                        .unwrap(),
                )]
            })
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let a = self.value();
        let out = a
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            })
        })
    }

    /// Transpose of a 2-D variable.
    pub fn t(self) -> Var<'t> {
        self.permute(&[1, 0])
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = as2(&a).dot(&as2(&b)).into_dyn();
        self.tape.push_op(out, &[self.id, other.id], move || {
            Box::new(move |g: &Array| {
                let g2 = as2(g);
                let ga = g2.dot(&as2(&b).t()).into_dyn();
                let gb = as2(&a).t().dot(&g2).into_dyn();
                vec![Some(ga), Some(gb)]
            })
        })
    }

    /// Unfold a `C × H × W` input into `(C·kh·kw) × (Ho·Wo)` patch columns.
    pub fn im2col(self, geom: Im2Col) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 3, "im2col expects C×H×W");
        let shape = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let out = im2col_forward(&a, geom).into_dyn();
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| vec![Some(col2im(g, shape, geom))])
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(vars: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!vars.is_empty());
        let tape = vars[0].tape;
        let values: Vec<Rc<Array>> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        tape.push_op(out, &ids, move || {
            Box::new(move |g: &Array| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + n))
                            .to_owned();
                        start += n;
                        Some(part)
                    })
                    .collect()
            })
        })
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        let a = self.value();
        let full = a.shape().to_vec();
        let out = a
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| {
                let mut full_g = Array::zeros(IxDyn(&full));
                full_g
                    .slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(g);
                vec![Some(full_g)]
            })
        })
    }

    /// Align-corners-false bilinear resize of a `C × H × W` variable.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 3, "resize expects C×H×W");
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let out = resize_bilinear(&a, out_h, out_w);
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| vec![Some(resize_bilinear_adjoint(g, h, w))])
        })
    }

    /// Stride-one `k × k` max pooling with `-inf` padding that preserves size.
    pub fn max_pool_same(self, k: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ndim(), 3, "max_pool expects C×H×W");
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let lo = (k - 1) / 2;
        let mut out = Array::zeros(IxDyn(&[c, h, w]));
        let mut argmax = vec![0usize; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..k {
                        let iy = (y + dy) as isize - lo as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (x + dx) as isize - lo as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = a[[ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_idx = (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                    out[[ci, y, x]] = best;
                    argmax[(ci * h + y) * w + x] = best_idx;
                }
            }
        }
        self.tape.push_op(out, &[self.id], move || {
            Box::new(move |g: &Array| {
                let mut ga = Array::zeros(IxDyn(&[c, h, w]));
                let gs = ga.as_slice_mut().unwrap();
                for (o, gv) in g.iter().enumerate() {
                    gs[argmax[o]] += gv;
                }
                vec![Some(ga)]
            })
        })
    }

    /// Lovász hinge of binary logits against a {0,1} ground truth of the
    /// same number of elements. Returns a scalar.
    pub fn lovasz_hinge(self, gt: &Array) -> Var<'t> {
        let logits = self.value();
        assert_eq!(logits.len(), gt.len(), "lovasz_hinge: size mismatch");
        let lg: Vec<f64> = logits.iter().copied().collect();
        let labels: Vec<f64> = gt.iter().copied().collect();
        let signs: Vec<f64> = labels.iter().map(|&g| 2.0 * g - 1.0).collect();
        let errors: Vec<f64> = lg.iter().zip(&signs).map(|(l, s)| 1.0 - l * s).collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]).then(i.cmp(&j)));
        let gt_sorted: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
        let grad = lovasz_grad(&gt_sorted);
        let loss: f64 = order
            .iter()
            .zip(&grad)
            .map(|(&i, g)| errors[i].max(0.0) * g)
            .sum();
        let shape = logits.raw_dim();
        self.tape
            .push_op(Array::from_elem(IxDyn(&[]), loss), &[self.id], move || {
                Box::new(move |g: &Array| {
                    let gv = *g.iter().next().unwrap();
                    let mut out = vec![0.0; errors.len()];
                    for (&i, gr) in order.iter().zip(&grad) {
                        if errors[i] > 0.0 {
                            out[i] = -signs[i] * gr * gv;
                        }
                    }
                    vec![Some(Array::from_shape_vec(shape.clone(), out).unwrap())]
                })
            })
    }
}
