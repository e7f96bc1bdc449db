//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Every network in this crate runs on [`Var`] values attached to a [`Graph`]
//! tape. A graph created with [`Graph::inference`] records nothing and adds no
//! overhead beyond the forward arithmetic; a graph created with
//! [`Graph::recording`] stores one backward closure per op so that
//! [`Graph::backward`] can accumulate gradients for any leaf.
//!
//! Tensors are `f64` and carry no batch axis: images and feature maps are
//! `(C, H, W)`, vectors are `(C,)`, losses are 0-dim. Ops always materialize
//! standard-layout owned arrays, which keeps the inner loops on plain slices.

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Dynamic-shape `f64` tensor.
pub type Arr = ArrayD<f64>;

/// Named, trainable tensor owned by a layer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arr,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Arr) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

type BackFn = Box<dyn Fn(&Arr) -> Vec<(usize, Arr)>>;

struct Node {
    backward: Option<BackFn>,
}

struct GraphInner {
    recording: bool,
    nodes: Vec<Node>,
    param_nodes: HashMap<String, usize>,
}

/// Tape shared by all [`Var`]s of one forward pass.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    /// Graph that records backward closures for [`Graph::backward`].
    pub fn recording() -> Self {
        Self::with_mode(true)
    }

    /// Graph that skips all tape bookkeeping; forward values only.
    pub fn inference() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(recording: bool) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                recording,
                nodes: Vec::new(),
                param_nodes: HashMap::new(),
            })),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    fn push(&self, backward: Option<BackFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        if !inner.recording {
            return usize::MAX;
        }
        inner.nodes.push(Node { backward });
        inner.nodes.len() - 1
    }

    /// Leaf holding a fixed tensor. Its gradient is still accumulated and can
    /// be queried with [`Gradients::wrt`].
    pub fn constant(&self, value: Arr) -> Var {
        let node = self.push(None);
        Var {
            graph: self.clone(),
            node,
            data: Rc::new(value),
        }
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), value))
    }

    /// Leaf for a trainable parameter; registers the parameter name so its
    /// gradient can be looked up by name after backward.
    pub fn param(&self, p: &Param) -> Var {
        let v = self.constant(p.value.clone());
        if v.node != usize::MAX {
            self.inner
                .borrow_mut()
                .param_nodes
                .insert(p.name.clone(), v.node);
        }
        v
    }

    /// Reverse pass from `root` (any shape; seed gradient is all-ones).
    pub fn backward(&self, root: &Var) -> Gradients {
        let inner = self.inner.borrow();
        assert!(inner.recording, "backward on an inference graph");
        assert!(root.node != usize::MAX);
        let mut grads: Vec<Option<Arr>> = vec![None; inner.nodes.len()];
        grads[root.node] = Some(Arr::from_elem(root.data.raw_dim(), 1.0));
        for idx in (0..=root.node).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            if let Some(back) = &inner.nodes[idx].backward {
                for (parent, contrib) in back(&g) {
                    debug_assert!(parent < idx);
                    match &mut grads[parent] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Gradients {
            by_node: grads,
            param_nodes: inner.param_nodes.clone(),
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Arr>>,
    param_nodes: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to any recorded value.
    pub fn wrt(&self, v: &Var) -> Option<&Arr> {
        self.by_node.get(v.node).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter, if it was used in the forward pass.
    pub fn param(&self, name: &str) -> Option<&Arr> {
        self.param_nodes
            .get(name)
            .and_then(|&idx| self.by_node[idx].as_ref())
    }
}

/// Tensor value attached to a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    node: usize,
    data: Rc<Arr>,
}

fn standard(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Right-aligned numpy-style broadcast shape.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            let summed = g.sum_axis(ndarray::Axis(ax));
            g = summed.insert_axis(ndarray::Axis(ax));
        }
    }
    g
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn data(&self) -> &Arr {
        &self.data
    }

    pub fn array(&self) -> Arr {
        (*self.data).clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Scalar value of a 0-dim (or single-element) tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "value() on non-scalar");
        *self.data.iter().next().unwrap()
    }

    fn make(&self, data: Arr, backward: Option<BackFn>) -> Var {
        let node = self.graph.push(backward);
        Var {
            graph: self.graph.clone(),
            node,
            data: Rc::new(standard(data)),
        }
    }

    fn unary(&self, data: Arr, back: impl Fn(&Arr) -> Arr + 'static) -> Var {
        let parent = self.node;
        let backward: Option<BackFn> = if self.graph.is_recording() {
            Some(Box::new(move |g| vec![(parent, back(g))]))
        } else {
            None
        };
        self.make(data, backward)
    }

    // ---- broadcast-aware binary ops -------------------------------------

    fn bcast_zip(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> Arr {
        let shape = broadcast_shape(self.shape(), other.shape());
        let a = self.data.broadcast(IxDyn(&shape)).expect("broadcast lhs");
        let b = other.data.broadcast(IxDyn(&shape)).expect("broadcast rhs");
        let mut out = Arr::zeros(IxDyn(&shape));
        ndarray::Zip::from(&mut out)
            .and(&a)
            .and(&b)
            .for_each(|o, &x, &y| *o = f(x, y));
        out
    }

    fn binary(
        &self,
        other: &Var,
        data: Arr,
        back: impl Fn(&Arr) -> (Arr, Arr) + 'static,
    ) -> Var {
        let (pa, pb) = (self.node, other.node);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let backward: Option<BackFn> = if self.graph.is_recording() {
            Some(Box::new(move |g| {
                let (ga, gb) = back(g);
                vec![
                    (pa, reduce_to_shape(&ga, &sa)),
                    (pb, reduce_to_shape(&gb, &sb)),
                ]
            }))
        } else {
            None
        };
        self.make(data, backward)
    }

    pub fn add(&self, other: &Var) -> Var {
        let data = self.bcast_zip(other, |a, b| a + b);
        self.binary(other, data, |g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let data = self.bcast_zip(other, |a, b| a - b);
        self.binary(other, data, |g| (g.clone(), g.mapv(|v| -v)))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let data = self.bcast_zip(other, |a, b| a * b);
        let (a, b) = (Rc::clone(&self.data), Rc::clone(&other.data));
        self.binary(other, data, move |g| {
            let shape = g.shape().to_vec();
            let ab = a.broadcast(IxDyn(&shape)).unwrap();
            let bb = b.broadcast(IxDyn(&shape)).unwrap();
            (g * &bb, g * &ab)
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let data = self.bcast_zip(other, |a, b| a / b);
        let (a, b) = (Rc::clone(&self.data), Rc::clone(&other.data));
        self.binary(other, data, move |g| {
            let shape = g.shape().to_vec();
            let ab = a.broadcast(IxDyn(&shape)).unwrap();
            let bb = b.broadcast(IxDyn(&shape)).unwrap();
            let ga = g / &bb;
            let mut gb = Arr::zeros(IxDyn(&shape));
            ndarray::Zip::from(&mut gb)
                .and(g)
                .and(&ab)
                .and(&bb)
                .for_each(|o, &gv, &av, &bv| *o = -gv * av / (bv * bv));
            (ga, gb)
        })
    }

    // ---- elementwise unary ops -------------------------------------------

    pub fn neg(&self) -> Var {
        self.unary(self.data.mapv(|v| -v), |g| g.mapv(|v| -v))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.data.mapv(|v| v * c), move |g| g.mapv(|v| v * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(self.data.mapv(|v| v + c), |g| g.clone())
    }

    pub fn abs(&self) -> Var {
        let x = Rc::clone(&self.data);
        self.unary(self.data.mapv(f64::abs), move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&*x)
                .for_each(|o, &v| *o *= if v >= 0.0 { 1.0 } else { -1.0 });
            out
        })
    }

    pub fn relu(&self) -> Var {
        let x = Rc::clone(&self.data);
        self.unary(self.data.mapv(|v| v.max(0.0)), move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&*x)
                .for_each(|o, &v| *o *= if v > 0.0 { 1.0 } else { 0.0 });
            out
        })
    }

    pub fn sigmoid(&self) -> Var {
        let y = self.data.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = Rc::new(y.clone());
        self.unary(y, move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&*yc)
                .for_each(|o, &yv| *o *= yv * (1.0 - yv));
            out
        })
    }

    pub fn sqrt(&self) -> Var {
        let y = self.data.mapv(f64::sqrt);
        let yc = Rc::new(y.clone());
        self.unary(y, move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&*yc)
                .for_each(|o, &yv| *o *= 0.5 / yv);
            out
        })
    }

    /// Elementwise clamp. Gradient passes through strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let x = Rc::clone(&self.data);
        self.unary(self.data.mapv(|v| v.clamp(lo, hi)), move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&*x)
                .for_each(|o, &v| *o *= if v > lo && v < hi { 1.0 } else { 0.0 });
            out
        })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&self) -> Var {
        let shape = self.shape().to_vec();
        let total: f64 = self.data.sum();
        self.unary(Arr::from_elem(IxDyn(&[]), total), move |g| {
            Arr::from_elem(IxDyn(&shape), g[IxDyn(&[])])
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.data.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Mean over the given axes, keeping them as size-1 dims.
    pub fn mean_axes_keep(&self, axes: &[usize]) -> Var {
        let in_shape = self.shape().to_vec();
        let mut out_shape = in_shape.clone();
        let mut n = 1usize;
        for &ax in axes {
            n *= in_shape[ax];
            out_shape[ax] = 1;
        }
        let mut reduced = (*self.data).clone();
        for &ax in axes {
            let summed = reduced.sum_axis(ndarray::Axis(ax));
            reduced = summed.insert_axis(ndarray::Axis(ax));
        }
        reduced.mapv_inplace(|v| v / n as f64);
        let inv = 1.0 / n as f64;
        self.unary(reduced, move |g| {
            let gb = g.broadcast(IxDyn(&in_shape)).unwrap().to_owned();
            gb.mapv(|v| v * inv)
        })
    }

    // ---- shape ops ----------------------------------------------------------

    /// Slice `len` entries starting at `start` along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        let data = self
            .data
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(data, move |g| {
            let mut full = Arr::zeros(IxDyn(&shape));
            full.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(start..start + len))
                .assign(g);
            full
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        let data = (*self.data)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.unary(standard(data), move |g| {
            standard(g.clone().into_shape_with_order(IxDyn(&old)).unwrap())
        })
    }

    // ---- softmax ------------------------------------------------------------

    /// Softmax over axis 0 (per position along remaining axes).
    pub fn softmax0(&self) -> Var {
        let x = &*self.data;
        let mut y = x.clone();
        let k = x.shape()[0];
        let inner: usize = x.len() / k;
        {
            let ys = y.as_slice_mut().unwrap();
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(ys[c * inner + i]);
                }
                let mut s = 0.0;
                for c in 0..k {
                    let e = (ys[c * inner + i] - m).exp();
                    ys[c * inner + i] = e;
                    s += e;
                }
                for c in 0..k {
                    ys[c * inner + i] /= s;
                }
            }
        }
        let yc = Rc::new(y.clone());
        self.unary(y, move |g| {
            let ys = yc.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut out = vec![0.0; gs.len()];
            for i in 0..inner {
                let mut dot = 0.0;
                for c in 0..k {
                    dot += gs[c * inner + i] * ys[c * inner + i];
                }
                for c in 0..k {
                    out[c * inner + i] = ys[c * inner + i] * (gs[c * inner + i] - dot);
                }
            }
            Arr::from_shape_vec(yc.raw_dim(), out).unwrap()
        })
    }

    // ---- structured ops ------------------------------------------------------

    /// 2-D convolution: input `(C, H, W)`, weight `(O, C, K, K)`, bias `(O,)`,
    /// zero padding `pad`, stride `stride`. Output `(O, H', W')`.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        let x = &*self.data;
        let w = &*weight.data;
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        assert_eq!(w.shape()[1], c_in, "conv2d channel mismatch");
        assert_eq!(bias.data.len(), c_out);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let bs = bias.data.as_slice().unwrap();
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bs[o];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ci * h * wd + iy as usize * wd;
                            let wrow = ((o * c_in + ci) * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += ws[wrow + kx] * xs[xrow + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let data = Arr::from_shape_vec(IxDyn(&[c_out, oh, ow]), out).unwrap();

        let (px, pw, pb) = (self.node, weight.node, bias.node);
        let (xc, wc) = (Rc::clone(&self.data), Rc::clone(&weight.data));
        let backward: Option<BackFn> = if self.graph.is_recording() {
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let xs = xc.as_slice().unwrap();
                let ws = wc.as_slice().unwrap();
                let mut gx = vec![0.0; xc.len()];
                let mut gw = vec![0.0; wc.len()];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gs[(o * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            gb[o] += gv;
                            for ci in 0..c_in {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = ci * h * wd + iy as usize * wd;
                                    let wrow = ((o * c_in + ci) * k + ky) * k;
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        gx[xrow + ix as usize] += gv * ws[wrow + kx];
                                        gw[wrow + kx] += gv * xs[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (px, Arr::from_shape_vec(xc.raw_dim(), gx).unwrap()),
                    (pw, Arr::from_shape_vec(wc.raw_dim(), gw).unwrap()),
                    (pb, Arr::from_shape_vec(IxDyn(&[c_out]), gb).unwrap()),
                ]
            }))
        } else {
            None
        };
        self.make(data, backward)
    }

    /// Nearest-neighbour 2x upsample of a `(C, H, W)` tensor.
    pub fn upsample_nearest2x(&self) -> Var {
        let x = &*self.data;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ci in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    out[(ci * oh + y) * ow + xo] = xs[(ci * h + y / 2) * w + xo / 2];
                }
            }
        }
        let data = Arr::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let in_dim = x.raw_dim();
        self.unary(data, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        gx[(ci * h + y / 2) * w + xo / 2] += gs[(ci * oh + y) * ow + xo];
                    }
                }
            }
            Arr::from_shape_vec(in_dim.clone(), gx).unwrap()
        })
    }

    /// Bilinear resize of a `(C, H, W)` tensor to `(C, oh, ow)` using the
    /// half-pixel-center convention with edge clamping.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var {
        let x = &*self.data;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if oh == h && ow == w {
            return self.unary((*self.data).clone(), |g| g.clone());
        }
        let taps_y = resize_taps(h, oh);
        let taps_x = resize_taps(w, ow);
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = taps_y[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = taps_x[ox];
                    let base = ci * h * w;
                    let v = xs[base + y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                        + xs[base + y0 * w + x1] * (1.0 - fy) * fx
                        + xs[base + y1 * w + x0] * fy * (1.0 - fx)
                        + xs[base + y1 * w + x1] * fy * fx;
                    out[(ci * oh + oy) * ow + ox] = v;
                }
            }
        }
        let data = Arr::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let in_dim = x.raw_dim();
        self.unary(data, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    let (y0, y1, fy) = taps_y[oy];
                    for ox in 0..ow {
                        let (x0, x1, fx) = taps_x[ox];
                        let gv = gs[(ci * oh + oy) * ow + ox];
                        let base = ci * h * w;
                        gx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        gx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                        gx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                        gx[base + y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            Arr::from_shape_vec(in_dim.clone(), gx).unwrap()
        })
    }

    /// Bilinear grid sampling with border clamping.
    ///
    /// `self` is the image `(C, H, W)`; `grid` is `(2, Gh, Gw)` holding
    /// normalized absolute coordinates (channel 0 = x, channel 1 = y) in
    /// `[-1, 1]`, mapped so that pixel centers sit at `((c+1)*size - 1)/2`.
    /// Coordinates outside the frame clamp to the border (and contribute zero
    /// gradient to the grid there). Output is `(C, Gh, Gw)`.
    pub fn grid_sample(&self, grid: &Var) -> Var {
        let x = &*self.data;
        let g = &*grid.data;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(g.shape()[0], 2, "grid must be (2, Gh, Gw)");
        let (gh, gw) = (g.shape()[1], g.shape()[2]);
        let xs = x.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let n = gh * gw;

        // Per output position: (x0, x1, fx, dpx_active) and same for y.
        let mut taps = Vec::with_capacity(n);
        for i in 0..n {
            taps.push((
                sample_tap(gs[i], w),      // x channel
                sample_tap(gs[n + i], h),  // y channel
            ));
        }
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            let base = ci * h * w;
            for (i, &((x0, x1, fx, _), (y0, y1, fy, _))) in taps.iter().enumerate() {
                out[ci * n + i] = xs[base + y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + xs[base + y0 * w + x1] * (1.0 - fy) * fx
                    + xs[base + y1 * w + x0] * fy * (1.0 - fx)
                    + xs[base + y1 * w + x1] * fy * fx;
            }
        }
        let data = Arr::from_shape_vec(IxDyn(&[c, gh, gw]), out).unwrap();

        let (pi, pg) = (self.node, grid.node);
        let (xc, gdim) = (Rc::clone(&self.data), g.raw_dim());
        let backward: Option<BackFn> = if self.graph.is_recording() {
            Some(Box::new(move |go| {
                let gos = go.as_slice().unwrap();
                let xs = xc.as_slice().unwrap();
                let mut gx = vec![0.0; xc.len()];
                let mut gg = vec![0.0; 2 * n];
                for ci in 0..c {
                    let base = ci * h * w;
                    for (i, &((x0, x1, fx, ax), (y0, y1, fy, ay))) in taps.iter().enumerate() {
                        let gv = gos[ci * n + i];
                        if gv == 0.0 {
                            continue;
                        }
                        gx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        gx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                        gx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                        gx[base + y1 * w + x1] += gv * fy * fx;
                        // d(out)/d(px), then chain through px = ((gx+1)*W-1)/2.
                        let dpx = (1.0 - fy) * (xs[base + y0 * w + x1] - xs[base + y0 * w + x0])
                            + fy * (xs[base + y1 * w + x1] - xs[base + y1 * w + x0]);
                        let dpy = (1.0 - fx) * (xs[base + y1 * w + x0] - xs[base + y0 * w + x0])
                            + fx * (xs[base + y1 * w + x1] - xs[base + y0 * w + x1]);
                        gg[i] += gv * dpx * ax * w as f64 / 2.0;
                        gg[n + i] += gv * dpy * ay * h as f64 / 2.0;
                    }
                }
                vec![
                    (pi, Arr::from_shape_vec(xc.raw_dim(), gx).unwrap()),
                    (pg, Arr::from_shape_vec(gdim.clone(), gg).unwrap()),
                ]
            }))
        } else {
            None
        };
        self.make(data, backward)
    }
}

/// Concatenate along axis 0.
pub fn concat0(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let graph = parts[0].graph.clone();
    let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
    let data = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat0 shape mismatch");
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
    let nodes: Vec<usize> = parts.iter().map(|p| p.node).collect();
    let backward: Option<BackFn> = if graph.is_recording() {
        Some(Box::new(move |g| {
            let mut out = Vec::with_capacity(nodes.len());
            let mut start = 0;
            for (idx, &len) in lens.iter().enumerate() {
                let slice = g
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(start..start + len))
                    .to_owned();
                out.push((nodes[idx], slice));
                start += len;
            }
            out
        }))
    } else {
        None
    };
    let node = graph.push(backward);
    Var {
        graph,
        node,
        data: Rc::new(standard(data)),
    }
}

/// `(src0, src1, frac)` taps for one resized output index (half-pixel rule).
fn resize_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear tap for one normalized grid coordinate along an axis of `size`
/// pixels. Returns `(i0, i1, frac, active)` where `active` is 0 when the
/// coordinate was clamped to the border (zero gradient w.r.t. the grid).
fn sample_tap(coord: f64, size: usize) -> (usize, usize, f64, f64) {
    let raw = ((coord + 1.0) * size as f64 - 1.0) / 2.0;
    let max = (size - 1) as f64;
    let active = if raw > 0.0 && raw < max { 1.0 } else { 0.0 };
    let p = raw.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, p - i0 as f64, active)
}

/// Normalized identity sampling grid `(2, h, w)`: channel 0 holds x
/// coordinates, channel 1 holds y, with pixel centers at `(2k+1)/size - 1`.
pub fn identity_grid(h: usize, w: usize) -> Arr {
    let mut g = Arr::zeros(IxDyn(&[2, h, w]));
    for y in 0..h {
        for x in 0..w {
            g[IxDyn(&[0, y, x])] = (2 * x + 1) as f64 / w as f64 - 1.0;
            g[IxDyn(&[1, y, x])] = (2 * y + 1) as f64 / h as f64 - 1.0;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(loss)/d(input) for every input, where
    /// `loss = sum(f(inputs) * probe)` with a fixed random probe.
    fn fd_check(f: impl Fn(&[Var]) -> Var, shapes: &[&[usize]], seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();

        let g = Graph::recording();
        let vars: Vec<Var> = inputs.iter().map(|a| g.constant(a.clone())).collect();
        let out = f(&vars);
        let probe = rand_arr(&mut rng, out.shape());
        let loss = out.mul(&g.constant(probe.clone())).sum_all();
        let grads = g.backward(&loss);

        let eval = |inputs: &[Arr]| -> f64 {
            let g = Graph::inference();
            let vars: Vec<Var> = inputs.iter().map(|a| g.constant(a.clone())).collect();
            let out = f(&vars);
            (&*out.data * &probe).sum()
        };

        let h = 1e-5;
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(var).expect("missing gradient").clone();
            let mut perturbed = inputs.to_vec();
            for idx in 0..inputs[i].len() {
                let orig = perturbed[i].as_slice().unwrap()[idx];
                perturbed[i].as_slice_mut().unwrap()[idx] = orig + h;
                let up = eval(&perturbed);
                perturbed[i].as_slice_mut().unwrap()[idx] = orig - h;
                let down = eval(&perturbed);
                perturbed[i].as_slice_mut().unwrap()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                    "input {i} elem {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        fd_check(|v| v[0].add(&v[1]), &[&[2, 3], &[2, 3]], 1, 1e-6);
        fd_check(|v| v[0].sub(&v[1]), &[&[2, 3], &[2, 3]], 2, 1e-6);
        fd_check(|v| v[0].mul(&v[1]), &[&[2, 3], &[2, 3]], 3, 1e-6);
        fd_check(
            |v| v[0].div(&v[1].mul(&v[1]).add_scalar(1.0)),
            &[&[2, 3], &[2, 3]],
            4,
            1e-6,
        );
        fd_check(|v| v[0].sigmoid(), &[&[7]], 5, 1e-6);
        fd_check(|v| v[0].mul(&v[0]).add_scalar(0.5).sqrt(), &[&[7]], 6, 1e-6);
        fd_check(|v| v[0].scale(-2.5).add_scalar(0.3), &[&[5]], 7, 1e-6);
    }

    #[test]
    fn fd_broadcast_ops() {
        // (C,1,1) against (C,H,W), both directions of broadcasting.
        fd_check(|v| v[0].mul(&v[1]).add(&v[2]), &[&[3, 4, 4], &[3, 1, 1], &[3, 1, 1]], 8, 1e-6);
        fd_check(|v| v[1].mul(&v[0]), &[&[2, 1, 1], &[2, 3, 3]], 9, 1e-6);
        fd_check(|v| v[0].div(&v[1].mul(&v[1]).add_scalar(0.7)), &[&[2, 3, 3], &[2, 1, 1]], 10, 1e-6);
    }

    #[test]
    fn fd_reductions_and_shape_ops() {
        fd_check(|v| v[0].mean_axes_keep(&[1, 2]), &[&[3, 4, 5]], 11, 1e-6);
        fd_check(|v| v[0].narrow0(1, 2), &[&[4, 3]], 12, 1e-6);
        fd_check(|v| concat0(&[v[0].clone(), v[1].clone()]), &[&[2, 3, 3], &[4, 3, 3]], 13, 1e-6);
        fd_check(|v| v[0].reshape(&[6, 2]), &[&[3, 4]], 14, 1e-6);
        fd_check(|v| v[0].softmax0(), &[&[5, 2, 2]], 15, 1e-6);
    }

    #[test]
    fn fd_conv2d() {
        fd_check(
            |v| v[0].conv2d(&v[1], &v[2], 1, 1),
            &[&[2, 5, 5], &[3, 2, 3, 3], &[3]],
            16,
            1e-6,
        );
        fd_check(
            |v| v[0].conv2d(&v[1], &v[2], 2, 1),
            &[&[2, 6, 6], &[3, 2, 3, 3], &[3]],
            17,
            1e-6,
        );
        fd_check(
            |v| v[0].conv2d(&v[1], &v[2], 1, 0),
            &[&[3, 4, 4], &[2, 3, 1, 1], &[2]],
            18,
            1e-6,
        );
    }

    #[test]
    fn fd_resize_and_upsample() {
        fd_check(|v| v[0].upsample_nearest2x(), &[&[2, 3, 3]], 19, 1e-6);
        fd_check(|v| v[0].resize_bilinear(3, 3), &[&[2, 6, 6]], 20, 1e-6);
        fd_check(|v| v[0].resize_bilinear(7, 5), &[&[2, 4, 4]], 21, 1e-6);
    }

    #[test]
    fn fd_grid_sample_image_and_grid() {
        // Keep sample points well inside pixel cells so the finite difference
        // never crosses a bilinear kink or the border clamp.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = rand_arr(&mut rng, &[2, 5, 5]);
        let mut grid = identity_grid(4, 4);
        for v in grid.iter_mut() {
            *v += rng.gen_range(-0.04..0.04) + 0.03;
        }
        let probe = rand_arr(&mut rng, &[2, 4, 4]);

        let g = Graph::recording();
        let vi = g.constant(img.clone());
        let vg = g.constant(grid.clone());
        let loss = vi.grid_sample(&vg).mul(&g.constant(probe.clone())).sum_all();
        let grads = g.backward(&loss);

        let eval = |img: &Arr, grid: &Arr| {
            let g = Graph::inference();
            let out = g.constant(img.clone()).grid_sample(&g.constant(grid.clone()));
            (&*out.data * &probe).sum()
        };

        let h = 1e-5;
        let gi = grads.wrt(&vi).unwrap().clone();
        let mut im = img.clone();
        for idx in 0..im.len() {
            let orig = im.as_slice().unwrap()[idx];
            im.as_slice_mut().unwrap()[idx] = orig + h;
            let up = eval(&im, &grid);
            im.as_slice_mut().unwrap()[idx] = orig - h;
            let down = eval(&im, &grid);
            im.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = gi.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "image grad: {fd} vs {an}");
        }
        let gg = grads.wrt(&vg).unwrap().clone();
        let mut gr = grid.clone();
        for idx in 0..gr.len() {
            let orig = gr.as_slice().unwrap()[idx];
            gr.as_slice_mut().unwrap()[idx] = orig + h;
            let up = eval(&img, &gr);
            gr.as_slice_mut().unwrap()[idx] = orig - h;
            let down = eval(&img, &gr);
            gr.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = gg.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "grid grad: {fd} vs {an}");
        }
    }

    #[test]
    fn grid_sample_identity_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = rand_arr(&mut rng, &[3, 8, 8]);
        let g = Graph::inference();
        let out = g.constant(img.clone()).grid_sample(&g.constant(identity_grid(8, 8)));
        for (a, b) in out.data.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let img = rand_arr(&mut rng, &[2, 5, 7]);
        let g = Graph::inference();
        let out = g.constant(img.clone()).resize_bilinear(5, 7);
        assert_eq!(&*out.data, &img);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = x*x + x => dy/dx = 2x + 1
        let g = Graph::recording();
        let x = g.constant(Arr::from_elem(IxDyn(&[1]), 3.0));
        let y = x.mul(&x).add(&x).sum_all();
        let grads = g.backward(&y);
        let gx = grads.wrt(&x).unwrap();
        assert!((gx[IxDyn(&[0])] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn param_gradients_by_name() {
        let p = Param::new("w", Arr::from_elem(IxDyn(&[2]), 2.0));
        let g = Graph::recording();
        let w = g.param(&p);
        let loss = w.mul(&w).sum_all();
        let grads = g.backward(&loss);
        let gw = grads.param("w").unwrap();
        assert_eq!(gw.len(), 2);
        assert!((gw[IxDyn(&[0])] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let a = g.constant(Arr::from_elem(IxDyn(&[4]), 1.5));
        let b = a.mul(&a).sigmoid().sum_all();
        assert!(b.value().is_finite());
        assert_eq!(g.inner.borrow().nodes.len(), 0);
    }
}
