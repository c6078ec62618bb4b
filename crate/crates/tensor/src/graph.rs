//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`]s. Leaves are either
//! constants (never differentiated) or differentiable inputs/parameters.
//! Operations whose parents are all constants store no backward closure, so a
//! graph built only from constants behaves as a plain inference pass.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::kernels::{self, ConvGeom, MatRef};
use crate::tensor::{broadcast_strides, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    /// Stride 1, "same" padding for an odd kernel of size `k` with dilation `dilation`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: (k - 1) / 2,
            dilation: 1,
        }
    }

    pub fn output_size(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, materialising zeros when the loss does not depend on it.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), false)
    }

    /// Differentiable leaf.
    pub fn input(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), true)
    }

    fn push<'g, F>(
        &'g self,
        value: impl Into<Arc<Tensor>>,
        parents: &[Var<'g>],
        backward: F,
    ) -> Var<'g>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
        let requires_grad = needs.iter().any(|&b| b);
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(move |g: &Tensor| backward(g, &needs)))
        } else {
            None
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.into(),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, pg) in node.parents.iter().zip(backward(&g)) {
                let Some(pg) = pg else { continue };
                match &mut grads[*parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_channels needs at least one input");
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let [n, _, h, w] = values[0].shape();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!((v.n(), v.h(), v.w()), (n, h, w), "concat_channels shape mismatch");
                v.c()
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros([n, total, h, w]);
        for b in 0..n {
            let dst = out.item_mut(b);
            let mut off = 0;
            for v in &values {
                let src = v.item(b);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, parts, move |g, needs| {
            let mut start = 0;
            chans
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let s = start;
                    start += c;
                    need.then(|| {
                        let mut pg = Tensor::zeros([n, c, h, w]);
                        for b in 0..n {
                            let src = &g.item(b)[s * plane..(s + c) * plane];
                            pg.item_mut(b).copy_from_slice(src);
                        }
                        pg
                    })
                })
                .collect()
        })
    }

    /// Stacks along the batch axis.
    pub fn concat_batch<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_batch(&refs);
        let counts: Vec<usize> = values.iter().map(|v| v.n()).collect();
        self.push(out, parts, move |g, needs| {
            let mut start = 0;
            counts
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let s = start;
                    start += c;
                    need.then(|| g.batch_slice(s, c))
                })
                .collect()
        })
    }
}

// Graph ops take `self` by value and record a node, which the operator traits cannot express.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> [usize; 4] {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value; panics on non-scalars.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let y_keep = y.clone();
        self.graph.push(y, &[self], move |g, _| {
            let mut out = g.clone();
            for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y_keep.data()) {
                *o *= df(xv, yv);
            }
            vec![Some(out)]
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `log σ(x)`, evaluated without overflow for any finite `x`.
    pub fn log_sigmoid(self) -> Var<'g> {
        self.unary(log_sigmoid, |x, _| sigmoid(-x))
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(move |x| s * x, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.push(out, &[self, other], |g, needs| {
            needs.iter().map(|&n| n.then(|| g.clone())).collect()
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.push(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.push(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    /// Multiplies by a constant broadcast over any axis of size 1.
    pub fn mul_const(self, c: impl Into<Arc<Tensor>>) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let c: Arc<Tensor> = c.into();
        let strides = broadcast_strides(c.shape(), shape);
        let mut out = (*x).clone();
        apply_broadcast(out.data_mut(), shape, c.data(), strides, |o, cv| *o *= cv);
        self.graph.push(out, &[self], move |g, _| {
            let mut gx = g.clone();
            apply_broadcast(gx.data_mut(), shape, c.data(), strides, |o, cv| *o *= cv);
            vec![Some(gx)]
        })
    }

    /// Adds a constant broadcast over any axis of size 1.
    pub fn add_const(self, c: impl Into<Arc<Tensor>>) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let c: Arc<Tensor> = c.into();
        let strides = broadcast_strides(c.shape(), shape);
        let mut out = (*x).clone();
        apply_broadcast(out.data_mut(), shape, c.data(), strides, |o, cv| *o += cv);
        self.graph
            .push(out, &[self], move |g, _| vec![Some(g.clone())])
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        self.graph.push(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Channel range `[start, start + len)`.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        assert!(start + len <= c, "slice_channels out of range");
        let plane = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for b in 0..n {
            out.item_mut(b)
                .copy_from_slice(&x.item(b)[start * plane..(start + len) * plane]);
        }
        self.graph.push(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros([n, c, h, w]);
            for b in 0..n {
                gx.item_mut(b)[start * plane..(start + len) * plane].copy_from_slice(g.item(b));
            }
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        let mut out = Tensor::zeros([n, c, h * factor, w * factor]);
        let (pi, po) = (h * w, h * w * factor * factor);
        for (src, dst) in x.data().chunks(pi).zip(out.data_mut().chunks_mut(po)) {
            kernels::upsample_plane(src, h, w, factor, dst);
        }
        self.graph.push(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros([n, c, h, w]);
            for (src, dst) in g.data().chunks(po).zip(gx.data_mut().chunks_mut(pi)) {
                kernels::upsample_plane_adjoint(src, h, w, factor, dst);
            }
            vec![Some(gx)]
        })
    }

    /// 2-D cross-correlation. `weight` is `[O, C, kh, kw]`, `bias` is `[1, O, 1, 1]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, spec: Conv2dSpec) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let [n, c, h, w] = x.shape();
        let [o, wc, kh, kw] = wt.shape();
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        let oh = spec.output_size(h, kh).expect("conv2d kernel larger than input");
        let ow = spec.output_size(w, kw).expect("conv2d kernel larger than input");
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            dil: spec.dilation,
            oh,
            ow,
        };
        let (k, p) = (geom.rows(), geom.cols());
        let bias_val = bias.map(|b| {
            let v = b.value();
            assert_eq!(v.shape(), [1, o, 1, 1], "conv2d bias shape");
            v
        });
        // Patch matrices are rebuilt per item in the backward pass rather
        // than kept; pointwise kernels read the input directly.
        let pointwise = geom.is_pointwise();
        let mut out = Tensor::zeros([n, o, oh, ow]);
        for b in 0..n {
            let ob = out.item_mut(b);
            if pointwise {
                conv_gemm(o, k, p, wt.data(), x.item(b), ob);
            } else {
                kernels::with_patches(x.item(b), &geom, |cols| conv_gemm(o, k, p, wt.data(), cols, ob));
            }
            if let Some(bv) = &bias_val {
                for (row, &bb) in ob.chunks_mut(p).zip(bv.data()) {
                    row.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let saved_x = weight.requires_grad().then(|| x.clone());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(out, &parents, move |g, needs| {
            let (need_x, need_w) = (needs[0], needs[1]);
            let need_b = needs.get(2).copied().unwrap_or(false);
            let mut gx = need_x.then(|| Tensor::zeros([n, c, h, w]));
            let mut gw = need_w.then(|| Tensor::zeros([o, c, kh, kw]));
            let mut gb = need_b.then(|| Tensor::zeros([1, o, 1, 1]));
            for b in 0..n {
                let gb_item = g.item(b);
                if let Some(gw) = gw.as_mut() {
                    let x = saved_x.as_ref().expect("input saved for the weight gradient");
                    // gw(o×k) += g(o×p) · colsᵀ(p×k)
                    let mut accumulate = |cols: &[f64]| {
                        kernels::gemm(
                            o,
                            p,
                            k,
                            1.0,
                            MatRef { data: gb_item, rs: p, cs: 1 },
                            MatRef { data: cols, rs: 1, cs: p },
                            1.0,
                            gw.data_mut(),
                        )
                    };
                    if pointwise {
                        accumulate(x.item(b));
                    } else {
                        kernels::with_patches(x.item(b), &geom, accumulate);
                    }
                }
                if let Some(gbias) = gb.as_mut() {
                    for (acc, row) in gbias.data_mut().iter_mut().zip(gb_item.chunks(p)) {
                        *acc += row.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols(k×p) = wᵀ(k×o) · g(o×p)
                    let lhs = MatRef { data: wt.data(), rs: 1, cs: k };
                    let rhs = MatRef { data: gb_item, rs: p, cs: 1 };
                    if pointwise {
                        kernels::gemm(k, o, p, 1.0, lhs, rhs, 0.0, gx.item_mut(b));
                    } else {
                        kernels::with_scratch(k * p, |dcols| {
                            kernels::gemm(k, o, p, 1.0, lhs, rhs, 0.0, dcols);
                            kernels::col2im_add(dcols, &geom, gx.item_mut(b), p);
                        });
                    }
                }
            }
            let mut res = vec![gx, gw];
            if needs.len() > 2 {
                res.push(gb);
            }
            res
        })
    }

    /// Orthonormal 2-D DFT over the spatial axes.
    ///
    /// A `[N, C, H, W]` real input becomes `[N, 2C, H, W]`: real parts in the
    /// first `C` channels, imaginary parts in the last `C`.
    pub fn fft2(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut out = Tensor::zeros([n, 2 * c, h, w]);
        let mut buf = vec![Complex::new(0.0, 0.0); plane];
        for b in 0..n {
            let src = x.item(b);
            let dst = out.item_mut(b);
            for ch in 0..c {
                for (z, &v) in buf.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                    *z = Complex::new(v, 0.0);
                }
                kernels::fft2_inplace(&mut buf, h, w, false);
                let (re, im) = dst.split_at_mut(c * plane);
                for (i, z) in buf.iter().enumerate() {
                    re[ch * plane + i] = z.re;
                    im[ch * plane + i] = z.im;
                }
            }
        }
        self.graph.push(out, &[self], move |g, _| {
            // Adjoint of the orthonormal DFT is the orthonormal inverse DFT.
            let mut gx = Tensor::zeros([n, c, h, w]);
            let mut buf = vec![Complex::new(0.0, 0.0); plane];
            for b in 0..n {
                let src = g.item(b);
                let (re, im) = src.split_at(c * plane);
                let dst = gx.item_mut(b);
                for ch in 0..c {
                    for (i, z) in buf.iter_mut().enumerate() {
                        *z = Complex::new(re[ch * plane + i], im[ch * plane + i]);
                    }
                    kernels::fft2_inplace(&mut buf, h, w, true);
                    for (d, z) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(&buf) {
                        *d = z.re;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Real part of the orthonormal inverse 2-D DFT; input layout as produced by [`Var::fft2`].
    pub fn ifft2_real(self) -> Var<'g> {
        let z = self.value();
        let [n, c2, h, w] = z.shape();
        assert!(c2 % 2 == 0, "ifft2_real needs an even channel count");
        let c = c2 / 2;
        let plane = h * w;
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut buf = vec![Complex::new(0.0, 0.0); plane];
        for b in 0..n {
            let src = z.item(b);
            let (re, im) = src.split_at(c * plane);
            let dst = out.item_mut(b);
            for ch in 0..c {
                for (i, v) in buf.iter_mut().enumerate() {
                    *v = Complex::new(re[ch * plane + i], im[ch * plane + i]);
                }
                kernels::fft2_inplace(&mut buf, h, w, true);
                for (d, v) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(&buf) {
                    *d = v.re;
                }
            }
        }
        self.graph.push(out, &[self], move |g, _| {
            let mut gz = Tensor::zeros([n, c2, h, w]);
            let mut buf = vec![Complex::new(0.0, 0.0); plane];
            for b in 0..n {
                let src = g.item(b);
                let dst = gz.item_mut(b);
                for ch in 0..c {
                    for (v, &s) in buf.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                        *v = Complex::new(s, 0.0);
                    }
                    kernels::fft2_inplace(&mut buf, h, w, false);
                    let (re, im) = dst.split_at_mut(c * plane);
                    for (i, v) in buf.iter().enumerate() {
                        re[ch * plane + i] = v.re;
                        im[ch * plane + i] = v.im;
                    }
                }
            }
            vec![Some(gz)]
        })
    }
}

/// `out(o×p) = w(o×k) · cols(k×p)`. Few output
/// channels are computed as the transposed product, which suits the GEMM
/// micro-kernel shape better.
fn conv_gemm(o: usize, k: usize, p: usize, w: &[f64], cols: &[f64], out: &mut [f64]) {
    if o < 8 {
        kernels::gemm_strided(
            p,
            k,
            o,
            1.0,
            MatRef { data: cols, rs: 1, cs: p },
            MatRef { data: w, rs: 1, cs: k },
            0.0,
            out,
            (1, p),
        );
    } else {
        kernels::gemm(
            o,
            k,
            p,
            1.0,
            MatRef { data: w, rs: k, cs: 1 },
            MatRef { data: cols, rs: p, cs: 1 },
            0.0,
            out,
        );
    }
}

fn apply_broadcast(
    out: &mut [f64],
    shape: [usize; 4],
    c: &[f64],
    strides: [usize; 4],
    f: impl Fn(&mut f64, f64),
) {
    let mut i = 0;
    for n in 0..shape[0] {
        for ch in 0..shape[1] {
            for y in 0..shape[2] {
                let base = n * strides[0] + ch * strides[1] + y * strides[2];
                for x in 0..shape[3] {
                    f(&mut out[i], c[base + x * strides[3]]);
                    i += 1;
                }
            }
        }
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

/// `log σ(x) = min(x, 0) − ln(1 + e^{−|x|})`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
