use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Vector-Jacobian product: maps the output cotangent to per-parent
/// cotangents, expressed with ordinary tensor ops so the result is itself
/// differentiable.
type Vjp<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Scalar> {
    id: u64,
    data: ArrayD<F>,
    parents: Vec<Tensor<F>>,
    vjp: Option<Vjp<F>>,
    requires_grad: bool,
}

impl<F: Scalar> Drop for Node<F> {
    // Iterative drop: long op chains would otherwise recurse through Rc and
    // overflow the stack. Vjp closures only capture tensors that are also in
    // `parents`, so dropping the closure first never frees a node.
    fn drop(&mut self) {
        self.vjp = None;
        let mut stack: Vec<Tensor<F>> = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut n) = Rc::try_unwrap(t.node) {
                n.vjp = None;
                stack.append(&mut std::mem::take(&mut n.parents));
            }
        }
    }
}

/// An immutable n-dimensional array that records enough structure to be
/// differentiated. Cloning is cheap (reference-counted).
pub struct Tensor<F: Scalar> {
    node: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.node.id,
            self.shape(),
            self.node.requires_grad
        )
    }
}

// ---------------------------------------------------------------------------
// construction and accessors
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    fn new_node(
        data: ArrayD<F>,
        parents: Vec<Tensor<F>>,
        vjp: Option<Vjp<F>>,
        requires_grad: bool,
    ) -> Self {
        debug_assert!(data.is_standard_layout() || data.len() <= 1);
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data,
                parents,
                vjp,
                requires_grad,
            }),
        }
    }

    /// Builds an op node. If no parent requires a gradient the graph edges
    /// are dropped so constant subgraphs stay flat.
    fn from_op(data: ArrayD<F>, parents: Vec<Tensor<F>>, vjp: Vjp<F>) -> Self {
        if parents.iter().any(|p| p.node.requires_grad) {
            Self::new_node(data, parents, Some(vjp), true)
        } else {
            Self::new_node(data, Vec::new(), None, false)
        }
    }

    /// A differentiable leaf (trainable weight or gradient-check input).
    pub fn leaf(data: ArrayD<F>) -> Self {
        Self::new_node(to_standard(data), Vec::new(), None, true)
    }

    /// A non-differentiable value.
    pub fn constant(data: ArrayD<F>) -> Self {
        Self::new_node(to_standard(data), Vec::new(), None, false)
    }

    pub fn scalar(v: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(ArrayD::ones(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn data(&self) -> &ArrayD<F> {
        &self.node.data
    }

    pub fn shape(&self) -> &[usize] {
        self.node.data.shape()
    }

    pub fn ndim(&self) -> usize {
        self.node.data.ndim()
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// The single element of a scalar (0-d or one-element) tensor.
    pub fn item(&self) -> F {
        assert!(
            self.len() == 1,
            "item() on tensor with {} elements",
            self.len()
        );
        *self.node.data.iter().next().unwrap()
    }

    /// A constant copy sharing no graph history.
    pub fn detach(&self) -> Self {
        Self::constant(self.node.data.clone())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }
}

fn to_standard<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} and {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduces a gradient of broadcast shape back to `target` by summing the
/// expanded axes. Built from differentiable ops.
fn unbroadcast<F: Scalar>(g: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    if g.shape() == target {
        return g.clone();
    }
    let extra = g.ndim() - target.len();
    let mut cur = g.clone();
    if extra > 0 {
        let axes: Vec<usize> = (0..extra).collect();
        cur = cur.sum_axes(&axes, false);
    }
    let axes: Vec<usize> = target
        .iter()
        .enumerate()
        .filter(|&(i, &t)| t == 1 && cur.shape()[i] != 1)
        .map(|(i, _)| i)
        .collect();
    if !axes.is_empty() {
        cur = cur.sum_axes(&axes, true);
    }
    cur.reshape(target)
}

fn binary_forward<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> ArrayD<F> {
    if a.shape() == b.shape() {
        Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
    } else {
        let sh = broadcast_shape(a.shape(), b.shape());
        let av = a.broadcast(IxDyn(&sh)).expect("broadcast lhs");
        let bv = b.broadcast(IxDyn(&sh)).expect("broadcast rhs");
        Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self.data(), other.data(), |x, y| x + y);
        let (a, b) = (self.clone(), other.clone());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Tensor::from_op(
            data,
            vec![a, b],
            Box::new(move |g| {
                vec![Some(unbroadcast(g, &sa)), Some(unbroadcast(g, &sb))]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self.data(), other.data(), |x, y| x - y);
        let (a, b) = (self.clone(), other.clone());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Tensor::from_op(
            data,
            vec![a, b],
            Box::new(move |g| {
                vec![
                    Some(unbroadcast(g, &sa)),
                    Some(unbroadcast(&g.neg(), &sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self.data(), other.data(), |x, y| x * y);
        let (a, b) = (self.clone(), other.clone());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Tensor::from_op(
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                vec![
                    Some(unbroadcast(&g.mul(&b), &sa)),
                    Some(unbroadcast(&g.mul(&a), &sb)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self.data(), other.data(), |x, y| x / y);
        let (a, b) = (self.clone(), other.clone());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Tensor::from_op(
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga = g.div(&b);
                let gb = g.mul(&a).div(&b.mul(&b)).neg();
                vec![Some(unbroadcast(&ga, &sa)), Some(unbroadcast(&gb, &sb))]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        let data = self.data().mapv(|x| -x);
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.neg())]),
        )
    }

    pub fn add_scalar(&self, v: F) -> Tensor<F> {
        let data = self.data().mapv(|x| x + v);
        let a = self.clone();
        Tensor::from_op(data, vec![a], Box::new(move |g| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, v: F) -> Tensor<F> {
        let data = self.data().mapv(|x| x * v);
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.mul_scalar(v))]),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        let data = self.data().mapv(|x| x.exp());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| vec![Some(g.mul(&a.exp()))]),
        )
    }

    pub fn ln(&self) -> Tensor<F> {
        let data = self.data().mapv(|x| x.ln());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| vec![Some(g.div(&a))]),
        )
    }

    pub fn sqrt(&self) -> Tensor<F> {
        let data = self.data().mapv(|x| x.sqrt());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| {
                let half = F::from_f64(0.5);
                vec![Some(g.mul_scalar(half).div(&a.sqrt()))]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        let data = self.data().mapv(|x| x.tanh());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| {
                let y = a.tanh();
                let one_minus = y.mul(&y).neg().add_scalar(F::one());
                vec![Some(g.mul(&one_minus))]
            }),
        )
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, c: F) -> Tensor<F> {
        let data = self.data().mapv(|x| x.powf(c));
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| {
                let d = a.powf(c - F::one()).mul_scalar(c);
                vec![Some(g.mul(&d))]
            }),
        )
    }

    pub fn square(&self) -> Tensor<F> {
        self.mul(self)
    }

    /// |x|. The subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Tensor<F> {
        let data = self.data().mapv(|x| x.abs());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| {
                let sign = Tensor::constant(a.data().mapv(|x| {
                    if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                }));
                vec![Some(g.mul(&sign))]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: F) -> Tensor<F> {
        let data = self
            .data()
            .mapv(|x| if x > F::zero() { x } else { x * slope });
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| {
                let mask = Tensor::constant(
                    a.data()
                        .mapv(|x| if x > F::zero() { F::one() } else { slope }),
                );
                vec![Some(g.mul(&mask))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        self.leaky_relu(F::zero())
    }

    /// max(x, v) with the mask treated as constant.
    pub fn clamp_min(&self, v: F) -> Tensor<F> {
        let data = self.data().mapv(|x| if x > v { x } else { v });
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a.clone()],
            Box::new(move |g| {
                let mask = Tensor::constant(
                    a.data()
                        .mapv(|x| if x > v { F::one() } else { F::zero() }),
                );
                vec![Some(g.mul(&mask))]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// reductions and shape ops
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    /// Sums over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<F> {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let in_shape = self.shape().to_vec();
        let mut data = self.data().clone();
        for &ax in sorted.iter().rev() {
            data = data.sum_axis(Axis(ax));
        }
        let keep_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if sorted.contains(&i) { 1 } else { d })
            .collect();
        if keepdim {
            data = data
                .into_shape_with_order(IxDyn(&keep_shape))
                .expect("keepdim reshape");
        }
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| {
                let gk = g.reshape(&keep_shape);
                vec![Some(gk.broadcast_to(&in_shape))]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<F> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape()[a])
            .product::<usize>()
            .max(1);
        self.sum_axes(axes, keepdim)
            .mul_scalar(F::one() / F::from_f64(count as f64))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.len().max(1);
        self.sum_all().mul_scalar(F::one() / F::from_f64(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let in_shape = self.shape().to_vec();
        if in_shape == shape {
            // still produce a node so graph identities stay simple
        }
        let data = self
            .data()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", in_shape, shape));
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.reshape(&in_shape))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<F> {
        let data = to_standard(self.data().view().permuted_axes(IxDyn(axes)).to_owned());
        let a = self.clone();
        let axes_v = axes.to_vec();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| {
                let mut inv = vec![0usize; axes_v.len()];
                for (i, &ax) in axes_v.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![Some(g.permute(&inv))]
            }),
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<F> {
        if self.shape() == shape {
            return self.clone();
        }
        let data = self
            .data()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", self.shape(), shape))
            .to_owned();
        let a = self.clone();
        let target = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(unbroadcast(g, &target))]),
        )
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let data = to_standard(
            self.data()
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned(),
        );
        let a = self.clone();
        let full = self.shape()[axis];
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.embed(axis, start, full))]),
        )
    }

    /// Embeds this tensor into a larger zero tensor along `axis` (adjoint of
    /// `narrow`).
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Tensor<F> {
        let mut shape = self.shape().to_vec();
        let len = shape[axis];
        shape[axis] = full;
        let mut data = ArrayD::zeros(IxDyn(&shape));
        data.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.data());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.narrow(axis, start, len))]),
        )
    }

    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|t| t.data().view()).collect();
        let data = to_standard(concatenate(Axis(axis), &views).expect("concat shapes"));
        let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
        let parents: Vec<Tensor<F>> = parts.to_vec();
        Tensor::from_op(
            data,
            parents,
            Box::new(move |g| {
                let mut out = Vec::with_capacity(lens.len());
                let mut off = 0;
                for &l in &lens {
                    out.push(Some(g.narrow(axis, off, l)));
                    off += l;
                }
                out
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    /// 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert!(
            self.ndim() == 2 && other.ndim() == 2,
            "matmul expects 2-d tensors, got {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        assert_eq!(self.shape()[1], other.shape()[0], "matmul inner dims");
        let a2 = self
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b2 = other
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        // ndarray may allocate the product column-major depending on input
        // strides; normalize to keep the layout invariant.
        let data = to_standard(a2.dot(&b2).into_dyn());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga = g.matmul(&b.permute(&[1, 0]));
                let gb = a.permute(&[1, 0]).matmul(g);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Batched matrix product: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&self, other: &Tensor<F>) -> Tensor<F> {
        assert!(self.ndim() == 3 && other.ndim() == 3, "bmm expects 3-d");
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        assert!(bs == bs2 && k == k2, "bmm shape mismatch");
        let mut data = ArrayD::zeros(IxDyn(&[bs, m, n]));
        {
            let a3 = self
                .data()
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let b3 = other
                .data()
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let mut o3 = data
                .view_mut()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            for i in 0..bs {
                let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
                o3.index_axis_mut(Axis(0), i).assign(&prod);
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga = g.bmm(&b.permute(&[0, 2, 1]));
                let gb = a.permute(&[0, 2, 1]).bmm(g);
                vec![Some(ga), Some(gb)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// image-layout ops: unfold / fold / up / down
// ---------------------------------------------------------------------------

/// Output spatial size of a convolution-style sliding window.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> usize {
    let eff = dil * (kernel - 1) + 1;
    assert!(
        input + 2 * pad >= eff,
        "window larger than padded input: in={input} k={kernel} pad={pad} dil={dil}"
    );
    (input + 2 * pad - eff) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl WindowSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        WindowSpec {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pad: (pad, pad),
            dilation: (1, 1),
        }
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel.0, self.stride.0, self.pad.0, self.dilation.0),
            conv_out_size(w, self.kernel.1, self.stride.1, self.pad.1, self.dilation.1),
        )
    }
}

fn unfold_data<F: Scalar>(x: &ArrayD<F>, spec: WindowSpec) -> ArrayD<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    let (oh, ow) = spec.out_hw(h, w);
    let l = oh * ow;
    let rows = c * kh * kw;
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, rows, l]));
    let xs = x.as_slice().expect("unfold input layout");
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        let xoff = bi * c * h * w;
        let ooff = bi * rows * l;
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let robase = ooff + row * l;
                    for oy in 0..oh {
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let ibase = xoff + ci * h * w + iy as usize * w;
                        let obase = robase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * sw + kj * dw) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                os[obase + ox] = xs[ibase + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold_data<F: Scalar>(
    cols: &ArrayD<F>,
    channels: usize,
    hw: (usize, usize),
    spec: WindowSpec,
) -> ArrayD<F> {
    let (h, w) = hw;
    let b = cols.shape()[0];
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    let (oh, ow) = spec.out_hw(h, w);
    let l = oh * ow;
    let rows = channels * kh * kw;
    assert_eq!(cols.shape()[1], rows, "fold row count");
    assert_eq!(cols.shape()[2], l, "fold window count");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, channels, h, w]));
    let cs = cols.as_slice().expect("fold input layout");
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        let coff = bi * rows * l;
        let ooff = bi * channels * h * w;
        for ci in 0..channels {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let rbase = coff + row * l;
                    for oy in 0..oh {
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let obase = ooff + ci * h * w + iy as usize * w;
                        let cbase = rbase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * sw + kj * dw) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                os[obase + ix as usize] = os[obase + ix as usize] + cs[cbase + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl<F: Scalar> Tensor<F> {
    /// im2col: (B,C,H,W) -> (B, C*kh*kw, OH*OW). Out-of-bounds taps read 0.
    pub fn unfold(&self, spec: WindowSpec) -> Tensor<F> {
        assert_eq!(self.ndim(), 4, "unfold expects (B,C,H,W)");
        let data = unfold_data(self.data(), spec);
        let a = self.clone();
        let channels = self.shape()[1];
        let hw = (self.shape()[2], self.shape()[3]);
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.fold(channels, hw, spec))]),
        )
    }

    /// col2im scatter-add, the adjoint of [`Tensor::unfold`].
    pub fn fold(&self, channels: usize, hw: (usize, usize), spec: WindowSpec) -> Tensor<F> {
        assert_eq!(self.ndim(), 3, "fold expects (B, C*kh*kw, L)");
        let data = fold_data(self.data(), channels, hw, spec);
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![a],
            Box::new(move |g| vec![Some(g.unfold(spec))]),
        )
    }

    /// Nearest-neighbor 2x2... upsampling by an integer factor.
    pub fn nearest_upsample2d(&self, factor: usize) -> Tensor<F> {
        assert_eq!(self.ndim(), 4);
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (oh, ow) = (h * factor, w * factor);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, oh, ow]));
        {
            let xs = self.data().as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bc in 0..b * c {
                let ioff = bc * h * w;
                let ooff = bc * oh * ow;
                for y in 0..oh {
                    let iy = y / factor;
                    let irow = ioff + iy * w;
                    let orow = ooff + y * ow;
                    for x in 0..ow {
                        os[orow + x] = xs[irow + x / factor];
                    }
                }
            }
        }
        let a = self.clone();
        Tensor::from_op(
            data_of(out),
            vec![a],
            Box::new(move |g| vec![Some(g.block_sum2d(factor))]),
        )
    }

    /// Sums non-overlapping factor x factor blocks, the adjoint of
    /// [`Tensor::nearest_upsample2d`].
    pub fn block_sum2d(&self, factor: usize) -> Tensor<F> {
        assert_eq!(self.ndim(), 4);
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        assert!(
            h % factor == 0 && w % factor == 0,
            "block_sum2d: {h}x{w} not divisible by {factor}"
        );
        let (oh, ow) = (h / factor, w / factor);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, oh, ow]));
        {
            let xs = self.data().as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bc in 0..b * c {
                let ioff = bc * h * w;
                let ooff = bc * oh * ow;
                for y in 0..h {
                    let orow = ooff + (y / factor) * ow;
                    let irow = ioff + y * w;
                    for x in 0..w {
                        os[orow + x / factor] = os[orow + x / factor] + xs[irow + x];
                    }
                }
            }
        }
        let a = self.clone();
        Tensor::from_op(
            data_of(out),
            vec![a],
            Box::new(move |g| vec![Some(g.nearest_upsample2d(factor))]),
        )
    }

    /// Average pooling over non-overlapping factor x factor blocks.
    pub fn avg_pool2d(&self, factor: usize) -> Tensor<F> {
        let scale = F::one() / F::from_f64((factor * factor) as f64);
        self.block_sum2d(factor).mul_scalar(scale)
    }
}

fn data_of<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    a
}

// ---------------------------------------------------------------------------
// operator sugar
// ---------------------------------------------------------------------------

macro_rules! impl_binop {
    ($trait:ident, $fn:ident) => {
        impl<'a, F: Scalar> std::ops::$trait<&'a Tensor<F>> for &'a Tensor<F> {
            type Output = Tensor<F>;
            fn $fn(self, rhs: &'a Tensor<F>) -> Tensor<F> {
                Tensor::$fn(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
impl_binop!(Div, div);

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Gradients keyed by tensor identity. The values are themselves graph
/// tensors, so they can be differentiated again.
pub struct Gradients<F: Scalar> {
    map: HashMap<u64, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        self.map.get(&t.id()).cloned()
    }

    pub fn contains(&self, t: &Tensor<F>) -> bool {
        self.map.contains_key(&t.id())
    }
}

/// Reverse-mode differentiation of a scalar tensor. Returns cotangents for
/// every tensor on the path to the leaves that requires a gradient.
pub fn backward<F: Scalar>(root: &Tensor<F>) -> Gradients<F> {
    assert!(
        root.len() == 1,
        "backward expects a scalar, got shape {:?}",
        root.shape()
    );
    assert!(root.requires_grad(), "backward on a constant tensor");
    let seed = Tensor::constant(ArrayD::ones(IxDyn(root.shape())));

    // Iterative post-order DFS over the subgraph that requires gradients.
    let mut order: Vec<Tensor<F>> = Vec::new();
    let mut state: HashMap<u64, bool> = HashMap::new(); // true = emitted
    let mut stack: Vec<Tensor<F>> = vec![root.clone()];
    while let Some(t) = stack.last().cloned() {
        match state.get(&t.id()) {
            None => {
                state.insert(t.id(), false);
                for p in &t.node.parents {
                    if p.requires_grad() && !state.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            Some(false) => {
                state.insert(t.id(), true);
                order.push(t.clone());
                stack.pop();
            }
            Some(true) => {
                stack.pop();
            }
        }
    }

    let mut map: HashMap<u64, Tensor<F>> = HashMap::new();
    map.insert(root.id(), seed);
    for t in order.iter().rev() {
        let Some(g) = map.get(&t.id()).cloned() else {
            continue;
        };
        if let Some(vjp) = &t.node.vjp {
            let parent_grads = vjp(&g);
            assert_eq!(parent_grads.len(), t.node.parents.len());
            for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                if !p.requires_grad() {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(
                        pg.shape(),
                        p.shape(),
                        "vjp shape mismatch for parent of {:?}",
                        t
                    );
                    map.entry(p.id())
                        .and_modify(|acc| *acc = acc.add(&pg))
                        .or_insert(pg);
                }
            }
        }
    }
    Gradients { map }
}
