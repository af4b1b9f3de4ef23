//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Every value is an f64 `Tensor` holding an `ArrayD` plus an optional
//! backward closure. Backward closures are written in terms of tensor ops
//! themselves, so calling [`Tensor::backward_with`] with `create_graph = true`
//! yields gradients that are differentiable again. That is what lets the
//! gradient-difference regularizer backpropagate through input gradients
//! without a separate Hessian code path.
//!
//! The engine is deliberately small: f64 only, CPU only, no views (ops copy).
//! At the clip sizes used here that is fast enough, and it keeps the vjp
//! rules easy to audit.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type Vjp = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Inner {
    id: u64,
    data: ArrayD<f64>,
    /// true for leaves explicitly marked trainable
    requires_grad: bool,
    /// true if this node or any ancestor requires grad
    grad_capable: bool,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

/// A node in the autodiff graph. Cloning is cheap (shared `Rc`).
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.0.id,
            self.shape(),
            self.0.requires_grad
        )
    }
}

impl Tensor {
    pub fn new(data: ArrayD<f64>) -> Self {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            requires_grad: false,
            grad_capable: false,
            parents: vec![],
            vjp: None,
        }))
    }

    /// A leaf that participates in gradient computation.
    pub fn leaf(data: ArrayD<f64>) -> Self {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            requires_grad: true,
            grad_capable: true,
            parents: vec![],
            vjp: None,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, vjp: Vjp) -> Self {
        let grad_capable = parents.iter().any(|p| p.0.grad_capable);
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            requires_grad: false,
            grad_capable,
            parents: if grad_capable { parents } else { vec![] },
            vjp: if grad_capable { Some(vjp) } else { None },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        *self.0.data.iter().next().expect("empty tensor")
    }

    /// Cut the graph: same data, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone())
    }

    // ---- elementwise binary ops with numpy-style broadcasting ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self, other);
        let data = a.data() + b.data();
        Tensor::from_op(
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |cot| vec![Some(cot.clone()), Some(cot.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self, other);
        let data = a.data() - b.data();
        Tensor::from_op(
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |cot| vec![Some(cot.clone()), Some(cot.neg())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self, other);
        let data = a.data() * b.data();
        let (pa, pb) = (a.clone(), b.clone());
        Tensor::from_op(
            data,
            vec![a, b],
            Box::new(move |cot| vec![Some(cot.mul(&pb)), Some(cot.mul(&pa))]),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self, other);
        let data = a.data() / b.data();
        let (pa, pb) = (a.clone(), b.clone());
        Tensor::from_op(
            data,
            vec![a, b],
            Box::new(move |cot| {
                let da = cot.div(&pb);
                let db = cot.mul(&pa).div(&pb.mul(&pb)).neg();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        let data = -&self.0.data;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.neg())]),
        )
    }

    pub fn add_scalar(&self, v: f64) -> Tensor {
        let data = &self.0.data + v;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.clone())]),
        )
    }

    pub fn mul_scalar(&self, v: f64) -> Tensor {
        let data = &self.0.data * v;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.mul_scalar(v))]),
        )
    }

    // ---- elementwise unary ----

    pub fn exp(&self) -> Tensor {
        let data = self.0.data.mapv(f64::exp);
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.mul(&p.exp()))]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let data = self.0.data.mapv(f64::ln);
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.div(&p))]),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.0.data.mapv(f64::sqrt);
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.mul_scalar(0.5).div(&p.sqrt()))]),
        )
    }

    pub fn powf(&self, e: f64) -> Tensor {
        let data = self.0.data.mapv(|x| x.powf(e));
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.mul(&p.powf(e - 1.0)).mul_scalar(e))]),
        )
    }

    pub fn sqr(&self) -> Tensor {
        self.mul(self)
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.0.data.mapv(f64::tanh);
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| {
                let y = p.tanh();
                vec![Some(cot.mul(&y.sqr().neg().add_scalar(1.0)))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let mask = Tensor::new(self.0.data.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
        let data = self.0.data.mapv(|x| x.max(0.0));
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.mul(&mask))]),
        )
    }

    pub fn gelu(&self) -> Tensor {
        // tanh approximation, composed from differentiable primitives
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let inner = self.add(&self.powf(3.0).mul_scalar(0.044715)).mul_scalar(c);
        self.mul(&inner.tanh().add_scalar(1.0)).mul_scalar(0.5)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.neg().exp().add_scalar(1.0).powf(-1.0)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let shape: Vec<usize> = self.shape().to_vec();
        let data = ArrayD::from_elem(IxDyn(&[]), self.0.data.sum());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| Some(vec![Some(cot.broadcast_to(&shape))]).unwrap()),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape[axis] = 1;
        let data = self
            .0
            .data
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .into_dyn();
        let in_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.broadcast_to(&in_shape))]),
        )
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).mul_scalar(1.0 / n)
    }

    /// Max over `axis` (kept), returned detached. Used for stable softmax.
    pub fn max_axis_keep_detached(&self, axis: usize) -> Tensor {
        let data = self
            .0
            .data
            .map_axis(Axis(axis), |lane| lane.iter().cloned().fold(f64::MIN, f64::max))
            .insert_axis(Axis(axis))
            .into_dyn();
        Tensor::new(data)
    }

    pub fn softmax(&self, axis: usize) -> Tensor {
        let shifted = self.sub(&self.max_axis_keep_detached(axis));
        let e = shifted.exp();
        e.div(&e.sum_axis_keep(axis))
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape {:?} -> {:?}", self.shape(), shape);
        let contiguous = self.0.data.as_standard_layout().into_owned();
        let data = contiguous.into_shape_with_order(IxDyn(shape)).expect("reshape");
        let in_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.reshape(&in_shape))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let data = self
            .0
            .data
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| vec![Some(cot.permute(&inverse))]),
        )
    }

    /// Broadcast to `shape` using numpy rules (prepend 1s, expand 1-dims).
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let data = self
            .0
            .data
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        let in_shape: Vec<usize> = self.shape().to_vec();
        let out_shape: Vec<usize> = shape.to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| {
                // sum out prepended axes, then axes that were expanded from 1
                let mut g = cot.clone();
                let extra = out_shape.len() - in_shape.len();
                for _ in 0..extra {
                    g = g.sum_axis_keep(0).reshape(&g.shape()[1..].to_vec());
                }
                for (axis, (&i, &o)) in in_shape.iter().zip(&out_shape[extra..]).enumerate() {
                    if i == 1 && o != 1 {
                        g = g.sum_axis_keep(axis);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let views: Vec<_> = tensors.iter().map(|t| t.0.data.view()).collect();
        let data = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Tensor::from_op(
            data,
            tensors.to_vec(),
            Box::new(move |cot| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    out.push(Some(cot.narrow(axis, start, s)));
                    start += s;
                }
                out
            }),
        )
    }

    /// Slice `len` elements starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let data = self
            .0
            .data
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let in_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |cot| {
                let mut parts = Vec::new();
                if start > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(cot.clone());
                let after = in_shape[axis] - start - len;
                if after > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = after;
                    parts.push(Tensor::zeros(&s));
                }
                vec![Some(Tensor::concat(&parts, axis))]
            }),
        )
    }

    // ---- matmul ----

    /// Matrix product. Supports 2D x 2D, ND x 2D (shared weight applied to
    /// every leading index), and ND x ND with identical leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (an, bn) = (self.shape().len(), other.shape().len());
        assert!(an >= 2 && bn >= 2, "matmul needs rank >= 2");
        if an == 2 && bn == 2 {
            return self.matmul2(other);
        }
        if bn == 2 {
            // [.., m, k] x [k, n]
            let in_shape = self.shape().to_vec();
            let (m, k) = (in_shape[an - 2], in_shape[an - 1]);
            let rows: usize = in_shape[..an - 2].iter().product::<usize>() * m;
            let flat = self.reshape(&[rows, k]);
            let out = flat.matmul2(other);
            let mut out_shape = in_shape[..an - 2].to_vec();
            out_shape.push(m);
            out_shape.push(other.shape()[1]);
            return out.reshape(&out_shape);
        }
        assert_eq!(an, bn, "batched matmul rank mismatch");
        assert_eq!(
            &self.shape()[..an - 2],
            &other.shape()[..bn - 2],
            "batched matmul leading dims mismatch"
        );
        let lead: Vec<usize> = self.shape()[..an - 2].to_vec();
        let batch: usize = lead.iter().product();
        let (m, k) = (self.shape()[an - 2], self.shape()[an - 1]);
        let (k2, n) = (other.shape()[bn - 2], other.shape()[bn - 1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let a = self.reshape(&[batch, m, k]);
        let b = other.reshape(&[batch, k, n]);
        let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let av = a.0.data.index_axis(Axis(0), i);
            let bv = b.0.data.index_axis(Axis(0), i);
            let am = av.into_dimensionality::<Ix2>().unwrap();
            let bm = bv.into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&am.dot(&bm).into_dyn());
        }
        let (pa, pb) = (a.clone(), b.clone());
        let res = Tensor::from_op(
            out,
            vec![a, b],
            Box::new(move |cot| {
                let da = cot.matmul(&pb.transpose_last2());
                let db = pa.transpose_last2().matmul(cot);
                vec![Some(da), Some(db)]
            }),
        );
        let mut out_shape = lead;
        out_shape.push(m);
        out_shape.push(n);
        res.reshape(&out_shape)
    }

    fn matmul2(&self, other: &Tensor) -> Tensor {
        let a = self
            .0
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("lhs 2d");
        let b = other
            .0
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rhs 2d");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims");
        let data = a.dot(&b).into_dyn();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |cot| {
                let da = cot.matmul2(&pb.transpose_last2());
                let db = pa.transpose_last2().matmul2(cot);
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn transpose_last2(&self) -> Tensor {
        let n = self.shape().len();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar. Returns gradients keyed by tensor id.
    pub fn backward(&self) -> Gradients {
        self.backward_with(false)
    }

    /// With `create_graph`, returned gradients are themselves differentiable.
    pub fn backward_with(&self, create_graph: bool) -> Gradients {
        assert_eq!(self.len(), 1, "backward() expects a scalar loss");
        let mut topo: Vec<Tensor> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if seen.contains_key(&node.0.id) {
                continue;
            }
            if child_idx < node.0.parents.len() {
                let child = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if !seen.contains_key(&child.0.id) && child.0.grad_capable {
                    stack.push((child, 0));
                }
            } else {
                seen.insert(node.0.id, ());
                topo.push(node);
            }
        }
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(self.0.id, Tensor::ones(self.shape()));
        for node in topo.iter().rev() {
            let cot = match grads.get(&node.0.id) {
                Some(c) => c.clone(),
                None => continue,
            };
            if let Some(vjp) = &node.0.vjp {
                let parent_cots = vjp(&cot);
                for (parent, pcot) in node.0.parents.iter().zip(parent_cots) {
                    if !parent.0.grad_capable {
                        continue;
                    }
                    if let Some(mut pc) = pcot {
                        if !create_graph {
                            pc = pc.detach();
                        }
                        grads
                            .entry(parent.0.id)
                            .and_modify(|g| *g = g.add(&pc))
                            .or_insert(pc);
                    }
                }
            }
        }
        Gradients { map: grads }
    }
}

/// Gradients from one backward sweep, keyed by tensor id.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    /// Gradient of `t`, or zeros if it never appeared in the graph.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.map
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let av = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bv = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            av == bv || av == 1 || bv == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = av.max(bv);
    }
    out
}

fn broadcast_pair(a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    (a.broadcast_to(&shape), b.broadcast_to(&shape))
}
