//! Minimal reverse-mode autodiff over `ndarray`, generic in the scalar type.
//!
//! A [`Graph`] is a tape of nodes built during the forward pass; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Nodes reachable only from non-differentiable leaves carry no backward
//! closure, so teacher/frozen-encoder forwards cost no extra memory.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod params;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::real::Real;

pub use conv::majority_pool_mask;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Tv(usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<(usize, ArrayD<T>)>>;

struct Node<T: Real> {
    value: Rc<ArrayD<T>>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, t: Tv) -> Option<&ArrayD<T>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: ArrayD<T>, requires_grad: bool) -> Tv {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad: requires_grad,
            backward: None,
        });
        Tv(nodes.len() - 1)
    }

    pub fn constant(&self, value: ArrayD<T>) -> Tv {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Tv {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, t: Tv) -> Rc<ArrayD<T>> {
        self.nodes.borrow()[t.0].value.clone()
    }

    pub fn shape(&self, t: Tv) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, t: Tv) -> bool {
        self.nodes.borrow()[t.0].needs_grad
    }

    fn push(&self, value: ArrayD<T>, parents: &[Tv], back: BackFn<T>) -> Tv {
        let mut nodes = self.nodes.borrow_mut();
        let needs = parents.iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad: needs,
            backward: if needs { Some(back) } else { None },
        });
        Tv(nodes.len() - 1)
    }

    /// Reverse pass from `t` (gradient seeded with ones).
    pub fn backward(&self, t: Tv) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[t.0] = Some(ArrayD::from_elem(nodes[t.0].value.raw_dim(), T::one()));
        for i in (0..=t.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &nodes[i].backward {
                for (pid, contrib) in back(&g) {
                    if !nodes[pid].needs_grad {
                        continue;
                    }
                    // keep gradients in standard layout; some closures emit
                    // permuted or F-order arrays
                    let contrib = if contrib.is_standard_layout() {
                        contrib
                    } else {
                        contrib.as_standard_layout().into_owned()
                    };
                    match &mut grads[pid] {
                        Some(acc) => *acc = &*acc + &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&self, a: Tv, b: Tv) -> Tv {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            &[a, b],
            Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())]),
        )
    }

    pub fn sub(&self, a: Tv, b: Tv) -> Tv {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            &[a, b],
            Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.mapv(|x| -x))]),
        )
    }

    pub fn mul(&self, a: Tv, b: Tv) -> Tv {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            &[a, b],
            Box::new(move |g| vec![(a.0, g * &*vb), (b.0, g * &*va)]),
        )
    }

    pub fn scale(&self, a: Tv, c: T) -> Tv {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        self.push(out, &[a], Box::new(move |g| vec![(a.0, g.mapv(|x| x * c))]))
    }

    pub fn relu(&self, a: Tv) -> Tv {
        let va = self.value(a);
        let out = va.mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &x| {
                    if x <= T::zero() {
                        *d = T::zero()
                    }
                });
                vec![(a.0, dg)]
            }),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self, a: Tv) -> Tv {
        let va = self.value(a);
        let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let out = va.mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
                    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                    *d = *d * deriv;
                });
                vec![(a.0, dg)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Tv) -> Tv {
        let va = self.value(a);
        let out = va.mapv(|x| T::one() / (T::one() + (-x).exp()));
        let ov = out.clone();
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&ov, |d, &s| *d = *d * s * (T::one() - s));
                vec![(a.0, dg)]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, a: Tv, shape: &[usize]) -> Tv {
        let va = self.value(a);
        let old_shape: Vec<usize> = va.shape().to_vec();
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = va
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let back = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap();
                vec![(a.0, back)]
            }),
        )
    }

    pub fn permute(&self, a: Tv, axes: &[usize]) -> Tv {
        let va = self.value(a);
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                vec![(a.0, back)]
            }),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Tv]) -> Tv {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            parts,
            Box::new(move |g| {
                let mut res = Vec::new();
                let mut off = 0;
                for (&id, &sz) in ids.iter().zip(&sizes) {
                    let sl = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(off..off + sz))
                        .to_owned();
                    res.push((id, sl));
                    off += sz;
                }
                res
            }),
        )
    }

    // ---- linear algebra ----

    /// `[M,K] x [K,N] -> [M,N]`
    pub fn matmul(&self, a: Tv, b: Tv) -> Tv {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    (a.0, g2.dot(&b2.t()).into_dyn()),
                    (b.0, a2.t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }

    /// Batched matmul: `[B,M,K] x [B,K,N] -> [B,M,N]`
    pub fn bmm(&self, a: Tv, b: Tv) -> Tv {
        let (va, vb) = (self.value(a), self.value(b));
        let (ba, bb) = (va.shape()[0], vb.shape()[0]);
        assert_eq!(ba, bb, "bmm: batch mismatch");
        let (m, n) = (va.shape()[1], vb.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[ba, m, n]));
        for i in 0..ba {
            let ai = va
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = vb
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                let mut da = ArrayD::zeros(va.raw_dim());
                let mut db = ArrayD::zeros(vb.raw_dim());
                for i in 0..ba {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let ai = va
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let bi = vb
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                vec![(a.0, da), (b.0, db)]
            }),
        )
    }

    /// Broadcast-add a `[C]` bias to the rows of `[N,C]`.
    pub fn add_rows(&self, x: Tv, bias: Tv) -> Tv {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vx.shape()[vx.ndim() - 1], vb.shape()[0]);
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = &*vx + &b1;
        self.push(
            out,
            &[x, bias],
            Box::new(move |g| {
                let cols = g.shape()[g.ndim() - 1];
                let g2 = g
                    .view()
                    .into_shape_with_order((g.len() / cols, cols))
                    .unwrap();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![(x.0, g.clone()), (bias.0, db)]
            }),
        )
    }

    /// Broadcast-add a `[C]` bias over `[C,H,W]` channels.
    pub fn add_chan(&self, x: Tv, bias: Tv) -> Tv {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vx.shape()[0], vb.shape()[0]);
        let mut out = vx.as_ref().clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let b = vb[[c]];
            plane.mapv_inplace(|v| v + b);
        }
        self.push(
            out,
            &[x, bias],
            Box::new(move |g| {
                let c = g.shape()[0];
                let mut db = ArrayD::zeros(IxDyn(&[c]));
                for (ci, plane) in g.axis_iter(Axis(0)).enumerate() {
                    db[[ci]] = plane.sum();
                }
                vec![(x.0, g.clone()), (bias.0, db)]
            }),
        )
    }

    // ---- normalization / softmax ----

    /// Layer norm over the last dimension; `x: [..., C]`, `gamma`, `beta: [C]`.
    pub fn layer_norm(&self, x: Tv, gamma: Tv, beta: Tv, eps: T) -> Tv {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.shape()[vx.ndim() - 1];
        let rows = vx.len() / c;
        let x2 = vx
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, c))
            .unwrap();
        let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = ndarray::Array2::<T>::zeros((rows, c));
        let mut means = Vec::with_capacity(rows);
        let mut istds = Vec::with_capacity(rows);
        let cn = T::from_usize(c);
        for i in 0..rows {
            let row = x2.row(i);
            let mean = row.sum() / cn;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / cn;
            let istd = T::one() / (var + eps).sqrt();
            means.push(mean);
            istds.push(istd);
            for j in 0..c {
                out[[i, j]] = (x2[[i, j]] - mean) * istd * g1[j] + b1[j];
            }
        }
        let shape: Vec<usize> = vx.shape().to_vec();
        let out = out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        let x2 = x2.clone();
        let vg2 = vg.clone();
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g| {
                let g2 = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((rows, c))
                    .unwrap();
                let gam = vg2.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dx = ndarray::Array2::<T>::zeros((rows, c));
                let mut dgamma = ndarray::Array1::<T>::zeros(c);
                let mut dbeta = ndarray::Array1::<T>::zeros(c);
                let cn = T::from_usize(c);
                for i in 0..rows {
                    let mean = means[i];
                    let istd = istds[i];
                    // xhat_j and intermediate sums
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (x2[[i, j]] - mean) * istd;
                        let dy = g2[[i, j]] * gam[j];
                        sum_dy = sum_dy + dy;
                        sum_dy_xhat = sum_dy_xhat + dy * xhat;
                        dgamma[j] = dgamma[j] + g2[[i, j]] * xhat;
                        dbeta[j] = dbeta[j] + g2[[i, j]];
                    }
                    for j in 0..c {
                        let xhat = (x2[[i, j]] - mean) * istd;
                        dx[[i, j]] = istd * ((g2[[i, j]] * gam[j]) - sum_dy / cn - xhat * sum_dy_xhat / cn);
                    }
                }
                let shape: Vec<usize> = g.shape().to_vec();
                vec![
                    (x.0, dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()),
                    (gamma.0, dgamma.into_dyn()),
                    (beta.0, dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&self, x: Tv) -> Tv {
        let vx = self.value(x);
        let c = vx.shape()[vx.ndim() - 1];
        let rows = vx.len() / c;
        let x2 = vx
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, c))
            .unwrap();
        let mut out = ndarray::Array2::<T>::zeros((rows, c));
        for i in 0..rows {
            let row = x2.row(i);
            let mx = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[[i, j]] = e;
                denom = denom + e;
            }
            for j in 0..c {
                out[[i, j]] = out[[i, j]] / denom;
            }
        }
        let shape: Vec<usize> = vx.shape().to_vec();
        let outd = out
            .clone()
            .into_dyn()
            .into_shape_with_order(IxDyn(&shape))
            .unwrap();
        self.push(
            outd,
            &[x],
            Box::new(move |g| {
                let g2 = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((rows, c))
                    .unwrap();
                let mut dx = ndarray::Array2::<T>::zeros((rows, c));
                for i in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g2[[i, j]] * out[[i, j]];
                    }
                    for j in 0..c {
                        dx[[i, j]] = out[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                let shape: Vec<usize> = g.shape().to_vec();
                vec![(x.0, dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap())]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: Tv) -> Tv {
        let vx = self.value(x);
        let out = ArrayD::from_elem(IxDyn(&[]), vx.sum());
        let dim = vx.raw_dim();
        self.push(
            out,
            &[x],
            Box::new(move |g| {
                let gs = g[[]];
                vec![(x.0, ArrayD::from_elem(dim.clone(), gs))]
            }),
        )
    }

    pub fn mean_all(&self, x: Tv) -> Tv {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n))
    }

    /// Global average pool: `[C,H,W] -> [C]`.
    pub fn gap(&self, x: Tv) -> Tv {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for (ci, plane) in vx.axis_iter(Axis(0)).enumerate() {
            out[[ci]] = plane.sum() / T::from_usize(h * w);
        }
        self.push(
            out,
            &[x],
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for (ci, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let v = g[[ci]] / T::from_usize(h * w);
                    plane.fill(v);
                }
                vec![(x.0, dx)]
            }),
        )
    }

    // ---- fused losses ----

    /// Weighted cross-entropy with ignore-index, normalized by the number of
    /// contributing (non-ignored) entries. `logits: [N,C]`, `target[i]` is a
    /// class index or `usize::MAX` to ignore, `weight[i] >= 0`.
    pub fn cross_entropy(&self, logits: Tv, target: Rc<Vec<usize>>, weight: Rc<Vec<T>>) -> Tv {
        let vl = self.value(logits);
        let (n, c) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(target.len(), n);
        assert_eq!(weight.len(), n);
        let l2 = vl.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        // log-softmax rows for target entries
        let mut probs = ndarray::Array2::<T>::zeros((n, c));
        let mut loss = T::zero();
        let mut count = 0usize;
        for i in 0..n {
            if target[i] == usize::MAX {
                continue;
            }
            count += 1;
            let row = l2.row(i);
            let mx = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[[i, j]] = e;
                denom = denom + e;
            }
            for j in 0..c {
                probs[[i, j]] = probs[[i, j]] / denom;
            }
            let logp = (row[target[i]] - mx) - denom.ln();
            loss = loss - weight[i] * logp;
        }
        let norm = T::from_usize(count.max(1));
        let out = ArrayD::from_elem(IxDyn(&[]), loss / norm);
        self.push(
            out,
            &[logits],
            Box::new(move |g| {
                let gs = g[[]] / norm;
                let mut dx = ndarray::Array2::<T>::zeros((n, c));
                for i in 0..n {
                    if target[i] == usize::MAX {
                        continue;
                    }
                    for j in 0..c {
                        let ind = if j == target[i] { T::one() } else { T::zero() };
                        dx[[i, j]] = gs * weight[i] * (probs[[i, j]] - ind);
                    }
                }
                vec![(logits.0, dx.into_dyn())]
            }),
        )
    }

    /// Weighted binary cross-entropy with logits, normalized by total element
    /// count (weights included in the numerator only).
    pub fn bce_with_logits(&self, logits: Tv, target: Rc<ArrayD<T>>, weight: Rc<ArrayD<T>>) -> Tv {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), target.shape());
        assert_eq!(vl.shape(), weight.shape());
        let n = T::from_usize(vl.len().max(1));
        let mut loss = T::zero();
        ndarray::Zip::from(&*vl).and(&*target).and(&*weight).for_each(|&x, &t, &w| {
            // stable: log(1+exp(-|x|)) + max(x,0) - x*t
            let abs = x.abs();
            let l = (T::one() + (-abs).exp()).ln() + x.max(T::zero()) - x * t;
            loss = loss + w * l;
        });
        let out = ArrayD::from_elem(IxDyn(&[]), loss / n);
        self.push(
            out,
            &[logits],
            Box::new(move |g| {
                let gs = g[[]] / n;
                let mut dx = ArrayD::zeros(vl.raw_dim());
                ndarray::Zip::from(&mut dx)
                    .and(&*vl)
                    .and(&*target)
                    .and(&*weight)
                    .for_each(|d, &x, &t, &w| {
                        let s = T::one() / (T::one() + (-x).exp());
                        *d = gs * w * (s - t);
                    });
                vec![(logits.0, dx)]
            }),
        )
    }

    /// Weighted L1 loss, normalized by the sum of weights (0 if all zero).
    pub fn l1_loss(&self, pred: Tv, target: Rc<ArrayD<T>>, weight: Rc<ArrayD<T>>) -> Tv {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape());
        assert_eq!(vp.shape(), weight.shape());
        let wsum: T = weight.iter().fold(T::zero(), |a, &b| a + b);
        let norm = if wsum > T::zero() { wsum } else { T::one() };
        let mut loss = T::zero();
        ndarray::Zip::from(&*vp).and(&*target).and(&*weight).for_each(|&p, &t, &w| {
            loss = loss + w * (p - t).abs();
        });
        let out = ArrayD::from_elem(IxDyn(&[]), loss / norm);
        self.push(
            out,
            &[pred],
            Box::new(move |g| {
                let gs = g[[]] / norm;
                let mut dx = ArrayD::zeros(vp.raw_dim());
                ndarray::Zip::from(&mut dx)
                    .and(&*vp)
                    .and(&*target)
                    .and(&*weight)
                    .for_each(|d, &p, &t, &w| {
                        let sgn = if p > t {
                            T::one()
                        } else if p < t {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = gs * w * sgn;
                    });
                vec![(pred.0, dx)]
            }),
        )
    }

    /// Weighted MSE, normalized by total element count.
    pub fn mse_loss(&self, pred: Tv, target: Rc<ArrayD<T>>, weight: Rc<ArrayD<T>>) -> Tv {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape());
        assert_eq!(vp.shape(), weight.shape());
        let n = T::from_usize(vp.len().max(1));
        let mut loss = T::zero();
        ndarray::Zip::from(&*vp).and(&*target).and(&*weight).for_each(|&p, &t, &w| {
            loss = loss + w * (p - t) * (p - t);
        });
        let out = ArrayD::from_elem(IxDyn(&[]), loss / n);
        self.push(
            out,
            &[pred],
            Box::new(move |g| {
                let gs = g[[]] / n;
                let mut dx = ArrayD::zeros(vp.raw_dim());
                ndarray::Zip::from(&mut dx)
                    .and(&*vp)
                    .and(&*target)
                    .and(&*weight)
                    .for_each(|d, &p, &t, &w| {
                        *d = gs * w * T::from_f64(2.0) * (p - t);
                    });
                vec![(pred.0, dx)]
            }),
        )
    }

    /// Mean per-location Euclidean feature distance over masked locations.
    /// `student: [C,H,W]`, `reference: [C,H,W]` (constant), `mask: [H,W]`.
    /// Returns 0 when the mask is empty.
    pub fn feature_distance(&self, student: Tv, reference: Rc<ArrayD<T>>, mask: Rc<ndarray::Array2<bool>>) -> Tv {
        let vs = self.value(student);
        assert_eq!(vs.shape(), reference.shape());
        let (c, h, w) = (vs.shape()[0], vs.shape()[1], vs.shape()[2]);
        assert_eq!(mask.dim(), (h, w));
        let count = mask.iter().filter(|&&m| m).count();
        let mut norms = ndarray::Array2::<T>::zeros((h, w));
        let mut loss = T::zero();
        if count > 0 {
            for y in 0..h {
                for x in 0..w {
                    if !mask[[y, x]] {
                        continue;
                    }
                    let mut s = T::zero();
                    for ci in 0..c {
                        let d = vs[[ci, y, x]] - reference[[ci, y, x]];
                        s = s + d * d;
                    }
                    norms[[y, x]] = s.sqrt();
                    loss = loss + norms[[y, x]];
                }
            }
            loss = loss / T::from_usize(count);
        }
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(
            out,
            &[student],
            Box::new(move |g| {
                let gs = g[[]];
                let mut dx = ArrayD::zeros(vs.raw_dim());
                if count > 0 {
                    let cnt = T::from_usize(count);
                    for y in 0..h {
                        for x in 0..w {
                            if !mask[[y, x]] || norms[[y, x]] <= T::epsilon() {
                                continue;
                            }
                            for ci in 0..c {
                                let d = vs[[ci, y, x]] - reference[[ci, y, x]];
                                dx[[ci, y, x]] = gs * d / (norms[[y, x]] * cnt);
                            }
                        }
                    }
                }
                vec![(student.0, dx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn add_mul_backward() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), true);
        let b = g.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn(), true);
        let c = g.mul(g.add(a, b), b);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        // d/da (a+b)*b = b
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 5.0);
        // d/db = (a+b) + b = a + 2b
        assert_eq!(grads.get(b).unwrap()[[1, 1]], 4.0 + 16.0);
    }

    #[test]
    fn matmul_backward_matches_manual() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0]]).into_dyn(), true);
        let b = g.leaf(arr2(&[[3.0], [4.0]]).into_dyn(), true);
        let c = g.matmul(a, b);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 3.0);
        assert_eq!(grads.get(a).unwrap()[[0, 1]], 4.0);
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn constants_skip_backward() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = g.constant(arr2(&[[3.0, 4.0]]).into_dyn());
        let c = g.mul(a, b);
        assert!(!g.needs_grad(c));
    }
}
