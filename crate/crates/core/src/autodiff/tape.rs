use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::layout::{JetLayout, Shape};
use super::prim::Prim;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Dense affine map recorded on the tape: `y = W x + b`, applied to every
/// jet component (the bias only touches the value component).
#[derive(Debug, Clone)]
pub struct AffineSpec {
    pub out_units: usize,
    /// Effective weights, row-major `out_units x in_units`.
    pub weights: Vec<f64>,
    /// Parameter feeding each weight; `None` for structural zeros and
    /// masked entries.
    pub weight_src: Vec<Option<usize>>,
    pub bias: Option<(Vec<f64>, Vec<Option<usize>>)>,
    /// When set, each row of `weights` is `softmax(alpha / T)` over the rows'
    /// sourced entries and gradients are routed to the raw `alpha`.
    pub softmax_temperature: Option<f64>,
}

#[derive(Debug)]
struct AffineNode {
    x: NodeId,
    in_units: usize,
    spec: AffineSpec,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Expand(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Map(NodeId, Vec<Prim>),
    Component(NodeId, usize),
    Unit(NodeId, usize),
    SumPoints(NodeId),
    Pairs(NodeId),
    Concat(NodeId, NodeId),
    MaskMul(NodeId, Vec<f64>),
    Affine(Box<AffineNode>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Expand(_) => "expand",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Map(_, prims) if prims.len() == 1 => prims[0].name(),
            Op::Map(..) => "map",
            Op::Component(..) => "component",
            Op::Unit(..) => "unit",
            Op::SumPoints(_) => "sum_points",
            Op::Pairs(_) => "pairs",
            Op::Concat(..) => "concat",
            Op::MaskMul(..) => "mask_mul",
            Op::Affine(_) => "affine",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Shape,
    data: Vec<f64>,
}

/// Reverse-mode tape whose nodes are batches of input jets.
///
/// Every node holds `units x width x points` reals. Forward values are
/// computed eagerly when a node is recorded; [`Tape::backward`] accumulates
/// parameter gradients of a scalar node.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    n_params: usize,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new(n_params: usize) -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(64)), n_params }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Shape, data: Vec<f64>) -> Var<'_> {
        debug_assert_eq!(shape.len(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape, data });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, Shape::SCALAR, vec![value])
    }

    /// Constant node with explicit shape; `data` is laid out as in [`Shape::at`].
    pub fn leaf(&self, shape: Shape, data: Vec<f64>) -> Var<'_> {
        assert_eq!(shape.len(), data.len(), "leaf data does not match shape");
        self.push(Op::Leaf, shape, data)
    }

    /// Per-point constants: one unit, no derivative components.
    pub fn point_values(&self, values: Vec<f64>) -> Var<'_> {
        let n = values.len();
        self.leaf(Shape::new(1, JetLayout::SCALAR, n), values)
    }

    /// Scalar parameter leaf; its gradient is accumulated into slot `index`.
    pub fn param(&self, index: usize, value: f64) -> Var<'_> {
        assert!(index < self.n_params, "parameter index {index} out of range");
        self.push(Op::Param(index), Shape::SCALAR, vec![value])
    }

    /// Seeds a batch of input points as jets. `points` is row-major
    /// `n x dim`; input axis `wrt[i]` receives unit derivative in slot `i`.
    pub fn input(&self, points: &[f64], dim: usize, wrt: &[usize], order: usize) -> Var<'_> {
        assert!(dim > 0 && points.len() % dim == 0, "point buffer not a multiple of arity");
        let n = points.len() / dim;
        let layout = JetLayout::new(wrt.len(), order);
        let shape = Shape::new(dim, layout, n);
        let mut data = vec![0.0; shape.len()];
        for u in 0..dim {
            for p in 0..n {
                data[shape.at(u, 0, p)] = points[p * dim + u];
            }
        }
        if layout.order() >= 1 {
            for (slot, &axis) in wrt.iter().enumerate() {
                assert!(axis < dim, "derivative axis {axis} outside arity {dim}");
                let c = layout.d1(slot);
                for p in 0..n {
                    data[shape.at(axis, c, p)] = 1.0;
                }
            }
        }
        self.push(Op::Leaf, shape, data)
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes.borrow()[id].shape
    }

    pub fn values(&self, v: Var<'_>) -> Vec<f64> {
        self.nodes.borrow()[v.id].data.clone()
    }

    pub fn with_values<R>(&self, v: Var<'_>, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[v.id].data)
    }

    /// Smallest |input| seen by a primitive with a kink at zero. Used to
    /// validate finite-difference checks.
    pub fn min_kink_distance(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut best = f64::INFINITY;
        for node in nodes.iter() {
            if let Op::Map(a, prims) = &node.op {
                let a = &nodes[*a];
                let w = a.shape.width() * a.shape.points;
                for u in 0..a.shape.units {
                    let prim = prims[u % prims.len()];
                    let kinked = matches!(
                        prim,
                        Prim::Abs | Prim::Relu | Prim::ExpAbs | Prim::ExpNegAbs | Prim::SqrtAbs | Prim::SafeLog(_)
                    );
                    if kinked {
                        for &x in &a.data[u * w..u * w + a.shape.points] {
                            best = best.min(x.abs());
                        }
                    }
                }
            }
        }
        best
    }

    fn broadcast_shape(a: Shape, b: Shape) -> Shape {
        let pick = |x: usize, y: usize, what: &str| -> usize {
            if x == y || y == 1 {
                x
            } else if x == 1 {
                y
            } else {
                panic!("cannot broadcast {what}: {x} vs {y}")
            }
        };
        let layout = if a.layout == b.layout || b.layout.is_scalar() {
            a.layout
        } else if a.layout.is_scalar() {
            b.layout
        } else {
            panic!("cannot broadcast jet layouts {:?} and {:?}", a.layout, b.layout)
        };
        Shape::new(pick(a.units, b.units, "units"), layout, pick(a.points, b.points, "points"))
    }

    fn expand_to(&self, id: NodeId, target: Shape) -> NodeId {
        let data = {
            let nodes = self.nodes.borrow();
            let src = &nodes[id];
            if src.shape == target {
                return id;
            }
            let s = src.shape;
            let mut out = vec![0.0; target.len()];
            for u in 0..target.units {
                let su = if s.units == 1 { 0 } else { u };
                for c in 0..s.width() {
                    for p in 0..target.points {
                        let sp = if s.points == 1 { 0 } else { p };
                        out[target.at(u, c, p)] = src.data[s.at(su, c, sp)];
                    }
                }
            }
            out
        };
        self.push(Op::Expand(id), target, data).id
    }

    fn binary(&self, a: NodeId, b: NodeId, kind: u8) -> Var<'_> {
        let target = Self::broadcast_shape(self.shape(a), self.shape(b));
        let a = self.expand_to(a, target);
        let b = self.expand_to(b, target);
        let data = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].data, &nodes[b].data);
            match kind {
                0 => x.iter().zip(y).map(|(p, q)| p + q).collect(),
                1 => x.iter().zip(y).map(|(p, q)| p - q).collect(),
                _ => {
                    let mut out = vec![0.0; target.len()];
                    for u in 0..target.units {
                        let r = target.unit_block(u);
                        jet_mul(target.layout, target.points, &x[r.clone()], &y[r.clone()], &mut out[r]);
                    }
                    out
                }
            }
        };
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(op, target, data)
    }

    /// Accumulates `d node / d params` for a scalar node. Returns the dense
    /// gradient over all `n_params` slots (masking is the caller's concern).
    pub fn backward(&self, root: Var<'_>) -> Result<Vec<f64>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].shape;
        assert_eq!(root_shape, Shape::SCALAR, "backward requires a scalar node");
        if !nodes[root.id].data[0].is_finite() {
            return Err(Error::NonFinite { context: format!("loss value at tape node '{}'", nodes[root.id].op.kind()) });
        }
        let mut grads = vec![0.0; self.n_params];
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.id).map(|_| None).collect();
        adj[root.id] = Some(vec![1.0]);

        fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'a mut Vec<f64> {
            adj[id].get_or_insert_with(|| vec![0.0; nodes[id].shape.len()])
        }

        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: format!("adjoint at tape node '{}'", node.op.kind()) });
            }
            let shape = node.shape;
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => grads[*i] += g[0],
                Op::Expand(a) => {
                    let s = nodes[*a].shape;
                    let ga = slot(&mut adj, &nodes, *a);
                    for u in 0..shape.units {
                        let su = if s.units == 1 { 0 } else { u };
                        for c in 0..s.width() {
                            for p in 0..shape.points {
                                let sp = if s.points == 1 { 0 } else { p };
                                ga[s.at(su, c, sp)] += g[shape.at(u, c, p)];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut adj, &nodes, *a), &g, 1.0);
                    add_into(slot(&mut adj, &nodes, *b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut adj, &nodes, *a), &g, 1.0);
                    add_into(slot(&mut adj, &nodes, *b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (&nodes[*a].data, &nodes[*b].data);
                    let mut ga = vec![0.0; shape.len()];
                    let mut gb = vec![0.0; shape.len()];
                    for u in 0..shape.units {
                        let r = shape.unit_block(u);
                        jet_mul_backward(
                            shape.layout,
                            shape.points,
                            &xa[r.clone()],
                            &xb[r.clone()],
                            &g[r.clone()],
                            &mut ga[r.clone()],
                            &mut gb[r],
                        );
                    }
                    add_into(slot(&mut adj, &nodes, *a), &ga, 1.0);
                    add_into(slot(&mut adj, &nodes, *b), &gb, 1.0);
                }
                Op::Scale(a, c) => add_into(slot(&mut adj, &nodes, *a), &g, *c),
                Op::Shift(a) => add_into(slot(&mut adj, &nodes, *a), &g, 1.0),
                Op::Map(a, prims) => {
                    let xa = &nodes[*a].data;
                    let ga = slot(&mut adj, &nodes, *a);
                    for u in 0..shape.units {
                        let r = shape.unit_block(u);
                        map_backward(
                            prims[u % prims.len()],
                            shape.layout,
                            shape.points,
                            &xa[r.clone()],
                            &g[r.clone()],
                            &mut ga[r],
                        );
                    }
                }
                Op::Component(a, c) => {
                    let s = nodes[*a].shape;
                    let ga = slot(&mut adj, &nodes, *a);
                    for u in 0..s.units {
                        for p in 0..s.points {
                            ga[s.at(u, *c, p)] += g[shape.at(u, 0, p)];
                        }
                    }
                }
                Op::Unit(a, unit) => {
                    let s = nodes[*a].shape;
                    let ga = slot(&mut adj, &nodes, *a);
                    add_into(&mut ga[s.unit_block(*unit)], &g, 1.0);
                }
                Op::SumPoints(a) => {
                    let s = nodes[*a].shape;
                    let ga = slot(&mut adj, &nodes, *a);
                    for u in 0..s.units {
                        for c in 0..s.width() {
                            let gv = g[shape.at(u, c, 0)];
                            for p in 0..s.points {
                                ga[s.at(u, c, p)] += gv;
                            }
                        }
                    }
                }
                Op::Pairs(a) => {
                    let s = nodes[*a].shape;
                    let xa = &nodes[*a].data;
                    let mut ga = vec![0.0; s.len()];
                    let block = s.width() * s.points;
                    let mut tmp_i = vec![0.0; block];
                    let mut tmp_j = vec![0.0; block];
                    let mut k = 0;
                    for i in 0..s.units {
                        for j in 0..=i {
                            tmp_i.iter_mut().for_each(|v| *v = 0.0);
                            tmp_j.iter_mut().for_each(|v| *v = 0.0);
                            jet_mul_backward(
                                s.layout,
                                s.points,
                                &xa[s.unit_block(i)],
                                &xa[s.unit_block(j)],
                                &g[shape.unit_block(k)],
                                &mut tmp_i,
                                &mut tmp_j,
                            );
                            add_into(&mut ga[s.unit_block(i)], &tmp_i, 1.0);
                            add_into(&mut ga[s.unit_block(j)], &tmp_j, 1.0);
                            k += 1;
                        }
                    }
                    add_into(slot(&mut adj, &nodes, *a), &ga, 1.0);
                }
                Op::Concat(a, b) => {
                    let na = nodes[*a].shape.len();
                    add_into(slot(&mut adj, &nodes, *a), &g[..na], 1.0);
                    add_into(slot(&mut adj, &nodes, *b), &g[na..], 1.0);
                }
                Op::MaskMul(a, mask) => {
                    let ga = slot(&mut adj, &nodes, *a);
                    for u in 0..shape.units {
                        for c in 0..shape.width() {
                            for p in 0..shape.points {
                                let i = shape.at(u, c, p);
                                ga[i] += g[i] * mask[u * shape.points + p];
                            }
                        }
                    }
                }
                Op::Affine(aff) => {
                    let x = &nodes[aff.x];
                    let cols = x.shape.width() * x.shape.points;
                    let (n_out, n_in) = (aff.spec.out_units, aff.in_units);
                    let gv = ArrayView2::from_shape((n_out, cols), &g[..]).expect("affine adjoint shape");
                    let xv = ArrayView2::from_shape((n_in, cols), &x.data[..]).expect("affine input shape");
                    let wv = ArrayView2::from_shape((n_out, n_in), &aff.spec.weights[..]).expect("affine weights");
                    {
                        let gx = slot(&mut adj, &nodes, aff.x);
                        let mut gxv = ArrayViewMut2::from_shape((n_in, cols), &mut gx[..]).expect("affine adjoint");
                        general_mat_mul(1.0, &wv.t(), &gv, 1.0, &mut gxv);
                    }
                    let mut gw = ndarray::Array2::<f64>::zeros((n_out, n_in));
                    general_mat_mul(1.0, &gv, &xv.t(), 0.0, &mut gw);
                    let gw = gw.as_slice().expect("contiguous");
                    match aff.spec.softmax_temperature {
                        None => {
                            for (k, src) in aff.spec.weight_src.iter().enumerate() {
                                if let Some(i) = src {
                                    grads[*i] += gw[k];
                                }
                            }
                        }
                        Some(t) => {
                            for r in 0..n_out {
                                let row = r * n_in..(r + 1) * n_in;
                                let w = &aff.spec.weights[row.clone()];
                                let src = &aff.spec.weight_src[row.clone()];
                                let dot: f64 = (0..n_in).filter(|&k| src[k].is_some()).map(|k| w[k] * gw[row.start + k]).sum();
                                for k in 0..n_in {
                                    if let Some(i) = src[k] {
                                        grads[i] += w[k] * (gw[row.start + k] - dot) / t;
                                    }
                                }
                            }
                        }
                    }
                    if let Some((_, bsrc)) = &aff.spec.bias {
                        let pts = x.shape.points;
                        for (u, src) in bsrc.iter().enumerate() {
                            if let Some(i) = src {
                                grads[*i] += g[u * cols..u * cols + pts].iter().sum::<f64>();
                            }
                        }
                    }
                    if let Some(bad) = grads.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            context: format!("parameter {bad} gradient at tape node 'affine'"),
                        });
                    }
                }
            }
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "parameter gradient accumulation".into() });
        }
        Ok(grads)
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// `out = a * b` on one unit's jet block (`width x points`).
fn jet_mul(layout: JetLayout, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let c = |k: usize| k * n..(k + 1) * n;
    let (av, bv) = (&a[c(0)], &b[c(0)]);
    for p in 0..n {
        out[p] = av[p] * bv[p];
    }
    for (k, _) in layout.firsts() {
        let (ak, bk) = (&a[c(k)], &b[c(k)]);
        let o = &mut out[c(k)];
        for p in 0..n {
            o[p] = av[p] * bk[p] + ak[p] * bv[p];
        }
    }
    for (k, i, j) in layout.seconds() {
        let (ai, aj, bi, bj) = (&a[c(1 + i)], &a[c(1 + j)], &b[c(1 + i)], &b[c(1 + j)]);
        let (ak, bk) = (&a[c(k)], &b[c(k)]);
        let o = &mut out[c(k)];
        for p in 0..n {
            o[p] = av[p] * bk[p] + ak[p] * bv[p] + ai[p] * bj[p] + aj[p] * bi[p];
        }
    }
}

fn jet_mul_backward(layout: JetLayout, n: usize, a: &[f64], b: &[f64], g: &[f64], ga: &mut [f64], gb: &mut [f64]) {
    let c = |k: usize| k * n..(k + 1) * n;
    for p in 0..n {
        ga[p] += g[p] * b[p];
        gb[p] += g[p] * a[p];
    }
    for (k, _) in layout.firsts() {
        for p in 0..n {
            let gk = g[k * n + p];
            ga[p] += gk * b[k * n + p];
            gb[p] += gk * a[k * n + p];
            ga[k * n + p] += gk * b[p];
            gb[k * n + p] += gk * a[p];
        }
    }
    for (k, i, j) in layout.seconds() {
        let (ci, cj, ck) = (c(1 + i).start, c(1 + j).start, c(k).start);
        for p in 0..n {
            let gk = g[ck + p];
            ga[p] += gk * b[ck + p];
            gb[p] += gk * a[ck + p];
            ga[ck + p] += gk * b[p];
            gb[ck + p] += gk * a[p];
            ga[ci + p] += gk * b[cj + p];
            ga[cj + p] += gk * b[ci + p];
            gb[ci + p] += gk * a[cj + p];
            gb[cj + p] += gk * a[ci + p];
        }
    }
}

fn map_forward(prim: Prim, layout: JetLayout, n: usize, a: &[f64], out: &mut [f64]) {
    for p in 0..n {
        let [f0, f1, f2, _] = prim.derivs(a[p]);
        out[p] = f0;
        for (k, _) in layout.firsts() {
            out[k * n + p] = f1 * a[k * n + p];
        }
        for (k, i, j) in layout.seconds() {
            out[k * n + p] = f1 * a[k * n + p] + f2 * a[(1 + i) * n + p] * a[(1 + j) * n + p];
        }
    }
}

fn map_forward_value(prim: Prim, n: usize, a: &[f64], out: &mut [f64]) {
    for p in 0..n {
        out[p] = prim.value(a[p]);
    }
}

fn map_backward(prim: Prim, layout: JetLayout, n: usize, a: &[f64], g: &[f64], ga: &mut [f64]) {
    for p in 0..n {
        let [_, f1, f2, f3] = prim.derivs(a[p]);
        let mut gv = f1 * g[p];
        for (k, _) in layout.firsts() {
            gv += f2 * a[k * n + p] * g[k * n + p];
            ga[k * n + p] += f1 * g[k * n + p];
        }
        for (k, i, j) in layout.seconds() {
            let (ai, aj) = (a[(1 + i) * n + p], a[(1 + j) * n + p]);
            let gk = g[k * n + p];
            gv += (f2 * a[k * n + p] + f3 * ai * aj) * gk;
            ga[(1 + i) * n + p] += f2 * gk * aj;
            ga[(1 + j) * n + p] += f2 * gk * ai;
            ga[k * n + p] += f1 * gk;
        }
        ga[p] += gv;
    }
}

impl<'t> Var<'t> {
    /// Most recently recorded node.
    pub fn last(tape: &'t Tape) -> Var<'t> {
        assert!(!tape.is_empty(), "empty tape");
        Var { tape, id: tape.len() - 1 }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Shape {
        self.tape.shape(self.id)
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.values(*self)
    }

    /// Value of a single-element node.
    pub fn scalar(&self) -> f64 {
        self.tape.with_values(*self, |d| {
            assert_eq!(d.len(), 1, "scalar() on a non-scalar node");
            d[0]
        })
    }

    pub fn backward(&self) -> Result<Vec<f64>> {
        self.tape.backward(*self)
    }

    /// Applies `prims[u % prims.len()]` to unit `u`.
    pub fn map(&self, prims: &[Prim]) -> Var<'t> {
        assert!(!prims.is_empty());
        let shape = self.shape();
        let data = self.tape.with_values(*self, |a| {
            let mut out = vec![0.0; shape.len()];
            for u in 0..shape.units {
                let r = shape.unit_block(u);
                let prim = prims[u % prims.len()];
                if shape.layout.is_scalar() {
                    map_forward_value(prim, shape.points, &a[r.clone()], &mut out[r]);
                } else {
                    map_forward(prim, shape.layout, shape.points, &a[r.clone()], &mut out[r]);
                }
            }
            out
        });
        self.tape.push(Op::Map(self.id, prims.to_vec()), shape, data)
    }

    pub fn apply(&self, prim: Prim) -> Var<'t> {
        self.map(&[prim])
    }

    pub fn sin(&self) -> Var<'t> {
        self.apply(Prim::Sin)
    }

    pub fn cos(&self) -> Var<'t> {
        self.apply(Prim::Cos)
    }

    pub fn exp(&self) -> Var<'t> {
        self.apply(Prim::Exp)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.apply(Prim::Tanh)
    }

    pub fn abs(&self) -> Var<'t> {
        self.apply(Prim::Abs)
    }

    pub fn square(&self) -> Var<'t> {
        *self * *self
    }

    /// Component `comp` of every unit, as plain values.
    pub fn component(&self, comp: usize) -> Var<'t> {
        let s = self.shape();
        assert!(comp < s.width(), "component {comp} outside jet width {}", s.width());
        let out_shape = Shape::new(s.units, JetLayout::SCALAR, s.points);
        let data = self.tape.with_values(*self, |a| {
            let mut out = vec![0.0; out_shape.len()];
            for u in 0..s.units {
                for p in 0..s.points {
                    out[out_shape.at(u, 0, p)] = a[s.at(u, comp, p)];
                }
            }
            out
        });
        self.tape.push(Op::Component(self.id, comp), out_shape, data)
    }

    pub fn unit(&self, unit: usize) -> Var<'t> {
        let s = self.shape();
        assert!(unit < s.units);
        let data = self.tape.with_values(*self, |a| a[s.unit_block(unit)].to_vec());
        self.tape.push(Op::Unit(self.id, unit), Shape::new(1, s.layout, s.points), data)
    }

    pub fn sum_points(&self) -> Var<'t> {
        let s = self.shape();
        let out_shape = Shape::new(s.units, s.layout, 1);
        let data = self.tape.with_values(*self, |a| {
            let mut out = vec![0.0; out_shape.len()];
            for u in 0..s.units {
                for c in 0..s.width() {
                    let i = s.at(u, c, 0);
                    out[out_shape.at(u, c, 0)] = a[i..i + s.points].iter().sum();
                }
            }
            out
        });
        self.tape.push(Op::SumPoints(self.id), out_shape, data)
    }

    pub fn mean_points(&self) -> Var<'t> {
        let n = self.shape().points as f64;
        self.sum_points() * (1.0 / n)
    }

    /// All products `x_i * x_j` with `j <= i`, row-major over the lower
    /// triangle.
    pub fn pairs(&self) -> Var<'t> {
        let s = self.shape();
        let count = s.units * (s.units + 1) / 2;
        let out_shape = Shape::new(count, s.layout, s.points);
        let data = self.tape.with_values(*self, |a| {
            let mut out = vec![0.0; out_shape.len()];
            let mut k = 0;
            for i in 0..s.units {
                for j in 0..=i {
                    let r = out_shape.unit_block(k);
                    jet_mul(s.layout, s.points, &a[s.unit_block(i)], &a[s.unit_block(j)], &mut out[r]);
                    k += 1;
                }
            }
            out
        });
        self.tape.push(Op::Pairs(self.id), out_shape, data)
    }

    /// Stacks units of `self` then `other`.
    pub fn concat(&self, other: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.layout == sb.layout && sa.points == sb.points, "concat shape mismatch");
        let shape = Shape::new(sa.units + sb.units, sa.layout, sa.points);
        let mut data = self.values();
        data.extend(other.values());
        self.tape.push(Op::Concat(self.id, other.id), shape, data)
    }

    /// Multiplies unit `u` at point `p` by `mask[u * points + p]`.
    pub fn mask(&self, mask: Vec<f64>) -> Var<'t> {
        let s = self.shape();
        assert_eq!(mask.len(), s.units * s.points, "mask length mismatch");
        let data = self.tape.with_values(*self, |a| {
            let mut out = a.to_vec();
            for u in 0..s.units {
                for c in 0..s.width() {
                    for p in 0..s.points {
                        out[s.at(u, c, p)] *= mask[u * s.points + p];
                    }
                }
            }
            out
        });
        self.tape.push(Op::MaskMul(self.id, mask), s, data)
    }

    pub fn affine(&self, spec: AffineSpec) -> Var<'t> {
        let s = self.shape();
        let (n_out, n_in) = (spec.out_units, s.units);
        assert_eq!(spec.weights.len(), n_out * n_in, "affine weight count");
        assert_eq!(spec.weight_src.len(), n_out * n_in, "affine weight sources");
        if let Some((b, bs)) = &spec.bias {
            assert!(b.len() == n_out && bs.len() == n_out, "affine bias count");
        }
        let out_shape = Shape::new(n_out, s.layout, s.points);
        let cols = s.width() * s.points;
        let data = self.tape.with_values(*self, |x| {
            let mut out = vec![0.0; out_shape.len()];
            {
                let xv = ArrayView2::from_shape((n_in, cols), x).expect("affine input");
                let wv = ArrayView2::from_shape((n_out, n_in), &spec.weights[..]).expect("affine weights");
                let mut ov = ArrayViewMut2::from_shape((n_out, cols), &mut out[..]).expect("affine output");
                general_mat_mul(1.0, &wv, &xv, 0.0, &mut ov);
            }
            if let Some((b, _)) = &spec.bias {
                for (u, bu) in b.iter().enumerate() {
                    for v in &mut out[u * cols..u * cols + s.points] {
                        *v += bu;
                    }
                }
            }
            out
        });
        let node = AffineNode { x: self.id, in_units: n_in, spec };
        self.tape.push(Op::Affine(Box::new(node)), out_shape, data)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, 0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, 1)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, 2)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        let data = self.values().into_iter().map(|v| v * c).collect();
        self.tape.push(Op::Scale(self.id, c), self.shape(), data)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        let s = self.shape();
        let mut data = self.values();
        // only the value component moves
        for u in 0..s.units {
            for p in 0..s.points {
                data[s.at(u, 0, p)] += c;
            }
        }
        self.tape.push(Op::Shift(self.id), s, data)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        (-v) + self
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self * -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> (f64, f64) {
        let (p, m, c) = (f(x + h), f(x - h), f(x));
        ((p - m) / (2.0 * h), (p - 2.0 * c + m) / (h * h))
    }

    #[test]
    fn cube_jet_at_two() {
        let tape = Tape::new(0);
        let t = tape.input(&[2.0], 1, &[0], 2);
        let u = t * t * t;
        assert_eq!(u.values(), vec![8.0, 12.0, 12.0]);
    }

    #[test]
    fn composed_jet_matches_finite_differences() {
        let f = |x: f64| (x.sin() * x).exp() + (x * 0.3).tanh();
        let tape = Tape::new(0);
        let x = tape.input(&[0.7], 1, &[0], 2);
        let u = (x.sin() * x).exp() + (x * 0.3).tanh();
        let v = u.values();
        let (d1, d2) = fd(f, 0.7, 1e-4);
        assert!((v[0] - f(0.7)).abs() < 1e-15);
        assert!((v[1] - d1).abs() < 1e-7 * d1.abs().max(1.0));
        assert!((v[2] - d2).abs() < 1e-5 * d2.abs().max(1.0));
    }

    #[test]
    fn mixed_partials_of_product() {
        // u = x^2 y + sin(x y)
        let tape = Tape::new(0);
        let (x0, y0) = (0.4, -1.3);
        let inp = tape.input(&[x0, y0], 2, &[0, 1], 2);
        let (x, y) = (inp.unit(0), inp.unit(1));
        let u = x * x * y + (x * y).sin();
        let l = JetLayout::new(2, 2);
        let v = u.values();
        let c = (x0 * y0).cos();
        let s = (x0 * y0).sin();
        assert!((v[l.d1(0)] - (2.0 * x0 * y0 + y0 * c)).abs() < 1e-14);
        assert!((v[l.d1(1)] - (x0 * x0 + x0 * c)).abs() < 1e-14);
        assert!((v[l.d2(0, 0)] - (2.0 * y0 - y0 * y0 * s)).abs() < 1e-14);
        assert!((v[l.d2(0, 1)] - (2.0 * x0 + c - x0 * y0 * s)).abs() < 1e-14);
        assert!((v[l.d2(1, 1)] - (-x0 * x0 * s)).abs() < 1e-14);
    }

    #[test]
    fn quadratic_param_gradient() {
        let tape = Tape::new(1);
        let th = tape.param(0, 3.0);
        let loss = th * th;
        assert_eq!(loss.backward().unwrap(), vec![6.0]);
    }

    #[test]
    fn chain_rule_through_input_broadcast() {
        // loss = (theta * t - 1)^2 at t = 1, theta = 2
        let tape = Tape::new(1);
        let t = tape.input(&[1.0], 1, &[], 0);
        let th = tape.param(0, 2.0);
        let r = th * t - 1.0;
        let loss = r.square().sum_points();
        assert_eq!(loss.backward().unwrap(), vec![2.0]);
    }

    #[test]
    fn gradient_through_second_derivative() {
        // u(t) = sin(a t) ; loss = sum over points of u''(t)^2 = a^4 sin^2(a t)
        let pts = [0.3, 0.9, 1.7];
        let a = 1.3;
        let tape = Tape::new(1);
        let t = tape.input(&pts, 1, &[0], 2);
        let th = tape.param(0, a);
        let u = (th * t).sin();
        let loss = u.component(2).square().sum_points();
        let g = loss.backward().unwrap()[0];
        let f = |a: f64| pts.iter().map(|t: &f64| (a.powi(2) * (a * t).sin()).powi(2)).sum::<f64>();
        let (d, _) = fd(f, a, 1e-5);
        assert!((g - d).abs() < 1e-6 * d.abs(), "{g} vs {d}");
    }

    #[test]
    fn affine_softmax_gradient_matches_differences() {
        let alpha = [0.3, -0.2, 0.9];
        let temp = 0.7;
        let build = |tape: &Tape, alpha: &[f64]| -> f64 {
            let x = tape.input(&[0.5, 1.5, -2.0], 3, &[], 0);
            let w = crate::funn::softmax_weights(alpha, temp).unwrap();
            let spec = AffineSpec {
                out_units: 1,
                weights: w,
                weight_src: vec![Some(0), Some(1), Some(2)],
                bias: None,
                softmax_temperature: Some(temp),
            };
            let y = x.affine(spec);
            let loss = y.square().sum_points();
            loss.scalar()
        };
        let tape = Tape::new(3);
        build(&tape, &alpha);
        let root = Var { tape: &tape, id: tape.len() - 1 };
        let g = tape.backward(root).unwrap();
        for k in 0..3 {
            let mut ap = alpha;
            let mut am = alpha;
            ap[k] += 1e-6;
            am[k] -= 1e-6;
            let d = (build(&Tape::new(3), &ap) - build(&Tape::new(3), &am)) / 2e-6;
            assert!((g[k] - d).abs() < 1e-7, "k={k}: {} vs {d}", g[k]);
        }
    }

    #[test]
    fn non_finite_loss_names_node() {
        let tape = Tape::new(1);
        let th = tape.param(0, 400.0);
        let loss = th.apply(Prim::ExpAbs).square();
        let err = loss.backward().unwrap_err().to_string();
        assert!(err.contains("'mul'"), "{err}");
    }
}
