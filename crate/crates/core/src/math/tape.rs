//! Matrix-granular reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and provenance. The
//! backward pass does not mutate adjoint buffers in place: it *emits new
//! nodes* for every adjoint computation, so a gradient obtained from
//! [`Tape::backward`] is itself a differentiable function of the inputs.
//! Running `backward` again over a graph that already contains gradient
//! nodes yields exact gradients-of-gradients — which is all the meta
//! optimization needs to differentiate through an inner SGD trajectory.
//!
//! All traversals run in fixed index order, so identical inputs produce
//! bit-identical values and gradients.

use super::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable leaf.
    Input,
    /// Non-differentiable leaf; backward never propagates into it.
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId, f64),
    /// (n x m) + (1 x m), bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// (n x m) -> (1 x m) column sums.
    SumRows(NodeId),
    /// (1 x m) -> (n x m).
    BroadcastRows(NodeId, usize),
    /// (n x m) -> (1 x 1).
    SumAll(NodeId),
    /// (1 x 1) -> (r x c).
    BroadcastAll(NodeId, usize, usize),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Indicator x > 0; derivative defined as zero everywhere.
    ReluMask(NodeId),
    Ln(NodeId),
    Recip(NodeId),
    Clamp(NodeId, f64, f64),
    /// Indicator lo < x < hi; derivative defined as zero everywhere.
    ClampMask(NodeId, f64, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of matrix operations supporting repeated differentiation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// Non-differentiable leaf (data, labels, masks).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transpose();
        let rg = self.requires(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MulElem(a, b), rg)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.requires(a);
        self.push(v, Op::ScalarMul(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.requires(a);
        self.push(v, Op::AddScalar(a, c), rg)
    }

    /// Add a (1 x m) row vector to every row of an (n x m) matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let m = &self.nodes[a.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(r.rows, 1, "add_row rhs must be 1 x m");
        assert_eq!(m.cols, r.cols, "add_row width mismatch");
        let mut v = m.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] += r.data[j];
            }
        }
        let rg = self.requires(a) || self.requires(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_rows();
        let rg = self.requires(a);
        self.push(v, Op::SumRows(a), rg)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let r = &self.nodes[a.0].value;
        assert_eq!(r.rows, 1, "broadcast_rows source must be 1 x m");
        let mut v = Matrix::zeros(n, r.cols);
        for i in 0..n {
            v.data[i * r.cols..(i + 1) * r.cols].copy_from_slice(&r.data);
        }
        let rg = self.requires(a);
        self.push(v, Op::BroadcastRows(a, n), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum_all();
        let rg = self.requires(a);
        self.push(
            Matrix::from_vec(1, 1, vec![s]).unwrap(),
            Op::SumAll(a),
            rg,
        )
    }

    pub fn broadcast_all(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let s = self.scalar(a);
        let rg = self.requires(a);
        self.push(
            Matrix {
                rows,
                cols,
                data: vec![s; rows * cols],
            },
            Op::BroadcastAll(a, rows, cols),
            rg,
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(super::matrix::sigmoid);
        let rg = self.requires(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.requires(a);
        self.push(v, Op::Relu(a), rg)
    }

    fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::ReluMask(a), false)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::ln);
        let rg = self.requires(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| 1.0 / x);
        let rg = self.requires(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        let rg = self.requires(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    fn clamp_mask(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        self.push(v, Op::ClampMask(a, lo, hi), false)
    }

    /// Reverse pass from a scalar output. Returns one gradient node per
    /// requested input; reading `value(grad)` gives the numeric gradient,
    /// and the node itself stays differentiable for a second pass.
    ///
    /// Inputs that the output does not depend on get a zero gradient node.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(
            self.nodes[output.0].value.shape(),
            (1, 1),
            "backward starts from a scalar node"
        );
        let upper = output.0 + 1;
        let mut adjoint: Vec<Option<NodeId>> = vec![None; upper];
        let seed = self.constant(Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        adjoint[output.0] = Some(seed);

        for i in (0..upper).rev() {
            let grad_out = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Input | Op::Const => {}
                Op::MatMul(a, b) => {
                    if self.requires(a) {
                        let bt = self.transpose(b);
                        let c = self.matmul(grad_out, bt);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                    if self.requires(b) {
                        let at = self.transpose(a);
                        let c = self.matmul(at, grad_out);
                        Self::accumulate(self, &mut adjoint, b, c);
                    }
                }
                Op::Transpose(a) => {
                    if self.requires(a) {
                        let c = self.transpose(grad_out);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(a) {
                        Self::accumulate(self, &mut adjoint, a, grad_out);
                    }
                    if self.requires(b) {
                        Self::accumulate(self, &mut adjoint, b, grad_out);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(a) {
                        Self::accumulate(self, &mut adjoint, a, grad_out);
                    }
                    if self.requires(b) {
                        let c = self.scalar_mul(grad_out, -1.0);
                        Self::accumulate(self, &mut adjoint, b, c);
                    }
                }
                Op::MulElem(a, b) => {
                    if self.requires(a) {
                        let c = self.mul_elem(grad_out, b);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                    if self.requires(b) {
                        let c = self.mul_elem(grad_out, a);
                        Self::accumulate(self, &mut adjoint, b, c);
                    }
                }
                Op::ScalarMul(a, k) => {
                    if self.requires(a) {
                        let c = self.scalar_mul(grad_out, k);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::AddScalar(a, _) => {
                    if self.requires(a) {
                        Self::accumulate(self, &mut adjoint, a, grad_out);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires(a) {
                        Self::accumulate(self, &mut adjoint, a, grad_out);
                    }
                    if self.requires(row) {
                        let c = self.sum_rows(grad_out);
                        Self::accumulate(self, &mut adjoint, row, c);
                    }
                }
                Op::SumRows(a) => {
                    if self.requires(a) {
                        let n = self.nodes[a.0].value.rows;
                        let c = self.broadcast_rows(grad_out, n);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::BroadcastRows(a, _) => {
                    if self.requires(a) {
                        let c = self.sum_rows(grad_out);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::SumAll(a) => {
                    if self.requires(a) {
                        let (r, c) = self.nodes[a.0].value.shape();
                        let g = self.broadcast_all(grad_out, r, c);
                        Self::accumulate(self, &mut adjoint, a, g);
                    }
                }
                Op::BroadcastAll(a, _, _) => {
                    if self.requires(a) {
                        let c = self.sum_all(grad_out);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.requires(a) {
                        // d/dx sigma = sigma * (1 - sigma), reusing the forward value.
                        let s = NodeId(i);
                        let neg = self.scalar_mul(s, -1.0);
                        let one_minus = self.add_scalar(neg, 1.0);
                        let ds = self.mul_elem(s, one_minus);
                        let c = self.mul_elem(grad_out, ds);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::Relu(a) => {
                    if self.requires(a) {
                        let mask = self.relu_mask(a);
                        let c = self.mul_elem(grad_out, mask);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::ReluMask(_) | Op::ClampMask(_, _, _) => {}
                Op::Ln(a) => {
                    if self.requires(a) {
                        let r = self.recip(a);
                        let c = self.mul_elem(grad_out, r);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::Recip(a) => {
                    if self.requires(a) {
                        // d/dx (1/x) = -1/x^2, reusing the forward value.
                        let r = NodeId(i);
                        let r2 = self.mul_elem(r, r);
                        let m = self.mul_elem(grad_out, r2);
                        let c = self.scalar_mul(m, -1.0);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.requires(a) {
                        let mask = self.clamp_mask(a, lo, hi);
                        let c = self.mul_elem(grad_out, mask);
                        Self::accumulate(self, &mut adjoint, a, c);
                    }
                }
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.nodes[w.0].value.shape();
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect()
    }

    fn accumulate(
        tape: &mut Tape,
        adjoint: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) {
        adjoint[target.0] = Some(match adjoint[target.0] {
            None => contribution,
            Some(existing) => tape.add(existing, contribution),
        });
    }

    /// Recompute every node value from the leaves. Used to check that the
    /// record is sufficient to reproduce the pass bit-exactly.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut vals: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Const => node.value.clone(),
                Op::MatMul(a, b) => vals[a.0].matmul(&vals[b.0]),
                Op::Transpose(a) => vals[a.0].transpose(),
                Op::Add(a, b) => vals[a.0].zip(&vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => vals[a.0].zip(&vals[b.0], |x, y| x - y),
                Op::MulElem(a, b) => vals[a.0].zip(&vals[b.0], |x, y| x * y),
                Op::ScalarMul(a, c) => vals[a.0].map(|x| x * c),
                Op::AddScalar(a, c) => vals[a.0].map(|x| x + c),
                Op::AddRow(a, row) => {
                    let mut v = vals[a.0].clone();
                    let r = &vals[row.0];
                    for i in 0..v.rows {
                        for j in 0..v.cols {
                            v.data[i * v.cols + j] += r.data[j];
                        }
                    }
                    v
                }
                Op::SumRows(a) => vals[a.0].sum_rows(),
                Op::BroadcastRows(a, n) => {
                    let r = &vals[a.0];
                    let mut v = Matrix::zeros(*n, r.cols);
                    for i in 0..*n {
                        v.data[i * r.cols..(i + 1) * r.cols].copy_from_slice(&r.data);
                    }
                    v
                }
                Op::SumAll(a) => Matrix::from_vec(1, 1, vec![vals[a.0].sum_all()]).unwrap(),
                Op::BroadcastAll(a, r, c) => Matrix {
                    rows: *r,
                    cols: *c,
                    data: vec![vals[a.0].data[0]; r * c],
                },
                Op::Sigmoid(a) => vals[a.0].map(super::matrix::sigmoid),
                Op::Relu(a) => vals[a.0].map(|x| if x > 0.0 { x } else { 0.0 }),
                Op::ReluMask(a) => vals[a.0].map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
                Op::Ln(a) => vals[a.0].map(f64::ln),
                Op::Recip(a) => vals[a.0].map(|x| 1.0 / x),
                Op::Clamp(a, lo, hi) => vals[a.0].map(|x| x.clamp(*lo, *hi)),
                Op::ClampMask(a, lo, hi) => {
                    vals[a.0].map(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 })
                }
            };
            vals.push(v);
        }
        vals
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
