//! Reverse-mode automatic differentiation over matrix-valued expressions.
//!
//! A [`Tape`] records a computation as a flat list of nodes; building an
//! expression only ever references earlier nodes, so reversing the list is
//! a reverse topological order and [`Tape::backward`] visits every node
//! exactly once. The primitive set is closed: matrix products, the
//! attention/normalization/pooling stages of the scoring kernel, and the
//! elementwise/reduction pieces the losses need. Softmax, LogSumExp and
//! row-cosine carry fused adjoint rules rather than being decomposed into
//! exp/log chains, which keeps gradients stable near saturation.
//!
//! Forward values are computed by the exact routines in [`crate::numeric`],
//! so recording an expression never changes its value relative to the
//! unrecorded computation.

mod check;
mod record;

pub use check::{finite_diff_check, gradient_check_suite, GradientReport, ParamCheck};
pub use record::{
    record_inter_modal, record_inter_modal_dual, record_intra_modal, record_joint_soft,
    record_lgmm_score, record_project, record_soft_kl_term, record_total_loss, HeadVars,
    RecordedLoss,
};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::numeric;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    StopGrad(#[allow(dead_code)] usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Exp(usize),
    Ln(usize),
    Relu(usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddRow { x: usize, row: usize },
    ColL2Norm { x: usize, eps: f64 },
    RowSoftmax { x: usize, temp: f64 },
    RowLogSoftmax { x: usize, temp: f64 },
    RowLse { x: usize, temp: f64 },
    RowLseOffDiag { x: usize, temp: f64 },
    RowsCosine { a: usize, b: usize, eps: f64 },
    Lse { x: usize, lambda: f64 },
    Diag(usize),
    Transpose(usize),
    SumAll(usize),
    StackScalars(Vec<usize>),
}

struct Node {
    values: Mat,
    op: Op,
}

/// Recorded computation. One recording is confined to a single thread;
/// independent tapes can run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Mat>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`. Zero for any
    /// node that is not on a path to the root.
    pub fn wrt(&self, v: Var) -> &Mat {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].values
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected scalar node, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m.get(0, 0))
    }

    fn push(&mut self, values: Mat, op: Op) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node { values, op });
        Var(idx)
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].values.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{}x{}", sa.0, sa.1), format!("{}x{}", sb.0, sb.1)));
        }
        Ok(())
    }

    /// Introduces an input (or parameter) node.
    pub fn leaf(&mut self, values: Mat) -> Var {
        self.push(values, Op::Leaf)
    }

    /// Identity forward; blocks gradient flow backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let values = self.nodes[x.0].values.clone();
        self.push(values, Op::StopGrad(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let values = numeric::add_elem(&self.nodes[a.0].values, &self.nodes[b.0].values);
        Ok(self.push(values, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let values = numeric::sub_elem(&self.nodes[a.0].values, &self.nodes[b.0].values);
        Ok(self.push(values, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let values = numeric::mul_elem(&self.nodes[a.0].values, &self.nodes[b.0].values);
        Ok(self.push(values, Op::Mul(a.0, b.0)))
    }

    /// `scale * x + shift` elementwise; `shift` is a constant.
    pub fn affine(&mut self, x: Var, scale: f64, shift: Option<Mat>) -> Result<Var> {
        if let Some(s) = &shift {
            let sx = self.shape_of(x);
            if s.shape() != sx {
                return Err(Error::shape(
                    "affine",
                    format!("{}x{}", sx.0, sx.1),
                    format!("{}x{}", s.rows(), s.cols()),
                ));
            }
        }
        let values = numeric::affine(&self.nodes[x.0].values, scale, shift.as_ref());
        Ok(self.push(values, Op::Affine { x: x.0, scale }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let values = numeric::exp_elem(&self.nodes[x.0].values);
        self.push(values, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let values = numeric::ln_elem(&self.nodes[x.0].values);
        self.push(values, Op::Ln(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values = numeric::relu(&self.nodes[x.0].values);
        self.push(values, Op::Relu(x.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", format!("inner dim {}", sa.1), format!("inner dim {}", sb.0)));
        }
        let values = numeric::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values);
        Ok(self.push(values, Op::MatMul(a.0, b.0)))
    }

    /// `a @ b.T`: rows of `a` against rows of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.1 != sb.1 {
            return Err(Error::shape("matmul_nt", format!("inner dim {}", sa.1), format!("inner dim {}", sb.1)));
        }
        let values = numeric::matmul_nt(&self.nodes[a.0].values, &self.nodes[b.0].values);
        Ok(self.push(values, Op::MatMulNT(a.0, b.0)))
    }

    /// Adds a 1×n bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape_of(x), self.shape_of(row));
        if sr.0 != 1 || sr.1 != sx.1 {
            return Err(Error::shape("add_row", format!("1x{}", sx.1), format!("{}x{}", sr.0, sr.1)));
        }
        let values = numeric::add_row(&self.nodes[x.0].values, &self.nodes[row.0].values);
        Ok(self.push(values, Op::AddRow { x: x.0, row: row.0 }))
    }

    pub fn col_l2_norm(&mut self, x: Var, eps: f64) -> Var {
        let values = numeric::col_l2_normalize(&self.nodes[x.0].values, eps);
        self.push(values, Op::ColL2Norm { x: x.0, eps })
    }

    pub fn row_softmax(&mut self, x: Var, temp: f64) -> Result<Var> {
        check_temp("row_softmax", temp)?;
        let values = numeric::row_softmax(&self.nodes[x.0].values, temp);
        Ok(self.push(values, Op::RowSoftmax { x: x.0, temp }))
    }

    pub fn row_log_softmax(&mut self, x: Var, temp: f64) -> Result<Var> {
        check_temp("row_log_softmax", temp)?;
        let values = numeric::row_log_softmax(&self.nodes[x.0].values, temp);
        Ok(self.push(values, Op::RowLogSoftmax { x: x.0, temp }))
    }

    pub fn row_lse(&mut self, x: Var, temp: f64) -> Result<Var> {
        check_temp("row_lse", temp)?;
        let values = numeric::row_lse(&self.nodes[x.0].values, temp);
        Ok(self.push(values, Op::RowLse { x: x.0, temp }))
    }

    /// Row-wise LogSumExp over off-diagonal entries of a square matrix.
    pub fn row_lse_offdiag(&mut self, x: Var, temp: f64) -> Result<Var> {
        check_temp("row_lse_offdiag", temp)?;
        let s = self.shape_of(x);
        if s.0 != s.1 || s.0 < 2 {
            return Err(Error::shape("row_lse_offdiag", "square, at least 2x2", format!("{}x{}", s.0, s.1)));
        }
        let values = numeric::row_lse_offdiag(&self.nodes[x.0].values, temp);
        Ok(self.push(values, Op::RowLseOffDiag { x: x.0, temp }))
    }

    /// Cosine of corresponding rows of `a` and `b` as an n×1 vector.
    pub fn rows_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("rows_cosine", a, b)?;
        let values = numeric::rows_cosine(&self.nodes[a.0].values, &self.nodes[b.0].values, eps);
        Ok(self.push(values, Op::RowsCosine { a: a.0, b: b.0, eps }))
    }

    /// Soft-maximum pooling of all entries into a scalar.
    pub fn lse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lse: lambda must be > 0, got {lambda}")));
        }
        let data = self.nodes[x.0].values.data();
        if data.is_empty() {
            return Err(Error::Contract("lse: empty input".into()));
        }
        let v = numeric::lse(data, lambda);
        Ok(self.push(Mat::new(1, 1, vec![v]), Op::Lse { x: x.0, lambda }))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x);
        if s.0 != s.1 {
            return Err(Error::shape("diag", "square", format!("{}x{}", s.0, s.1)));
        }
        let values = numeric::diag(&self.nodes[x.0].values);
        Ok(self.push(values, Op::Diag(x.0)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let values = self.nodes[x.0].values.transpose();
        self.push(values, Op::Transpose(x.0))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = numeric::sum_all(&self.nodes[x.0].values);
        self.push(Mat::new(1, 1, vec![v]), Op::SumAll(x.0))
    }

    /// Packs scalar nodes into a rows×cols matrix in row-major order.
    pub fn stack_scalars(&mut self, vars: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if vars.len() != rows * cols {
            return Err(Error::shape(
                "stack_scalars",
                format!("{} scalars", rows * cols),
                format!("{} scalars", vars.len()),
            ));
        }
        let mut data = Vec::with_capacity(vars.len());
        for v in vars {
            let m = &self.nodes[v.0].values;
            if m.shape() != (1, 1) {
                return Err(Error::shape("stack_scalars", "1x1 nodes", format!("{}x{}", m.rows(), m.cols())));
            }
            data.push(m.get(0, 0));
        }
        let parents = vars.iter().map(|v| v.0).collect();
        Ok(self.push(Mat::new(rows, cols, data), Op::StackScalars(parents)))
    }

    /// Reverse accumulation from a scalar root. Returns the gradient of the
    /// root with respect to every node; nodes off the path get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            let (r, c) = self.value(root).shape();
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.values.rows(), n.values.cols()))
            .collect();
        grads[root.0].set(0, 0, 1.0);

        for idx in (0..=root.0).rev() {
            // Nodes only reference strictly earlier nodes, so grads[idx] is
            // final here and parents all live in the left split.
            let (parent_grads, rest) = grads.split_at_mut(idx);
            let g = &rest[0];
            self.propagate(idx, g, parent_grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Mat, parent_grads: &mut [Mat]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                acc(&mut parent_grads[*a], g, 1.0);
                acc(&mut parent_grads[*b], g, 1.0);
            }
            Op::Sub(a, b) => {
                acc(&mut parent_grads[*a], g, 1.0);
                acc(&mut parent_grads[*b], g, -1.0);
            }
            Op::Mul(a, b) => {
                acc_mul(&mut parent_grads[*a], g, &self.nodes[*b].values);
                acc_mul(&mut parent_grads[*b], g, &self.nodes[*a].values);
            }
            Op::Affine { x, scale } => {
                acc(&mut parent_grads[*x], g, *scale);
            }
            Op::Exp(x) => {
                acc_mul(&mut parent_grads[*x], g, &node.values);
            }
            Op::Ln(x) => {
                let xv = &self.nodes[*x].values;
                let gx = &mut parent_grads[*x];
                for (i, (gd, xd)) in g.data().iter().zip(xv.data()).enumerate() {
                    gx.data_mut()[i] += gd / xd;
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].values;
                let gx = &mut parent_grads[*x];
                for (i, (gd, xd)) in g.data().iter().zip(xv.data()).enumerate() {
                    if *xd > 0.0 {
                        gx.data_mut()[i] += gd;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                acc_mat(&mut parent_grads[*a], &numeric::matmul_nt(g, bv));
                acc_mat(&mut parent_grads[*b], &numeric::matmul_tn(av, g));
            }
            Op::MatMulNT(a, b) => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                acc_mat(&mut parent_grads[*a], &numeric::matmul(g, bv));
                acc_mat(&mut parent_grads[*b], &numeric::matmul_tn(g, av));
            }
            Op::AddRow { x, row } => {
                acc(&mut parent_grads[*x], g, 1.0);
                acc_mat(&mut parent_grads[*row], &numeric::col_sums(g));
            }
            Op::ColL2Norm { x, eps } => {
                let xv = &self.nodes[*x].values;
                let y = &node.values;
                let norms = numeric::col_l2_norms(xv, *eps);
                let gx = &mut parent_grads[*x];
                for j in 0..xv.cols() {
                    let n = norms[j];
                    if n == 0.0 {
                        continue;
                    }
                    let mut d = 0.0;
                    for k in 0..xv.rows() {
                        d += g.get(k, j) * y.get(k, j);
                    }
                    for i in 0..xv.rows() {
                        let add = (g.get(i, j) - y.get(i, j) * d) / n;
                        gx.set(i, j, gx.get(i, j) + add);
                    }
                }
            }
            Op::RowSoftmax { x, temp } => {
                let y = &node.values;
                let gx = &mut parent_grads[*x];
                for i in 0..y.rows() {
                    let mut s = 0.0;
                    for j in 0..y.cols() {
                        s += g.get(i, j) * y.get(i, j);
                    }
                    for j in 0..y.cols() {
                        let add = y.get(i, j) * (g.get(i, j) - s) / temp;
                        gx.set(i, j, gx.get(i, j) + add);
                    }
                }
            }
            Op::RowLogSoftmax { x, temp } => {
                let y = &node.values;
                let gx = &mut parent_grads[*x];
                for i in 0..y.rows() {
                    let mut s = 0.0;
                    for j in 0..y.cols() {
                        s += g.get(i, j);
                    }
                    for j in 0..y.cols() {
                        let p = y.get(i, j).exp();
                        let add = (g.get(i, j) - p * s) / temp;
                        gx.set(i, j, gx.get(i, j) + add);
                    }
                }
            }
            Op::RowLse { x, temp } => {
                let xv = &self.nodes[*x].values;
                let gx = &mut parent_grads[*x];
                for i in 0..xv.rows() {
                    let p = numeric::scaled_softmax(xv.row(i), 1.0 / temp);
                    let gi = g.get(i, 0);
                    for j in 0..xv.cols() {
                        gx.set(i, j, gx.get(i, j) + gi * p[j] / temp);
                    }
                }
            }
            Op::RowLseOffDiag { x, temp } => {
                let xv = &self.nodes[*x].values;
                let gx = &mut parent_grads[*x];
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let mut m = f64::NEG_INFINITY;
                    for (j, &v) in row.iter().enumerate() {
                        if j != i {
                            m = m.max(v / temp);
                        }
                    }
                    let mut z = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        if j != i {
                            z += (v / temp - m).exp();
                        }
                    }
                    let gi = g.get(i, 0);
                    for (j, &v) in row.iter().enumerate() {
                        if j != i {
                            let p = (v / temp - m).exp() / z;
                            gx.set(i, j, gx.get(i, j) + gi * p / temp);
                        }
                    }
                }
            }
            Op::RowsCosine { a, b, eps } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                let y = &node.values;
                for i in 0..av.rows() {
                    let ar = av.row(i);
                    let br = bv.row(i);
                    let na = numeric::norm2(ar);
                    let nb = numeric::norm2(br);
                    let denom = (na + eps) * (nb + eps);
                    if denom == 0.0 {
                        continue;
                    }
                    let gi = g.get(i, 0);
                    let yi = y.get(i, 0);
                    {
                        let ga = parent_grads[*a].row_mut(i);
                        for k in 0..ar.len() {
                            let mut d = br[k] / denom;
                            if na > 0.0 {
                                d -= yi * ar[k] / (na * (na + eps));
                            }
                            ga[k] += gi * d;
                        }
                    }
                    {
                        let gb = parent_grads[*b].row_mut(i);
                        for k in 0..br.len() {
                            let mut d = ar[k] / denom;
                            if nb > 0.0 {
                                d -= yi * br[k] / (nb * (nb + eps));
                            }
                            gb[k] += gi * d;
                        }
                    }
                }
            }
            Op::Lse { x, lambda } => {
                let xv = &self.nodes[*x].values;
                let p = numeric::scaled_softmax(xv.data(), *lambda);
                let g0 = g.get(0, 0);
                let gx = &mut parent_grads[*x];
                for (i, pi) in p.iter().enumerate() {
                    gx.data_mut()[i] += g0 * pi;
                }
            }
            Op::Diag(x) => {
                let gx = &mut parent_grads[*x];
                for i in 0..g.rows() {
                    gx.set(i, i, gx.get(i, i) + g.get(i, 0));
                }
            }
            Op::Transpose(x) => {
                acc_mat(&mut parent_grads[*x], &g.transpose());
            }
            Op::SumAll(x) => {
                acc_scalar(&mut parent_grads[*x], g.get(0, 0));
            }
            Op::StackScalars(parents) => {
                for (k, p) in parents.iter().enumerate() {
                    let gp = &mut parent_grads[*p];
                    gp.data_mut()[0] += g.data()[k];
                }
            }
        }
    }
}

fn check_temp(op: &'static str, temp: f64) -> Result<()> {
    if !(temp > 0.0 && temp.is_finite()) {
        return Err(Error::Config(format!("{op}: temperature must be > 0, got {temp}")));
    }
    Ok(())
}

fn acc(dst: &mut Mat, src: &Mat, scale: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * scale;
    }
}

fn acc_mat(dst: &mut Mat, src: &Mat) {
    acc(dst, src, 1.0);
}

fn acc_mul(dst: &mut Mat, g: &Mat, other: &Mat) {
    for ((d, gv), ov) in dst.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *d += gv * ov;
    }
}

fn acc_scalar(dst: &mut Mat, v: f64) {
    for d in dst.data_mut() {
        *d += v;
    }
}
