//! Reverse-mode tape over dense matrix operations.
//!
//! Values are computed eagerly as nodes are created; `backward` walks the
//! tape in reverse, accumulating adjoint matrices. Scalars are 1x1
//! matrices. The Cholesky node treats its jitter as a constant.

use crate::diff::{DiffError, ParamVector};
use crate::linalg::{cholesky, tri_solve_raw, DenseMatrix, JitterPolicy, TriSide};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param { offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Hadamard(Var, Var),
    /// Matrix times 1x1 scalar node.
    Scale(Var, Var),
    /// Matrix plus broadcast 1x1 scalar node.
    AddScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    SumSq(Var),
    /// Per-column sum of squares: (m x n) -> (n x 1).
    ColSumSq(Var),
    /// Per-row sum of squares: (m x n) -> (m x 1).
    RowSumSq(Var),
    /// Diagonal of a square matrix as a column vector.
    DiagPart(Var),
    /// A + s * I with s a 1x1 node.
    AddScaledEye(Var, Var),
    Chol { a: Var },
    SolveLower { l: Var, b: Var },
    SolveLowerT { l: Var, b: Var },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols { a: Var, start: usize, len: usize },
    /// RBF/ARD Gram block between two point sets.
    RbfGram { xa: Var, xb: Var, log_var: Var, log_ls: Var },
    /// Lower-triangular matrix assembled from a diagonal column and a
    /// packed strictly-lower column (row-major packing).
    LowerFromParts { diag: Var, strict: Var },
}

struct Node {
    op: Op,
    value: DenseMatrix,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_len: usize,
}

impl Graph {
    pub fn new(param_len: usize) -> Self {
        Self { nodes: Vec::new(), param_len }
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, DiffError> {
        let m = self.value(v);
        if m.rows() != 1 || m.cols() != 1 {
            return Err(DiffError::Shape(format!(
                "expected scalar node, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m.get(0, 0))
    }

    pub fn constant(&mut self, m: DenseMatrix) -> Var {
        self.push(Op::Const, m)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(DenseMatrix::from_raw(1, 1, vec![v]))
    }

    /// Binds a parameter segment as a `rows x cols` input node (row-major).
    pub fn param(
        &mut self,
        p: &ParamVector,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<Var, DiffError> {
        let seg = p
            .layout()
            .find(name)
            .ok_or_else(|| DiffError::UnknownSegment(name.to_string()))?;
        if seg.len != rows * cols {
            return Err(DiffError::Shape(format!(
                "segment '{}' has length {}, cannot view as {}x{}",
                name, seg.len, rows, cols
            )));
        }
        let offset = seg.offset;
        let values = p.values()[offset..offset + seg.len].to_vec();
        Ok(self.push(Op::Param { offset }, DenseMatrix::from_raw(rows, cols, values)))
    }

    pub fn scalar_param(&mut self, p: &ParamVector, name: &str) -> Result<Var, DiffError> {
        self.param(p, name, 1, 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).scale(-1.0);
        self.push(Op::Neg(a), v)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let sv = self.scalar_value(s)?;
        let v = self.value(a).scale(sv);
        Ok(self.push(Op::Scale(a, s), v))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let sv = self.scalar_value(s)?;
        let v = self.value(a).map(|x| x + sv);
        Ok(self.push(Op::AddScalar(a, s), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), DenseMatrix::from_raw(1, 1, vec![s]))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Op::SumSq(a), DenseMatrix::from_raw(1, 1, vec![s]))
    }

    pub fn col_sum_sq(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (j, o) in out.iter_mut().enumerate() {
                let v = m.get(i, j);
                *o += v * v;
            }
        }
        let n = out.len();
        self.push(Op::ColSumSq(a), DenseMatrix::from_raw(n, 1, out))
    }

    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out: Vec<f64> = (0..m.rows())
            .map(|i| m.row(i).iter().map(|v| v * v).sum())
            .collect();
        let n = out.len();
        self.push(Op::RowSumSq(a), DenseMatrix::from_raw(n, 1, out))
    }

    pub fn diag_part(&mut self, a: Var) -> Result<Var, DiffError> {
        let m = self.value(a);
        if !m.is_square() {
            return Err(DiffError::Shape(format!(
                "diag_part of non-square {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let d = m.diag();
        let n = d.len();
        Ok(self.push(Op::DiagPart(a), DenseMatrix::from_raw(n, 1, d)))
    }

    pub fn add_scaled_eye(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let sv = self.scalar_value(s)?;
        let m = self.value(a);
        if !m.is_square() {
            return Err(DiffError::Shape("add_scaled_eye needs a square matrix".into()));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            let d = v.get(i, i);
            v.set(i, i, d + sv);
        }
        Ok(self.push(Op::AddScaledEye(a, s), v))
    }

    /// Cholesky factor node; the escalated jitter is treated as a constant.
    pub fn cholesky(&mut self, a: Var, policy: &JitterPolicy) -> Result<Var, DiffError> {
        let f = cholesky(self.value(a), policy)?;
        Ok(self.push(Op::Chol { a }, f.lower))
    }

    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var, DiffError> {
        let v = tri_solve_raw(self.value(l), self.value(b), TriSide::Lower)?;
        Ok(self.push(Op::SolveLower { l, b }, v))
    }

    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Result<Var, DiffError> {
        let v = tri_solve_raw(self.value(l), self.value(b), TriSide::LowerTranspose)?;
        Ok(self.push(Op::SolveLowerT { l, b }, v))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() {
            return Err(DiffError::Shape(format!(
                "concat_cols {}x{} with {}x{}",
                ma.rows(),
                ma.cols(),
                mb.rows(),
                mb.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(ma.rows(), ma.cols() + mb.cols());
        for i in 0..ma.rows() {
            for j in 0..ma.cols() {
                out.set(i, j, ma.get(i, j));
            }
            for j in 0..mb.cols() {
                out.set(i, ma.cols() + j, mb.get(i, j));
            }
        }
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.cols() != mb.cols() {
            return Err(DiffError::Shape(format!(
                "concat_rows {}x{} with {}x{}",
                ma.rows(),
                ma.cols(),
                mb.rows(),
                mb.cols()
            )));
        }
        let mut data = Vec::with_capacity((ma.rows() + mb.rows()) * ma.cols());
        data.extend_from_slice(ma.data());
        data.extend_from_slice(mb.data());
        let out = DenseMatrix::from_raw(ma.rows() + mb.rows(), ma.cols(), data);
        Ok(self.push(Op::ConcatRows(a, b), out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(DiffError::Shape(format!(
                "slice_cols {}..{} of {} columns",
                start,
                start + len,
                m.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            for j in 0..len {
                out.set(i, j, m.get(i, start + j));
            }
        }
        Ok(self.push(Op::SliceCols { a, start, len }, out))
    }

    /// RBF Gram block `K[i][j] = exp(log_var) * exp(-0.5 * sum_d (xa[i,d]-xb[j,d])^2 / l_d^2)`
    /// with `l_d = exp(log_ls[d])`; a length-1 `log_ls` is shared across dimensions.
    pub fn rbf_gram(
        &mut self,
        xa: Var,
        xb: Var,
        log_var: Var,
        log_ls: Var,
    ) -> Result<Var, DiffError> {
        let (a, b) = (self.value(xa), self.value(xb));
        let d = a.cols();
        if b.cols() != d {
            return Err(DiffError::Shape(format!(
                "rbf_gram inputs have {} and {} columns",
                d,
                b.cols()
            )));
        }
        let ls = self.value(log_ls);
        if ls.cols() != 1 || (ls.rows() != d && ls.rows() != 1) {
            return Err(DiffError::Shape(format!(
                "rbf_gram lengthscales must be {}x1 or 1x1, got {}x{}",
                d,
                ls.rows(),
                ls.cols()
            )));
        }
        let variance = self.scalar_value(log_var)?.exp();
        let inv_sq: Vec<f64> = (0..d)
            .map(|k| {
                let l = ls.get(if ls.rows() == 1 { 0 } else { k }, 0);
                (-2.0 * l).exp()
            })
            .collect();
        let mut out = DenseMatrix::zeros(a.rows(), b.rows());
        for i in 0..a.rows() {
            let ra = a.row(i);
            for j in 0..b.rows() {
                let rb = b.row(j);
                let mut q = 0.0;
                for k in 0..d {
                    let diff = ra[k] - rb[k];
                    q += diff * diff * inv_sq[k];
                }
                out.set(i, j, variance * (-0.5 * q).exp());
            }
        }
        Ok(self.push(Op::RbfGram { xa, xb, log_var, log_ls }, out))
    }

    /// Assembles an `m x m` lower-triangular matrix from its diagonal
    /// (`m x 1`) and packed strictly-lower entries (`m(m-1)/2 x 1`).
    pub fn lower_from_parts(&mut self, diag: Var, strict: Var) -> Result<Var, DiffError> {
        let dv = self.value(diag);
        let m = dv.rows();
        if dv.cols() != 1 {
            return Err(DiffError::Shape("lower_from_parts diagonal must be a column".into()));
        }
        let sv = self.value(strict);
        let expected = m * (m - 1) / 2;
        // A 1x1 zero placeholder is accepted when there are no strict entries.
        if sv.data().len() != expected && !(expected == 0 && sv.data().len() <= 1) {
            return Err(DiffError::Shape(format!(
                "lower_from_parts strict part has {} entries, expected {}",
                sv.data().len(),
                expected
            )));
        }
        let mut out = DenseMatrix::zeros(m, m);
        for i in 0..m {
            out.set(i, i, dv.get(i, 0));
            for j in 0..i {
                out.set(i, j, sv.data()[i * (i - 1) / 2 + j]);
            }
        }
        Ok(self.push(Op::LowerFromParts { diag, strict }, out))
    }

    /// Reverse pass from a scalar output node; returns the flat gradient
    /// aligned with the parameter vector this graph was built against.
    pub fn backward(&self, out: Var) -> Result<Vec<f64>, DiffError> {
        {
            let m = self.value(out);
            if m.rows() != 1 || m.cols() != 1 {
                return Err(DiffError::Shape("backward requires a scalar output".into()));
            }
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(DenseMatrix::from_raw(1, 1, vec![1.0]));
        let mut grad = vec![0.0; self.param_len];

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param { offset } => {
                    let off = *offset;
                    for (k, v) in g.data().iter().enumerate() {
                        grad[off + k] += v;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.scale(-1.0));
                }
                Op::Neg(a) => acc(&mut adj, *a, g.scale(-1.0)),
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => {
                    let sv = self.value(*s).get(0, 0);
                    let gs: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data().iter())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(&mut adj, *a, g.scale(sv));
                    acc(&mut adj, *s, DenseMatrix::from_raw(1, 1, vec![gs]));
                }
                Op::AddScalar(a, s) => {
                    let gs: f64 = g.data().iter().sum();
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *s, DenseMatrix::from_raw(1, 1, vec![gs]));
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Exp(a) => {
                    let ga = g.hadamard(&self.nodes[idx].value)?;
                    acc(&mut adj, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.hadamard(&self.value(*a).map(|x| 1.0 / x))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.hadamard(&self.nodes[idx].value.map(|y| 0.5 / y))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.hadamard(&self.value(*a).scale(2.0))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.hadamard(&self.nodes[idx].value.map(|y| -y * y))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.get(0, 0);
                    let m = self.value(*a);
                    acc(&mut adj, *a, DenseMatrix::from_raw(m.rows(), m.cols(), vec![s; m.rows() * m.cols()]));
                }
                Op::SumSq(a) => {
                    let s = g.get(0, 0);
                    acc(&mut adj, *a, self.value(*a).scale(2.0 * s));
                }
                Op::ColSumSq(a) => {
                    let m = self.value(*a);
                    let mut ga = DenseMatrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        for j in 0..m.cols() {
                            ga.set(i, j, 2.0 * m.get(i, j) * g.get(j, 0));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::RowSumSq(a) => {
                    let m = self.value(*a);
                    let mut ga = DenseMatrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        for j in 0..m.cols() {
                            ga.set(i, j, 2.0 * m.get(i, j) * g.get(i, 0));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::DiagPart(a) => {
                    let n = self.value(*a).rows();
                    let mut ga = DenseMatrix::zeros(n, n);
                    for i in 0..n {
                        ga.set(i, i, g.get(i, 0));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::AddScaledEye(a, s) => {
                    let tr: f64 = g.diag().iter().sum();
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *s, DenseMatrix::from_raw(1, 1, vec![tr]));
                }
                Op::Chol { a } => {
                    let l = &self.nodes[idx].value;
                    // Reverse-mode Cholesky: with Phi taking the lower
                    // triangle and halving the diagonal,
                    //   abar = sym(L^-T Phi(L^T Lbar) L^-1).
                    // Adjoints on the structurally-zero upper triangle are
                    // dropped first.
                    let g = lower_triangle(&g);
                    let s = l.transpose().matmul(&g)?;
                    let mut p = DenseMatrix::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        for j in 0..=i {
                            let v = s.get(i, j);
                            p.set(i, j, if i == j { 0.5 * v } else { v });
                        }
                    }
                    let w = tri_solve_raw(l, &p, TriSide::LowerTranspose)?;
                    let v = tri_solve_raw(l, &w.transpose(), TriSide::LowerTranspose)?;
                    let raw = v.transpose();
                    let ga = DenseMatrix::from_fn(raw.rows(), raw.cols(), |i, j| {
                        0.5 * (raw.get(i, j) + raw.get(j, i))
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::SolveLower { l, b } => {
                    let y = &self.nodes[idx].value;
                    let gb = tri_solve_raw(self.value(*l), &g, TriSide::LowerTranspose)?;
                    let full = gb.matmul(&y.transpose())?;
                    let gl = lower_triangle(&full).scale(-1.0);
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *l, gl);
                }
                Op::SolveLowerT { l, b } => {
                    let y = &self.nodes[idx].value;
                    let gb = tri_solve_raw(self.value(*l), &g, TriSide::Lower)?;
                    let full = y.matmul(&gb.transpose())?;
                    let gl = lower_triangle(&full).scale(-1.0);
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *l, gl);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let mut ga = DenseMatrix::zeros(g.rows(), ca);
                    let mut gb = DenseMatrix::zeros(g.rows(), cb);
                    for i in 0..g.rows() {
                        for j in 0..ca {
                            ga.set(i, j, g.get(i, j));
                        }
                        for j in 0..cb {
                            gb.set(i, j, g.get(i, ca + j));
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let (ra, rb) = (self.value(*a).rows(), self.value(*b).rows());
                    let cols = g.cols();
                    let ga = DenseMatrix::from_raw(ra, cols, g.data()[..ra * cols].to_vec());
                    let gb = DenseMatrix::from_raw(rb, cols, g.data()[ra * cols..].to_vec());
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::SliceCols { a, start, len } => {
                    let m = self.value(*a);
                    let mut ga = DenseMatrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        for j in 0..*len {
                            ga.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::RbfGram { xa, xb, log_var, log_ls } => {
                    self.rbf_gram_backward(idx, *xa, *xb, *log_var, *log_ls, &g, &mut adj)?;
                }
                Op::LowerFromParts { diag, strict } => {
                    let m = self.value(*diag).rows();
                    let mut gd = DenseMatrix::zeros(m, 1);
                    let strict_len = self.value(*strict).data().len();
                    let mut gs = DenseMatrix::zeros(self.value(*strict).rows(), self.value(*strict).cols());
                    for i in 0..m {
                        gd.set(i, 0, g.get(i, i));
                        for j in 0..i {
                            let k = i * (i - 1) / 2 + j;
                            if k < strict_len {
                                gs.data_mut()[k] += g.get(i, j);
                            }
                        }
                    }
                    acc(&mut adj, *diag, gd);
                    acc(&mut adj, *strict, gs);
                }
            }
        }
        Ok(grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn rbf_gram_backward(
        &self,
        idx: usize,
        xa: Var,
        xb: Var,
        log_var: Var,
        log_ls: Var,
        g: &DenseMatrix,
        adj: &mut Vec<Option<DenseMatrix>>,
    ) -> Result<(), DiffError> {
        let k = &self.nodes[idx].value;
        let (a, b) = (self.value(xa), self.value(xb));
        let ls = self.value(log_ls);
        let d = a.cols();
        let shared = ls.rows() == 1;
        let inv_sq: Vec<f64> = (0..d)
            .map(|kd| {
                let l = ls.get(if shared { 0 } else { kd }, 0);
                (-2.0 * l).exp()
            })
            .collect();

        let mut g_lv = 0.0;
        let mut g_ls = vec![0.0; ls.rows()];
        let mut g_a = DenseMatrix::zeros(a.rows(), d);
        let mut g_b = DenseMatrix::zeros(b.rows(), d);
        for i in 0..a.rows() {
            let ra = a.row(i);
            for j in 0..b.rows() {
                let w = g.get(i, j) * k.get(i, j);
                if w == 0.0 {
                    continue;
                }
                g_lv += w;
                let rb = b.row(j);
                for kd in 0..d {
                    let diff = ra[kd] - rb[kd];
                    let scaled = diff * inv_sq[kd];
                    // d/d log l = diff^2 / l^2; d/d a = -diff / l^2.
                    g_ls[if shared { 0 } else { kd }] += w * diff * scaled;
                    let da = -w * scaled;
                    g_a.set(i, kd, g_a.get(i, kd) + da);
                    g_b.set(j, kd, g_b.get(j, kd) - da);
                }
            }
        }
        acc(adj, log_var, DenseMatrix::from_raw(1, 1, vec![g_lv]));
        let n_ls = g_ls.len();
        acc(adj, log_ls, DenseMatrix::from_raw(n_ls, 1, g_ls));
        acc(adj, xa, g_a);
        acc(adj, xb, g_b);
        Ok(())
    }
}

fn lower_triangle(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| if j <= i { m.get(i, j) } else { 0.0 })
}

fn acc(adj: &mut Vec<Option<DenseMatrix>>, v: Var, g: DenseMatrix) {
    match &mut adj[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.rows(), g.rows());
            debug_assert_eq!(existing.cols(), g.cols());
            for (e, x) in existing.data_mut().iter_mut().zip(g.data().iter()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{check_grad, Layout, ParamVector};

    fn vector_params(name: &str, vals: &[f64]) -> ParamVector {
        let layout = Layout::builder().add(name, vals.len()).build();
        ParamVector::new(layout, vals.to_vec()).unwrap()
    }

    /// Every op used by the model objectives, stress-checked against
    /// central finite differences in one composite function.
    #[test]
    fn composite_op_soup_passes_finite_differences() {
        let at = vector_params("theta", &[0.3, -0.4, 0.9, 0.1, -0.2, 0.5]);
        let report = check_grad(
            |g: &mut Graph, p: &ParamVector| {
                let theta = g.param(p, "theta", 6, 1)?;
                let x = g.slice_cols(theta, 0, 1)?; // 6x1 view tricks: slice rows via transpose
                let xt = g.transpose(x);
                let first3 = g.slice_cols(xt, 0, 3)?;
                let last3 = g.slice_cols(xt, 3, 3)?;
                let a = g.transpose(first3); // 3x1
                let b = g.transpose(last3); // 3x1
                let ab = g.concat_cols(a, b)?; // 3x2
                let sq = g.square(ab);
                let e = g.exp(sq);
                let r = g.row_sum_sq(e); // 3x1
                let c = g.col_sum_sq(e); // 2x1
                let rs = g.sum(r);
                let cs = g.sum_sq(c);
                let total = g.add(rs, cs)?;
                let sqrt = g.sqrt(total);
                let ln = g.ln(sqrt);
                let rec = g.recip(total);
                g.add(ln, rec)
            },
            &at,
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cholesky_and_solve_gradients_match_finite_differences() {
        let at = vector_params("p", &[0.4, 0.1, -0.3, 0.7, 0.2]);
        let report = check_grad(
            |g: &mut Graph, p: &ParamVector| {
                let v = g.param(p, "p", 5, 1)?;
                let vt = g.transpose(v);
                let d_raw = g.slice_cols(vt, 0, 3)?;
                let strict_raw = g.slice_cols(vt, 3, 2)?;
                // Positive diagonal via exp, strict part free.
                let d = g.transpose(d_raw);
                let d = g.exp(d);
                let one = g.scalar(1.0);
                let d = g.add_scalar(d, one)?;
                let strict0 = g.transpose(strict_raw);
                let zero_pad = g.constant(DenseMatrix::zeros(1, 1));
                let strict = g.concat_rows(strict0, zero_pad)?; // 3 strict entries for m=3
                let l0 = g.lower_from_parts(d, strict)?;
                let a = {
                    let lt = g.transpose(l0);
                    g.matmul(l0, lt)?
                };
                let s = g.scalar(0.5);
                let a = g.add_scaled_eye(a, s)?;
                let f = g.cholesky(a, &JitterPolicy::default())?;
                let b = g.constant(DenseMatrix::from_vec(3, 2, vec![1.0, 0.5, -1.0, 2.0, 0.3, -0.7]).unwrap());
                let y = g.solve_lower(f, b)?;
                let z = g.solve_lower_t(f, y)?;
                let s1 = g.sum_sq(z);
                let dg = g.diag_part(f)?;
                let ldg = g.ln(dg);
                let s2 = g.sum(ldg);
                g.add(s1, s2)
            },
            &at,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn rbf_gram_gradients_match_finite_differences() {
        // Params: 4 points x 2 dims flattened, log variance, 2 log lengthscales.
        let mut vals = vec![0.1, 0.9, -0.4, 0.3, 0.8, -0.2, 0.5, 0.6];
        vals.push(0.3); // log_var
        vals.extend_from_slice(&[-0.1, 0.4]); // log_ls
        let layout = Layout::builder().add("x", 8).add("lv", 1).add("ls", 2).build();
        let at = ParamVector::new(layout, vals).unwrap();
        let report = check_grad(
            |g: &mut Graph, p: &ParamVector| {
                let x = g.param(p, "x", 4, 2)?;
                let lv = g.scalar_param(p, "lv")?;
                let ls = g.param(p, "ls", 2, 1)?;
                let k = g.rbf_gram(x, x, lv, ls)?;
                let s = g.scalar(1e-4);
                let k = g.add_scaled_eye(k, s)?;
                let f = g.cholesky(k, &JitterPolicy::default())?;
                let b = g.constant(DenseMatrix::from_vec(4, 1, vec![0.3, -1.0, 0.6, 0.1]).unwrap());
                let a = g.solve_lower(f, b)?;
                let fit = g.sum_sq(a);
                let dg = g.diag_part(f)?;
                let l = g.ln(dg);
                let ld = g.sum(l);
                g.add(fit, ld)
            },
            &at,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn shared_lengthscale_broadcasts() {
        let layout = Layout::builder().add("x", 4).add("lv", 1).add("ls", 1).build();
        let at = ParamVector::new(layout, vec![0.2, 0.7, -0.5, 0.1, 0.0, 0.3]).unwrap();
        let report = check_grad(
            |g: &mut Graph, p: &ParamVector| {
                let x = g.param(p, "x", 2, 2)?;
                let lv = g.scalar_param(p, "lv")?;
                let ls = g.param(p, "ls", 1, 1)?;
                let k = g.rbf_gram(x, x, lv, ls)?;
                Ok(g.sum(k))
            },
            &at,
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradients_accumulate_across_reused_nodes() {
        // f = sum(x) + sum(x^T x): x used three times.
        let at = vector_params("x", &[1.0, -2.0]);
        let res = crate::diff::gradient(
            |g: &mut Graph, p: &ParamVector| {
                let x = g.param(p, "x", 2, 1)?;
                let xt = g.transpose(x);
                let quad = g.matmul(xt, x)?;
                let s = g.sum(x);
                g.add(quad, s)
            },
            &at,
        )
        .unwrap();
        assert!((res.value - (5.0 - 1.0)).abs() < 1e-12);
        assert!((res.gradient[0] - 3.0).abs() < 1e-12);
        assert!((res.gradient[1] - (-3.0)).abs() < 1e-12);
    }
}
