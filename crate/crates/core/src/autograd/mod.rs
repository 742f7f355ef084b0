//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order, so parents always
//! precede children and a single reverse sweep visits each node once.
//! Forward values are produced by the same `matcore`/`kernel` routines the
//! rest of the crate uses, so a taped computation reproduces its untaped
//! counterpart bit for bit.

mod check;
mod soft;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::kernel::pairwise_sq_dist;
use crate::matcore::{Matrix, Real};

pub use check::{grad_check, GradCheckReport, ParamCheck};
pub use soft::{
    gaussian_kernel, newton_pinv, sample_bottleneck, soft_attention, soft_head, SoftInputs,
};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulTn(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, Real),
    Exp(usize),
    SqDist(usize, usize),
    /// `2X − (X·A)·X`, caching `X·A`.
    NewtonStep {
        x: usize,
        a: usize,
        xa: Matrix,
    },
    Relu(usize),
    AddRow(usize, usize),
    AddTiled(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Matrix,
        inv_std: Vec<Real>,
    },
    RowMean(usize, Vec<Vec<usize>>),
    Unfold(usize, Vec<Vec<usize>>),
    ColSlice(usize, usize),
    RowSlice(usize, usize),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Scalars computed from forward values but treated as constants by the
/// gradient. A tape can record them, or replay a recorded sequence so that
/// perturbed re-evaluations hold them fixed.
#[derive(Debug, Clone, Default)]
enum Frozen {
    #[default]
    Off,
    Record(Vec<Real>),
    Replay(Vec<Real>, usize),
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    frozen: Frozen,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            frozen: Frozen::Off,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.check(v).expect("var belongs to this tape")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("var belongs to this tape")].needs_grad
    }

    /// Start recording gradient-stopped scalars.
    pub fn record_frozen(&mut self) {
        self.frozen = Frozen::Record(Vec::new());
    }

    /// Reuse scalars recorded by another tape, in the same order.
    pub fn replay_frozen(&mut self, values: Vec<Real>) {
        self.frozen = Frozen::Replay(values, 0);
    }

    pub fn frozen_values(&self) -> &[Real] {
        match &self.frozen {
            Frozen::Record(v) | Frozen::Replay(v, _) => v,
            Frozen::Off => &[],
        }
    }

    /// A scalar treated as constant by backward. Under replay the recorded
    /// value is returned instead of calling `compute`.
    pub fn frozen_scalar(&mut self, compute: impl FnOnce() -> Result<Real>) -> Result<Real> {
        match &mut self.frozen {
            Frozen::Off => compute(),
            Frozen::Record(vals) => {
                let x = compute()?;
                vals.push(x);
                Ok(x)
            }
            Frozen::Replay(vals, pos) => {
                let x = *vals
                    .get(*pos)
                    .ok_or_else(|| Error::Usage("frozen replay ran past the recording".into()))?;
                *pos += 1;
                Ok(x)
            }
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} is not on this tape",
                v.id
            )));
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, id }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl FnOnce(&Matrix) -> Result<Matrix>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let value = f(&self.nodes[ia].value)?;
        let g = self.any_grad(&[ia]);
        Ok(self.push(value, op(ia), g))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = f(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let g = self.any_grad(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul)
    }

    /// `aᵀ·b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul_tn(y), Op::MatMulTn)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul_nt(y), Op::MatMulNt)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.transpose()), Op::Transpose)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.hadamard(y), Op::Hadamard)
    }

    pub fn scalar_mul(&mut self, a: Var, s: Real) -> Result<Var> {
        self.unary(a, |x| Ok(x.scale(s)), |i| Op::Scale(i, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(Real::exp)), Op::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(|v| v.max(0.0))), Op::Relu)
    }

    /// One Newton-Schulz step `2X − X·A·X` as a single node.
    pub fn newton_step(&mut self, x: Var, a: Var) -> Result<Var> {
        let (ix, ia) = (self.check(x)?, self.check(a)?);
        let xv = &self.nodes[ix].value;
        let xa = xv.matmul(&self.nodes[ia].value)?;
        let value = crate::pinv::newton_step(xv, &xa)?;
        let g = self.any_grad(&[ix, ia]);
        Ok(self.push(value, Op::NewtonStep { x: ix, a: ia, xa }, g))
    }

    /// `‖a_i − b_j‖²`; passing the same variable twice takes the exact
    /// self-distance path.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = if ia == ib {
            let x = &self.nodes[ia].value;
            pairwise_sq_dist(x, x)?
        } else {
            pairwise_sq_dist(&self.nodes[ia].value, &self.nodes[ib].value)?
        };
        let g = self.any_grad(&[ia, ib]);
        Ok(self.push(value, Op::SqDist(ia, ib), g))
    }

    /// Add the `1 × d` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.binary(
            a,
            r,
            |x, row| {
                if row.rows() != 1 || row.cols() != x.cols() {
                    return Err(shape_err!(
                        "row bias {}x{} for {} columns",
                        row.rows(),
                        row.cols(),
                        x.cols()
                    ));
                }
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, &b) in out.row_mut(i).iter_mut().zip(row.as_slice()) {
                        *o += b;
                    }
                }
                Ok(out)
            },
            Op::AddRow,
        )
    }

    /// Add the `r × d` block `t` to each consecutive `r`-row block of `a`.
    pub fn add_tiled(&mut self, a: Var, t: Var) -> Result<Var> {
        self.binary(
            a,
            t,
            |x, tile| {
                if tile.cols() != x.cols() || tile.rows() == 0 || x.rows() % tile.rows() != 0 {
                    return Err(shape_err!(
                        "cannot tile {}x{} over {}x{}",
                        tile.rows(),
                        tile.cols(),
                        x.rows(),
                        x.cols()
                    ));
                }
                let mut out = x.clone();
                let tl = tile.as_slice();
                for chunk in out.as_mut_slice().chunks_mut(tl.len()) {
                    for (o, &b) in chunk.iter_mut().zip(tl) {
                        *o += b;
                    }
                }
                Ok(out)
            },
            Op::AddTiled,
        )
    }

    /// Per-row normalisation to zero mean and unit variance, then
    /// `γ ⊙ x̂ + β` with `1 × d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (xv, gv, bv) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(shape_err!("layer norm parameters must be 1x{d}"));
        }
        let mut x_hat = Matrix::zeros(xv.rows(), d);
        let mut out = Matrix::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xh = x_hat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let (gs, bs) = (gv.as_slice(), bv.as_slice());
            for (j, (o, &h)) in out.row_mut(i).iter_mut().zip(x_hat.row(i)).enumerate() {
                *o = gs[j] * h + bs[j];
            }
        }
        let g = self.any_grad(&[ix, ig, ib]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                x_hat,
                inv_std,
            },
            g,
        ))
    }

    /// Output row `r` is the mean of input rows `groups[r]`.
    pub fn row_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let value = row_mean_value(&self.nodes[ia].value, &groups)?;
        let g = self.any_grad(&[ia]);
        Ok(self.push(value, Op::RowMean(ia, groups), g))
    }

    /// Mean over each consecutive block of `block` rows.
    pub fn mean_pool_rows(&mut self, a: Var, block: usize) -> Result<Var> {
        let rows = self.value(a).rows();
        if block == 0 || !rows.is_multiple_of(block) {
            return Err(shape_err!(
                "{rows} rows do not split into blocks of {block}"
            ));
        }
        let groups = (0..rows / block)
            .map(|b| (b * block..(b + 1) * block).collect())
            .collect();
        self.row_mean(a, groups)
    }

    /// Output row `r` concatenates input rows `groups[r]` (all groups the
    /// same size).
    pub fn unfold(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let k = groups.first().map_or(0, Vec::len);
        if groups.iter().any(|g| g.len() != k) || groups.iter().flatten().any(|&t| t >= x.rows()) {
            return Err(shape_err!("unfold groups must be equal-sized and in range"));
        }
        let d = x.cols();
        let mut out = Matrix::zeros(groups.len(), k * d);
        for (r, g) in groups.iter().enumerate() {
            let o = out.row_mut(r);
            for (slot, &t) in g.iter().enumerate() {
                o[slot * d..(slot + 1) * d].copy_from_slice(x.row(t));
            }
        }
        let needs = self.any_grad(&[ia]);
        Ok(self.push(out, Op::Unfold(ia, groups), needs))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(a, |x| x.col_block(start, len), |i| Op::ColSlice(i, start))
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(a, |x| x.row_block(start, len), |i| Op::RowSlice(i, start))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Matrix::hcat(&refs)?;
        let g = self.any_grad(&ids);
        Ok(self.push(value, Op::HCat(ids), g))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Matrix::vcat(&refs)?;
        let g = self.any_grad(&ids);
        Ok(self.push(value, Op::VCat(ids), g))
    }

    /// Mean over rows of `−log softmax(logits_i)[labels_i]`, as a `1 × 1`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let z = &self.nodes[il].value;
        if labels.len() != z.rows() || z.rows() == 0 {
            return Err(shape_err!(
                "{} labels for {} logit rows",
                labels.len(),
                z.rows()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(shape_err!(
                "label {bad} out of range for {} classes",
                z.cols()
            ));
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            loss += sum.ln() - (z.get(i, y) - max);
            row.iter_mut().for_each(|p| *p /= sum);
        }
        let value = Matrix::filled(1, 1, loss / labels.len() as Real);
        let g = self.any_grad(&[il]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Sum of all entries, as a `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Matrix::filled(1, 1, x.sum())), Op::Sum)
    }

    /// Gradients of the `1 × 1` variable `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            let (r, c) = self.nodes[il].value.shape();
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        self.backward_from(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Propagate an explicit upstream gradient from `out`.
    pub fn backward_from(&self, out: Var, upstream: Matrix) -> Result<Gradients> {
        let io = self.check(out)?;
        if upstream.shape() != self.nodes[io].value.shape() {
            return Err(shape_err!("upstream gradient shape does not match output"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; io + 1];
        grads[io] = Some(upstream);
        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes[..=io].iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: usize, g: Matrix) -> Result<()> {
        if !self.nodes[id].needs_grad {
            return Ok(());
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Add into the gradient slot of `id` in place, creating it as zeros
    /// first. Slices use this so a batch of row blocks costs one buffer.
    fn accumulate_into(
        &self,
        grads: &mut [Option<Matrix>],
        id: usize,
        f: impl FnOnce(&mut Matrix),
    ) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let (r, c) = self.nodes[id].value.shape();
        f(grads[id].get_or_insert_with(|| Matrix::zeros(r, c)));
    }

    fn val(&self, id: usize) -> &Matrix {
        &self.nodes[id].value
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let wants = |id: usize| self.nodes[id].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if wants(a) {
                    self.accumulate(grads, a, g.matmul_nt(self.val(b))?)?;
                }
                if wants(b) {
                    self.accumulate(grads, b, self.val(a).matmul_tn(g)?)?;
                }
            }
            &Op::MatMulTn(a, b) => {
                if wants(a) {
                    self.accumulate(grads, a, self.val(b).matmul_nt(g)?)?;
                }
                if wants(b) {
                    self.accumulate(grads, b, self.val(a).matmul(g)?)?;
                }
            }
            &Op::MatMulNt(a, b) => {
                if wants(a) {
                    self.accumulate(grads, a, g.matmul(self.val(b))?)?;
                }
                if wants(b) {
                    self.accumulate(grads, b, g.matmul_tn(self.val(a))?)?;
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose())?,
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-1.0))?;
            }
            &Op::Hadamard(a, b) => {
                if wants(a) {
                    self.accumulate(grads, a, g.hadamard(self.val(b))?)?;
                }
                if wants(b) {
                    self.accumulate(grads, b, g.hadamard(self.val(a))?)?;
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s))?,
            &Op::Exp(a) => self.accumulate(grads, a, g.hadamard(self.val(i))?)?,
            &Op::Relu(a) => {
                let ga = g.zip_map(self.val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, a, ga)?
            }
            &Op::SqDist(a, b) => self.sq_dist_backward(i, a, b, g, grads)?,
            Op::NewtonStep { x, a, xa } => {
                let (x, a) = (*x, *a);
                let (xv, av) = (self.val(x), self.val(a));
                if wants(x) {
                    // 2G − G·(A·X)ᵀ − (X·A)ᵀ·G
                    let mut gx = g.scale(2.0);
                    gx.sub_assign(&g.matmul_nt(&av.matmul(xv)?)?)?;
                    gx.sub_assign(&xa.matmul_tn(g)?)?;
                    self.accumulate(grads, x, gx)?;
                }
                if wants(a) {
                    // −Xᵀ·G·Xᵀ
                    let ga = xv.matmul_tn(g)?.matmul_nt(xv)?.scale(-1.0);
                    self.accumulate(grads, a, ga)?;
                }
            }
            &Op::AddRow(a, r) => {
                self.accumulate(grads, a, g.clone())?;
                if wants(r) {
                    self.accumulate(grads, r, column_sums(g))?;
                }
            }
            &Op::AddTiled(a, t) => {
                self.accumulate(grads, a, g.clone())?;
                if wants(t) {
                    let (tr, tc) = self.val(t).shape();
                    let mut gt = Matrix::zeros(tr, tc);
                    for chunk in g.as_slice().chunks(tr * tc) {
                        for (o, &v) in gt.as_mut_slice().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, t, gt)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                if wants(gamma) {
                    self.accumulate(grads, gamma, column_sums(&g.hadamard(x_hat)?))?;
                }
                if wants(beta) {
                    self.accumulate(grads, beta, column_sums(g))?;
                }
                if wants(x) {
                    let gam = self.val(gamma).as_slice();
                    let d = g.cols();
                    let mut gx = Matrix::zeros(g.rows(), d);
                    for r in 0..g.rows() {
                        let dxh: Vec<Real> = g.row(r).iter().zip(gam).map(|(a, b)| a * b).collect();
                        let xh = x_hat.row(r);
                        let m1 = dxh.iter().sum::<Real>() / d as Real;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<Real>() / d as Real;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(grads, x, gx)?;
                }
            }
            Op::RowMean(a, groups) => {
                let x = self.val(*a);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for (r, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as Real;
                    for &t in grp {
                        for (o, &v) in gx.row_mut(t).iter_mut().zip(g.row(r)) {
                            *o += inv * v;
                        }
                    }
                }
                self.accumulate(grads, *a, gx)?;
            }
            Op::Unfold(a, groups) => {
                let x = self.val(*a);
                let d = x.cols();
                let mut gx = Matrix::zeros(x.rows(), d);
                for (r, grp) in groups.iter().enumerate() {
                    let gr = g.row(r);
                    for (slot, &t) in grp.iter().enumerate() {
                        for (o, &v) in gx.row_mut(t).iter_mut().zip(&gr[slot * d..(slot + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *a, gx)?;
            }
            &Op::ColSlice(a, start) => self.accumulate_into(grads, a, |acc| {
                for r in 0..g.rows() {
                    for (o, &v) in acc.row_mut(r)[start..start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += v;
                    }
                }
            }),
            &Op::RowSlice(a, start) => self.accumulate_into(grads, a, |acc| {
                let c = acc.cols();
                let block = &mut acc.as_mut_slice()[start * c..(start + g.rows()) * c];
                for (o, &v) in block.iter_mut().zip(g.as_slice()) {
                    *o += v;
                }
            }),
            Op::HCat(ids) => {
                let mut off = 0;
                for &p in ids {
                    let w = self.val(p).cols();
                    if wants(p) {
                        self.accumulate(grads, p, g.col_block(off, w)?)?;
                    }
                    off += w;
                }
            }
            Op::VCat(ids) => {
                let mut off = 0;
                for &p in ids {
                    let h = self.val(p).rows();
                    if wants(p) {
                        self.accumulate(grads, p, g.row_block(off, h)?)?;
                    }
                    off += h;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0) / labels.len() as Real;
                let mut gz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gz[(r, y)] -= 1.0;
                }
                gz.map_inplace(|v| v * scale);
                self.accumulate(grads, *logits, gz)?;
            }
            &Op::Sum(a) => {
                let (r, c) = self.val(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
        }
        Ok(())
    }

    /// With `G = g` masked to the unclamped entries:
    /// `∂a_i = 2(Σ_j G_ij·a_i − (G·B)_i)`, `∂b_j = 2(Σ_i G_ij·b_j − (Gᵀ·A)_j)`.
    fn sq_dist_backward(
        &self,
        out: usize,
        a: usize,
        b: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let d = self.val(out);
        let gm = g.zip_map(d, |gv, dv| if dv > 0.0 { gv } else { 0.0 })?;
        let (av, bv) = (self.val(a), self.val(b));
        if self.nodes[a].needs_grad {
            let gb = gm.matmul(bv)?;
            let mut ga = Matrix::zeros(av.rows(), av.cols());
            for i in 0..av.rows() {
                let rs: Real = gm.row(i).iter().sum();
                for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                    *o = 2.0 * (rs * av.get(i, k) - gb.get(i, k));
                }
            }
            self.accumulate(grads, a, ga)?;
        }
        if self.nodes[b].needs_grad {
            let ga = gm.matmul_tn(av)?;
            let cs = column_sums(&gm);
            let mut gb = Matrix::zeros(bv.rows(), bv.cols());
            for j in 0..bv.rows() {
                let s = cs.get(0, j);
                for (k, o) in gb.row_mut(j).iter_mut().enumerate() {
                    *o = 2.0 * (s * bv.get(j, k) - ga.get(j, k));
                }
            }
            self.accumulate(grads, b, gb)?;
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn row_mean_value(x: &Matrix, groups: &[Vec<usize>]) -> Result<Matrix> {
    if groups.iter().flatten().any(|&t| t >= x.rows()) || groups.iter().any(Vec::is_empty) {
        return Err(shape_err!(
            "row groups must be non-empty and index existing rows"
        ));
    }
    let mut out = Matrix::zeros(groups.len(), x.cols());
    for (r, grp) in groups.iter().enumerate() {
        let o = out.row_mut(r);
        for &t in grp {
            for (oc, &xc) in o.iter_mut().zip(x.row(t)) {
                *oc += xc;
            }
        }
        let inv = 1.0 / grp.len() as Real;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Result<Matrix> {
        if v.tape != self.tape {
            return Err(Error::Usage("variable is from a different tape".into()));
        }
        if v.id >= self.grads.len() {
            return Err(Error::Usage(format!(
                "variable {} was recorded after the differentiated output",
                v.id
            )));
        }
        Ok(match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(r, c, 1.0, &mut rng)
    }

    #[test]
    fn linear_map_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(rnd(3, 4, 1));
        let w = t.constant(rnd(4, 2, 2));
        let y = t.matmul(x, w).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        let wt = t.value(w).clone();
        let expect = Matrix::from_fn(3, 4, |_, k| wt.row(k).iter().sum());
        assert_eq!(g.wrt(x).unwrap(), expect);
        assert_eq!(g.wrt(w).unwrap(), Matrix::zeros(4, 2));
    }

    #[test]
    fn exp_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(1, 1));
        let y = t.exp(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[3.0]]).unwrap());
        let y = t.hadamard(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap().get(0, 0), 7.0);
    }

    #[test]
    fn usage_errors() {
        let mut t = Tape::new();
        let x = t.leaf(rnd(2, 2, 3));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
        let other = Tape::new();
        assert!(matches!(other.backward(x), Err(Error::Usage(_))));
        let l = t.sum(x).unwrap();
        let later = t.leaf(rnd(1, 1, 4));
        let g = t.backward(l).unwrap();
        assert!(matches!(g.wrt(later), Err(Error::Usage(_))));
        let mut t2 = Tape::new();
        let y = t2.leaf(rnd(2, 3, 5));
        assert!(matches!(t2.matmul(y, y), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_kernel() {
        let q = rnd(6, 4, 6);
        let k = rnd(3, 4, 7);
        let mut t = Tape::new();
        let (qv, kv) = (t.leaf(q.clone()), t.leaf(k.clone()));
        let d = t.pairwise_sq_dist(qv, kv).unwrap();
        assert_eq!(t.value(d), &pairwise_sq_dist(&q, &k).unwrap());
        let s = t.pairwise_sq_dist(qv, qv).unwrap();
        assert_eq!(t.value(s), &pairwise_sq_dist(&q, &q).unwrap());
        assert_eq!(t.value(s).diag(), vec![0.0; 6]);
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut t = Tape::new();
        let x = t.leaf(rnd(4, 3, 8));
        let w = t.leaf(rnd(3, 3, 9));
        let y = t.matmul(x, w).unwrap();
        let z = t.exp(y).unwrap();
        let g = t.backward_from(z, Matrix::zeros(4, 3)).unwrap();
        assert_eq!(g.wrt(x).unwrap(), Matrix::zeros(4, 3));
        assert_eq!(g.wrt(w).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn cross_entropy_value() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap());
        let l = t.cross_entropy_with_logits(z, &[0, 1]).unwrap();
        let expect = (2.0_f64.ln() + (1.0 + 2.0_f64.exp()).ln() - 0.0) / 2.0;
        assert!((t.value(l).get(0, 0) - expect as Real).abs() < 1e-12);
        assert!(t.cross_entropy_with_logits(z, &[0, 2]).is_err());
    }

    #[test]
    fn frozen_replay() {
        let mut t = Tape::new();
        t.record_frozen();
        assert_eq!(t.frozen_scalar(|| Ok(2.5)).unwrap(), 2.5);
        let rec = t.frozen_values().to_vec();
        let mut t2 = Tape::new();
        t2.replay_frozen(rec);
        assert_eq!(t2.frozen_scalar(|| Ok(9.0)).unwrap(), 2.5);
        assert!(matches!(t2.frozen_scalar(|| Ok(9.0)), Err(Error::Usage(_))));
    }
}
