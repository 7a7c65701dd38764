//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! Each [`Var`] records the operation that produced it and a monotonically
//! increasing tape position. [`Var::backward`] replays the reachable part of
//! the tape in reverse position order. Values that do not depend on any
//! trainable input are recorded as constants and keep no parents, so
//! inference-only forward passes free their intermediates eagerly.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static TAPE_POS: Cell<u64> = const { Cell::new(0) };
}

fn next_pos() -> u64 {
    TAPE_POS.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Scale(f64),
    Transpose,
    SoftmaxRows,
    LayerNorm { xhat: Tensor, inv_std: Vec<f64> },
    Gelu,
    GatherRows(Vec<usize>),
    ScatterRows(Vec<usize>),
    Upsample { h: usize, w: usize, factor: usize },
    Reshape,
    ConcatRows(Vec<usize>),
    SliceCols { start: usize },
    ConcatCols(Vec<usize>),
    Sum,
    MseLoss,
    SumSquares,
}

#[derive(Debug)]
struct Node {
    pos: u64,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    requires_grad: bool,
    op: Op,
    parents: Vec<Var>,
}

/// A tensor-valued node of the differentiable computation graph.
#[derive(Clone, Debug)]
pub struct Var(Rc<Node>);

impl Var {
    /// A trainable leaf; receives a gradient on backward.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            pos: next_pos(),
            value,
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    fn record(value: Tensor, op: Op, parents: Vec<Var>) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                pos: next_pos(),
                value,
                grad: RefCell::new(None),
                requires_grad: true,
                op,
                parents,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient populated by the last [`Var::backward`] through this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    /// Same node, compared by identity.
    pub fn ptr_eq(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = self.value().matmul(other.value())?;
        Ok(Self::record(v, Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(Self::record(v, Op::Add, vec![self.clone(), other.clone()]))
    }

    /// Adds a `1×C` row to every row of an `N×C` matrix.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let (x, r) = (self.value(), row.value());
        if x.shape().len() != 2 || r.shape() != [1, x.cols()] {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let c = x.cols();
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(Self::record(out, Op::AddRow, vec![self.clone(), row.clone()]))
    }

    pub fn scale(&self, s: f64) -> Var {
        Self::record(self.value().scale(s), Op::Scale(s), vec![self.clone()])
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(Self::record(v, Op::Transpose, vec![self.clone()]))
    }

    pub fn softmax_rows(&self) -> Result<Var> {
        let v = self.value().softmax_rows()?;
        Ok(Self::record(v, Op::SoftmaxRows, vec![self.clone()]))
    }

    /// Per-row layer normalization with `1×C` scale and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var) -> Result<Var> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::shape("layer_norm", x.shape(), &[0, 0]));
        }
        let c = x.cols();
        if gamma.shape() != [1, c] || beta.shape() != [1, c] {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in xhat.data_mut().chunks_exact_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for ((o, g), b) in row.iter_mut().zip(gamma.value().data()).zip(beta.value().data()) {
                *o = *o * g + b;
            }
        }
        Ok(Self::record(
            out,
            Op::LayerNorm { xhat, inv_std },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        let v = self.value().map(|x| {
            let t = (SQRT_2_OVER_PI * (x + GELU_K * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        Self::record(v, Op::Gelu, vec![self.clone()])
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let v = self.value().gather_rows(idx)?;
        Ok(Self::record(v, Op::GatherRows(idx.to_vec()), vec![self.clone()]))
    }

    /// Copy of `self` with rows `idx` overwritten by `rows`.
    pub fn scatter_rows(&self, idx: &[usize], rows: &Var) -> Result<Var> {
        let v = self.value().scatter_rows(idx, rows.value())?;
        Ok(Self::record(v, Op::ScatterRows(idx.to_vec()), vec![self.clone(), rows.clone()]))
    }

    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var> {
        let v = self.value().upsample_bilinear(factor)?;
        let (h, w) = (self.shape()[0], self.shape()[1]);
        Ok(Self::record(v, Op::Upsample { h, w, factor }, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(Self::record(v, Op::Reshape, vec![self.clone()]))
    }

    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let v = Tensor::concat_rows(&values)?;
        let counts = values.iter().map(|t| t.rows()).collect();
        Ok(Self::record(v, Op::ConcatRows(counts), parts.to_vec()))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let v = self.value().slice_cols(start, len)?;
        Ok(Self::record(v, Op::SliceCols { start }, vec![self.clone()]))
    }

    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let v = Tensor::concat_cols(&values)?;
        let widths = values.iter().map(|t| t.cols()).collect();
        Ok(Self::record(v, Op::ConcatCols(widths), parts.to_vec()))
    }

    pub fn sum(&self) -> Var {
        Self::record(Tensor::scalar(self.value().sum()), Op::Sum, vec![self.clone()])
    }

    pub fn sum_squares(&self) -> Var {
        let s = self.value().data().iter().map(|v| v * v).sum();
        Self::record(Tensor::scalar(s), Op::SumSquares, vec![self.clone()])
    }

    /// Mean of squared element-wise differences.
    pub fn mse_loss(&self, target: &Var) -> Result<Var> {
        let d = self.value().sub(target.value())?;
        let m = d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64;
        Ok(Self::record(Tensor::scalar(m), Op::MseLoss, vec![self.clone(), target.clone()]))
    }

    /// Populates `grad` on every trainable node this scalar depends on.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Var> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.0.pos) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.pos) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.0.pos));

        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(self.0.pos, Tensor::full(self.shape(), 1.0));
        for v in &order {
            let g = grads
                .remove(&v.0.pos)
                .unwrap_or_else(|| Tensor::zeros(v.shape()));
            for (parent, pg) in v.0.parents.iter().zip(v.local_grads(&g)?) {
                if let (true, Some(pg)) = (parent.requires_grad(), pg) {
                    match grads.get_mut(&parent.0.pos) {
                        Some(acc) => acc.add_assign(&pg),
                        None => {
                            grads.insert(parent.0.pos, pg);
                        }
                    }
                }
            }
            *v.0.grad.borrow_mut() = Some(g);
        }
        Ok(())
    }

    /// Vector-Jacobian products for each parent, given the output gradient.
    fn local_grads(&self, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let n = &self.0;
        let pv = |i: usize| n.parents[i].value();
        let wants = |i: usize| n.parents[i].requires_grad();
        Ok(match &n.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let ga = if wants(0) { Some(g.matmul(&pv(1).transpose()?)?) } else { None };
                let gb = if wants(1) { Some(pv(0).transpose()?.matmul(g)?) } else { None };
                vec![ga, gb]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddRow => vec![Some(g.clone()), Some(g.sum_rows()?)],
            Op::Scale(s) => vec![Some(g.scale(*s))],
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::SoftmaxRows => {
                let y = &n.value;
                let c = y.cols();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                    let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (o, yv) in orow.iter_mut().zip(yrow) {
                        *o = yv * (*o - dot);
                    }
                }
                vec![Some(out)]
            }
            Op::LayerNorm { xhat, inv_std } => {
                let c = xhat.cols();
                let gamma = pv(1).data();
                let mut gx = g.clone();
                let mut ggamma = vec![0.0; c];
                for ((grow, xrow), s) in gx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(xhat.data().chunks_exact(c))
                    .zip(inv_std)
                {
                    for ((gg, gv), xv) in ggamma.iter_mut().zip(grow.iter()).zip(xrow) {
                        *gg += gv * xv;
                    }
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for ((gv, gm), xv) in grow.iter_mut().zip(gamma).zip(xrow) {
                        *gv *= gm;
                        mean_d += *gv;
                        mean_dx += *gv * xv;
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for (gv, xv) in grow.iter_mut().zip(xrow) {
                        *gv = s * (*gv - mean_d - xv * mean_dx);
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::new(vec![1, c], ggamma)?),
                    Some(g.sum_rows()?),
                ]
            }
            Op::Gelu => {
                let d = pv(0).map(|x| {
                    let u = SQRT_2_OVER_PI * (x + GELU_K * x * x * x);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_K * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                vec![Some(d.zip_map(g, "gelu", |a, b| a * b)?)]
            }
            Op::GatherRows(idx) => {
                vec![Some(Tensor::zeros(pv(0).shape()).scatter_rows(idx, g)?)]
            }
            Op::ScatterRows(idx) => {
                let zeros = Tensor::zeros(&[idx.len(), g.cols()]);
                vec![Some(g.scatter_rows(idx, &zeros)?), Some(g.gather_rows(idx)?)]
            }
            Op::Upsample { h, w, factor } => {
                vec![Some(Tensor::upsample_bilinear_adjoint(g, *h, *w, *factor))]
            }
            Op::Reshape => vec![Some(g.reshape(pv(0).shape())?)],
            Op::ConcatRows(counts) => {
                let c = g.cols();
                let mut start = 0;
                let mut out = Vec::with_capacity(counts.len());
                for &r in counts {
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    out.push(Some(Tensor::new(vec![r, c], data)?));
                    start += r;
                }
                out
            }
            Op::SliceCols { start } => {
                let (r, c) = (pv(0).rows(), pv(0).cols());
                let len = g.cols();
                let mut out = Tensor::zeros(&[r, c]);
                for (orow, grow) in out.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    orow[*start..start + len].copy_from_slice(grow);
                }
                vec![Some(out)]
            }
            Op::ConcatCols(widths) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(widths.len());
                for &w in widths {
                    out.push(Some(g.slice_cols(start, w)?));
                    start += w;
                }
                out
            }
            Op::Sum => vec![Some(Tensor::full(pv(0).shape(), g.item()))],
            Op::SumSquares => vec![Some(pv(0).scale(2.0 * g.item()))],
            Op::MseLoss => {
                let d = pv(0).sub(pv(1))?;
                let ga = d.scale(2.0 * g.item() / d.numel() as f64);
                let gb = ga.scale(-1.0);
                vec![Some(ga), Some(gb)]
            }
        })
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Argument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let input = Var::param(x.clone());
    let out = f(&input)?;
    if out.value().numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic = input.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = central_differences(|t| Ok(f(&Var::constant(t))?.value().item()), x, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_differences<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(probe.clone())?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
