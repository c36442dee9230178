use ndarray::{s, Array2, Axis, Zip};

use crate::error::{NnError, Result};
use crate::mlp::{mish, mish_derivative, mish_with_derivative};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x * w^T + b` with `w` stored `[out x in]` and `b` a `1 x out` row.
    Affine { x: usize, w: usize, b: usize },
    /// Input index and the activation derivative cached at the forward pass.
    Mish(usize, Option<Array2<f64>>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ConcatCols(Vec<usize>),
    Clamp { x: usize, lo: Vec<f64>, hi: Vec<f64> },
    Opaque(String),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Append-only computation record. Values are computed eagerly on push;
/// [`Tape::backward`] walks the record in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(a: &Array2<f64>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Records a value computed outside the tape. If any of `inputs` needs a
    /// gradient, back-propagating into this node fails with a capability error.
    pub fn opaque(&mut self, value: Array2<f64>, label: &str, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Opaque(label.to_string()), rg)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.ncols() {
            return Err(NnError::shape("affine", format!("input with {} columns", wv.ncols()), dims(xv)));
        }
        if bv.nrows() != 1 || bv.ncols() != wv.nrows() {
            return Err(NnError::shape("affine", format!("1x{} bias", wv.nrows()), dims(bv)));
        }
        let mut out = xv.dot(&wv.t());
        out += bv;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Affine { x: x.0, w: w.0, b: b.0 }, rg))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        let xv = self.value(x);
        if !rg {
            let out = xv.mapv(mish);
            return self.push(out, Op::Mish(x.0, None), false);
        }
        let mut out = Array2::zeros(xv.raw_dim());
        let mut deriv = Array2::zeros(xv.raw_dim());
        Zip::from(&mut out).and(&mut deriv).and(xv).for_each(|o, d, &v| (*o, *d) = mish_with_derivative(v));
        self.push(out, Op::Mish(x.0, Some(deriv)), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(NnError::shape(op, dims(av), dims(bv)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x.0, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x.0), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < 0.0) {
            return Err(NnError::Range("sqrt of a negative value".into()));
        }
        let out = self.value(x).mapv(f64::sqrt);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sqrt(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Array2::from_elem((1, 1), v.sum() / v.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x.0), rg)
    }

    /// Sums each row, producing a `rows x 1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(out, Op::RowSum(x.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).nrows()).unwrap_or(0);
        for &p in parts {
            if self.value(p).nrows() != rows {
                return Err(NnError::shape("concat_cols", format!("{rows} rows"), dims(self.value(p))));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![.., off..off + v.ncols()]).assign(v);
            off += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Column-wise clamp to `[lo[j], hi[j]]`. The gradient passes where the
    /// input lies inside the bounds and is zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if lo.len() != v.ncols() || hi.len() != v.ncols() {
            return Err(NnError::shape("clamp", format!("{} bounds", v.ncols()), lo.len()));
        }
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = e.clamp(lo[j], hi[j]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Clamp { x: x.0, lo: lo.to_vec(), hi: hi.to_vec() }, rg))
    }

    /// Reverse pass from a scalar (`1 x 1`) output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let out = self.value(output);
        if out.dim() != (1, 1) {
            return Err(NnError::shape("backward", "1x1 output", dims(out)));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Opaque(label) => return Err(NnError::Capability(label.clone())),
                Op::Affine { x, w, b } => {
                    if self.nodes[*x].requires_grad {
                        let gx = g.dot(&self.nodes[*w].value);
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.nodes[*w].requires_grad {
                        let gw = g.t().dot(&self.nodes[*x].value);
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.nodes[*b].requires_grad {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Mish(x, deriv) => {
                    let mut gx = g;
                    match deriv {
                        Some(d) => gx *= d,
                        None => Zip::from(&mut gx).and(&self.nodes[*x].value).for_each(|gv, &xv| *gv *= mish_derivative(xv)),
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, &g * &self.nodes[*b].value);
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, &g * &self.nodes[*a].value);
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g * *c),
                Op::Square(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&self.nodes[*x].value).for_each(|gv, &xv| *gv *= 2.0 * xv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gv, &y| *gv *= 0.5 / y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.nodes[*x].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let v = &self.nodes[*x].value;
                    let gx = Array2::from_elem(v.dim(), g[[0, 0]] / v.len().max(1) as f64);
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSum(x) => {
                    let dim = self.nodes[*x].value.dim();
                    let gx = g.broadcast(dim).expect("row-sum gradient broadcasts").to_owned();
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.nodes[p].requires_grad {
                            accumulate(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let mut gx = g;
                    let xv = &self.nodes[*x].value;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        for (j, e) in row.iter_mut().enumerate() {
                            let v = xv[[r, j]];
                            if v < lo[j] || v > hi[j] {
                                *e = 0.0;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
