//! Recording tape for batched, row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix; vectors are carried as
//! `1 × n` rows (or `batch × n` for a batch of row vectors). Operations are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{AutodiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Squared-magnitude floor below which [`Tape::unit_modulus`] treats an
/// element as singular.
pub const UNIT_MODULUS_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    UnitModulus(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-writer operation log. One tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one (optional) adjoint per node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Nodes with no path to the
    /// loss get an all-zero matrix of their own shape.
    pub fn get(&self, var: Var) -> Array2<f64> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros((var.rows, var.cols)),
        }
    }

    /// Moves the gradient out without copying.
    pub fn take(&mut self, var: Var) -> Array2<f64> {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Array2::zeros((var.rows, var.cols)),
        }
    }
}

fn check_same(op: &'static str, a: Var, b: Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn check_row(op: &'static str, a: Var, row: Var) -> Result<()> {
    if row.rows != 1 || row.cols != a.cols {
        return Err(AutodiffError::Dimension {
            op,
            lhs: a.shape(),
            rhs: row.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { id, rows, cols }
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.id].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.id].value[[0, 0]]
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn check_finite(&self, var: Var, what: &str) -> Result<()> {
        if self.nodes[var.id].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite(what.to_string()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(AutodiffError::Dimension {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", a, b)?;
        let value = &self.nodes[a.id].value + &self.nodes[b.id].value;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", a, b)?;
        let value = &self.nodes[a.id].value - &self.nodes[b.id].value;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", a, b)?;
        let value = &self.nodes[a.id].value * &self.nodes[b.id].value;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    /// Adds a `1 × n` row to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        check_row("add_row", a, row)?;
        let value = &self.nodes[a.id].value + &self.nodes[row.id].value;
        let g = self.grad_of(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), g))
    }

    /// Multiplies every row of `a` element-wise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        check_row("mul_row", a, row)?;
        let value = &self.nodes[a.id].value * &self.nodes[row.id].value;
        let g = self.grad_of(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), g))
    }

    /// Stacks a `1 × n` row `rows` times.
    pub fn repeat_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        if row.rows != 1 || rows == 0 {
            return Err(AutodiffError::Dimension {
                op: "repeat_rows",
                lhs: row.shape(),
                rhs: (rows, row.cols),
            });
        }
        let src = &self.nodes[row.id].value;
        let value = src
            .broadcast((rows, row.cols))
            .expect("row broadcast")
            .to_owned();
        let g = self.grad_of(&[row]);
        Ok(self.push(value, Op::RepeatRows(row), g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = &self.nodes[a.id].value * factor;
        let g = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, factor), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(f64::tanh);
        let g = self.grad_of(&[a]);
        self.push(value, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(sigmoid);
        let g = self.grad_of(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| x.max(0.0));
        let g = self.grad_of(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| x * x);
        let g = self.grad_of(&[a]);
        self.push(value, Op::Square(a), g)
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.id].value.sum();
        let g = self.grad_of(&[a]);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), g)
    }

    /// Row sums: `b × n` to `b × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let g = self.grad_of(&[a]);
        self.push(value, Op::SumCols(a), g)
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > a.cols {
            return Err(AutodiffError::Dimension {
                op: "slice_cols",
                lhs: a.shape(),
                rhs: (start, end),
            });
        }
        let value = self.nodes[a.id].value.slice(s![.., start..end]).to_owned();
        let g = self.grad_of(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), g))
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Dimension {
            op: "concat_cols",
            lhs: (0, 0),
            rhs: (0, 0),
        })?;
        for p in parts {
            if p.rows != first.rows {
                return Err(AutodiffError::Dimension {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.id].value.view())
            .collect();
        let value = concatenate(Axis(1), &views).expect("equal row counts");
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Element-wise projection onto the unit circle.
    ///
    /// Input layout is `[re_1 .. re_N | im_1 .. im_N]` per row; each pair
    /// `(re_n, im_n)` is divided by its magnitude. Pairs whose squared
    /// magnitude is below [`UNIT_MODULUS_FLOOR`] map to `(1, 0)` and pass no
    /// gradient.
    pub fn unit_modulus(&mut self, a: Var) -> Result<Var> {
        if a.cols % 2 != 0 {
            return Err(AutodiffError::Dimension {
                op: "unit_modulus",
                lhs: a.shape(),
                rhs: (a.rows, a.cols + 1),
            });
        }
        let half = a.cols / 2;
        let x = &self.nodes[a.id].value;
        let mut value = Array2::zeros(x.dim());
        for r in 0..a.rows {
            for n in 0..half {
                let re = x[[r, n]];
                let im = x[[r, n + half]];
                let m2 = re * re + im * im;
                if m2 < UNIT_MODULUS_FLOOR {
                    value[[r, n]] = 1.0;
                    value[[r, n + half]] = 0.0;
                } else {
                    let m = m2.sqrt();
                    value[[r, n]] = re / m;
                    value[[r, n + half]] = im / m;
                }
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(value, Op::UnitModulus(a), g))
    }

    /// Complex product of `(re1, im1)` and `(re2, im2)` carried as real pairs.
    pub fn complex_mul(&mut self, lhs: (Var, Var), rhs: (Var, Var)) -> Result<(Var, Var)> {
        let rr = self.mul(lhs.0, rhs.0)?;
        let ii = self.mul(lhs.1, rhs.1)?;
        let ri = self.mul(lhs.0, rhs.1)?;
        let ir = self.mul(lhs.1, rhs.0)?;
        Ok((self.sub(rr, ii)?, self.add(ri, ir)?))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(loss.shape()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.id].needs_grad {
                        let ga = g.dot(&self.nodes[b.id].value.t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.id].needs_grad {
                        let gb = self.nodes[a.id].value.t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *b, || g.clone());
                    self.send(&mut grads, *a, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *b, || -&g);
                    self.send(&mut grads, *a, || g.clone());
                }
                Op::Mul(a, b) => {
                    self.send(&mut grads, *a, || &g * &self.nodes[b.id].value);
                    self.send(&mut grads, *b, || &g * &self.nodes[a.id].value);
                }
                Op::AddRow(a, row) => {
                    self.send(&mut grads, *row, || {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    });
                    self.send(&mut grads, *a, || g.clone());
                }
                Op::MulRow(a, row) => {
                    self.send(&mut grads, *row, || {
                        (&g * &self.nodes[a.id].value)
                            .sum_axis(Axis(0))
                            .insert_axis(Axis(0))
                    });
                    self.send(&mut grads, *a, || &g * &self.nodes[row.id].value);
                }
                Op::RepeatRows(row) => {
                    self.send(&mut grads, *row, || {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    });
                }
                Op::Scale(a, f) => {
                    self.send(&mut grads, *a, || &g * *f);
                }
                Op::Tanh(a) => {
                    self.send(&mut grads, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out)
                            .and(&node.value)
                            .for_each(|o, &y| *o *= 1.0 - y * y);
                        out
                    });
                }
                Op::Sigmoid(a) => {
                    self.send(&mut grads, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out)
                            .and(&node.value)
                            .for_each(|o, &y| *o *= y * (1.0 - y));
                        out
                    });
                }
                Op::Relu(a) => {
                    self.send(&mut grads, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out)
                            .and(&self.nodes[a.id].value)
                            .for_each(|o, &x| {
                                if x <= 0.0 {
                                    *o = 0.0
                                }
                            });
                        out
                    });
                }
                Op::Square(a) => {
                    self.send(&mut grads, *a, || {
                        let mut out = g.clone();
                        Zip::from(&mut out)
                            .and(&self.nodes[a.id].value)
                            .for_each(|o, &x| *o *= 2.0 * x);
                        out
                    });
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    self.send(&mut grads, *a, || Array2::from_elem(a.shape(), s));
                }
                Op::SumCols(a) => {
                    self.send(&mut grads, *a, || {
                        g.broadcast(a.shape()).expect("column broadcast").to_owned()
                    });
                }
                Op::SliceCols(a, start) => {
                    self.send(&mut grads, *a, || {
                        let mut out = Array2::zeros(a.shape());
                        out.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        out
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = p.cols;
                        self.send(&mut grads, *p, || {
                            g.slice(s![.., offset..offset + w]).to_owned()
                        });
                        offset += w;
                    }
                }
                Op::UnitModulus(a) => {
                    self.send(&mut grads, *a, || {
                        let x = &self.nodes[a.id].value;
                        let half = a.cols / 2;
                        let mut out = Array2::zeros(a.shape());
                        for r in 0..a.rows {
                            for n in 0..half {
                                let re = x[[r, n]];
                                let im = x[[r, n + half]];
                                let m2 = re * re + im * im;
                                if m2 < UNIT_MODULUS_FLOOR {
                                    continue;
                                }
                                let m3 = m2 * m2.sqrt();
                                let (gr, gi) = (g[[r, n]], g[[r, n + half]]);
                                out[[r, n]] = (gr * im * im - gi * re * im) / m3;
                                out[[r, n + half]] = (gi * re * re - gr * re * im) / m3;
                            }
                        }
                        out
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn send(
        &self,
        grads: &mut [Option<Array2<f64>>],
        target: Var,
        make: impl FnOnce() -> Array2<f64>,
    ) {
        if self.nodes[target.id].needs_grad {
            accumulate(grads, target, make());
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], target: Var, g: Array2<f64>) {
    match &mut grads[target.id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
