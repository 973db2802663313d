//! Tape-based reverse-mode differentiation over rank-2 arrays.
//!
//! A forward pass records one node per operation; `Tensor::backward`
//! walks the records in reverse, accumulating adjoints. All tensors on
//! the tape are `[rows, cols]` matrices; scalars are `[1, 1]`. The tape
//! is single-threaded and rebuilt per forward pass, which keeps every
//! evaluation a pure function of its leaf values — the property the
//! finite-difference oracle relies on.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;

/// Context handed to a backward closure.
struct BackCtx<'a> {
    grad_out: &'a DenseArray,
    inputs: &'a [&'a DenseArray],
    out: &'a DenseArray,
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<DenseArray>>;

struct Node {
    value: DenseArray,
    grad: Option<DenseArray>,
    inputs: Vec<usize>,
    backward: Option<BackFn>,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("idx", &self.idx)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseArray, inputs: Vec<usize>, backward: Option<BackFn>) -> Tensor {
        debug_assert!(
            value.as_slice().iter().all(|v| v.is_finite()),
            "non-finite tape value"
        );
        let (rows, cols) = value.dims2().expect("tape values are rank 2");
        let mut nodes = self.inner.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            grad: None,
            inputs,
            backward,
        });
        Tensor {
            tape: self.clone(),
            idx,
            rows,
            cols,
        }
    }

    /// A differentiable leaf (parameters enter the tape through here).
    pub fn leaf(&self, value: DenseArray) -> Tensor {
        self.push(value, vec![], None)
    }

    /// A constant; gradients are still accumulated but never read.
    pub fn constant(&self, value: DenseArray) -> Tensor {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(DenseArray::scalar(v))
    }

    fn value_of(&self, idx: usize) -> DenseArray {
        self.inner.borrow()[idx].value.clone()
    }

    fn grad_of(&self, idx: usize) -> Option<DenseArray> {
        self.inner.borrow()[idx].grad.clone()
    }

    /// Reverse sweep seeding d(out)/d(out) = 1. `from` must be scalar.
    fn backward_from(&self, from: usize) -> Result<()> {
        let mut nodes = self.inner.borrow_mut();
        if nodes[from].value.len() != 1 {
            return Err(Error::Dimension(
                "backward requires a scalar output".into(),
            ));
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        let seed = DenseArray::filled(nodes[from].value.shape().to_vec(), 1.0);
        nodes[from].grad = Some(seed);

        for i in (0..nodes.len()).rev() {
            let grad_out = match nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let (input_idx, input_grads) = {
                let node = &nodes[i];
                let backward = match &node.backward {
                    Some(b) => b,
                    None => continue,
                };
                let input_refs: Vec<&DenseArray> =
                    node.inputs.iter().map(|&j| &nodes[j].value).collect();
                let ctx = BackCtx {
                    grad_out: &grad_out,
                    inputs: &input_refs,
                    out: &node.value,
                };
                (node.inputs.clone(), backward(&ctx))
            };
            debug_assert_eq!(input_idx.len(), input_grads.len());
            for (&j, g) in input_idx.iter().zip(input_grads) {
                match &mut nodes[j].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.rows == b.rows && a.cols == b.cols {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{op}: [{}x{}] vs [{}x{}]",
            a.rows, a.cols, b.rows, b.cols
        )))
    }
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> DenseArray {
        self.tape.value_of(self.idx)
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.value().scalar_value()
    }

    /// Gradient accumulated by the last backward pass, if any reached
    /// this node.
    pub fn grad(&self) -> Option<DenseArray> {
        self.tape.grad_of(self.idx)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.idx)
    }

    fn unary(&self, value: DenseArray, backward: BackFn) -> Tensor {
        self.tape.push(value, vec![self.idx], Some(backward))
    }

    fn binary(&self, other: &Tensor, value: DenseArray, backward: BackFn) -> Tensor {
        self.tape
            .push(value, vec![self.idx, other.idx], Some(backward))
    }

    // ---- elementwise arithmetic ------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let v = self.value().add(&other.value())?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| vec![ctx.grad_out.clone(), ctx.grad_out.clone()]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| vec![ctx.grad_out.clone(), ctx.grad_out.scale(-1.0)]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| {
                let da = ctx.grad_out.zip_map(ctx.inputs[1], |g, b| g * b).unwrap();
                let db = ctx.grad_out.zip_map(ctx.inputs[0], |g, a| g * a).unwrap();
                vec![da, db]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "div")?;
        let v = self.value().zip_map(&other.value(), |a, b| a / b)?;
        v.check_finite("div")?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| {
                let da = ctx.grad_out.zip_map(ctx.inputs[1], |g, b| g / b).unwrap();
                let db_num = ctx.grad_out.zip_map(ctx.inputs[0], |g, a| g * a).unwrap();
                let db = db_num
                    .zip_map(ctx.inputs[1], |ga, b| -ga / (b * b))
                    .unwrap();
                vec![da, db]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(
            self.value().scale(-1.0),
            Box::new(|ctx| vec![ctx.grad_out.scale(-1.0)]),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(
            self.value().scale(c),
            Box::new(move |ctx| vec![ctx.grad_out.scale(c)]),
        )
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.unary(
            self.value().map(|v| v + c),
            Box::new(|ctx| vec![ctx.grad_out.clone()]),
        )
    }

    /// Broadcast-add a `[1 x n]` row vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Dimension(format!(
                "add_row: [{}x{}] + [{}x{}]",
                self.rows, self.cols, row.rows, row.cols
            )));
        }
        let a = self.value();
        let r = row.value();
        let (m, n) = a.dims2()?;
        let mut data = a.into_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r.as_slice()[j];
            }
        }
        let v = DenseArray::new(vec![m, n], data)?;
        Ok(self.binary(
            row,
            v,
            Box::new(move |ctx| {
                let g = ctx.grad_out;
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g.as_slice()[i * n + j];
                    }
                }
                vec![
                    g.clone(),
                    DenseArray::new(vec![1, n], dr).unwrap(),
                ]
            }),
        ))
    }

    /// Multiply every element by a `[1 x 1]` scalar tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.rows != 1 || s.cols != 1 {
            return Err(Error::Dimension("mul_scalar: scalar must be 1x1".into()));
        }
        let sv = s.scalar_value()?;
        let v = self.value().scale(sv);
        Ok(self.binary(
            s,
            v,
            Box::new(move |ctx| {
                let ds: f64 = ctx
                    .grad_out
                    .as_slice()
                    .iter()
                    .zip(ctx.inputs[0].as_slice())
                    .map(|(&g, &x)| g * x)
                    .sum();
                vec![ctx.grad_out.scale(sv), DenseArray::scalar(ds)]
            }),
        ))
    }

    /// Broadcast a `[1 x n]` row to `[m x n]`.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        if self.rows != 1 {
            return Err(Error::Dimension("broadcast_rows needs a [1 x n] input".into()));
        }
        let n = self.cols;
        let row = self.value().into_vec();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&row);
        }
        let v = DenseArray::new(vec![m, n], data)?;
        Ok(self.unary(
            v,
            Box::new(move |ctx| {
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += ctx.grad_out.as_slice()[i * n + j];
                    }
                }
                vec![DenseArray::new(vec![1, n], dr).unwrap()]
            }),
        ))
    }

    // ---- matrix products -------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul: [{}x{}] x [{}x{}]",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| {
                let a = ctx.inputs[0];
                let b = ctx.inputs[1];
                let da = ctx.grad_out.matmul(&b.transposed().unwrap()).unwrap();
                let db = a.transposed().unwrap().matmul(ctx.grad_out).unwrap();
                vec![da, db]
            }),
        ))
    }

    /// `self · otherᵀ` without materializing the transpose node.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_nt: [{}x{}] x [{}x{}]ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let v = self.value().matmul(&other.value().transposed()?)?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| {
                // out = a bᵀ: da = g b, db = gᵀ a
                let a = ctx.inputs[0];
                let b = ctx.inputs[1];
                let da = ctx.grad_out.matmul(b).unwrap();
                let db = ctx.grad_out.transposed().unwrap().matmul(a).unwrap();
                vec![da, db]
            }),
        ))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.value().as_slice().iter().sum();
        let (m, n) = (self.rows, self.cols);
        self.unary(
            DenseArray::scalar(s),
            Box::new(move |ctx| {
                let g = ctx.grad_out.as_slice()[0];
                vec![DenseArray::filled(vec![m, n], g)]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let count = (self.rows * self.cols) as f64;
        let s: f64 = self.value().as_slice().iter().sum();
        let (m, n) = (self.rows, self.cols);
        self.unary(
            DenseArray::scalar(s / count),
            Box::new(move |ctx| {
                let g = ctx.grad_out.as_slice()[0] / count;
                vec![DenseArray::filled(vec![m, n], g)]
            }),
        )
    }

    /// Column-wise mean: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let a = self.value();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += a.as_slice()[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.unary(
            DenseArray::new(vec![1, n], out).unwrap(),
            Box::new(move |ctx| {
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        )
    }

    /// Column-wise sum: `[m x n] -> [1 x n]`.
    pub fn sum_rows(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let a = self.value();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += a.as_slice()[i * n + j];
            }
        }
        self.unary(
            DenseArray::new(vec![1, n], out).unwrap(),
            Box::new(move |ctx| {
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j];
                    }
                }
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        )
    }

    /// Column-wise max over rows; ties resolve to the lowest row index.
    pub fn max_rows(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let a = self.value();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0usize; n];
        for i in 0..m {
            for j in 0..n {
                let v = a.as_slice()[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.unary(
            DenseArray::new(vec![1, n], out).unwrap(),
            Box::new(move |ctx| {
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    da[arg[j] * n + j] = g[j];
                }
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        )
    }

    // ---- row-structured softmax family -------------------------------

    pub fn softmax_rows(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let a = self.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a.as_slice()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        self.unary(
            DenseArray::new(vec![m, n], out).unwrap(),
            Box::new(move |ctx| {
                let s = ctx.out.as_slice();
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * s[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        )
    }

    /// Row-wise log-sum-exp: `[m x n] -> [m x 1]`, max-shifted.
    pub fn log_sum_exp_rows(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let a = self.value();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &a.as_slice()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            out[i] = mx + z.ln();
        }
        self.unary(
            DenseArray::new(vec![m, 1], out).unwrap(),
            Box::new(move |ctx| {
                let a = ctx.inputs[0].as_slice();
                let lse = ctx.out.as_slice();
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i] * (a[i * n + j] - lse[i]).exp();
                    }
                }
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        )
    }

    /// Main diagonal of a square matrix as `[n x 1]`.
    pub fn diag_part(&self) -> Result<Tensor> {
        if self.rows != self.cols {
            return Err(Error::Dimension(format!(
                "diag_part on [{}x{}]",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let a = self.value();
        let out: Vec<f64> = (0..n).map(|i| a.get2(i, i)).collect();
        Ok(self.unary(
            DenseArray::new(vec![n, 1], out).unwrap(),
            Box::new(move |ctx| {
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    da[i * n + i] = g[i];
                }
                vec![DenseArray::new(vec![n, n], da).unwrap()]
            }),
        ))
    }

    /// Row-wise L2 normalization. Errors when a row norm is below `eps`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (m, n) = (self.rows, self.cols);
        let a = self.value();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a.as_slice()[i * n..(i + 1) * n];
            let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r <= eps {
                return Err(Error::DegenerateEmbedding(r));
            }
            norms[i] = r;
            for j in 0..n {
                out[i * n + j] = row[j] / r;
            }
        }
        Ok(self.unary(
            DenseArray::new(vec![m, n], out).unwrap(),
            Box::new(move |ctx| {
                let y = ctx.out.as_slice();
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = (g[i * n + j] - y[i * n + j] * dot) / norms[i];
                    }
                }
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        ))
    }

    // ---- elementwise nonlinearities ----------------------------------

    fn pointwise(
        &self,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let v = self.value().map(f);
        self.unary(
            v,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].as_slice();
                let y = ctx.out.as_slice();
                let g = ctx.grad_out.as_slice();
                let da: Vec<f64> = (0..x.len()).map(|i| g[i] * dfdx(x[i], y[i])).collect();
                vec![DenseArray::new(ctx.inputs[0].shape().to_vec(), da).unwrap()]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.pointwise(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.value().as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("ln of non-positive value".into()));
        }
        Ok(self.pointwise(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.value().as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        Ok(self.pointwise(f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn tanh(&self) -> Tensor {
        self.pointwise(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        self.pointwise(
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Numerically stable `ln(1 + e^x)`; derivative is the sigmoid.
    pub fn softplus(&self) -> Tensor {
        self.pointwise(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn abs(&self) -> Tensor {
        self.pointwise(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sin(&self) -> Tensor {
        self.pointwise(f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        self.pointwise(f64::cos, |x, _| -x.sin())
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min2(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "min2")?;
        let v = self.value().zip_map(&other.value(), f64::min)?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| {
                let a = ctx.inputs[0].as_slice();
                let b = ctx.inputs[1].as_slice();
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; a.len()];
                for i in 0..a.len() {
                    if a[i] <= b[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                let shape = ctx.inputs[0].shape().to_vec();
                vec![
                    DenseArray::new(shape.clone(), da).unwrap(),
                    DenseArray::new(shape, db).unwrap(),
                ]
            }),
        ))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn max2(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "max2")?;
        let v = self.value().zip_map(&other.value(), f64::max)?;
        Ok(self.binary(
            other,
            v,
            Box::new(|ctx| {
                let a = ctx.inputs[0].as_slice();
                let b = ctx.inputs[1].as_slice();
                let g = ctx.grad_out.as_slice();
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; a.len()];
                for i in 0..a.len() {
                    if a[i] >= b[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                let shape = ctx.inputs[0].shape().to_vec();
                vec![
                    DenseArray::new(shape.clone(), da).unwrap(),
                    DenseArray::new(shape, db).unwrap(),
                ]
            }),
        ))
    }

    // ---- structural ops ----------------------------------------------

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let v = self.value().reshaped(vec![rows, cols])?;
        let (m, n) = (self.rows, self.cols);
        Ok(self.unary(
            v,
            Box::new(move |ctx| vec![ctx.grad_out.reshaped(vec![m, n]).unwrap()]),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        self.unary(
            self.value().transposed().unwrap(),
            Box::new(|ctx| vec![ctx.grad_out.transposed().unwrap()]),
        )
    }

    /// Extract row `i` as `[1 x n]`.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if i >= self.rows {
            return Err(Error::Dimension(format!(
                "row {i} of [{}x{}]",
                self.rows, self.cols
            )));
        }
        let (m, n) = (self.rows, self.cols);
        let v = DenseArray::new(vec![1, n], self.value().row(i).to_vec())?;
        Ok(self.unary(
            v,
            Box::new(move |ctx| {
                let mut da = vec![0.0; m * n];
                da[i * n..(i + 1) * n].copy_from_slice(ctx.grad_out.as_slice());
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        ))
    }

    /// Extract element `(i, j)` as a `[1 x 1]` scalar.
    pub fn elem(&self, i: usize, j: usize) -> Result<Tensor> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::Dimension(format!(
                "elem ({i},{j}) of [{}x{}]",
                self.rows, self.cols
            )));
        }
        let (m, n) = (self.rows, self.cols);
        let v = DenseArray::scalar(self.value().get2(i, j));
        Ok(self.unary(
            v,
            Box::new(move |ctx| {
                let mut da = vec![0.0; m * n];
                da[i * n + j] = ctx.grad_out.as_slice()[0];
                vec![DenseArray::new(vec![m, n], da).unwrap()]
            }),
        ))
    }
}

/// Vertically stack tensors with a shared column count.
pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("vstack of zero tensors".into()))?;
    let tape = first.tape.clone();
    let n = first.cols;
    let mut data = Vec::new();
    let mut total_rows = 0;
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        if p.cols != n {
            return Err(Error::Dimension(format!(
                "vstack: {} cols vs {}",
                p.cols, n
            )));
        }
        data.extend_from_slice(p.value().as_slice());
        total_rows += p.rows;
        row_counts.push(p.rows);
    }
    let v = DenseArray::new(vec![total_rows, n], data)?;
    let inputs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    Ok(tape.push(
        v,
        inputs,
        Some(Box::new(move |ctx| {
            let g = ctx.grad_out.as_slice();
            let mut grads = Vec::with_capacity(row_counts.len());
            let mut offset = 0;
            for &r in &row_counts {
                let chunk = g[offset * n..(offset + r) * n].to_vec();
                grads.push(DenseArray::new(vec![r, n], chunk).unwrap());
                offset += r;
            }
            grads
        })),
    ))
}

/// Horizontally concatenate `[1 x c_i]` rows into `[1 x Σc_i]`.
pub fn hstack(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("hstack of zero tensors".into()))?;
    let tape = first.tape.clone();
    let mut data = Vec::new();
    let mut col_counts = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rows != 1 {
            return Err(Error::Dimension("hstack expects [1 x c] parts".into()));
        }
        data.extend_from_slice(p.value().as_slice());
        col_counts.push(p.cols);
    }
    let total: usize = col_counts.iter().sum();
    let v = DenseArray::new(vec![1, total], data)?;
    let inputs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    Ok(tape.push(
        v,
        inputs,
        Some(Box::new(move |ctx| {
            let g = ctx.grad_out.as_slice();
            let mut grads = Vec::with_capacity(col_counts.len());
            let mut offset = 0;
            for &c in &col_counts {
                grads.push(DenseArray::new(vec![1, c], g[offset..offset + c].to_vec()).unwrap());
                offset += c;
            }
            grads
        })),
    ))
}

/// Sum a list of scalar tensors.
pub fn sum_scalars(parts: &[Tensor]) -> Result<Tensor> {
    let stacked = vstack(parts)?;
    Ok(stacked.sum_all())
}

/// Mean of a list of scalar tensors.
pub fn mean_scalars(parts: &[Tensor]) -> Result<Tensor> {
    let stacked = vstack(parts)?;
    Ok(stacked.mean_all())
}
