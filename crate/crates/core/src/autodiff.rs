//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Values
//! flowing through the graph are [`Var`]s: a shared [`Tensor`] plus an
//! optional node handle. Operations on constants never touch the tape, so
//! gradient-free evaluation runs the exact same code without allocating nodes.
//!
//! Broadcasting is limited to scalar-with-tensor; everything else is written
//! with explicit shapes (`add_bias`, `gather`, the row reductions).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    shape: Vec<usize>,
}

/// Append-only record of differentiable operations.
///
/// Inputs always precede outputs, so insertion order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    zero_norm_warnings: Cell<usize>,
}

/// A value on (or alongside) a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    node: Option<usize>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        var.node
            .and_then(|id| self.by_node.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many zero vectors `l2_normalize` has passed through unchanged.
    pub fn zero_norm_warnings(&self) -> usize {
        self.zero_norm_warnings.get()
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            backward: None,
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node: Some(id),
        }
    }

    /// A value that never requires gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn record<'t>(
        &'t self,
        op: &'static str,
        out: Tensor,
        parents: &[&Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let inputs: Vec<usize> = parents.iter().filter_map(|p| p.node).collect();
        let node = if inputs.is_empty() {
            None
        } else {
            let needs: Vec<bool> = parents.iter().map(|p| p.node.is_some()).collect();
            let shape = out.shape().to_vec();
            // Parents without nodes are skipped when mapping gradients back.
            let wrapped = move |g: &Tensor| {
                let grads = backward(g, &needs);
                grads
                    .into_iter()
                    .zip(&needs)
                    .filter(|(_, n)| **n)
                    .map(|(g, _)| g)
                    .collect()
            };
            Some(self.push(Node {
                op,
                inputs,
                backward: Some(Box::new(wrapped)),
                shape,
            }))
        };
        Var {
            tape: self,
            value: Rc::new(out),
            node,
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { by_node: grads });
        };
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            debug_assert_eq!(g.shape(), node.shape.as_slice(), "{}", node.op);
            let input_grads = backward(&g);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&ig),
                    None => grads[input] = Some(ig),
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![rank],
        });
    }
    Ok(())
}

/// Sums a gradient down to the shape of a scalar-broadcast operand.
fn reduce_to(g: Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value; panics on non-scalar.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    fn binary(&self, other: &Var<'t>, kind: Bin) -> Result<Var<'t>> {
        let (a, b) = (&*self.value, &*other.value);
        let op = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
        };
        let f = move |x: f64, y: f64| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
        };
        let out_shape = if a.shape() == b.shape() || b.is_scalar() {
            a.shape().to_vec()
        } else if a.is_scalar() {
            b.shape().to_vec()
        } else {
            return Err(mismatch(op, a, b));
        };
        let n = out_shape.iter().product::<usize>();
        let (ad, bd) = (a.data(), b.data());
        let at = |i: usize| if a.is_scalar() { ad[0] } else { ad[i] };
        let bt = |i: usize| if b.is_scalar() { bd[0] } else { bd[i] };
        let data: Vec<f64> = (0..n).map(|i| f(at(i), bt(i))).collect();
        let out = Tensor::from_parts(out_shape, data);
        let (av, bv) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(op, out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let raw = match kind {
                    Bin::Add | Bin::Sub => g.clone(),
                    Bin::Mul => broadcast_mul(g, &bv),
                };
                reduce_to(raw, av.shape())
            });
            let gb = needs[1].then(|| {
                let raw = match kind {
                    Bin::Add => g.clone(),
                    Bin::Sub => g.map(|v| -v),
                    Bin::Mul => broadcast_mul(g, &av),
                };
                reduce_to(raw, bv.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Mul)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value.map(|v| v * c);
        self.tape
            .record("scale", out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value.map(|v| v + c);
        self.tape
            .record("add_scalar", out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// `self[m,k] · other[k,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (&*self.value, &*other.value);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a, b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], tensor::matmul(a.data(), b.data(), m, k, n));
        let (av, bv) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record("matmul", out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                Tensor::from_parts(vec![m, k], tensor::matmul_a_bt(g.data(), bv.data(), m, k, n))
            });
            let gb = needs[1].then(|| {
                Tensor::from_parts(vec![k, n], tensor::matmul_at_b(av.data(), g.data(), m, k, n))
            });
            vec![ga, gb]
        }))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` tensor.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (&*self.value, &*bias.value);
        require_rank("add_bias", x, 2)?;
        if b.shape() != [x.shape()[1]] {
            return Err(mismatch("add_bias", x, b));
        }
        let n = x.shape()[1];
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape.record("add_bias", out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::vector(acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value.map(|v| if v > 0.0 { v } else { 0.0 });
        let x = self.value.clone();
        self.tape.record("relu", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
        })
    }

    /// `max(x, c)` elementwise; the gradient at `x == c` is zero.
    pub fn max_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value.map(|v| if v > c { v } else { c });
        let x = self.value.clone();
        self.tape.record("max_scalar", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > c { gv } else { 0.0 }))]
        })
    }

    pub fn abs(&self) -> Var<'t> {
        let out = self.value.map(f64::abs);
        let x = self.value.clone();
        self.tape.record("abs", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| {
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }))]
        })
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value.map(f64::exp);
        let y = Rc::new(out.clone());
        self.tape
            .record("exp", out, &[self], move |g, _| vec![Some(g.zip_map(&y, |a, b| a * b))])
    }

    /// Natural logarithm; rejects non-finite or non-positive inputs.
    pub fn log(&self) -> Result<Var<'t>> {
        if self.value.data().iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = self.value.map(f64::ln);
        let x = self.value.clone();
        Ok(self
            .tape
            .record("log", out, &[self], move |g, _| vec![Some(g.zip_map(&x, |a, b| a / b))]))
    }

    /// `sqrt(max(x, floor))`, keeping the derivative bounded near zero.
    pub fn sqrt_clamped(&self, floor: f64) -> Var<'t> {
        let out = self.value.map(|v| v.max(floor).sqrt());
        let x = self.value.clone();
        let y = Rc::new(out.clone());
        self.tape.record("sqrt", out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((gv, xv), yv)| if *xv > floor { gv * 0.5 / yv } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.record("sum", out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len().max(1) as f64;
        let out = Tensor::scalar(self.value.sum() / n);
        let shape = self.shape().to_vec();
        self.tape.record("mean", out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item() / n))]
        })
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&self) -> Var<'t> {
        self.reduce_last(false)
    }

    /// Mean over the last axis: `[.., n] -> [..]`.
    pub fn mean_last(&self) -> Var<'t> {
        self.reduce_last(true)
    }

    fn reduce_last(&self, mean: bool) -> Var<'t> {
        let n = self.value.last_dim();
        let denom = if mean { n as f64 } else { 1.0 };
        let mut shape = self.shape().to_vec();
        shape.pop();
        let data: Vec<f64> = self
            .value
            .data()
            .chunks(n.max(1))
            .map(|r| r.iter().sum::<f64>() / denom)
            .collect();
        let out = Tensor::from_parts(shape, data);
        let in_shape = self.shape().to_vec();
        self.tape.record("reduce_last", out, &[self], move |g, _| {
            let mut data = Vec::with_capacity(g.len() * n);
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv / denom, n));
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), data))]
        })
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.check_finite("softmax")?;
        let n = self.value.last_dim();
        let out = map_rows(&self.value, |row, out| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        });
        let y = Rc::new(out.clone());
        Ok(self.tape.record("softmax", out, &[self], move |g, _| {
            let mut data = vec![0.0; g.len()];
            for ((d, gr), yr) in data.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }))
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        self.check_finite("log_softmax")?;
        let n = self.value.last_dim();
        let out = map_rows(&self.value, |row, out| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - lse;
            }
        });
        let y = Rc::new(out.clone());
        Ok(self.tape.record("log_softmax", out, &[self], move |g, _| {
            let mut data = vec![0.0; g.len()];
            for ((d, gr), yr) in data.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                let total: f64 = gr.iter().sum();
                for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                    *dv = gv - yv.exp() * total;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }))
    }

    /// Scales each last-axis row to unit L2 norm. Zero rows pass through as
    /// zeros (with zero gradient) and bump the tape's warning counter.
    pub fn l2_normalize(&self) -> Var<'t> {
        let n = self.value.last_dim();
        let norms: Vec<f64> = self
            .value
            .data()
            .chunks(n.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let zeros = norms.iter().filter(|&&v| v == 0.0).count();
        if zeros > 0 {
            self.tape.zero_norm_warnings.set(self.tape.zero_norm_warnings.get() + zeros);
        }
        let mut out = self.value.as_ref().clone();
        for (row, &norm) in out.data_mut().chunks_mut(n.max(1)).zip(&norms) {
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let y = Rc::new(out.clone());
        self.tape.record("l2_normalize", out, &[self], move |g, _| {
            let mut data = vec![0.0; g.len()];
            for (((d, gr), yr), &norm) in data
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(y.data().chunks(n))
                .zip(&norms)
            {
                if norm == 0.0 {
                    continue;
                }
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                    *dv = (gv - yv * dot) / norm;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    /// Squared Euclidean distances between rows: `[m,d] x [n,d] -> [m,n]`.
    pub fn pairwise_sq_euclidean(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (&*self.value, &*other.value);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(mismatch("pairwise_sq_euclidean", a, b));
        }
        let (m, n, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(sq_dist(a.row(i), b.row(j)));
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let (av, bv) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record("pairwise_sq_euclidean", out, &[self, other], move |g, needs| {
            let mut ga = needs[0].then(|| vec![0.0; m * d]);
            let mut gb = needs[1].then(|| vec![0.0; n * d]);
            for i in 0..m {
                for j in 0..n {
                    let gij = 2.0 * g.data()[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let (ar, br) = (av.row(i), bv.row(j));
                    for t in 0..d {
                        let diff = gij * (ar[t] - br[t]);
                        if let Some(ga) = ga.as_mut() {
                            ga[i * d + t] += diff;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j * d + t] -= diff;
                        }
                    }
                }
            }
            vec![
                ga.map(|v| Tensor::from_parts(vec![m, d], v)),
                gb.map(|v| Tensor::from_parts(vec![n, d], v)),
            ]
        }))
    }

    /// Picks `x[r, c]` for each `(r, c)` of a 2-D tensor, giving a vector.
    pub fn gather(&self, picks: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = &*self.value;
        require_rank("gather", x, 2)?;
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if let Some(&(r, c)) = picks.iter().find(|(r, c)| *r >= rows || *c >= cols) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: x.shape().to_vec(),
                right: vec![r, c],
            });
        }
        let out = Tensor::vector(picks.iter().map(|&(r, c)| x.data()[r * cols + c]).collect());
        let picks = picks.to_vec();
        Ok(self.tape.record("gather", out, &[self], move |g, _| {
            let mut d = Tensor::zeros(&[rows, cols]);
            for (&(r, c), gv) in picks.iter().zip(g.data()) {
                d.data_mut()[r * cols + c] += gv;
            }
            vec![Some(d)]
        }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let in_shape = self.shape().to_vec();
        let out = self.value.as_ref().clone().reshaped(shape)?;
        Ok(self.tape.record("reshape", out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// Same-padded, stride-1 convolution of `[N,C,H,W]` with `[O,C,k,k]` weights and `[O]` bias.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (&*self.value, &*weight.value, &*bias.value);
        require_rank("conv2d", x, 4)?;
        require_rank("conv2d", w, 4)?;
        let ws = w.shape();
        if ws[1] != x.shape()[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(mismatch("conv2d", x, w));
        }
        if b.shape() != [ws[0]] {
            return Err(mismatch("conv2d", w, b));
        }
        let geom = ConvGeom {
            batch: x.shape()[0],
            in_ch: x.shape()[1],
            out_ch: ws[0],
            height: x.shape()[2],
            width: x.shape()[3],
            kernel: ws[2],
        };
        let out = Tensor::from_parts(
            vec![geom.batch, geom.out_ch, geom.height, geom.width],
            tensor::conv2d_forward(x.data(), w.data(), b.data(), geom),
        );
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        Ok(self.tape.record("conv2d", out, &[self, weight, bias], move |g, needs| {
            let (d_in, d_w, d_b) =
                tensor::conv2d_backward(xv.data(), wv.data(), g.data(), geom, needs[0]);
            vec![
                d_in.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                needs[1].then(|| Tensor::from_parts(wv.shape().to_vec(), d_w)),
                needs[2].then(|| Tensor::vector(d_b)),
            ]
        }))
    }

    /// 2x2 average pooling with stride 2 on `[N,C,H,W]`; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let x = &*self.value;
        require_rank("avg_pool2", x, 4)?;
        let s = x.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    data[(p * oh + y) * ow + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::from_parts(vec![s[0], s[1], oh, ow], data);
        let in_shape = s.to_vec();
        Ok(self.tape.record("avg_pool2", out, &[self], move |g, _| {
            let mut d = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = 0.25 * g.data()[(p * oh + y) * ow + xx];
                        let i = p * h * w + 2 * y * w + 2 * xx;
                        d[i] += gv;
                        d[i + 1] += gv;
                        d[i + w] += gv;
                        d[i + w + 1] += gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), d))]
        }))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                left: s,
                right: vec![4],
            });
        }
        self.reshape(vec![s[0], s[1], s[2] * s[3]])?
            .mean_last()
            .reshape(vec![s[0], s[1]])
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = first.shape().get(1).copied().unwrap_or(0);
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            if p.shape().len() != 2 || p.shape()[1] != cols {
                return Err(mismatch("concat_rows", first.value(), p.value()));
            }
            rows.push(p.shape()[0]);
            data.extend_from_slice(p.value.data());
        }
        let total = rows.iter().sum();
        let out = Tensor::from_parts(vec![total, cols], data);
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        Ok(first.tape.record("concat_rows", out, &refs, move |g, needs| {
            let mut offset = 0;
            rows.iter()
                .zip(needs)
                .map(|(&r, &need)| {
                    let slice = &g.data()[offset * cols..(offset + r) * cols];
                    offset += r;
                    need.then(|| Tensor::from_parts(vec![r, cols], slice.to_vec()))
                })
                .collect()
        }))
    }
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.is_scalar() {
        let c = other.item();
        g.map(|v| v * c)
    } else {
        g.zip_map(other, |a, b| a * b)
    }
}

fn map_rows(x: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let n = x.last_dim().max(1);
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        f(row, o);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
