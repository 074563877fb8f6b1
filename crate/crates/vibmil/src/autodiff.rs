//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Graphs are built dynamically: every forward op allocates a node that
//! records its parents, and [`Tensor::backward`] replays the tape in reverse
//! topological order. Gradients accumulate into `.grad` (a second backward
//! pass doubles them). Ops whose inputs all have `requires_grad == false`
//! record no parents at all, so frozen subgraphs cost nothing to retain.
//!
//! Shape rules are strict: elementwise ops require identical shapes, with a
//! single exception — a one-element tensor may combine with any shape in
//! `add`/`sub`/`mul`. There is no general broadcasting.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix};

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    /// Xavier/Glorot uniform for a `[fan_in, fan_out]` weight.
    XavierUniform,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// y = mul * x + add elementwise; only the slope matters to backward.
    Affine { mul: f64 },
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    Clamp { lo: f64, hi: f64 },
    /// Row-wise softmax (rank-1 tensors are one row).
    Softmax,
    Sum,
    Mean,
    SumAxis0,
    MeanAxis0,
    /// Column-wise max over rows; ties resolve to the lowest row index.
    MaxAxis0,
    /// Mean softmax cross-entropy of `[n, c]` logits against integer labels.
    CrossEntropy { labels: Vec<usize> },
    /// `[r, c]` plus a length-`c` bias broadcast across rows.
    AddBias,
    /// Row i of the output is `s[i]` times row i of the input.
    ScaleRows,
    /// Per-column standardization with batch statistics (biased variance).
    BatchNormCols { eps: f64 },
    /// Per-column affine with stored statistics: y = (x - mean) * inv_std.
    NormalizeCols { inv_std: Vec<f64> },
    Reshape,
}

struct TensorData {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
    parents: Vec<Tensor>,
    requires_grad: bool,
}

/// A node in the autodiff graph. Cloning is shallow (shares the node).
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorData>>);

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    // ---- construction ----

    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor(Rc::new(RefCell::new(TensorData {
            data,
            shape,
            grad: None,
            op: Op::Leaf,
            parents: vec![],
            requires_grad,
        })))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![], vec![v], false)
    }

    pub fn from_matrix(m: &Matrix, requires_grad: bool) -> Tensor {
        Tensor::new(vec![m.rows, m.cols], m.data.clone(), requires_grad)
    }

    pub fn from_init(shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
        let n = numel_of(&shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            Init::XavierUniform => {
                assert_eq!(shape.len(), 2, "xavier init needs a rank-2 shape");
                let lim = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-lim..lim)).collect()
            }
        };
        Tensor::new(shape, data, true)
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Tensor {
        assert_eq!(numel_of(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        // Frozen subgraphs are pruned at construction: no parents retained.
        let (op, parents) = if requires_grad { (op, parents) } else { (Op::Leaf, vec![]) };
        Tensor(Rc::new(RefCell::new(TensorData {
            data,
            shape,
            grad: None,
            op,
            parents,
            requires_grad,
        })))
    }

    // ---- accessors ----

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Freezes or unfreezes a leaf parameter. Only meaningful on leaves;
    /// graphs built afterwards respect the new setting.
    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.0.borrow_mut().requires_grad = requires_grad;
    }

    /// Borrows the forward value. Do not hold across further graph calls.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.borrow();
        assert_eq!(d.data.len(), 1, "item() on tensor of shape {:?}", d.shape);
        d.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Mutates the stored gradient in place, if one exists.
    pub fn update_grad(&self, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.0.borrow_mut().grad.as_mut() {
            f(g);
        }
    }

    /// Replaces the stored value in place. Length must match.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.0.borrow_mut();
        assert_eq!(d.data.len(), new.len(), "set_data length mismatch");
        d.data.copy_from_slice(new);
    }

    /// Mutates the stored value in place (used by optimizers).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.borrow_mut().data);
    }

    /// A new leaf holding the same value, detached from the graph.
    pub fn detach(&self) -> Tensor {
        let d = self.0.borrow();
        Tensor::new(d.shape.clone(), d.data.clone(), false)
    }

    fn rc_ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn rank2(&self) -> (usize, usize) {
        let d = self.0.borrow();
        assert_eq!(d.shape.len(), 2, "expected rank-2 tensor, got {:?}", d.shape);
        (d.shape[0], d.shape[1])
    }

    // ---- forward ops ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.rank2();
        let (k2, n) = other.rank2();
        assert_eq!(k, k2, "matmul shapes [{m},{k}] x [{k2},{n}]");
        let mut out = vec![0.0; m * n];
        matmul(&self.data(), &other.data(), &mut out, m, k, n);
        Tensor::from_op(vec![m, n], out, Op::MatMul, vec![self.clone(), other.clone()])
    }

    fn zip_elementwise(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.0.borrow(), other.0.borrow());
        let (out, shape) = if a.data.len() == b.data.len() && a.shape == b.shape {
            (
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                a.shape.clone(),
            )
        } else if b.data.len() == 1 {
            (a.data.iter().map(|&x| f(x, b.data[0])).collect(), a.shape.clone())
        } else if a.data.len() == 1 {
            (b.data.iter().map(|&y| f(a.data[0], y)).collect(), b.shape.clone())
        } else {
            panic!(
                "elementwise op on incompatible shapes {:?} and {:?}",
                a.shape, b.shape
            );
        };
        drop(a);
        drop(b);
        Tensor::from_op(shape, out, op, vec![self.clone(), other.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_elementwise(other, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_elementwise(other, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_elementwise(other, Op::Mul, |x, y| x * y)
    }

    /// y = mul * x + add, elementwise with constants.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let d = self.0.borrow();
        let out = d.data.iter().map(|&x| mul * x + add).collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(shape, out, Op::Affine { mul }, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.affine(1.0, c)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let d = self.0.borrow();
        let out = d.data.iter().map(|&x| f(x)).collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(shape, out, op, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn log(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp bounds out of order");
        self.unary(Op::Clamp { lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Row-wise softmax. A rank-1 tensor is treated as a single row.
    pub fn softmax(&self) -> Tensor {
        let d = self.0.borrow();
        let (rows, cols) = match d.shape.len() {
            1 => (1, d.shape[0]),
            2 => (d.shape[0], d.shape[1]),
            _ => panic!("softmax expects rank-1 or rank-2, got {:?}", d.shape),
        };
        assert!(cols > 0, "softmax over empty rows");
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &d.data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= z;
            }
        }
        let shape = d.shape.clone();
        drop(d);
        Tensor::from_op(shape, out, Op::Softmax, vec![self.clone()])
    }

    pub fn sum(&self) -> Tensor {
        let s = self.0.borrow().data.iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let d = self.0.borrow();
        assert!(!d.data.is_empty(), "mean of empty tensor");
        let s = d.data.iter().sum::<f64>() / d.data.len() as f64;
        drop(d);
        Tensor::from_op(vec![], vec![s], Op::Mean, vec![self.clone()])
    }

    fn fold_axis0(&self, op: Op, init: f64, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.rank2();
        assert!(r > 0, "axis-0 reduction over zero rows");
        let d = self.0.borrow();
        let mut out = vec![init; c];
        for i in 0..r {
            for j in 0..c {
                out[j] = f(out[j], d.data[i * c + j]);
            }
        }
        drop(d);
        Tensor::from_op(vec![c], out, op, vec![self.clone()])
    }

    /// Column sums: `[r, c] -> [c]`.
    pub fn sum_axis0(&self) -> Tensor {
        self.fold_axis0(Op::SumAxis0, 0.0, |a, x| a + x)
    }

    /// Column means: `[r, c] -> [c]`.
    pub fn mean_axis0(&self) -> Tensor {
        let r = self.rank2().0 as f64;
        let t = self.fold_axis0(Op::MeanAxis0, 0.0, |a, x| a + x);
        {
            let mut d = t.0.borrow_mut();
            for v in &mut d.data {
                *v /= r;
            }
        }
        t
    }

    /// Column maxima: `[r, c] -> [c]`. Ties go to the lowest row index.
    pub fn max_axis0(&self) -> Tensor {
        self.fold_axis0(Op::MaxAxis0, f64::NEG_INFINITY, |a, x| if x > a { x } else { a })
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Tensor {
        let (n, c) = self.rank2();
        assert_eq!(n, labels.len(), "cross_entropy label count mismatch");
        assert!(labels.iter().all(|&l| l < c), "cross_entropy label out of range");
        let d = self.0.borrow();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &d.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= n as f64;
        drop(d);
        Tensor::from_op(
            vec![],
            vec![loss],
            Op::CrossEntropy { labels: labels.to_vec() },
            vec![self.clone()],
        )
    }

    /// `[r, c]` plus a length-`c` bias broadcast across rows.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (r, c) = self.rank2();
        assert_eq!(bias.numel(), c, "add_bias width mismatch");
        let d = self.0.borrow();
        let b = bias.0.borrow();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(d.data[i * c + j] + b.data[j]);
            }
        }
        drop(d);
        drop(b);
        Tensor::from_op(vec![r, c], out, Op::AddBias, vec![self.clone(), bias.clone()])
    }

    /// Scales row i by `scales[i]`; `scales` must have `r` elements.
    pub fn scale_rows(&self, scales: &Tensor) -> Tensor {
        let (r, c) = self.rank2();
        assert_eq!(scales.numel(), r, "scale_rows length mismatch");
        let d = self.0.borrow();
        let s = scales.0.borrow();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(d.data[i * c + j] * s.data[i]);
            }
        }
        drop(d);
        drop(s);
        Tensor::from_op(vec![r, c], out, Op::ScaleRows, vec![self.clone(), scales.clone()])
    }

    /// Per-column standardization with batch statistics (biased variance).
    pub fn batch_norm_cols(&self, eps: f64) -> Tensor {
        let (r, c) = self.rank2();
        assert!(r > 0, "batch norm over zero rows");
        let d = self.0.borrow();
        let (mean, var) = col_stats(&d.data, r, c);
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let istd = 1.0 / (var[j] + eps).sqrt();
            for i in 0..r {
                out[i * c + j] = (d.data[i * c + j] - mean[j]) * istd;
            }
        }
        drop(d);
        Tensor::from_op(vec![r, c], out, Op::BatchNormCols { eps }, vec![self.clone()])
    }

    /// Per-column affine with fixed statistics: y = (x - mean) * inv_std.
    pub fn normalize_cols(&self, mean: &[f64], inv_std: &[f64]) -> Tensor {
        let (r, c) = self.rank2();
        assert_eq!(mean.len(), c, "normalize_cols mean width mismatch");
        assert_eq!(inv_std.len(), c, "normalize_cols inv_std width mismatch");
        let d = self.0.borrow();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = (d.data[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        drop(d);
        Tensor::from_op(
            vec![r, c],
            out,
            Op::NormalizeCols { inv_std: inv_std.to_vec() },
            vec![self.clone()],
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        let d = self.0.borrow();
        assert_eq!(
            numel_of(&shape),
            d.data.len(),
            "reshape {:?} -> {:?} changes element count",
            d.shape,
            shape
        );
        let out = d.data.clone();
        drop(d);
        Tensor::from_op(shape, out, Op::Reshape, vec![self.clone()])
    }

    // ---- backward ----

    /// Reverse-mode sweep from a one-element tensor. Accumulates into `.grad`
    /// of every reachable tensor with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a one-element tensor");
        assert!(self.requires_grad(), "backward() on a non-grad tensor");

        // Post-order DFS over Rc identity; prunes frozen subgraphs.
        let mut topo: Vec<Tensor> = vec![];
        let mut state: HashMap<usize, bool> = HashMap::new(); // ptr -> done
        let mut stack: Vec<Tensor> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            let ptr = t.rc_ptr();
            match state.get(&ptr) {
                Some(true) => continue,
                Some(false) => {
                    state.insert(ptr, true);
                    topo.push(t);
                }
                None => {
                    state.insert(ptr, false);
                    stack.push(t.clone());
                    for p in &t.0.borrow().parents {
                        if p.requires_grad() && !state.get(&p.rc_ptr()).copied().unwrap_or(false) {
                            stack.push(p.clone());
                        }
                    }
                }
            }
        }

        let mut bufs: HashMap<usize, Vec<f64>> = HashMap::new();
        bufs.insert(self.rc_ptr(), vec![1.0]);

        for t in topo.iter().rev() {
            let dy = match bufs.remove(&t.rc_ptr()) {
                Some(b) => b,
                None => continue, // unreachable from the root along grad paths
            };
            {
                let d = t.0.borrow();
                if !matches!(d.op, Op::Leaf) {
                    for (parent, contribution) in backprop(&d, &dy) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        let buf = bufs
                            .entry(parent.rc_ptr())
                            .or_insert_with(|| vec![0.0; parent.numel()]);
                        for (b, g) in buf.iter_mut().zip(&contribution) {
                            *b += g;
                        }
                    }
                }
            }
            let mut d = t.0.borrow_mut();
            match &mut d.grad {
                Some(g) => {
                    for (gi, di) in g.iter_mut().zip(&dy) {
                        *gi += di;
                    }
                }
                None => d.grad = Some(dy),
            }
        }
    }
}

fn col_stats(data: &[f64], r: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            mean[j] += data[i * c + j];
        }
    }
    for m in &mut mean {
        *m /= r as f64;
    }
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let d = data[i * c + j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= r as f64;
    }
    (mean, var)
}

/// Per-parent gradient contributions for one node. `d` is the node being
/// differentiated, `dy` the gradient of the loss with respect to its output.
fn backprop(d: &TensorData, dy: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let parents = &d.parents;
    let pd = |i: usize| parents[i].0.borrow();
    match &d.op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (a, b) = (pd(0), pd(1));
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            matmul_nt(dy, &b.data, &mut da, m, n, k); // da = dy . b^T
            matmul_tn(&a.data, dy, &mut db, m, k, n); // db = a^T . dy
            vec![(parents[0].clone(), da), (parents[1].clone(), db)]
        }
        Op::Add => binary_linear(parents, dy, 1.0, 1.0),
        Op::Sub => binary_linear(parents, dy, 1.0, -1.0),
        Op::Mul => {
            let (a, b) = (pd(0), pd(1));
            let da = mul_grad_side(dy, &b.data, a.data.len());
            let db = mul_grad_side(dy, &a.data, b.data.len());
            vec![(parents[0].clone(), da), (parents[1].clone(), db)]
        }
        Op::Affine { mul } => {
            vec![(parents[0].clone(), dy.iter().map(|&g| mul * g).collect())]
        }
        Op::Sigmoid => from_output(parents, dy, &d.data, |y| y * (1.0 - y)),
        Op::Tanh => from_output(parents, dy, &d.data, |y| 1.0 - y * y),
        Op::Exp => from_output(parents, dy, &d.data, |y| y),
        Op::Relu => from_input(parents, dy, |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Log => from_input(parents, dy, |x| 1.0 / x),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            from_input(parents, dy, move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
        }
        Op::Softmax => {
            // Per row: dx = y * (dy - <dy, y>)
            let p = pd(0);
            let cols = *d.shape.last().unwrap();
            let rows = d.data.len() / cols;
            let mut dx = vec![0.0; p.data.len()];
            for r in 0..rows {
                let y = &d.data[r * cols..(r + 1) * cols];
                let g = &dy[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
                for ((o, &yi), &gi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(g) {
                    *o = yi * (gi - dot);
                }
            }
            vec![(parents[0].clone(), dx)]
        }
        Op::Sum => {
            let n = pd(0).data.len();
            vec![(parents[0].clone(), vec![dy[0]; n])]
        }
        Op::Mean => {
            let n = pd(0).data.len();
            vec![(parents[0].clone(), vec![dy[0] / n as f64; n])]
        }
        Op::SumAxis0 | Op::MeanAxis0 => {
            let p = pd(0);
            let (r, c) = (p.shape[0], p.shape[1]);
            let scale = if matches!(d.op, Op::MeanAxis0) { 1.0 / r as f64 } else { 1.0 };
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = dy[j] * scale;
                }
            }
            vec![(parents[0].clone(), dx)]
        }
        Op::MaxAxis0 => {
            // Gradient routes to the first (lowest-index) argmax per column.
            let p = pd(0);
            let (r, c) = (p.shape[0], p.shape[1]);
            let mut dx = vec![0.0; r * c];
            for j in 0..c {
                let mut best = 0;
                for i in 1..r {
                    if p.data[i * c + j] > p.data[best * c + j] {
                        best = i;
                    }
                }
                dx[best * c + j] = dy[j];
            }
            vec![(parents[0].clone(), dx)]
        }
        Op::CrossEntropy { labels } => {
            // dlogits = (softmax(x) - onehot(label)) / n
            let p = pd(0);
            let (n, c) = (p.shape[0], p.shape[1]);
            let mut dx = vec![0.0; n * c];
            for (i, &l) in labels.iter().enumerate() {
                let row = &p.data[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                for j in 0..c {
                    let sm = (row[j] - m).exp() / z;
                    dx[i * c + j] = dy[0] * (sm - if j == l { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            vec![(parents[0].clone(), dx)]
        }
        Op::AddBias => {
            let (r, c) = (d.shape[0], d.shape[1]);
            let mut db = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    db[j] += dy[i * c + j];
                }
            }
            vec![(parents[0].clone(), dy.to_vec()), (parents[1].clone(), db)]
        }
        Op::ScaleRows => {
            let (x, s) = (pd(0), pd(1));
            let (r, c) = (x.shape[0], x.shape[1]);
            let mut dx = vec![0.0; r * c];
            let mut ds = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = dy[i * c + j] * s.data[i];
                    ds[i] += dy[i * c + j] * x.data[i * c + j];
                }
            }
            vec![(parents[0].clone(), dx), (parents[1].clone(), ds)]
        }
        Op::BatchNormCols { eps } => {
            // dx = (dy - mean(dy) - xhat * mean(dy * xhat)) * inv_std, per column.
            let p = pd(0);
            let (r, c) = (p.shape[0], p.shape[1]);
            let (_, var) = col_stats(&p.data, r, c);
            let mut dx = vec![0.0; r * c];
            for j in 0..c {
                let istd = 1.0 / (var[j] + eps).sqrt();
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for i in 0..r {
                    sum_dy += dy[i * c + j];
                    sum_dy_xhat += dy[i * c + j] * d.data[i * c + j];
                }
                let (m_dy, m_dyx) = (sum_dy / r as f64, sum_dy_xhat / r as f64);
                for i in 0..r {
                    dx[i * c + j] = (dy[i * c + j] - m_dy - d.data[i * c + j] * m_dyx) * istd;
                }
            }
            vec![(parents[0].clone(), dx)]
        }
        Op::NormalizeCols { inv_std } => {
            let p = pd(0);
            let (r, c) = (p.shape[0], p.shape[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = dy[i * c + j] * inv_std[j];
                }
            }
            vec![(parents[0].clone(), dx)]
        }
        Op::Reshape => vec![(parents[0].clone(), dy.to_vec())],
    }
}

/// Gradients for add/sub: each side gets `sign * dy`, reduced by summation
/// when that side is a broadcast one-element tensor.
fn binary_linear(parents: &[Tensor], dy: &[f64], sa: f64, sb: f64) -> Vec<(Tensor, Vec<f64>)> {
    let mut out = Vec::with_capacity(2);
    for (parent, sign) in [(&parents[0], sa), (&parents[1], sb)] {
        let n = parent.numel();
        let g = if n == dy.len() {
            dy.iter().map(|&v| sign * v).collect()
        } else {
            vec![sign * dy.iter().sum::<f64>()]
        };
        out.push((parent.clone(), g));
    }
    out
}

/// d(a*b)/da given the other side's data, handling one-element broadcast on
/// either side.
fn mul_grad_side(dy: &[f64], other: &[f64], self_len: usize) -> Vec<f64> {
    if self_len == dy.len() {
        if other.len() == dy.len() {
            dy.iter().zip(other).map(|(&g, &o)| g * o).collect()
        } else {
            dy.iter().map(|&g| g * other[0]).collect()
        }
    } else {
        // This side is the broadcast one-element tensor.
        vec![dy.iter().zip(other).map(|(&g, &o)| g * o).sum()]
    }
}

fn from_output(
    parents: &[Tensor],
    dy: &[f64],
    y: &[f64],
    dfdy: impl Fn(f64) -> f64,
) -> Vec<(Tensor, Vec<f64>)> {
    let g = dy.iter().zip(y).map(|(&g, &yv)| g * dfdy(yv)).collect();
    vec![(parents[0].clone(), g)]
}

fn from_input(
    parents: &[Tensor],
    dy: &[f64],
    dfdx: impl Fn(f64) -> f64,
) -> Vec<(Tensor, Vec<f64>)> {
    let p = parents[0].0.borrow();
    let g = dy.iter().zip(&p.data).map(|(&g, &x)| g * dfdx(x)).collect();
    drop(p);
    vec![(parents[0].clone(), g)]
}

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let up = f(&xp);
        xp[i] = x[i] - eps;
        let down = f(&xp);
        xp[i] = x[i];
        g[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// Compares analytic gradients of `build(inputs)` against central differences
/// for every coordinate of every input. Returns the largest absolute error.
///
/// `build` must produce a one-element output and be a pure function of the
/// input tensors' current values.
pub fn finite_diff_check(inputs: &[Tensor], eps: f64, build: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    let out = build(inputs);
    out.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (idx, t) in inputs.iter().enumerate() {
        let base = t.to_vec();
        let numeric = numerical_gradient(&base, eps, |x| {
            t.set_data(x);
            build(inputs).item()
        });
        t.set_data(&base);
        for (a, n) in analytic[idx].iter().zip(&numeric) {
            max_err = max_err.max((a - n).abs());
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), true)
    }

    #[test]
    fn matmul_forward_known() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_forward_known() {
        // softmax([ln 2, 0]) = [2/3, 1/3]
        let x = t(&[2], &[2.0_f64.ln(), 0.0]);
        let y = x.softmax().to_vec();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_forward_known() {
        // logits [1, 2], label 1: loss = ln(1 + e^-1) = 0.31326168751822286
        let x = t(&[1, 2], &[1.0, 2.0]);
        let l = x.cross_entropy(&[1]);
        assert!((l.item() - 0.313_261_687_518_222_86).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let x = t(&[2, 1], &[1.0, 3.0]);
        let y = x.batch_norm_cols(0.0).to_vec();
        assert!((y[0] + 1.0).abs() < 1e-12);
        assert!((y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_doubles_grads() {
        let x = t(&[2], &[3.0, -1.0]);
        let y = x.mul(&x).sum();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![12.0, -4.0]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // y = x*x + x => dy/dx = 2x + 1
        let x = t(&[1], &[3.0]);
        let y = x.mul(&x).add(&x).sum();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = t(&[2], &[1.0, 2.0]);
        let d = x.detach();
        assert!(!d.requires_grad());
        let y = d.mul(&d).sum();
        assert!(!y.requires_grad());
    }

    #[test]
    fn frozen_subgraph_is_pruned_to_leaf() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0], false);
        let b = Tensor::new(vec![2], vec![3.0, 4.0], false);
        let y = a.mul(&b);
        // No grad requirement anywhere: the node keeps no parents.
        assert!(!y.requires_grad());
        assert!(y.0.borrow().parents.is_empty());
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let s = t(&[1], &[2.0]);
        let y = x.mul(&s).add(&s).sum(); // sum(2x + 2) = 2*6 + 6 = 18
        assert_eq!(y.item(), 18.0);
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        // ds: sum(x) from mul + 3 from add = 6 + 3 = 9
        assert_eq!(s.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn max_axis0_ties_route_to_lowest_index() {
        let x = t(&[3, 2], &[5.0, 1.0, 5.0, 2.0, 3.0, 2.0]);
        let y = x.max_axis0();
        assert_eq!(y.to_vec(), vec![5.0, 2.0]);
        y.sum().backward();
        // Column 0 ties rows 0 and 1 -> row 0; column 1 ties rows 1 and 2 -> row 1.
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_all_ops() {
        let mut rng = seed::rng(42);
        let rand = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_init(shape.to_vec(), Init::Uniform { lo: -1.4, hi: 1.4 }, rng)
        };

        // matmul + add_bias + tanh + sum
        let a = rand(&[3, 4], &mut rng);
        let w = rand(&[4, 2], &mut rng);
        let b = rand(&[2], &mut rng);
        let err = finite_diff_check(&[a, w, b], 1e-5, |i| {
            i[0].matmul(&i[1]).add_bias(&i[2]).tanh().sum()
        });
        assert!(err < 1e-7, "matmul chain fd error {err}");

        // sigmoid/log/exp/clamp/affine chain (inputs kept away from clamp kinks)
        let x = rand(&[5], &mut rng);
        let err = finite_diff_check(&[x], 1e-6, |i| {
            i[0].sigmoid().clamp(0.05, 0.95).log().exp().affine(1.5, 0.25).mean()
        });
        assert!(err < 1e-7, "unary chain fd error {err}");

        // softmax rows + mul + mean_axis0
        let x = rand(&[3, 4], &mut rng);
        let y = rand(&[3, 4], &mut rng);
        let err = finite_diff_check(&[x, y], 1e-5, |i| {
            i[0].softmax().mul(&i[1]).mean_axis0().sum()
        });
        assert!(err < 1e-7, "softmax fd error {err}");

        // cross entropy
        let x = rand(&[4, 3], &mut rng);
        let err = finite_diff_check(&[x], 1e-5, |i| i[0].cross_entropy(&[0, 2, 1, 1]));
        assert!(err < 1e-7, "cross entropy fd error {err}");

        // scale_rows + max_axis0 + relu (regenerate if any coordinate sits
        // near the relu kink or a max tie; uniform draws make that unlikely)
        let x = rand(&[4, 3], &mut rng);
        let s = rand(&[4], &mut rng);
        let err = finite_diff_check(&[x, s], 1e-5, |i| {
            i[0].scale_rows(&i[1]).relu().max_axis0().sum()
        });
        assert!(err < 1e-6, "scale_rows/max fd error {err}");

        // batch_norm_cols + normalize_cols + sub
        let x = rand(&[5, 3], &mut rng);
        let y = rand(&[5, 3], &mut rng);
        let err = finite_diff_check(&[x, y], 1e-5, |i| {
            let n = i[0].batch_norm_cols(1e-5);
            let m = i[1].normalize_cols(&[0.1, -0.2, 0.3], &[1.1, 0.9, 1.3]);
            n.sub(&m).mul(&n.sub(&m)).mean()
        });
        assert!(err < 1e-6, "norm fd error {err}");

        // reshape + sum_axis0
        let x = rand(&[2, 6], &mut rng);
        let err = finite_diff_check(&[x], 1e-5, |i| {
            i[0].reshape(vec![4, 3]).sum_axis0().mul(&i[0].reshape(vec![12]).mean()).sum()
        });
        assert!(err < 1e-7, "reshape fd error {err}");
    }
}
