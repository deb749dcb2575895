//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive tensor operations as they execute; nodes are
//! appended in execution order, so parents always precede children and a
//! single reverse sweep propagates adjoints. [`Var`] is a cheap copyable
//! handle (tape reference + node index).
//!
//! Every op checks its result for non-finite values: NaN/Inf anywhere in the
//! graph is treated as a hard error, not something to silently propagate.
//! Shape mismatches and domain violations (log of a non-positive value,
//! backward from a non-scalar) panic with a message naming the op.
//!
//! A tape is single-threaded; distinct tapes may live on distinct threads.
//! Tensors are immutable values.

mod tensor;

pub use tensor::Tensor;

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Sub};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize), // parent, start, len
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize),
    PowConst(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    AddConst(usize),
    MulConst(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Create one per forward pass; drop it to free the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

/// Adjoints produced by [`Tape::backward`]. Nodes off the path to the loss
/// read back as zeros.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Tensor>>,
}

fn assert_finite(data: &[f64], op: &str) {
    for v in data {
        assert!(
            v.is_finite(),
            "{op} produced a non-finite value ({v}); the graph is in an error state"
        );
    }
}

/// Broadcast-aware element read: scalars repeat, everything else indexes.
#[inline]
fn bval(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    /// Record a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        assert_finite(value.data(), "leaf");
        self.push(value, Op::Leaf, true)
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        assert_finite(value.data(), "constant");
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_leaf(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn scalar_const(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenate 1-D vars end to end.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut data = Vec::new();
        let mut requires = false;
        let mut parents = Vec::with_capacity(parts.len());
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                assert!(std::ptr::eq(p.tape, self), "concat across distinct tapes");
                let node = &nodes[p.index];
                assert!(
                    node.value.shape().len() <= 1,
                    "concat expects scalars or vectors, got shape {:?}",
                    node.value.shape()
                );
                data.extend_from_slice(node.value.data());
                requires |= node.requires_grad;
                parents.push(p.index);
            }
        }
        self.push(Tensor::vector(data), Op::Concat(parents), requires)
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64, name: &str) -> Var<'_> {
        let (value, requires) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[a.index];
            let data: Vec<f64> = node.value.data().iter().map(|&x| f(x)).collect();
            assert_finite(&data, name);
            (
                Tensor::new(node.value.shape().to_vec(), data),
                node.requires_grad,
            )
        };
        self.push(value, op, requires)
    }

    fn binary_elementwise(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
        name: &str,
    ) -> Var<'_> {
        assert!(std::ptr::eq(a.tape, b.tape), "{name} across distinct tapes");
        let (value, requires) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.index], &nodes[b.index]);
            let (ta, tb) = (&na.value, &nb.value);
            let out_len = ta.len().max(tb.len());
            assert!(
                ta.len() == tb.len() || ta.len() == 1 || tb.len() == 1,
                "{name}: incompatible shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
            let shape = if ta.len() >= tb.len() {
                ta.shape().to_vec()
            } else {
                tb.shape().to_vec()
            };
            let data: Vec<f64> = (0..out_len).map(|i| f(bval(ta, i), bval(tb, i))).collect();
            assert_finite(&data, name);
            (Tensor::new(shape, data), na.requires_grad || nb.requires_grad)
        };
        self.push(value, op, requires)
    }

    /// Reverse sweep from a scalar loss. Gradients for every node that
    /// requires grad and participates in the loss; zeros elsewhere.
    pub fn backward<'t>(&'t self, loss: Var<'t>) -> Gradients<'t> {
        assert!(std::ptr::eq(loss.tape, self), "backward from a foreign tape");
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.index].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            nodes[loss.index].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.index] = Some(Tensor::new(
            nodes[loss.index].value.shape().to_vec(),
            vec![1.0],
        ));

        // Accumulate a contribution (given at the child's resolution) into a
        // parent slot, summing down to scalar when the parent was broadcast.
        let accumulate = |grads: &mut Vec<Option<Tensor>>, parent: usize, contrib: Vec<f64>| {
            let pnode = &nodes[parent];
            if !pnode.requires_grad {
                return;
            }
            let plen = pnode.value.len();
            let reduced: Vec<f64> = if plen == 1 && contrib.len() > 1 {
                vec![contrib.iter().sum()]
            } else {
                debug_assert_eq!(plen, contrib.len());
                contrib
            };
            match &mut grads[parent] {
                Some(g) => {
                    for (gi, ci) in g.data_mut().iter_mut().zip(reduced.iter()) {
                        *gi += ci;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(pnode.value.shape().to_vec(), reduced));
                }
            }
        };

        for idx in (0..=loss.index).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let gd = g.data();
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gd.to_vec());
                    accumulate(&mut grads, *b, gd.to_vec());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, gd.to_vec());
                    accumulate(&mut grads, *b, gd.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(
                        &mut grads,
                        *a,
                        (0..gd.len()).map(|i| gd[i] * bval(tb, i)).collect(),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        (0..gd.len()).map(|i| gd[i] * bval(ta, i)).collect(),
                    );
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(
                        &mut grads,
                        *a,
                        (0..gd.len()).map(|i| gd[i] / bval(tb, i)).collect(),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        (0..gd.len())
                            .map(|i| {
                                let bv = bval(tb, i);
                                -gd[i] * bval(ta, i) / (bv * bv)
                            })
                            .collect(),
                    );
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (r, c) = (ta.rows(), ta.cols());
                    if tb.shape().len() == 1 {
                        // A[r,c] . x[c] -> y[r]
                        let mut da = vec![0.0; r * c];
                        let mut dx = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = gd[i] * tb.data()[j];
                                dx[j] += ta.data()[i * c + j] * gd[i];
                            }
                        }
                        accumulate(&mut grads, *a, da);
                        accumulate(&mut grads, *b, dx);
                    } else {
                        // A[r,c] . B[c,k] -> Y[r,k]
                        let k = tb.cols();
                        let mut da = vec![0.0; r * c];
                        let mut db = vec![0.0; c * k];
                        for i in 0..r {
                            for j in 0..c {
                                let mut acc = 0.0;
                                for l in 0..k {
                                    acc += gd[i * k + l] * tb.data()[j * k + l];
                                    db[j * k + l] += ta.data()[i * c + j] * gd[i * k + l];
                                }
                                da[i * c + j] = acc;
                            }
                        }
                        accumulate(&mut grads, *a, da);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Concat(parents) => {
                    let mut offset = 0;
                    for p in parents {
                        let plen = nodes[*p].value.len();
                        accumulate(&mut grads, *p, gd[offset..offset + plen].to_vec());
                        offset += plen;
                    }
                }
                Op::Slice(a, start, len) => {
                    let mut da = vec![0.0; nodes[*a].value.len()];
                    da[*start..*start + *len].copy_from_slice(&gd[..*len]);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, vec![gd[0]; nodes[*a].value.len()]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    accumulate(&mut grads, *a, vec![gd[0] / n as f64; n]);
                }
                Op::Exp(a) => {
                    let out = nodes[idx].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter().zip(out).map(|(g, y)| g * y).collect(),
                    );
                }
                Op::Log(a) => {
                    let xin = nodes[*a].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter().zip(xin).map(|(g, x)| g / x).collect(),
                    );
                }
                Op::PowConst(a, p) => {
                    let xin = nodes[*a].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter()
                            .zip(xin)
                            .map(|(g, x)| g * p * x.powf(p - 1.0))
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let out = nodes[idx].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    );
                }
                Op::Tanh(a) => {
                    let out = nodes[idx].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect(),
                    );
                }
                Op::Relu(a) => {
                    let xin = nodes[*a].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter()
                            .zip(xin)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Softplus(a) => {
                    let xin = nodes[*a].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter().zip(xin).map(|(g, x)| g * sigmoid_f(*x)).collect(),
                    );
                }
                Op::Clamp(a, lo, hi) => {
                    let xin = nodes[*a].value.data();
                    accumulate(
                        &mut grads,
                        *a,
                        gd.iter()
                            .zip(xin)
                            .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::AddConst(a) => {
                    accumulate(&mut grads, *a, gd.to_vec());
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, gd.iter().map(|g| g * c).collect());
                }
            }
            grads[idx] = Some(g);
        }

        Gradients { tape: self, grads }
    }
}

#[inline]
fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    /// Borrowing accessor; avoids cloning in hot loops.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.index].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn len(&self) -> usize {
        self.with_value(|t| t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "matmul across distinct tapes");
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.index], &nodes[rhs.index]);
            let (ta, tb) = (&na.value, &nb.value);
            assert_eq!(ta.shape().len(), 2, "matmul lhs must be a matrix");
            let (r, c) = (ta.rows(), ta.cols());
            let value = if tb.shape().len() == 1 {
                assert_eq!(tb.len(), c, "matmul: {r}x{c} by vector of {}", tb.len());
                let mut out = vec![0.0; r];
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += ta.data()[i * c + j] * tb.data()[j];
                    }
                    out[i] = acc;
                }
                Tensor::vector(out)
            } else {
                assert_eq!(
                    tb.rows(),
                    c,
                    "matmul: {r}x{c} by {}x{}",
                    tb.rows(),
                    tb.cols()
                );
                let k = tb.cols();
                let mut out = vec![0.0; r * k];
                for i in 0..r {
                    for j in 0..c {
                        let av = ta.data()[i * c + j];
                        for l in 0..k {
                            out[i * k + l] += av * tb.data()[j * k + l];
                        }
                    }
                }
                Tensor::matrix(r, k, out)
            };
            assert_finite(value.data(), "matmul");
            (value, na.requires_grad || nb.requires_grad)
        };
        self.tape
            .push(value, Op::MatMul(self.index, rhs.index), requires)
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.index];
            assert!(
                node.value.shape().len() == 1,
                "slice expects a vector, got {:?}",
                node.value.shape()
            );
            assert!(
                start + len <= node.value.len(),
                "slice {start}..{} out of bounds for length {}",
                start + len,
                node.value.len()
            );
            (
                Tensor::vector(node.value.data()[start..start + len].to_vec()),
                node.requires_grad,
            )
        };
        self.tape
            .push(value, Op::Slice(self.index, start, len), requires)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.index];
            let s: f64 = node.value.data().iter().sum();
            assert_finite(&[s], "sum");
            (Tensor::scalar(s), node.requires_grad)
        };
        self.tape.push(value, Op::Sum(self.index), requires)
    }

    pub fn mean(self) -> Var<'t> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.index];
            assert!(!node.value.is_empty(), "mean of an empty tensor");
            let s: f64 = node.value.data().iter().sum();
            let m = s / node.value.len() as f64;
            assert_finite(&[m], "mean");
            (Tensor::scalar(m), node.requires_grad)
        };
        self.tape.push(value, Op::Mean(self.index), requires)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Op::Exp(self.index), f64::exp, "exp")
    }

    pub fn log(self) -> Var<'t> {
        self.with_value(|t| {
            for &x in t.data() {
                assert!(x > 0.0, "log domain violation: argument {x} is not positive");
            }
        });
        self.tape.unary(self, Op::Log(self.index), f64::ln, "log")
    }

    pub fn pow_const(self, p: f64) -> Var<'t> {
        self.tape
            .unary(self, Op::PowConst(self.index, p), |x| x.powf(p), "pow_const")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self, Op::Sigmoid(self.index), sigmoid_f, "sigmoid")
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, Op::Tanh(self.index), f64::tanh, "tanh")
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self, Op::Relu(self.index), |x| x.max(0.0), "relu")
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape
            .unary(self, Op::Softplus(self.index), softplus_f, "softplus")
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        assert!(lo <= hi, "clamp bounds inverted: {lo} > {hi}");
        self.tape.unary(
            self,
            Op::Clamp(self.index, lo, hi),
            |x| x.clamp(lo, hi),
            "clamp",
        )
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self, Op::AddConst(self.index), |x| x + c, "add_const")
    }

    pub fn mul_const(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self, Op::MulConst(self.index, c), |x| x * c, "mul_const")
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_const(-1.0)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_elementwise(self, rhs, Op::Add(self.index, rhs.index), |a, b| a + b, "add")
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_elementwise(self, rhs, Op::Sub(self.index, rhs.index), |a, b| a - b, "sub")
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_elementwise(self, rhs, Op::Mul(self.index, rhs.index), |a, b| a * b, "mul")
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary_elementwise(self, rhs, Op::Div(self.index, rhs.index), |a, b| a / b, "div")
    }
}

impl<'t> Gradients<'t> {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not participate.
    pub fn wrt(&self, v: Var<'t>) -> Tensor {
        assert!(std::ptr::eq(v.tape, self.tape), "gradient lookup on a foreign tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let nodes = self.tape.nodes.borrow();
                Tensor::zeros(nodes[v.index].value.shape())
            }
        }
    }
}

/// dOutput/dInput for a scalar output: runs a reverse sweep and extracts the
/// adjoint at `input`, which must be a grad-enabled node on the same tape.
pub fn input_gradient<'t>(output: Var<'t>, input: Var<'t>) -> Tensor {
    assert!(
        std::ptr::eq(output.tape, input.tape),
        "input_gradient: input is not on the output's tape"
    );
    assert!(
        input.requires_grad(),
        "input_gradient: input was not marked for gradients"
    );
    output.tape.backward(output).wrt(input)
}
