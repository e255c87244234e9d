//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and the handles of its inputs. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.

use crate::error::{dim_err, Error, Result};
use crate::numerics::params::{Binding, ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Affine { w: Var, x: Var, b: Option<Var> },
    Affine2 { w: Var, x: Var, u: Var, h: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AbsDiff(Var, Var),
    Lerp { from: Var, to: Var, t: Var },
    Scale(Var, T),
    ScaleBy { v: Var, s: Var },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Ln(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    Sum(Var),
    Dot(Var, Var),
    Cosine(Var, Var),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    Mean(Vec<Var>),
    Mse(Var, Var),
    SqDist(Var, Var),
    Bce { p: Var, target: T },
    Nll { probs: Var, class: usize },
}

impl<T> Op<T> {
    fn any_input(&self, f: impl Fn(Var) -> bool) -> bool {
        match self {
            Op::Leaf => false,
            Op::Affine { w, x, b } => f(*w) || f(*x) || b.is_some_and(&f),
            Op::Affine2 { w, x, u, h, b } => f(*w) || f(*x) || f(*u) || f(*h) || f(*b),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AbsDiff(a, b)
            | Op::Dot(a, b)
            | Op::Cosine(a, b)
            | Op::Mse(a, b)
            | Op::SqDist(a, b) => f(*a) || f(*b),
            Op::Lerp { from, to, t } => f(*from) || f(*to) || f(*t),
            Op::ScaleBy { v, s } => f(*v) || f(*s),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::Slice { src: a, .. }
            | Op::Bce { p: a, .. }
            | Op::Nll { probs: a, .. } => f(*a),
            Op::Concat(vs) | Op::Mean(vs) => vs.iter().any(|&v| f(v)),
            Op::WeightedSum { weights, items } => f(*weights) || items.iter().any(|&v| f(v)),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Affine2 { .. } => "affine2",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AbsDiff(..) => "abs_diff",
            Op::Lerp { .. } => "lerp",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Ln(..) => "ln",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::Cosine(..) => "cosine",
            Op::Softmax(..) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::SqDist(..) => "sq_dist",
            Op::Bce { .. } => "bce",
            Op::Nll { .. } => "nll",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Cosine-similarity stabiliser added to the norm product.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to the leaves of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter in `store`, zero-filled where the parameter
    /// did not influence the output.
    pub fn collect(&self, binding: &Binding, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, t)| match self.get(binding[id]) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec())
                    .expect("gradient shape matches parameter"),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let n = x.len();
    if n == 0 {
        return;
    }
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(x) {
            acc += *a * *b;
        }
        *o += acc;
    }
}

/// `dw += g xᵀ`, `dx += Wᵀ g`.
fn matvec_backward<T: Scalar>(
    w: &[T],
    x: &[T],
    g: &[T],
    dw: Option<&mut Vec<T>>,
    dx: Option<&mut Vec<T>>,
) {
    let n = x.len();
    if n == 0 {
        return;
    }
    if let Some(dw) = dw {
        for (gi, row) in g.iter().zip(dw.chunks_exact_mut(n)) {
            if *gi == T::zero() {
                continue;
            }
            for (d, xj) in row.iter_mut().zip(x) {
                *d += *gi * *xj;
            }
        }
    }
    if let Some(dx) = dx {
        for (gi, row) in g.iter().zip(w.chunks_exact(n)) {
            if *gi == T::zero() {
                continue;
            }
            for (d, wij) in dx.iter_mut().zip(row) {
                *d += *gi * *wij;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Single element of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return dim_err(op, format!("operand lengths {la} and {lb}"));
        }
        Ok(la)
    }

    /// Records an input; leaves are where gradients are collected.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, data: Vec<T>) -> Result<Var> {
        self.leaf(Tensor::vector(data))
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.leaf(Tensor::zeros(vec![n])).expect("zeros are finite")
    }

    /// Records every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Result<Binding> {
        let vars = store
            .iter()
            .map(|(_, _, t)| self.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Binding::new(vars))
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let value = self.eval(&op)?;
        self.push(value, op)
    }

    fn map1(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.nodes[a.0].value.map(f)
    }

    fn map2(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    fn sum_items(&self, items: &[Var], weight: impl Fn(usize) -> T) -> Vec<T> {
        let mut out = vec![T::zero(); self.len_of(items[0])];
        for (k, &it) in items.iter().enumerate() {
            let w = weight(k);
            for (o, &x) in out.iter_mut().zip(self.data(it)) {
                *o += w * x;
            }
        }
        out
    }

    /// Output of `op` from the current values of its inputs. Shapes are
    /// checked by the recording methods; domain errors are raised here.
    fn eval(&self, op: &Op<T>) -> Result<Tensor<T>> {
        let one = T::one();
        Ok(match *op {
            Op::Leaf => unreachable!("leaves hold their own value"),
            Op::Affine { w, x, b } => {
                let mut out = match b {
                    Some(b) => self.data(b).to_vec(),
                    None => vec![T::zero(); self.value(w).dims2().0],
                };
                matvec(self.data(w), self.data(x), &mut out);
                Tensor::vector(out)
            }
            Op::Affine2 { w, x, u, h, b } => {
                let mut out = self.data(b).to_vec();
                matvec(self.data(w), self.data(x), &mut out);
                matvec(self.data(u), self.data(h), &mut out);
                Tensor::vector(out)
            }
            Op::Add(a, b) => self.map2(a, b, |x, y| x + y)?,
            Op::Sub(a, b) => self.map2(a, b, |x, y| x - y)?,
            Op::Mul(a, b) => self.map2(a, b, |x, y| x * y)?,
            Op::AbsDiff(a, b) => self.map2(a, b, |x, y| (x - y).abs())?,
            Op::Lerp { from, to, t } => Tensor::vector(
                self.data(from)
                    .iter()
                    .zip(self.data(to))
                    .zip(self.data(t))
                    .map(|((&a, &b), &s)| a + s * (b - a))
                    .collect(),
            ),
            Op::Scale(a, s) => self.map1(a, |x| x * s),
            Op::ScaleBy { v, s } => {
                let k = self.scalar(s);
                self.map1(v, |x| x * k)
            }
            Op::Tanh(a) => self.map1(a, |x| x.tanh()),
            Op::Sigmoid(a) => self.map1(a, sigmoid),
            Op::Relu(a) => self.map1(a, |x| x.max(T::zero())),
            Op::Softplus(a) => self.map1(a, softplus),
            Op::Ln(a) => {
                if self.data(a).iter().any(|&x| x <= T::zero()) {
                    return Err(Error::Domain("ln of non-positive value".into()));
                }
                self.map1(a, |x| x.ln())
            }
            Op::Concat(ref parts) => {
                let mut data = Vec::with_capacity(parts.iter().map(|&p| self.len_of(p)).sum());
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                Tensor::vector(data)
            }
            Op::Slice { src, start, len } => Tensor::vector(self.data(src)[start..start + len].to_vec()),
            Op::Sum(a) => Tensor::scalar(self.data(a).iter().copied().sum()),
            Op::Dot(a, b) => Tensor::scalar(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).sum()),
            Op::Cosine(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let dot: T = da.iter().zip(db).map(|(&x, &y)| x * y).sum();
                let na = da.iter().map(|&x| x * x).sum::<T>().sqrt();
                let nb = db.iter().map(|&x| x * x).sum::<T>().sqrt();
                Tensor::scalar(dot / (na * nb + T::lit(COSINE_EPS)))
            }
            Op::Softmax(a) => {
                let x = self.data(a);
                if x.is_empty() {
                    return Err(Error::Domain("softmax of empty vector".into()));
                }
                Tensor::vector(softmax_values(x))
            }
            Op::WeightedSum { weights, ref items } => {
                let w = self.data(weights);
                Tensor::vector(self.sum_items(items, |k| w[k]))
            }
            Op::Mean(ref items) => {
                let mut out = self.sum_items(items, |_| one);
                let inv = one / T::from_usize(items.len()).unwrap();
                out.iter_mut().for_each(|o| *o *= inv);
                Tensor::vector(out)
            }
            Op::Mse(a, b) => {
                let s: T = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
                Tensor::scalar(s / T::from_usize(self.len_of(a)).unwrap())
            }
            Op::SqDist(a, b) => {
                Tensor::scalar(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum())
            }
            Op::Bce { p, target } => {
                let x = self.scalar(p);
                if !(x > T::zero() && x < one) {
                    return Err(Error::Domain(format!("bce probability {x} outside (0, 1)")));
                }
                Tensor::scalar(-(target * x.ln() + (one - target) * (one - x).ln()))
            }
            Op::Nll { probs, class } => {
                let p = self.data(probs)[class];
                if p <= T::zero() {
                    return Err(Error::NonFinite("nll of zero probability".into()));
                }
                Tensor::scalar(-p.ln())
            }
        })
    }

    /// `W·x + b` with `W` of shape `[m, n]`; `b` may be omitted.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (m, n) = self.value(w).dims2();
        if self.len_of(x) != n {
            return dim_err("affine", format!("W is {m}x{n}, x has {}", self.len_of(x)));
        }
        if let Some(b) = b {
            if self.len_of(b) != m {
                return dim_err("affine", format!("W is {m}x{n}, b has {}", self.len_of(b)));
            }
        }
        self.record(Op::Affine { w, x, b })
    }

    /// `W·x + U·h + b`, the gate pre-activation of a recurrent cell.
    pub fn affine2(&mut self, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(w).dims2();
        let (mu, nu) = self.value(u).dims2();
        if self.len_of(x) != n || mu != m || self.len_of(h) != nu || self.len_of(b) != m {
            return dim_err(
                "affine2",
                format!(
                    "W {m}x{n}, x {}, U {mu}x{nu}, h {}, b {}",
                    self.len_of(x),
                    self.len_of(h),
                    self.len_of(b)
                ),
            );
        }
        self.record(Op::Affine2 { w, x, u, h, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, b)?;
        self.record(Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        self.record(Op::Mul(a, b))
    }

    /// Elementwise `|a - b|`.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("abs_diff", a, b)?;
        self.record(Op::AbsDiff(a, b))
    }

    /// `from + t ⊙ (to - from)`: elementwise convex combination for `t ∈ [0, 1]`.
    pub fn lerp(&mut self, from: Var, to: Var, t: Var) -> Result<Var> {
        self.same_len("lerp", from, to)?;
        self.same_len("lerp", from, t)?;
        self.record(Op::Lerp { from, to, t })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    /// Vector times a recorded scalar.
    pub fn scale_by(&mut self, v: Var, s: Var) -> Result<Var> {
        if self.len_of(s) != 1 {
            return dim_err("scale_by", format!("scale has {} elements", self.len_of(s)));
        }
        self.record(Op::ScaleBy { v, s })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Ln(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.len_of(src);
        if start + len > n {
            return dim_err("slice", format!("range {start}..{} of {n}", start + len));
        }
        self.record(Op::Slice { src, start, len })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("dot", a, b)?;
        self.record(Op::Dot(a, b))
    }

    /// `a·b / (|a||b| + ε)`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("cosine", a, b)?;
        self.record(Op::Cosine(a, b))
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }

    /// `Σ_k weights[k] · items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if items.is_empty() || self.len_of(weights) != items.len() {
            return dim_err(
                "weighted_sum",
                format!("{} weights for {} items", self.len_of(weights), items.len()),
            );
        }
        self.equal_lengths("weighted_sum", items)?;
        self.record(Op::WeightedSum { weights, items: items.to_vec() })
    }

    /// Unweighted mean of equal-length vectors.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Domain("mean of empty list".into()));
        }
        self.equal_lengths("mean", items)?;
        self.record(Op::Mean(items.to_vec()))
    }

    fn equal_lengths(&self, op: &'static str, items: &[Var]) -> Result<()> {
        let d = self.len_of(items[0]);
        if items.iter().any(|&it| self.len_of(it) != d) {
            return dim_err(op, "items differ in length");
        }
        Ok(())
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.same_len("mse", a, b)? == 0 {
            return Err(Error::Domain("mse of empty vectors".into()));
        }
        self.record(Op::Mse(a, b))
    }

    /// Sum of squared differences, `‖a - b‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sq_dist", a, b)?;
        self.record(Op::SqDist(a, b))
    }

    /// Binary cross-entropy of a probability `p` against a target in `[0, 1]`.
    pub fn bce(&mut self, p: Var, target: T) -> Result<Var> {
        if self.len_of(p) != 1 {
            return dim_err("bce", "probability must be a scalar");
        }
        self.record(Op::Bce { p, target })
    }

    /// Negative log-likelihood `-ln probs[class]` of a probability vector.
    pub fn nll(&mut self, probs: Var, class: usize) -> Result<Var> {
        let n = self.len_of(probs);
        if class >= n {
            return dim_err("nll", format!("class {class} of {n}"));
        }
        self.record(Op::Nll { probs, class })
    }

    /// Value of `output` after adding `delta` to element `k` of `leaf`.
    ///
    /// Only nodes downstream of `leaf` are recomputed, and every value is
    /// restored before returning, so the tape is unchanged afterwards. The
    /// result equals a fresh recording only when the recorded graph does not
    /// depend on the leaf's value.
    pub fn perturbed(&mut self, leaf: Var, k: usize, delta: T, output: Var) -> Result<T> {
        if !matches!(self.nodes[leaf.0].op, Op::Leaf) || k >= self.len_of(leaf) {
            return Err(Error::Domain(format!("cannot perturb element {k} of node {}", leaf.0)));
        }
        let mut dirty = vec![false; output.0 + 1];
        let mut saved = Vec::new();
        let orig = self.nodes[leaf.0].value.data()[k];
        self.nodes[leaf.0].value.data_mut()[k] = orig + delta;
        dirty[leaf.0] = true;
        let mut result = Ok(());
        for i in leaf.0 + 1..=output.0 {
            if !self.nodes[i].op.any_input(|v| dirty[v.0]) {
                continue;
            }
            match self.eval(&self.nodes[i].op) {
                Ok(v) => {
                    saved.push((i, std::mem::replace(&mut self.nodes[i].value, v)));
                    dirty[i] = true;
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let out = self.scalar(output);
        for (i, v) in saved {
            self.nodes[i].value = v;
        }
        self.nodes[leaf.0].value.data_mut()[k] = orig;
        result.map(|()| out)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.len_of(output) != 1 {
            return dim_err("backward", "output must be a scalar");
        }
        if !self.value(output).is_finite() {
            return Err(Error::NonFinite("backward seed".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let (dw, dx) = two_mut(grads, *w, *x, self);
                matvec_backward(self.data(*w), self.data(*x), g, Some(dw), Some(dx));
                if let Some(b) = b {
                    acc_with(grads, *b, self, |d| add_into(d, g));
                }
            }
            Op::Affine2 { w, x, u, h, b } => {
                {
                    let (dw, dx) = two_mut(grads, *w, *x, self);
                    matvec_backward(self.data(*w), self.data(*x), g, Some(dw), Some(dx));
                }
                {
                    let (du, dh) = two_mut(grads, *u, *h, self);
                    matvec_backward(self.data(*u), self.data(*h), g, Some(du), Some(dh));
                }
                acc_with(grads, *b, self, |d| add_into(d, g));
            }
            Op::Add(a, b) => {
                acc_with(grads, *a, self, |d| add_into(d, g));
                acc_with(grads, *b, self, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc_with(grads, *a, self, |d| add_into(d, g));
                acc_with(grads, *b, self, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc_with(grads, *a, self, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc_with(grads, *b, self, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AbsDiff(a, b) => {
                let sign: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| if x > y { one } else if x < y { -one } else { T::zero() })
                    .collect();
                acc_with(grads, *a, self, |d| {
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(&sign) {
                        *d += g * s;
                    }
                });
                acc_with(grads, *b, self, |d| {
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(&sign) {
                        *d -= g * s;
                    }
                });
            }
            Op::Lerp { from, to, t } => {
                let (vf, vt, vs) = (self.data(*from), self.data(*to), self.data(*t));
                acc_with(grads, *from, self, |d| {
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(vs) {
                        *d += g * (one - s);
                    }
                });
                acc_with(grads, *to, self, |d| {
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(vs) {
                        *d += g * s;
                    }
                });
                acc_with(grads, *t, self, |d| {
                    for (k, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * (vt[k] - vf[k]);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc_with(grads, *a, self, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s));
            }
            Op::ScaleBy { v, s } => {
                let k = self.scalar(*s);
                let vv = self.data(*v);
                acc_with(grads, *v, self, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * k));
                let ds: T = vv.iter().zip(g).map(|(&x, &g)| x * g).sum();
                acc_with(grads, *s, self, |d| d[0] += ds);
            }
            Op::Tanh(a) => acc_with(grads, *a, self, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * (one - y * y);
                }
            }),
            Op::Sigmoid(a) => acc_with(grads, *a, self, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (one - y);
                }
            }),
            Op::Relu(a) => {
                let x = self.data(*a);
                acc_with(grads, *a, self, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                acc_with(grads, *a, self, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * sigmoid(x);
                    }
                })
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                acc_with(grads, *a, self, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                })
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.len_of(p);
                    let gs = &g[off..off + n];
                    acc_with(grads, p, self, |d| add_into(d, gs));
                    off += n;
                }
            }
            Op::Slice { src, start, .. } => {
                let start = *start;
                acc_with(grads, *src, self, |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::Sum(a) => acc_with(grads, *a, self, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Dot(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc_with(grads, *a, self, |d| d.iter_mut().zip(vb).for_each(|(d, &y)| *d += g[0] * y));
                acc_with(grads, *b, self, |d| d.iter_mut().zip(va).for_each(|(d, &x)| *d += g[0] * x));
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                let dot: T = va.iter().zip(vb).map(|(&x, &y)| x * y).sum();
                let na = va.iter().map(|&x| x * x).sum::<T>().sqrt();
                let nb = vb.iter().map(|&x| x * x).sum::<T>().sqrt();
                let den = na * nb + T::lit(COSINE_EPS);
                // d/da [a·b / (|a||b| + ε)] = b/den - (a·b) |b| a / (|a| den²)
                let ca = if na > T::zero() { dot * nb / (na * den * den) } else { T::zero() };
                let cb = if nb > T::zero() { dot * na / (nb * den * den) } else { T::zero() };
                acc_with(grads, *a, self, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        *d += g[0] * (y / den - ca * x);
                    }
                });
                acc_with(grads, *b, self, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        *d += g[0] * (x / den - cb * y);
                    }
                });
            }
            Op::Softmax(a) => {
                let gy: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                acc_with(grads, *a, self, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += y * (g - gy);
                    }
                });
            }
            Op::WeightedSum { weights, items } => {
                let w = self.data(*weights).to_vec();
                let dw: Vec<T> = items
                    .iter()
                    .map(|&it| self.data(it).iter().zip(g).map(|(&x, &g)| x * g).sum())
                    .collect();
                acc_with(grads, *weights, self, |d| add_into(d, &dw));
                for (k, &it) in items.iter().enumerate() {
                    let wk = w[k];
                    acc_with(grads, it, self, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += wk * g));
                }
            }
            Op::Mean(items) => {
                let inv = one / T::from_usize(items.len()).unwrap();
                for &it in items {
                    acc_with(grads, it, self, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += inv * g));
                }
            }
            Op::Mse(a, b) | Op::SqDist(a, b) => {
                let n = self.len_of(*a);
                let scale = match node.op {
                    Op::Mse(..) => T::lit(2.0) / T::from_usize(n).unwrap(),
                    _ => T::lit(2.0),
                } * g[0];
                let diff: Vec<T> =
                    self.data(*a).iter().zip(self.data(*b)).map(|(&x, &y)| scale * (x - y)).collect();
                acc_with(grads, *a, self, |d| add_into(d, &diff));
                acc_with(grads, *b, self, |d| d.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v));
            }
            Op::Bce { p, target } => {
                let x = self.scalar(*p);
                let dp = -*target / x + (one - *target) / (one - x);
                acc_with(grads, *p, self, |d| d[0] += g[0] * dp);
            }
            Op::Nll { probs, class } => {
                let p = self.data(*probs)[*class];
                let c = *class;
                acc_with(grads, *probs, self, |d| d[c] -= g[0] / p);
            }
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_values<T: Scalar>(x: &[T]) -> Vec<T> {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

fn acc_with<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, tape: &Tape<T>, f: impl FnOnce(&mut Vec<T>)) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); tape.len_of(v)]);
    f(slot);
}

/// Mutable gradient buffers for two distinct nodes, allocated on demand.
fn two_mut<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    a: Var,
    b: Var,
    tape: &Tape<T>,
) -> (&'g mut Vec<T>, &'g mut Vec<T>) {
    assert_ne!(a, b, "weight and input must be distinct nodes");
    for v in [a, b] {
        if grads[v.0].is_none() {
            grads[v.0] = Some(vec![T::zero(); tape.len_of(v)]);
        }
    }
    let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
    let (left, right) = grads.split_at_mut(hi);
    let x = left[lo].as_mut().unwrap();
    let y = right[0].as_mut().unwrap();
    if swap {
        (y, x)
    } else {
        (x, y)
    }
}

impl<T: Scalar> Tape<T> {
    /// Convenience: a leaf bound to one parameter tensor outside of [`Tape::bind`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.leaf(store.get(id).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vals(t: &Tape<f64>, v: Var) -> Vec<f64> {
        t.data(v).to_vec()
    }

    #[test]
    fn affine_identity_and_zero_weights() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = t.constant(vec![3.0, 4.0]).unwrap();
        let b = t.constant(vec![0.0, 0.0]).unwrap();
        let y = t.affine(w, x, Some(b)).unwrap();
        assert_eq!(vals(&t, y), vec![3.0, 4.0]);

        let w0 = t.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        let x = t.constant(vec![5.0, 5.0]).unwrap();
        let b = t.constant(vec![1.0, 2.0]).unwrap();
        let y = t.affine(w0, x, Some(b)).unwrap();
        assert_eq!(vals(&t, y), vec![1.0, 2.0]);
    }

    #[test]
    fn affine_matches_straight_line_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::<f64>::new();
        let wv = t.leaf(Tensor::matrix(3, 3, w.clone()).unwrap()).unwrap();
        let xv = t.constant(x.clone()).unwrap();
        let bv = t.constant(b.clone()).unwrap();
        let y = t.affine(wv, xv, Some(bv)).unwrap();
        let expect = [
            w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b[0],
            w[3] * x[0] + w[4] * x[1] + w[5] * x[2] + b[1],
            w[6] * x[0] + w[7] * x[1] + w[8] * x[2] + b[2],
        ];
        for (a, e) in vals(&t, y).iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let x = t.constant(vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.affine(w, x, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax(a).unwrap();
        for v in vals(&t, s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = t.constant(vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(a).unwrap();
        let v = vals(&t, s);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] >= 0.0 && v[1] < 1e-300);

        // exp-normalise evaluated directly, no shift needed at this scale
        let a = t.constant(vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax(a).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (v, e) in vals(&t, s).iter().zip(&e) {
            assert!((v - e / z).abs() < 1e-15);
        }
        let empty = t.constant(vec![]).unwrap();
        assert!(matches!(t.softmax(empty), Err(Error::Domain(_))));
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![1.0, 2.0]).unwrap();
        let b = t.constant(vec![3.0]).unwrap();
        let c = t.concat(&[a, b]).unwrap();
        let w = t.constant(vec![0.5, -1.5, 2.0]).unwrap();
        let y = t.dot(c, w).unwrap();
        let g = t.backward(y).unwrap();
        let ga = g.get(a).unwrap();
        let gb = g.get(b).unwrap();
        assert_eq!(ga, &[0.5, -1.5]);
        assert_eq!(gb, &[2.0]);
        let total: f64 = ga.iter().chain(gb).sum();
        assert_eq!(total, 0.5 - 1.5 + 2.0);
    }

    #[test]
    fn empty_input_affine_passes_bias() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::zeros(vec![3, 0])).unwrap();
        let x = t.constant(vec![]).unwrap();
        let b = t.constant(vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.affine(w, x, Some(b)).unwrap();
        assert_eq!(vals(&t, y), vec![1.0, 2.0, 3.0]);
    }

    /// Central-difference check of one kernel through a random linear readout.
    fn mixed_graph(t: &mut Tape<f64>, x: Var, w: Var) -> Result<Var> {
        let a = t.affine(w, x, None)?;
        let s = t.softmax(a)?;
        let h = t.tanh(a)?;
        let j = t.slice(x, 1, 2)?;
        let c = t.concat(&[s, j])?;
        let m = t.mean(&[c, c])?;
        let d = t.cosine(h, s)?;
        let e = t.sum(m)?;
        let p = t.sigmoid(d)?;
        let q = t.mul(p, e)?;
        t.nll(s, 1).and_then(|n| t.add(n, q))
    }

    #[test]
    fn perturbed_matches_fresh_recording_and_restores() {
        let xv = vec![0.3, -1.2, 0.7];
        let wv = vec![0.5, -0.1, 0.2, 0.9, 0.4, -0.6];
        let mut t = Tape::new();
        let x = t.constant(xv.clone()).unwrap();
        let w = t.leaf(Tensor::new(vec![2, 3], wv.clone()).unwrap()).unwrap();
        let out = mixed_graph(&mut t, x, w).unwrap();
        let before: Vec<Vec<f64>> = (0..t.len()).map(|i| vals(&t, Var(i))).collect();
        for k in 0..6 {
            let got = t.perturbed(w, k, 1e-3, out).unwrap();
            let mut wp = wv.clone();
            wp[k] += 1e-3;
            let mut f = Tape::new();
            let fx = f.constant(xv.clone()).unwrap();
            let fw = f.leaf(Tensor::new(vec![2, 3], wp).unwrap()).unwrap();
            let fo = mixed_graph(&mut f, fx, fw).unwrap();
            assert_eq!(got, f.scalar(fo));
        }
        let got = t.perturbed(x, 1, -0.5, out).unwrap();
        assert_ne!(got, t.scalar(out));
        let after: Vec<Vec<f64>> = (0..t.len()).map(|i| vals(&t, Var(i))).collect();
        assert_eq!(before, after);
        assert!(t.perturbed(out, 0, 1.0, out).is_err());
        assert!(t.perturbed(w, 6, 1.0, out).is_err());
    }

    #[test]
    fn perturbed_surfaces_domain_errors_and_restores() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.5]).unwrap();
        let out = t.ln(x).unwrap();
        assert!(t.perturbed(x, 0, -1.0, out).is_err());
        assert_eq!(vals(&t, x), vec![0.5]);
        assert_eq!(t.scalar(out), 0.5f64.ln());
    }

    fn kernel_check(inputs: Vec<Vec<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
        let mut store = ParamStore::new();
        let ids: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, v)| store.add(format!("in{i}"), Tensor::vector(v.clone())).unwrap())
            .collect();
        let report = grad_check(&mut [&mut store], 1e-6, |t: &mut Tape<f64>, b: &[Binding]| {
            let vars: Vec<Var> = ids.iter().map(|&id| b[0][id]).collect();
            let out = build(t, &vars)?;
            let n = t.value(out).len();
            let readout: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect();
            let r = t.constant(readout)?;
            t.dot(out, r)
        })
        .unwrap();
        report.max_rel_err
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn elementwise_kernels_match_finite_differences(a in vec_strategy(4), b in vec_strategy(4), c in proptest::collection::vec(0.05f64..0.95, 4)) {
            // keep abs_diff and relu away from their kinks
            prop_assume!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() > 1e-3));
            prop_assume!(a.iter().all(|x| x.abs() > 1e-3));
            let tol = 1e-6;
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.abs_diff(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone(), c.clone()], |t, v| t.lerp(v[0], v[1], v[2])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.tanh(v[0])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.sigmoid(v[0])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.relu(v[0])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.softplus(v[0])) < tol);
            prop_assert!(kernel_check(vec![c.clone()], |t, v| t.ln(v[0])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.scale(v[0], -1.7)) < tol);
            prop_assert!(kernel_check(vec![a.clone(), vec![c[0]]], |t, v| t.scale_by(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.softmax(v[0])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]])) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.slice(v[0], 1, 2)) < tol);
            prop_assert!(kernel_check(vec![a.clone()], |t, v| t.sum(v[0])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.dot(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.cosine(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.mean(&[v[0], v[1]])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.mse(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![a.clone(), b.clone()], |t, v| t.sq_dist(v[0], v[1])) < tol);
            prop_assert!(kernel_check(vec![vec![c[0]]], |t, v| t.bce(v[0], 0.3)) < tol);
            prop_assert!(kernel_check(vec![c.clone()], |t, v| t.nll(v[0], 2)) < tol);
            prop_assert!(kernel_check(vec![c[..2].to_vec(), a.clone(), b.clone()], |t, v| t.weighted_sum(v[0], &[v[1], v[2]])) < tol);
        }

        #[test]
        fn affine_kernels_match_finite_differences(w in vec_strategy(12), x in vec_strategy(4), u in vec_strategy(9), h in vec_strategy(3), b in vec_strategy(3)) {
            let tol = 1e-6;
            let mut store = ParamStore::new();
            let ids = [
                store.add("w", Tensor::matrix(3, 4, w).unwrap()).unwrap(),
                store.add("x", Tensor::vector(x)).unwrap(),
                store.add("u", Tensor::matrix(3, 3, u).unwrap()).unwrap(),
                store.add("h", Tensor::vector(h)).unwrap(),
                store.add("b", Tensor::vector(b)).unwrap(),
            ];
            let r = grad_check(&mut [&mut store], 1e-6, |t: &mut Tape<f64>, bd: &[Binding]| {
                let v: Vec<Var> = ids.iter().map(|&i| bd[0][i]).collect();
                let y1 = t.affine(v[0], v[1], Some(v[4]))?;
                let y2 = t.affine2(v[0], v[1], v[2], v[3], v[4])?;
                let s = t.mul(y1, y2)?;
                t.sum(s)
            }).unwrap();
            prop_assert!(r.max_rel_err < tol, "{:?}", r);
        }

        #[test]
        fn softmax_sums_to_one_and_permutes(x in proptest::collection::vec(-30.0f64..30.0, 1..12), rot in 0usize..12) {
            let y = softmax_values(&x);
            let s: f64 = y.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            let k = rot % x.len();
            let mut xr = x.clone();
            xr.rotate_left(k);
            let mut yr_expect = y.clone();
            yr_expect.rotate_left(k);
            let yr = softmax_values(&xr);
            for (a, b) in yr.iter().zip(&yr_expect) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
