use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::ops::{batchnorm, conv, pool, BnSaved, ConvGeom, PoolIndices};
use crate::param::{ParamId, ParamStore};
use crate::warp;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

/// A recorded primitive application: input handles plus whatever the
/// backward rule needs from the forward pass.
#[derive(Debug)]
pub enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        indices: PoolIndices,
    },
    MaxUnpool {
        x: Var,
        indices: PoolIndices,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Warp {
        source: Var,
        disp: Var,
        sign: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Input | Param(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Abs(a) | Sigmoid(a) | Relu(a) | Scale(a, _) | AddScalar(a, _) | Mean(a) => vec![a],
            Conv2d { x, w, b, .. } | Deconv2d { x, w, b, .. } => vec![x, w, b],
            MaxPool { x, .. } | MaxUnpool { x, .. } => vec![x],
            BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Warp { source, disp, .. } => vec![source, disp],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input => "input",
            Param(_) => "param",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Abs(_) => "abs",
            Sigmoid(_) => "sigmoid",
            Relu(_) => "relu",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Mean(_) => "mean",
            Conv2d { .. } => "conv2d",
            Deconv2d { .. } => "deconv2d",
            MaxPool { .. } => "maxpool2",
            MaxUnpool { .. } => "maxunpool2",
            BatchNorm { .. } => "batchnorm",
            Warp { .. } => "warp_horizontal",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// Records primitive applications during one forward pass so that
/// [`Tape::backward`] can replay them in reverse.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. A tape is meant to be dropped after its backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of parameter leaves recorded so far.
    pub fn param_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param(_)))
            .count()
    }

    /// A constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Input, false)
    }

    /// A leaf whose gradient is wanted (see [`Gradients::get`]).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Input, true)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a parameter. Repeated calls with the same id return the same
    /// node, so every use of a shared parameter feeds one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    fn leaf(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let finite = !cfg!(debug_assertions) || value.all_finite();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node. In debug builds, a non-finite output computed from
    /// finite inputs is reported as an error.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let finite = if cfg!(debug_assertions) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
            let out_finite = value.all_finite();
            if inputs_finite && !out_finite {
                return Err(Error::NonFinite(op.name().to_string()));
            }
            out_finite
        } else {
            true
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            finite,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a, c))
    }

    /// Mean over every element (batch, channels and pixels alike).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean().ok_or(Error::InvalidShape {
            op: "mean",
            msg: "mean of an empty tensor".into(),
        })?;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every node
    /// that requires one and is reachable from `root`.
    pub fn gradients(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Input | Op::Param(_)) {
                self.apply_rule(i, &upstream, &mut grads)?;
            }
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and adds each reachable parameter's gradient to
    /// its accumulator in `store`. Accumulators are never cleared here.
    pub fn backward(&self, root: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(root)?;
        for (&id, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(grads)
    }

    fn apply_rule(&self, i: usize, up: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = Accumulator { tape: self, grads };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::Add(a, b) => {
                acc.add(a, || Ok(up.clone()))?;
                acc.add(b, || Ok(up.clone()))?;
            }
            &Op::Sub(a, b) => {
                acc.add(a, || Ok(up.clone()))?;
                acc.add(b, || Ok(up.map(|g| -g)))?;
            }
            &Op::Mul(a, b) => {
                acc.add(a, || up.zip_map(self.value(b), "mul", |g, y| g * y))?;
                acc.add(b, || up.zip_map(self.value(a), "mul", |g, x| g * x))?;
            }
            &Op::Abs(a) => acc.add(a, || {
                up.zip_map(self.value(a), "abs", |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
            })?,
            &Op::Sigmoid(a) => acc.add(a, || {
                up.zip_map(&node.value, "sigmoid", |g, s| g * s * (T::one() - s))
            })?,
            &Op::Relu(a) => acc.add(a, || {
                up.zip_map(self.value(a), "relu", |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })
            })?,
            &Op::Scale(a, c) => acc.add(a, || Ok(up.map(|g| g * c)))?,
            &Op::AddScalar(a, _) => acc.add(a, || Ok(up.clone()))?,
            &Op::Mean(a) => acc.add(a, || {
                let x = self.value(a);
                let share = up.item() / T::of_usize(x.len());
                Ok(Tensor::full(x.shape(), share))
            })?,
            &Op::Conv2d { x, w, b, geom } => {
                let g = conv::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    up,
                    geom,
                    self.requires_grad(x),
                    self.requires_grad(w) || self.requires_grad(b),
                )?;
                acc.put(x, g.dx)?;
                acc.put(w, g.dw)?;
                acc.put(b, g.db)?;
            }
            &Op::Deconv2d { x, w, b, geom } => {
                let g = conv::deconv2d_backward(
                    self.value(x),
                    self.value(w),
                    up,
                    geom,
                    self.requires_grad(x),
                    self.requires_grad(w) || self.requires_grad(b),
                )?;
                acc.put(x, g.dx)?;
                acc.put(w, g.dw)?;
                acc.put(b, g.db)?;
            }
            Op::MaxPool { x, indices } => {
                acc.add(*x, || pool::maxpool2_backward(up, indices))?;
            }
            Op::MaxUnpool { x, indices } => {
                acc.add(*x, || pool::maxunpool2_backward(up, indices))?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let g = batchnorm::backward(self.value(*gamma), up, saved, self.requires_grad(*x))?;
                acc.put(*x, g.dx)?;
                acc.put(*gamma, Some(g.dgamma))?;
                acc.put(*beta, Some(g.dbeta))?;
            }
            &Op::Warp { source, disp, sign } => {
                let g = warp::warp_backward(
                    self.value(source),
                    self.value(disp),
                    sign,
                    up,
                    self.requires_grad(source),
                    self.requires_grad(disp),
                )?;
                acc.put(source, g.dsource)?;
                acc.put(disp, g.ddisp)?;
            }
        }
        Ok(())
    }
}

struct Accumulator<'a, T> {
    tape: &'a Tape<T>,
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> Accumulator<'_, T> {
    /// Adds a lazily computed contribution to `v`'s gradient, skipping the
    /// computation when `v` needs no gradient.
    fn add(&mut self, v: Var, f: impl FnOnce() -> Result<Tensor<T>>) -> Result<()> {
        if !self.tape.requires_grad(v) {
            return Ok(());
        }
        let g = f()?;
        self.put(v, Some(g))
    }

    fn put(&mut self, v: Var, g: Option<Tensor<T>>) -> Result<()> {
        let Some(g) = g else { return Ok(()) };
        if !self.tape.requires_grad(v) {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

/// Per-node gradients produced by [`Tape::gradients`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([values.len()], values).unwrap()
    }

    #[test]
    fn abs_forward_and_backward_with_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[-2.0, 0.0, 3.0]));
        let y = tape.abs(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 3.0]);
        // sum via mean * n so the upstream is all ones
        let m = tape.mean(y).unwrap();
        let root = tape.scale(m, 3.0).unwrap();
        let g = tape.gradients(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn sub_of_self_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.5, -2.0, 7.0]));
        let y = tape.sub(x, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0f64));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.gradients(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn mean_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1.0, 2.0, 3.0, 6.0]));
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).item(), 3.0);
        let g = tape.gradients(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

        let z = tape.constant(Tensor::zeros([2, 3]));
        let mz = tape.mean(z).unwrap();
        assert_eq!(tape.value(mz).item(), 0.0);

        let e = tape.constant(Tensor::zeros([0]));
        assert!(tape.mean(e).is_err());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[1.0, 2.0]));
        assert!(matches!(tape.gradients(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn backward_accumulates_into_params() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[-1.0, 2.0])).unwrap();
        for expected in [[-0.5, 0.5], [-1.0, 1.0]] {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let a = tape.abs(wv).unwrap();
            let root = tape.mean(a).unwrap();
            tape.backward(root, &mut store).unwrap();
            assert_eq!(store.grad(w).unwrap().data(), &expected);
        }
    }

    #[test]
    fn constant_root_writes_no_grads() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[1.0])).unwrap();
        let mut tape = Tape::new();
        let _ = tape.param(&store, w);
        let c = tape.scalar_constant(4.0);
        tape.backward(c, &mut store).unwrap();
        assert!(store.grad(w).is_none());
    }

    #[test]
    fn shared_param_node_is_reused() {
        let mut store = ParamStore::<f32>::new();
        let w = store.insert("w", Tensor::zeros([1])).unwrap();
        let mut tape = Tape::new();
        assert_eq!(tape.param(&store, w), tape.param(&store, w));
    }

    #[test]
    fn sum_of_graphs_is_sum_of_gradients() {
        let x0 = t(&[0.3, -1.2, 2.0]);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.variable(x0.clone());
            let a = tape.abs(x).unwrap();
            let la = tape.mean(a).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let ls = tape.mean(s).unwrap();
            let root = match which {
                0 => la,
                1 => ls,
                _ => tape.add(la, ls).unwrap(),
            };
            tape.gradients(root).unwrap().get(x).unwrap().clone()
        };
        let mut separate = run(0);
        separate.add_assign(&run(1)).unwrap();
        let joint = run(2);
        assert!(separate.max_abs_diff(&joint).unwrap() < 1e-15);
    }
}
