use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::array::Tensor;
use super::scalar::Scalar;
use super::TensorError;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `inputs` are the parent values in recording order and `grad` is
/// d(loss)/d(output). Returns one gradient buffer per parent; parents with
/// `needs[i] == false` may get `None`.
pub trait BackwardOp<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Option<Box<dyn BackwardOp<T>>>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<T>>,
}

/// Tape of executed ops. Nodes are appended in execution order, which is a
/// topological order of the computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    profile: Option<Profile>,
}

/// Wall time per op name, split into forward and backward.
#[derive(Clone, Debug, Default)]
pub struct Profile {
    pub forward: BTreeMap<&'static str, (usize, Duration)>,
    pub backward: BTreeMap<&'static str, (usize, Duration)>,
    last: Option<Instant>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            profile: None,
        }
    }

    /// Start attributing wall time to op names. Forward time of an op is
    /// the time since the previous recorded node.
    pub fn enable_profiling(&mut self) {
        self.profile = Some(Profile { last: Some(Instant::now()), ..Profile::default() });
    }

    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false, true)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true, true)
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

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` if the leaf did
    /// not influence the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Record the result of an op. Rejects non-finite outputs.
    pub fn record(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        op: Box<dyn BackwardOp<T>>,
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        if let Some(p) = self.profile.as_mut() {
            let now = Instant::now();
            let e = p.forward.entry(name).or_default();
            e.0 += 1;
            e.1 += now - p.last.unwrap_or(now);
        }
        let requires_grad = self.any_requires_grad(parents);
        let op = if requires_grad { Some(op) } else { None };
        Ok(self.push(value, parents.to_vec(), op, requires_grad, false))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        op: Option<Box<dyn BackwardOp<T>>>,
        requires_grad: bool,
        is_leaf: bool,
    ) -> Var {
        if let Some(p) = self.profile.as_mut() {
            p.last = Some(Instant::now());
        }
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
            is_leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`. Each node is visited once in
    /// reverse recording order; gradients of shared inputs are summed.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_none() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor<T>> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let op = node.op.as_ref().expect("checked above");
            let started = self.profile.is_some().then(Instant::now);
            let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
            let parents = node.parents.clone();
            debug_assert_eq!(parent_grads.len(), parents.len(), "{}", op.name());
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[p.0];
                if !target.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), target.value.len());
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            if let (Some(t0), Some(p)) = (started, self.profile.as_mut()) {
                let name = self.nodes[i].op.as_ref().expect("checked above").name();
                let e = p.backward.entry(name).or_default();
                e.0 += 1;
                e.1 += t0.elapsed();
            }
            if self.nodes[i].is_leaf {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }
}
