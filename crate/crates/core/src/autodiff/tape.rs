use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
pub trait Function<T: Scalar> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradients for each entry of [`Function::inputs`], in order. `None`
    /// means the input receives no contribution.
    fn backward(&self, tape: &Tape<T>, out: Var, grad_out: &[T]) -> Vec<Option<Vec<T>>>;

    /// Distance of the current operating point to the nearest point where the
    /// op is not differentiable. `None` for smooth ops.
    fn kink_margin(&self, _tape: &Tape<T>) -> Option<f64> {
        None
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    func: Option<Box<dyn Function<T>>>,
}

/// Dynamic computation graph for a single forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
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

    /// Records a leaf; keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, func: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].func.as_ref().map(|f| f.name())
    }

    /// Appends an op output. The op is kept only when some input needs a
    /// gradient; otherwise the output is recorded as a constant.
    pub fn record(&mut self, value: Tensor<T>, func: impl Function<T> + 'static) -> Var {
        let requires_grad = func.inputs().iter().any(|&v| self.requires_grad(v));
        let func: Option<Box<dyn Function<T>>> = if requires_grad { Some(Box::new(func)) } else { None };
        self.nodes.push(Node { value: value.with_requires_grad(requires_grad), func });
        Var(self.nodes.len() - 1)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Back-propagates from a single-element loss, accumulating into every
    /// reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.func {
                Some(func) => {
                    let inputs = func.inputs();
                    let input_grads = func.backward(self, Var(idx), &g);
                    debug_assert_eq!(inputs.len(), input_grads.len(), "{}", func.name());
                    for (input, ig) in inputs.into_iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.requires_grad(input) {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), self.value(input).numel(), "{}", func.name());
                        match &mut grads[input.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
                None if node.value.requires_grad() => leaf_grads.push((idx, g)),
                None => {}
            }
        }
        for (idx, g) in leaf_grads {
            self.nodes[idx].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Smallest kink margin over all recorded ops, `f64::INFINITY` when the
    /// graph is smooth everywhere.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| n.func.as_ref().and_then(|f| f.kink_margin(self)))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub(crate) fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}"))),
        }
    }
}
