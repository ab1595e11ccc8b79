//! Elementwise arithmetic, activations and full reductions.

use super::tape::{Function, Tape, Var};
use crate::error::Result;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    a: Var,
    b: Var,
    kind: Binary,
}

impl<T: Scalar> Function<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        match self.kind {
            Binary::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Binary::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
            Binary::Mul => {
                let (a, b) = (tape.data(self.a), tape.data(self.b));
                let ga = if tape.requires_grad(self.a) {
                    Some(g.iter().zip(b).map(|(&g, &b)| g * b).collect())
                } else {
                    None
                };
                let gb = if tape.requires_grad(self.b) {
                    Some(g.iter().zip(a).map(|(&g, &a)| g * a).collect())
                } else {
                    None
                };
                vec![ga, gb]
            }
        }
    }
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Gelu,
    Tanh,
    Abs,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Tanh => x.tanh(),
            Activation::Abs => x.abs(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn has_kink(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_) | Activation::Abs)
    }
}

struct UnaryOp {
    x: Var,
    act: Activation,
}

impl<T: Scalar> Function<T> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.act {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Abs => "abs",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = tape.data(self.x);
        let gx = g.iter().zip(x).map(|(&g, &x)| g * T::of(self.act.derivative(x.as_f64()))).collect();
        vec![Some(gx)]
    }

    fn kink_margin(&self, tape: &Tape<T>) -> Option<f64> {
        self.act.has_kink().then(|| tape.data(self.x).iter().map(|v| v.as_f64().abs()).fold(f64::INFINITY, f64::min))
    }
}

struct ScaleOp {
    x: Var,
    factor: f64,
}

impl<T: Scalar> Function<T> for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let f = lit::<T>(self.factor);
        vec![Some(g.iter().map(|&v| v * f).collect())]
    }
}

struct ReduceOp {
    x: Var,
    mean: bool,
}

impl<T: Scalar> Function<T> for ReduceOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let n = tape.value(self.x).numel();
        let v = if self.mean { g[0] / lit::<T>(n as f64) } else { g[0] };
        vec![Some(vec![v; n])]
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        self.check_same_shape(name, a, b)?;
        let (x, y) = (self.data(a), self.data(b));
        let data: Vec<T> = match kind {
            Binary::Add => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, BinaryOp { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = lit::<T>(factor);
        let value = self.value(x).map(|v| v * f);
        self.record(value, ScaleOp { x, factor })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).map(|v| T::of(act.apply(v.as_f64())));
        self.record(value, UnaryOp { x, act })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Abs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.record(Tensor::scalar(s), ReduceOp { x, mean: false })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.record(Tensor::scalar(s / lit::<T>(n as f64)), ReduceOp { x, mean: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_grad_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let xs = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.param(Tensor::new([2, 2], xs.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let want: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 3]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(crate::Error::NonScalarLoss { numel: 2 })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros([2]));
        let b = tape.param(Tensor::zeros([3]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.add(a, a).unwrap();
        assert!(tape.op_name(b).is_none());
        assert!(!tape.requires_grad(b));
    }
}
