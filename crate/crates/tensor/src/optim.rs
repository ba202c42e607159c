use crate::error::{Result, TensorError};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// A named parameter tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters and non-trainable buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.insert(name.into(), value, true)
    }

    pub fn push_frozen(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad, trainable });
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter-leaf gradients of `graph` into the gradient buffers.
    pub fn accumulate(&mut self, graph: &Graph) -> Result<()> {
        for (index, g) in graph.param_grads() {
            let p = self
                .params
                .get_mut(index)
                .ok_or_else(|| TensorError::ShapeMismatch(format!("no parameter {index}")))?;
            p.grad.same_shape(g, &p.name)?;
            p.grad.add_assign(g);
        }
        Ok(())
    }
}

/// One momentum-SGD update: `v <- momentum * v + g; w <- w - lr * v`.
pub fn sgd_update(weight: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64) -> Result<()> {
    weight.same_shape(grad, "sgd gradient")?;
    weight.same_shape(velocity, "sgd velocity")?;
    for ((w, g), v) in weight.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD with one velocity buffer per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::InvalidParams(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::InvalidParams(format!("momentum {momentum} not in [0, 1)")));
        }
        Ok(Self { learning_rate, momentum, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Updates every trainable parameter from its gradient buffer.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != store.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.velocity.len(),
                store.len()
            )));
        }
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            if p.trainable {
                sgd_update(&mut p.value, &p.grad, v, self.learning_rate, self.momentum)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::full(&[3], 1.5));
        let before = store.clone();
        let mut sgd = Sgd::new(0.1, 0.9).unwrap();
        sgd.step(&mut store).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut w = Tensor::scalar(1.0);
        let mut v = Tensor::scalar(0.0);
        sgd_update(&mut w, &Tensor::scalar(1.0), &mut v, 0.0016, 0.0).unwrap();
        assert_eq!(w.item().unwrap(), 1.0 - 0.0016);
        assert!((w.item().unwrap() - 0.9984).abs() < 1e-16);
    }

    #[test]
    fn momentum_converges_on_quadratic() {
        // f(w) = (w - 3)^2, f'(w) = 2 (w - 3)
        let mut store = ParamStore::new();
        store.push("w", Tensor::scalar(0.0));
        let mut sgd = Sgd::new(0.1, 0.9).unwrap();
        for _ in 0..200 {
            let w = store.params()[0].value.item().unwrap();
            store.params_mut()[0].grad = Tensor::scalar(2.0 * (w - 3.0));
            sgd.step(&mut store).unwrap();
        }
        // Oracle: the same recurrence written out on plain floats.
        let (mut w, mut v) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            v = 0.9 * v + 2.0 * (w - 3.0);
            w -= 0.1 * v;
        }
        let got = store.params()[0].value.item().unwrap();
        assert_eq!(got, w);
        assert!((got - 3.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.push_frozen("stat", Tensor::scalar(1.0));
        store.params_mut()[0].grad = Tensor::scalar(5.0);
        Sgd::new(0.5, 0.0).unwrap().step(&mut store).unwrap();
        assert_eq!(store.params()[0].value.item().unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(-0.1, 0.0).is_err());
    }
}
