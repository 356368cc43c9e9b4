use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::RngCore;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Gradients, Scalar, Tensor};

/// A named, mutable leaf tensor owned by a model.
pub struct Param<F: Scalar> {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Tensor<F>>,
    trainable: Cell<bool>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, data: Vec<F>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: RefCell::new(Tensor::from_vec(data, shape).requires_grad()),
            trainable: Cell::new(true),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// The current leaf tensor; use it in forward passes.
    pub fn value(&self) -> Tensor<F> {
        self.value.borrow().clone()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.value.borrow().to_vec()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.get()
    }

    /// Replace the stored values, keeping the shape.
    pub fn set(&self, data: Vec<F>) {
        let t = Tensor::from_vec(data, &self.shape);
        *self.value.borrow_mut() = if self.trainable.get() { t.requires_grad() } else { t };
    }

    pub fn set_trainable(&self, trainable: bool) {
        if self.trainable.get() != trainable {
            self.trainable.set(trainable);
            self.set(self.to_vec());
        }
    }

    pub fn grad<'g>(&self, grads: &'g Gradients<F>) -> Option<&'g [F]> {
        grads.get(&self.value.borrow())
    }
}

/// Ordered collection of parameters belonging to one network.
pub struct ParamSet<F: Scalar> {
    params: Vec<Rc<Param<F>>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet { params: Vec::new() }
    }
}

impl<F: Scalar> Clone for ParamSet<F> {
    fn clone(&self) -> Self {
        ParamSet {
            params: self.params.clone(),
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Rc<Param<F>>) {
        self.params.push(p);
    }

    pub fn extend(&mut self, other: &ParamSet<F>) {
        self.params.extend(other.params.iter().cloned());
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Param<F>>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.shape().iter().product::<usize>()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Param<F>>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn set_trainable(&self, trainable: bool) {
        for p in &self.params {
            p.set_trainable(trainable);
        }
    }

    /// Snapshot of all values, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<F>> {
        self.params.iter().map(|p| p.to_vec()).collect()
    }

    /// Sum of squared gradient entries over the whole set.
    pub fn grad_norm_sq(&self, grads: &Gradients<F>) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad(grads))
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
}

/// Hierarchical parameter factory: names are joined with `.`.
pub struct Init<'a, F: Scalar> {
    params: &'a mut ParamSet<F>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, F: Scalar> Init<'a, F> {
    pub fn new(params: &'a mut ParamSet<F>, rng: &'a mut dyn RngCore) -> Self {
        Init {
            params,
            rng,
            prefix: String::new(),
        }
    }

    /// Child factory with `name` appended to the prefix.
    pub fn pp(&mut self, name: &str) -> Init<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            params: &mut *self.params,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Rc<Param<F>> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match kind {
            InitKind::Const(v) => vec![F::cst(v); n],
            InitKind::Normal { std } => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| F::cst(d.sample(&mut self.rng))).collect()
            }
            InitKind::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| F::cst(d.sample(&mut self.rng))).collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let p = Rc::new(Param::new(full, data, shape));
        self.params.push(Rc::clone(&p));
        p
    }
}
