use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward closure: receives the gradient w.r.t. the node output and the
/// output values, returns one optional gradient per parent (same order as
/// `parents`). `None` means "no gradient needed / contributed".
pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F], &[F]) -> Vec<Option<Vec<F>>>>;

struct GradFn<F: Scalar> {
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad_fn: Option<GradFn<F>>,
}

/// Dense row-major tensor with an attached (optional) computation graph.
///
/// Cloning is cheap (reference counted). Tensors are immutable; every op
/// allocates its output. Shape errors are programming errors and panic.
pub struct Tensor<F: Scalar> {
    node: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    fn leaf(data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad_fn: None,
            }),
        }
    }

    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Self {
        Self::leaf(data, shape.to_vec(), false)
    }

    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.iter().map(|&v| F::cst(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(vec![v], &[])
    }

    /// Fresh leaf with the same values that participates in gradient
    /// computation.
    pub fn requires_grad(self) -> Self {
        let shape = self.node.shape.clone();
        Self::leaf(self.into_vec(), shape, true)
    }

    /// Fresh leaf sharing no graph with `self`.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.data.clone(), self.node.shape.clone(), false)
    }

    /// Build an op output. If no parent requires grad the closure is dropped
    /// and the result is a plain constant.
    pub(crate) fn from_op(
        data: Vec<F>,
        shape: Vec<usize>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        assert_eq!(data.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.node.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn into_vec(self) -> Vec<F> {
        match Rc::try_unwrap(self.node) {
            Ok(node) => node.data,
            Err(rc) => rc.data.clone(),
        }
    }

    pub fn is_requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn item_f64(&self) -> f64 {
        self.item().to_f64().unwrap_or(f64::NAN)
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from this scalar. Returns gradients of every leaf
    /// that requires grad.
    pub fn backward(&self) -> Gradients<F> {
        assert_eq!(
            self.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        let mut leaves = HashMap::new();
        if !self.node.requires_grad {
            return Gradients { map: leaves };
        }

        // Iterative post-order DFS: children before parents in `order`.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.id(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.node.requires_grad && !visited.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    leaves.insert(t.id(), g);
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &t.node.data);
                    assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.node.requires_grad {
                            continue;
                        }
                        assert_eq!(pg.len(), p.numel(), "gradient size mismatch");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a = *a + *b;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { map: leaves }
    }
}

/// Leaf gradients produced by [`Tensor::backward`], keyed by tensor identity.
#[derive(Default)]
pub struct Gradients<F: Scalar> {
    map: HashMap<u64, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_tensor(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        self.get(t).map(|g| Tensor::from_vec(g.to_vec(), t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
