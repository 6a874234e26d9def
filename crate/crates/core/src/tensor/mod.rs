//! Dense-array reverse-mode autodiff.
//!
//! Tensors are immutable row-major arrays tied into an expression graph via
//! `Rc`. Each op records its inputs and a closure mapping the upstream
//! gradient to per-input gradients; `backward` walks the graph once in
//! reverse topological order. Tensors that do not require gradients carry no
//! parents, no closure, and no gradient storage.

mod checkpoint;
mod complex;
pub mod gradcheck;
mod ops;
mod param;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use complex::ComplexPair;
pub use ops::PadMode;
pub use param::Parameter;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Maps the gradient flowing into a node to gradients for each parent
/// (`None` when a parent does not require a gradient).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                parents: Vec::new(),
                backward: None,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Tensor::leaf(data, shape, false)
    }

    /// Tracked leaf: gradients accumulate here during `backward`.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Self {
        Tensor::leaf(data, shape, true)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![T::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::new(vec![v; shape.iter().product()], shape)
    }

    pub fn from_f64_slice(v: &[f64], shape: &[usize]) -> Self {
        Tensor::new(v.iter().map(|&x| T::from_f64(x)).collect(), shape)
    }

    /// Result of an op. Drops graph bookkeeping when no parent is tracked,
    /// so inference builds no graph and holds no extra memory.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "op produced {} values for shape {:?}", data.len(), shape);
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                parents,
                backward,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient (leaves only hold one after `backward`).
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.node.data.clone(), &self.node.shape)
    }

    /// Reverse pass from a scalar node, seeding with 1.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a scalar; got shape {:?}", self.shape());
        self.backward_with(&[T::one()]);
    }

    /// Reverse pass with an explicit cotangent (for VJP probes in tests).
    pub fn backward_with(&self, seed: &[T]) {
        assert_eq!(seed.len(), self.numel(), "cotangent length mismatch");
        if !self.node.requires_grad {
            return;
        }
        accumulate(&self.node, seed);
        let order = topo_order(self);
        for node in order.iter().rev() {
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue; // leaf: gradient stays stored
            };
            let Some(g) = node.grad.borrow_mut().take() else {
                continue; // not reached by this seed
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.node.requires_grad {
                        debug_assert_eq!(pg.len(), parent.numel());
                        accumulate(&parent.node, &pg);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(node: &Node<T>, g: &[T]) {
    let mut slot = node.grad.borrow_mut();
    match slot.as_mut() {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Iterative postorder over the expression DAG (parents before consumers).
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Rc<Node<T>>> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Rc<Node<T>>> = Vec::new();
    let mut stack: Vec<(Rc<Node<T>>, usize)> = vec![(Rc::clone(&root.node), 0)];
    while let Some((node, child)) = stack.pop() {
        if child == 0 && !visited.insert(node.id) {
            continue;
        }
        if child < node.parents.len() {
            let next = Rc::clone(&node.parents[child].node);
            stack.push((node, child + 1));
            if !visited.contains(&next.id) {
                stack.push((next, 0));
            }
            continue;
        }
        order.push(node);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]);
        let b = Tensor::<f64>::new(vec![3.0, 4.0], &[2]);
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.node.parents.is_empty());
        assert!(c.grad().is_none());
    }

    #[test]
    fn backward_accumulates_through_diamond() {
        let x = Tensor::<f64>::var(vec![3.0], &[1]);
        let a = x.scale(2.0); // 2x
        let b = x.mul(&x).unwrap(); // x^2
        let y = a.add(&b).unwrap(); // 2x + x^2
        y.backward();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0 + 2.0 * 3.0]);
    }

    #[test]
    fn repeated_backward_after_zeroing_is_bit_identical() {
        let x = Tensor::<f64>::var(vec![0.3, -1.7, 2.2, 0.9], &[2, 2]);
        let run = |x: &Tensor<f64>| {
            let y = x.gelu().mul(x).unwrap().sum_all();
            y.backward();
            let g = x.grad().unwrap();
            g
        };
        let g1 = run(&x);
        x.zero_grad();
        let g2 = run(&x);
        let b1: Vec<u64> = g1.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = g2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn backward_without_zeroing_accumulates() {
        let x = Tensor::<f64>::var(vec![1.0], &[1]);
        let y = x.scale(5.0);
        y.backward();
        let y2 = x.scale(5.0);
        y2.backward();
        assert_eq!(x.grad().unwrap(), vec![10.0]);
    }

    #[test]
    #[should_panic(expected = "needs a scalar")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::var(vec![1.0, 2.0], &[2]);
        x.backward();
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::<f64>::var(vec![2.0], &[1]);
        let d = x.mul(&x).unwrap().detach();
        let y = x.mul(&d).unwrap();
        y.backward();
        // d treated as constant 4: dy/dx = 4, not 3x^2 = 12.
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }
}
