//! Row-major f64 tensors with reverse-mode autodiff on an explicit tape.
//!
//! A [`Tensor`] is an immutable value: shape plus shared storage. Cloning is
//! cheap and sharing across threads is safe. Gradients are not stored in the
//! tensor; they live on a [`Tape`]. Operations (in [`ops`]) compute their
//! result eagerly and, when at least one input is tracked, push one node with
//! a backward rule onto the tape. [`Tape::backward`] replays the nodes once,
//! in reverse creation order. Node order and every accumulation loop are
//! fixed, so two identical runs produce bitwise-identical gradients.
//!
//! Untracked inputs flow through the same code paths without recording
//! anything, which is how inference runs: call the ops with plain tensors and
//! an empty tape, and the tape stays empty.

pub mod gradcheck;
pub mod ops;

use std::sync::Arc;

use thiserror::Error;

/// Handle of one recorded operation (or leaf) on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    /// An axis of an operand does not have the required length.
    #[error("{op}: {axis} mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// An operand has the wrong rank for the operation.
    #[error("{op}: expected rank-{expected} operand, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    /// A masked reduction selected zero frames for some sample.
    #[error("{op}: selection is empty for sample {sample}")]
    EmptySelection { op: &'static str, sample: usize },
    /// A masked reduction selected fewer frames than the operation needs.
    #[error("{op}: needs at least {needed} selected frames, got {got}")]
    TooFewSelected {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("backward needs a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("tape already consumed by backward; record a fresh tape")]
    TapeConsumed,
    #[error("tensor is not tracked on the tape")]
    Untracked,
    #[error("{op}: {what}")]
    Invalid { op: &'static str, what: String },
}

/// Dense row-major f64 tensor with shared storage.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                what: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(vec![1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the storage, for backward closures.
    pub(crate) fn storage(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the same storage with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Invalid {
                op: "reshaped",
                what: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        let mut t = self.clone();
        t.shape = shape;
        Ok(t)
    }

    pub(crate) fn tracked(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<(), TensorError> {
        if self.shape.len() != rank {
            return Err(TensorError::RankMismatch {
                op,
                expected: rank,
                got: self.shape.clone(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

/// Frame selection for masked reductions over the time axis.
///
/// `All` selects every frame. `Rows` holds one boolean row per sample; masked
/// loops visit the selected frames in ascending time order, which is the same
/// order the unmasked loops use, so an all-true row is bitwise-identical to
/// `All`.
#[derive(Clone, Copy)]
pub enum Select<'a> {
    All,
    Rows(&'a [Vec<bool>]),
}

impl<'a> Select<'a> {
    pub fn validate(
        &self,
        op: &'static str,
        batch: usize,
        frames: usize,
    ) -> Result<(), TensorError> {
        if let Select::Rows(rows) = self {
            if rows.len() != batch {
                return Err(TensorError::ShapeMismatch {
                    op,
                    axis: "selection batch",
                    expected: batch,
                    got: rows.len(),
                });
            }
            for row in rows.iter() {
                if row.len() != frames {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        axis: "selection frames",
                        expected: frames,
                        got: row.len(),
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn selected(&self, sample: usize, frame: usize) -> bool {
        match self {
            Select::All => true,
            Select::Rows(rows) => rows[sample][frame],
        }
    }

    /// Number of selected frames for one sample.
    pub fn count(&self, sample: usize, frames: usize) -> usize {
        match self {
            Select::All => frames,
            Select::Rows(rows) => rows[sample].iter().filter(|&&m| m).count(),
        }
    }

    /// Total selected frames across the batch.
    pub fn total(&self, batch: usize, frames: usize) -> usize {
        match self {
            Select::All => batch * frames,
            Select::Rows(rows) => rows.iter().map(|r| r.iter().filter(|&&m| m).count()).sum(),
        }
    }
}

/// Write access to the gradient slots of nodes created *before* the one
/// currently being replayed. Accumulation is `+=` into lazily-zeroed buffers.
pub struct GradSink<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    lens: &'a [usize],
}

impl<'a> GradSink<'a> {
    fn slot(&mut self, id: NodeId) -> &mut [f64] {
        let len = self.lens[id];
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }

    /// `slot[id] += contrib`, elementwise.
    pub fn add(&mut self, id: NodeId, contrib: &[f64]) {
        let s = self.slot(id);
        debug_assert_eq!(s.len(), contrib.len());
        for (a, c) in s.iter_mut().zip(contrib) {
            *a += c;
        }
    }

    /// `slot[id][i] += g[i] * w[i]`, elementwise.
    pub fn add_mul(&mut self, id: NodeId, g: &[f64], w: &[f64]) {
        let s = self.slot(id);
        debug_assert_eq!(s.len(), g.len());
        debug_assert_eq!(s.len(), w.len());
        for i in 0..s.len() {
            s[i] += g[i] * w[i];
        }
    }

    /// Mutable view of the raw slot for custom accumulation loops.
    pub fn with_slot(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        f(self.slot(id));
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    len: usize,
    backward: BackwardFn,
}

/// Recording of one differentiable computation.
///
/// A tape is single-threaded and lives for one forward/backward pass. Leaves
/// (parameters) are registered with [`Tape::leaf`]; ops push interior nodes.
/// After [`Tape::backward`] the per-node gradients can be read with
/// [`Tape::grad`]; running backward a second time is an error.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a parameter: same storage, now tracked with a fresh node.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(t.numel(), |_, _| {});
        let mut out = t.clone();
        out.node = Some(id);
        out.requires_grad = true;
        out
    }

    pub(crate) fn push(&mut self, len: usize, backward: impl Fn(&[f64], &mut GradSink) + 'static) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            len,
            backward: Box::new(backward),
        });
        id
    }

    /// Replays the tape once in reverse order, accumulating gradients.
    ///
    /// `loss` must be a tracked one-element tensor; its gradient is seeded
    /// with 1.0. Each node is visited exactly once.
    pub fn backward(&mut self, loss: &Tensor) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: loss.shape().to_vec(),
            });
        }
        let root = loss.node().ok_or(TensorError::Untracked)?;
        self.consumed = true;

        let lens: Vec<usize> = self.nodes.iter().map(|n| n.len).collect();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        slots[root] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            // Inputs always precede their consumers, so the slots below `id`
            // are exactly the ones a backward rule may write to.
            let (lo, hi) = slots.split_at_mut(id);
            if let Some(g) = hi[0].as_ref() {
                let mut sink = GradSink {
                    slots: lo,
                    lens: &lens[..id],
                };
                (self.nodes[id].backward)(g, &mut sink);
            }
        }
        self.grads = slots;
        Ok(())
    }

    /// Gradient of a node after [`Tape::backward`]; `None` when the loss does
    /// not depend on it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of a tracked tensor after [`Tape::backward`].
    pub fn grad_of(&self, t: &Tensor) -> Result<Option<&[f64]>, TensorError> {
        let id = t.node().ok_or(TensorError::Untracked)?;
        Ok(self.grad(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn leaf_keeps_values_and_tracks() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let l = tape.leaf(&t);
        assert_eq!(l.data(), t.data());
        assert!(l.is_tracked());
        assert!(l.requires_grad());
        assert!(!t.is_tracked());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = ops::sum_all(&mut tape, &x);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_elementwise_square_sum_is_two_x() {
        let mut tape = Tape::new();
        let vals = vec![1.0, -2.0, 0.5, 3.0];
        let x = tape.leaf(&Tensor::from_vec(vec![4], vals.clone()).unwrap());
        let sq = ops::mul(&mut tape, &x, &x).unwrap();
        let s = ops::sum_all(&mut tape, &sq);
        tape.backward(&s).unwrap();
        let g = tape.grad_of(&x).unwrap().unwrap();
        for (gi, xi) in g.iter().zip(&vals) {
            assert_close(*gi, 2.0 * xi, 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = ops::relu(&mut tape, &x);
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let s = ops::sum_all(&mut tape, &x);
        tape.backward(&s).unwrap();
        let err = tape.backward(&s).unwrap_err();
        assert!(matches!(err, TensorError::TapeConsumed));
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let c = ops::mul(&mut tape, &a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 8.0]);
        assert!(tape.is_empty());
        assert!(!c.is_tracked());
    }

    #[test]
    fn gradients_are_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let vals: Vec<f64> = (0..24).map(|i| (i as f64) * 0.37 - 4.0).collect();
            let x = tape.leaf(&Tensor::from_vec(vec![2, 3, 4], vals).unwrap());
            let y = ops::sigmoid(&mut tape, &x);
            let z = ops::mul(&mut tape, &y, &x).unwrap();
            let s = ops::sum_all(&mut tape, &z);
            tape.backward(&s).unwrap();
            tape.grad_of(&x).unwrap().unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn grad_is_none_for_unused_leaf() {
        let mut tape = Tape::new();
        let used = tape.leaf(&Tensor::scalar(1.5));
        let unused = tape.leaf(&Tensor::scalar(7.0));
        let s = ops::sum_all(&mut tape, &used);
        tape.backward(&s).unwrap();
        assert!(tape.grad_of(&unused).unwrap().is_none());
    }
}
