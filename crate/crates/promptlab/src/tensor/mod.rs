//! Dense f64 arrays with tape-based reverse-mode differentiation.
//!
//! Every forward operation pushes a node onto a [`Tape`]; [`Var::backward`]
//! walks the tape in reverse and accumulates gradients for every node,
//! leaves included. Tapes are rebuilt per forward pass (define-by-run) and
//! are strictly single-threaded; independent tapes may run on different
//! threads.
//!
//! All math is 64-bit. Divisions by norms add `EPS_NORM` to the denominator.

mod check;
mod ops;

pub use ops::concat_rows;

pub use check::finite_diff_check;

use std::cell::RefCell;
use thiserror::Error;

/// Guard added to every norm denominator.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate vector: norm is {0:.3e}, too close to zero")]
    DegenerateVector(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// A plain tensor: row-major values plus a shape. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Data {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        Data { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Data { shape, values: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Data { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Data { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Data::new(vec![rows, cols], values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row/column count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Operation kinds recorded on the tape. Input node ids live in the variant.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowVec(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SoftmaxRows { input: usize, temp: f64 },
    Log(usize),
    Exp(usize),
    Tanh(usize),
    Sqrt(usize),
    Abs(usize),
    Gelu(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    MeanAll(usize),
    ConcatRows(Vec<usize>),
    SliceRows { input: usize, start: usize, len: usize },
    SliceCols { input: usize, start: usize, len: usize },
    LayerNormRows { input: usize, gain: usize, bias: usize },
    CosSim(usize, usize),
    CosSimRows(usize, usize),
    GatherRows { input: usize, ids: Vec<usize> },
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Data,
}

/// The computation record. Nodes are topologically ordered by construction,
/// so a single reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register a leaf (a trainable parameter or an input).
    pub fn leaf(&self, value: Data) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub(crate) fn push(&self, op: Op, value: Data) -> Var<'_> {
        debug_assert!(value.all_finite(), "non-finite value out of {:?}", op);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn value_of(&self, id: usize) -> Data {
        self.nodes.borrow()[id].value.clone()
    }
}

/// Handle to a tape node. Cheap to copy; all arithmetic goes through it.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Data {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    /// Extract the single value of a scalar node.
    pub fn scalar_value(&self) -> f64 {
        let d = self.value();
        assert_eq!(d.len(), 1, "scalar_value on non-scalar node");
        d.values[0]
    }
}

/// Gradients for every node of a tape, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Data>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node. Zero-filled if
    /// the node does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Data {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Data::zeros(var.value().shape),
        }
    }

    pub fn get_by_id(&self, id: usize, shape: &[usize]) -> Data {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Data::zeros(shape.to_vec()),
        }
    }
}

impl<'t> Var<'t> {
    /// Reverse-accumulate gradients from this scalar loss node.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return Err(TensorError::InvalidParameter(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Data>> = vec![None; nodes.len()];
        grads[self.id] = Some(Data {
            shape: nodes[self.id].value.shape.clone(),
            values: vec![1.0],
        });

        for id in (0..=self.id).rev() {
            let Some(out_grad) = grads[id].take() else { continue };
            ops::accumulate(&nodes, id, &out_grad, &mut grads);
            grads[id] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn add_into(slot: &mut Option<Data>, shape: &[usize], contrib: &[f64]) {
    match slot {
        Some(d) => {
            for (a, b) in d.values.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Data::new(shape.to_vec(), contrib.to_vec()));
        }
    }
}
