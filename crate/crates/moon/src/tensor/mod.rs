//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! Every differentiable computation in the model runs through [`Graph`] and
//! [`Tensor`]. A graph records one forward computation; [`backward`] walks it
//! in reverse, accumulating gradients additively into each tracked node.
//! Graphs are independent of each other, so separate samples can be evaluated
//! on separate graphs concurrently.

pub mod gradcheck;
pub mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} is out of range or empty for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: no recorded computation reaches this tensor")]
    NoGraph,
    #[error("{op}: tensors belong to different graphs")]
    CrossGraph { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Operations recorded on the graph. Parent links are node indices.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SliceAxis {
        a: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        n: usize,
        din: usize,
        dout: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        cin: usize,
        cout: usize,
        ksize: usize,
    },
    AdaptiveAvgPool3d {
        x: usize,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        channels: usize,
    },
    NearestInterp3d {
        x: usize,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        channels: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Ln {
        a: usize,
    },
    Standardize {
        a: usize,
        eps: f64,
        rows: usize,
        cols: usize,
        // cached per-column mean and population std of the input
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    FrobNorm {
        a: usize,
    },
    TraceGram {
        a: usize,
        b: usize,
    },
    Mean {
        a: usize,
    },
}

impl Op {
    /// Short name used in NaN diagnostics and gradcheck tables.
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::SliceAxis { .. } => "slice",
            Op::Linear { .. } => "linear",
            Op::Conv3d { .. } => "conv3d",
            Op::AdaptiveAvgPool3d { .. } => "adaptive_avg_pool3d",
            Op::NearestInterp3d { .. } => "nearest_interpolate3d",
            Op::Softmax { .. } => "softmax",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Ln { .. } => "ln",
            Op::Standardize { .. } => "standardize",
            Op::FrobNorm { .. } => "frobenius_norm",
            Op::TraceGram { .. } => "trace_of_gram",
            Op::Mean { .. } => "mean",
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

/// A recorded forward computation. Create one per forward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Rc<Graph> {
        Rc::new(Graph::default())
    }

    pub(crate) fn push(self: &Rc<Self>, node: Node) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert_eq!(node.shape.iter().product::<usize>(), node.data.len());
        nodes.push(node);
        Tensor {
            graph: Rc::clone(self),
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First node (in recording order) holding a non-finite value, if any.
    /// Used for NaN-abort diagnostics.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                return Some((i, n.op.name()));
            }
        }
        None
    }
}

/// Handle to one value in a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Rc<Graph>,
    id: usize,
}

impl Tensor {
    pub fn leaf(graph: &Rc<Graph>, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: shape {:?} does not match {} values",
            shape,
            data.len()
        );
        graph.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        })
    }

    pub fn constant(graph: &Rc<Graph>, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::leaf(graph, data, shape, false)
    }

    pub fn scalar(graph: &Rc<Graph>, v: f64) -> Tensor {
        Tensor::leaf(graph, vec![v], vec![1], false)
    }

    pub fn graph(&self) -> &Rc<Graph> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].data.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].data.clone()
    }

    /// Scalar value; panics if not a 1-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.data.len(), 1, "item: tensor has {} elements", n.data.len());
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    pub(crate) fn same_graph(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph, &other.graph) {
            Ok(())
        } else {
            Err(TensorError::CrossGraph { op })
        }
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients of every
/// `requires_grad` node reachable from `loss` accumulate into the nodes.
pub fn backward(loss: &Tensor) -> Result<()> {
    let shape = loss.shape();
    if shape.iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalar {
            op: "backward",
            shape,
        });
    }
    backward_seeded(&[(loss, vec![1.0])])
}

/// Reverse-mode sweep seeded with explicit output gradients. Used by the
/// trainer to split a batch loss across per-sample graphs.
pub fn backward_seeded(roots: &[(&Tensor, Vec<f64>)]) -> Result<()> {
    if roots.is_empty() {
        return Ok(());
    }
    let graph = Rc::clone(&roots[0].0.graph);
    for (t, seed) in roots {
        t.same_graph(roots[0].0, "backward")?;
        let n = t.numel();
        if seed.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: t.shape(),
                rhs: vec![seed.len()],
            });
        }
    }
    {
        let nodes = graph.nodes.borrow();
        if roots
            .iter()
            .all(|(t, _)| matches!(nodes[t.id].op, Op::Leaf))
        {
            return Err(TensorError::NoGraph);
        }
    }

    let mut nodes = graph.nodes.borrow_mut();
    let count = nodes.len();
    // Working gradient per node for this sweep.
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
    for (t, seed) in roots {
        accumulate(&mut grads[t.id], seed, seed.len());
    }
    // Mark nodes that can reach a root going backwards (i.e. roots' ancestors).
    for id in (0..count).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        ops::backprop_node(&mut nodes, id, &g, &mut grads);
        grads[id] = Some(g);
    }
    for id in 0..count {
        if nodes[id].requires_grad {
            if let Some(g) = &grads[id] {
                match &mut nodes[id].grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => nodes[id].grad = Some(g.clone()),
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64], len: usize) {
    match slot {
        Some(g) => {
            for (a, v) in g.iter_mut().zip(contrib) {
                *a += v;
            }
        }
        None => {
            debug_assert_eq!(contrib.len(), len);
            *slot = Some(contrib.to_vec());
        }
    }
}
