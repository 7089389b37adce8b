//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Operations append [`Node`]s to a [`Tape`]; each node stores the op that
//! produced it, its forward values, and (after [`Tape::backward`]) the
//! gradient of the loss with respect to it. Node ids are indices into the
//! arena, so insertion order is a topological order and the backward pass is
//! a single reverse sweep — no graph search, no reference counting.
//!
//! The op set is deliberately small: affine layers, ReLU, L2 normalization,
//! dot products, scalar arithmetic, stacking scalars into a vector,
//! numerically-safe log-sum-exp, and a mean over scalars. Every contrastive
//! objective in this crate is composed from these.
//!
//! Gradient flow is controlled per leaf: nodes with `requires_grad = false`
//! (key embeddings, queue snapshots, raw inputs) never receive or propagate
//! gradient, which is how "gradients flow only through the query path" is
//! enforced structurally rather than by convention.

use crate::error::{Error, Result};
use crate::tensor::{self, NORM_EPSILON};

/// Handle to a node on the tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// weights [out, in] * input [in] + bias [out]
    Affine {
        weights: TensorId,
        bias: TensorId,
        input: TensorId,
    },
    Relu {
        input: TensorId,
    },
    /// x / ||x||; the backward pass recomputes the norm from the input.
    Normalize {
        input: TensorId,
    },
    Dot {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    /// Scalars gathered into a vector; input i maps to component i.
    Stack {
        inputs: Vec<TensorId>,
    },
    /// Vector -> scalar log(sum exp), max-subtracted.
    LogSumExp {
        input: TensorId,
    },
    /// Mean of scalar inputs.
    Mean {
        inputs: Vec<TensorId>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation record. Build the forward pass through the
/// methods, then call [`Tape::backward`] on a scalar loss.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    /// Forward values of a node.
    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    /// Forward value of a scalar node. Panics if the node is not scalar
    /// (internal misuse, not a data error).
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let n = self.node(id);
        assert!(n.values.len() == 1, "scalar_value on shape {:?}", n.shape);
        n.values[0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    /// Gradient of the last backward pass. `None` for nodes outside the
    /// differentiated subgraph (in particular all `requires_grad = false`
    /// nodes, whose gradient is identically zero).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    // ---- graph construction -------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tape::leaf",
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape, values, requires_grad))
    }

    pub fn scalar_leaf(&mut self, value: f64) -> TensorId {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    pub fn vector_leaf(&mut self, values: &[f64], requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, vec![values.len()], values.to_vec(), requires_grad)
    }

    /// W x + b. `weights` must be [out, in], `bias` [out], `input` [in].
    pub fn affine(&mut self, weights: TensorId, bias: TensorId, input: TensorId) -> Result<TensorId> {
        let (ws, bs, xs) = (
            self.node(weights).shape.clone(),
            self.node(bias).shape.clone(),
            self.node(input).shape.clone(),
        );
        let ok = ws.len() == 2 && bs.len() == 1 && xs.len() == 1 && ws[0] == bs[0] && ws[1] == xs[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "Tape::affine",
                expected: "weights [out, in], bias [out], input [in]".into(),
                got: format!("weights {ws:?}, bias {bs:?}, input {xs:?}"),
            });
        }
        let mut out = Vec::new();
        tensor::affine_into(
            &self.node(weights).values,
            &self.node(bias).values,
            &self.node(input).values,
            &mut out,
        );
        let rg = self.any_requires_grad(&[weights, bias, input]);
        Ok(self.push(Op::Affine { weights, bias, input }, vec![ws[0]], out, rg))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let mut out = Vec::new();
        tensor::relu_into(&self.node(input).values, &mut out);
        let shape = self.node(input).shape.clone();
        let rg = self.node(input).requires_grad;
        self.push(Op::Relu { input }, shape, out, rg)
    }

    /// x / ||x||; errors on vectors with norm below the shared epsilon.
    pub fn l2_normalize(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.node(input).shape.clone();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "Tape::l2_normalize",
                expected: "a vector".into(),
                got: format!("{shape:?}"),
            });
        }
        let out = tensor::l2_normalize(&self.node(input).values)?;
        let rg = self.node(input).requires_grad;
        Ok(self.push(Op::Normalize { input }, shape, out, rg))
    }

    /// Scalar product of two equal-length vectors.
    pub fn dot(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (ls, rs) = (self.node(lhs).shape.clone(), self.node(rhs).shape.clone());
        if ls.len() != 1 || ls != rs {
            return Err(Error::ShapeMismatch {
                context: "Tape::dot",
                expected: "two vectors of equal length".into(),
                got: format!("{ls:?} and {rs:?}"),
            });
        }
        let v = tensor::dot(&self.node(lhs).values, &self.node(rhs).values);
        let rg = self.any_requires_grad(&[lhs, rhs]);
        Ok(self.push(Op::Dot { lhs, rhs }, vec![], vec![v], rg))
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let n = self.node(input);
        let values = n.values.iter().map(|v| v * factor).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(Op::Scale { input, factor }, shape, values, rg)
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.elementwise(lhs, rhs, "Tape::add", true)
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.elementwise(lhs, rhs, "Tape::sub", false)
    }

    fn elementwise(&mut self, lhs: TensorId, rhs: TensorId, context: &'static str, add: bool) -> Result<TensorId> {
        let (ls, rs) = (self.node(lhs).shape.clone(), self.node(rhs).shape.clone());
        if ls != rs {
            return Err(Error::ShapeMismatch {
                context,
                expected: "matching shapes".into(),
                got: format!("{ls:?} and {rs:?}"),
            });
        }
        let values = self
            .node(lhs)
            .values
            .iter()
            .zip(&self.node(rhs).values)
            .map(|(a, b)| if add { a + b } else { a - b })
            .collect();
        let rg = self.any_requires_grad(&[lhs, rhs]);
        let op = if add { Op::Add { lhs, rhs } } else { Op::Sub { lhs, rhs } };
        Ok(self.push(op, ls, values, rg))
    }

    /// Gathers scalar nodes into a vector of length `inputs.len()`.
    pub fn stack(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("Tape::stack requires at least one input"));
        }
        let mut values = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let n = self.node(id);
            if n.values.len() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "Tape::stack",
                    expected: "scalar inputs".into(),
                    got: format!("{:?}", n.shape),
                });
            }
            values.push(n.values[0]);
        }
        let rg = self.any_requires_grad(inputs);
        Ok(self.push(
            Op::Stack { inputs: inputs.to_vec() },
            vec![values.len()],
            values,
            rg,
        ))
    }

    /// log(sum_i exp(x_i)) of a vector, max-subtracted.
    pub fn log_sum_exp(&mut self, input: TensorId) -> Result<TensorId> {
        let n = self.node(input);
        if n.shape.len() != 1 || n.values.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "Tape::log_sum_exp",
                expected: "a non-empty vector".into(),
                got: format!("{:?}", n.shape),
            });
        }
        let v = tensor::log_sum_exp(&n.values);
        let rg = n.requires_grad;
        Ok(self.push(Op::LogSumExp { input }, vec![], vec![v], rg))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("Tape::mean requires at least one input"));
        }
        let mut sum = 0.0;
        for &id in inputs {
            let n = self.node(id);
            if n.values.len() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "Tape::mean",
                    expected: "scalar inputs".into(),
                    got: format!("{:?}", n.shape),
                });
            }
            sum += n.values[0];
        }
        let rg = self.any_requires_grad(inputs);
        Ok(self.push(
            Op::Mean { inputs: inputs.to_vec() },
            vec![],
            vec![sum / inputs.len() as f64],
            rg,
        ))
    }

    fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.node(id).requires_grad)
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates d`loss`/d`node` into every `requires_grad` node reachable
    /// from `loss`; unreachable `requires_grad` nodes get explicit zero
    /// gradients. `loss` must be scalar. Clears any previous gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).values.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "Tape::backward",
                expected: "a scalar loss".into(),
                got: format!("{:?}", self.node(loss).shape),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let out_grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(out_grad);
                continue;
            }
            // Borrow the op by clone (ids and a possible factor; cheap) so we
            // can index `grads` and node values freely.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Affine { weights, bias, input } => {
                    let x = &self.nodes[input.0].values;
                    let w = &self.nodes[weights.0].values;
                    let cols = x.len();
                    if self.nodes[weights.0].requires_grad {
                        let g = slot(&mut grads, weights.0, w.len());
                        for (r, &go) in out_grad.iter().enumerate() {
                            for (c, &xc) in x.iter().enumerate() {
                                g[r * cols + c] += go * xc;
                            }
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let g = slot(&mut grads, bias.0, out_grad.len());
                        for (r, &go) in out_grad.iter().enumerate() {
                            g[r] += go;
                        }
                    }
                    if self.nodes[input.0].requires_grad {
                        let g = slot(&mut grads, input.0, cols);
                        for (r, &go) in out_grad.iter().enumerate() {
                            for c in 0..cols {
                                g[c] += go * w[r * cols + c];
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    if self.nodes[input.0].requires_grad {
                        let x: Vec<f64> = self.nodes[input.0].values.clone();
                        let g = slot(&mut grads, input.0, x.len());
                        for (i, &xi) in x.iter().enumerate() {
                            if xi > 0.0 {
                                g[i] += out_grad[i];
                            }
                        }
                    }
                }
                Op::Normalize { input } => {
                    if self.nodes[input.0].requires_grad {
                        // y = x/n; dL/dx = (g - y (y . g)) / n.
                        let y: Vec<f64> = self.nodes[idx].values.clone();
                        let n = tensor::norm(&self.nodes[input.0].values);
                        debug_assert!(n >= NORM_EPSILON);
                        let y_dot_g = tensor::dot(&y, &out_grad);
                        let g = slot(&mut grads, input.0, y.len());
                        for i in 0..y.len() {
                            g[i] += (out_grad[i] - y[i] * y_dot_g) / n;
                        }
                    }
                }
                Op::Dot { lhs, rhs } => {
                    let go = out_grad[0];
                    if self.nodes[lhs.0].requires_grad {
                        let rv: Vec<f64> = self.nodes[rhs.0].values.clone();
                        let g = slot(&mut grads, lhs.0, rv.len());
                        for (gi, &ri) in g.iter_mut().zip(&rv) {
                            *gi += go * ri;
                        }
                    }
                    if self.nodes[rhs.0].requires_grad {
                        let lv: Vec<f64> = self.nodes[lhs.0].values.clone();
                        let g = slot(&mut grads, rhs.0, lv.len());
                        for (gi, &li) in g.iter_mut().zip(&lv) {
                            *gi += go * li;
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if self.nodes[input.0].requires_grad {
                        let g = slot(&mut grads, input.0, out_grad.len());
                        for (gi, &go) in g.iter_mut().zip(&out_grad) {
                            *gi += factor * go;
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    for id in [lhs, rhs] {
                        if self.nodes[id.0].requires_grad {
                            let g = slot(&mut grads, id.0, out_grad.len());
                            for (gi, &go) in g.iter_mut().zip(&out_grad) {
                                *gi += go;
                            }
                        }
                    }
                }
                Op::Sub { lhs, rhs } => {
                    if self.nodes[lhs.0].requires_grad {
                        let g = slot(&mut grads, lhs.0, out_grad.len());
                        for (gi, &go) in g.iter_mut().zip(&out_grad) {
                            *gi += go;
                        }
                    }
                    if self.nodes[rhs.0].requires_grad {
                        let g = slot(&mut grads, rhs.0, out_grad.len());
                        for (gi, &go) in g.iter_mut().zip(&out_grad) {
                            *gi -= go;
                        }
                    }
                }
                Op::Stack { inputs } => {
                    for (i, id) in inputs.iter().enumerate() {
                        if self.nodes[id.0].requires_grad {
                            slot(&mut grads, id.0, 1)[0] += out_grad[i];
                        }
                    }
                }
                Op::LogSumExp { input } => {
                    if self.nodes[input.0].requires_grad {
                        // d lse / d x_i = softmax(x)_i.
                        let x: Vec<f64> = self.nodes[input.0].values.clone();
                        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        let go = out_grad[0];
                        let g = slot(&mut grads, input.0, x.len());
                        for (gi, &e) in g.iter_mut().zip(&exps) {
                            *gi += go * e / z;
                        }
                    }
                }
                Op::Mean { inputs } => {
                    let share = out_grad[0] / inputs.len() as f64;
                    for id in inputs {
                        if self.nodes[id.0].requires_grad {
                            slot(&mut grads, id.0, 1)[0] += share;
                        }
                    }
                }
            }
            grads[idx] = Some(out_grad);
        }

        // Install results: reachable nodes keep their accumulated gradient,
        // requires_grad nodes the loss never touched get explicit zeros.
        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(grad.unwrap_or_else(|| vec![0.0; node.values.len()]))
            } else {
                None
            };
        }
        Ok(())
    }
}

/// Gets the gradient accumulator for node `idx`, zero-initialized on first use.
fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}
