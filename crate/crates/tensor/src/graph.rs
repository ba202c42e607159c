//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and adds the
//! resulting gradients to every tracked leaf; gradients accumulate across
//! calls until [`Graph::zero_grad`].

use crate::conv::{self, ConvGeometry, ConvParams};
use crate::error::{Result, TensorError};
use crate::ops::{self, Mode, RunningStats};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf {
        param: Option<usize>,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
        patches: conv::PatchCache,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    Resize {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        classes: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, kept for tracked leaves only.
    grad: Option<Tensor>,
}

/// Batch-norm statistics access for one forward call.
pub enum BnStats<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
    relu_pattern: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are inserted as constants; nothing is cached
    /// for a backward pass.
    pub fn inference() -> Self {
        Self { no_grad: true, ..Self::default() }
    }

    /// Hash of the on/off state of every ReLU unit evaluated so far. Two
    /// forward passes with equal hashes took the same linear piece.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Tracked leaf whose gradient can be read back with [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        let tracked = !self.no_grad;
        self.push(value, Op::Leaf { param: None }, tracked)
    }

    /// Tracked leaf holding a copy of parameter `index` of `store`.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        let p = &store.params()[index];
        let tracked = !self.no_grad && p.trainable;
        self.push(p.value.clone(), Op::Leaf { param: Some(index) }, tracked)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.nodes.swap_remove(id.0).value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Accumulated gradients of parameter leaves as `(param index, grad)`.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Leaf { param: Some(i) }, Some(g)) => Some((*i, g)),
            _ => None,
        })
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, p: &ConvParams) -> Result<NodeId> {
        let (xv, wv) = (&self.node(x)?.value, &self.node(w)?.value);
        let bv = match b {
            Some(b) => Some(&self.node(b)?.value),
            None => None,
        };
        let keep = self.tracked(w);
        let (y, geom, patches) = conv::forward(xv, wv, bv, p, keep)?;
        let y = y.ensure_finite("conv2d")?;
        let rg = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(y, Op::Conv { x, w, b, geom, patches }, rg))
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, stats: BnStats<'_>) -> Result<NodeId> {
        let (xv, gv, bv) = (&self.node(x)?.value, &self.node(gamma)?.value, &self.node(beta)?.value);
        let (out, mode) = match stats {
            BnStats::Train(s) => (ops::bn_forward_train(xv, gv, bv, s)?, Mode::Train),
            BnStats::Eval(s) => (ops::bn_forward_eval(xv, gv, bv, s)?, Mode::Eval),
        };
        let y = out.y.ensure_finite("batch_norm")?;
        let rg = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let (xhat, inv_std) = if rg { (out.xhat, out.inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let pattern = xv.data().iter().fold(self.relu_pattern, |h, &v| {
            (h ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3)
        });
        let y = ops::relu(xv);
        self.relu_pattern = pattern;
        let rg = self.tracked(x);
        Ok(self.push(y, Op::Relu { x }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::add(&self.node(a)?.value, &self.node(b)?.value)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::mul(&self.node(a)?.value, &self.node(b)?.value)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let y = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * factor).collect())?.ensure_finite("scale")?;
        let rg = self.tracked(x);
        Ok(self.push(y, Op::Scale { x, factor }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.node(x)?.value.sum()).ensure_finite("sum")?;
        let rg = self.tracked(x);
        Ok(self.push(y, Op::Sum { x }, rg))
    }

    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let y = ops::bilinear_resize(&self.node(x)?.value, out_h, out_w)?;
        let rg = self.tracked(x);
        Ok(self.push(y, Op::Resize { x }, rg))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::softmax_channels(&self.node(x)?.value)?;
        let rg = self.tracked(x);
        Ok(self.push(y, Op::Softmax { x }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [N, C, H, W]` against integer
    /// class labels `[N, H, W]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        let classes = ops::class_indices(lv, labels)?;
        let (loss, probs) = ops::cross_entropy_forward(lv, &classes)?;
        let rg = self.tracked(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, classes, probs }, rg))
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                // A leaf's gradient is final once reached: every consumer
                // has a larger index.
                let g = g.ensure_finite("backward")?;
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[i];
            let mut send = |id: NodeId, t: Tensor| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::Conv { x, w, b, geom, patches } => {
                    let need = (self.tracked(*x), self.tracked(*w), b.is_some_and(|b| self.tracked(b)));
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let grads_c = conv::backward(geom, xv, wv, &g, patches.as_deref(), need)?;
                    if let Some(dx) = grads_c.dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = grads_c.dw {
                        send(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, grads_c.db) {
                        send(*b, db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } => {
                    let gv = &nodes[gamma.0].value;
                    let (dx, dgamma, dbeta) = ops::bn_backward(&g, xhat, inv_std, gv, *mode)?;
                    send(*x, dx);
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                Op::Relu { x } => {
                    let xv = &nodes[x.0].value;
                    let d = g.data().iter().zip(xv.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    send(*x, Tensor::new(xv.shape(), d)?);
                }
                Op::Add { a, b } => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    send(*a, ops::mul(&g, bv)?);
                    send(*b, ops::mul(&g, av)?);
                }
                Op::Scale { x, factor } => {
                    let d = g.data().iter().map(|v| v * factor).collect();
                    send(*x, Tensor::new(g.shape(), d)?);
                }
                Op::Sum { x } => {
                    let upstream = g.item()?;
                    send(*x, Tensor::full(nodes[x.0].value.shape(), upstream));
                }
                Op::Resize { x } => {
                    let [_, _, h, w] = nodes[x.0].value.dims4()?;
                    send(*x, ops::bilinear_resize_backward(&g, h, w)?);
                }
                Op::Softmax { x } => {
                    send(*x, ops::softmax_backward(&node.value, &g)?);
                }
                Op::CrossEntropy { logits, classes, probs } => {
                    send(*logits, ops::cross_entropy_backward(probs, classes, g.item()?)?);
                }
            }
        }
        Ok(())
    }
}
