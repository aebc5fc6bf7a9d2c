//! Reverse-mode differentiation over the handful of operations the network
//! is built from.

use super::conv::{conv2d, conv2d_input_grad, conv2d_weight_grad, ConvShape};
use super::tensor::Tensor;
use crate::edges::{sobel_xy, sobel_xy_adjoint};
use crate::resample::{upsample2_plane, upsample2_plane_adjoint};

/// Read access to convolution layers by index.
pub trait Layers {
    fn shape(&self, layer: usize) -> ConvShape;
    fn weight(&self, layer: usize) -> &[f64];
    fn bias(&self, layer: usize) -> &[f64];
}

/// Gradient buffers for one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros(shape: ConvShape) -> Self {
        Self {
            weight: vec![0.0; shape.weight_len()],
            bias: vec![0.0; shape.cout],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { input: NodeId, layer: usize, relu: bool },
    ZeroStuff { input: NodeId },
    Concat { inputs: Vec<NodeId> },
    Add { lhs: NodeId, rhs: NodeId },
    Upsample2 { input: NodeId },
    SobelMagnitude { input: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that it can be replayed backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant input. Its gradient is reported by [`Tape::backward`] only
    /// when `track` is set.
    pub fn leaf(&mut self, value: Tensor, track: bool) -> NodeId {
        self.push(value, Op::Leaf, track)
    }

    pub fn conv(&mut self, params: &impl Layers, input: NodeId, layer: usize, relu: bool) -> NodeId {
        let out = conv2d(
            self.value(input),
            params.shape(layer),
            params.weight(layer),
            params.bias(layer),
            relu,
        );
        self.push(out, Op::Conv { input, layer, relu }, true)
    }

    /// Doubles the grid, placing each input at even coordinates and zeros
    /// elsewhere.
    pub fn zero_stuff(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (h, w) = (x.height, x.width);
        let mut out = Tensor::zeros(x.channels, 2 * h, 2 * w);
        for c in 0..x.channels {
            let src = x.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for i in 0..w {
                    dst[2 * y * 2 * w + 2 * i] = src[y * w + i];
                }
            }
        }
        let needs = self.needs(input);
        self.push(out, Op::ZeroStuff { input }, needs)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        let parts: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
        let out = Tensor::concat(&parts);
        let needs = inputs.iter().any(|id| self.needs(*id));
        self.push(out, Op::Concat { inputs: inputs.to_vec() }, needs)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let mut out = self.value(lhs).clone();
        out.add_assign(self.value(rhs));
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(out, Op::Add { lhs, rhs }, needs)
    }

    /// Per-channel bilinear x2 with half-pixel alignment.
    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (h, w) = (x.height, x.width);
        let mut out = Tensor::zeros(x.channels, 2 * h, 2 * w);
        for c in 0..x.channels {
            upsample2_plane(x.plane(c), h, w, out.plane_mut(c));
        }
        let needs = self.needs(input);
        self.push(out, Op::Upsample2 { input }, needs)
    }

    /// Per-channel Sobel gradient magnitude with replicated borders.
    pub fn sobel_magnitude(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (h, w) = (x.height, x.width);
        let mut out = Tensor::zeros(x.channels, h, w);
        for c in 0..x.channels {
            let (gx, gy) = sobel_xy(x.plane(c), h, w);
            for (o, (a, b)) in out.plane_mut(c).iter_mut().zip(gx.iter().zip(&gy)) {
                *o = a.hypot(*b);
            }
        }
        let needs = self.needs(input);
        self.push(out, Op::SobelMagnitude { input }, needs)
    }

    /// Back-propagates the given output gradients. Parameter gradients are
    /// accumulated into `grads` (indexed by layer); the returned list holds
    /// the gradient of every tracked leaf, in creation order.
    pub fn backward(
        &self,
        params: &impl Layers,
        seeds: Vec<(NodeId, Tensor)>,
        grads: &mut [LayerGrad],
    ) -> Vec<(NodeId, Tensor)> {
        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut pending[id.0], g);
        }
        let mut leaves = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let Some(mut g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves.push((NodeId(idx), g)),
                Op::Conv { input, layer, relu } => {
                    if *relu {
                        for (gv, v) in g.data.iter_mut().zip(&node.value.data) {
                            if *v <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    let shape = params.shape(*layer);
                    let lg = &mut grads[*layer];
                    conv2d_weight_grad(self.value(*input), &g, shape, &mut lg.weight, &mut lg.bias);
                    if self.needs(*input) {
                        let gi = conv2d_input_grad(&g, shape, params.weight(*layer));
                        accumulate(&mut pending[input.0], gi);
                    }
                }
                Op::ZeroStuff { input } => {
                    let (h, w) = (g.height / 2, g.width / 2);
                    let mut gi = Tensor::zeros(g.channels, h, w);
                    for c in 0..g.channels {
                        let src = g.plane(c);
                        let dst = gi.plane_mut(c);
                        for y in 0..h {
                            for x in 0..w {
                                dst[y * w + x] = src[2 * y * 2 * w + 2 * x];
                            }
                        }
                    }
                    accumulate(&mut pending[input.0], gi);
                }
                Op::Concat { inputs } => {
                    let plane = g.plane_len();
                    let mut offset = 0;
                    for id in inputs {
                        let c = self.value(*id).channels;
                        if self.needs(*id) {
                            let part = g.data[offset * plane..(offset + c) * plane].to_vec();
                            accumulate(&mut pending[id.0], Tensor::from_vec(c, g.height, g.width, part));
                        }
                        offset += c;
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.needs(*lhs) && self.needs(*rhs) {
                        accumulate(&mut pending[lhs.0], g.clone());
                        accumulate(&mut pending[rhs.0], g);
                    } else if self.needs(*lhs) {
                        accumulate(&mut pending[lhs.0], g);
                    } else {
                        accumulate(&mut pending[rhs.0], g);
                    }
                }
                Op::Upsample2 { input } => {
                    let (h, w) = (g.height / 2, g.width / 2);
                    let mut gi = Tensor::zeros(g.channels, h, w);
                    for c in 0..g.channels {
                        upsample2_plane_adjoint(g.plane(c), h, w, gi.plane_mut(c));
                    }
                    accumulate(&mut pending[input.0], gi);
                }
                Op::SobelMagnitude { input } => {
                    let x = self.value(*input);
                    let (h, w) = (x.height, x.width);
                    let mut gi = Tensor::zeros(x.channels, h, w);
                    for c in 0..x.channels {
                        let (mut gx, mut gy) = sobel_xy(x.plane(c), h, w);
                        for ((a, b), (m, gm)) in gx
                            .iter_mut()
                            .zip(gy.iter_mut())
                            .zip(node.value.plane(c).iter().zip(g.plane(c)))
                        {
                            if *m > 0.0 {
                                *a *= gm / m;
                                *b *= gm / m;
                            } else {
                                *a = 0.0;
                                *b = 0.0;
                            }
                        }
                        sobel_xy_adjoint(&gx, &gy, h, w, gi.plane_mut(c));
                    }
                    accumulate(&mut pending[input.0], gi);
                }
            }
        }
        leaves.reverse();
        leaves
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
