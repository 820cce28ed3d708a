//! Reverse-mode differentiation over an explicit, append-only tape.
//!
//! A graph is recorded by calling the op methods during a forward pass. Node
//! indices are assigned in execution order, so walking the tape backwards is
//! a valid reverse topological order. Parameters are not copied onto the tape;
//! ops hold [`ParamId`]s and the backward pass accumulates straight into the
//! [`ParamStore`] gradient buffers.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{FeatureMap, ParamId, ParamStore};

/// Handle of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
    },
    Crop {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    FullyConnected {
        input: Var,
        weight: ParamId,
        bias: ParamId,
    },
    Sigmoid {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Scale {
        input: Var,
        scale: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: FeatureMap,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &FeatureMap {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: FeatureMap, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// State of every non-smooth operation: one entry per ReLU input
    /// element (1 when positive) and per max-pool output (its argmax).
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn switch_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => pattern.extend(self.value(*input).data().iter().map(|&x| usize::from(x > 0.0))),
                Op::MaxPool { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    /// Records a constant input. Gradients still flow into it for inspection.
    pub fn input(&mut self, value: FeatureMap) -> Result<Var> {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, "input")
    }

    /// Copy of `v` that blocks gradient flow back into `v`'s graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.value(v).clone();
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        store: &ParamStore,
        input: Var,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), store.get(weight), store.get(bias), stride, pad)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d(self.value(input), k, stride)?;
        self.push(out, Op::MaxPool { input, argmax }, "maxpool2d")
    }

    pub fn bilinear_upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::bilinear_upsample2x(self.value(input))?;
        self.push(out, Op::Upsample2x { input }, "bilinear_upsample2x")
    }

    pub fn crop(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let x = self.value(input);
        if x.height() == height && x.width() == width {
            return Ok(input);
        }
        let out = kernels::crop(x, height, width)?;
        self.push(out, Op::Crop { input }, "crop")
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        self.push(out, Op::GlobalAvgPool { input }, "global_avg_pool")
    }

    pub fn fully_connected(&mut self, store: &ParamStore, input: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let out = kernels::fully_connected(self.value(input), store.get(weight), store.get(bias))?;
        self.push(out, Op::FullyConnected { input, weight, bias }, "fully_connected")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = kernels::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input }, "sigmoid")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = kernels::relu(self.value(input));
        self.push(out, Op::Relu { input }, "relu")
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let maps: Vec<&FeatureMap> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&maps)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            "concat_channels",
        )
    }

    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let out = kernels::channel_scale(self.value(input), self.value(scale))?;
        self.push(out, Op::Scale { input, scale }, "channel_scale")
    }

    pub fn scalar_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let out = kernels::scalar_scale(self.value(input), self.value(scale))?;
        self.push(out, Op::Scale { input, scale }, "scalar_scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add { a, b }, "add")
    }

    /// Backpropagates `d(sum(v))`.
    pub fn backward_sum(&mut self, v: Var, store: &mut ParamStore) -> Result<()> {
        let seed = vec![1.0; self.value(v).len()];
        self.backward(vec![(v, seed)], store)
    }

    /// Backpropagates from several seeded outputs at once. Parameter gradients
    /// are added to whatever the store already holds.
    pub fn backward(&mut self, seeds: Vec<(Var, Vec<f64>)>, store: &mut ParamStore) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            if seed.len() != self.value(v).len() {
                return Err(Error::shape("backward", "seed length differs from node size"));
            }
            accumulate(&mut grads[v.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        self.value(*input),
                        store.get(*weight),
                        store.get(*bias),
                        *stride,
                        *pad,
                        &g,
                    )?;
                    add_into(&mut store.get_mut(*weight).grad, &gw);
                    add_into(&mut store.get_mut(*bias).grad, &gb);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::MaxPool { input, argmax } => {
                    let gx = kernels::maxpool2d_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::Upsample2x { input } => {
                    let gx = kernels::bilinear_upsample2x_backward(self.value(*input).shape(), &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::Crop { input } => {
                    let [_, _, h, w] = node.value.shape();
                    let gx = kernels::crop_backward(self.value(*input).shape(), h, w, &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::GlobalAvgPool { input } => {
                    let gx = kernels::global_avg_pool_backward(self.value(*input).shape(), &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::FullyConnected { input, weight, bias } => {
                    let (gx, gw, gb) = kernels::fully_connected_backward(self.value(*input), store.get(*weight), &g);
                    add_into(&mut store.get_mut(*weight).grad, &gw);
                    add_into(&mut store.get_mut(*bias).grad, &gb);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::Sigmoid { input } => {
                    let gx = kernels::sigmoid_backward(&node.value, &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::Relu { input } => {
                    let gx = kernels::relu_backward(self.value(*input), &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                }
                Op::Concat { inputs } => {
                    let shapes: Vec<[usize; 4]> = inputs.iter().map(|&v| self.value(v).shape()).collect();
                    let parts = kernels::concat_channels_backward(&shapes, &g);
                    for (v, gx) in inputs.iter().zip(parts) {
                        accumulate(&mut grads[v.0], gx.into_data());
                    }
                }
                Op::Scale { input, scale } => {
                    let (gx, gs) = kernels::broadcast_scale_backward(self.value(*input), self.value(*scale), &g);
                    accumulate(&mut grads[input.0], gx.into_data());
                    accumulate(&mut grads[scale.0], gs.into_data());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => add_into(existing, &g),
        None => *slot = Some(g),
    }
}
