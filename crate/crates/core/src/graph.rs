//! Reverse-mode differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for every parameter of the [`ParamStore`] the graph
//! was built over. Graphs built with [`Graph::inference`] keep no
//! backward caches and cannot be differentiated.

use std::collections::HashMap;

use crate::params::{Conv2d, ParamId, ParamStore};
use crate::rsr::kernels;
use crate::tensor::{self, ConvCache, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cache: Option<ConvCache>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Bilinear { x: Var, factor: usize },
    ConvexUp { mask: Var, logits: Var, factor: usize, probs: Vec<f32> },
    MaskedMean { x: Var, selected: Vec<bool>, count: usize },
    BoxSum { x: Var, radius: usize },
    Cosine { v: Var, a: Var },
    Loss { inputs: Vec<Var>, grads: Vec<Vec<f32>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            training: true,
        }
    }

    pub fn inference(store: &'p ParamStore) -> Self {
        Graph {
            training: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.training,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn conv(&mut self, layer: &Conv2d, x: Var) -> Var {
        let w = self.param(layer.weight);
        let b = self.param(layer.bias);
        let (out, cache) = tensor::conv2d_forward(
            self.value(x),
            self.value(w),
            Some(self.value(b)),
            layer.stride,
            layer.pad,
        );
        let cache = self.training.then_some(cache);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride: layer.stride,
                pad: layer.pad,
                cache,
            },
            true,
        )
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Channel concatenation of `[c_i, h, w]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let t = self.value(p);
            let (pc, ph, pw) = t.chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            data.extend_from_slice(t.data());
            c += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&[c, h, w], data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let out = tensor::upsample_bilinear(self.value(x), factor);
        let rg = self.rg(x);
        self.push(out, Op::Bilinear { x, factor }, rg)
    }

    /// Convex upsampling of a `[1, h, w]` mask by `factor`, with per-sub-pixel
    /// softmax over `logits` of shape `[factor²·9, h, w]`.
    pub fn convex_upsample(&mut self, mask: Var, logits: Var, factor: usize) -> Var {
        let probs = kernels::softmax9(self.value(logits), factor);
        let out = kernels::convex_upsample(self.value(mask), &probs, factor);
        let rg = self.rg(mask) || self.rg(logits);
        self.push(
            out,
            Op::ConvexUp {
                mask,
                logits,
                factor,
                probs: probs.into_data(),
            },
            rg,
        )
    }

    /// Mean of `x` over the pixels where `selected` is true (all pixels if
    /// none are). Gradients reach `x` only.
    pub fn masked_mean(&mut self, x: Var, selected: Vec<bool>) -> Var {
        let (out, count) = kernels::masked_mean(self.value(x), &selected);
        let selected = if count == selected.len() || selected.iter().all(|s| !s) {
            vec![true; selected.len()]
        } else {
            selected
        };
        let rg = self.rg(x);
        self.push(out, Op::MaskedMean { x, selected, count }, rg)
    }

    pub fn box_sum(&mut self, x: Var, radius: usize) -> Var {
        let out = kernels::box_sum(self.value(x), radius);
        let rg = self.rg(x);
        self.push(out, Op::BoxSum { x, radius }, rg)
    }

    /// Per-pixel cosine similarity between the `[C, 1, 1]` vector `v` and
    /// the `[C, h, w]` map `a`.
    pub fn cosine(&mut self, v: Var, a: Var) -> Var {
        let out = kernels::cosine_map(self.value(v).data(), self.value(a));
        let rg = self.rg(v) || self.rg(a);
        self.push(out, Op::Cosine { v, a }, rg)
    }

    /// Scalar loss node whose gradient with respect to each input was
    /// computed outside the tape.
    pub fn external_loss(&mut self, value: f64, inputs: Vec<Var>, grads: Vec<Vec<f32>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).numel(), g.len());
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Tensor::scalar(value as f32), Op::Loss { inputs, grads }, rg)
    }

    /// Gradients of the scalar `root` with respect to every parameter of
    /// the store, in store order.
    pub fn backward(&self, root: Var) -> Vec<Tensor> {
        assert!(self.training, "backward on an inference graph");
        assert_eq!(self.value(root).numel(), 1, "backward from a non-scalar");
        let mut param_grads = self.store.zeros_like();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads[id.0].add_assign(&g),
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cache,
                } => {
                    let cache = cache.as_ref().expect("training graph keeps conv caches");
                    let weight = self.value(*w);
                    let mut dw = Tensor::zeros(weight.shape());
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    let dx = tensor::conv2d_backward(
                        self.value(*x),
                        weight,
                        cache,
                        *stride,
                        *pad,
                        &g,
                        &mut dw,
                        Some(&mut db),
                        self.rg(*x),
                    );
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, g.map(|v| -v));
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = zip(&g, vb, |gi, y| gi * y);
                    let db = zip(&g, va, |gi, x| gi * x);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    self.accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Sigmoid(x) => {
                    let dx = zip(&g, &node.value, |gi, y| gi * y * (1.0 - y));
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = zip(&g, &node.value, |gi, y| gi * (1.0 - y * y));
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = zip(&g, &node.value, |gi, y| if y > 0.0 { gi } else { 0.0 });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let n: usize = shape.iter().product();
                        let part = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec());
                        offset += n;
                        self.accumulate(&mut grads, p, part);
                    }
                }
                Op::Bilinear { x, factor } => {
                    let (_, h, w) = self.value(*x).chw();
                    let dx = tensor::upsample_bilinear_backward(&g, h, w, *factor);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::ConvexUp {
                    mask,
                    logits,
                    factor,
                    probs,
                } => {
                    let (dmask, dlogits) =
                        kernels::convex_upsample_backward(self.value(*mask), probs, *factor, &g);
                    self.accumulate(&mut grads, *mask, dmask);
                    self.accumulate(&mut grads, *logits, dlogits);
                }
                Op::MaskedMean { x, selected, count } => {
                    let dx = kernels::masked_mean_backward(self.value(*x).shape(), selected, *count, &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::BoxSum { x, radius } => {
                    self.accumulate(&mut grads, *x, kernels::box_sum(&g, *radius));
                }
                Op::Cosine { v, a } => {
                    let (dv, da) = kernels::cosine_map_backward(self.value(*v), self.value(*a), &g);
                    self.accumulate(&mut grads, *v, dv);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Loss { inputs, grads: lg } => {
                    let up = g.data()[0];
                    for (v, dv) in inputs.iter().zip(lg) {
                        let shape = self.value(*v).shape().to_vec();
                        let t = Tensor::from_vec(&shape, dv.iter().map(|x| x * up).collect());
                        self.accumulate(&mut grads, *v, t);
                    }
                }
            }
        }
        param_grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
