//! Named parameter storage, initialization and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered map from dotted parameter names (`encoder.stem.weight`, ...) to
/// tensors. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; layer names are fixed by the model code.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of all parameters under `prefix.`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        let dotted = format!("{prefix}.");
        self.iter()
            .filter(|(n, _)| n.starts_with(&dotted))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// A 3×3 or 1×1 convolution registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

/// Shape record of one convolution, used for FLOP estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Applications per forward pass (K for per-iteration layers).
    pub uses: usize,
}

impl ConvSpec {
    pub fn macs(&self) -> u64 {
        (self.c_in * self.c_out * self.kernel * self.kernel * self.out_h * self.out_w * self.uses) as u64
    }
}

/// Registers layers with Kaiming-uniform fan-in initialization and zero
/// biases, and records their shapes.
pub struct ParamBuilder<'a> {
    pub store: ParamStore,
    pub specs: Vec<ConvSpec>,
    rng: &'a mut Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut Rng) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            specs: Vec::new(),
            rng,
        }
    }

    /// `out_hw` is the spatial size the layer produces; `uses` is the number
    /// of applications per forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        out_hw: (usize, usize),
        uses: usize,
    ) -> Conv2d {
        let fan_in = c_in * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = c_out * fan_in;
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let weight = self
            .store
            .add(format!("{name}.weight"), Tensor::from_vec(&[c_out, c_in, kernel, kernel], data));
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        self.specs.push(ConvSpec {
            name: name.to_string(),
            c_in,
            c_out,
            kernel,
            out_h: out_hw.0,
            out_w: out_hw.1,
            uses,
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn finish(self) -> (ParamStore, Vec<ConvSpec>) {
        (self.store, self.specs)
    }
}

/// Adam with L2 weight decay folded into the gradient (the classic,
/// non-decoupled form).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let wd = self.weight_decay as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let p = store.tensors[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j] + wd * p[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                p[j] -= step_size * m[j] / denom;
            }
        }
    }
}
