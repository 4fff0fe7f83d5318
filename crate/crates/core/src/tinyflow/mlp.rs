//! Residual MLP velocity model with hand-written reverse-mode gradients.
//!
//! Layout (row-major batches, `weight` stored as `in × out`):
//!
//! ```text
//! z   = [x, embed(t)]                        x ∈ R^d, embed(t) ∈ R^E
//! h_0 = z W_in + b_in
//! h_{l+1} = h_l + silu(h_l W_1 + b_1) W_2 + b_2      l = 0..blocks
//! out = silu(h_L) W_out + b_out
//! ```
//!
//! The time embedding is `[sin(ω_k t), cos(ω_k t)]` with `E/2` frequencies
//! spaced geometrically in `[1, 100]`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Convention, FieldKind, VelocityField};
use crate::rng::stream_rng;

const MAX_FREQUENCY: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpArchitecture {
    pub data_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            data_dim: 2,
            width: 128,
            blocks: 3,
            time_embed_dim: 32,
        }
    }
}

impl MlpArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.width == 0 || self.blocks == 0 || self.time_embed_dim == 0 {
            return Err(Error::Config(format!(
                "architecture sizes must be positive: {self:?}"
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dimension must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim
    }
}

/// Affine layer `y = x W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// PyTorch-style default init, `U(-1/√fan_in, 1/√fan_in)`.
    fn uniform(input: usize, output: usize, rng: &mut crate::rng::Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        layer
            .weight
            .mapv_inplace(|_| rng.random_range(-bound..bound));
        layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        layer
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// All trainable tensors of the residual MLP.
///
/// The same struct doubles as a gradient / optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: MlpArchitecture,
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    z: Array2<f64>,
    /// Block inputs `h_0 .. h_{L-1}`.
    hidden: Vec<Array2<f64>>,
    /// Pre-activation `a_l`, `sigmoid(a_l)` and `silu(a_l)` for each block.
    block_pre: Vec<Array2<f64>>,
    block_sig: Vec<Array2<f64>>,
    block_act: Vec<Array2<f64>>,
    last_pre: Array2<f64>,
    last_sig: Array2<f64>,
    last_act: Array2<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `silu'(x)` written in terms of `s = sigmoid(x)`.
#[inline]
fn silu_grad(x: f64, s: f64) -> f64 {
    s * (1.0 + x * (1.0 - s))
}

pub fn time_embedding(times: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                MAX_FREQUENCY.powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Array2::zeros((times.len(), dim));
    for (mut row, &t) in out.rows_mut().into_iter().zip(times) {
        for (k, w) in freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            row[k] = s;
            row[half + k] = c;
        }
    }
    out
}

impl MlpParams {
    pub fn zeros(arch: MlpArchitecture) -> Self {
        Self {
            arch,
            input: Linear::zeros(arch.input_dim(), arch.width),
            blocks: (0..arch.blocks)
                .map(|_| ResidualBlock {
                    fc1: Linear::zeros(arch.width, arch.width),
                    fc2: Linear::zeros(arch.width, arch.width),
                })
                .collect(),
            output: Linear::zeros(arch.width, arch.data_dim),
        }
    }

    pub fn init(arch: MlpArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, 0);
        let input = Linear::uniform(arch.input_dim(), arch.width, &mut rng);
        let blocks = (0..arch.blocks)
            .map(|_| ResidualBlock {
                fc1: Linear::uniform(arch.width, arch.width, &mut rng),
                fc2: Linear::uniform(arch.width, arch.width, &mut rng),
            })
            .collect();
        let output = Linear::uniform(arch.width, arch.data_dim, &mut rng);
        Ok(Self {
            arch,
            input,
            blocks,
            output,
        })
    }

    pub fn architecture(&self) -> MlpArchitecture {
        self.arch
    }

    fn layers(&self) -> Vec<&Linear> {
        let mut v = vec![&self.input];
        for b in &self.blocks {
            v.push(&b.fc1);
            v.push(&b.fc2);
        }
        v.push(&self.output);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = vec![&mut self.input];
        for b in &mut self.blocks {
            v.push(&mut b.fc1);
            v.push(&mut b.fc2);
        }
        v.push(&mut self.output);
        v
    }

    /// Named tensors in a fixed order: `(name, shape, values)`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut names = vec!["input".to_string()];
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.fc1"));
            names.push(format!("block{i}.fc2"));
        }
        names.push("output".to_string());
        let mut out = Vec::new();
        for (name, layer) in names.into_iter().zip(self.layers()) {
            out.push((
                format!("{name}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    /// Flat mutable views of every tensor, in the `named_tensors` order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, _, s)| s).collect()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Same architecture and tensor shapes.
    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.arch == other.arch
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors())
                .all(|(a, b)| a.1 == b.1)
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>, times: &[f64]) {
        assert_eq!(x.ncols(), self.arch.data_dim, "point dimension mismatch");
        assert_eq!(x.nrows(), times.len(), "one time per row");
    }

    /// Forward velocity for each row of `x` at its own time.
    pub fn forward(&self, x: ArrayView2<'_, f64>, times: &[f64]) -> Array2<f64> {
        self.forward_cached(x, times).0
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        times: &[f64],
    ) -> (Array2<f64>, ForwardCache) {
        self.check_input(&x, times);
        let emb = time_embedding(times, self.arch.time_embed_dim);
        let z = ndarray::concatenate(Axis(1), &[x, emb.view()]).expect("row counts match");

        let mut h = self.input.apply(&z);
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut block_pre = Vec::with_capacity(self.blocks.len());
        let mut block_sig = Vec::with_capacity(self.blocks.len());
        let mut block_act = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let a = block.fc1.apply(&h);
            let sig = a.mapv(sigmoid);
            let act = &a * &sig;
            let delta = block.fc2.apply(&act);
            let next = &h + &delta;
            hidden.push(std::mem::replace(&mut h, next));
            block_pre.push(a);
            block_sig.push(sig);
            block_act.push(act);
        }
        let last_sig = h.mapv(sigmoid);
        let last_act = &h * &last_sig;
        let out = self.output.apply(&last_act);
        (
            out,
            ForwardCache {
                z,
                hidden,
                block_pre,
                block_sig,
                block_act,
                last_pre: h,
                last_sig,
                last_act,
            },
        )
    }

    /// Parameter gradients given `d_out = ∂L/∂out`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> MlpParams {
        let mut grads = MlpParams::zeros(self.arch);

        grads.output.weight = cache.last_act.t().dot(d_out);
        grads.output.bias = d_out.sum_axis(Axis(0));
        let d_act = d_out.dot(&self.output.weight.t());
        let mut dh = ndarray::Zip::from(&d_act)
            .and(&cache.last_pre)
            .and(&cache.last_sig)
            .map_collect(|&g, &x, &s| g * silu_grad(x, s));

        for (l, block) in self.blocks.iter().enumerate().rev() {
            let h_in = &cache.hidden[l];
            let act = &cache.block_act[l];
            let sig = &cache.block_sig[l];
            let g = &mut grads.blocks[l];
            g.fc2.weight = act.t().dot(&dh);
            g.fc2.bias = dh.sum_axis(Axis(0));
            let d_act = dh.dot(&block.fc2.weight.t());
            let da = ndarray::Zip::from(&d_act)
                .and(&cache.block_pre[l])
                .and(sig)
                .map_collect(|&g, &x, &s| g * silu_grad(x, s));
            g.fc1.weight = h_in.t().dot(&da);
            g.fc1.bias = da.sum_axis(Axis(0));
            dh += &da.dot(&block.fc1.weight.t());
        }

        grads.input.weight = cache.z.t().dot(&dh);
        grads.input.bias = dh.sum_axis(Axis(0));
        for layer in grads.layers_mut() {
            if !layer.weight.is_standard_layout() {
                layer.weight = layer.weight.as_standard_layout().into_owned();
            }
        }
        grads
    }
}

/// A trained (or analytic-free) MLP exposed as a forward-time velocity field.
#[derive(Debug, Clone)]
pub struct MlpField {
    params: MlpParams,
}

impl MlpField {
    pub fn new(params: MlpParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }
}

impl VelocityField for MlpField {
    fn dim(&self) -> usize {
        self.params.arch.data_dim
    }

    fn kind(&self) -> FieldKind {
        FieldKind::Learned
    }

    fn native_convention(&self) -> Convention {
        Convention::Forward
    }

    fn eval_native(&self, points: ArrayView2<'_, f64>, time: f64) -> Array2<f64> {
        let times = vec![time; points.nrows()];
        self.params.forward(points, &times)
    }
}
