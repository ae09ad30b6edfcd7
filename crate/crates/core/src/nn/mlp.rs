//! Fully connected tanh network with hand-written backpropagation.
//!
//! Hidden layers use `tanh`, the output layer is linear. Weights for layer
//! `k` have shape `(layer_sizes[k + 1], layer_sizes[k])` so a forward step
//! is `h' = W h + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Gradients of a scalar loss with respect to every parameter of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Layer activations recorded during a batched forward pass.
///
/// `activations[0]` is the input batch, `activations[k + 1]` the output of
/// layer `k` (after `tanh` for hidden layers).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "an MLP needs at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform initialisation, `U(±sqrt(6 / (fan_in + fan_out)))`.
    /// The final layer's weights are multiplied by `output_scale`; biases
    /// start at zero.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], output_scale: f64, rng: &mut R) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let n_layers = layer_sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (fan_in, fan_out) = (layer_sizes[k], layer_sizes[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if k + 1 == n_layers { output_scale } else { 1.0 };
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..=limit) * scale);
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(layer_sizes: &[usize], weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Config(format!(
                "expected {n_layers} weight and bias tensors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for k in 0..n_layers {
            let expected = (layer_sizes[k + 1], layer_sizes[k]);
            if weights[k].dim() != expected {
                return Err(Error::Config(format!(
                    "layer {k} weights have shape {:?}, expected {expected:?}",
                    weights[k].dim()
                )));
            }
            if biases[k].len() != layer_sizes[k + 1] {
                return Err(Error::Config(format!(
                    "layer {k} bias has length {}, expected {}",
                    biases[k].len(),
                    layer_sizes[k + 1]
                )));
            }
            let finite = weights[k].iter().chain(biases[k].iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numeric(format!("layer {k} holds non-finite parameters")));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: weights
                .into_iter()
                .map(|w| w.as_standard_layout().into_owned())
                .collect(),
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable access to layer `k`'s weights. Used by tests and by label
    /// permutation of input columns.
    pub fn weights_mut(&mut self, k: usize) -> &mut Array2<f64> {
        &mut self.weights[k]
    }

    pub fn biases_mut(&mut self, k: usize) -> &mut Array1<f64> {
        &mut self.biases[k]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter tensors flattened row-major, in the order
    /// `layer0.weight, layer0.bias, layer1.weight, ...`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|k| [format!("layer{k}.weight"), format!("layer{k}.bias")])
            .collect()
    }

    /// Evaluate the network on a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if let Some(pos) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("input element {pos} is not finite")));
        }
        let last = self.n_layers() - 1;
        let mut h = input.to_vec();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let w = w.as_slice().expect("standard layout");
            let fan_in = h.len();
            let mut next: Vec<f64> = b.to_vec();
            for (row, out) in w.chunks_exact(fan_in).zip(next.iter_mut()) {
                *out += row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>();
            }
            if k < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        Ok(h)
    }

    /// Batched forward pass over the rows of `inputs`, keeping every
    /// activation for [`Mlp::backward`].
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Config(format!(
                "input batch has {} columns, network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("input batch contains non-finite values".into()));
        }
        let last = self.n_layers() - 1;
        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        activations.push(inputs.to_owned());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations[k].dot(&w.t());
            z += b;
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Backpropagate `output_grad` (dL/d output, one row per batch entry)
    /// through the activations recorded in `cache`. Gradients are summed
    /// over the batch.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<MlpGradients> {
        if cache.activations.len() != self.n_layers() + 1 {
            return Err(Error::Config(format!(
                "cache has {} activations, network has {} layers",
                cache.activations.len(),
                self.n_layers()
            )));
        }
        let expected = (cache.batch_size(), self.output_dim());
        if output_grad.dim() != expected {
            return Err(Error::Config(format!(
                "output gradient has shape {:?}, expected {expected:?}",
                output_grad.dim()
            )));
        }
        let n = self.n_layers();
        let mut grad_w = Vec::with_capacity(n);
        let mut grad_b = Vec::with_capacity(n);
        let mut delta = output_grad.to_owned();
        for k in (0..n).rev() {
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient flowing into layer {k}")));
            }
            let input = &cache.activations[k];
            if input.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation entering layer {k}")));
            }
            grad_w.push(delta.t().dot(input).as_standard_layout().into_owned());
            grad_b.push(delta.sum_axis(Axis(0)));
            if k > 0 {
                let mut prev = delta.dot(&self.weights[k]);
                // input to layer k is tanh output h, so dh/dz = 1 - h^2
                prev.zip_mut_with(input, |d, &h| *d *= 1.0 - h * h);
                delta = prev;
            }
        }
        grad_w.reverse();
        grad_b.reverse();
        Ok(MlpGradients {
            weights: grad_w,
            biases: grad_b,
        })
    }

    /// Gradients for a single input vector; convenience over the batched path.
    pub fn backward_single(&self, input: &[f64], output_grad: &[f64]) -> Result<MlpGradients> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Config(e.to_string()))?;
        let cache = self.forward_batch(x)?;
        let g =
            ArrayView2::from_shape((1, output_grad.len()), output_grad).map_err(|e| Error::Config(e.to_string()))?;
        self.backward(&cache, g)
    }
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }
}
