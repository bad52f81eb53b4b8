//! Dense-network substrate: batched forward, hand-written backward, Adam,
//! and a central-difference gradient oracle.
//!
//! Batches are row-major `batch x dim` buffers. An [`Mlp`] keeps all of its
//! weights and biases in one flat buffer laid out `[W0, b0, W1, b1, ...]`,
//! where each `Wi` is row-major `out x in`; gradients use the same layout, so
//! optimizers and checkpoints can treat a network as one parameter group.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Softplus => softplus(z),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    ///
    /// softplus'(z) = sigmoid(z) = 1 - exp(-softplus(z)).
    #[inline]
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => -(-y).exp_m1(),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Identity => T::one(),
        }
    }
}

#[inline]
pub fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Shape and activation of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Borrowed view of one dense layer: `y = activation(W x + b)`.
#[derive(Debug, Clone, Copy)]
pub struct DenseLayer<'a, T> {
    pub spec: LayerSpec,
    /// Row-major `out x in`.
    pub weights: &'a [T],
    pub bias: &'a [T],
}

static NEXT_MLP_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_MLP_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Mlp<T> {
    specs: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<T>,
    id: u64,
    generation: u64,
}

impl<T: Clone> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            id: next_id(),
            generation: 0,
        }
    }
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.params == other.params
    }
}

/// Activations retained by [`Mlp::forward`] for the matching backward call.
#[derive(Debug, Clone)]
pub struct MlpTrace<T> {
    mlp_id: u64,
    generation: u64,
    batch: usize,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<T>>,
}

impl<T> MlpTrace<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T: Real> Mlp<T> {
    /// Builds a network from layer widths; hidden layers use `hidden`, the last
    /// layer uses `output`. Weights are fan-in scaled uniform, biases zero.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let specs: Vec<LayerSpec> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 2 == widths.len() { output } else { hidden },
            })
            .collect();
        let mut mlp = Self::zeroed(specs)?;
        for i in 0..mlp.specs.len() {
            let spec = mlp.specs[i];
            let gain = match spec.activation {
                Activation::Relu | Activation::Softplus => 6.0,
                Activation::Sigmoid | Activation::Identity => 3.0,
            };
            let limit = (gain / spec.in_dim as f64).sqrt();
            let start = mlp.offsets[i];
            for w in &mut mlp.params[start..start + spec.in_dim * spec.out_dim] {
                *w = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(mlp)
    }

    pub fn zeroed(specs: Vec<LayerSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.param_count();
        }
        Ok(Self {
            specs,
            offsets,
            params: vec![T::zero(); total],
            id: next_id(),
            generation: 0,
        })
    }

    /// Rebuilds a network from its layer specs and a flat parameter buffer.
    pub fn from_params(specs: Vec<LayerSpec>, params: Vec<T>) -> Result<Self> {
        let mut mlp = Self::zeroed(specs)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                mlp.params.len(),
                params.len()
            )));
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            specs: self.specs.clone(),
            offsets: self.offsets.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
            id: next_id(),
            generation: 0,
        }
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable access to the flat parameters. Invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.params
    }

    /// Copy of `buf`, laid out like the parameters, with one output unit
    /// appended to the last layer. `row` holds the new unit's `in_dim` weights.
    pub fn grow_output_layout<U: Clone>(&self, buf: &[U], row: &[U], bias: U) -> Vec<U> {
        let last = self.specs.len() - 1;
        let spec = self.specs[last];
        let w_end = self.offsets[last] + spec.in_dim * spec.out_dim;
        let mut out = Vec::with_capacity(buf.len() + spec.in_dim + 1);
        out.extend_from_slice(&buf[..w_end]);
        out.extend_from_slice(row);
        out.extend_from_slice(&buf[w_end..]);
        out.push(bias);
        out
    }

    /// Appends one output unit to the last layer; existing outputs are unchanged.
    pub fn add_output(&mut self, row: &[T], bias: T) -> Result<()> {
        let last = self.specs.len() - 1;
        if row.len() != self.specs[last].in_dim {
            return Err(Error::Config(format!(
                "new output unit needs {} weights, got {}",
                self.specs[last].in_dim,
                row.len()
            )));
        }
        self.params = self.grow_output_layout(&self.params, row, bias);
        self.specs[last].out_dim += 1;
        self.generation += 1;
        Ok(())
    }

    pub fn layer(&self, i: usize) -> DenseLayer<'_, T> {
        let spec = self.specs[i];
        let start = self.offsets[i];
        let w_end = start + spec.in_dim * spec.out_dim;
        DenseLayer {
            spec,
            weights: &self.params[start..w_end],
            bias: &self.params[w_end..w_end + spec.out_dim],
        }
    }

    /// Batched forward pass; `inputs` is `batch x in_dim` row-major.
    pub fn forward(&self, inputs: &[T], batch: usize) -> Result<MlpTrace<T>> {
        if inputs.len() != batch * self.in_dim() {
            return Err(Error::Config(format!(
                "MLP expects {} inputs per row; got {} values for batch {batch}",
                self.in_dim(),
                inputs.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.specs.len() + 1);
        activations.push(inputs.to_vec());
        for i in 0..self.specs.len() {
            let layer = self.layer(i);
            let (n_in, n_out) = (layer.spec.in_dim, layer.spec.out_dim);
            let x = activations.last().expect("input pushed");
            let mut y = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                y.extend_from_slice(layer.bias);
            }
            T::gemm(
                batch,
                n_in,
                n_out,
                T::one(),
                x,
                (n_in as isize, 1),
                layer.weights,
                (1, n_in as isize),
                T::one(),
                &mut y,
                (n_out as isize, 1),
            );
            let act = layer.spec.activation;
            if act != Activation::Identity {
                for v in &mut y {
                    *v = act.apply(*v);
                }
            }
            activations.push(y);
        }
        Ok(MlpTrace {
            mlp_id: self.id,
            generation: self.generation,
            batch,
            activations,
        })
    }

    /// Backpropagates `upstream` (`batch x out_dim`) through the trace,
    /// accumulating into `grads`. Returns the input gradient when requested.
    pub fn backward(
        &self,
        trace: &MlpTrace<T>,
        upstream: &[T],
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        if trace.mlp_id != self.id || trace.generation != self.generation {
            return Err(Error::Usage(
                "MLP trace does not belong to the current parameters".into(),
            ));
        }
        if trace.activations.len() != self.specs.len() + 1 {
            return Err(Error::Usage("MLP trace has the wrong number of layers".into()));
        }
        let batch = trace.batch;
        if upstream.len() != batch * self.out_dim() {
            return Err(Error::Usage(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                batch * self.out_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Usage("gradient buffer does not match the MLP".into()));
        }

        let mut delta = upstream.to_vec();
        for i in (0..self.specs.len()).rev() {
            let layer = self.layer(i);
            let (n_in, n_out) = (layer.spec.in_dim, layer.spec.out_dim);
            let y = &trace.activations[i + 1];
            let x = &trace.activations[i];
            let act = layer.spec.activation;
            if act != Activation::Identity {
                for (d, &yv) in delta.iter_mut().zip(y) {
                    *d *= act.derivative_from_output(yv);
                }
            }

            let start = self.offsets[i];
            let w_end = start + n_in * n_out;
            let (gw, rest) = grads[start..].split_at_mut(n_in * n_out);
            // dW += delta^T x
            T::gemm(
                n_out,
                batch,
                n_in,
                T::one(),
                &delta,
                (1, n_out as isize),
                x,
                (n_in as isize, 1),
                T::one(),
                gw,
                (n_in as isize, 1),
            );
            let gb = &mut rest[..n_out];
            for row in delta.chunks_exact(n_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            debug_assert_eq!(start + n_in * n_out, w_end);

            if i == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut dx = vec![T::zero(); batch * n_in];
            T::gemm(
                batch,
                n_out,
                n_in,
                T::one(),
                &delta,
                (n_out as isize, 1),
                layer.weights,
                (n_in as isize, 1),
                T::zero(),
                &mut dx,
                (n_in as isize, 1),
            );
            delta = dx;
        }
        Ok(Some(delta))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// any state changes.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    group: &str,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::Usage(format!(
            "parameter group `{group}`: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            group: group.to_owned(),
        });
    }
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let m_scale = T::lit(1.0 / (1.0 - cfg.beta1.powi(t)));
    let v_scale = T::lit(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let update_params = cfg.learning_rate != 0.0;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        if update_params {
            let m_hat = *m * m_scale;
            let v_hat = *v * v_scale;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every scalar.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = loss_fn(&work);
            work[i] = orig - h;
            let minus = loss_fn(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central differences for selected indices of a parameter vector owned
/// elsewhere. `loss_at(i, delta)` must evaluate the loss with parameter `i`
/// shifted by `delta` and leave the parameters restored afterwards.
pub fn finite_difference_at<F>(mut loss_at: F, indices: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(usize, f64) -> f64,
{
    indices
        .iter()
        .map(|&i| (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h))
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
