//! Fully connected Q-network with rectifier hidden layers and a linear head.
//!
//! Parameters live in one flat buffer, layer by layer: an `in x out`
//! row-major weight block followed by `out` biases. The optimizer and the
//! checkpoint format both work on that buffer directly.

use rand::Rng;

use super::AgentError;

#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// `(weight offset, bias offset)` for every layer.
fn layer_offsets(dims: &[usize]) -> Vec<(usize, usize)> {
    let mut offsets = Vec::with_capacity(dims.len() - 1);
    let mut at = 0;
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        offsets.push((at, at + fan_in * fan_out));
        at += fan_in * fan_out + fan_out;
    }
    offsets
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n` with explicit
/// strides so transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given shapes and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output of [`QNetwork::loss_and_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGradients {
    pub loss: f64,
    pub gradients: Vec<f64>,
    /// `Q(s_i, a_i) - y_i` for every batch row.
    pub td_errors: Vec<f64>,
}

impl QNetwork {
    /// All parameters zero.
    pub fn zeros(dims: &[usize]) -> Result<Self, AgentError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(AgentError::InvalidArgument(format!(
                "network needs at least two non-empty layers, got {dims:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, AgentError> {
        let mut net = Self::zeros(dims)?;
        for (l, (w_off, _)) in layer_offsets(dims).into_iter().enumerate() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[w_off..w_off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self, AgentError> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(AgentError::InvalidArgument(format!(
                "expected {} parameters for {dims:?}, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight `(row = input unit, col = output unit)` of layer `layer`.
    pub fn weight(&self, layer: usize, input: usize, output: usize) -> f64 {
        let (w_off, _) = layer_offsets(&self.dims)[layer];
        self.params[w_off + input * self.dims[layer + 1] + output]
    }

    pub fn bias(&self, layer: usize, output: usize) -> f64 {
        let (_, b_off) = layer_offsets(&self.dims)[layer];
        self.params[b_off + output]
    }

    /// Copies the online parameters into `self`.
    pub fn sync_from(&mut self, online: &QNetwork) -> Result<(), AgentError> {
        if self.dims != online.dims {
            return Err(AgentError::InvalidArgument(format!(
                "architecture mismatch: {:?} vs {:?}",
                self.dims, online.dims
            )));
        }
        self.params.copy_from_slice(&online.params);
        Ok(())
    }

    fn check_input(&self, input: &[f64], rows: usize) -> Result<(), AgentError> {
        if rows == 0 || input.len() != rows * self.input_dim() {
            return Err(AgentError::InvalidArgument(format!(
                "input of length {} does not hold {rows} rows of width {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs the batch and keeps every layer's activations (input included).
    fn activations(&self, input: &[f64], rows: usize) -> Vec<Vec<f64>> {
        let offsets = layer_offsets(&self.dims);
        let last = offsets.len() - 1;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(input.to_vec());
        for (l, &(w_off, b_off)) in offsets.iter().enumerate() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bias = &self.params[b_off..b_off + fan_out];
            let mut z = Vec::with_capacity(rows * fan_out);
            for _ in 0..rows {
                z.extend_from_slice(bias);
            }
            gemm(
                rows,
                fan_in,
                fan_out,
                &acts[l],
                (fan_in as isize, 1),
                &self.params[w_off..b_off],
                (fan_out as isize, 1),
                1.0,
                &mut z,
            );
            if l < last {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, AgentError> {
        self.forward_batch(features, 1)
    }

    /// Row-major `rows x output_dim` Q-values.
    pub fn forward_batch(&self, input: &[f64], rows: usize) -> Result<Vec<f64>, AgentError> {
        self.check_input(input, rows)?;
        Ok(self.activations(input, rows).pop().unwrap())
    }

    /// Importance-weighted mean squared TD loss over the taken actions,
    /// `(1/N) sum_i w_i (Q(s_i, a_i) - y_i)^2`, with its gradient.
    pub fn loss_and_gradients(
        &self,
        states: &[f64],
        actions: &[usize],
        targets: &[f64],
        weights: &[f64],
    ) -> Result<LossAndGradients, AgentError> {
        let rows = actions.len();
        self.check_input(states, rows)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(AgentError::InvalidArgument(
                "actions, targets and weights must have equal length".into(),
            ));
        }
        let out_dim = self.output_dim();
        if let Some(&a) = actions.iter().find(|&&a| a >= out_dim) {
            return Err(AgentError::InvalidArgument(format!(
                "action {a} out of range for {out_dim} outputs"
            )));
        }

        let acts = self.activations(states, rows);
        let q = acts.last().unwrap();
        let n = rows as f64;
        let mut loss = 0.0;
        let mut td_errors = Vec::with_capacity(rows);
        let mut delta = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let err = q[r * out_dim + actions[r]] - targets[r];
            td_errors.push(err);
            loss += weights[r] * err * err;
            delta[r * out_dim + actions[r]] = 2.0 * weights[r] * err / n;
        }
        loss /= n;

        let offsets = layer_offsets(&self.dims);
        let mut gradients = vec![0.0; self.params.len()];
        for l in (0..offsets.len()).rev() {
            let (w_off, b_off) = offsets[l];
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            // dW = A^T delta
            gemm(
                fan_in,
                rows,
                fan_out,
                &acts[l],
                (1, fan_in as isize),
                &delta,
                (fan_out as isize, 1),
                0.0,
                &mut gradients[w_off..b_off],
            );
            let db = &mut gradients[b_off..b_off + fan_out];
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            // delta_prev = (delta W^T) * relu'(a_prev)
            let mut prev = vec![0.0; rows * fan_in];
            gemm(
                rows,
                fan_out,
                fan_in,
                &delta,
                (fan_out as isize, 1),
                &self.params[w_off..b_off],
                (1, fan_out as isize),
                0.0,
                &mut prev,
            );
            for (d, a) in prev.iter_mut().zip(&acts[l]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = prev;
        }

        Ok(LossAndGradients {
            loss,
            gradients,
            td_errors,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
