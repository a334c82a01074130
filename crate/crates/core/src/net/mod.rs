//! Feedforward networks with exact input-gradients and parameter-gradients of
//! losses that contain input-gradient terms (forward-over-reverse).

mod train;

pub use train::{
    eval_loss, loss_and_param_gradients, train, AdamHyper, AdamState, BatchObjective, EvalPoint,
    LoopCtl, LrSchedule, TrainLoopConfig,
};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// First derivative; the ReLU subgradient at exactly 0 is 0 so that
    /// evaluation at sampled points stays deterministic.
    #[inline]
    pub fn prime(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }

    /// Second derivative (almost everywhere for ReLU).
    #[inline]
    pub fn second(self, z: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Elu => {
                if z > 0.0 {
                    0.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Parameter-shaped accumulator (gradients, Adam moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grads {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn scaled_add(&mut self, c: f64, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(c, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(c, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            *w *= c;
        }
        for b in &mut self.biases {
            *b *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values of a batched forward pass, reused by the backward
/// sweeps.
pub struct ForwardCache {
    inputs: Array2<f64>,
    /// Pre-activations of hidden layers, `[n, m_i]` for i = 1..L-1.
    zs: Vec<Array2<f64>>,
    /// Hidden activations `a_i = rho(z_i)`.
    activations: Vec<Array2<f64>>,
    outputs: Array2<f64>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &Array2<f64> {
        &self.outputs
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "invalid layer sizes {layer_sizes:?}"
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound));
            weights.push(weight);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            layer_sizes,
            activation,
            weights,
            biases,
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activation: Activation,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        for (i, w) in layer_sizes.windows(2).enumerate() {
            if weights.get(i).map(|m| m.dim()) != Some((w[1], w[0]))
                || biases.get(i).map(|b| b.len()) != Some(w[1])
            {
                return Err(Error::Contract(format!("parameter shapes do not match layer sizes at layer {i}")));
            }
        }
        Ok(Mlp {
            layer_sizes,
            activation,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_weight_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Vec<Array2<f64>>, &mut Vec<Array1<f64>>) {
        (&mut self.weights, &mut self.biases)
    }

    /// Add `delta` to a single weight (finite-difference checks).
    pub fn perturb_weight(&mut self, layer: usize, row: usize, col: usize, delta: f64) {
        self.weights[layer][[row, col]] += delta;
    }

    /// Add `delta` to a single bias (finite-difference checks).
    pub fn perturb_bias(&mut self, layer: usize, idx: usize, delta: f64) {
        self.biases[layer][idx] += delta;
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward_batch_cached(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(&x.view())?;
        let nl = self.weights.len();
        let mut zs = Vec::with_capacity(nl - 1);
        let mut activations = Vec::with_capacity(nl - 1);
        let mut a = x.clone();
        for i in 0..nl - 1 {
            let mut z = a.dot(&self.weights[i].t());
            z += &self.biases[i];
            let act = z.mapv(|v| self.activation.value(v));
            zs.push(z);
            activations.push(act);
            a = activations.last().unwrap().clone();
        }
        let mut out = a.dot(&self.weights[nl - 1].t());
        out += &self.biases[nl - 1];
        Ok(ForwardCache {
            inputs: x.clone(),
            zs,
            activations,
            outputs: out,
        })
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch_cached(x)?.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::Contract(e.to_string()))?;
        let out = self.forward_batch(&xm)?;
        Ok(out.row(0).to_vec())
    }

    /// Exact Jacobian of the output with respect to the input, `[out, d]`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Array2<f64>> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::Contract(e.to_string()))?;
        let cache = self.forward_batch_cached(&xm)?;
        let out_dim = self.output_dim();
        let mut jac = Array2::zeros((out_dim, self.input_dim()));
        for o in 0..out_dim {
            let mut seed = Array2::zeros((1, out_dim));
            seed[[0, o]] = 1.0;
            let g = self.input_gradient_from_seed(&cache, &seed);
            jac.row_mut(o).assign(&g.row(0));
        }
        Ok(jac)
    }

    /// Batched input gradient for scalar-output networks, `[n, d]`.
    pub fn input_gradient_batch(&self, cache: &ForwardCache) -> Result<Array2<f64>> {
        if self.output_dim() != 1 {
            return Err(Error::Contract(
                "batched input gradient requires a scalar-output network".into(),
            ));
        }
        let seed = Array2::ones((cache.inputs.nrows(), 1));
        Ok(self.input_gradient_from_seed(cache, &seed))
    }

    /// Reverse sweep from output adjoints to input adjoints.
    fn input_gradient_from_seed(&self, cache: &ForwardCache, seed: &Array2<f64>) -> Array2<f64> {
        let nl = self.weights.len();
        // s: adjoint of the current pre-activation, starting at the output.
        let mut s = seed.dot(&self.weights[nl - 1]);
        for i in (0..nl - 1).rev() {
            let zp = cache.zs[i].mapv(|v| self.activation.prime(v));
            s *= &zp;
            s = s.dot(&self.weights[i]);
        }
        s
    }

    /// First-order backprop: parameter gradients of `sum_n grad_out_n . y_n`.
    pub fn backprop(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Grads {
        let nl = self.weights.len();
        let mut grads = Grads::zeros_like(self);
        let mut delta = grad_out.clone();
        for i in (0..nl).rev() {
            let a_prev = if i == 0 {
                &cache.inputs
            } else {
                &cache.activations[i - 1]
            };
            grads.weights[i] = delta.t().dot(a_prev);
            grads.biases[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut g = delta.dot(&self.weights[i]);
                let zp = cache.zs[i - 1].mapv(|v| self.activation.prime(v));
                g *= &zp;
                delta = g;
            }
        }
        grads
    }

    /// Parameter gradients of `sum_n (u_n y_n + w_n . g_n)` for a
    /// scalar-output network, where `g_n` is the input gradient at sample n.
    ///
    /// The `w . g` term is the directional derivative of the output along
    /// `w`, computed by a tangent forward pass; one reverse sweep over the
    /// joint primal/tangent computation then yields exact parameter
    /// gradients (this is where the second derivative of the activation
    /// enters).
    pub fn grad_objective_backprop(
        &self,
        cache: &ForwardCache,
        upstream_y: &Array1<f64>,
        tangent_dir: &Array2<f64>,
    ) -> Result<Grads> {
        if self.output_dim() != 1 {
            return Err(Error::Contract(
                "gradient-objective backprop requires a scalar-output network".into(),
            ));
        }
        let nl = self.weights.len();
        let n = cache.inputs.nrows();

        // Tangent forward pass: zdot_i and adot_i = rho'(z_i) o zdot_i.
        let mut zdots = Vec::with_capacity(nl - 1);
        let mut adots = Vec::with_capacity(nl - 1);
        let mut adot = tangent_dir.clone();
        for i in 0..nl - 1 {
            let zdot = adot.dot(&self.weights[i].t());
            let zp = cache.zs[i].mapv(|v| self.activation.prime(v));
            adot = &zdot * &zp;
            zdots.push(zdot);
            adots.push(adot.clone());
        }

        let mut grads = Grads::zeros_like(self);

        // Output layer: y = a W^T + b, ydot = adot W^T.
        let u = upstream_y.view().insert_axis(Axis(1));
        let ones = Array2::<f64>::ones((n, 1));
        let a_prev = if nl == 1 {
            &cache.inputs
        } else {
            &cache.activations[nl - 2]
        };
        let adot_prev = if nl == 1 { tangent_dir } else { &adots[nl - 2] };
        grads.weights[nl - 1] = u.t().dot(a_prev) + ones.t().dot(adot_prev);
        grads.biases[nl - 1] = u.sum_axis(Axis(0));
        let mut g_a = u.dot(&self.weights[nl - 1]);
        let mut g_adot = ones.dot(&self.weights[nl - 1]);

        for i in (0..nl - 1).rev() {
            let zp = cache.zs[i].mapv(|v| self.activation.prime(v));
            let zpp = cache.zs[i].mapv(|v| self.activation.second(v));
            // adot_i = rho'(z_i) o zdot_i
            let g_zdot = &zp * &g_adot;
            let mut g_z = &zpp * &zdots[i] * &g_adot;
            // a_i = rho(z_i)
            g_z += &(&zp * &g_a);
            let a_prev = if i == 0 {
                &cache.inputs
            } else {
                &cache.activations[i - 1]
            };
            let adot_prev = if i == 0 { tangent_dir } else { &adots[i - 1] };
            grads.weights[i] = g_z.t().dot(a_prev) + g_zdot.t().dot(adot_prev);
            grads.biases[i] = g_z.sum_axis(Axis(0));
            if i > 0 {
                g_a = g_z.dot(&self.weights[i]);
                g_adot = g_zdot.dot(&self.weights[i]);
            }
        }
        Ok(grads)
    }

    /// `sum_i lambda_i alpha_i` for single-hidden-layer networks; the
    /// quantity bounded by the optional weight-norm constraint.
    pub fn weight_norm_vector(&self) -> Result<Array1<f64>> {
        if self.n_weight_layers() != 2 || self.output_dim() != 1 {
            return Err(Error::Contract(
                "weight-norm vector is defined for single-hidden-layer scalar networks".into(),
            ));
        }
        Ok(self.weights[1].row(0).dot(&self.weights[0]))
    }

    /// Rescale the output weights so `|sum lambda_i alpha_i| <= bound`.
    pub fn project_weight_norm(&mut self, bound: f64) -> Result<()> {
        let v = self.weight_norm_vector()?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > bound {
            let s = bound / norm;
            self.weights[1] *= s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn single_neuron(lambda: f64, alpha: f64, act: Activation) -> Mlp {
        Mlp::from_parts(
            vec![1, 1, 1],
            act,
            vec![
                Array2::from_shape_vec((1, 1), vec![alpha]).unwrap(),
                Array2::from_shape_vec((1, 1), vec![lambda]).unwrap(),
            ],
            vec![Array1::zeros(1), Array1::zeros(1)],
        )
        .unwrap()
    }

    #[test]
    fn forward_single_neuron_relu() {
        let net = single_neuron(1.0, 2.0, Activation::Relu);
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn forward_zero_weights_tanh() {
        let mut r = rng(0);
        let mut net = Mlp::new(vec![2, 4, 1], Activation::Tanh, &mut r).unwrap();
        for w in &mut net.weights {
            w.fill(0.0);
        }
        assert_eq!(net.forward(&[0.3, -0.7]).unwrap(), vec![0.0]);
    }

    #[test]
    fn forward_identity_permutation_in_linear_regime() {
        // Permutation weights on positive inputs keep ReLU linear.
        let w1 = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let w2 = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let net = Mlp::from_parts(
            vec![2, 2, 2],
            Activation::Relu,
            vec![w1, w2],
            vec![Array1::zeros(2), Array1::zeros(2)],
        )
        .unwrap();
        assert_eq!(net.forward(&[3.0, 5.0]).unwrap(), vec![5.0, 3.0]);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let mut r = rng(0);
        let net = Mlp::new(vec![3, 4, 1], Activation::Relu, &mut r).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn input_gradient_single_neuron() {
        let net = single_neuron(1.0, 2.0, Activation::Relu);
        let jac = net.input_gradient(&[3.0]).unwrap();
        assert_eq!(jac[[0, 0]], 2.0);
    }

    #[test]
    fn input_gradient_zero_weights_tanh() {
        let mut r = rng(1);
        let mut net = Mlp::new(vec![2, 3, 1], Activation::Tanh, &mut r).unwrap();
        for w in &mut net.weights {
            w.fill(0.0);
        }
        let jac = net.input_gradient(&[0.4, 0.5]).unwrap();
        assert!(jac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng(7);
        for trial in 0..20 {
            let net = Mlp::new(vec![3, 8, 6, 2], Activation::Tanh, &mut r).unwrap();
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let jac = net.input_gradient(&x).unwrap();
            let h = 1e-5;
            for o in 0..2 {
                for i in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (net.forward(&xp).unwrap()[o] - net.forward(&xm).unwrap()[o])
                        / (2.0 * h);
                    let rel = (jac[[o, i]] - fd).abs() / (1.0 + fd.abs());
                    assert!(rel <= 1e-5, "trial {trial} out {o} in {i}: {} vs {fd}", jac[[o, i]]);
                }
            }
        }
    }

    fn perturbed(net: &Mlp, layer: usize, is_bias: bool, idx: (usize, usize), h: f64) -> Mlp {
        let mut n = net.clone();
        if is_bias {
            n.biases[layer][idx.0] += h;
        } else {
            n.weights[layer][[idx.0, idx.1]] += h;
        }
        n
    }

    /// Finite-difference oracle over every parameter for a loss of the form
    /// mean(A(y)) + mean(B(g)) with g the input gradient.
    fn check_param_grads(
        net: &Mlp,
        x: &Array2<f64>,
        loss: &dyn Fn(&Mlp) -> f64,
        grads: &Grads,
        tol: f64,
    ) {
        let h = 1e-5;
        for l in 0..net.n_weight_layers() {
            let (rows, cols) = net.weights[l].dim();
            for i in 0..rows {
                for j in 0..cols {
                    let fp = loss(&perturbed(net, l, false, (i, j), h));
                    let fm = loss(&perturbed(net, l, false, (i, j), -h));
                    let fd = (fp - fm) / (2.0 * h);
                    let got = grads.weights[l][[i, j]];
                    assert!(
                        (got - fd).abs() <= tol * (1.0 + fd.abs()),
                        "W{l}[{i},{j}]: {got} vs {fd} on {:?}",
                        x.dim()
                    );
                }
            }
            for i in 0..net.biases[l].len() {
                let fp = loss(&perturbed(net, l, true, (i, 0), h));
                let fm = loss(&perturbed(net, l, true, (i, 0), -h));
                let fd = (fp - fm) / (2.0 * h);
                let got = grads.biases[l][i];
                assert!(
                    (got - fd).abs() <= tol * (1.0 + fd.abs()),
                    "b{l}[{i}]: {got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences_on_mean_square() {
        let mut r = rng(13);
        for _ in 0..5 {
            let net = Mlp::new(vec![2, 5, 4, 1], Activation::Tanh, &mut r).unwrap();
            let x = Array2::from_shape_fn((6, 2), |_| r.gen_range(-1.0..1.0));
            let cache = net.forward_batch_cached(&x).unwrap();
            let n = x.nrows() as f64;
            // loss = mean(y^2); d/dy = 2y/n
            let grad_out = cache.outputs().mapv(|y| 2.0 * y / n);
            let grads = net.backprop(&cache, &grad_out);
            let loss = |m: &Mlp| {
                let y = m.forward_batch(&x).unwrap();
                y.iter().map(|v| v * v).sum::<f64>() / n
            };
            check_param_grads(&net, &x, &loss, &grads, 1e-4);
        }
    }

    #[test]
    fn grad_objective_backprop_matches_finite_differences() {
        let mut r = rng(17);
        for _ in 0..10 {
            let net = Mlp::new(vec![2, 6, 5, 1], Activation::Tanh, &mut r).unwrap();
            let x = Array2::from_shape_fn((5, 2), |_| r.gen_range(-1.0..1.0));
            let cache = net.forward_batch_cached(&x).unwrap();
            let n = x.nrows() as f64;
            // loss = mean(y^2) + mean(|g|^2)
            let u = cache.outputs().column(0).mapv(|y| 2.0 * y / n);
            let g = net.input_gradient_batch(&cache).unwrap();
            let w = g.mapv(|v| 2.0 * v / n);
            let grads = net.grad_objective_backprop(&cache, &u, &w).unwrap();
            let loss = |m: &Mlp| {
                let c = m.forward_batch_cached(&x).unwrap();
                let g = m.input_gradient_batch(&c).unwrap();
                c.outputs().iter().map(|v| v * v).sum::<f64>() / n
                    + g.iter().map(|v| v * v).sum::<f64>() / n
            };
            check_param_grads(&net, &x, &loss, &grads, 1e-4);
        }
    }

    #[test]
    fn grad_objective_single_neuron_closed_form() {
        // y = lambda * relu(alpha x); at x > 0 active: D y = lambda alpha.
        // loss = (Dy)^2 => d/dlambda = 2 lambda alpha^2, d/dalpha = 2 alpha lambda^2.
        let (lambda, alpha) = (1.5, 2.0);
        let net = single_neuron(lambda, alpha, Activation::Relu);
        let x = Array2::from_shape_vec((1, 1), vec![3.0]).unwrap();
        let cache = net.forward_batch_cached(&x).unwrap();
        let g = net.input_gradient_batch(&cache).unwrap();
        assert!((g[[0, 0]] - lambda * alpha).abs() < 1e-14);
        let u = Array1::zeros(1);
        let w = g.mapv(|v| 2.0 * v);
        let grads = net.grad_objective_backprop(&cache, &u, &w).unwrap();
        assert!((grads.weights[1][[0, 0]] - 2.0 * lambda * alpha * alpha).abs() < 1e-12);
        assert!((grads.weights[0][[0, 0]] - 2.0 * alpha * lambda * lambda).abs() < 1e-12);
    }

    #[test]
    fn weight_norm_projection_enforces_bound() {
        let mut r = rng(3);
        let mut net = Mlp::new(vec![2, 10, 1], Activation::Tanh, &mut r).unwrap();
        net.weights[1] *= 50.0;
        let bound = 1.25;
        net.project_weight_norm(bound).unwrap();
        let v = net.weight_norm_vector().unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= bound + 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut r = rng(99);
        let net = Mlp::new(vec![3, 7, 5, 2], Activation::Elu, &mut r).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
    }
}
