//! Adam, learning-rate schedules and the minibatch training loop with
//! periodic evaluation and best-model retention.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{Grads, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators matching the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Grads,
    v: Grads,
    step: usize,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(net: &Mlp, hyper: AdamHyper) -> Self {
        AdamState {
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Standard Adam update with bias correction.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads, lr: f64) {
        self.step += 1;
        let AdamHyper {
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let update = move |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + epsilon);
        };
        let (weights, biases) = net.params_mut();
        for l in 0..weights.len() {
            // gradients may come out of matrix products in any layout
            ndarray::Zip::from(&mut weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&grads.weights[l])
                .for_each(update);
            ndarray::Zip::from(&mut biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&grads.biases[l])
                .for_each(update);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Halve the rate when the best evaluation loss has not improved by
    /// `min_rel_improvement` over the last `window` evaluations; never go
    /// below `floor_ratio` times the initial rate.
    Plateau {
        window: usize,
        factor: f64,
        min_rel_improvement: f64,
        floor_ratio: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Plateau {
            window: 10,
            factor: 0.5,
            min_rel_improvement: 1e-3,
            floor_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub adam: AdamHyper,
    /// Stop once the best evaluation loss has not improved over this many
    /// consecutive evaluations.
    pub early_stop_patience: Option<usize>,
    /// Optional bound on `|sum lambda_i alpha_i|`, enforced by projection
    /// after every Adam step (single-hidden-layer networks only).
    pub weight_norm_bound: Option<f64>,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            batch_size: 1000,
            max_iterations: 100_000,
            eval_every: 100,
            eval_batch: 10_000,
            learning_rate: 1e-3,
            schedule: LrSchedule::default(),
            adam: AdamHyper::default(),
            early_stop_patience: None,
            weight_norm_bound: None,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "batch_size, eval_every and eval_batch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.max_iterations > 0 && self.eval_every > self.max_iterations {
            return Err(Error::Config(
                "eval_every must not exceed max_iterations".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Evaluation bookkeeping shared by the training loops: trace, best loss,
/// plateau schedule and early-stop counters.
#[derive(Debug, Clone)]
pub struct LoopCtl {
    lr0: f64,
    pub lr: f64,
    schedule: LrSchedule,
    trace: Vec<EvalPoint>,
    best_loss: f64,
    plateau_count: usize,
    stall_count: usize,
}

impl LoopCtl {
    pub fn new(lr: f64, schedule: LrSchedule) -> Self {
        LoopCtl {
            lr0: lr,
            lr,
            schedule,
            trace: Vec::new(),
            best_loss: f64::INFINITY,
            plateau_count: 0,
            stall_count: 0,
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn trace(&self) -> &[EvalPoint] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<EvalPoint> {
        self.trace
    }

    /// Record one evaluation; returns true on a new best loss.
    pub fn record(&mut self, iteration: usize, loss: f64) -> bool {
        self.trace.push(EvalPoint {
            iteration,
            loss,
            learning_rate: self.lr,
        });
        let improved = loss < self.best_loss;
        let (window, factor, min_rel, floor_ratio) = match self.schedule {
            LrSchedule::Constant => (usize::MAX, 1.0, 0.0, 1.0),
            LrSchedule::Plateau {
                window,
                factor,
                min_rel_improvement,
                floor_ratio,
            } => (window, factor, min_rel_improvement, floor_ratio),
        };
        let significant = loss < self.best_loss * (1.0 - min_rel);
        if improved {
            self.best_loss = loss;
            self.stall_count = 0;
        } else {
            self.stall_count += 1;
        }
        if significant {
            self.plateau_count = 0;
        } else {
            self.plateau_count += 1;
            if self.plateau_count >= window {
                self.lr = (self.lr * factor).max(self.lr0 * floor_ratio);
                self.plateau_count = 0;
            }
        }
        improved
    }

    pub fn should_stop(&self, patience: Option<usize>) -> bool {
        matches!(patience, Some(p) if self.stall_count >= p)
    }
}

/// A training objective over a scalar-output network: samples input batches
/// and maps (inputs, outputs, input-gradients) to a mean loss plus upstream
/// derivatives with respect to outputs and input-gradients.
pub trait BatchObjective {
    fn sample_inputs(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64>;

    fn needs_input_gradient(&self) -> bool {
        true
    }

    /// Returns the mean loss over the batch and fills `dy` (and `dg` when
    /// input gradients are used) with the derivatives of that mean.
    fn eval(
        &self,
        x: &Array2<f64>,
        y: &Array1<f64>,
        g: &Array2<f64>,
        dy: &mut Array1<f64>,
        dg: &mut Array2<f64>,
    ) -> f64;
}

fn loss_and_upstream<O: BatchObjective>(
    net: &Mlp,
    obj: &O,
    x: &Array2<f64>,
) -> Result<(f64, Array1<f64>, Array2<f64>, super::ForwardCache)> {
    let cache = net.forward_batch_cached(x)?;
    let y = cache.outputs().column(0).to_owned();
    let g = if obj.needs_input_gradient() {
        net.input_gradient_batch(&cache)?
    } else {
        Array2::zeros((x.nrows(), 0))
    };
    let mut dy = Array1::zeros(x.nrows());
    let mut dg = Array2::zeros(g.dim());
    let loss = obj.eval(x, &y, &g, &mut dy, &mut dg);
    Ok((loss, dy, dg, cache))
}

/// Loss value and exact parameter gradients of a batch objective, including
/// through any input-gradient terms.
pub fn loss_and_param_gradients<O: BatchObjective>(
    net: &Mlp,
    obj: &O,
    x: &Array2<f64>,
) -> Result<(f64, Grads)> {
    if net.output_dim() != 1 {
        return Err(Error::Contract(
            "batch objectives are defined for scalar-output networks".into(),
        ));
    }
    let (loss, dy, dg, cache) = loss_and_upstream(net, obj, x)?;
    let grads = if obj.needs_input_gradient() {
        net.grad_objective_backprop(&cache, &dy, &dg)?
    } else {
        let go = dy.insert_axis(ndarray::Axis(1));
        net.backprop(&cache, &go)
    };
    Ok((loss, grads))
}

pub fn eval_loss<O: BatchObjective>(net: &Mlp, obj: &O, x: &Array2<f64>) -> Result<f64> {
    Ok(loss_and_upstream(net, obj, x)?.0)
}

fn param_norm(net: &Mlp) -> f64 {
    let mut s = 0.0;
    for w in net.weights() {
        s += w.iter().map(|v| v * v).sum::<f64>();
    }
    for b in net.biases() {
        s += b.iter().map(|v| v * v).sum::<f64>();
    }
    s.sqrt()
}

/// Minibatch Adam on a batch objective, evaluating every `eval_every`
/// iterations on fresh samples and returning the parameters with the lowest
/// evaluation loss together with the evaluation trace.
pub fn train<O: BatchObjective>(
    net: &Mlp,
    obj: &O,
    cfg: &TrainLoopConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(Mlp, Vec<EvalPoint>)> {
    cfg.validate()?;
    let mut current = net.clone();
    if cfg.max_iterations == 0 {
        return Ok((current, Vec::new()));
    }
    let mut adam = AdamState::new(&current, cfg.adam);
    let mut ctl = LoopCtl::new(cfg.learning_rate, cfg.schedule);
    let mut best: Option<Mlp> = None;

    for iter in 1..=cfg.max_iterations {
        let x = obj.sample_inputs(cfg.batch_size, rng);
        let (loss, grads) = loss_and_param_gradients(&current, obj, &x)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                detail: format!(
                    "training loss {loss}, parameter norm {}",
                    param_norm(&current)
                ),
            });
        }
        adam.step(&mut current, &grads, ctl.lr);
        if let Some(bound) = cfg.weight_norm_bound {
            current.project_weight_norm(bound)?;
        }

        if iter % cfg.eval_every == 0 {
            let xe = obj.sample_inputs(cfg.eval_batch, rng);
            let eval = eval_loss(&current, obj, &xe)?;
            if !eval.is_finite() {
                return Err(Error::Diverged {
                    iteration: iter,
                    detail: format!(
                        "evaluation loss {eval}, parameter norm {}",
                        param_norm(&current)
                    ),
                });
            }
            if ctl.record(iter, eval) {
                best = Some(current.clone());
            }
            if ctl.should_stop(cfg.early_stop_patience) {
                break;
            }
        }
    }
    Ok((best.unwrap_or(current), ctl.into_trace()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    struct FitConstant {
        target: f64,
    }

    impl BatchObjective for FitConstant {
        fn sample_inputs(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
            Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0))
        }

        fn needs_input_gradient(&self) -> bool {
            false
        }

        fn eval(
            &self,
            _x: &Array2<f64>,
            y: &Array1<f64>,
            _g: &Array2<f64>,
            dy: &mut Array1<f64>,
            _dg: &mut Array2<f64>,
        ) -> f64 {
            let n = y.len() as f64;
            let mut loss = 0.0;
            for (i, &yi) in y.iter().enumerate() {
                let e = yi - self.target;
                loss += e * e / n;
                dy[i] = 2.0 * e / n;
            }
            loss
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut r = rng(0);
        let net0 = Mlp::new(vec![1, 2, 1], Activation::Tanh, &mut r).unwrap();
        let mut net = net0.clone();
        let mut grads = Grads::zeros_like(&net);
        for w in &mut grads.weights {
            w.fill(1.0);
        }
        for b in &mut grads.biases {
            b.fill(1.0);
        }
        let mut adam = AdamState::new(&net, AdamHyper::default());
        adam.step(&mut net, &grads, 0.001);
        for (w0, w1) in net0.weights().iter().zip(net.weights()) {
            for (a, b) in w0.iter().zip(w1.iter()) {
                let d = (a - b).abs();
                assert!((0.0009..=0.001).contains(&d), "step {d}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut r = rng(1);
        let net0 = Mlp::new(vec![2, 3, 1], Activation::Relu, &mut r).unwrap();
        let mut net = net0.clone();
        let grads = Grads::zeros_like(&net);
        let mut adam = AdamState::new(&net, AdamHyper::default());
        adam.step(&mut net, &grads, 0.001);
        assert_eq!(net, net0);
    }

    /// Two steps with sign-flipped gradients, checked against a reference
    /// Adam recursion computed on a single scalar parameter.
    #[test]
    fn adam_two_opposed_steps_nearly_cancel() {
        let mut r = rng(2);
        let net0 = Mlp::new(vec![1, 1, 1], Activation::Tanh, &mut r).unwrap();
        let mut net = net0.clone();
        let mut g1 = Grads::zeros_like(&net);
        g1.weights[0].fill(1.0);
        let mut g2 = Grads::zeros_like(&net);
        g2.weights[0].fill(-1.0);
        let mut adam = AdamState::new(&net, AdamHyper::default());
        adam.step(&mut net, &g1, 0.001);
        adam.step(&mut net, &g2, 0.001);

        // Scalar reference recursion.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.001);
        let mut p = net0.weights()[0][[0, 0]];
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 1.0f64), (2, -1.0f64)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1f(t, b1));
            let vhat = v / (1.0 - b1f(t, b2));
            p -= lr * mhat / (vhat.sqrt() + eps);
        }
        let got = net.weights()[0][[0, 0]];
        assert!((got - p).abs() < 1e-15, "{got} vs {p}");
        assert!((got - net0.weights()[0][[0, 0]]).abs() < lr);
    }

    fn b1f(t: usize, b: f64) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn train_fits_constant_toy_problem() {
        let mut r = rng(5);
        let net = Mlp::new(vec![1, 1, 1], Activation::Tanh, &mut r).unwrap();
        let cfg = TrainLoopConfig {
            batch_size: 64,
            max_iterations: 2000,
            eval_every: 100,
            eval_batch: 1000,
            learning_rate: 1e-2,
            ..TrainLoopConfig::default()
        };
        let obj = FitConstant { target: 0.5 };
        let (best, trace) = train(&net, &obj, &cfg, &mut r).unwrap();
        let final_loss = trace.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
        assert!(final_loss <= 1e-4, "loss {final_loss}");
        // Best-model property: reported best is <= every trace entry.
        let mut check = rng(77);
        let xe = obj.sample_inputs(4000, &mut check);
        let best_loss = eval_loss(&best, &obj, &xe).unwrap();
        assert!(best_loss <= 2.0 * final_loss + 1e-4);
    }

    #[test]
    fn train_zero_iterations_returns_initial_net() {
        let mut r = rng(6);
        let net = Mlp::new(vec![1, 2, 1], Activation::Relu, &mut r).unwrap();
        let cfg = TrainLoopConfig {
            max_iterations: 0,
            ..TrainLoopConfig::default()
        };
        let (out, trace) = train(&net, &FitConstant { target: 1.0 }, &cfg, &mut r).unwrap();
        assert_eq!(out, net);
        assert!(trace.is_empty());
    }

    #[test]
    fn train_is_deterministic_for_fixed_seed() {
        let mut r1 = rng(9);
        let net1 = Mlp::new(vec![1, 4, 1], Activation::Tanh, &mut r1).unwrap();
        let cfg = TrainLoopConfig {
            batch_size: 32,
            max_iterations: 300,
            eval_every: 100,
            eval_batch: 500,
            learning_rate: 1e-2,
            ..TrainLoopConfig::default()
        };
        let (a, ta) = train(&net1, &FitConstant { target: 0.3 }, &cfg, &mut r1).unwrap();
        let mut r2 = rng(9);
        let net2 = Mlp::new(vec![1, 4, 1], Activation::Tanh, &mut r2).unwrap();
        let (b, tb) = train(&net2, &FitConstant { target: 0.3 }, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn weight_norm_bound_holds_during_training() {
        let mut r = rng(10);
        let net = Mlp::new(vec![1, 8, 1], Activation::Tanh, &mut r).unwrap();
        let cfg = TrainLoopConfig {
            batch_size: 32,
            max_iterations: 200,
            eval_every: 100,
            eval_batch: 200,
            learning_rate: 5e-2,
            weight_norm_bound: Some(0.5),
            ..TrainLoopConfig::default()
        };
        let (out, _) = train(&net, &FitConstant { target: 5.0 }, &cfg, &mut r).unwrap();
        let v = out.weight_norm_vector().unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 0.5 + 1e-12);
    }
}
