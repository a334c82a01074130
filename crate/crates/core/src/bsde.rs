//! Deep backward scheme: differential-rates driver, one-step regression
//! target, joint (value, z) network training per step, and facelift + clip
//! at constraint dates.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConvexBall, TimeGrids};
use crate::error::{Error, Result};
use crate::facelift::{
    iterative_facelift, iterative_facelift_from, FaceliftRound, FaceliftTrainSpec, Payoff,
    SamplingMixture,
};
use crate::net::{Activation, AdamState, EvalPoint, LoopCtl, Mlp, TrainLoopConfig};
use crate::sde::{simulate_paths, BlackScholesModel, PathBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverMode {
    /// The printed formula: -ry - z.(sigma^-1 (mu-r) x) - (R-r)(y - z.sigma^-1 x).
    Literal,
    /// Same with the last factor replaced by its negative part; coincides
    /// with Literal when R = r.
    NegativePart,
}

fn check_positive_state(x: &[f64]) -> Result<()> {
    if x.iter().any(|&v| v == 0.0) {
        return Err(Error::Domain(
            "driver undefined at zero state component (sigma^-1 does not exist)".into(),
        ));
    }
    Ok(())
}

/// For the diagonal model sigma(x) = sigma*diag(x), the driver depends on z
/// only through s = sum(z)/sigma: sigma^-1 (mu-r) x = (mu-r)/sigma * ones.
struct DriverPartials {
    f: f64,
    df_dy: f64,
    /// identical for every component of z
    df_dz: f64,
}

fn driver_partials(model: &BlackScholesModel, mode: DriverMode, y: f64, z: &[f64]) -> DriverPartials {
    let (r, big_r, mu, sigma) = (model.r, model.big_r, model.mu, model.sigma);
    let s: f64 = z.iter().sum::<f64>() / sigma;
    let a = y - s;
    match mode {
        DriverMode::Literal => DriverPartials {
            f: -r * y - (mu - r) * s - (big_r - r) * a,
            df_dy: -r - (big_r - r),
            df_dz: (-(mu - r) + (big_r - r)) / sigma,
        },
        DriverMode::NegativePart => {
            let neg = a < 0.0;
            let ind = if neg { 1.0 } else { 0.0 };
            DriverPartials {
                f: -r * y - (mu - r) * s - (big_r - r) * (-a).max(0.0),
                df_dy: -r + (big_r - r) * ind,
                df_dz: (-(mu - r) - (big_r - r) * ind) / sigma,
            }
        }
    }
}

/// `f(t, x, y, z)` of the differential-rates pricing BSDE.
pub fn driver_f(
    model: &BlackScholesModel,
    mode: DriverMode,
    _t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
) -> Result<f64> {
    check_positive_state(x)?;
    if z.len() != x.len() {
        return Err(Error::Contract("z and x dimensions differ".into()));
    }
    Ok(driver_partials(model, mode, y, z).f)
}

/// One-step regression target `F = y - f(t,x,y,z) h + z.dB`.
pub fn one_step_target(
    model: &BlackScholesModel,
    mode: DriverMode,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    h: f64,
    db: &[f64],
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    let f = driver_f(model, mode, t, x, y, z)?;
    let zdb: f64 = z.iter().zip(db).map(|(a, b)| a * b).sum();
    Ok(y - f * h + zdb)
}

/// Regression data of one time step: states, Brownian increments, and the
/// next-date values to regress onto.
pub struct OneStepData {
    pub t: f64,
    pub h: f64,
    /// `[n, d]` states at the step start
    pub x: Array2<f64>,
    /// `[n, d]` Brownian increments over the step
    pub db: Array2<f64>,
    /// `[n]` next-date values
    pub next_values: Array1<f64>,
}

fn step_loss_and_upstreams(
    model: &BlackScholesModel,
    mode: DriverMode,
    data: &OneStepData,
    idx: &[usize],
    y: &Array2<f64>,
    z: &Array2<f64>,
    gy: &mut Array2<f64>,
    gz: &mut Array2<f64>,
) -> f64 {
    let m = idx.len();
    let d = data.x.ncols();
    let w = 1.0 / m as f64;
    let h = data.h;
    let mut loss = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        let yi = y[[row, 0]];
        let zi = z.row(row);
        let p = driver_partials(model, mode, yi, zi.as_slice().unwrap());
        let mut zdb = 0.0;
        for j in 0..d {
            zdb += zi[j] * data.db[[i, j]];
        }
        let target = yi - p.f * h + zdb;
        let res = data.next_values[i] - target;
        loss += w * res * res;
        let dl_dtarget = -2.0 * w * res;
        gy[[row, 0]] = dl_dtarget * (1.0 - h * p.df_dy);
        for j in 0..d {
            gz[[row, j]] = dl_dtarget * (-h * p.df_dz + data.db[[i, j]]);
        }
    }
    loss
}

fn gather(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), a.ncols()), |(r, c)| a[[idx[r], c]])
}

/// Joint minibatch training of the value and z networks on the squared
/// one-step residual, with the training-loop evaluation/retention contract.
pub fn train_step(
    model: &BlackScholesModel,
    mode: DriverMode,
    data: &OneStepData,
    init_value: &Mlp,
    init_z: &Mlp,
    cfg: &TrainLoopConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(Mlp, Mlp, Vec<EvalPoint>)> {
    cfg.validate()?;
    let n = data.x.nrows();
    if n < 2 {
        return Err(Error::Config("need at least 2 paths".into()));
    }
    // hold out a prefix of the (already i.i.d.) paths for evaluation
    let n_eval = cfg.eval_batch.min(n / 5).max(1);
    let eval_idx: Vec<usize> = (0..n_eval).collect();
    let pool = n - n_eval;

    let mut value = init_value.clone();
    let mut znet = init_z.clone();
    let mut adam_v = AdamState::new(&value, cfg.adam);
    let mut adam_z = AdamState::new(&znet, cfg.adam);
    let mut ctl = LoopCtl::new(cfg.learning_rate, cfg.schedule);
    let mut best: Option<(Mlp, Mlp)> = None;

    let d = data.x.ncols();
    let mut gy = Array2::zeros((cfg.batch_size, 1));
    let mut gz = Array2::zeros((cfg.batch_size, d));
    let mut idx = vec![0usize; cfg.batch_size];

    let eval_x = gather(&data.x, &eval_idx);
    let mut gye = Array2::zeros((n_eval, 1));
    let mut gze = Array2::zeros((n_eval, d));

    for iter in 1..=cfg.max_iterations {
        for v in idx.iter_mut() {
            *v = n_eval + rng.gen_range(0..pool);
        }
        let x = gather(&data.x, &idx);
        let cv = value.forward_batch_cached(&x)?;
        let cz = znet.forward_batch_cached(&x)?;
        let loss =
            step_loss_and_upstreams(model, mode, data, &idx, cv.outputs(), cz.outputs(), &mut gy, &mut gz);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                detail: format!("one-step residual loss {loss}"),
            });
        }
        let grads_v = value.backprop(&cv, &gy);
        let grads_z = znet.backprop(&cz, &gz);
        adam_v.step(&mut value, &grads_v, ctl.lr);
        adam_z.step(&mut znet, &grads_z, ctl.lr);

        if iter % cfg.eval_every == 0 {
            let yv = value.forward_batch(&eval_x)?;
            let zv = znet.forward_batch(&eval_x)?;
            let eval =
                step_loss_and_upstreams(model, mode, data, &eval_idx, &yv, &zv, &mut gye, &mut gze);
            if !eval.is_finite() {
                return Err(Error::Diverged {
                    iteration: iter,
                    detail: format!("one-step evaluation loss {eval}"),
                });
            }
            if ctl.record(iter, eval) {
                best = Some((value.clone(), znet.clone()));
            }
            if ctl.should_stop(cfg.early_stop_patience) {
                break;
            }
        }
    }
    let (v, z) = best.unwrap_or((value, znet));
    Ok((v, z, ctl.into_trace()))
}

/// Mean positive and negative parts of (post - pre) on uniform box samples —
/// the discrete analogue of the nondecreasing process K at a constraint date.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KIncrement {
    pub mean_up: f64,
    pub mean_down: f64,
}

pub fn k_increment(
    pre: &dyn Fn(&[f64]) -> f64,
    post: &dyn Fn(&[f64]) -> f64,
    box_lo: &[f64],
    box_hi: &[f64],
    n_eval: usize,
    rng: &mut ChaCha12Rng,
) -> KIncrement {
    let d = box_lo.len();
    let mut up = 0.0;
    let mut down = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..n_eval {
        for c in 0..d {
            x[c] = rng.gen_range(box_lo[c]..box_hi[c]);
        }
        let diff = post(&x) - pre(&x);
        up += diff.max(0.0);
        down += (-diff).max(0.0);
    }
    KIncrement {
        mean_up: up / n_eval as f64,
        mean_down: down / n_eval as f64,
    }
}

/// Networks attached to one time step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepNets {
    pub value_net: Mlp,
    pub z_net: Option<Mlp>,
    pub step: usize,
    pub facelifted: bool,
    pub clip_m: f64,
}

impl StepNets {
    /// Value evaluation with the scheme's clip applied.
    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_net.forward(x)?[0].clamp(-self.clip_m, self.clip_m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub grids: TimeGrids,
    pub constrained: bool,
    pub driver_mode: DriverMode,
    /// Clip bound M; derived from the facelifted terminal payoff when absent.
    pub clip_m: Option<f64>,
    pub facelift: FaceliftTrainSpec,
    /// Training spec for the terminal-payoff facelift; falls back to
    /// `facelift`. The terminal fit sets the bias of the whole backward
    /// pass, so it usually deserves a larger budget than the warm-started
    /// re-facelifts at interior constraint dates.
    #[serde(default)]
    pub terminal_facelift: Option<FaceliftTrainSpec>,
    pub step_hidden: Vec<usize>,
    pub step_activation: Activation,
    pub step_train: TrainLoopConfig,
    pub n_paths: usize,
    /// Initialize each step's networks from the next step's trained ones.
    pub warm_start: bool,
}

impl SchemeConfig {
    /// Reduced-cost preset: 2x50 nets, capped iterations with early stopping,
    /// 1e5 paths, facelift sampling box from the terminal lognormal quantiles.
    pub fn desk(model: &BlackScholesModel, horizon: f64, steps: usize) -> Result<Self> {
        let grids = TimeGrids::uniform(horizon, steps, 1)?;
        let mut facelift = FaceliftTrainSpec::desk(model.dim);
        let (lo, hi) = sampling_box(model, horizon);
        facelift.box_lo = lo;
        facelift.box_hi = hi;
        facelift.sampling = Some(terminal_sampling(model, horizon, 0.10));
        facelift.rounds = 2;
        facelift.train.max_iterations = 6000;
        facelift.train.early_stop_patience = Some(10);
        // Interior re-facelifts warm-start from the value net itself, which
        // is also the domination floor; the one-sided penalty then parks the
        // net at floor + (SGD noise margin), and that margin scales with the
        // learning rate. Keep it small.
        facelift.train.learning_rate = 1e-3;
        let mut terminal = facelift.clone();
        terminal.rounds = 3;
        terminal.train.max_iterations = 20_000;
        terminal.train.early_stop_patience = Some(25);
        // The terminal facelift is a cold start; the L1 objective needs a
        // larger rate to converge within the iteration budget, and an
        // occasional start dies entirely — train several and keep the best.
        terminal.train.learning_rate = 5e-3;
        terminal.n_starts = 3;
        Ok(SchemeConfig {
            grids,
            constrained: true,
            driver_mode: DriverMode::Literal,
            clip_m: None,
            facelift,
            terminal_facelift: Some(terminal),
            step_hidden: vec![50, 50],
            step_activation: Activation::Tanh,
            step_train: TrainLoopConfig {
                max_iterations: 10_000,
                // warm starts make long plateaus common; stop them early
                early_stop_patience: Some(8),
                ..TrainLoopConfig::default()
            },
            n_paths: 100_000,
            warm_start: true,
        })
    }

    pub fn validate(&self, model: &BlackScholesModel) -> Result<()> {
        self.facelift.validate(model.dim)?;
        if let Some(t) = &self.terminal_facelift {
            t.validate(model.dim)?;
        }
        self.step_train.validate()?;
        if self.n_paths < 10 {
            return Err(Error::Config("n_paths too small".into()));
        }
        if let Some(m) = self.clip_m {
            if !(m > 0.0) {
                return Err(Error::Config(format!("clip bound must be positive, got {m}")));
            }
        }
        Ok(())
    }
}

/// Box covering ~3.5 standard deviations of log X_T around its mean, in
/// every coordinate (identical per coordinate for the iid model).
pub fn sampling_box(model: &BlackScholesModel, horizon: f64) -> (Vec<f64>, Vec<f64>) {
    let m = (model.mu - 0.5 * model.sigma * model.sigma) * horizon;
    let s = model.sigma * horizon.sqrt();
    let lo: Vec<f64> = model.x0.iter().map(|&x| x * (m - 3.5 * s).exp()).collect();
    let hi: Vec<f64> = model.x0.iter().map(|&x| x * (m + 3.5 * s).exp()).collect();
    (lo, hi)
}

/// Training-input distribution matching the state process at the horizon:
/// lognormal per coordinate, mixed with a uniform share over the box. Fits
/// the facelift where the paths actually live; a uniform-over-box fit wastes
/// most of its budget on tails the backward regression never sees.
pub fn terminal_sampling(
    model: &BlackScholesModel,
    horizon: f64,
    uniform_share: f64,
) -> SamplingMixture {
    let m = (model.mu - 0.5 * model.sigma * model.sigma) * horizon;
    let s = model.sigma * horizon.sqrt();
    SamplingMixture {
        log_mean: model.x0.iter().map(|&x| x.ln() + m).collect(),
        log_sd: vec![s; model.x0.len()],
        uniform_share,
    }
}

/// Facelift + clip of a trained value net at a constraint date: runs the
/// iterative facelift with the clipped net as target, warm-started from the
/// net itself, and reports the K-increment diagnostic.
pub fn apply_constraint(
    value_net: &Mlp,
    ball: &ConvexBall,
    spec: &FaceliftTrainSpec,
    m_clip: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Mlp, Vec<FaceliftRound>, KIncrement)> {
    let target = Payoff::net_snapshot(value_net, m_clip)?;
    let (net, rounds) = iterative_facelift_from(value_net, &target, ball, spec, rng)?;
    let pre = |x: &[f64]| value_net.forward(x).unwrap()[0].clamp(-m_clip, m_clip);
    let post = |x: &[f64]| net.forward(x).unwrap()[0].clamp(-m_clip, m_clip);
    let inc = k_increment(&pre, &post, &spec.box_lo, &spec.box_hi, spec.n_eval, rng);
    Ok((net, rounds, inc))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiag {
    pub step: usize,
    pub time: f64,
    /// Best evaluation value of the one-step residual loss.
    pub residual_loss: f64,
    pub k_increment: Option<KIncrement>,
    pub facelift_rounds: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub y0: f64,
    pub clip_m: f64,
    pub step_nets: Vec<StepNets>,
    /// Facelifted terminal payoff net (constrained runs only).
    pub terminal_net: Option<Mlp>,
    pub diagnostics: Vec<StepDiag>,
    pub warnings: Vec<String>,
}

fn max_abs_on_box(f: &dyn Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64], rng: &mut ChaCha12Rng) -> f64 {
    let d = lo.len();
    let mut x = vec![0.0; d];
    let mut m = 0.0f64;
    for _ in 0..4000 {
        for c in 0..d {
            x[c] = rng.gen_range(lo[c]..hi[c]);
        }
        m = m.max(f(&x).abs());
    }
    m
}

/// Algorithm: backward loop over the flattened grid with one-step
/// regressions, applying facelift + clip at every constraint date.
pub fn solve(
    model: &BlackScholesModel,
    terminal: &Payoff,
    ball: &ConvexBall,
    scheme: &SchemeConfig,
    seed: u64,
) -> Result<SolveResult> {
    scheme.validate(model)?;
    if terminal.dim != model.dim {
        return Err(Error::Contract("payoff and model dimensions differ".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    if let Some(w) = model.rate_warning() {
        warnings.push(w);
    }

    let paths: PathBatch = simulate_paths(model, &scheme.grids, scheme.n_paths, seed, 0)?;
    let times = paths.times.clone();
    let n_steps = times.len() - 1;
    let d = model.dim;
    let lo = &scheme.facelift.box_lo;
    let hi = &scheme.facelift.box_hi;

    // Terminal condition: facelift the payoff itself when constrained.
    let mut terminal_net = None;
    let mut term_rounds = 0usize;
    if scheme.constrained {
        let term_spec = scheme.terminal_facelift.as_ref().unwrap_or(&scheme.facelift);
        let (net, rounds) = iterative_facelift(terminal, ball, term_spec, &mut rng)
            .map_err(|e| e.in_step(n_steps))?;
        term_rounds = rounds.len();
        terminal_net = Some(net);
    }

    // Clip bound from the (facelifted) terminal payoff.
    let clip_m = match scheme.clip_m {
        Some(m) => m,
        None => {
            let f: Box<dyn Fn(&[f64]) -> f64> = match &terminal_net {
                Some(net) => Box::new(|x: &[f64]| net.forward(x).unwrap()[0]),
                None => Box::new(|x: &[f64]| terminal.eval(x)),
            };
            2.0 * max_abs_on_box(&f, lo, hi, &mut rng).max(1e-6)
        }
    };
    {
        let f: Box<dyn Fn(&[f64]) -> f64> = match &terminal_net {
            Some(net) => Box::new(|x: &[f64]| net.forward(x).unwrap()[0]),
            None => Box::new(|x: &[f64]| terminal.eval(x)),
        };
        let sup = max_abs_on_box(&f, lo, hi, &mut rng);
        if clip_m < sup {
            warnings.push(format!(
                "clip bound M={clip_m} below sup |terminal| ~ {sup}; values will be truncated"
            ));
        }
    }

    // Next-date values for the last step.
    let xt = paths.states_at(n_steps);
    let mut next_values = Array1::zeros(scheme.n_paths);
    for i in 0..scheme.n_paths {
        let row = xt.row(i);
        let x = row.as_slice().unwrap();
        next_values[i] = match &terminal_net {
            Some(net) => net.forward(x)?[0].clamp(-clip_m, clip_m),
            None => terminal.eval(x),
        };
    }

    let mut layer_sizes_v = vec![d];
    layer_sizes_v.extend_from_slice(&scheme.step_hidden);
    layer_sizes_v.push(1);
    let mut layer_sizes_z = layer_sizes_v.clone();
    *layer_sizes_z.last_mut().unwrap() = d;

    let mut value_init = Mlp::new(layer_sizes_v.clone(), scheme.step_activation, &mut rng)?;
    let mut z_init = Mlp::new(layer_sizes_z, scheme.step_activation, &mut rng)?;

    let mut step_nets: Vec<StepNets> = Vec::with_capacity(n_steps);
    let mut diagnostics = Vec::with_capacity(n_steps);
    let constraint_indices: Vec<usize> = (0..scheme.grids.constraint_dates().len())
        .map(|k| scheme.grids.flat_index_of_date(k))
        .collect();

    for j in (0..n_steps).rev() {
        let started = std::time::Instant::now();
        let data = OneStepData {
            t: times[j],
            h: times[j + 1] - times[j],
            x: paths.states_at(j),
            db: paths.increments_at(j),
            next_values,
        };
        let (mut value, znet, trace) = train_step(
            model,
            scheme.driver_mode,
            &data,
            &value_init,
            &z_init,
            &scheme.step_train,
            &mut rng,
        )
        .map_err(|e| e.in_step(j))?;
        let residual_loss = trace.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);

        let mut inc = None;
        let mut rounds = 0usize;
        let at_constraint_date = scheme.constrained && constraint_indices.contains(&j);
        if at_constraint_date {
            let (lifted, frounds, kinc) =
                apply_constraint(&value, ball, &scheme.facelift, clip_m, &mut rng)
                    .map_err(|e| e.in_step(j))?;
            rounds = frounds.len();
            inc = Some(kinc);
            value = lifted;
        }

        // Next-date values for the following (earlier) step.
        if j > 0 {
            let xj = data.x;
            let out = value.forward_batch(&xj)?;
            next_values = out.index_axis(Axis(1), 0).mapv(|v| v.clamp(-clip_m, clip_m));
        } else {
            next_values = Array1::zeros(0);
        }

        if scheme.warm_start {
            value_init = value.clone();
            z_init = znet.clone();
        }
        step_nets.push(StepNets {
            value_net: value,
            z_net: Some(znet),
            step: j,
            facelifted: at_constraint_date,
            clip_m,
        });
        diagnostics.push(StepDiag {
            step: j,
            time: times[j],
            residual_loss,
            k_increment: inc,
            facelift_rounds: rounds,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    step_nets.reverse();
    diagnostics.reverse();
    if scheme.constrained {
        // surface the terminal facelift in the diagnostics as step n_steps
        diagnostics.push(StepDiag {
            step: n_steps,
            time: times[n_steps],
            residual_loss: f64::NAN,
            k_increment: None,
            facelift_rounds: term_rounds,
            wall_time_s: 0.0,
        });
    }

    let y0 = step_nets[0].value_at(&model.x0)?;
    Ok(SolveResult {
        y0,
        clip_m,
        step_nets,
        terminal_net,
        diagnostics,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiRun {
    pub y0s: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

pub fn multi_run(
    model: &BlackScholesModel,
    terminal: &Payoff,
    ball: &ConvexBall,
    scheme: &SchemeConfig,
    seeds: &[u64],
) -> Result<MultiRun> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut y0s = Vec::with_capacity(seeds.len());
    for &s in seeds {
        y0s.push(solve(model, terminal, ball, scheme, s)?.y0);
    }
    let n = y0s.len() as f64;
    let mean = y0s.iter().sum::<f64>() / n;
    let std = (y0s.len() > 1).then(|| {
        (y0s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    Ok(MultiRun {
        y0s,
        seeds: seeds.to_vec(),
        mean,
        std,
    })
}

/// Results CSV: one row per step plus a terminal row per run. Wall times are
/// deliberately excluded so re-runs from a manifest are byte-identical; they
/// go to a separate timing dump.
pub fn write_results_csv<W: std::io::Write>(
    w: &mut W,
    run_id: usize,
    result: &SolveResult,
) -> Result<()> {
    writeln!(
        w,
        "run_id,step,time,residual_loss,k_increment_up,k_increment_down,facelift_rounds,y0"
    )?;
    for dgn in &result.diagnostics {
        let (up, down) = dgn
            .k_increment
            .map_or((String::new(), String::new()), |k| {
                (k.mean_up.to_string(), k.mean_down.to_string())
            });
        writeln!(
            w,
            "{run_id},{},{},{},{up},{down},{},{}",
            dgn.step, dgn.time, dgn.residual_loss, dgn.facelift_rounds, result.y0
        )?;
    }
    Ok(())
}

/// Per-step wall-clock times (not part of the deterministic result set).
pub fn write_timings_csv<W: std::io::Write>(
    w: &mut W,
    run_id: usize,
    result: &SolveResult,
) -> Result<()> {
    writeln!(w, "run_id,step,wall_time_s")?;
    for dgn in &result.diagnostics {
        writeln!(w, "{run_id},{},{}", dgn.step, dgn.wall_time_s)?;
    }
    Ok(())
}

/// Serialize every per-step network of a run into one JSON checkpoint.
pub fn save_checkpoint<W: std::io::Write>(w: &mut W, result: &SolveResult) -> Result<()> {
    serde_json::to_writer(w, &result.step_nets)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint<R: std::io::Read>(r: R) -> Result<Vec<StepNets>> {
    serde_json::from_reader(r).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facelift::facelift_error;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn benchmark(big_r: f64) -> BlackScholesModel {
        BlackScholesModel::benchmark(1, big_r)
    }

    /// Driverless model: f vanishes identically.
    fn zero_driver_model(dim: usize) -> BlackScholesModel {
        BlackScholesModel::new(0.0, 0.3, 0.0, 0.0, vec![1.0; dim]).unwrap()
    }

    #[test]
    fn driver_values() {
        let m = benchmark(0.05); // R = r
        let f = driver_f(&m, DriverMode::Literal, 0.0, &[1.0], 1.0, &[0.0]).unwrap();
        assert!((f - (-0.05)).abs() < 1e-15);

        // R = r kills the borrowing term: f = -ry - z (mu-r)/sigma
        let f = driver_f(&m, DriverMode::Literal, 0.0, &[2.0], 1.0, &[0.3]).unwrap();
        let want = -0.05 - 0.3 * (0.07 - 0.05) / 0.3;
        assert!((f - want).abs() < 1e-15, "{f} vs {want}");

        let m = benchmark(0.07);
        let f = driver_f(&m, DriverMode::Literal, 0.0, &[1.0], 1.0, &[0.0]).unwrap();
        assert!((f - (-0.07)).abs() < 1e-15, "{f}");
    }

    #[test]
    fn driver_modes_agree_when_rates_equal() {
        let m = benchmark(0.05);
        let mut r = rng(1);
        for _ in 0..50 {
            let y = r.gen_range(-2.0..2.0);
            let z = [r.gen_range(-1.0..1.0)];
            let a = driver_f(&m, DriverMode::Literal, 0.1, &[1.2], y, &z).unwrap();
            let b = driver_f(&m, DriverMode::NegativePart, 0.1, &[1.2], y, &z).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn driver_rejects_zero_state() {
        let m = benchmark(0.05);
        assert!(driver_f(&m, DriverMode::Literal, 0.0, &[0.0], 1.0, &[0.0]).is_err());
    }

    #[test]
    fn one_step_target_values() {
        let m = zero_driver_model(1);
        let v = one_step_target(&m, DriverMode::Literal, 0.0, &[1.0], 1.0, &[0.0], 0.05, &[0.1])
            .unwrap();
        assert_eq!(v, 1.0);
        let m2 = zero_driver_model(2);
        let v = one_step_target(
            &m2,
            DriverMode::Literal,
            0.0,
            &[1.0, 1.0],
            0.0,
            &[1.0, 1.0],
            0.05,
            &[0.1, -0.1],
        )
        .unwrap();
        assert!(v.abs() < 1e-15);
        let v = one_step_target(&m, DriverMode::Literal, 0.0, &[1.0], 2.0, &[0.0], 0.05, &[0.3])
            .unwrap();
        assert_eq!(v, 2.0);
    }

    fn one_step_data(model: &BlackScholesModel, g: impl Fn(f64) -> f64, n: usize, seed: u64) -> OneStepData {
        let grids = TimeGrids::uniform(0.05, 1, 1).unwrap();
        let paths = simulate_paths(model, &grids, n, seed, 0).unwrap();
        let x1 = paths.states_at(1);
        let next_values = Array1::from_iter((0..n).map(|i| g(x1[[i, 0]])));
        OneStepData {
            t: 0.0,
            h: 0.05,
            x: paths.states_at(0),
            db: paths.increments_at(0),
            next_values,
        }
    }

    fn step_cfg(iters: usize) -> TrainLoopConfig {
        TrainLoopConfig {
            batch_size: 256,
            max_iterations: iters,
            eval_every: 100,
            eval_batch: 1000,
            learning_rate: 1e-2,
            ..TrainLoopConfig::default()
        }
    }

    #[test]
    fn train_step_constant_payoff() {
        let m = zero_driver_model(1);
        let data = one_step_data(&m, |_| 0.7, 5000, 3);
        let mut r = rng(4);
        let v0 = Mlp::new(vec![1, 20, 1], Activation::Tanh, &mut r).unwrap();
        let z0 = Mlp::new(vec![1, 20, 1], Activation::Tanh, &mut r).unwrap();
        let (v, z, trace) =
            train_step(&m, DriverMode::Literal, &data, &v0, &z0, &step_cfg(1500), &mut r).unwrap();
        let best = trace.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-4, "residual {best}");
        for &x in &[0.95, 1.0, 1.05] {
            assert!((v.forward(&[x]).unwrap()[0] - 0.7).abs() < 0.02);
            assert!(z.forward(&[x]).unwrap()[0].abs() < 0.02);
        }
    }

    #[test]
    fn train_step_identity_payoff_recovers_delta() {
        // mu = 0 GBM martingale: Y_t = x, Z = sigma x over one short step
        let m = zero_driver_model(1);
        let data = one_step_data(&m, |x| x, 20_000, 5);
        let mut r = rng(6);
        let v0 = Mlp::new(vec![1, 30, 1], Activation::Tanh, &mut r).unwrap();
        let z0 = Mlp::new(vec![1, 30, 1], Activation::Tanh, &mut r).unwrap();
        let (v, z, _) =
            train_step(&m, DriverMode::Literal, &data, &v0, &z0, &step_cfg(4000), &mut r).unwrap();
        for &x in &[0.95, 1.0, 1.05] {
            let vd = v.forward(&[x]).unwrap()[0];
            let zd = z.forward(&[x]).unwrap()[0];
            assert!((vd - x).abs() / x < 0.05, "value {vd} at {x}");
            assert!((zd - 0.3 * x).abs() / (0.3 * x) < 0.05, "z {zd} at {x}");
        }
    }

    #[test]
    fn train_step_deterministic() {
        let m = zero_driver_model(1);
        let data = one_step_data(&m, |x| x, 2000, 7);
        let run = || {
            let mut r = rng(9);
            let v0 = Mlp::new(vec![1, 10, 1], Activation::Tanh, &mut r).unwrap();
            let z0 = Mlp::new(vec![1, 10, 1], Activation::Tanh, &mut r).unwrap();
            train_step(&m, DriverMode::Literal, &data, &v0, &z0, &step_cfg(300), &mut r).unwrap()
        };
        let (a, az, at) = run();
        let (b, bz, bt) = run();
        assert_eq!(a, b);
        assert_eq!(az, bz);
        assert_eq!(at, bt);
    }

    #[test]
    fn k_increment_trivial_and_ordered() {
        let f = |x: &[f64]| x[0];
        let mut r = rng(10);
        let inc = k_increment(&f, &f, &[0.0], &[1.0], 1000, &mut r);
        assert_eq!(inc.mean_up, 0.0);
        assert_eq!(inc.mean_down, 0.0);
        let g = |x: &[f64]| x[0] + 0.5;
        let inc = k_increment(&f, &g, &[0.0], &[1.0], 1000, &mut r);
        assert!((inc.mean_up - 0.5).abs() < 1e-12);
        assert_eq!(inc.mean_down, 0.0);
    }

    #[test]
    fn solve_single_step_constant_payoff() {
        let m = zero_driver_model(1);
        let mut scheme = SchemeConfig::desk(&m, 0.05, 1).unwrap();
        scheme.constrained = false;
        scheme.n_paths = 5000;
        scheme.step_hidden = vec![20];
        scheme.step_train = step_cfg(2000);
        let payoff = Payoff::custom(1, 0.0, |_| 0.7);
        let ball = ConvexBall::new(10.0, 1).unwrap();
        let out = solve(&m, &payoff, &ball, &scheme, 42).unwrap();
        assert!((out.y0 - 0.7).abs() <= 1e-3, "{}", out.y0);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn multi_run_statistics() {
        let m = zero_driver_model(1);
        let mut scheme = SchemeConfig::desk(&m, 0.05, 1).unwrap();
        scheme.constrained = false;
        scheme.n_paths = 2000;
        scheme.step_hidden = vec![10];
        scheme.step_train = step_cfg(400);
        let payoff = Payoff::custom(1, 0.0, |_| 0.5);
        let ball = ConvexBall::new(10.0, 1).unwrap();
        let single = multi_run(&m, &payoff, &ball, &scheme, &[1]).unwrap();
        assert!(single.std.is_none());
        let multi = multi_run(&m, &payoff, &ball, &scheme, &[1, 2]).unwrap();
        assert!(multi.std.is_some());
        let again = multi_run(&m, &payoff, &ball, &scheme, &[1, 2]).unwrap();
        assert_eq!(multi.y0s, again.y0s);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut r = rng(12);
        let nets = vec![StepNets {
            value_net: Mlp::new(vec![1, 5, 1], Activation::Tanh, &mut r).unwrap(),
            z_net: Some(Mlp::new(vec![1, 5, 1], Activation::Tanh, &mut r).unwrap()),
            step: 0,
            facelifted: true,
            clip_m: 2.0,
        }];
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &SolveResult {
            y0: 0.0,
            clip_m: 2.0,
            step_nets: nets.clone(),
            terminal_net: None,
            diagnostics: vec![],
            warnings: vec![],
        })
        .unwrap();
        let back = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].value_net, nets[0].value_net);
    }

    #[test]
    fn apply_constraint_feasible_net_is_stable() {
        // a gently sloped net is already feasible for radius 2: the facelift
        // should return (approximately) the same function
        let mut r = rng(20);
        use ndarray::{arr1, arr2};
        let value = Mlp::from_parts(
            vec![1, 1, 1],
            Activation::Relu,
            vec![arr2(&[[1.0]]), arr2(&[[0.5]])],
            vec![arr1(&[0.0]), arr1(&[0.1])],
        )
        .unwrap();
        let ball = ConvexBall::new(2.0, 1).unwrap();
        let mut spec = FaceliftTrainSpec::desk(1);
        spec.hidden = vec![20, 20];
        spec.rounds = 2;
        spec.n_eval = 2000;
        spec.train = step_cfg(2500);
        // warm start from a net with the same shape as `value`
        let target = Payoff::net_snapshot(&value, 10.0).unwrap();
        let (net, _rounds) = iterative_facelift_from(
            &Mlp::new(spec.layer_sizes(1), spec.activation, &mut r).unwrap(),
            &target,
            &ball,
            &spec,
            &mut r,
        )
        .unwrap();
        let (mse, _) = facelift_error(
            &net,
            &|x: &[f64]| value.forward(x).unwrap()[0],
            &[0.6],
            &[1.4],
            2000,
            &mut r,
        )
        .unwrap();
        assert!(mse <= 1e-3, "{mse}");
    }
}
