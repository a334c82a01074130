//! Diffusion model and path simulation: Euler scheme on the flattened grid
//! and exact log-normal terminal sampling for the reference pricer.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constraint::TimeGrids;
use crate::error::{Error, Result};

/// Geometric Brownian motion with scalar volatility applied per coordinate
/// (diagonal diffusion), plus the lending/borrowing rates of the pricing
/// driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackScholesModel {
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
    pub big_r: f64,
    pub x0: Vec<f64>,
    pub dim: usize,
}

impl BlackScholesModel {
    pub fn new(mu: f64, sigma: f64, r: f64, big_r: f64, x0: Vec<f64>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        if x0.is_empty() || x0.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config(
                "x0 must be nonempty and positive componentwise".into(),
            ));
        }
        let dim = x0.len();
        Ok(BlackScholesModel {
            mu,
            sigma,
            r,
            big_r,
            x0,
            dim,
        })
    }

    /// The paper's 1D benchmark model: T=1, r=0.05, mu=0.07, sigma=0.3, x0=1.
    pub fn benchmark(dim: usize, big_r: f64) -> Self {
        BlackScholesModel::new(0.07, 0.3, 0.05, big_r, vec![1.0; dim]).unwrap()
    }

    /// `R >= r` is the economic convention; violating it is allowed but
    /// worth surfacing to the caller.
    pub fn rate_warning(&self) -> Option<String> {
        (self.big_r < self.r).then(|| {
            format!(
                "borrowing rate R={} below lending rate r={}",
                self.big_r, self.r
            )
        })
    }
}

/// One Euler step `x' = x + mu*x*dt + sigma*x.dB` componentwise.
pub fn euler_step(model: &BlackScholesModel, x: &[f64], dt: f64, db: &[f64], out: &mut [f64]) {
    debug_assert!(dt > 0.0);
    for i in 0..x.len() {
        out[i] = x[i] + model.mu * x[i] * dt + model.sigma * x[i] * db[i];
    }
}

/// Euler paths over the flattened grid, with the Brownian increments kept for
/// reuse in the one-step regression losses.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub times: Vec<f64>,
    /// `[n_paths, n_times, dim]`
    pub states: Array3<f64>,
    /// `[n_paths, n_times - 1, dim]`
    pub increments: Array3<f64>,
    pub seed: u64,
    pub stream_base: u64,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn n_times(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// States at one grid index as a `[n_paths, dim]` matrix.
    pub fn states_at(&self, t_idx: usize) -> Array2<f64> {
        self.states
            .index_axis(ndarray::Axis(1), t_idx)
            .to_owned()
    }

    pub fn increments_at(&self, t_idx: usize) -> Array2<f64> {
        self.increments
            .index_axis(ndarray::Axis(1), t_idx)
            .to_owned()
    }

    /// Dump as CSV rows `(path_id, time, coord, value)`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "path_id,time,coord,value")?;
        for p in 0..self.n_paths() {
            for (ti, t) in self.times.iter().enumerate() {
                for c in 0..self.dim() {
                    writeln!(w, "{p},{t},{c},{}", self.states[[p, ti, c]])?;
                }
            }
        }
        Ok(())
    }
}

/// Per-path ChaCha substream so simulation order does not depend on how
/// paths are scheduled.
fn path_rng(seed: u64, stream_base: u64, path: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_base.wrapping_add(path as u64));
    rng
}

pub fn simulate_paths(
    model: &BlackScholesModel,
    grids: &TimeGrids,
    n_paths: usize,
    seed: u64,
    stream_base: u64,
) -> Result<PathBatch> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    let times = grids.flattened();
    let n_times = times.len();
    let d = model.dim;
    let mut states = Array3::<f64>::zeros((n_paths, n_times, d));
    let mut increments = Array3::<f64>::zeros((n_paths, n_times - 1, d));

    for p in 0..n_paths {
        let mut rng = path_rng(seed, stream_base, p);
        let mut x = model.x0.clone();
        for c in 0..d {
            states[[p, 0, c]] = x[c];
        }
        let mut next = vec![0.0; d];
        let mut db = vec![0.0; d];
        for ti in 0..n_times - 1 {
            let dt = times[ti + 1] - times[ti];
            let sqdt = dt.sqrt();
            for c in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                db[c] = sqdt * z;
                increments[[p, ti, c]] = db[c];
            }
            euler_step(model, &x, dt, &db, &mut next);
            x.copy_from_slice(&next);
            for c in 0..d {
                states[[p, ti + 1, c]] = x[c];
            }
        }
    }

    Ok(PathBatch {
        times,
        states,
        increments,
        seed,
        stream_base,
    })
}

/// Exact terminal samples under the risk-neutral measure:
/// `X_T = x0 * exp((r - sigma^2/2) T + sigma sqrt(T) Z)` componentwise.
pub fn sample_terminal_risk_neutral(
    model: &BlackScholesModel,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Array2<f64>> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("T must be positive, got {horizon}")));
    }
    let d = model.dim;
    let drift = (model.r - 0.5 * model.sigma * model.sigma) * horizon;
    let vol = model.sigma * horizon.sqrt();
    let mut out = Array2::<f64>::zeros((n_paths, d));
    for p in 0..n_paths {
        let mut rng = path_rng(seed, stream_base, p);
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            out[[p, c]] = model.x0[c] * (drift + vol * z).exp();
        }
    }
    Ok(out)
}
