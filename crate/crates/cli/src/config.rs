//! Experiment configuration: one JSON-compatible tree with full defaults,
//! flag overrides, validation diagnostics, and desk/full presets.

use facelift_bsde::bsde::{sampling_box, terminal_sampling, DriverMode, SchemeConfig};
use facelift_bsde::constraint::TimeGrids;
use facelift_bsde::error::{Error, Result};
use facelift_bsde::facelift::{FaceliftTrainSpec, NdReading, Payoff};
use facelift_bsde::net::TrainLoopConfig;
use facelift_bsde::sde::BlackScholesModel;
use serde::{Deserialize, Serialize};

pub const EXPERIMENTS: &[&str] = &[
    "facelift-case1",
    "facelift-case2",
    "facelift-case3",
    "facelift-case2nd",
    "bsde-price",
    "reference-price",
    "oracle-dump",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: String,
    // model
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
    pub big_r: f64,
    pub x0: f64,
    pub dim: usize,
    pub horizon: f64,
    // constraint
    pub dhat: f64,
    pub constrained: bool,
    // scheme
    pub steps: usize,
    pub driver_mode: DriverMode,
    pub clip_m: Option<f64>,
    pub step_hidden: Vec<usize>,
    pub step_train: TrainLoopConfig,
    pub n_paths: usize,
    pub warm_start: bool,
    // facelift training
    pub facelift: FaceliftTrainSpec,
    pub nd_reading: NdReading,
    // reference pricing / oracle
    pub mc_samples: usize,
    pub oracle_h: f64,
    pub profile_points: usize,
    // run control
    pub n_runs: usize,
    pub seed: u64,
    pub out_dir: String,
    pub desk_scale: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "facelift-case2".into(),
            mu: 0.07,
            sigma: 0.3,
            r: 0.05,
            big_r: 0.05,
            x0: 1.0,
            dim: 1,
            horizon: 1.0,
            dhat: 2.0,
            constrained: true,
            steps: 20,
            driver_mode: DriverMode::Literal,
            clip_m: None,
            step_hidden: vec![50, 50],
            step_train: TrainLoopConfig {
                max_iterations: 10_000,
                early_stop_patience: Some(25),
                ..TrainLoopConfig::default()
            },
            n_paths: 100_000,
            warm_start: true,
            facelift: FaceliftTrainSpec::desk(1),
            nd_reading: NdReading::PerCoordinateScaled,
            mc_samples: 1_000_000,
            oracle_h: 1e-3,
            profile_points: 201,
            n_runs: 1,
            seed: 1,
            out_dir: "out".into(),
            desk_scale: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))
    }

    /// Fill dimension-dependent defaults and apply the desk/full presets.
    pub fn resolve(&mut self) {
        if self.facelift.box_lo.len() != self.dim {
            if self.experiment == "bsde-price" {
                let model = self.model().unwrap_or_else(|_| {
                    BlackScholesModel::benchmark(self.dim.max(1), self.big_r)
                });
                let (lo, hi) = sampling_box(&model, self.horizon);
                self.facelift.box_lo = lo;
                self.facelift.box_hi = hi;
                if self.facelift.sampling.is_none() {
                    self.facelift.sampling =
                        Some(terminal_sampling(&model, self.horizon, 0.10));
                }
            } else {
                self.facelift.box_lo = vec![0.6; self.dim];
                self.facelift.box_hi = vec![1.4; self.dim];
            }
        }
        if self.desk_scale {
            self.facelift.hidden = vec![50, 50];
            self.step_hidden = vec![50, 50];
            self.facelift.train.max_iterations = self.facelift.train.max_iterations.min(20_000);
            self.step_train.max_iterations = self.step_train.max_iterations.min(10_000);
            self.n_paths = self.n_paths.min(100_000);
            self.mc_samples = self.mc_samples.min(1_000_000);
            if self.experiment == "bsde-price" {
                // inside the scheme the facelift is warm-started every date,
                // so far fewer iterations suffice; a small rate keeps the
                // one-sided penalty from parking the net above its own
                // warm-start floor (the terminal facelift gets its own
                // cold-start rate in scheme())
                self.facelift.train.max_iterations =
                    self.facelift.train.max_iterations.min(6000);
                self.facelift.train.learning_rate = 1e-3;
                self.facelift.train.early_stop_patience = Some(15);
            } else {
                // standalone L1 facelift training crawls at lr 1e-3
                self.facelift.train.learning_rate = 5e-3;
                self.facelift.train.early_stop_patience = Some(30);
            }
        }
    }

    /// All violations, without running anything.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            out.push(format!(
                "unknown experiment '{}'; valid: {}",
                self.experiment,
                EXPERIMENTS.join(", ")
            ));
        }
        if let Err(e) = self.model() {
            out.push(e.to_string());
        }
        if !(self.dhat > 0.0) {
            out.push(format!("constraint radius must be positive, got {}", self.dhat));
        }
        let analytic_needed = matches!(
            self.experiment.as_str(),
            "facelift-case2" | "facelift-case2nd" | "reference-price"
        );
        let eff = if self.experiment == "facelift-case2nd" {
            self.dim as f64 * self.dhat
        } else {
            self.dhat
        };
        if analytic_needed && eff > 4.0 {
            out.push(format!(
                "analytic case-2 facelift requested but only valid for d*dhat <= 4 (got {eff})"
            ));
        }
        if let Err(e) = self.facelift.validate(self.dim) {
            out.push(e.to_string());
        }
        if let Err(e) = self.step_train.validate() {
            out.push(e.to_string());
        }
        if self.n_runs == 0 {
            out.push("n_runs must be >= 1".into());
        }
        if self.steps == 0 {
            out.push("steps must be >= 1".into());
        }
        if !(self.horizon > 0.0) {
            out.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.mc_samples < 2 {
            out.push("mc_samples must be >= 2".into());
        }
        if !(self.oracle_h > 0.0) {
            out.push(format!("oracle_h must be positive, got {}", self.oracle_h));
        }
        if self.profile_points < 2 {
            out.push("profile_points must be >= 2".into());
        }
        if self.dim == 0 {
            out.push("dim must be >= 1".into());
        }
        out
    }

    pub fn model(&self) -> Result<BlackScholesModel> {
        BlackScholesModel::new(self.mu, self.sigma, self.r, self.big_r, vec![self.x0; self.dim.max(1)])
    }

    pub fn payoff(&self) -> Result<Payoff> {
        Ok(match self.experiment.as_str() {
            "facelift-case1" => Payoff::case1(),
            "facelift-case3" => Payoff::case3(),
            "facelift-case2nd" => Payoff::case2_nd(self.dim),
            _ if self.dim > 1 => Payoff::case2_nd(self.dim),
            _ => Payoff::case2(),
        })
    }

    pub fn scheme(&self) -> Result<SchemeConfig> {
        Ok(SchemeConfig {
            grids: TimeGrids::uniform(self.horizon, self.steps, 1)?,
            constrained: self.constrained,
            driver_mode: self.driver_mode,
            clip_m: self.clip_m,
            facelift: self.facelift.clone(),
            // the terminal fit sets the bias of the whole backward pass; at
            // desk scale give it the full standalone budget
            terminal_facelift: self.desk_scale.then(|| {
                let mut t = self.facelift.clone();
                t.rounds = 3;
                t.train.max_iterations = t.train.max_iterations.max(20_000);
                t.train.early_stop_patience = t.train.early_stop_patience.map(|p| p.max(25));
                t.train.learning_rate = t.train.learning_rate.max(5e-3);
                t.n_starts = t.n_starts.max(3);
                t
            }),
            step_hidden: self.step_hidden.clone(),
            step_activation: facelift_bsde::net::Activation::Tanh,
            step_train: self.step_train.clone(),
            n_paths: self.n_paths,
            warm_start: self.warm_start,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_runs as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}
