//! Experiment execution: each experiment writes its artifacts plus a
//! manifest.json holding the fully resolved config, the seeds actually used
//! and the build version. Feeding the manifest back through `--config`
//! reproduces every deterministic artifact byte for byte.

use crate::config::ExperimentConfig;
use facelift_bsde::bsde::{save_checkpoint, solve, write_results_csv, write_timings_csv};
use facelift_bsde::error::{Error, Result};
use facelift_bsde::facelift::{
    analytic_facelift_case2, facelift_error, iterative_facelift, write_error_trace_csv,
    write_profile_csv, GridOracle, Payoff,
};
use facelift_bsde::pricer::{
    closed_form_price, facelifted_case2_pw, fit_piecewise_linear, mc_price, write_price_csv,
};
use facelift_bsde::ConvexBall;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    write_manifest(cfg, &out)?;
    match cfg.experiment.as_str() {
        "bsde-price" => run_bsde(cfg, &out),
        "reference-price" => run_reference(cfg, &out),
        "oracle-dump" => run_oracle_dump(cfg, &out),
        _ => run_facelift(cfg, &out),
    }
}

/// Resolved config + seeds + build version; itself loadable via `--config`
/// (the extra keys are ignored on load).
fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut value = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let obj = value.as_object_mut().expect("config serializes to object");
    obj.insert(
        "build_version".into(),
        serde_json::Value::String(env!("CARGO_PKG_VERSION").into()),
    );
    obj.insert(
        "build_id".into(),
        serde_json::Value::String(env!("BUILD_GIT_HASH").into()),
    );
    obj.insert(
        "resolved_seeds".into(),
        serde_json::to_value(cfg.seeds()).map_err(|e| Error::Config(e.to_string()))?,
    );
    let mut w = BufWriter::new(File::create(out.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &value).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn csv_writer(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn run_facelift(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let payoff = cfg.payoff()?;
    let ball = ConvexBall::new(cfg.dhat, cfg.dim)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    eprintln!(
        "training facelift for {} (dim {}, radius {}, {} rounds x {} iters)",
        cfg.experiment, cfg.dim, cfg.dhat, cfg.facelift.rounds, cfg.facelift.train.max_iterations
    );
    let (net, rounds) = iterative_facelift(&payoff, &ball, &cfg.facelift, &mut rng)?;
    for r in &rounds {
        eprintln!(
            "round {}: mse vs payoff {:.3e} (stderr {:.1e})",
            r.round, r.mse_vs_target, r.mse_stderr
        );
    }

    write_error_trace_csv(&mut csv_writer(out, "error_trace.csv")?, &rounds)?;
    serde_json::to_writer_pretty(
        &mut BufWriter::new(File::create(out.join("facelift_net.json"))?),
        &net,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;

    if cfg.dim == 1 {
        let xs = linspace(cfg.facelift.box_lo[0], cfg.facelift.box_hi[0], cfg.profile_points);
        let dhat = cfg.dhat;
        let analytic_fn = move |x: f64| analytic_facelift_case2(x, dhat).unwrap_or(f64::NAN);
        let analytic: Option<&dyn Fn(f64) -> f64> =
            (cfg.experiment == "facelift-case2" && dhat <= 4.0).then_some(&analytic_fn as _);
        eprintln!("building grid oracle (h = {})", cfg.oracle_h);
        let oracle = GridOracle::for_constraint(
            &payoff,
            &cfg.facelift.box_lo,
            &cfg.facelift.box_hi,
            cfg.oracle_h,
            &ball,
        )?;
        let labels: Vec<String> = rounds.iter().map(|r| format!("net_round{}", r.round)).collect();
        let nets: Vec<(&str, &facelift_bsde::Mlp)> = labels
            .iter()
            .zip(&rounds)
            .map(|(l, r)| (l.as_str(), &r.net))
            .collect();
        write_profile_csv(
            &mut csv_writer(out, "profile.csv")?,
            &xs,
            &payoff,
            analytic,
            Some((&oracle, &ball)),
            &nets,
        )?;
        let target = |x: &[f64]| payoff.eval(x);
        let (mse, se) = facelift_error(
            &net,
            &target,
            &cfg.facelift.box_lo,
            &cfg.facelift.box_hi,
            cfg.facelift.n_eval,
            &mut rng,
        )?;
        eprintln!("final net: mse vs payoff {mse:.3e} (stderr {se:.1e})");
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn run_bsde(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.model()?;
    let terminal = cfg.payoff()?;
    let ball = ConvexBall::new(cfg.dhat, cfg.dim)?;
    let scheme = cfg.scheme()?;
    let seeds = cfg.seeds();

    let mut summary = csv_writer(out, "summary.csv")?;
    writeln!(summary, "run_id,seed,y0")?;
    let mut y0s = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        eprintln!(
            "run {i} (seed {seed}): {} steps, {} paths, constrained = {}",
            cfg.steps, scheme.n_paths, scheme.constrained
        );
        let result = solve(&model, &terminal, &ball, &scheme, seed)?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!("run {i}: y0 = {:.6}", result.y0);
        write_results_csv(&mut csv_writer(out, &format!("results_run{i}.csv"))?, i, &result)?;
        write_timings_csv(&mut csv_writer(out, &format!("timings_run{i}.csv"))?, i, &result)?;
        save_checkpoint(
            &mut BufWriter::new(File::create(out.join(format!("checkpoint_run{i}.json")))?),
            &result,
        )?;
        writeln!(summary, "{i},{seed},{}", result.y0)?;
        y0s.push(result.y0);
    }
    let n = y0s.len() as f64;
    let mean = y0s.iter().sum::<f64>() / n;
    if y0s.len() > 1 {
        let std =
            (y0s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        eprintln!("mean y0 = {mean:.6}, std = {std:.6} over {} runs", y0s.len());
    } else {
        eprintln!("y0 = {mean:.6}");
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn run_reference(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.dim != 1 {
        return Err(Error::Config(
            "reference-price supports dim = 1 only (the separable nD payoff has the same price)"
                .into(),
        ));
    }
    let model = cfg.model()?;
    let t = cfg.horizon;
    let mut rows = Vec::new();

    let raw = fit_piecewise_linear(&|x| facelift_bsde::facelift::payoff_case2(x), 0.0, 4.0, 801, 1e-9)?;
    let id = "unconstrained".to_string();
    rows.push((id.clone(), "closed_form".into(), closed_form_price(&model, &raw, t)?, 0.0, 0));
    let (p, se) = mc_price(&model, &raw.as_payoff(), t, cfg.mc_samples, cfg.seed, 0)?;
    rows.push((id, "mc".into(), p, se, cfg.mc_samples));

    let pw = facelifted_case2_pw(cfg.dhat)?;
    let id = format!("dhat={}", cfg.dhat);
    rows.push((id.clone(), "closed_form".into(), closed_form_price(&model, &pw, t)?, 0.0, 0));
    let (p, se) = mc_price(&model, &pw.as_payoff(), t, cfg.mc_samples, cfg.seed, 1)?;
    rows.push((id, "mc".into(), p, se, cfg.mc_samples));

    for (id, method, price, stderr, _) in &rows {
        if stderr > &0.0 {
            eprintln!("{id} {method}: {price:.6} +- {stderr:.1e}");
        } else {
            eprintln!("{id} {method}: {price:.6}");
        }
    }
    write_price_csv(&mut csv_writer(out, "prices.csv")?, &rows)?;
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn run_oracle_dump(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.dim > 2 {
        return Err(Error::Config(
            "oracle-dump supports dim <= 2 (grid cost grows exponentially)".into(),
        ));
    }
    let payoff = if cfg.dim == 1 { Payoff::case2() } else { Payoff::case2_nd(cfg.dim) };
    let ball = ConvexBall::new(cfg.dhat, cfg.dim)?;
    eprintln!("building grid oracle (dim {}, h = {})", cfg.dim, cfg.oracle_h);
    let oracle = GridOracle::for_constraint(
        &payoff,
        &cfg.facelift.box_lo,
        &cfg.facelift.box_hi,
        cfg.oracle_h,
        &ball,
    )?;

    let mut w = csv_writer(out, "oracle.csv")?;
    if cfg.dim == 1 {
        writeln!(w, "x,payoff,facelift_l2,facelift_l1")?;
        for x in linspace(cfg.facelift.box_lo[0], cfg.facelift.box_hi[0], cfg.profile_points) {
            writeln!(
                w,
                "{x},{},{},{}",
                payoff.eval(&[x]),
                oracle.facelift(&ball, &[x])?,
                oracle.facelift_l1(&ball, &[x])?
            )?;
        }
    } else {
        writeln!(w, "x0,x1,payoff,facelift_l2,facelift_l1")?;
        let side = (cfg.profile_points as f64).sqrt().ceil() as usize;
        let xs0 = linspace(cfg.facelift.box_lo[0], cfg.facelift.box_hi[0], side.max(2));
        let xs1 = linspace(cfg.facelift.box_lo[1], cfg.facelift.box_hi[1], side.max(2));
        for &a in &xs0 {
            for &b in &xs1 {
                writeln!(
                    w,
                    "{a},{b},{},{},{}",
                    payoff.eval(&[a, b]),
                    oracle.facelift(&ball, &[a, b])?,
                    oracle.facelift_l1(&ball, &[a, b])?
                )?;
            }
        }
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}
