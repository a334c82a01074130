//! Independent reference prices for R = r: exact call-decomposition pricing
//! of piecewise-linear payoffs and risk-neutral Monte Carlo.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::facelift::{analytic_facelift_case2, Payoff};
use crate::sde::{sample_terminal_risk_neutral, BlackScholesModel};

/// Continuous piecewise-linear function on the real line: `slopes[0]` left of
/// the first breakpoint, `slopes[i]` between breakpoints i-1 and i,
/// `slopes[n]` to the right, anchored by the value at the first breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear1D {
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    pub value_at_first: f64,
}

impl PiecewiseLinear1D {
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>, value_at_first: f64) -> Result<Self> {
        if breakpoints.is_empty() || slopes.len() != breakpoints.len() + 1 {
            return Err(Error::Config(format!(
                "{} breakpoints need {} slopes, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                slopes.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("breakpoints must be strictly sorted".into()));
        }
        if breakpoints
            .iter()
            .chain(&slopes)
            .any(|v| !v.is_finite())
            || !value_at_first.is_finite()
        {
            return Err(Error::Config("non-finite piecewise-linear data".into()));
        }
        Ok(PiecewiseLinear1D {
            breakpoints,
            slopes,
            value_at_first,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let b0 = self.breakpoints[0];
        if x <= b0 {
            return self.value_at_first + self.slopes[0] * (x - b0);
        }
        let mut v = self.value_at_first;
        let mut prev = b0;
        for (i, &b) in self.breakpoints.iter().enumerate().skip(1) {
            if x <= b {
                return v + self.slopes[i] * (x - prev);
            }
            v += self.slopes[i] * (b - prev);
            prev = b;
        }
        v + self.slopes[self.breakpoints.len()] * (x - prev)
    }

    /// Maximum absolute slope (the Lipschitz constant).
    pub fn lipschitz(&self) -> f64 {
        self.slopes.iter().fold(0.0, |a, s| a.max(s.abs()))
    }

    pub fn as_payoff(&self) -> Payoff {
        let pw = self.clone();
        Payoff::custom(1, self.lipschitz(), move |x| pw.eval(x[0]))
    }
}

/// The analytic facelift of case 2 as an explicit piecewise-linear function:
/// zero up to 1 - 0.8/dhat, slope dhat up to 1, flat to 1.2, slope 1 after.
pub fn facelifted_case2_pw(dhat: f64) -> Result<PiecewiseLinear1D> {
    analytic_facelift_case2(1.0, dhat)?; // range check
    PiecewiseLinear1D::new(
        vec![1.0 - 0.8 / dhat, 1.0, 1.2],
        vec![0.0, dhat, 0.0, 1.0],
        0.0,
    )
}

/// Standard Black–Scholes call (zero dividend).
pub fn bs_call(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> Result<f64> {
    if !(s > 0.0) || k < 0.0 || !(sigma > 0.0) || t < 0.0 {
        return Err(Error::Domain(format!(
            "bs_call out of domain: s={s} k={k} sigma={sigma} t={t}"
        )));
    }
    if t == 0.0 {
        return Ok((s - k).max(0.0));
    }
    if k == 0.0 {
        return Ok(s);
    }
    let sq = sigma * t.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * t) / sq;
    let d2 = d1 - sq;
    let n = Normal::new(0.0, 1.0).unwrap();
    Ok(s * n.cdf(d1) - k * (-r * t).exp() * n.cdf(d2))
}

/// Exact discounted risk-neutral expectation of a piecewise-linear payoff of
/// the terminal lognormal, by decomposing it into a constant, a forward and
/// calls at each breakpoint. For d > 1 the payoff is read as the separable
/// average, whose expectation equals the 1D price (iid coordinates).
pub fn closed_form_price(model: &BlackScholesModel, pw: &PiecewiseLinear1D, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("T must be positive, got {t}")));
    }
    let x0 = model.x0[0];
    if model.x0.iter().any(|&v| v != x0) {
        return Err(Error::Contract(
            "separable pricing assumes identical initial values".into(),
        ));
    }
    let disc = (-model.r * t).exp();
    let b0 = pw.breakpoints[0];
    let s0 = pw.slopes[0];
    // f(x) = f(b0) + s0 (x - b0) + sum_i (s_i - s_{i-1}) (x - b_i)^+
    let mut price = disc * (pw.value_at_first - s0 * b0) + s0 * x0;
    for (i, &b) in pw.breakpoints.iter().enumerate() {
        let ds = pw.slopes[i + 1] - pw.slopes[i];
        if ds != 0.0 {
            price += ds * bs_call(x0, b, model.r, model.sigma, t)?;
        }
    }
    Ok(price)
}

/// Discounted Monte-Carlo price of an arbitrary payoff of the exact terminal
/// lognormal, with its standard error.
pub fn mc_price(
    model: &BlackScholesModel,
    payoff: &Payoff,
    t: f64,
    n_samples: usize,
    rng_seed: u64,
    stream_base: u64,
) -> Result<(f64, f64)> {
    if payoff.dim != model.dim {
        return Err(Error::Contract(
            "payoff and model dimensions differ".into(),
        ));
    }
    let x = sample_terminal_risk_neutral(model, t, n_samples, rng_seed, stream_base)?;
    let disc = (-model.r * t).exp();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for i in 0..n_samples {
        let v = payoff.eval(x.row(i).as_slice().unwrap());
        sum += v;
        sum2 += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((disc * mean, disc * (var / n).sqrt()))
}

/// Fit a 1D piecewise-linear function to samples of `f` on a uniform grid,
/// placing breakpoints where the local slope changes by more than `kink_tol`
/// (used to turn grid-oracle facelifts into pricable payoffs; slopes at the
/// box edges extrapolate linearly).
pub fn fit_piecewise_linear(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    n_grid: usize,
    kink_tol: f64,
) -> Result<PiecewiseLinear1D> {
    if !(lo < hi) || n_grid < 3 {
        return Err(Error::Config("need lo < hi and at least 3 grid points".into()));
    }
    let h = (hi - lo) / (n_grid - 1) as f64;
    let xs: Vec<f64> = (0..n_grid).map(|i| lo + i as f64 * h).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let slopes_raw: Vec<f64> = ys.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    // breakpoints: box edges plus every grid point where the slope jumps
    let mut breakpoints = vec![xs[0]];
    for i in 1..slopes_raw.len() {
        if (slopes_raw[i] - slopes_raw[i - 1]).abs() > kink_tol {
            breakpoints.push(xs[i]);
        }
    }
    if *breakpoints.last().unwrap() < xs[n_grid - 1] {
        breakpoints.push(xs[n_grid - 1]);
    }
    // interior slopes from the sampled values; extrapolate with the edge
    // segments beyond the box
    let mut slopes = Vec::with_capacity(breakpoints.len() + 1);
    slopes.push(0.0);
    for w in breakpoints.windows(2) {
        slopes.push((f(w[1]) - f(w[0])) / (w[1] - w[0]));
    }
    slopes[0] = slopes[1];
    slopes.push(slopes[breakpoints.len() - 1]);
    PiecewiseLinear1D::new(breakpoints, slopes, ys[0])
}

/// CSV row per configured price: (config_id, method, price, stderr, n_samples).
pub fn write_price_csv<W: std::io::Write>(
    w: &mut W,
    rows: &[(String, String, f64, f64, usize)],
) -> Result<()> {
    writeln!(w, "config_id,method,price,stderr,n_samples")?;
    for (id, method, price, stderr, n) in rows {
        writeln!(w, "{id},{method},{price},{stderr},{n}")?;
    }
    Ok(())
}
