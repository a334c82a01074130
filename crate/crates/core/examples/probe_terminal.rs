//! Isolates the terminal-facelift contribution to the scheme's price bias:
//! trains the facelift exactly as `solve` does and reports the discounted
//! risk-neutral expectation of (net - analytic facelift).

use facelift_bsde::bsde::{sampling_box, SchemeConfig};
use facelift_bsde::constraint::ConvexBall;
use facelift_bsde::facelift::{analytic_facelift_case2, iterative_facelift, Payoff};
use facelift_bsde::sde::BlackScholesModel;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let share: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(-1.0);
    let model = BlackScholesModel::benchmark(1, 0.05);
    let mut scheme = SchemeConfig::desk(&model, 1.0, 20).unwrap();
    let spec = scheme.terminal_facelift.as_mut().unwrap();
    if iters > 0 {
        spec.train.max_iterations = iters;
    }
    if share >= 0.0 {
        spec.sampling.as_mut().unwrap().uniform_share = share;
    }
    let spec = &*spec;
    let (lo, hi) = sampling_box(&model, 1.0);
    println!("box [{:.4}, {:.4}]  iters {}", lo[0], hi[0], spec.train.max_iterations);
    let ball = ConvexBall::new(2.0, 1).unwrap();
    let payoff = Payoff::case2();
    let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(11);
    let t0 = std::time::Instant::now();
    let (net, rounds) = iterative_facelift(&payoff, &ball, spec, &mut rng).unwrap();
    for r in &rounds {
        println!("round {}: mse vs payoff {:.3e}", r.round, r.mse_vs_target);
    }
    println!("trained in {:?}", t0.elapsed());

    // Gauss-type quadrature over the lognormal density with drift r.
    let (r_, sig, t) = (model.r, model.sigma, 1.0);
    let m = (r_ - 0.5 * sig * sig) * t;
    let sd = sig * t.sqrt();
    let n = 40_001;
    let (mut e_signed, mut e_abs, mut mass) = (0.0, 0.0, 0.0);
    let mut sup: f64 = 0.0;
    for i in 0..n {
        // integrate over +-6 sd in log space
        let z = -6.0 + 12.0 * i as f64 / (n - 1) as f64;
        let x = (m + sd * z).exp();
        let w = (-0.5 * z * z).exp();
        let f = analytic_facelift_case2(x, 2.0).unwrap();
        let nn = net.forward(&[x]).unwrap()[0];
        e_signed += w * (nn - f);
        e_abs += w * (nn - f).abs();
        mass += w;
        if x >= lo[0] && x <= hi[0] {
            sup = sup.max((nn - f).abs());
        }
    }
    let disc = (-r_ * t).exp();
    println!(
        "E_Q[net - F] = {:.4}  E_Q|net - F| = {:.4}  (discounted: {:.4})  sup on box {:.3}",
        e_signed / mass,
        e_abs / mass,
        disc * e_signed / mass,
        sup
    );
}
