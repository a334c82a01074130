//! Scratch driver for timing/accuracy probes of the backward scheme.

use facelift_bsde::bsde::{solve, DriverMode, SchemeConfig};
use facelift_bsde::constraint::ConvexBall;
use facelift_bsde::facelift::{analytic_facelift_case2, Payoff};
use facelift_bsde::sde::BlackScholesModel;

fn main() {
    let constrained = std::env::args().any(|a| a == "--constrained");
    let seed: u64 = std::env::args()
        .skip_while(|a| a != "--seed")
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(1234);
    let arg = |name: &str| {
        std::env::args()
            .skip_while(|a| a != name)
            .nth(1)
            .and_then(|s| s.parse::<f64>().ok())
    };
    let big_r = arg("--big-r").unwrap_or(0.05);
    let steps = arg("--steps").unwrap_or(20.0) as usize;
    let model = BlackScholesModel::benchmark(1, big_r);
    let mut scheme = SchemeConfig::desk(&model, 1.0, steps).unwrap();
    scheme.constrained = constrained;
    if std::env::args().any(|a| a == "--negative-part") {
        scheme.driver_mode = DriverMode::NegativePart;
    }
    let payoff = Payoff::case2();
    let dhat = if constrained {
        arg("--dhat").unwrap_or(2.0)
    } else {
        100.0
    };
    let ball = ConvexBall::new(dhat, 1).unwrap();
    let t0 = std::time::Instant::now();
    let out = solve(&model, &payoff, &ball, &scheme, seed).unwrap();
    let want = if constrained { 0.648 } else { 0.558 };
    println!(
        "seed {seed} y0 = {}  (want {want})  clip_m {}  elapsed {:?}",
        out.y0, out.clip_m, t0.elapsed()
    );
    for w in &out.warnings {
        println!("warning: {w}");
    }
    if let Some(net) = &out.terminal_net {
        // accuracy of the facelifted terminal condition on the display box
        let mut mse = 0.0;
        let mut sup = 0.0f64;
        let n = 2001;
        for i in 0..n {
            let x = 0.6 + 0.8 * i as f64 / (n - 1) as f64;
            let e = net.forward(&[x]).unwrap()[0] - analytic_facelift_case2(x, dhat).unwrap();
            mse += e * e / n as f64;
            sup = sup.max(e.abs());
        }
        println!("terminal net vs analytic facelift: mse {mse:.3e} sup {sup:.3e}");
    }
    for d in &out.diagnostics {
        let (up, down) = d
            .k_increment
            .map_or((f64::NAN, f64::NAN), |k| (k.mean_up, k.mean_down));
        println!(
            "step {:2} t {:.2} loss {:.3e} rounds {} k_up {:.3e} k_down {:.3e} wall {:.1}s",
            d.step, d.time, d.residual_loss, d.facelift_rounds, up, down, d.wall_time_s
        );
    }
    // value profile at t=0 around x0
    for &x in &[0.8, 0.9, 1.0, 1.1, 1.2] {
        println!(
            "value_0({x}) = {:.4}",
            out.step_nets[0].value_at(&[x]).unwrap()
        );
    }
}
