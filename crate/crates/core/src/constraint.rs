//! Convex constraint set, its support function, feasibility diagnostics and
//! the time grids of the backward scheme.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Centered Euclidean ball `{ z : ||z||_2 <= radius }` used as the constraint
/// set on the gains process. Contains the origin by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexBall {
    radius: f64,
    dim: usize,
}

impl ConvexBall {
    pub fn new(radius: f64, dim: usize) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Config(format!(
                "ball radius must be positive and finite, got {radius}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("ball dimension must be >= 1".into()));
        }
        Ok(ConvexBall { radius, dim })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_vec(&self, name: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Contract(format!(
                "{name} has length {}, constraint set has dimension {}",
                v.len(),
                self.dim
            )));
        }
        ensure_finite(name, v)
    }

    /// Support function `sup_{z in C} z.y = radius * ||y||_2`.
    pub fn support_function(&self, y: &[f64]) -> Result<f64> {
        self.check_vec("y", y)?;
        Ok(self.radius * norm2(y))
    }

    /// `H(p) = inf_{|y|=1} (support(y) - y.p) = radius - ||p||_2`.
    /// Nonnegative exactly when `p` lies in the ball.
    pub fn h_operator(&self, p: &[f64]) -> Result<f64> {
        self.check_vec("p", p)?;
        Ok(self.radius - norm2(p))
    }

    /// Euclidean projection onto the ball.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_vec("g", g)?;
        Ok(self.project_unchecked(g))
    }

    pub(crate) fn project_unchecked(&self, g: &[f64]) -> Vec<f64> {
        let n = norm2(g);
        if n <= self.radius {
            g.to_vec()
        } else {
            let s = self.radius / n;
            g.iter().map(|v| v * s).collect()
        }
    }

    /// L1 distance from `g` to its Euclidean projection onto the ball.
    /// In dimension 1 this is the exact penalty `(|g| - radius)^+`; in higher
    /// dimension it upper-bounds the exact min-L1 distance and vanishes
    /// exactly on the ball.
    pub fn gradient_penalty(&self, g: &[f64]) -> Result<f64> {
        self.check_vec("g", g)?;
        Ok(self.gradient_penalty_unchecked(g))
    }

    pub(crate) fn gradient_penalty_unchecked(&self, g: &[f64]) -> f64 {
        let n = norm2(g);
        if n <= self.radius {
            return 0.0;
        }
        let s = self.radius / n;
        g.iter().map(|v| (v - v * s).abs()).sum()
    }

    /// Subgradient of `gradient_penalty` with respect to `g`.
    ///
    /// Outside the ball the penalty is `sum_i |g_i| (1 - r/||g||)` and its
    /// gradient is `sign(res) (1 - r/||g||) + (r ||g||_1 / ||g||^3) g` with
    /// `res = g - proj(g)`; on the ball it is zero (convention 0 at the
    /// boundary).
    pub fn gradient_penalty_grad(&self, g: &[f64], out: &mut [f64]) {
        let n = norm2(g);
        if n <= self.radius {
            out.fill(0.0);
            return;
        }
        let s = self.radius / n;
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        let c = self.radius * l1 / (n * n * n);
        for (o, &gi) in out.iter_mut().zip(g) {
            *o = sign(gi) * (1.0 - s) + c * gi;
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Constraint dates `r_0 = 0 < ... < r_kappa = T` together with a sub-grid of
/// each interval `[r_k, r_{k+1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrids {
    constraint_dates: Vec<f64>,
    sub_grids: Vec<Vec<f64>>,
}

impl TimeGrids {
    pub fn new(constraint_dates: Vec<f64>, sub_grids: Vec<Vec<f64>>) -> Result<Self> {
        if constraint_dates.len() < 2 {
            return Err(Error::Config("need at least two constraint dates".into()));
        }
        if constraint_dates[0] != 0.0 {
            return Err(Error::Config("first constraint date must be 0".into()));
        }
        if !strictly_increasing(&constraint_dates) {
            return Err(Error::Config(
                "constraint dates must be strictly increasing".into(),
            ));
        }
        if sub_grids.len() != constraint_dates.len() - 1 {
            return Err(Error::Config(format!(
                "expected {} sub-grids, got {}",
                constraint_dates.len() - 1,
                sub_grids.len()
            )));
        }
        for (k, grid) in sub_grids.iter().enumerate() {
            if grid.len() < 2
                || grid.first() != Some(&constraint_dates[k])
                || grid.last() != Some(&constraint_dates[k + 1])
                || !strictly_increasing(grid)
            {
                return Err(Error::Config(format!(
                    "sub-grid {k} must strictly increase from r_{k} to r_{}",
                    k + 1
                )));
            }
        }
        Ok(TimeGrids {
            constraint_dates,
            sub_grids,
        })
    }

    /// Uniform grids: `kappa` constraint intervals on `[0, T]`, each split
    /// into `n_k` uniform sub-intervals.
    pub fn uniform(horizon: f64, kappa: usize, n_k: usize) -> Result<Self> {
        if !(horizon > 0.0) || kappa == 0 || n_k == 0 {
            return Err(Error::Config(format!(
                "uniform grid needs T > 0, kappa >= 1, n_k >= 1 (got T={horizon}, kappa={kappa}, n_k={n_k})"
            )));
        }
        let dates: Vec<f64> = (0..=kappa)
            .map(|j| horizon * j as f64 / kappa as f64)
            .collect();
        let sub_grids = (0..kappa)
            .map(|k| {
                let (a, b) = (dates[k], dates[k + 1]);
                (0..=n_k)
                    .map(|i| {
                        if i == n_k {
                            b
                        } else {
                            a + (b - a) * i as f64 / n_k as f64
                        }
                    })
                    .collect()
            })
            .collect();
        TimeGrids::new(dates, sub_grids)
    }

    pub fn horizon(&self) -> f64 {
        *self.constraint_dates.last().unwrap()
    }

    pub fn constraint_dates(&self) -> &[f64] {
        &self.constraint_dates
    }

    pub fn sub_grid(&self, k: usize) -> &[f64] {
        &self.sub_grids[k]
    }

    pub fn n_constraint_intervals(&self) -> usize {
        self.sub_grids.len()
    }

    /// All distinct grid times, constraint dates included once.
    pub fn flattened(&self) -> Vec<f64> {
        let mut times = vec![0.0];
        for grid in &self.sub_grids {
            times.extend_from_slice(&grid[1..]);
        }
        times
    }

    /// Index of constraint date `r_k` inside the flattened grid.
    pub fn flat_index_of_date(&self, k: usize) -> usize {
        self.sub_grids[..k].iter().map(|g| g.len() - 1).sum()
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(radius: f64, dim: usize) -> ConvexBall {
        ConvexBall::new(radius, dim).unwrap()
    }

    #[test]
    fn support_function_values() {
        assert_eq!(ball(2.0, 2).support_function(&[3.0, 4.0]).unwrap(), 10.0);
        assert_eq!(ball(0.75, 1).support_function(&[0.0]).unwrap(), 0.0);
        assert_eq!(
            ball(1.0, 4).support_function(&[1.0, 1.0, 1.0, 1.0]).unwrap(),
            2.0
        );
    }

    #[test]
    fn support_function_rejects_non_finite() {
        assert!(ball(1.0, 1).support_function(&[f64::NAN]).is_err());
        assert!(ball(1.0, 2).support_function(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn h_operator_values() {
        assert_eq!(ball(2.0, 2).h_operator(&[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(ball(1.0, 2).h_operator(&[3.0, 4.0]).unwrap(), -4.0);
        assert_eq!(ball(0.5, 1).h_operator(&[0.5]).unwrap(), 0.0);
    }

    #[test]
    fn projection_values() {
        assert_eq!(ball(5.0, 2).project(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        let p = ball(1.0, 2).project(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(ball(2.0, 3).project(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gradient_penalty_values() {
        assert!((ball(2.0, 1).gradient_penalty(&[3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(ball(5.0, 2).gradient_penalty(&[3.0, 4.0]).unwrap(), 0.0);
        let p = ball(1.0, 2).gradient_penalty(&[3.0, 4.0]).unwrap();
        assert!((p - 5.6).abs() < 1e-12, "got {p}");
    }

    /// The implemented multi-d penalty must upper-bound the exact min-L1
    /// distance to the Euclidean ball, computed here by dense search.
    #[test]
    fn gradient_penalty_dominates_exact_l1_distance() {
        let c = ball(1.0, 2);
        let g = [3.0, 4.0];
        let mut exact = f64::INFINITY;
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let x = -1.0 + 2.0 * i as f64 / n as f64;
                let y = -1.0 + 2.0 * j as f64 / n as f64;
                if x * x + y * y <= 1.0 {
                    exact = exact.min((g[0] - x).abs() + (g[1] - y).abs());
                }
            }
        }
        let approx = c.gradient_penalty(&g).unwrap();
        assert!(approx >= exact - 1e-2, "approx {approx} < exact {exact}");
    }

    #[test]
    fn gradient_penalty_grad_matches_finite_differences() {
        let c = ball(0.8, 3);
        let pts = [
            vec![1.0, -2.0, 0.5],
            vec![0.9, 0.3, -0.4],
            vec![3.0, 4.0, 5.0],
        ];
        for g in pts {
            let mut grad = vec![0.0; 3];
            c.gradient_penalty_grad(&g, &mut grad);
            for i in 0..3 {
                let h = 1e-6;
                let mut gp = g.clone();
                let mut gm = g.clone();
                gp[i] += h;
                gm[i] -= h;
                let fd = (c.gradient_penalty(&gp).unwrap() - c.gradient_penalty(&gm).unwrap())
                    / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn uniform_grid_paper_configuration() {
        let g = TimeGrids::uniform(1.0, 20, 1).unwrap();
        assert_eq!(g.constraint_dates().len(), 21);
        for (j, t) in g.constraint_dates().iter().enumerate() {
            assert!((t - 0.05 * j as f64).abs() < 1e-14);
        }
        assert_eq!(g.flattened().len(), 21);
    }

    #[test]
    fn uniform_grid_trivial_and_subdivided() {
        let g = TimeGrids::uniform(1.0, 1, 1).unwrap();
        assert_eq!(g.constraint_dates(), &[0.0, 1.0]);

        let g = TimeGrids::uniform(2.0, 4, 2).unwrap();
        assert_eq!(g.constraint_dates(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        for k in 0..4 {
            let s = g.sub_grid(k);
            assert_eq!(s.len(), 3);
            assert!((s[1] - s[0] - 0.25).abs() < 1e-14);
        }
        assert_eq!(g.flat_index_of_date(2), 4);
        assert_eq!(g.flattened().len(), 9);
    }

    #[test]
    fn uniform_grid_rejects_nonpositive_arguments() {
        assert!(TimeGrids::uniform(0.0, 5, 1).is_err());
        assert!(TimeGrids::uniform(1.0, 0, 1).is_err());
        assert!(TimeGrids::uniform(1.0, 5, 0).is_err());
    }
}
