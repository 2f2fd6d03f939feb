use ndarray::{Array1, Array2};

use crate::env::maze::PointMaze;
use crate::error::{QamError, Result};

/// Closed-form moments of the tilted Gaussian
/// `N(mu, diag(var)) * exp(tau (b . a - a . diag(c) a / 2))` per coordinate:
/// posterior variance `1 / (1/var + tau c)` and mean
/// `var' * (mu / var + tau b)`.
pub fn tilted_gaussian_oracle(
    mu: &Array1<f64>,
    var: &Array1<f64>,
    tau: f64,
    b: &Array1<f64>,
    c: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let d = mu.len();
    if var.len() != d || b.len() != d || c.len() != d {
        return Err(QamError::config("oracle parameter dimensions disagree"));
    }
    let mut mean = Array1::zeros(d);
    let mut out_var = Array1::zeros(d);
    for i in 0..d {
        let precision = 1.0 / var[i] + tau * c[i];
        if precision <= 0.0 {
            return Err(QamError::domain(format!(
                "nonpositive posterior precision at coordinate {i}"
            )));
        }
        out_var[i] = 1.0 / precision;
        mean[i] = out_var[i] * (mu[i] / var[i] + tau * b[i]);
    }
    Ok((mean, out_var))
}

/// Independent verification of the tilted moments by direct Simpson
/// quadrature of the unnormalized 1-D density, coordinate by coordinate.
pub fn quadrature_tilted_moments(
    mu: f64,
    var: f64,
    tau: f64,
    b: f64,
    c: f64,
) -> (f64, f64) {
    let sigma = var.sqrt();
    // Integrate well past both the prior and any plausible tilted mean.
    let shift = (tau * b * var).abs() + 1.0;
    let lo = mu - 14.0 * sigma - shift;
    let hi = mu + 14.0 * sigma + shift;
    let n = 20_001; // odd for Simpson
    let h = (hi - lo) / (n as f64 - 1.0);
    let density = |a: f64| -> f64 {
        let prior = -(a - mu) * (a - mu) / (2.0 * var);
        let tilt = tau * (b * a - 0.5 * c * a * a);
        (prior + tilt).exp()
    };
    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for k in 0..n {
        let a = lo + k as f64 * h;
        let w = if k == 0 || k == n - 1 {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = w * density(a);
        z += p;
        m1 += p * a;
        m2 += p * a * a;
    }
    let mean = m1 / z;
    let var_out = m2 / z - mean * mean;
    (mean, var_out)
}

/// Exact policy evaluation on an `n x n` discretization of the maze:
/// `V(c) = 1` on goal cells (absorbing success), otherwise
/// `V(c) = gamma * V(next(c))` under the deterministic cell-center policy.
/// Value iteration runs to a residual below 1e-8.
pub fn dp_policy_value(
    maze: &PointMaze,
    policy: &dyn Fn(&Array1<f64>) -> Array1<f64>,
    grid_n: usize,
    gamma: f64,
) -> Array2<f64> {
    let center = |i: usize| (i as f64 + 0.5) / grid_n as f64;
    let cell_of = |v: f64| -> usize {
        ((v * grid_n as f64).floor() as isize).clamp(0, grid_n as isize - 1) as usize
    };

    // Precompute per-cell successors and absorption.
    let mut goal = vec![false; grid_n * grid_n];
    let mut next = vec![0usize; grid_n * grid_n];
    for ix in 0..grid_n {
        for iy in 0..grid_n {
            let idx = ix * grid_n + iy;
            let pos = ndarray::array![center(ix), center(iy)];
            if maze.at_goal(&pos) {
                goal[idx] = true;
                next[idx] = idx;
                continue;
            }
            let a = policy(&pos);
            let moved = maze.apply_move(&pos, &a);
            next[idx] = cell_of(moved[0]) * grid_n + cell_of(moved[1]);
        }
    }

    let mut v = vec![0.0f64; grid_n * grid_n];
    loop {
        let mut residual: f64 = 0.0;
        let mut v_new = v.clone();
        for idx in 0..v.len() {
            let nv = if goal[idx] { 1.0 } else { gamma * v[next[idx]] };
            residual = residual.max((nv - v[idx]).abs());
            v_new[idx] = nv;
        }
        v = v_new;
        if residual < 1e-8 {
            break;
        }
    }

    let mut grid = Array2::zeros((grid_n, grid_n));
    for ix in 0..grid_n {
        for iy in 0..grid_n {
            grid[[ix, iy]] = v[ix * grid_n + iy];
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn no_tilt_returns_the_prior() {
        let (mean, var) = tilted_gaussian_oracle(
            &array![0.3, -0.2],
            &array![1.5, 0.7],
            0.0,
            &array![1.0, 1.0],
            &array![1.0, 1.0],
        )
        .unwrap();
        assert_eq!(mean, array![0.3, -0.2]);
        assert_eq!(var, array![1.5, 0.7]);
    }

    #[test]
    fn linear_tilt_shifts_the_mean_by_tau_b_var() {
        // mu = 0, var = 1, b = (1, 0), C = 0, tau = 1 -> mean (1, 0), var (1, 1).
        let (mean, var) = tilted_gaussian_oracle(
            &array![0.0, 0.0],
            &array![1.0, 1.0],
            1.0,
            &array![1.0, 0.0],
            &array![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(mean, array![1.0, 0.0]);
        assert_eq!(var, array![1.0, 1.0]);
    }

    #[test]
    fn quadratic_tilt_halves_the_variance() {
        // mu = 0, var = 1, b = 0, C = I, tau = 1 -> mean 0, var (0.5, 0.5).
        let (mean, var) = tilted_gaussian_oracle(
            &array![0.0, 0.0],
            &array![1.0, 1.0],
            1.0,
            &array![0.0, 0.0],
            &array![1.0, 1.0],
        )
        .unwrap();
        assert_eq!(mean, array![0.0, 0.0]);
        assert_eq!(var, array![0.5, 0.5]);
    }

    #[test]
    fn oracle_rejects_nonpositive_precision() {
        assert!(tilted_gaussian_oracle(
            &array![0.0],
            &array![1.0],
            2.0,
            &array![0.0],
            &array![-1.0],
        )
        .is_err());
    }

    #[test]
    fn oracle_matches_direct_quadrature() {
        for (mu, var, tau, b, c) in [
            (0.0, 1.0, 1.0, 1.0, 0.0),
            (0.0, 1.0, 1.0, 0.0, 1.0),
            (0.3, 0.04, 2.0, -0.5, 0.7),
            (-0.4, 2.5, 0.5, 0.2, 0.1),
        ] {
            let (mean, varr) = tilted_gaussian_oracle(
                &array![mu],
                &array![var],
                tau,
                &array![b],
                &array![c],
            )
            .unwrap();
            let (qm, qv) = quadrature_tilted_moments(mu, var, tau, b, c);
            assert!((mean[0] - qm).abs() < 1e-6, "{} vs {qm}", mean[0]);
            assert!((varr[0] - qv).abs() < 1e-6, "{} vs {qv}", varr[0]);
        }
    }

    #[test]
    fn dp_stay_policy_is_zero_off_goal() {
        let maze = PointMaze::standard();
        let stay = |_: &Array1<f64>| array![0.0, 0.0];
        let v = dp_policy_value(&maze, &stay, 20, 0.99);
        // Goal cells are exactly 1; everything else never reaches it.
        for ix in 0..20 {
            for iy in 0..20 {
                let pos = array![(ix as f64 + 0.5) / 20.0, (iy as f64 + 0.5) / 20.0];
                if maze.at_goal(&pos) {
                    assert_eq!(v[[ix, iy]], 1.0);
                } else {
                    assert!(v[[ix, iy]].abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn dp_corridor_discounts_geometrically() {
        // Straight-right policy on the wall-free row y = 0.125: a cell L steps
        // from the goal disc has value gamma^L (cell size = action step = 0.05
        // with grid_n = 20, so each step moves exactly one cell).
        let mut maze = PointMaze::standard();
        maze.walls.clear();
        maze.goal = array![0.925, 0.125];
        let right = |_: &Array1<f64>| array![1.0, 0.0];
        let grid_n = 20;
        let v = dp_policy_value(&maze, &right, grid_n, 0.99);
        let iy = 2; // y = 0.125
        let goal_ix: usize = 18; // x = 0.925
        for ix in 0..=goal_ix {
            let steps: usize = goal_ix - ix;
            // The goal disc has radius 0.08 > cell size, so the neighbor cell
            // is already inside; account for absorption one cell early.
            let inside: usize = 1; // cells within the disc along the row on each side
            let l = steps.saturating_sub(inside);
            if steps <= inside {
                assert_eq!(v[[ix, iy]], 1.0);
            } else {
                let expect = 0.99f64.powi(l as i32);
                assert!(
                    (v[[ix, iy]] - expect).abs() < 1e-9,
                    "ix {ix}: {} vs {expect}",
                    v[[ix, iy]]
                );
            }
        }
    }
}
