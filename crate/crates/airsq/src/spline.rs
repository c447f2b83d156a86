//! Cardinal cubic B-spline interpolation of control points into full
//! trajectories, exposed as a precomputed linear map so gradients are exact
//! (`d loss / d control points = basis^T * d loss / d outputs`).

use crate::error::{Error, Result};
use crate::scenario::{Trajectory, Vec2, TRAJ_LEN};

/// Number of control points each prediction head emits.
pub const NUM_CTRL: usize = 8;
/// Spline degree.
pub const DEGREE: usize = 3;

/// Control polygon for one predicted mode: 8 (x, y) points.
pub type ControlPoints = [Vec2; NUM_CTRL];

/// Dense `num_out x num_ctrl` B-spline weight matrix. Rows sum to 1 and all
/// entries are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub num_out: usize,
    pub num_ctrl: usize,
    /// Row-major weights.
    pub weights: Vec<f64>,
}

impl SplineBasis {
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.num_ctrl + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.num_ctrl..(row + 1) * self.num_ctrl]
    }
}

/// Uniform knot vector. Shifted so the valid domain starts at 0:
/// `t_i = i - degree`, giving domain `[0, num_ctrl - degree]`.
fn knot(i: usize, degree: usize) -> f64 {
    i as f64 - degree as f64
}

/// Cox-de Boor recursion for basis function `i` of the given degree at `u`.
fn basis_value(i: usize, degree: usize, u: f64) -> f64 {
    if degree == 0 {
        let t0 = knot(i, DEGREE);
        let t1 = knot(i + 1, DEGREE);
        if t0 <= u && u < t1 {
            1.0
        } else {
            0.0
        }
    } else {
        let t_i = knot(i, DEGREE);
        let t_ik = knot(i + degree, DEGREE);
        let t_i1 = knot(i + 1, DEGREE);
        let t_ik1 = knot(i + degree + 1, DEGREE);
        let left = (u - t_i) / (t_ik - t_i) * basis_value(i, degree - 1, u);
        let right = (t_ik1 - u) / (t_ik1 - t_i1) * basis_value(i + 1, degree - 1, u);
        left + right
    }
}

/// Build the cubic B-spline basis matrix: `num_out` parameters evenly spaced
/// over the valid domain `[0, num_ctrl - degree]`, inclusive of 0 and pulled
/// back from the right end by 1e-9 to stay in-domain.
pub fn build_basis(num_out: usize, num_ctrl: usize) -> Result<SplineBasis> {
    if num_ctrl <= DEGREE {
        return Err(Error::Config(format!(
            "need more than {DEGREE} control points, got {num_ctrl}"
        )));
    }
    if num_out < 2 {
        return Err(Error::Config("need at least 2 output steps".to_string()));
    }
    let span = (num_ctrl - DEGREE) as f64 - 1e-9;
    let mut weights = vec![0.0; num_out * num_ctrl];
    for row in 0..num_out {
        let u = span * row as f64 / (num_out - 1) as f64;
        for col in 0..num_ctrl {
            weights[row * num_ctrl + col] = basis_value(col, DEGREE, u);
        }
    }
    Ok(SplineBasis {
        num_out,
        num_ctrl,
        weights,
    })
}

/// The basis at the fixed production shape (80 steps from 8 control points).
pub fn standard_basis() -> SplineBasis {
    build_basis(TRAJ_LEN, NUM_CTRL).expect("standard shape is valid")
}

/// Interpolate control points into a fully valid trajectory:
/// `output = basis x control_points`, per coordinate.
pub fn interpolate(cp: &ControlPoints, basis: &SplineBasis) -> Trajectory {
    assert_eq!(basis.num_ctrl, NUM_CTRL, "basis shape mismatch");
    assert_eq!(basis.num_out, TRAJ_LEN, "basis shape mismatch");
    let points = (0..basis.num_out)
        .map(|row| {
            let w = basis.row(row);
            let mut x = 0.0;
            let mut y = 0.0;
            for (wk, p) in w.iter().zip(cp.iter()) {
                x += wk * p.x;
                y += wk * p.y;
            }
            Vec2::new(x, y)
        })
        .collect();
    Trajectory {
        points,
        valid: vec![true; basis.num_out],
    }
}

/// Pull a gradient on the interpolated outputs back to the control points:
/// `basis^T x grad_out`.
pub fn backprop_to_control_points(basis: &SplineBasis, grad_out: &[Vec2]) -> ControlPoints {
    assert_eq!(grad_out.len(), basis.num_out);
    let mut grad = [Vec2::zero(); NUM_CTRL];
    for (row, g) in grad_out.iter().enumerate() {
        let w = basis.row(row);
        for (col, wk) in w.iter().enumerate() {
            grad[col].x += wk * g.x;
            grad[col].y += wk * g.y;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: evaluate the spline point at parameter `u` with
    /// de Boor's algorithm (repeated convex combinations), no basis matrix.
    fn de_boor_point(cp: &[f64], u: f64) -> f64 {
        // Find the knot span index k with t_k <= u < t_{k+1}.
        let n = cp.len();
        let mut k = DEGREE;
        while k + 1 < n && u >= knot(k + 1, DEGREE) {
            k += 1;
        }
        let mut d: Vec<f64> = (0..=DEGREE).map(|j| cp[j + k - DEGREE]).collect();
        for r in 1..=DEGREE {
            for j in (r..=DEGREE).rev() {
                let i = j + k - DEGREE;
                let denom = knot(i + DEGREE + 1 - r, DEGREE) - knot(i, DEGREE);
                let alpha = (u - knot(i, DEGREE)) / denom;
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
            }
        }
        d[DEGREE]
    }

    #[test]
    fn rows_sum_to_one_and_entries_in_unit_interval() {
        let b = standard_basis();
        for row in 0..b.num_out {
            let sum: f64 = b.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {row}: {sum}");
            for &w in b.row(row) {
                assert!((-1e-15..=1.0 + 1e-15).contains(&w), "row {row}: {w}");
            }
        }
    }

    #[test]
    fn too_few_control_points_rejected() {
        assert!(build_basis(80, 3).is_err());
        assert!(build_basis(80, 4).is_ok());
    }

    #[test]
    fn matches_de_boor_oracle() {
        let b = standard_basis();
        let cp: Vec<f64> = vec![0.0, 1.5, -2.0, 4.0, 3.0, -1.0, 0.5, 2.5];
        let span = (NUM_CTRL - DEGREE) as f64 - 1e-9;
        for &row in &[0usize, 13, 37, 55, 79] {
            let u = span * row as f64 / (TRAJ_LEN - 1) as f64;
            let expect = de_boor_point(&cp, u);
            let got: f64 = b.row(row).iter().zip(cp.iter()).map(|(w, c)| w * c).sum();
            assert!((got - expect).abs() < 1e-12, "row {row}: {got} vs {expect}");
        }
    }

    #[test]
    fn constant_control_points_reproduce_constant() {
        let b = standard_basis();
        let cp = [Vec2::new(-3.25, 7.5); NUM_CTRL];
        let traj = interpolate(&cp, &b);
        for p in &traj.points {
            assert!((p.x + 3.25).abs() < 1e-12);
            assert!((p.y - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_control_points_stay_on_line() {
        let b = standard_basis();
        // Evenly spaced points on y = 2x + 1.
        let cp: ControlPoints =
            std::array::from_fn(|i| Vec2::new(i as f64, 2.0 * i as f64 + 1.0));
        let traj = interpolate(&cp, &b);
        for p in &traj.points {
            let line_dist = (p.y - (2.0 * p.x + 1.0)).abs() / (1.0f64 + 4.0).sqrt();
            assert!(line_dist < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Scalar loss L = sum_t (a_t * x_t + b_t * y_t)^2 over the outputs.
        let basis = standard_basis();
        let mut cp: ControlPoints =
            std::array::from_fn(|i| Vec2::new(i as f64 * 0.7 - 2.0, (i as f64).sin()));
        let coeff: Vec<(f64, f64)> = (0..TRAJ_LEN)
            .map(|t| ((t as f64 * 0.11).cos(), (t as f64 * 0.07).sin() + 0.3))
            .collect();
        let eval = |cp: &ControlPoints| -> f64 {
            let out = interpolate(cp, &basis);
            out.points
                .iter()
                .zip(coeff.iter())
                .map(|(p, &(a, b))| (a * p.x + b * p.y).powi(2))
                .sum()
        };
        // Analytic: dL/dout_t = 2 (a x + b y) * (a, b); pull back via basis^T.
        let out = interpolate(&cp, &basis);
        let grad_out: Vec<Vec2> = out
            .points
            .iter()
            .zip(coeff.iter())
            .map(|(p, &(a, b))| {
                let s = 2.0 * (a * p.x + b * p.y);
                Vec2::new(s * a, s * b)
            })
            .collect();
        let grad = backprop_to_control_points(&basis, &grad_out);

        let h = 1e-6;
        for i in 0..NUM_CTRL {
            for coord in 0..2 {
                let set = |cp: &mut ControlPoints, v: f64| {
                    if coord == 0 {
                        cp[i].x = v;
                    } else {
                        cp[i].y = v;
                    }
                };
                let base = if coord == 0 { cp[i].x } else { cp[i].y };
                set(&mut cp, base + h);
                let up = eval(&cp);
                set(&mut cp, base - h);
                let down = eval(&cp);
                set(&mut cp, base);
                let fd = (up - down) / (2.0 * h);
                let an = if coord == 0 { grad[i].x } else { grad[i].y };
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-6, "cp {i} coord {coord}: fd {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn prop_linearity(vals in prop::collection::vec(-50.0f64..50.0, 4 * NUM_CTRL)) {
            let basis = standard_basis();
            let a: ControlPoints = std::array::from_fn(|i| Vec2::new(vals[2 * i], vals[2 * i + 1]));
            let b: ControlPoints =
                std::array::from_fn(|i| Vec2::new(vals[2 * NUM_CTRL + 2 * i], vals[2 * NUM_CTRL + 2 * i + 1]));
            let sum: ControlPoints = std::array::from_fn(|i| a[i] + b[i]);
            let ia = interpolate(&a, &basis);
            let ib = interpolate(&b, &basis);
            let isum = interpolate(&sum, &basis);
            for t in 0..TRAJ_LEN {
                prop_assert!((ia.points[t].x + ib.points[t].x - isum.points[t].x).abs() < 1e-12 * (1.0 + isum.points[t].x.abs()));
                prop_assert!((ia.points[t].y + ib.points[t].y - isum.points[t].y).abs() < 1e-12 * (1.0 + isum.points[t].y.abs()));
            }
        }

        #[test]
        fn prop_output_in_convex_hull(vals in prop::collection::vec(-100.0f64..100.0, 2 * NUM_CTRL)) {
            let basis = standard_basis();
            let cp: ControlPoints = std::array::from_fn(|i| Vec2::new(vals[2 * i], vals[2 * i + 1]));
            let (min_x, max_x) = cp.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
            let (min_y, max_y) = cp.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
            let traj = interpolate(&cp, &basis);
            for p in &traj.points {
                prop_assert!(p.x >= min_x - 1e-9 && p.x <= max_x + 1e-9);
                prop_assert!(p.y >= min_y - 1e-9 && p.y <= max_y + 1e-9);
            }
        }
    }
}
