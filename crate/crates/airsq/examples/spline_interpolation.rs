//! Decode 8 control points into an 80-step trajectory with the cardinal
//! cubic B-spline basis, and show the linear-map properties that make its
//! gradients exact.
//!
//!     cargo run --example spline_interpolation

use airsq::scenario::Vec2;
use airsq::spline::{backprop_to_control_points, interpolate, standard_basis, NUM_CTRL};

fn main() {
    let basis = standard_basis();

    let row_sums: Vec<f64> = (0..basis.num_out)
        .map(|r| basis.row(r).iter().sum())
        .collect();
    let worst = row_sums
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0f64, f64::max);
    println!("partition of unity: max |row sum - 1| = {worst:.2e}");

    // A gentle left turn as control points.
    let cp: [Vec2; NUM_CTRL] =
        std::array::from_fn(|i| Vec2::new(i as f64 * 8.0, (i as f64 * 0.35).powi(2)));
    let traj = interpolate(&cp, &basis);
    println!("control points -> 80 steps; samples:");
    for &t in &[0usize, 20, 40, 60, 79] {
        println!(
            "  t={t:2}  ({:7.2}, {:6.2})",
            traj.points[t].x, traj.points[t].y
        );
    }

    // Pulling a gradient on the outputs back through basis^T.
    let grad_out: Vec<Vec2> = (0..basis.num_out)
        .map(|t| Vec2::new(1.0, t as f64 / 79.0))
        .collect();
    let grad_cp = backprop_to_control_points(&basis, &grad_out);
    println!("basis^T pullback of a unit-x output gradient:");
    for (i, g) in grad_cp.iter().enumerate() {
        println!("  cp {i}: ({:6.3}, {:6.3})", g.x, g.y);
    }
}
