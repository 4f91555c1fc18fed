//! Seeded synthetic instances for tests, benchmarks and `iproject gen`.

use rand::Rng;

use crate::measure::DiscreteMeasure;
use crate::moments::{Cdf, StepCdf};

/// `n` equally weighted atoms `(U, V^power)` with `U, V` uniform on `[0, 1]`.
///
/// For `power > 1` the second coordinate is stochastically smaller, so the
/// dominance restrictions are violated under the reference.
pub fn fsd_instance<R: Rng>(rng: &mut R, n: usize, power: f64) -> DiscreteMeasure {
    let atoms = (0..n)
        .map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>().powf(power)])
        .collect();
    DiscreteMeasure::uniform(atoms).expect("n >= 1")
}

/// Like [`fsd_instance`] with `d_z` extra instrument coordinates in `[0, 1]`.
pub fn conditional_instance<R: Rng>(rng: &mut R, n: usize, d_z: usize, power: f64) -> DiscreteMeasure {
    let atoms = (0..n)
        .map(|_| {
            let mut a = vec![rng.gen::<f64>(), rng.gen::<f64>().powf(power)];
            a.extend((0..d_z).map(|_| rng.gen::<f64>()));
            a
        })
        .collect();
    DiscreteMeasure::uniform(atoms).expect("n >= 1")
}

/// Uniform reference on `n` random points of `[0, 1]` and a step CDF with
/// `knots` random jumps that reaches 1 at its last knot.
pub fn marginal_instance<R: Rng>(rng: &mut R, n: usize, knots: usize) -> (DiscreteMeasure, Cdf) {
    let points: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let q = DiscreteMeasure::on_line(&points, vec![1.0; n]).expect("n >= 1");
    let mut locs: Vec<f64> = (0..knots.max(1)).map(|_| rng.gen::<f64>()).collect();
    locs.sort_by(f64::total_cmp);
    locs.dedup();
    let jumps: Vec<f64> = locs.iter().map(|_| rng.gen::<f64>() + 0.05).collect();
    let total: f64 = jumps.iter().sum();
    let mut acc = 0.0;
    let mut pts: Vec<(f64, f64)> = locs
        .iter()
        .zip(&jumps)
        .map(|(&x, &j)| {
            acc += j / total;
            (x, acc.min(1.0))
        })
        .collect();
    if let Some(last) = pts.last_mut() {
        last.1 = 1.0;
    }
    (q, Cdf::Step(StepCdf::new(pts).expect("sorted knots")))
}

/// Uniform reference on the grid `{0, 1/(n-1), …, 1}`.
pub fn unit_grid(n: usize) -> DiscreteMeasure {
    let pts: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
    };
    DiscreteMeasure::on_line(&pts, vec![1.0; n]).expect("n >= 1")
}
