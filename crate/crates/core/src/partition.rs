//! Finite partitions of a moment family with a certified `L1(Q)` diameter per
//! cell, and the per-cell representative choice.
//!
//! Builders work on a lossless threshold grid: atom coordinates in range, the
//! interval endpoints and (for the marginal family) the knots of `G`. A cell is
//! a contiguous run of thresholds `t_a ≤ … ≤ t_b`, i.e. the half-open index set
//! `[t_a, t_{b+1})`. For two thresholds `s < t` in a run the member distance is
//! bounded by the combined marginal mass of `(s, t]`, so runs are grown while
//! that mass stays inside the budget. The mass sitting exactly on the next cut
//! never enters a cell, which is what keeps the cell count at `⌈2/ε⌉` even
//! when single atoms are heavy.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::measure::{integrate, DiscreteMeasure};
use crate::moments::{threshold_grid, Cdf, CubeIndex, MomentFamily, MomentIndex};
use crate::numeric::compensated_sum;

/// Largest number of cells a builder will materialize.
pub const MAX_CELLS: usize = 2_000_000;

/// Means closer than this are treated as tied when picking representatives.
const MEAN_TIE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    /// Positions in [`Partition::grid`], ascending.
    pub members: Vec<usize>,
    /// Grid position of the representative.
    pub representative: usize,
    /// Representative member evaluated at the atoms of `Q`.
    #[serde(skip)]
    pub values: Vec<f64>,
    /// Exact maximum pairwise `L1(Q)` distance among members.
    pub diameter: f64,
    /// `∫ v dQ` of the representative.
    pub rep_mean: f64,
    /// No member had `∫ v dQ ≤ 0`; the minimum-mean member was used instead.
    pub selection_fallback: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Partition {
    pub grid: Vec<MomentIndex>,
    pub cells: Vec<Cell>,
    /// Requested accuracy.
    pub epsilon: f64,
    /// Largest certified cell diameter.
    pub achieved_epsilon: f64,
    /// Threshold cut points `γ_0 < … < γ_n` for interval-indexed families.
    pub cut_points: Vec<f64>,
    pub r0: Option<u32>,
    /// Number of threshold segments.
    pub n1: usize,
    /// Number of cube groups (1 for families without instruments).
    pub n2: usize,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn representatives(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|c| c.values.clone()).collect()
    }

    pub fn representative_indices(&self) -> Vec<MomentIndex> {
        self.cells.iter().map(|c| self.grid[c.representative].clone()).collect()
    }

    /// True when some certified diameter exceeds the requested accuracy.
    pub fn exceeds_epsilon(&self) -> bool {
        self.achieved_epsilon > self.epsilon * (1.0 + 1e-12) + 1e-15
    }
}

/// Exact `max_{u,v} ∫ |u - v| dQ` over the distinct vectors in `vecs`.
pub fn diameter(vecs: &[&[f64]], q: &DiscreteMeasure) -> f64 {
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    let distinct: Vec<&[f64]> = vecs
        .iter()
        .copied()
        .filter(|v| seen.insert(v.iter().map(|x| x.to_bits()).collect(), ()).is_none())
        .collect();
    if distinct.len() < 2 {
        return 0.0;
    }
    let w = q.weights();
    (0..distinct.len())
        .into_par_iter()
        .map(|i| {
            let mut best = 0.0f64;
            for j in (i + 1)..distinct.len() {
                let d = compensated_sum(
                    distinct[i].iter().zip(distinct[j]).zip(w).map(|((a, b), w)| (a - b).abs() * w),
                );
                best = best.max(d);
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

/// Position of the representative within `members`, and whether the fallback
/// rule was used. `means[k]` belongs to `members[k]`.
fn choose_representative(members: &[usize], means: &[f64]) -> (usize, bool) {
    let nonpositive: Vec<usize> = (0..means.len()).filter(|&k| means[k] <= 0.0).collect();
    let (pool, fallback) = if nonpositive.is_empty() {
        ((0..means.len()).collect::<Vec<_>>(), true)
    } else {
        (nonpositive, false)
    };
    let min = pool.iter().map(|&k| means[k]).fold(f64::INFINITY, f64::min);
    let best = pool
        .into_iter()
        .filter(|&k| means[k] <= min + MEAN_TIE_TOL)
        .min_by_key(|&k| members[k])
        .expect("cells are nonempty");
    (best, fallback)
}

fn cell_from_members(
    members: Vec<usize>,
    grid: &[MomentIndex],
    family: &MomentFamily,
    q: &DiscreteMeasure,
) -> Result<Cell> {
    if members.is_empty() {
        return Err(invalid("partition cell without members"));
    }
    let vecs: Vec<Vec<f64>> = members
        .iter()
        .map(|&g| family.values(&grid[g], q))
        .collect::<Result<_>>()?;
    let means: Vec<f64> = vecs.iter().map(|v| integrate(q, v)).collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = vecs.iter().map(|v| v.as_slice()).collect();
    let diameter = diameter(&refs, q);
    let (pos, selection_fallback) = choose_representative(&members, &means);
    Ok(Cell {
        representative: members[pos],
        values: vecs[pos].clone(),
        diameter,
        rep_mean: means[pos],
        selection_fallback,
        members,
    })
}

fn assemble(
    family: &MomentFamily,
    q: &DiscreteMeasure,
    grid: Vec<MomentIndex>,
    groups: Vec<Vec<usize>>,
    epsilon: f64,
) -> Result<Partition> {
    let cells: Vec<Cell> = groups
        .into_par_iter()
        .map(|members| cell_from_members(members, &grid, family, q))
        .collect::<Result<_>>()?;
    let achieved_epsilon = cells.iter().map(|c| c.diameter).fold(0.0, f64::max);
    Ok(Partition {
        grid,
        cells,
        epsilon,
        achieved_epsilon,
        cut_points: Vec::new(),
        r0: None,
        n1: 0,
        n2: 1,
    })
}

/// Re-applies the representative rule to every cell of `partition`.
pub fn select_representatives(
    partition: &Partition,
    q: &DiscreteMeasure,
    family: &MomentFamily,
) -> Result<Partition> {
    let cells: Vec<Cell> = partition
        .cells
        .par_iter()
        .map(|c| cell_from_members(c.members.clone(), &partition.grid, family, q))
        .collect::<Result<_>>()?;
    let achieved_epsilon = cells.iter().map(|c| c.diameter).fold(0.0, f64::max);
    Ok(Partition { cells, achieved_epsilon, grid: partition.grid.clone(), ..partition.clone() })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

/// `Q(x_coord ≤ t)` for each sorted threshold `t`.
fn marginal_cdf_at(q: &DiscreteMeasure, coord: usize, ts: &[f64]) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> = q.atoms().iter().zip(q.weights()).map(|(a, &w)| (a[coord], w)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(ts.len());
    let mut acc = crate::numeric::Compensated::new();
    let mut k = 0;
    for &t in ts {
        while k < pts.len() && pts[k].0 <= t {
            acc.add(pts[k].1);
            k += 1;
        }
        out.push(acc.value());
    }
    out
}

/// Maximal runs `a..=b` with `cum[b] - cum[a] ≤ budget`.
fn budget_runs(cum: &[f64], budget: f64) -> Vec<(usize, usize)> {
    let slack = budget * 1e-12 + 1e-15;
    let mut runs = Vec::new();
    let mut a = 0;
    while a < cum.len() {
        let mut b = a;
        while b + 1 < cum.len() && cum[b + 1] - cum[a] <= budget + slack {
            b += 1;
        }
        runs.push((a, b));
        a = b + 1;
    }
    runs
}

fn cut_points(ts: &[f64], runs: &[(usize, usize)], upper: f64) -> Vec<f64> {
    let mut cuts: Vec<f64> = runs.iter().map(|&(a, _)| ts[a]).collect();
    if cuts.last() != Some(&upper) {
        cuts.push(upper);
    }
    cuts
}

fn fsd_thresholds(q: &DiscreteMeasure, lower: f64, upper: f64) -> Vec<f64> {
    threshold_grid(lower, upper, q.atoms().iter().flat_map(|a| [a[0], a[1]]), 1)
}

/// Cumulative budget `Q_{X1}(x1 ≤ t) + Q_{X2}(x2 ≤ t)` along `ts`.
fn fsd_cumulative(q: &DiscreteMeasure, ts: &[f64]) -> Vec<f64> {
    let f1 = marginal_cdf_at(q, 0, ts);
    let f2 = marginal_cdf_at(q, 1, ts);
    f1.iter().zip(&f2).map(|(a, b)| a + b).collect()
}

/// Partition of the unconditional dominance family over `[lower, upper]`.
///
/// Each cell `[γ_{j-1}, γ_j)` satisfies
/// `Q_{X1}((γ_{j-1}, t]) + Q_{X2}((γ_{j-1}, t]) ≤ ε` for every grid point `t`
/// it contains, hence diameter `≤ ε` and at most `⌈2/ε⌉` cells.
pub fn build_fsd_partition(q: &DiscreteMeasure, lower: f64, upper: f64, epsilon: f64) -> Result<Partition> {
    check_epsilon(epsilon)?;
    let family = MomentFamily::unconditional_fsd(lower, upper)?;
    family.check_measure(q)?;
    let ts = fsd_thresholds(q, lower, upper);
    let runs = budget_runs(&fsd_cumulative(q, &ts), epsilon);
    let grid: Vec<MomentIndex> = ts.iter().map(|&t| MomentIndex::threshold(t)).collect();
    let groups = runs.iter().map(|&(a, b)| (a..=b).collect()).collect();
    let mut p = assemble(&family, q, grid, groups, epsilon)?;
    p.cut_points = cut_points(&ts, &runs, upper);
    p.n1 = runs.len();
    Ok(p)
}

/// Partition of `γ ∈ [0, γ̄]` for the marginal family `G(γ) - 1[ω ≤ γ]`,
/// growing cells while `ΔG + ΔQ ≤ ε`.
pub fn build_marginal_partition(q: &DiscreteMeasure, cdf: &Cdf, upper: f64, epsilon: f64) -> Result<Partition> {
    check_epsilon(epsilon)?;
    let family = MomentFamily::marginal_given_g(upper, cdf.clone())?;
    family.check_measure(q)?;
    let coords = q.atoms().iter().map(|a| a[0]).chain(cdf.knot_locations());
    let ts = threshold_grid(0.0, upper, coords, 1);
    let fq = marginal_cdf_at(q, 0, &ts);
    let cum: Vec<f64> = ts.iter().zip(&fq).map(|(&t, f)| cdf.eval(t) + f).collect();
    let runs = budget_runs(&cum, epsilon);
    let grid: Vec<MomentIndex> = ts.iter().map(|&t| MomentIndex::threshold(t)).collect();
    let groups = runs.iter().map(|&(a, b)| (a..=b).collect()).collect();
    let mut p = assemble(&family, q, grid, groups, epsilon)?;
    p.cut_points = cut_points(&ts, &runs, upper);
    p.n1 = runs.len();
    Ok(p)
}

fn instrument_points(q: &DiscreteMeasure, d_z: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if q.dim() != 2 + d_z {
        return Err(Error::DimensionMismatch { expected: 2 + d_z, got: q.dim() });
    }
    let mut merged: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut pts: Vec<(Vec<f64>, f64)> = Vec::new();
    for (j, (a, &w)) in q.atoms().iter().zip(q.weights()).enumerate() {
        let z = &a[2..];
        if z.iter().any(|zu| !(0.0..=1.0).contains(zu)) {
            return Err(Error::OutOfDomain(format!(
                "instrument coordinates of atom {j} fall outside [0,1]; rescale Z first"
            )));
        }
        let key: Vec<u64> = z.iter().map(|&x| if x == 0.0 { 0 } else { x.to_bits() }).collect();
        match merged.get(&key) {
            Some(&k) => pts[k].1 += w,
            None => {
                merged.insert(key, pts.len());
                pts.push((z.to_vec(), w));
            }
        }
    }
    Ok(pts)
}

fn max_cube_mass(pts: &[(Vec<f64>, f64)], r: u32) -> (f64, usize) {
    let mut masses: HashMap<Vec<u32>, f64> = HashMap::new();
    for (z, w) in pts {
        *masses.entry(CubeIndex::containing(z, r).a).or_insert(0.0) += w;
    }
    (masses.values().copied().fold(0.0, f64::max), masses.len())
}

fn max_resolution(d_z: usize) -> u32 {
    let per_axis = (MAX_CELLS as f64).powf(1.0 / d_z as f64).floor() as u32;
    (per_axis / 2).max(1)
}

/// Smallest `r ≥ 1` with `Q_Z(C_{a,r}) ≤ ε/6` for every cube.
///
/// Fails when a single instrument point carries more than `ε/6`, since no cube
/// can split it.
pub fn choose_r0(q: &DiscreteMeasure, d_z: usize, epsilon: f64) -> Result<u32> {
    check_epsilon(epsilon)?;
    let pts = instrument_points(q, d_z)?;
    let cap = epsilon / 6.0;
    let tol = cap * 1e-12 + 1e-15;
    let heaviest = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    if heaviest > cap + tol {
        return Err(Error::Infeasible(format!(
            "an instrument point has mass {heaviest} > ε/6 = {cap}; no cube resolution meets the bound"
        )));
    }
    for r in 1..=max_resolution(d_z) {
        if max_cube_mass(&pts, r).0 <= cap + tol {
            return Ok(r);
        }
    }
    Err(Error::Infeasible(format!(
        "cube resolution needed for ε/6 = {cap} exceeds the cell limit"
    )))
}

/// Smallest `r` at which every cube holds at most one distinct instrument point.
pub fn separating_r(q: &DiscreteMeasure, d_z: usize) -> Result<u32> {
    let pts = instrument_points(q, d_z)?;
    for r in 1..=max_resolution(d_z) {
        if max_cube_mass(&pts, r).1 == pts.len() {
            return Ok(r);
        }
    }
    Err(Error::Infeasible("instrument points too close to separate within the cell limit".into()))
}

/// Partition of the conditional dominance family: threshold segments with
/// combined marginal budget `2ε/3`, crossed with the `(2r_0)^{d_Z}` cubes at
/// `r_0 = choose_r0(ε)`.
pub fn build_conditional_fsd_partition(
    q: &DiscreteMeasure,
    lower: f64,
    upper: f64,
    epsilon: f64,
    d_z: usize,
) -> Result<Partition> {
    let r0 = choose_r0(q, d_z, epsilon)?;
    build_conditional_fsd_partition_with_r0(q, lower, upper, epsilon, d_z, r0)
}

/// As [`build_conditional_fsd_partition`] with a caller-chosen cube resolution.
pub fn build_conditional_fsd_partition_with_r0(
    q: &DiscreteMeasure,
    lower: f64,
    upper: f64,
    epsilon: f64,
    d_z: usize,
    r0: u32,
) -> Result<Partition> {
    check_epsilon(epsilon)?;
    let family = MomentFamily::conditional_fsd(lower, upper, d_z, r0)?;
    family.check_measure(q)?;
    let ts = fsd_thresholds(q, lower, upper);
    let runs = budget_runs(&fsd_cumulative(q, &ts), 2.0 * epsilon / 3.0);
    let cubes = CubeIndex::all(d_z, r0);
    let (n1, n2) = (runs.len(), cubes.len());
    if n1.saturating_mul(n2) > MAX_CELLS {
        return Err(Error::Infeasible(format!("{n1} x {n2} cells exceed the limit of {MAX_CELLS}")));
    }
    let nt = ts.len();
    let grid: Vec<MomentIndex> = cubes
        .iter()
        .flat_map(|c| ts.iter().map(move |&t| MomentIndex::instrumented(t, c.clone())))
        .collect();
    let groups: Vec<Vec<usize>> = runs
        .iter()
        .flat_map(|&(a, b)| (0..n2).map(move |i| (a..=b).map(|t| i * nt + t).collect()))
        .collect();
    let mut p = assemble(&family, q, grid, groups, epsilon)?;
    p.cut_points = cut_points(&ts, &runs, upper);
    p.r0 = Some(r0);
    p.n1 = n1;
    p.n2 = n2;
    Ok(p)
}

/// Leader clustering of `grid` in order: each member joins the first cell in
/// which its distance to every current member is at most `ε`.
pub fn build_greedy_partition(
    q: &DiscreteMeasure,
    family: &MomentFamily,
    grid: &[MomentIndex],
    epsilon: f64,
) -> Result<Partition> {
    check_epsilon(epsilon)?;
    if grid.is_empty() {
        return Err(invalid("greedy partition needs a nonempty grid"));
    }
    let vecs = family.values_matrix(grid, q)?;
    let w = q.weights();
    let dist = |a: &[f64], b: &[f64]| {
        compensated_sum(a.iter().zip(b).zip(w).map(|((x, y), w)| (x - y).abs() * w))
    };
    let mut twin: HashMap<Vec<u64>, usize> = HashMap::new();
    // Per cell: the distinct member vectors (by position in `vecs`) and all members.
    let mut distinct: Vec<Vec<usize>> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (g, v) in vecs.iter().enumerate() {
        let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        if let Some(&c) = twin.get(&key) {
            groups[c].push(g);
            continue;
        }
        let home = (0..distinct.len()).find(|&c| {
            distinct[c]
                .par_iter()
                .all(|&m| dist(&vecs[m], v) <= epsilon)
        });
        let c = match home {
            Some(c) => c,
            None => {
                distinct.push(Vec::new());
                groups.push(Vec::new());
                distinct.len() - 1
            }
        };
        distinct[c].push(g);
        groups[c].push(g);
        twin.insert(key, c);
    }
    let n = groups.len();
    let mut p = assemble(family, q, grid.to_vec(), groups, epsilon)?;
    p.n1 = n;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::StepCdf;
    use crate::synth;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bound(eps: f64) -> usize {
        (4.0 + 2.0 / eps).ceil() as usize
    }

    fn pairwise_ok(p: &Partition, q: &DiscreteMeasure, family: &MomentFamily) {
        let vecs = family.values_matrix(&p.grid, q).unwrap();
        for c in &p.cells {
            for &i in &c.members {
                for &j in &c.members {
                    let d = crate::measure::l1_distance(&vecs[i], &vecs[j], q).unwrap();
                    assert!(d <= c.diameter + 1e-15);
                }
            }
            assert!(c.members.contains(&c.representative));
        }
    }

    fn covers_grid(p: &Partition) {
        let mut seen = vec![0usize; p.grid.len()];
        for c in &p.cells {
            for &m in &c.members {
                seen[m] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn fsd_partition_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = synth::fsd_instance(&mut rng, 40, 1.5);
        let p = build_fsd_partition(&q, 0.0, 1.0, 0.5).unwrap();
        assert!(p.len() <= 8);
        assert!(p.achieved_epsilon <= 0.5);
        covers_grid(&p);
        pairwise_ok(&p, &q, &MomentFamily::unconditional_fsd(0.0, 1.0).unwrap());

        let p = build_fsd_partition(&q, 0.0, 1.0, 2.0).unwrap();
        assert_eq!(p.len(), 1);

        assert!(build_fsd_partition(&q, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn fsd_segments_hold_one_interior_atom_per_marginal() {
        let xs: Vec<f64> = (0..10).map(|k| 0.05 + 0.1 * k as f64).collect();
        let q = DiscreteMeasure::uniform(xs.iter().map(|&x| vec![x, x]).collect()).unwrap();
        let p = build_fsd_partition(&q, 0.0, 1.0, 0.2).unwrap();
        for w in p.cut_points.windows(2) {
            for coord in 0..2 {
                let interior = q.mass_where(|a| a[coord] > w[0] && a[coord] < w[1]);
                assert!(interior <= 0.1 + 1e-12, "segment {w:?} holds {interior}");
            }
        }
    }

    #[test]
    fn marginal_partition_examples() {
        let q = DiscreteMeasure::uniform((0..50).map(|k| vec![(k as f64 + 0.5) / 50.0]).collect()).unwrap();
        let p = build_marginal_partition(&q, &Cdf::Uniform, 1.0, 0.5).unwrap();
        assert!(p.len() <= 8);
        assert!(!p.exceeds_epsilon());
        let p = build_marginal_partition(&q, &Cdf::Uniform, 1.0, 2.0).unwrap();
        assert_eq!(p.len(), 1);

        let g = Cdf::Step(StepCdf::new(vec![(0.3, 0.5), (0.8, 1.0)]).unwrap());
        let p = build_marginal_partition(&q, &g, 1.0, 0.4).unwrap();
        assert!(p.cut_points.contains(&0.3));
        assert!(p.cut_points.contains(&0.8));
        for w in p.cut_points.windows(2) {
            // G-increments over the open segments stay inside the budget.
            let inner = g.eval(w[1] - 1e-12) - g.eval(w[0]);
            assert!(inner <= 0.4 + 1e-12);
        }
        assert!(!p.exceeds_epsilon());
        pairwise_ok(&p, &q, &MomentFamily::marginal_given_g(1.0, g).unwrap());
    }

    #[test]
    fn conditional_partition_examples() {
        let atoms: Vec<Vec<f64>> = (0..12)
            .map(|k| vec![0.3, 0.6, (k as f64 + 0.5) / 12.0])
            .collect();
        let q = DiscreteMeasure::uniform(atoms).unwrap();
        let r0 = choose_r0(&q, 1, 0.6).unwrap();
        let pts = instrument_points(&q, 1).unwrap();
        for r in 1..r0 {
            assert!(max_cube_mass(&pts, r).0 > 0.1 + 1e-12);
        }
        assert!(max_cube_mass(&pts, r0).0 <= 0.1 + 1e-12);
        let p = build_conditional_fsd_partition(&q, 0.0, 1.0, 0.6, 1).unwrap();
        assert_eq!(p.n2, (2 * r0) as usize);
        assert_eq!(p.len(), p.n1 * p.n2);
        assert!(p.n1 <= (4.0 + 3.0 / 0.6f64).ceil() as usize);
        covers_grid(&p);

        let point = DiscreteMeasure::uniform(vec![vec![0.1, 0.2, 0.3]]).unwrap();
        assert!(matches!(choose_r0(&point, 1, 0.5), Err(Error::Infeasible(_))));

        let outside = DiscreteMeasure::uniform(vec![vec![0.1, 0.2, 1.3]]).unwrap();
        assert!(matches!(choose_r0(&outside, 1, 0.5), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn greedy_examples() {
        let q = DiscreteMeasure::uniform(vec![vec![0.2, 0.5], vec![0.6, 0.1]]).unwrap();
        let fam = MomentFamily::unconditional_fsd(0.0, 1.0).unwrap();
        let one = build_greedy_partition(&q, &fam, &[MomentIndex::threshold(0.3)], 0.1).unwrap();
        assert_eq!(one.len(), 1);

        let same = vec![MomentIndex::threshold(0.0), MomentIndex::threshold(0.05), MomentIndex::threshold(0.09)];
        assert_eq!(build_greedy_partition(&q, &fam, &same, 1e-9).unwrap().len(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = synth::fsd_instance(&mut rng, 30, 1.5);
        let grid = fam.index_grid(&q, 10);
        let greedy = build_greedy_partition(&q, &fam, &grid, 0.25).unwrap();
        let built = build_fsd_partition(&q, 0.0, 1.0, 0.25).unwrap();
        assert!(greedy.achieved_epsilon <= 0.25);
        assert!(built.achieved_epsilon <= 0.25);
        covers_grid(&greedy);
        pairwise_ok(&greedy, &q, &fam);
    }

    #[test]
    fn representative_rule() {
        assert_eq!(choose_representative(&[3, 4, 5], &[0.0, 0.0, 0.0]), (0, false));
        assert_eq!(choose_representative(&[0, 1], &[-0.1, 0.2]), (0, false));
        assert_eq!(choose_representative(&[0, 1], &[0.2, 0.1]), (1, true));
        assert_eq!(choose_representative(&[7, 2], &[-0.3, -0.3]), (1, false));
    }

    #[test]
    fn representatives_follow_violation_region() {
        // Atoms with x2 < x1 only for thresholds in (0.4, 0.6].
        let q = DiscreteMeasure::uniform(vec![
            vec![0.6, 0.4],
            vec![0.1, 0.1],
            vec![0.9, 0.9],
            vec![0.3, 0.3],
        ])
        .unwrap();
        let fam = MomentFamily::unconditional_fsd(0.0, 1.0).unwrap();
        let p = build_fsd_partition(&q, 0.0, 1.0, 0.1).unwrap();
        for c in &p.cells {
            let overlaps = c.members.iter().any(|&m| {
                let t = p.grid[m].threshold_value().unwrap();
                (0.4..0.6).contains(&t)
            });
            let brute = c
                .members
                .iter()
                .map(|&m| fam.family_mean(&p.grid[m], &q).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(c.rep_mean, brute);
            assert_eq!(c.rep_mean < 0.0, overlaps);
            assert_eq!(c.selection_fallback, brute > 0.0);
        }
        let again = select_representatives(&p, &q, &fam).unwrap();
        assert_eq!(
            again.cells.iter().map(|c| c.representative).collect::<Vec<_>>(),
            p.cells.iter().map(|c| c.representative).collect::<Vec<_>>()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fsd_partitions_are_certified(seed in any::<u64>(), n in 2usize..40, eps in 0.02f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = synth::fsd_instance(&mut rng, n, 1.5);
            let p = build_fsd_partition(&q, 0.0, 1.0, eps).unwrap();
            prop_assert!(p.len() <= bound(eps));
            prop_assert!(p.achieved_epsilon <= eps * (1.0 + 1e-12));
            covers_grid(&p);
        }

        #[test]
        fn marginal_partitions_are_certified(seed in any::<u64>(), n in 2usize..60, eps in 0.02f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, g) = synth::marginal_instance(&mut rng, n, 6);
            let p = build_marginal_partition(&q, &g, 1.0, eps).unwrap();
            prop_assert!(p.len() <= bound(eps));
            prop_assert!(p.achieved_epsilon <= eps * (1.0 + 1e-12));
        }
    }
}
