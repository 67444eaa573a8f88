//! Divergences and convergence diagnostics for particle approximations.
//!
//! The headline quantity is a mollified Kullback-Leibler divergence: the
//! empirical measure of a particle ensemble is smoothed with an isotropic
//! Gaussian kernel of bandwidth `delta`, and its divergence against the
//! Gibbs density `exp(-f)` (or the phase-space equilibrium
//! `exp(-f(x) - |v|^2/2)`) is evaluated up to the constant log-partition
//! term, which cancels when trajectories of the same target are compared:
//!
//! ```text
//! KL_X = (1/N) sum_i ln( (1/N) sum_j rho_delta(x_i - x_j) ) + (1/N) sum_i f(x_i)
//! ```
//!
//! with `rho_delta(z) = (8 pi delta^2)^{-d/2} exp(-|z|^2 / (8 delta^2))`.
//! The `j = i` self term is included by default; the leave-one-out variant
//! divides by `N - 1` instead.
//!
//! Also here: exact Wasserstein-2 distances between equal-size empirical
//! measures (sorting in one dimension, an exact O(N^3) assignment solver
//! above), weak errors against reference expectations, log-log rate fits,
//! and Spearman rank correlation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::boltzmann::PhaseEnsemble;
use crate::error::{Error, Result};
use crate::model::Potential;

/// Largest sample count accepted by the exact assignment solver; beyond
/// this the cubic cost is impractical and the caller should subsample.
pub const ASSIGNMENT_CAP: usize = 512;

/// Isotropic Gaussian smoothing kernel
/// `rho(z) = (8 pi delta^2)^{-d/2} exp(-|z|^2 / (8 delta^2))`.
#[derive(Clone, Copy, Debug)]
pub struct Mollifier {
    dim: usize,
    delta: f64,
    /// `1 / (8 delta^2)`.
    inv_denom: f64,
    /// `-(d/2) ln(8 pi delta^2)`.
    log_norm: f64,
}

impl Mollifier {
    pub fn new(dim: usize, delta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("mollifier dimension must be positive".into()));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "mollifier bandwidth must be positive, got {delta}"
            )));
        }
        let denom = 8.0 * delta * delta;
        Ok(Self {
            dim,
            delta,
            inv_denom: 1.0 / denom,
            log_norm: -(dim as f64 / 2.0) * (std::f64::consts::PI * denom).ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Kernel value at displacement `z`.
    pub fn eval(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "mollifier argument",
                expected: self.dim,
                found: z.len(),
            });
        }
        Ok((self.log_norm - z.norm_squared() * self.inv_denom).exp())
    }
}

/// Whether the kernel density estimate at particle `i` includes its own
/// kernel mass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SelfPairing {
    /// Average over all `N` kernels (the default; well defined for `N = 1`).
    #[default]
    Include,
    /// Leave-one-out: average the other `N - 1` kernels.
    Exclude,
}

/// Squared Euclidean distance between columns `i` and `j` of `m`.
#[inline]
fn col_dist2(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..m.nrows() {
        let d = m[(r, i)] - m[(r, j)];
        s += d * d;
    }
    s
}

fn kl_common_checks(
    positions: &DMatrix<f64>,
    pot: &Potential,
    pairing: SelfPairing,
) -> Result<()> {
    if positions.nrows() != pot.dim() {
        return Err(Error::DimensionMismatch {
            context: "sample dimension vs potential",
            expected: pot.dim(),
            found: positions.nrows(),
        });
    }
    if positions.ncols() == 0 {
        return Err(Error::InvalidArgument("divergence of an empty sample".into()));
    }
    if pairing == SelfPairing::Exclude && positions.ncols() < 2 {
        return Err(Error::InvalidArgument(
            "leave-one-out smoothing needs at least two particles".into(),
        ));
    }
    Ok(())
}

/// Mollified KL divergence (up to the target's constant log-partition
/// term) of the positions against the Gibbs density `exp(-f)`, with the
/// self term included.
pub fn mollified_kl_positions(
    positions: &DMatrix<f64>,
    pot: &Potential,
    delta: f64,
) -> Result<f64> {
    mollified_kl_positions_with(positions, pot, delta, SelfPairing::Include)
}

/// As [`mollified_kl_positions`], choosing the self-pairing convention.
pub fn mollified_kl_positions_with(
    positions: &DMatrix<f64>,
    pot: &Potential,
    delta: f64,
    pairing: SelfPairing,
) -> Result<f64> {
    kl_common_checks(positions, pot, pairing)?;
    let moll = Mollifier::new(pot.dim(), delta)?;
    let n = positions.ncols();
    let count = match pairing {
        SelfPairing::Include => n as f64,
        SelfPairing::Exclude => (n - 1) as f64,
    };
    let log_scale = moll.log_norm - count.ln();

    // Each particle's term is independent; the parallel map preserves
    // index order, so the serial reduction below is identical for any
    // thread count.
    let terms: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if pairing == SelfPairing::Exclude && j == i {
                    continue;
                }
                s += (-col_dist2(positions, i, j) * moll.inv_denom).exp();
            }
            let f = pot.eval(&positions.column(i).into_owned())?;
            Ok(s.ln() + log_scale + f)
        })
        .collect();
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total / n as f64)
}

/// Mollified KL divergence (up to the constant log-partition term) of a
/// phase-space ensemble against the kinetic equilibrium
/// `exp(-f(x) - |v|^2 / 2)`, with the self term included. The smoothing
/// kernel is the `2d`-dimensional mollifier applied jointly to position
/// and velocity displacements.
pub fn mollified_kl_phase(phase: &PhaseEnsemble, pot: &Potential, delta: f64) -> Result<f64> {
    mollified_kl_phase_with(phase, pot, delta, SelfPairing::Include)
}

/// As [`mollified_kl_phase`], choosing the self-pairing convention.
pub fn mollified_kl_phase_with(
    phase: &PhaseEnsemble,
    pot: &Potential,
    delta: f64,
    pairing: SelfPairing,
) -> Result<f64> {
    kl_common_checks(&phase.positions, pot, pairing)?;
    let moll = Mollifier::new(2 * pot.dim(), delta)?;
    let n = phase.len();
    let count = match pairing {
        SelfPairing::Include => n as f64,
        SelfPairing::Exclude => (n - 1) as f64,
    };
    let log_scale = moll.log_norm - count.ln();
    let positions = &phase.positions;
    let velocities = &phase.velocities;

    let terms: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if pairing == SelfPairing::Exclude && j == i {
                    continue;
                }
                // One fused exponential per pair over the joint
                // position-velocity displacement.
                let d2 = col_dist2(positions, i, j) + col_dist2(velocities, i, j);
                s += (-d2 * moll.inv_denom).exp();
            }
            let f = pot.eval(&positions.column(i).into_owned())?;
            let ke = 0.5 * velocities.column(i).norm_squared();
            Ok(s.ln() + log_scale + f + ke)
        })
        .collect();
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total / n as f64)
}

fn check_same_clouds(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "sample dimension of the two clouds",
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            context: "sample counts of the two clouds (equal-weight empirical measures)",
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    if a.ncols() == 0 {
        return Err(Error::InvalidArgument("transport distance of empty samples".into()));
    }
    Ok(())
}

/// Wasserstein-2 distance between the equal-weight empirical measures of
/// two same-size point clouds (columns are points). One-dimensional
/// clouds use the exact sorted coupling; higher dimensions solve the
/// assignment problem exactly (see [`assignment_distance`]).
pub fn wasserstein2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_clouds(a, b)?;
    if a.nrows() == 1 {
        let mut xs: Vec<f64> = a.row(0).iter().cloned().collect();
        let mut ys: Vec<f64> = b.row(0).iter().cloned().collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let n = xs.len();
        let sum: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok((sum / n as f64).sqrt())
    } else {
        assignment_distance(a, b)
    }
}

/// Wasserstein-2 distance by exact minimum-cost assignment on the squared
/// Euclidean cost matrix (O(N^3) shortest augmenting paths with dual
/// potentials). Works in any dimension; capped at [`ASSIGNMENT_CAP`]
/// points.
pub fn assignment_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_clouds(a, b)?;
    let n = a.ncols();
    if n > ASSIGNMENT_CAP {
        return Err(Error::InvalidArgument(format!(
            "exact assignment supports at most {ASSIGNMENT_CAP} points per cloud, got {n}; \
             subsample before comparing"
        )));
    }
    let mut cost = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for r in 0..a.nrows() {
                let d = a[(r, i)] - b[(r, j)];
                s += d * d;
            }
            cost[(i, j)] = s;
        }
    }
    let total = solve_assignment(&cost).1;
    Ok((total / n as f64).sqrt())
}

/// Exact minimum-cost perfect assignment on a square cost matrix.
/// Returns `(row_of_column, total_cost)` where `row_of_column[j]` is the
/// row matched to column `j`. Shortest augmenting paths with dual
/// potentials; rows and columns are 1-indexed internally with a dummy
/// index 0.
pub fn solve_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to each column
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_of_column = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        row_of_column[j - 1] = p[j] - 1;
        total += cost[(p[j] - 1, j - 1)];
    }
    (row_of_column, total)
}

/// Absolute difference between the sample mean of `g` over the columns of
/// `samples` and a reference expectation.
pub fn weak_error(
    samples: &DMatrix<f64>,
    g: impl Fn(&DVector<f64>) -> f64,
    reference: f64,
) -> Result<f64> {
    if samples.ncols() == 0 {
        return Err(Error::InvalidArgument("weak error of an empty sample".into()));
    }
    let mut sum = 0.0;
    for i in 0..samples.ncols() {
        sum += g(&samples.column(i).into_owned());
    }
    Ok((sum / samples.ncols() as f64 - reference).abs())
}

/// Least-squares fit of `ln(err) = slope * ln(n) + intercept`.
#[derive(Clone, Copy, Debug)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fit a power law `err ~ C * n^slope` through log-log least squares.
/// All sizes and errors must be strictly positive. A perfectly constant
/// series fits with slope 0 and unit coefficient of determination.
pub fn fit_rate(sizes: &[f64], errors: &[f64]) -> Result<RateFit> {
    if sizes.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            context: "rate fit sizes vs errors",
            expected: sizes.len(),
            found: errors.len(),
        });
    }
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument("rate fit needs at least two points".into()));
    }
    if sizes.iter().chain(errors).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "rate fit needs strictly positive, finite sizes and errors".into(),
        ));
    }
    let xs: Vec<f64> = sizes.iter().map(|&s| s.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|&e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument(
            "rate fit needs at least two distinct sizes".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    // A constant series has zero total variance and zero residual: a
    // perfect fit by convention.
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit { slope, intercept, r_squared })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "rank correlation inputs",
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs at least two points".into(),
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::InvalidArgument(
            "rank correlation undefined for a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties resolved by the average of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut m = k;
        while m + 1 < n && values[order[m + 1]] == values[order[k]] {
            m += 1;
        }
        let avg = (k + m) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=m] {
            ranks[idx] = avg;
        }
        k = m + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{quadratic_1d, quadratic_2d};
    use crate::rng::RngStream;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn mollifier_normalizes_to_one() {
        // d = 1, delta = 0.3: Simpson over +-8 (the kernel deviation is
        // 2 delta = 0.6, so the domain holds all mass to double precision).
        let m = Mollifier::new(1, 0.3).unwrap();
        let n = 8193;
        let vals: Vec<f64> = (0..n)
            .map(|k| {
                let x = -8.0 + 16.0 * k as f64 / (n - 1) as f64;
                m.eval(&DVector::from_vec(vec![x])).unwrap()
            })
            .collect();
        let h = 16.0 / (n - 1) as f64;
        let mut s = vals[0] + vals[n - 1];
        for (k, v) in vals.iter().enumerate().take(n - 1).skip(1) {
            s += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        assert_relative_eq!(s * h / 3.0, 1.0, epsilon = 1e-6);

        // d = 2, delta = 0.5 (per-axis deviation 2 delta = 1), tensor
        // Simpson over [-8, 8]^2: eight deviations per side.
        let m2 = Mollifier::new(2, 0.5).unwrap();
        let g = 801;
        let hg = 16.0 / (g - 1) as f64;
        let mut rows = vec![0.0; g];
        for i in 0..g {
            let x = -8.0 + hg * i as f64;
            let col: Vec<f64> = (0..g)
                .map(|j| {
                    let y = -8.0 + hg * j as f64;
                    m2.eval(&DVector::from_vec(vec![x, y])).unwrap()
                })
                .collect();
            let mut sc = col[0] + col[g - 1];
            for (k, v) in col.iter().enumerate().take(g - 1).skip(1) {
                sc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            rows[i] = sc * hg / 3.0;
        }
        let mut sr = rows[0] + rows[g - 1];
        for (k, v) in rows.iter().enumerate().take(g - 1).skip(1) {
            sr += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        assert_relative_eq!(sr * hg / 3.0, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn mollifier_peak_value() {
        let m = Mollifier::new(1, 0.3).unwrap();
        let peak = m.eval(&DVector::zeros(1)).unwrap();
        assert_relative_eq!(
            peak,
            1.0 / (8.0 * std::f64::consts::PI * 0.09).sqrt(),
            epsilon = 1e-14
        );
        assert!(m.eval(&DVector::from_vec(vec![15.0])).unwrap() < 1e-100);
    }

    #[test]
    fn single_point_divergence_equals_the_formula_value() {
        // One particle at the origin of the quadratic potential: the
        // density estimate is the kernel peak, f = 0, so
        // KL = -0.5 ln(8 pi delta^2).
        let pot = quadratic_1d();
        let positions = DMatrix::zeros(1, 1);
        let delta = 0.3;
        let expected = -0.5 * (8.0 * std::f64::consts::PI * delta * delta).ln();
        let kl = mollified_kl_positions(&positions, &pot, delta).unwrap();
        assert_relative_eq!(kl, expected, epsilon = 1e-12);
        // Numerically: -0.4081129 at delta = 0.3.
        assert_relative_eq!(kl, -0.408112909439, epsilon = 1e-9);

        // Phase-space version at rest: the joint kernel is two-dimensional,
        // doubling the entropy term; the kinetic term vanishes.
        let phase = PhaseEnsemble::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let kl_phase = mollified_kl_phase(&phase, &pot, delta).unwrap();
        assert_relative_eq!(kl_phase, 2.0 * expected, epsilon = 1e-12);

        // Shifting the particle adds exactly f (positions) or f + |v|^2/2.
        let shifted = DMatrix::from_row_slice(1, 1, &[0.7]);
        let kl_shifted = mollified_kl_positions(&shifted, &pot, delta).unwrap();
        assert_relative_eq!(kl_shifted, expected + 0.5 * 0.49, epsilon = 1e-12);
    }

    #[test]
    fn divergence_matches_a_direct_double_loop() {
        // The production path fuses exponentials and runs in parallel;
        // check it against a naive reimplementation built on the public
        // kernel at small size.
        let pot = quadratic_2d();
        let delta = 0.4;
        let n = 100;
        let mut rng = RngStream::new(42, 0).rng();
        let positions = DMatrix::from_fn(2, n, |_, _| 2.0 * rng.gen::<f64>() - 1.0);

        let moll = Mollifier::new(2, delta).unwrap();
        let mut direct = 0.0;
        for i in 0..n {
            let xi = positions.column(i).into_owned();
            let mut s = 0.0;
            for j in 0..n {
                let d = &xi - positions.column(j).into_owned();
                s += moll.eval(&d).unwrap();
            }
            direct += (s / n as f64).ln() + pot.eval(&xi).unwrap();
        }
        direct /= n as f64;

        let fast = mollified_kl_positions(&positions, &pot, delta).unwrap();
        assert_relative_eq!(fast, direct, epsilon = 1e-12);
    }

    #[test]
    fn phase_divergence_matches_a_direct_double_loop() {
        let pot = quadratic_1d();
        let delta = 0.3;
        let n = 80;
        let mut rng = RngStream::new(43, 0).rng();
        let positions = DMatrix::from_fn(1, n, |_, _| 2.0 * rng.gen::<f64>() - 1.0);
        let velocities = DMatrix::from_fn(1, n, |_, _| 2.0 * rng.gen::<f64>() - 1.0);
        let phase = PhaseEnsemble::new(positions.clone(), velocities.clone()).unwrap();

        let moll = Mollifier::new(2, delta).unwrap();
        let mut direct = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                let z = DVector::from_vec(vec![
                    positions[(0, i)] - positions[(0, j)],
                    velocities[(0, i)] - velocities[(0, j)],
                ]);
                s += moll.eval(&z).unwrap();
            }
            direct += (s / n as f64).ln()
                + pot.eval(&positions.column(i).into_owned()).unwrap()
                + 0.5 * velocities[(0, i)] * velocities[(0, i)];
        }
        direct /= n as f64;

        let fast = mollified_kl_phase(&phase, &pot, delta).unwrap();
        assert_relative_eq!(fast, direct, epsilon = 1e-12);
    }

    #[test]
    fn self_pairing_conventions_are_ordered_and_agree_when_coincident() {
        let pot = quadratic_1d();
        let mut rng = RngStream::new(44, 0).rng();
        let positions = DMatrix::from_fn(1, 50, |_, _| rng.gen::<f64>());
        let inc =
            mollified_kl_positions_with(&positions, &pot, 0.3, SelfPairing::Include).unwrap();
        let exc =
            mollified_kl_positions_with(&positions, &pot, 0.3, SelfPairing::Exclude).unwrap();
        // The self kernel is the pointwise maximum, so including it can
        // only raise the density estimate.
        assert!(inc >= exc - 1e-12, "include {inc} < exclude {exc}");

        let coincident = DMatrix::zeros(1, 10);
        let inc0 =
            mollified_kl_positions_with(&coincident, &pot, 0.3, SelfPairing::Include).unwrap();
        let exc0 =
            mollified_kl_positions_with(&coincident, &pot, 0.3, SelfPairing::Exclude).unwrap();
        assert_relative_eq!(inc0, exc0, epsilon = 1e-12);

        // Leave-one-out needs a pair.
        assert!(mollified_kl_positions_with(
            &DMatrix::zeros(1, 1),
            &pot,
            0.3,
            SelfPairing::Exclude
        )
        .is_err());
    }

    #[test]
    fn one_dimensional_transport_distance_by_sorting() {
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert_relative_eq!(wasserstein2(&a, &b).unwrap(), 1.0, epsilon = 1e-15);

        // {0, 1} vs {1, 0}: identical empirical measures.
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_relative_eq!(wasserstein2(&a, &b).unwrap(), 0.0, epsilon = 1e-15);

        // {0, 2} vs {0, 0}: optimal coupling moves one atom by 2.
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert_relative_eq!(wasserstein2(&a, &b).unwrap(), 2.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn planar_shift_distance_is_the_shift_length() {
        // W2 between a cloud and its translate equals the translation
        // norm (mean displacement lower bound, achieved by identity).
        let mut rng = RngStream::new(45, 0).rng();
        let a = DMatrix::from_fn(2, 40, |_, _| rng.gen::<f64>());
        let mut b = a.clone();
        for j in 0..b.ncols() {
            b[(1, j)] += 1.0;
        }
        assert_relative_eq!(wasserstein2(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sorting_and_assignment_agree_in_one_dimension() {
        let mut rng = RngStream::new(46, 0).rng();
        let a = DMatrix::from_fn(1, 128, |_, _| 4.0 * rng.gen::<f64>() - 2.0);
        let b = DMatrix::from_fn(1, 128, |_, _| 4.0 * rng.gen::<f64>() - 2.0);
        let sorted = wasserstein2(&a, &b).unwrap();
        let assigned = assignment_distance(&a, &b).unwrap();
        assert_relative_eq!(sorted, assigned, epsilon = 1e-9);
    }

    #[test]
    fn transport_distance_is_permutation_invariant_and_symmetric() {
        let mut rng = RngStream::new(47, 0).rng();
        let a = DMatrix::from_fn(2, 30, |_, _| rng.gen::<f64>());
        let b = DMatrix::from_fn(2, 30, |_, _| rng.gen::<f64>());
        let d = wasserstein2(&a, &b).unwrap();
        assert_relative_eq!(d, wasserstein2(&b, &a).unwrap(), epsilon = 1e-12);

        // Shuffle the columns of b.
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..30).collect();
            for k in (1..30).rev() {
                let j = rng.gen_range(0..=k);
                p.swap(k, j);
            }
            p
        };
        let mut b2 = b.clone();
        for (to, &from) in perm.iter().enumerate() {
            b2.set_column(to, &b.column(from));
        }
        assert_relative_eq!(d, wasserstein2(&a, &b2).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn transport_distance_satisfies_the_triangle_inequality() {
        let mut rng = RngStream::new(48, 0).rng();
        for _ in 0..20 {
            let a = DMatrix::from_fn(2, 24, |_, _| rng.gen::<f64>());
            let b = DMatrix::from_fn(2, 24, |_, _| rng.gen::<f64>());
            let c = DMatrix::from_fn(2, 24, |_, _| rng.gen::<f64>());
            let ab = wasserstein2(&a, &b).unwrap();
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn oversized_clouds_are_rejected_by_the_exact_solver() {
        let a = DMatrix::zeros(2, ASSIGNMENT_CAP + 1);
        assert!(assignment_distance(&a, &a).is_err());
        let a1 = DMatrix::zeros(1, 2);
        let b1 = DMatrix::zeros(1, 3);
        assert!(wasserstein2(&a1, &b1).is_err());
        let b2 = DMatrix::zeros(2, 2);
        assert!(wasserstein2(&a1, &b2).is_err());
    }

    #[test]
    fn assignment_solver_hand_example() {
        // Classic 3x3: optimal value 5 via (0,1), (1,0), (2,2).
        let cost = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let (rows, total) = solve_assignment(&cost);
        assert_relative_eq!(total, 5.0, epsilon = 1e-12);
        // rows[j] = row of column j.
        let mut seen = [false; 3];
        for &r in &rows {
            seen[r] = true;
        }
        assert!(seen.iter().all(|&s| s), "not a permutation: {rows:?}");
    }

    #[test]
    fn weak_error_is_the_absolute_mean_deviation() {
        let samples = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let err = weak_error(&samples, |x| x[0], 2.0).unwrap();
        assert_relative_eq!(err, 0.5, epsilon = 1e-15);
        let err2 = weak_error(&samples, |x| x[0] * x[0], 7.5).unwrap();
        assert_relative_eq!(err2, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rate_fit_recovers_exact_power_laws() {
        let sizes: Vec<f64> = [16.0, 32.0, 64.0, 128.0, 256.0].to_vec();
        let errors: Vec<f64> = sizes.iter().map(|n| 3.0 / n.sqrt()).collect();
        let fit = fit_rate(&sizes, &errors).unwrap();
        assert_relative_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 3.0f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_fit_of_a_constant_series_is_flat_and_perfect() {
        let sizes = [10.0, 100.0, 1000.0];
        let errors = [2.0, 2.0, 2.0];
        let fit = fit_rate(&sizes, &errors).unwrap();
        assert_relative_eq!(fit.slope, 0.0, epsilon = 1e-14);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rate_fit_rejects_degenerate_inputs() {
        assert!(fit_rate(&[1.0], &[1.0]).is_err());
        assert!(fit_rate(&[1.0, 2.0], &[1.0]).is_err());
        assert!(fit_rate(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(fit_rate(&[1.0, 2.0], &[1.0, -1.0]).is_err());
        assert!(fit_rate(&[2.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rank_correlation_detects_monotone_relations() {
        let xs: [f64; 5] = [1.0, 2.0, 5.0, 9.0, 11.0];
        let up: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert_relative_eq!(spearman(&xs, &up).unwrap(), 1.0, epsilon = 1e-14);
        let down: Vec<f64> = xs.iter().map(|x| -x * x * x).collect();
        assert_relative_eq!(spearman(&xs, &down).unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_correlation_averages_ties() {
        // Ranks of xs: 1, 2.5, 2.5, 4; correlation with 1..4 is
        // 1.125 / sqrt(1.125 * 1.25) = 0.9486833.
        let xs = [1.0, 2.0, 2.0, 3.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(spearman(&xs, &ys).unwrap(), 0.948683298050514, epsilon = 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
