//! Velocity-Verlet transport of a phase ensemble in a confining potential.

use crate::error::{Error, Result};
use crate::model::Potential;

use super::PhaseEnsemble;

/// Advance every particle along the Hamiltonian flow
/// `dx/dt = v`, `dv/dt = -grad f(x)` from the ensemble's current time to
/// `t_target`, using velocity-Verlet substeps of at most `dt_max`.
///
/// Substeps use the full `dt_max` until less than one step remains; the
/// final substep is shortened so the ensemble lands on `t_target` exactly.
/// One substep per particle is
///
/// ```text
/// v_half = v - (dt/2) grad f(x)
/// x'     = x + dt v_half
/// v'     = v_half - (dt/2) grad f(x')
/// ```
///
/// The scheme is symplectic and time-reversible; for smooth confining
/// potentials the total energy oscillates within an `O(dt_max^2)` band
/// instead of drifting.
pub fn verlet_advance(
    phase: &mut PhaseEnsemble,
    pot: &Potential,
    t_target: f64,
    dt_max: f64,
) -> Result<()> {
    if pot.dim() != phase.dim() {
        return Err(Error::DimensionMismatch {
            context: "verlet_advance: potential vs ensemble dimension",
            expected: phase.dim(),
            found: pot.dim(),
        });
    }
    if !(dt_max > 0.0) || !dt_max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "verlet_advance: dt_max must be positive and finite, got {dt_max}"
        )));
    }
    if !t_target.is_finite() || t_target < phase.time {
        return Err(Error::InvalidArgument(format!(
            "verlet_advance: target time {t_target} precedes current time {}",
            phase.time
        )));
    }

    let n = phase.len();
    loop {
        let remaining = t_target - phase.time;
        if remaining <= 0.0 {
            break;
        }
        let (dt, lands) = if remaining <= dt_max {
            (remaining, true)
        } else {
            (dt_max, false)
        };
        let half = 0.5 * dt;
        for i in 0..n {
            let mut x = phase.positions.column(i).into_owned();
            let mut v = phase.velocities.column(i).into_owned();
            let g = pot.grad(&x)?;
            v.axpy(-half, &g, 1.0);
            x.axpy(dt, &v, 1.0);
            let g = pot.grad(&x)?;
            v.axpy(-half, &g, 1.0);
            phase.positions.set_column(i, &x);
            phase.velocities.set_column(i, &v);
        }
        phase.time = if lands { t_target } else { phase.time + dt };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn free_potential() -> Potential {
        Potential::new("free", 1, |_| 0.0, |_| DVector::zeros(1))
    }

    fn single_particle(x: f64, v: f64) -> PhaseEnsemble {
        PhaseEnsemble::new(
            DMatrix::from_row_slice(1, 1, &[x]),
            DMatrix::from_row_slice(1, 1, &[v]),
        )
        .unwrap()
    }

    #[test]
    fn free_streaming_is_exact() {
        let pot = free_potential();
        let mut phase = single_particle(0.25, -1.5);
        verlet_advance(&mut phase, &pot, 3.0, 0.01).unwrap();
        assert_relative_eq!(phase.positions[(0, 0)], 0.25 - 1.5 * 3.0, epsilon = 1e-13);
        assert_relative_eq!(phase.velocities[(0, 0)], -1.5, epsilon = 1e-15);
        assert_eq!(phase.time, 3.0);
    }

    #[test]
    fn single_harmonic_substep_matches_hand_computation() {
        // f = x^2/2, x = 1, v = 0, one substep of dt = 0.1:
        // v_half = -0.05, x' = 1 + 0.1(-0.05) = 0.995,
        // v' = -0.05 - 0.05 * 0.995 = -0.09975.
        let pot = crate::model::quadratic_1d();
        let mut phase = single_particle(1.0, 0.0);
        verlet_advance(&mut phase, &pot, 0.1, 0.1).unwrap();
        assert_relative_eq!(phase.positions[(0, 0)], 0.995, epsilon = 1e-15);
        assert_relative_eq!(phase.velocities[(0, 0)], -0.09975, epsilon = 1e-15);
    }

    #[test]
    fn harmonic_energy_stays_in_a_small_band() {
        // 10^4 steps of dt = 0.01 across t in [0, 100]: for the harmonic
        // oscillator, Verlet keeps |E(t) - E(0)| = O(dt^2) with no drift.
        let pot = crate::model::quadratic_1d();
        let mut phase = single_particle(1.0, 0.0);
        let e0 = phase.total_energy(&pot).unwrap();
        let mut worst: f64 = 0.0;
        for k in 1..=100 {
            verlet_advance(&mut phase, &pot, k as f64, 0.01).unwrap();
            let e = phase.total_energy(&pot).unwrap();
            worst = worst.max((e - e0).abs());
        }
        assert!(worst < 1e-3, "worst energy deviation {worst}");
    }

    #[test]
    fn final_substep_lands_exactly_on_target() {
        let pot = crate::model::quadratic_1d();
        let mut phase = single_particle(0.3, 0.7);
        verlet_advance(&mut phase, &pot, 0.7501, 0.01).unwrap();
        assert_eq!(phase.time, 0.7501);
    }

    #[test]
    fn advancing_to_the_present_is_a_no_op() {
        let pot = crate::model::quadratic_1d();
        let mut phase = single_particle(0.3, 0.7);
        let before = phase.clone();
        verlet_advance(&mut phase, &pot, 0.0, 0.01).unwrap();
        assert_eq!(phase.positions, before.positions);
        assert_eq!(phase.velocities, before.velocities);
    }

    #[test]
    fn rejects_backwards_targets_and_bad_steps() {
        let pot = crate::model::quadratic_1d();
        let mut phase = single_particle(0.0, 0.0);
        phase.time = 1.0;
        assert!(verlet_advance(&mut phase, &pot, 0.5, 0.01).is_err());
        assert!(verlet_advance(&mut phase, &pot, 2.0, 0.0).is_err());
        assert!(verlet_advance(&mut phase, &pot, 2.0, -0.1).is_err());
    }

    #[test]
    fn time_reversal_returns_to_the_start() {
        // Run forward, flip velocities, run the same length again: the
        // symmetric scheme retraces its path to rounding error.
        let pot = crate::model::doublewell_1d();
        let mut phase = single_particle(0.4, 0.9);
        verlet_advance(&mut phase, &pot, 2.0, 0.01).unwrap();
        phase.velocities.neg_mut();
        phase.time = 0.0;
        verlet_advance(&mut phase, &pot, 2.0, 0.01).unwrap();
        assert_relative_eq!(phase.positions[(0, 0)], 0.4, epsilon = 1e-9);
        assert_relative_eq!(phase.velocities[(0, 0)], -0.9, epsilon = 1e-9);
    }
}
