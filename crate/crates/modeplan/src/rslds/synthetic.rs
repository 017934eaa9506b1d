//! Hand-built ground-truth systems for recovery tests and the synthetic
//! fitting harness. The two-mode system switches on the sign of the first
//! state coordinate with a sharp gate, and its per-mode dynamics are far
//! apart so recovered parameters can be matched unambiguously.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{ModeDynamics, Recurrence, RsldsParams};

/// Two modes over a two-dimensional state with a scalar control. The gate
/// weight on the first coordinate is steep (|logit slope| = 8) so the mode is
/// near-deterministic away from the switching surface.
pub fn two_mode_system() -> RsldsParams {
    let modes = vec![
        ModeDynamics {
            transition: DMatrix::from_row_slice(2, 2, &[0.95, 0.10, -0.10, 0.90]),
            control: DMatrix::from_row_slice(2, 1, &[0.50, 0.10]),
            offset: DVector::from_row_slice(&[0.05, 0.00]),
            noise_cov: DMatrix::identity(2, 2) * 1e-3,
        },
        ModeDynamics {
            transition: DMatrix::from_row_slice(2, 2, &[0.70, -0.20, 0.15, 0.85]),
            control: DMatrix::from_row_slice(2, 1, &[-0.30, 0.40]),
            offset: DVector::from_row_slice(&[-0.05, 0.02]),
            noise_cov: DMatrix::identity(2, 2) * 1e-3,
        },
    ];
    let recurrence = Recurrence {
        state_weights: DMatrix::from_row_slice(2, 2, &[-8.0, 0.0, 8.0, 0.0]),
        control_weights: DMatrix::zeros(2, 1),
        bias: DVector::zeros(2),
    };
    let params = RsldsParams {
        modes,
        recurrence,
        emission_cov: DMatrix::identity(2, 2) * 1e-4,
    };
    params.validate().expect("ground truth is well formed");
    params
}

/// Persistently exciting scalar control sequence: piecewise-constant blocks
/// of random sign and amplitude with a small dither, so both the control
/// direction and the visited half-planes keep changing.
pub fn excitation_controls<R: Rng>(len: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let mut controls = Vec::with_capacity(len);
    let mut remaining = 0usize;
    let mut level = 0.0f64;
    for _ in 0..len {
        if remaining == 0 {
            remaining = rng.random_range(15..35);
            let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            level = sign * rng.random_range(0.5..1.0);
        }
        remaining -= 1;
        let dither = rng.random_range(-0.1..0.1);
        controls.push(DVector::from_element(1, level + dither));
    }
    controls
}
