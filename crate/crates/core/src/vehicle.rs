//! Linearized lateral vehicle dynamics about a constant-curvature reference
//! path, with the steering-rate gain as the unknown parameter.
//!
//! State `x = [delta, e_psi, e_y]` (steering angle, heading error, lateral
//! error); control `u` is the commanded steering rate before the unknown gain
//! `p` is applied.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::diag_matrix;
use crate::model::{InitialStateDistribution, ParametricAffineSystem};
use crate::scenario::StageCost;
use crate::saa_nlp::TerminalTarget;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Longitudinal speed (m/s).
    pub speed: f64,
    /// Distance from the center of mass to the front axle (m).
    pub front_length: f64,
    /// Distance from the center of mass to the rear axle (m).
    pub rear_length: f64,
    /// Reference path curvature (1/m).
    pub curvature: f64,
    /// Euler step (s).
    pub dt: f64,
    pub noise_steer: f64,
    pub noise_heading: f64,
    pub noise_lateral: f64,
    pub horizon: usize,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            speed: 10.0,
            front_length: 1.5,
            rear_length: 1.5,
            curvature: 0.02,
            dt: 0.2,
            noise_steer: 0.01,
            noise_heading: 0.005,
            noise_lateral: 0.02,
            horizon: 20,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.speed,
            self.front_length,
            self.rear_length,
            self.curvature,
            self.dt,
            self.noise_steer,
            self.noise_heading,
            self.noise_lateral,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("vehicle parameters".into()));
        }
        if !(self.speed > 0.0) {
            return Err(Error::invalid("vehicle speed", "must be positive"));
        }
        if !(self.front_length + self.rear_length > 0.0) {
            return Err(Error::invalid("vehicle wheelbase", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("vehicle time step", "must be positive"));
        }
        if self.noise_steer < 0.0 || self.noise_heading < 0.0 || self.noise_lateral < 0.0 {
            return Err(Error::invalid("vehicle noise intensities", "must be nonnegative"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("vehicle horizon", "must be at least 1"));
        }
        Ok(())
    }
}

/// Euler-discretized lateral model; `n_x = 3`, `n_u = 1`, `n_p = 1`, `n_w = 3`.
pub fn build_vehicle_system(vp: &VehicleParams) -> Result<ParametricAffineSystem> {
    vp.validate()?;
    let (v, dt) = (vp.speed, vp.dt);
    let wheelbase = vp.front_length + vp.rear_length;
    let lr = vp.rear_length / wheelbase;
    #[rustfmt::skip]
    let a0 = DMatrix::from_row_slice(3, 3, &[
        1.0, 0.0, 0.0,
        v * dt / wheelbase, 1.0, 0.0,
        lr * v * dt, v * dt, 1.0,
    ]);
    let b0 = DMatrix::zeros(3, 1);
    let r0 = DVector::from_vec(vec![0.0, -vp.curvature * v * dt, 0.0]);
    let a1 = DMatrix::zeros(3, 3);
    let b1 = DMatrix::from_column_slice(3, 1, &[dt, dt * lr, 0.0]);
    let r1 = DVector::zeros(3);
    let d = diag_matrix(&[vp.noise_steer * dt, vp.noise_heading * dt, vp.noise_lateral * dt]);
    ParametricAffineSystem::time_invariant(vp.horizon, vec![a0, a1], vec![b0, b1], vec![r0, r1], d)
}

/// `Q = diag(0, 1, 1)`, `R = 1` at every step.
pub fn default_cost(horizon: usize) -> Result<StageCost> {
    StageCost::time_invariant(horizon, diag_matrix(&[0.0, 1.0, 1.0]), DMatrix::identity(1, 1))
}

pub fn default_initial_state() -> Result<InitialStateDistribution> {
    InitialStateDistribution::gaussian(DVector::from_vec(vec![0.0, 0.1, 0.5]), diag_matrix(&[1e-4, 1e-3, 1e-2]))
}

/// Target at the origin with covariance `diag(0.01, theta, theta)`.
pub fn default_target(sigma_f_theta: f64) -> Result<TerminalTarget> {
    TerminalTarget::with_default_margins(DVector::zeros(3), diag_matrix(&[0.01, sigma_f_theta, sigma_f_theta]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn substituted_entries() {
        let sys = build_vehicle_system(&VehicleParams::default()).unwrap();
        let a = sys.a(0, 0);
        assert!((a[(1, 0)] - 10.0 * 0.2 / 3.0).abs() < 1e-15);
        assert!((a[(1, 0)] - 0.6667).abs() < 1e-4);
        assert!((a[(2, 0)] - 1.0).abs() < 1e-15);
        assert!((a[(2, 1)] - 2.0).abs() < 1e-15);
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(sys.b(0, 0), &DMatrix::zeros(3, 1));
        assert_eq!(sys.a(0, 1), &DMatrix::zeros(3, 3));
        assert_eq!(sys.b(5, 1).as_slice(), &[0.2, 0.1, 0.0]);
        assert!((sys.r(0, 0)[1] + 0.02 * 10.0 * 0.2).abs() < 1e-15);
        assert_eq!(sys.d(19).diagonal().as_slice(), &[0.01 * 0.2, 0.005 * 0.2, 0.02 * 0.2]);
        assert_eq!((sys.horizon(), sys.n_x(), sys.n_u(), sys.n_p(), sys.n_w()), (20, 3, 1, 1, 3));
    }

    #[test]
    fn gamma_column_is_control_input_direction() {
        let sys = build_vehicle_system(&VehicleParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let g = sys.assemble_gamma(3, &x, &DVector::from_element(1, 1.0)).unwrap();
        for (got, want) in g.iter().zip([0.2, 0.1, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn straight_path_has_no_offset() {
        let sys = build_vehicle_system(&VehicleParams {
            curvature: 0.0,
            ..VehicleParams::default()
        })
        .unwrap();
        for k in 0..sys.horizon() {
            assert_eq!(sys.r(k, 0), &DVector::zeros(3));
            assert_eq!(sys.r(k, 1), &DVector::zeros(3));
        }
    }

    #[test]
    fn step_matches_direct_transcription() {
        let vp = VehicleParams {
            speed: 12.0,
            front_length: 1.2,
            rear_length: 1.6,
            curvature: 0.05,
            ..VehicleParams::default()
        };
        let sys = build_vehicle_system(&vp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (d, epsi, ey) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let u: f64 = rng.gen_range(-1.0..1.0);
            let p: f64 = rng.gen_range(0.5..1.5);
            let l = vp.front_length + vp.rear_length;
            let dt = vp.dt;
            let v = vp.speed;
            let expected = [
                d + dt * p * u,
                epsi + dt * v / l * d + dt * vp.rear_length / l * p * u - dt * v * vp.curvature,
                ey + dt * v * epsi + dt * v * vp.rear_length / l * d,
            ];
            let next = sys
                .step(
                    0,
                    &DVector::from_vec(vec![d, epsi, ey]),
                    &DVector::from_element(1, u),
                    &DVector::from_element(1, p),
                    &DVector::zeros(3),
                )
                .unwrap();
            for i in 0..3 {
                assert!((next[i] - expected[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        for vp in [
            VehicleParams { speed: 0.0, ..VehicleParams::default() },
            VehicleParams { dt: -0.1, ..VehicleParams::default() },
            VehicleParams { noise_lateral: -1.0, ..VehicleParams::default() },
            VehicleParams { front_length: 0.0, rear_length: 0.0, ..VehicleParams::default() },
            VehicleParams { horizon: 0, ..VehicleParams::default() },
        ] {
            assert!(build_vehicle_system(&vp).is_err());
        }
    }

    #[test]
    fn default_benchmark_pieces() {
        let t = default_target(1e-3).unwrap();
        assert_eq!(t.sigma_f.diagonal().as_slice(), &[0.01, 1e-3, 1e-3]);
        assert_eq!(default_initial_state().unwrap().mean().as_slice(), &[0.0, 0.1, 0.5]);
        assert_eq!(default_cost(20).unwrap().horizon(), 20);
    }
}
