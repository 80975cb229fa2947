//! Skid-steer (SSWMR) kinematics: frame transforms, wheel/body velocity
//! maps under the symmetric-ICR model, and exact arc integration for
//! piecewise-constant controls.

use serde::{Deserialize, Serialize};

use crate::geom::wrap_angle;

/// Planar ego state: inertial-frame pose plus body-frame velocities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega_z: f64,
}

impl EgoState {
    pub fn at_pose(x: f64, y: f64, theta: f64) -> Self {
        EgoState { x, y, theta: wrap_angle(theta), v_x: 0.0, v_y: 0.0, omega_z: 0.0 }
    }

    pub fn pose(&self) -> crate::geom::Pose2 {
        crate::geom::Pose2::new(self.x, self.y, self.theta)
    }
}

/// Platform constants of the symmetric skid-steer model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    /// Wheel radius, meters.
    pub r: f64,
    /// Symmetric lateral offset of the side ICRs, meters.
    pub y_icr0: f64,
    /// Wheel angular speed bound, rad/s.
    pub omega_wheel_max: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        // 1:4-scale skid-steer platform class.
        KinematicParams { r: 0.165, y_icr0: 0.55, omega_wheel_max: 9.0 }
    }
}

/// Body-frame velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub v_x: f64,
    pub omega_z: f64,
}

impl ControlSignal {
    pub fn new(v_x: f64, omega_z: f64) -> Self {
        ControlSignal { v_x, omega_z }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KinematicsError {
    #[error("wheel speed exceeded: |left|={left:.3}, |right|={right:.3}, max={max:.3} rad/s")]
    WheelSpeedExceeded { left: f64, right: f64, max: f64 },
    #[error("degenerate ICR configuration: y_ICR_l == y_ICR_r")]
    DegenerateIcr,
}

/// Rotate body-frame velocities into the inertial frame.
pub fn body_to_world(theta: f64, v_x: f64, v_y: f64, omega_z: f64) -> (f64, f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * v_x - s * v_y, s * v_x + c * v_y, omega_z)
}

/// Body velocities from wheel angular speeds under the symmetric model:
/// v_x = (w_l + w_r) r / 2, v_y = 0, omega_z = (-w_l + w_r) r / (2 y_ICR0).
pub fn wheel_to_body(omega_l: f64, omega_r: f64, params: &KinematicParams) -> (f64, f64, f64) {
    let v_x = (omega_l * params.r + omega_r * params.r) / 2.0;
    let omega_z = (-omega_l * params.r + omega_r * params.r) / (2.0 * params.y_icr0);
    (v_x, 0.0, omega_z)
}

/// Wheel speeds realizing a control; exact right-inverse of `wheel_to_body`.
pub fn body_to_wheel(
    u: ControlSignal,
    params: &KinematicParams,
) -> Result<(f64, f64), KinematicsError> {
    let left = (u.v_x - u.omega_z * params.y_icr0) / params.r;
    let right = (u.v_x + u.omega_z * params.y_icr0) / params.r;
    if left.abs() > params.omega_wheel_max || right.abs() > params.omega_wheel_max {
        return Err(KinematicsError::WheelSpeedExceeded {
            left,
            right,
            max: params.omega_wheel_max,
        });
    }
    Ok((left, right))
}

/// General ICR-coordinate Jacobian mapping wheel rim speeds (w_l r, w_r r)
/// to (v_x, v_y, omega_z); rows scaled by 1 / (y_ICR_l - y_ICR_r).
pub fn icr_jacobian(
    x_icr: f64,
    y_icr_l: f64,
    y_icr_r: f64,
) -> Result<[[f64; 2]; 3], KinematicsError> {
    let denom = y_icr_l - y_icr_r;
    if denom == 0.0 {
        return Err(KinematicsError::DegenerateIcr);
    }
    Ok([
        [-y_icr_r / denom, y_icr_l / denom],
        [x_icr / denom, -x_icr / denom],
        [-1.0 / denom, 1.0 / denom],
    ])
}

/// Advance the state by `dt` under a constant control. Exact closed form:
/// straight-line update when |omega_z| is negligible, otherwise a circular
/// arc of radius v_x / omega_z. Heading is wrapped to (-pi, pi].
pub fn step_exact(state: &EgoState, u: ControlSignal, dt: f64) -> EgoState {
    debug_assert!(dt > 0.0);
    let theta = state.theta;
    let (x, y) = if u.omega_z.abs() < 1e-9 {
        (
            state.x + u.v_x * dt * theta.cos(),
            state.y + u.v_x * dt * theta.sin(),
        )
    } else {
        let radius = u.v_x / u.omega_z;
        let theta_next = theta + u.omega_z * dt;
        (
            state.x + radius * (theta_next.sin() - theta.sin()),
            state.y - radius * (theta_next.cos() - theta.cos()),
        )
    };
    EgoState {
        x,
        y,
        theta: wrap_angle(theta + u.omega_z * dt),
        v_x: u.v_x,
        v_y: 0.0,
        omega_z: u.omega_z,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angle_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};

    #[test]
    fn body_to_world_examples() {
        let (xd, yd, td) = body_to_world(0.0, 1.0, 0.0, 0.3);
        assert!((xd - 1.0).abs() < 1e-12 && yd.abs() < 1e-12 && (td - 0.3).abs() < 1e-12);

        let (xd, yd, _) = body_to_world(FRAC_PI_2, 1.0, 0.0, 0.0);
        assert!(xd.abs() < 1e-12 && (yd - 1.0).abs() < 1e-12);

        let (xd, yd, _) = body_to_world(FRAC_PI_4, 1.0, 1.0, 0.0);
        assert!(xd.abs() < 1e-12 && (yd - SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn wheel_to_body_examples() {
        let p = KinematicParams { r: 0.5, y_icr0: 0.5, omega_wheel_max: 50.0 };
        let (vx, vy, wz) = wheel_to_body(2.0, 2.0, &p);
        assert!((vx - 1.0).abs() < 1e-12 && vy == 0.0 && wz.abs() < 1e-12);

        let (vx, _, wz) = wheel_to_body(-2.0, 2.0, &p);
        assert!(vx.abs() < 1e-12 && (wz - 2.0).abs() < 1e-12);

        let p2 = KinematicParams { r: 0.5, y_icr0: 0.4, omega_wheel_max: 50.0 };
        let (vx, _, wz) = wheel_to_body(0.0, 2.0, &p2);
        assert!((vx - 0.5).abs() < 1e-12 && (wz - 1.25).abs() < 1e-12);
    }

    #[test]
    fn body_to_wheel_examples_and_saturation() {
        let p = KinematicParams { r: 0.5, y_icr0: 0.5, omega_wheel_max: 50.0 };
        let (l, r) = body_to_wheel(ControlSignal::new(1.0, 0.0), &p).unwrap();
        assert!((l - 2.0).abs() < 1e-12 && (r - 2.0).abs() < 1e-12);

        let (l, r) = body_to_wheel(ControlSignal::new(0.0, 2.0), &p).unwrap();
        assert!((l + 2.0).abs() < 1e-12 && (r - 2.0).abs() < 1e-12);

        let err = body_to_wheel(ControlSignal::new(100.0, 0.0), &p);
        assert!(matches!(err, Err(KinematicsError::WheelSpeedExceeded { .. })));
    }

    #[test]
    fn wheel_body_roundtrip_and_zero_lateral() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let p = KinematicParams {
                r: rng.gen_range(0.05..0.5),
                y_icr0: rng.gen_range(0.1..1.0),
                omega_wheel_max: 1e9,
            };
            let u = ControlSignal::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let (l, r) = body_to_wheel(u, &p).unwrap();
            let (vx, vy, wz) = wheel_to_body(l, r, &p);
            assert!(vy == 0.0);
            assert!((vx - u.v_x).abs() < 1e-12);
            assert!((wz - u.omega_z).abs() < 1e-12);
        }
    }

    #[test]
    fn icr_jacobian_examples() {
        let j = icr_jacobian(0.0, 0.5, -0.5).unwrap();
        assert_eq!(j[0], [0.5, 0.5]);
        assert_eq!(j[1], [0.0, 0.0]);
        assert_eq!(j[2], [-1.0, 1.0]);

        // Symmetric inputs reduce to the 1/(2 y0) [[y0, y0], [0, 0], [-1, 1]] form.
        let y0 = 0.5;
        let j = icr_jacobian(0.0, y0, -y0).unwrap();
        let expect = [[y0 / (2.0 * y0), y0 / (2.0 * y0)], [0.0, 0.0], [-1.0 / (2.0 * y0), 1.0 / (2.0 * y0)]];
        for (row, exp) in j.iter().zip(expect.iter()) {
            for (a, b) in row.iter().zip(exp.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }

        assert!(matches!(icr_jacobian(0.0, 0.3, 0.3), Err(KinematicsError::DegenerateIcr)));
    }

    #[test]
    fn step_exact_examples() {
        let s0 = EgoState::at_pose(0.0, 0.0, 0.0);
        let s = step_exact(&s0, ControlSignal::new(1.0, 0.0), 1.0);
        assert!((s.x - 1.0).abs() < 1e-12 && s.y.abs() < 1e-12 && s.theta.abs() < 1e-12);

        let s = step_exact(&s0, ControlSignal::new(1.0, FRAC_PI_2), 1.0);
        assert!((s.x - 2.0 / PI).abs() < 1e-12);
        assert!((s.y - 2.0 / PI).abs() < 1e-12);
        assert!((s.theta - FRAC_PI_2).abs() < 1e-12);

        // Full in-place turn: position unchanged, heading wraps around.
        let s1 = EgoState::at_pose(0.4, -0.7, 0.9);
        let s = step_exact(&s1, ControlSignal::new(0.0, PI), 2.0);
        assert!((s.x - 0.4).abs() < 1e-9 && (s.y + 0.7).abs() < 1e-9);
        assert!(angle_diff(s.theta, 0.9).abs() < 1e-12);
    }

    #[test]
    fn step_exact_subdivision_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let s0 = EgoState::at_pose(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-PI..PI),
            );
            let u = ControlSignal::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let dt = rng.gen_range(0.1..2.0);
            let n = rng.gen_range(2..20);
            let single = step_exact(&s0, u, dt);
            let mut multi = s0;
            for _ in 0..n {
                multi = step_exact(&multi, u, dt / n as f64);
            }
            assert!((single.x - multi.x).abs() < 1e-9);
            assert!((single.y - multi.y).abs() < 1e-9);
            assert!(angle_diff(single.theta, multi.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_wheel_speeds_keep_heading() {
        let p = KinematicParams::default();
        let (vx, _, wz) = wheel_to_body(3.0, 3.0, &p);
        assert!(wz == 0.0);
        let s0 = EgoState::at_pose(1.0, 2.0, 0.8);
        let s = step_exact(&s0, ControlSignal::new(vx, wz), 1.7);
        assert_eq!(s.theta, s0.theta);
    }

    #[test]
    fn body_to_world_preserves_speed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let theta = rng.gen_range(-PI..PI);
            let vx = rng.gen_range(-4.0..4.0);
            let vy = rng.gen_range(-4.0..4.0);
            let (xd, yd, _) = body_to_world(theta, vx, vy, 0.0);
            assert!((xd.hypot(yd) - vx.hypot(vy)).abs() < 1e-12);
        }
    }
}
