//! Kinematic bicycle model for the ego vehicle and the Intelligent Driver
//! Model (IDM) longitudinal law used by neighbor vehicles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ego vehicle state: longitudinal/lateral position, speed and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// Longitudinal position (m).
    pub x: f64,
    /// Lateral position (m).
    pub y: f64,
    /// Speed (m/s), never negative.
    pub v: f64,
    /// Heading angle (rad), kept in (-pi, pi].
    pub phi: f64,
}

impl EgoState {
    pub fn new(x: f64, y: f64, v: f64, phi: f64) -> Self {
        Self {
            x,
            y,
            v: v.max(0.0),
            phi: wrap_angle(phi),
        }
    }

    /// Planar velocity vector implied by speed and heading.
    pub fn velocity(&self) -> (f64, f64) {
        (self.v * self.phi.cos(), self.v * self.phi.sin())
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Control input: longitudinal acceleration and front-wheel steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Acceleration (m/s^2).
    pub accel: f64,
    /// Front-wheel steering angle (rad).
    pub steer: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }
}

/// Physical dimensions of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleGeometry {
    /// Wheelbase (m).
    pub wheelbase: f64,
    /// Overall body length (m).
    pub body_length: f64,
    /// Overall body width (m).
    pub body_width: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            wheelbase: 4.0,
            body_length: 4.8,
            body_width: 2.0,
        }
    }
}

impl VehicleGeometry {
    /// Geometry derived from body dimensions, with the wheelbase taken as
    /// 0.6 of the body length (the convention used for dataset vehicles).
    pub fn from_body(length: f64, width: f64) -> Self {
        Self {
            wheelbase: 0.6 * length,
            body_length: length,
            body_width: width,
        }
    }
}

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired free-flow speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub time_headway: f64,
    /// Jam distance (m).
    pub s0: f64,
    /// Maximum acceleration (m/s^2).
    pub a_max: f64,
    /// Comfortable deceleration (m/s^2).
    pub b: f64,
    /// Free-flow exponent.
    pub exponent: f64,
    /// Hard deceleration cap (m/s^2), applied as a lower clamp.
    pub b_emergency: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 13.0,
            time_headway: 1.5,
            s0: 2.0,
            a_max: 1.5,
            b: 2.0,
            exponent: 4.0,
            b_emergency: 6.0,
        }
    }
}

impl IdmParams {
    pub fn with_v0(v0: f64) -> Self {
        Self {
            v0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("IDM gap must be positive when a leader exists, got {gap}")]
    NonPositiveGap { gap: f64 },
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a - two_pi
    } else {
        a
    }
}

/// Side-slip angle at the center of gravity for a steering angle `steer`,
/// with the center of gravity at the wheelbase midpoint:
/// `beta = atan(0.5 * tan(steer))`.
pub fn slip_angle(steer: f64) -> f64 {
    debug_assert!(
        steer.abs() < std::f64::consts::FRAC_PI_2,
        "steering angle out of range"
    );
    (0.5 * steer.tan()).atan()
}

/// Derivative of [`slip_angle`] with respect to the steering angle.
pub fn slip_angle_deriv(steer: f64) -> f64 {
    let sec2 = 1.0 / (steer.cos() * steer.cos());
    let t = 0.5 * steer.tan();
    0.5 * sec2 / (1.0 + t * t)
}

/// Continuous-time bicycle-model derivative (x_dot, y_dot, v_dot, phi_dot)
/// for a given state and input.
fn bicycle_deriv(s: &EgoState, u: &ControlInput, geom: &VehicleGeometry) -> (f64, f64, f64, f64) {
    let beta = slip_angle(u.steer);
    let heading = s.phi + beta;
    (
        s.v * heading.cos(),
        s.v * heading.sin(),
        u.accel,
        s.v / geom.wheelbase * beta.sin(),
    )
}

/// One explicit-Euler step of the kinematic bicycle model.
///
/// Speed is clamped at zero (no reverse driving) and the heading is wrapped
/// into (-pi, pi].
pub fn bicycle_step(s: &EgoState, u: &ControlInput, geom: &VehicleGeometry, dt: f64) -> EgoState {
    debug_assert!(dt > 0.0);
    let (dx, dy, dv, dphi) = bicycle_deriv(s, u, geom);
    EgoState {
        x: s.x + dx * dt,
        y: s.y + dy * dt,
        v: (s.v + dv * dt).max(0.0),
        phi: wrap_angle(s.phi + dphi * dt),
    }
}

/// One classical 4th-order Runge-Kutta step of the bicycle model with the
/// input held constant over the step. Reference integrator for convergence
/// checks.
pub fn bicycle_step_rk4(
    s: &EgoState,
    u: &ControlInput,
    geom: &VehicleGeometry,
    dt: f64,
) -> EgoState {
    debug_assert!(dt > 0.0);
    let eval = |st: &EgoState| bicycle_deriv(st, u, geom);
    let add = |st: &EgoState, k: (f64, f64, f64, f64), h: f64| EgoState {
        x: st.x + k.0 * h,
        y: st.y + k.1 * h,
        v: st.v + k.2 * h,
        phi: st.phi + k.3 * h,
    };
    let k1 = eval(s);
    let k2 = eval(&add(s, k1, 0.5 * dt));
    let k3 = eval(&add(s, k2, 0.5 * dt));
    let k4 = eval(&add(s, k3, dt));
    let sixth = dt / 6.0;
    EgoState {
        x: s.x + sixth * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        y: s.y + sixth * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        v: (s.v + sixth * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2)).max(0.0),
        phi: wrap_angle(s.phi + sixth * (k1.3 + 2.0 * k2.3 + 2.0 * k3.3 + k4.3)),
    }
}

/// IDM acceleration for a vehicle at speed `v`.
///
/// `gap` is the bumper-to-bumper distance to the leader and `delta_v` the
/// approach rate (follower speed minus leader speed); `gap = None` means a
/// free road. The result is clamped to `[-b_emergency, a_max]`.
pub fn idm_accel(
    v: f64,
    gap: Option<f64>,
    delta_v: f64,
    p: &IdmParams,
) -> Result<f64, VehicleError> {
    let free_term = 1.0 - (v / p.v0).powf(p.exponent);
    let raw = match gap {
        None => p.a_max * free_term,
        Some(g) if g <= 0.0 => return Err(VehicleError::NonPositiveGap { gap: g }),
        Some(g) => {
            let s_star = p.s0 + v * p.time_headway + v * delta_v / (2.0 * (p.a_max * p.b).sqrt());
            p.a_max * (free_term - (s_star / g).powi(2))
        }
    };
    Ok(raw.clamp(-p.b_emergency, p.a_max))
}
