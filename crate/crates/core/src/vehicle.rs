//! Kinematic bicycle model stepped at the control rate.

use serde::{Deserialize, Serialize};

use crate::geom::wrap_angle;

/// Ego physical state. Speed is longitudinal and never negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        debug_assert!(speed >= 0.0);
        Self { x, y, heading: wrap_angle(heading), speed }
    }
}

/// The policy's two tanh-bounded outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    /// Steering in [-1, 1]; positive steers left.
    pub steer: f64,
    /// Combined throttle/brake in [-1, 1]; positive accelerates.
    pub accel_cmd: f64,
}

impl ControlAction {
    pub fn new(steer: f64, accel_cmd: f64) -> Self {
        Self { steer: steer.clamp(-1.0, 1.0), accel_cmd: accel_cmd.clamp(-1.0, 1.0) }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Wheelbase, meters.
    pub wheelbase: f64,
    /// Maximum steering angle, radians.
    pub max_steer: f64,
    /// Maximum acceleration, m/s^2.
    pub max_accel: f64,
    /// Maximum braking deceleration, m/s^2.
    pub max_brake: f64,
    /// Linear drag coefficient, 1/s; zero-throttle coasting decays.
    pub drag: f64,
    /// Control period, seconds (1 / control rate).
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steer: 35.0f64.to_radians(),
            max_accel: 3.0,
            max_brake: 6.0,
            drag: 0.05,
            dt: 0.1,
        }
    }
}

/// One explicit-Euler step of the kinematic bicycle model.
///
/// Total function: action components are clamped, never rejected. NaN state
/// is a contract violation.
pub fn step(state: VehicleState, action: ControlAction, params: &VehicleParams) -> VehicleState {
    debug_assert!(
        state.x.is_finite() && state.y.is_finite() && state.heading.is_finite() && state.speed.is_finite(),
        "vehicle step on non-finite state"
    );
    let steer = action.steer.clamp(-1.0, 1.0);
    let accel_cmd = action.accel_cmd.clamp(-1.0, 1.0);

    let delta = steer * params.max_steer;
    let a = if accel_cmd >= 0.0 { accel_cmd * params.max_accel } else { accel_cmd * params.max_brake };
    let speed = (state.speed + (a - params.drag * state.speed) * params.dt).max(0.0);
    let heading = wrap_angle(state.heading + (state.speed / params.wheelbase) * delta.tan() * params.dt);
    let x = state.x + state.speed * state.heading.cos() * params.dt;
    let y = state.y + state.speed * state.heading.sin() * params.dt;
    VehicleState { x, y, heading, speed }
}

/// m/s to km/h.
pub fn kmh(speed_mps: f64) -> f64 {
    speed_mps * 3.6
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_drag() -> VehicleParams {
        VehicleParams { drag: 0.0, ..Default::default() }
    }

    #[test]
    fn straight_line_kinematics() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 5.0);
        let s2 = step(s, ControlAction::new(0.0, 0.0), &no_drag());
        assert_eq!((s2.x, s2.y, s2.heading, s2.speed), (0.5, 0.0, 0.0, 5.0));
    }

    #[test]
    fn no_reverse_from_standstill() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let s2 = step(s, ControlAction::new(0.0, -1.0), &VehicleParams::default());
        assert_eq!(s2.speed, 0.0);
        assert_eq!((s2.x, s2.y), (0.0, 0.0));
    }

    #[test]
    fn constant_steer_converges_to_bicycle_radius() {
        // Fine steps approach the continuous circle of radius L / tan(delta).
        let params = VehicleParams { drag: 0.0, dt: 1e-4, ..Default::default() };
        let delta = 0.3f64; // rad
        let steer = delta / params.max_steer;
        let v = 5.0;
        let mut s = VehicleState::new(0.0, 0.0, 0.0, v);
        // Drive a half circle worth of heading change.
        let r_expect = params.wheelbase / delta.tan();
        let steps = (std::f64::consts::PI * r_expect / v / params.dt) as usize;
        let mut min_x = f64::MAX;
        let mut max_x = f64::MIN;
        let mut min_y = f64::MAX;
        let mut max_y = f64::MIN;
        for _ in 0..steps {
            s = step(s, ControlAction { steer, accel_cmd: 0.0 }, &params);
            min_x = min_x.min(s.x);
            max_x = max_x.max(s.x);
            min_y = min_y.min(s.y);
            max_y = max_y.max(s.y);
        }
        // Over a half circle, the y extent equals the diameter.
        let r_measured = (max_y - min_y) / 2.0;
        assert!(
            (r_measured - r_expect).abs() / r_expect < 1e-3,
            "radius {} vs expected {}",
            r_measured,
            r_expect
        );
    }

    #[test]
    fn zero_steer_has_no_lateral_deviation() {
        let params = VehicleParams::default();
        let mut s = VehicleState::new(3.0, -2.0, 0.7, 4.0);
        let heading0 = s.heading;
        let (x0, y0) = (s.x, s.y);
        for i in 0..500 {
            let accel = if i % 7 == 0 { 0.5 } else { -0.2 };
            s = step(s, ControlAction::new(0.0, accel), &params);
            // Lateral offset from the initial heading line.
            let dx = s.x - x0;
            let dy = s.y - y0;
            let lateral = -heading0.sin() * dx + heading0.cos() * dy;
            assert!(lateral.abs() < 1e-12);
            assert_eq!(s.heading, heading0);
        }
    }

    #[test]
    fn steer_mirror_symmetry_is_exact() {
        let params = VehicleParams::default();
        let mut a = VehicleState::new(0.0, 0.0, 0.0, 3.0);
        let mut b = a;
        for i in 0..300 {
            let steer = ((i as f64) * 0.37).sin();
            let accel = ((i as f64) * 0.11).cos() * 0.5;
            a = step(a, ControlAction::new(steer, accel), &params);
            b = step(b, ControlAction::new(-steer, accel), &params);
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, -b.y);
            assert_eq!(a.heading, -b.heading);
            assert_eq!(a.speed, b.speed);
        }
    }

    #[test]
    fn kmh_paper_speeds() {
        assert_eq!(kmh(0.0), 0.0);
        assert!((kmh(2.9167) - 10.5).abs() < 1e-3);
        assert!((kmh(2.5) - 9.0).abs() < 1e-12);
    }
}
