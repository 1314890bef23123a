//! Kinematic bicycle model of the car-like robot.
//!
//! The reference point is the middle of the rear axle. State evolves as
//!
//! ```text
//! x' = v cos(theta)    y' = v sin(theta)    theta' = v tan(gamma) / L
//! v' = a               gamma' = omega
//! ```
//!
//! with the steering angle saturating at the mechanical stop `gamma_max`.
//! Velocity is left free; exceeding the speed envelope is the reward's
//! business, not the integrator's.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Obb, Pose2, Vec2};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState<T> {
    pub x: T,
    pub y: T,
    /// Heading, kept in `(-pi, pi]`.
    pub theta: T,
    pub v: T,
    /// Steering angle.
    pub gamma: T,
    /// Absolute time since the start of the plan.
    pub t: T,
}

impl<T: Scalar> RobotState<T> {
    pub fn new(x: T, y: T, theta: T, v: T, gamma: T, t: T) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v,
            gamma,
            t,
        }
    }

    /// At rest at time zero.
    pub fn at_rest(x: T, y: T, theta: T) -> Self {
        Self::new(x, y, theta, T::zero(), T::zero(), T::zero())
    }

    pub fn pose(&self) -> Pose2<T> {
        Pose2::new(self.x, self.y, self.theta)
    }

    pub fn position(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    pub fn with_time(mut self, t: T) -> Self {
        self.t = t;
        self
    }

    /// Rigid rotation about the world origin by `phi`.
    pub fn rotated(&self, phi: T) -> Self {
        let p = self.position().rotate(phi);
        Self::new(p.x, p.y, self.theta + phi, self.v, self.gamma, self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control<T> {
    /// Linear acceleration, m/s^2.
    pub a: T,
    /// Steering rate, rad/s.
    pub omega: T,
}

impl<T: Scalar> Control<T> {
    pub fn new(a: T, omega: T) -> Self {
        Self { a, omega }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams<T> {
    pub wheel_base: T,
    pub half_length: T,
    pub half_width: T,
    /// Distance from the rear-axle reference point forward to the body center.
    pub rear_axle_offset: T,
    pub v_max: T,
    pub v_min: T,
    pub gamma_max: T,
    pub a_max: T,
    pub omega_max: T,
    /// Simulation step, seconds.
    pub dt: T,
}

impl<T: Scalar> Default for VehicleParams<T> {
    fn default() -> Self {
        let pi = T::PI();
        Self {
            wheel_base: T::lit(2.5),
            half_length: T::lit(2.0),
            half_width: T::lit(1.0),
            rear_axle_offset: T::lit(1.3),
            v_max: T::lit(4.0),
            v_min: T::zero(),
            gamma_max: pi / T::lit(6.0),
            a_max: T::lit(5.0),
            omega_max: pi / T::lit(12.0),
            dt: T::lit(0.1),
        }
    }
}

impl<T: Scalar> VehicleParams<T> {
    /// Minimum turning radius of the reference point.
    pub fn min_turn_radius(&self) -> T {
        self.wheel_base / self.gamma_max.tan()
    }
}

/// Clips each control component to its bound.
pub fn clamp_control<T: Scalar>(c: Control<T>, p: &VehicleParams<T>) -> Control<T> {
    Control::new(
        c.a.max(-p.a_max).min(p.a_max),
        c.omega.max(-p.omega_max).min(p.omega_max),
    )
}

/// Longest interval covered by one classical RK4 step. A 0.1 s simulation
/// step is two RK4 steps.
const MAX_SUBSTEP: f64 = 0.05;

#[derive(Clone, Copy)]
struct Deriv<T> {
    x: T,
    y: T,
    theta: T,
    v: T,
    gamma: T,
}

fn derivative<T: Scalar>(s: &Deriv<T>, a: T, omega: T, wheel_base: T) -> Deriv<T> {
    let (sin, cos) = s.theta.sin_cos();
    Deriv {
        x: s.v * cos,
        y: s.v * sin,
        theta: s.v * s.gamma.tan() / wheel_base,
        v: a,
        gamma: omega,
    }
}

fn axpy<T: Scalar>(s: &Deriv<T>, k: &Deriv<T>, h: T) -> Deriv<T> {
    Deriv {
        x: s.x + k.x * h,
        y: s.y + k.y * h,
        theta: s.theta + k.theta * h,
        v: s.v + k.v * h,
        gamma: s.gamma + k.gamma * h,
    }
}

fn rk4<T: Scalar>(s: Deriv<T>, a: T, omega: T, h: T, wheel_base: T) -> Deriv<T> {
    let two = T::lit(2.0);
    let half = h / two;
    let k1 = derivative(&s, a, omega, wheel_base);
    let k2 = derivative(&axpy(&s, &k1, half), a, omega, wheel_base);
    let k3 = derivative(&axpy(&s, &k2, half), a, omega, wheel_base);
    let k4 = derivative(&axpy(&s, &k3, h), a, omega, wheel_base);
    let six = T::lit(6.0);
    let comb = |a1: T, a2: T, a3: T, a4: T| (a1 + two * a2 + two * a3 + a4) * h / six;
    Deriv {
        x: s.x + comb(k1.x, k2.x, k3.x, k4.x),
        y: s.y + comb(k1.y, k2.y, k3.y, k4.y),
        theta: s.theta + comb(k1.theta, k2.theta, k3.theta, k4.theta),
        v: s.v + comb(k1.v, k2.v, k3.v, k4.v),
        gamma: s.gamma + comb(k1.gamma, k2.gamma, k3.gamma, k4.gamma),
    }
}

/// Integrates over `h` with fixed-step RK4 at steps no longer than `MAX_SUBSTEP`.
fn integrate<T: Scalar>(mut s: Deriv<T>, a: T, omega: T, h: T, wheel_base: T) -> Deriv<T> {
    let max = T::lit(MAX_SUBSTEP);
    let n = (h / max).ceil().max(T::one());
    let n_steps = n.to_usize().unwrap_or(1);
    let sub = h / n;
    for _ in 0..n_steps {
        s = rk4(s, a, omega, sub, wheel_base);
    }
    s
}

/// Advances the state by `dt` under a constant (already clamped) control.
///
/// The steering angle stops at `±gamma_max`: if the commanded rate would
/// cross the stop inside the step, the step is split at the crossing and the
/// remainder is integrated with the wheel held at the stop.
pub fn step<T: Scalar>(s: &RobotState<T>, c: Control<T>, dt: T, p: &VehicleParams<T>) -> RobotState<T> {
    assert!(dt > T::zero(), "step: dt must be positive");
    let gmax = p.gamma_max;
    let gamma0 = s.gamma.max(-gmax).min(gmax);
    let mut d = Deriv {
        x: s.x,
        y: s.y,
        theta: s.theta,
        v: s.v,
        gamma: gamma0,
    };
    let omega = c.omega;
    let stop = if omega > T::zero() {
        Some(gmax)
    } else if omega < T::zero() {
        Some(-gmax)
    } else {
        None
    };
    let time_to_stop = stop.map(|g| (g - gamma0) / omega);
    match time_to_stop {
        Some(tau) if tau < dt => {
            if tau > T::zero() {
                d = integrate(d, c.a, omega, tau, p.wheel_base);
            }
            d.gamma = stop.unwrap();
            d = integrate(d, c.a, T::zero(), dt - tau.max(T::zero()), p.wheel_base);
            d.gamma = stop.unwrap();
        }
        _ => {
            d = integrate(d, c.a, omega, dt, p.wheel_base);
        }
    }
    RobotState::new(
        d.x,
        d.y,
        d.theta,
        d.v,
        d.gamma.max(-gmax).min(gmax),
        s.t + dt,
    )
}

/// Body rectangle at the given state.
pub fn footprint<T: Scalar>(s: &RobotState<T>, p: &VehicleParams<T>) -> Obb<T> {
    let center = s.position() + Vec2::from_angle(s.theta) * p.rear_axle_offset;
    Obb::new(center, s.theta, p.half_length, p.half_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    type S = RobotState<f64>;

    fn params() -> VehicleParams<f64> {
        VehicleParams::default()
    }

    fn close(a: &S, b: &S, tol: f64) -> bool {
        (a.x - b.x).abs() <= tol
            && (a.y - b.y).abs() <= tol
            && wrap_angle(a.theta - b.theta).abs() <= tol
            && (a.v - b.v).abs() <= tol
            && (a.gamma - b.gamma).abs() <= tol
            && (a.t - b.t).abs() <= tol
    }

    #[test]
    fn clamp_examples() {
        let p = params();
        assert_eq!(clamp_control(Control::new(2.0, 0.1), &p), Control::new(2.0, 0.1));
        assert_eq!(clamp_control(Control::new(9.0, -1.0), &p), Control::new(5.0, -PI / 12.0));
        assert_eq!(
            clamp_control(Control::new(-5.0, PI / 12.0), &p),
            Control::new(-5.0, PI / 12.0)
        );
    }

    #[test]
    fn straight_line() {
        let s = S::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let n = step(&s, Control::zero(), 0.1, &params());
        assert!(close(&n, &S::new(0.1, 0.0, 0.0, 1.0, 0.0, 0.1), 1e-12));
    }

    #[test]
    fn rest_stays_at_rest() {
        let s = S::at_rest(3.0, -2.0, 1.0);
        let n = step(&s, Control::zero(), 1.0, &params());
        assert_eq!((n.x, n.y, n.theta, n.v), (3.0, -2.0, 1.0, 0.0));
        assert_eq!(n.t, 1.0);
    }

    #[test]
    fn constant_curvature_arc() {
        // atan(L) has to sit inside the steering stop
        let p = VehicleParams {
            wheel_base: 0.5,
            ..params()
        };
        let s = S::new(0.0, 0.0, 0.0, 1.0, p.wheel_base.atan(), 0.0);
        let n = step(&s, Control::zero(), 0.5, &p);
        assert!((n.theta - 0.5).abs() < 1e-6);
        assert!((n.x - 0.5f64.sin()).abs() < 1e-6);
        assert!((n.y - (1.0 - 0.5f64.cos())).abs() < 1e-6);
    }

    #[test]
    fn steering_stops_at_limit() {
        let p = params();
        let s = S::new(0.0, 0.0, 0.0, 2.0, PI / 6.0 - 0.01, 0.0);
        let n = step(&s, Control::new(0.0, PI / 12.0), 0.1, &p);
        assert_eq!(n.gamma, PI / 6.0);
    }

    #[test]
    fn footprint_examples() {
        let p = VehicleParams {
            rear_axle_offset: 1.0,
            ..params()
        };
        let f = footprint(&S::at_rest(0.0, 0.0, 0.0), &p);
        assert!(f.center.distance(Vec2::new(1.0, 0.0)) < 1e-12);
        assert_eq!(f.heading(), 0.0);
        let f = footprint(&S::at_rest(0.0, 0.0, PI), &p);
        assert!(f.center.distance(Vec2::new(-1.0, 0.0)) < 1e-12);
        let p13 = VehicleParams {
            rear_axle_offset: 1.3,
            ..params()
        };
        let f = footprint(&S::at_rest(0.0, 0.0, PI / 2.0), &p13);
        assert!(f.center.distance(Vec2::new(0.0, 1.3)) < 1e-12);
    }

    #[test]
    fn f32_tracks_f64() {
        let s64 = S::new(1.0, 2.0, 0.3, 2.0, 0.1, 0.0);
        let s32 = RobotState::<f32>::new(1.0, 2.0, 0.3, 2.0, 0.1, 0.0);
        let a = step(&s64, Control::new(1.0, 0.2), 0.1, &params());
        let b = step(&s32, Control::new(1.0, 0.2), 0.1, &VehicleParams::default());
        assert!((a.x - b.x as f64).abs() < 1e-5);
        assert!((a.theta - b.theta as f64).abs() < 1e-5);
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (S, Control<f64>) {
        let p = params();
        let s = S::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-PI..PI),
            rng.random_range(-10.0..10.0),
            rng.random_range(-p.gamma_max..p.gamma_max),
            rng.random_range(0.0..50.0),
        );
        let c = Control::new(
            rng.random_range(-p.a_max..p.a_max),
            rng.random_range(-p.omega_max..p.omega_max),
        );
        (s, c)
    }

    #[test]
    fn halves_compose() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (s, c) = random_case(&mut rng);
            let full = step(&s, c, 0.1, &p);
            let half = step(&step(&s, c, 0.05, &p), c, 0.05, &p);
            assert!(close(&full, &half, 1e-6), "{full:?} vs {half:?}");
        }
    }

    #[test]
    fn invariants_hold_after_step() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (s, c) = random_case(&mut rng);
            let n = step(&s, c, 0.1, &p);
            assert!(n.gamma.abs() <= PI / 6.0);
            assert!(n.theta > -PI && n.theta <= PI);
        }
    }

    #[test]
    fn rotation_equivariance() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (s, c) = random_case(&mut rng);
            let phi = rng.random_range(-PI..PI);
            let direct = step(&s, c, 0.1, &p);
            let via = step(&s.rotated(phi), c, 0.1, &p).rotated(-phi);
            assert!(close(&direct, &via, 1e-9), "{direct:?} vs {via:?}");
        }
    }
}
