//! Planar geometry: angles, poses, oriented rectangles, overlap and ray queries.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Wraps an angle into `(-pi, pi]`.
///
/// Panics on non-finite input.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    assert!(a.is_finite(), "wrap_angle: non-finite angle {a}");
    let pi = T::PI();
    if a > -pi && a <= pi {
        return a;
    }
    let two_pi = T::two_pi();
    let mut m = (pi - a) % two_pi;
    if m < T::zero() {
        m = m + two_pi;
    }
    let r = pi - m;
    if r <= -pi {
        pi
    } else {
        r
    }
}

/// Signed shortest rotation taking `from` onto `to`, in `(-pi, pi]`.
pub fn angle_diff<T: Scalar>(to: T, from: T) -> T {
    wrap_angle(to - from)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    /// Unit vector at `angle` radians from +x.
    pub fn from_angle(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    /// Counter-clockwise rotation by `angle`.
    pub fn rotate(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }
}

impl<T: Scalar> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

impl<T: Scalar> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Planar pose. `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2<T> {
    pub x: T,
    pub y: T,
    theta: T,
}

impl<T: Scalar> Pose2<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn position(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn transform_point(&self, local: Vec2<T>) -> Vec2<T> {
        self.position() + local.rotate(self.theta)
    }

    /// Maps a world point into this pose's local frame.
    pub fn inverse_transform_point(&self, world: Vec2<T>) -> Vec2<T> {
        (world - self.position()).rotate(-self.theta)
    }

    /// Composes `self ∘ other`: `other` is expressed in this pose's frame.
    pub fn compose(&self, other: &Pose2<T>) -> Pose2<T> {
        let p = self.transform_point(other.position());
        Pose2::new(p.x, p.y, self.theta + other.theta)
    }
}

/// Oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb<T> {
    pub center: Vec2<T>,
    heading: T,
    pub half_length: T,
    pub half_width: T,
}

impl<T: Scalar> Obb<T> {
    /// Panics unless both half-extents are positive and finite.
    pub fn new(center: Vec2<T>, heading: T, half_length: T, half_width: T) -> Self {
        assert!(
            half_length > T::zero() && half_width > T::zero(),
            "Obb half-extents must be positive (got {half_length}, {half_width})"
        );
        assert!(half_length.is_finite() && half_width.is_finite());
        Self {
            center,
            heading: wrap_angle(heading),
            half_length,
            half_width,
        }
    }

    pub fn from_pose(pose: &Pose2<T>, half_length: T, half_width: T) -> Self {
        Self::new(pose.position(), pose.theta(), half_length, half_width)
    }

    pub fn heading(&self) -> T {
        self.heading
    }

    /// Unit vector along the length axis.
    pub fn axis_u(&self) -> Vec2<T> {
        Vec2::from_angle(self.heading)
    }

    /// Unit vector along the width axis.
    pub fn axis_w(&self) -> Vec2<T> {
        self.axis_u().perp()
    }

    /// Corners in counter-clockwise order starting at front-left.
    pub fn corners(&self) -> [Vec2<T>; 4] {
        let u = self.axis_u() * self.half_length;
        let w = self.axis_w() * self.half_width;
        let c = self.center;
        [c + u + w, c - u + w, c - u - w, c + u - w]
    }

    pub fn bounding_radius(&self) -> T {
        self.half_length.hypot(self.half_width)
    }

    /// The same box grown by `margin` on every side.
    pub fn inflated(&self, margin: T) -> Self {
        Self::new(
            self.center,
            self.heading,
            self.half_length + margin,
            self.half_width + margin,
        )
    }

    /// Coordinates of a world point in the box frame.
    pub fn to_local(&self, p: Vec2<T>) -> Vec2<T> {
        (p - self.center).rotate(-self.heading)
    }

    /// Closed containment test.
    pub fn contains(&self, p: Vec2<T>) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_length && l.y.abs() <= self.half_width
    }

    /// Half-width of the box's projection onto a unit `axis`.
    fn projected_radius(&self, axis: Vec2<T>) -> T {
        self.half_length * self.axis_u().dot(axis).abs()
            + self.half_width * self.axis_w().dot(axis).abs()
    }
}

/// Separating-axis overlap test on closed rectangles: touching counts.
pub fn obb_overlap<T: Scalar>(a: &Obb<T>, b: &Obb<T>) -> bool {
    let d = b.center - a.center;
    let reach = a.bounding_radius() + b.bounding_radius();
    if d.x.abs() > reach || d.y.abs() > reach || d.norm() > reach {
        return false;
    }
    let axes = [a.axis_u(), a.axis_w(), b.axis_u(), b.axis_w()];
    axes.iter()
        .all(|&axis| d.dot(axis).abs() <= a.projected_radius(axis) + b.projected_radius(axis))
}

/// Distance along a unit-direction ray to the closed rectangle.
///
/// Returns `Some(0)` when `origin` is inside, `None` when the ray misses.
pub fn ray_obb_hit<T: Scalar>(origin: Vec2<T>, direction: Vec2<T>, obb: &Obb<T>) -> Option<T> {
    let o = obb.to_local(origin);
    let d = direction.rotate(-obb.heading);
    let mut t_enter = T::neg_infinity();
    let mut t_exit = T::infinity();
    for (oi, di, h) in [(o.x, d.x, obb.half_length), (o.y, d.y, obb.half_width)] {
        if di == T::zero() {
            if oi.abs() > h {
                return None;
            }
            continue;
        }
        let t1 = (-h - oi) / di;
        let t2 = (h - oi) / di;
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
    }
    if t_exit < t_enter || t_exit < T::zero() {
        return None;
    }
    Some(t_enter.max(T::zero()))
}
