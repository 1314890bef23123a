//! Time-aware kinodynamic planning for a car-like robot.
//!
//! The geometry and vehicle kernels are generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix them to `f64`, which is what the world
//! model, the learning stack and the planners use.

pub mod geom;
pub mod gym;
pub mod plan;
pub mod policy;
pub mod ppo;
pub mod scalar;
pub mod steer;
pub mod vehicle;
pub mod world;

pub use scalar::Scalar;

pub type Vec2 = geom::Vec2<f64>;
pub type Pose2 = geom::Pose2<f64>;
pub type Obb = geom::Obb<f64>;
pub type RobotState = vehicle::RobotState<f64>;
pub type Control = vehicle::Control<f64>;
pub type VehicleParams = vehicle::VehicleParams<f64>;

pub type Vec2F32 = geom::Vec2<f32>;
pub type Pose2F32 = geom::Pose2<f32>;
pub type ObbF32 = geom::Obb<f32>;
pub type RobotStateF32 = vehicle::RobotState<f32>;
pub type ControlF32 = vehicle::Control<f32>;
pub type VehicleParamsF32 = vehicle::VehicleParams<f32>;
