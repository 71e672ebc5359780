//! Model-based 6D rigid-object pose tracking on SE(3).

pub mod camera;
pub mod geometry;
pub mod image;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tracker;

pub use scalar::Real;

pub type Vec3 = geometry::Vec3<f64>;
pub type Mat3 = geometry::Mat3<f64>;
pub type Twist = geometry::Twist<f64>;
pub type Pose = geometry::Pose<f64>;
pub type UnitQuaternion = geometry::UnitQuaternion<f64>;
