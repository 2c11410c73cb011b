pub mod camera;
pub mod codec;
pub mod config;
pub mod embedding;
pub mod error;
pub mod field;
pub mod frame;
pub mod gradcheck;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod scene;
pub mod session;
pub mod trainer;
mod wire;

pub use camera::{HeadPose, Intrinsics};
pub use error::{Error, Result};
pub use frame::Frame;
