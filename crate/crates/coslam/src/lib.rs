//! Centralized collaborative monocular SLAM on fully synthetic worlds.
//!
//! Multiple agents run a bounded keyframe-based visual-odometry pipeline over
//! generated landmark worlds and talk to a central server over simulated
//! lossy links. The server performs place recognition, loop closure, map
//! fusion, essential-graph optimization and global bundle adjustment, and the
//! evaluation module scores estimated trajectories against ground truth.

pub mod agent;
pub mod eval;
pub mod geometry;
pub mod map;
pub mod netsim;
pub mod optim;
pub mod placerec;
pub mod runner;
pub mod scenario;
pub mod server;
pub mod wire;
pub mod worldsim;

pub use geometry::{CameraIntrinsics, SE3Pose, Sim3Transform, TangentVector7};
pub use map::{KfId, KeyFrame, MapPoint, MpId};
