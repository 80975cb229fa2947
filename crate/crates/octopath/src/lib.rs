//! Desk-scale workbench for octree-based local trajectory prediction:
//! probabilistic octree occupancy mapping from LiDAR-style scans, a
//! deterministic 2D simulator with a self-supervising teacher driver,
//! trajectory-cell classification datasets, a from-scratch recurrent
//! encoder-decoder (classification and regression heads), a hybrid A*
//! baseline, and the benchmarking metrics that compare them.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod geom;
pub mod kinematics;
pub mod model;
pub mod octree;
pub mod pipeline;
pub mod planner;
pub mod world;
