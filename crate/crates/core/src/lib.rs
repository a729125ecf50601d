pub mod geometry;
pub mod ba;
pub mod bundle;
pub mod loop_detection;
pub mod pose_graph;
pub mod sim;
pub mod eval;
pub mod pipeline;
pub mod io;
