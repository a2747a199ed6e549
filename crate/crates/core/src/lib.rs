//! Synthetic depth-aware rover: stereo rendering, semi-global matching,
//! simulated monocular depth, obstacle detection, hybrid perception
//! scheduling and a differential-drive rover with a halt-on-obstacle gate.

pub mod detect;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod monodepth;
pub mod noise;
pub mod pipeline;
pub mod raster;
pub mod rover;
pub mod scene;
pub mod sim;
pub mod stereo;
