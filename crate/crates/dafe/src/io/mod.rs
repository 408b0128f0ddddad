//! On-disk formats: PGM/PPM images, WIDER-style annotations, the synthetic
//! corpus generator, JSON-lines detections, key=value run configuration, and
//! the binary model file.

pub mod annotations;
pub mod config;
pub mod detections;
pub mod model_file;
pub mod pgm;
pub mod synth;
