//! Object-oriented visual SLAM reconstruction engine.
//!
//! The crate couples a latent-code shape decoder ([`sdf`]) with an object
//! reconstruction energy ([`reconstruction`]), a keyframe/map-point factor
//! graph ([`slam_graph`]), monocular scale calibration ([`calibration`]), a
//! synthetic flight and motion-blur simulator ([`blur_sim`]) and the
//! reconstruction-quality metrics ([`metrics`]). [`pipeline`] strings the
//! stages together and owns the file formats.

pub mod artifacts;
pub mod blur_sim;
pub mod calibration;
pub mod geometry;
pub mod sdf;
pub mod slam_graph;
pub mod metrics;
pub mod pipeline;
pub mod reconstruction;
