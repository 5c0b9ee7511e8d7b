//! Shared fixtures for the benchmarks.

use camtraj_core::solver::FrameObservations;
use camtraj_core::synth::{generate_scene, CameraPath, SceneSpec, SyntheticSequence};

/// A static orbit scene of the given size.
pub fn orbit_scene(size: usize, frames: usize, seed: u64) -> SyntheticSequence {
    let path = CameraPath::Arc {
        radius: 5.0,
        angle_per_frame: 1.0f64.to_radians(),
    };
    let spec = SceneSpec::random_static(size, size, 0.9 * size as f64, frames, path, 4, seed);
    generate_scene(&spec).expect("benchmark scene")
}

pub fn observations(seq: &SyntheticSequence) -> Vec<FrameObservations> {
    seq.into()
}
