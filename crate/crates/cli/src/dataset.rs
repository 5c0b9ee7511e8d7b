//! Sequence directories: `depth_%06d.acrs` for every frame, `flow_%06d.acrs`
//! and `flow_%06d_bwd.acrs` for every frame pair, and optionally
//! `sigma_%06d.acrs` uncertainty rasters and `mask_%06d.acrs` motion masks.

use std::path::{Path, PathBuf};

use camtraj_core::solver::FrameObservations;
use camtraj_core::UncertaintyMap;

use crate::error::{missing, CliError, CliResult};
use crate::raster::Raster;

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i:06}.acrs"))
}

pub fn flow_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("flow_{i:06}.acrs"))
}

pub fn flow_bwd_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("flow_{i:06}_bwd.acrs"))
}

pub fn sigma_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sigma_{i:06}.acrs"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:06}.acrs"))
}

/// Write every raster of a sequence; returns the file names written.
pub fn write_sequence(dir: &Path, frames: &[FrameObservations]) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let p = depth_path(dir, i);
        Raster::from_depth(&f.depth).write(&p)?;
        names.push(file_name(&p));
        if let Some(flow) = &f.flow_fwd {
            let p = flow_path(dir, i);
            Raster::from_flow(flow).write(&p)?;
            names.push(file_name(&p));
        }
        if let Some(flow) = &f.flow_bwd {
            let p = flow_bwd_path(dir, i);
            Raster::from_flow(flow).write(&p)?;
            names.push(file_name(&p));
        }
    }
    Ok(names)
}

/// Load a sequence; every pair needs forward and backward flow.
pub fn load_sequence(dir: &Path) -> CliResult<Vec<FrameObservations>> {
    if !dir.is_dir() {
        return Err(CliError::input(format!("{}: input directory not found", dir.display())));
    }
    let mut n = 0;
    while depth_path(dir, n).is_file() {
        n += 1;
    }
    if n == 0 {
        return Err(missing(depth_path(dir, 0)));
    }
    if n < 2 {
        return Err(CliError::input(format!(
            "{}: a sequence needs at least 2 frames, found 1",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let depth = Raster::read(&depth_path(dir, i))?;
        let depth = depth.to_depth().map_err(|e| e.at(&depth_path(dir, i)))?;
        let (flow_fwd, flow_bwd) = if i + 1 < n {
            (Some(read_flow(&flow_path(dir, i))?), Some(read_flow(&flow_bwd_path(dir, i))?))
        } else {
            (None, None)
        };
        frames.push(FrameObservations {
            depth,
            flow_fwd,
            flow_bwd,
        });
    }
    camtraj_core::solver::validate_observations(&frames).map_err(|e| CliError::from(e).at(dir))?;
    Ok(frames)
}

fn read_flow(path: &Path) -> CliResult<camtraj_core::geometry::FlowMap> {
    if !path.is_file() {
        return Err(missing(path.to_path_buf()));
    }
    Raster::read(path)?.to_flow().map_err(|e| e.at(path))
}

/// Uncertainty rasters for the `pairs` forward pairs, or `None` when the
/// directory holds none.
pub fn load_sigmas(dir: &Path, pairs: usize) -> CliResult<Option<Vec<UncertaintyMap>>> {
    if !sigma_path(dir, 0).is_file() {
        return Ok(None);
    }
    (0..pairs)
        .map(|i| {
            let p = sigma_path(dir, i);
            if !p.is_file() {
                return Err(missing(p));
            }
            Raster::read(&p)?.to_uncertainty().map_err(|e| e.at(&p))
        })
        .collect::<CliResult<Vec<_>>>()
        .map(Some)
}

pub fn write_sigmas(dir: &Path, sigmas: &[UncertaintyMap]) -> CliResult<Vec<String>> {
    sigmas
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = sigma_path(dir, i);
            Raster::from_uncertainty(s).write(&p)?;
            Ok(file_name(&p))
        })
        .collect()
}

pub fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
