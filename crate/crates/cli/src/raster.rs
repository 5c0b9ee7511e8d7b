//! `ACRS` raster container.
//!
//! Layout (little endian): magic `ACRS`, version `u16`, dtype tag `u16`
//! (1 = f32), channels `u16`, height `u32`, width `u32`, then
//! `channels·height·width` f32 values, row-major with channels interleaved.

use std::path::Path;

use camtraj_core::geometry::{DepthMap, FlowMap, Grid, Mask};
use camtraj_core::UncertaintyMap;

use crate::error::{CliError, CliResult};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"ACRS";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
const HEADER: usize = 4 + 2 + 2 + 2 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> CliResult<Self> {
        if channels == 0 || channels > u16::MAX as usize || height > u32::MAX as usize || width > u32::MAX as usize {
            return Err(CliError::input(format!("unsupported raster shape {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(CliError::input(format!(
                "{} values for a {channels}-channel {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        if bytes.len() < HEADER {
            return Err(CliError::input(format!("truncated raster header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CliError::input(format!(
                "bad magic {:?}, expected \"ACRS\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(CliError::input(format!("unsupported raster version {version}, expected {VERSION}")));
        }
        let dtype = u16_at(6);
        if dtype != DTYPE_F32 {
            return Err(CliError::input(format!("unsupported dtype tag {dtype}, expected {DTYPE_F32} (f32)")));
        }
        let channels = u16_at(8) as usize;
        let height = u32_at(10) as usize;
        let width = u32_at(14) as usize;
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CliError::input("raster dimensions overflow"))?;
        let payload = &bytes[HEADER..];
        if payload.len() != expected {
            return Err(CliError::input(format!(
                "payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Raster::new(channels, height, width, data)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fsutil::atomic_write(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::from_bytes(&fsutil::read(path)?).map_err(|e| e.at(path))
    }

    fn expect_channels(&self, channels: usize) -> CliResult<()> {
        if self.channels != channels {
            return Err(CliError::input(format!(
                "expected a {channels}-channel raster, found {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    fn scalar_grid(&self) -> CliResult<Grid<f64>> {
        self.expect_channels(1)?;
        Ok(Grid::from_vec(self.width, self.height, self.data.iter().map(|&v| v as f64).collect())?)
    }

    pub fn from_depth(depth: &DepthMap) -> Self {
        scalar(depth.grid())
    }

    pub fn to_depth(&self) -> CliResult<DepthMap> {
        Ok(DepthMap::new(self.scalar_grid()?)?)
    }

    pub fn from_uncertainty(sigma: &UncertaintyMap) -> Self {
        scalar(sigma.grid())
    }

    pub fn to_uncertainty(&self) -> CliResult<UncertaintyMap> {
        Ok(UncertaintyMap::new(self.scalar_grid()?)?)
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            channels: 1,
            height: mask.height,
            width: mask.width,
            data: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_flow(flow: &FlowMap) -> Self {
        let g = flow.grid();
        Self {
            channels: 2,
            height: g.height,
            width: g.width,
            data: g.data.iter().flat_map(|f| [f[0] as f32, f[1] as f32]).collect(),
        }
    }

    pub fn to_flow(&self) -> CliResult<FlowMap> {
        self.expect_channels(2)?;
        let data = self
            .data
            .chunks_exact(2)
            .map(|c| [c[0] as f64, c[1] as f64])
            .collect();
        Ok(FlowMap::new(Grid::from_vec(self.width, self.height, data)?)?)
    }
}

fn scalar(g: &Grid<f64>) -> Raster {
    Raster {
        channels: 1,
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|&v| v as f32).collect(),
    }
}
