//! Plain-text trajectory files.
//!
//! One line per frame, `index tx ty tz qx qy qz qw`, holding the
//! camera-to-world placement (camera centre and orientation) as most
//! trajectory tools expect. Comment lines start with `#`; `# focal: f` and
//! `# schedule: f1 f2 ...` carry intrinsics metadata.

use std::fmt::Write as _;
use std::path::Path;

use camtraj_core::PoseSE3;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{CliError, CliResult};
use crate::fsutil;

const QUAT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryFile {
    pub indices: Vec<usize>,
    /// World-to-camera poses, the internal convention.
    pub poses: Vec<PoseSE3>,
    pub focal: Option<f64>,
    pub schedule: Option<Vec<f64>>,
}

fn num(v: f64) -> String {
    let s = format!("{v:.10}");
    // avoid "-0.0000000000" so equal trajectories give equal files
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

impl TrajectoryFile {
    pub fn new(poses: Vec<PoseSE3>, focal: Option<f64>) -> Self {
        Self {
            indices: (0..poses.len()).collect(),
            poses,
            focal,
            schedule: None,
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<f64>) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# camtraj trajectory (camera-to-world)\n");
        if let Some(f) = self.focal {
            let _ = writeln!(out, "# focal: {}", num(f));
        }
        if let Some(s) = &self.schedule {
            let vals: Vec<String> = s.iter().map(|v| num(*v)).collect();
            let _ = writeln!(out, "# schedule: {}", vals.join(" "));
        }
        out.push_str("# index tx ty tz qx qy qz qw\n");
        for (i, p) in self.indices.iter().zip(&self.poses) {
            let c2w = p.inverse();
            let q = c2w.quaternion();
            let mut q = *q.quaternion();
            // q and −q are the same rotation; fix the sign for stable output
            if q.w < 0.0 {
                q = -q;
            }
            let t = c2w.translation;
            let _ = writeln!(
                out,
                "{i} {} {} {} {} {} {} {}",
                num(t.x),
                num(t.y),
                num(t.z),
                num(q.i),
                num(q.j),
                num(q.k),
                num(q.w)
            );
        }
        out
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut out = TrajectoryFile::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.split_once(':') {
                    match key.trim() {
                        "focal" => out.focal = Some(parse_f64(value.trim(), line_no)?),
                        "schedule" => {
                            out.schedule = Some(
                                value
                                    .split_whitespace()
                                    .map(|v| parse_f64(v, line_no))
                                    .collect::<CliResult<_>>()?,
                            )
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(CliError::input(format!(
                    "line {line_no}: expected 8 fields, found {}",
                    fields.len()
                )));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|_| CliError::input(format!("line {line_no}: bad index {:?}", fields[0])))?;
            if let Some(&prev) = out.indices.last() {
                if index <= prev {
                    return Err(CliError::input(format!(
                        "line {line_no}: index {index} does not increase (previous {prev})"
                    )));
                }
            }
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| parse_f64(f, line_no))
                .collect::<CliResult<_>>()?;
            let q = Quaternion::new(v[6], v[3], v[4], v[5]);
            if (q.norm() - 1.0).abs() > QUAT_TOL {
                return Err(CliError::input(format!(
                    "line {line_no}: quaternion norm {} is not 1",
                    q.norm()
                )));
            }
            let rot = UnitQuaternion::from_quaternion(q);
            let c2w = PoseSE3::new(rot.scaled_axis(), Vector3::new(v[0], v[1], v[2]));
            out.indices.push(index);
            out.poses.push(c2w.inverse());
        }
        if out.poses.is_empty() {
            return Err(CliError::input("trajectory has no poses"));
        }
        if let Some(f) = out.focal {
            if !(f > 0.0 && f.is_finite()) {
                return Err(CliError::input(format!("focal {f} must be positive")));
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fsutil::atomic_write(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::parse(&fsutil::read_to_string(path)?).map_err(|e| e.at(path))
    }
}

fn parse_f64(s: &str, line_no: usize) -> CliResult<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| CliError::input(format!("line {line_no}: bad number {s:?}")))?;
    if !v.is_finite() {
        return Err(CliError::input(format!("line {line_no}: non-finite value {s:?}")));
    }
    Ok(v)
}
