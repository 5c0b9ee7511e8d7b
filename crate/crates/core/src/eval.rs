//! Trajectory alignment and error metrics.
//!
//! Trajectories are sequences of world-to-camera poses (as produced by
//! [`chain_relative_poses`](crate::geometry::chain_relative_poses)); metrics
//! work on the camera-to-world inverses, so positions are camera centers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    None,
    /// Rotation and translation.
    Rigid,
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignmentMode::None => "none",
            AlignmentMode::Rigid => "rigid",
            AlignmentMode::Similarity => "similarity",
        })
    }
}

impl FromStr for AlignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rigid" | "se3" => Ok(Self::Rigid),
            "similarity" | "sim3" => Ok(Self::Similarity),
            _ => Err(Error::InvalidConfig(format!(
                "unknown alignment mode {s:?} (expected none, rigid or similarity)"
            ))),
        }
    }
}

/// `x ↦ s·R·x + t` applied to positions in the estimate's world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }

    /// Move a world-to-camera trajectory into the aligned world frame.
    pub fn apply(&self, trajectory: &[PoseSE3]) -> Vec<PoseSE3> {
        trajectory
            .iter()
            .map(|p| {
                let c2w = p.inverse();
                let r = self.rotation * c2w.rotation();
                let c = self.apply_point(&c2w.translation);
                PoseSE3::from_rotation_translation(&r, c).inverse()
            })
            .collect()
    }
}

pub fn positions(trajectory: &[PoseSE3]) -> Vec<Vector3<f64>> {
    trajectory.iter().map(PoseSE3::camera_center).collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptyInput("trajectory"));
    }
    Ok(())
}

/// Closed-form least-squares alignment of `est` camera centers onto `gt`
/// camera centers (Umeyama).
pub fn align_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignmentMode) -> Result<Alignment> {
    check_lengths(est.len(), gt.len())?;
    if mode == AlignmentMode::None {
        return Ok(Alignment::identity());
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateAlignment(format!("need at least 3 positions, got {n}")));
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let s_max = sv.max();
    // a rotation about the line through collinear points is unobservable
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(s_max > 0.0) || sorted[1] <= 1e-12 * s_max {
        return Err(Error::DegenerateAlignment("positions are collinear or coincident".into()));
    }
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // `d` flips the axis of the smallest singular value; nalgebra does not
    // promise an ordering, so place the flip there explicitly
    let min_idx = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
    if d[(2, 2)] < 0.0 && min_idx != 2 {
        d[(2, 2)] = 1.0;
        d[(min_idx, min_idx)] = -1.0;
    }
    let rotation = u * d * vt;
    let scale = if mode == AlignmentMode::Similarity {
        let tr: f64 = (0..3).map(|i| sv[i] * d[(i, i)]).sum();
        tr / var_e
    } else {
        1.0
    };
    let translation = mu_g - scale * rotation * mu_e;
    Ok(Alignment {
        scale,
        rotation,
        translation,
    })
}

/// Align trajectory `est` onto `gt`; returns the moved estimate and the
/// transform.
pub fn align(est: &[PoseSE3], gt: &[PoseSE3], mode: AlignmentMode) -> Result<(Vec<PoseSE3>, Alignment)> {
    let a = align_positions(&positions(est), &positions(gt), mode)?;
    Ok((a.apply(est), a))
}

/// RMSE of camera-center differences.
pub fn ate(est: &[PoseSE3], gt: &[PoseSE3]) -> Result<f64> {
    check_lengths(est.len(), gt.len())?;
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e.camera_center() - g.camera_center()).norm_squared())
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// Relative pose error over frame gap `delta`: RMSE of the translation norm
/// and of the rotation angle (degrees) of
/// `E_i = (G_i⁻¹·G_{i+δ})⁻¹·(Q_i⁻¹·Q_{i+δ})` with `G`, `Q` camera-to-world.
pub fn rpe(est: &[PoseSE3], gt: &[PoseSE3], delta: usize) -> Result<(f64, f64)> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    if delta == 0 || est.len() <= delta {
        return Err(Error::InsufficientLength(format!(
            "rpe needs more than delta={delta} poses, got {}",
            est.len()
        )));
    }
    let n = est.len() - delta;
    let (mut st, mut sr) = (0.0, 0.0);
    for i in 0..n {
        // with world-to-camera poses, Q_i⁻¹·Q_{i+δ} = P_i·P_{i+δ}⁻¹
        let rel_gt = gt[i].compose(&gt[i + delta].inverse());
        let rel_est = est[i].compose(&est[i + delta].inverse());
        let e = rel_gt.inverse().compose(&rel_est);
        st += e.translation.norm_squared();
        sr += e.angle().to_degrees().powi(2);
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Absolute and relative focal error.
pub fn focal_errors(est_f: f64, gt_f: f64) -> Result<(f64, f64)> {
    if !(gt_f > 0.0 && gt_f.is_finite()) {
        return Err(Error::InvalidRange(format!("ground-truth focal must be positive, got {gt_f}")));
    }
    if !(est_f > 0.0 && est_f.is_finite()) {
        return Err(Error::InvalidRange(format!("estimated focal must be positive, got {est_f}")));
    }
    let afe = (est_f - gt_f).abs();
    Ok((afe, afe / gt_f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub afe: f64,
    pub rfe: f64,
    pub alignment: AlignmentMode,
    pub scale: f64,
}

impl MetricsReport {
    /// Plain `key=value` lines.
    pub fn to_key_value(&self) -> String {
        format!(
            "ate={}\nrpe_trans={}\nrpe_rot={}\nafe={}\nrfe={}\nalignment={}\nscale={}\n",
            self.ate, self.rpe_trans, self.rpe_rot, self.afe, self.rfe, self.alignment, self.scale
        )
    }
}

/// All metrics for one sequence. ATE is computed after `mode` alignment; RPE
/// translation uses the aligned estimate so the scale is comparable.
pub fn evaluate(
    est: &[PoseSE3],
    gt: &[PoseSE3],
    est_f: f64,
    gt_f: f64,
    mode: AlignmentMode,
    delta: usize,
) -> Result<MetricsReport> {
    let (aligned, a) = align(est, gt, mode)?;
    let ate = ate(&aligned, gt)?;
    let (rpe_trans, rpe_rot) = rpe(&aligned, gt, delta)?;
    let (afe, rfe) = focal_errors(est_f, gt_f)?;
    Ok(MetricsReport {
        ate,
        rpe_trans,
        rpe_rot,
        afe,
        rfe,
        alignment: mode,
        scale: a.scale,
    })
}
