//! Uncertainty-aware flow loss, forward/backward pose consistency, the
//! intrinsics KL term and their weighted combination.
//!
//! Every loss comes in a value form and a gradient form. Pose gradients are
//! computed with forward-mode dual numbers through the same kernels used for
//! the values.

use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::geometry::{
    rotate, unproject_raw, DepthMap, FlowMap, Grid, Mask, Pinhole, PoseSE3,
};
use crate::hypotheses::{losses_to_target_distribution, LikelihoodVector};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const SIGMA_CEIL: f64 = 10.0;

/// Map an unconstrained parameter to a bounded uncertainty.
#[inline]
pub fn sigma_from_raw(raw: f64) -> f64 {
    raw.exp().clamp(SIGMA_FLOOR, SIGMA_CEIL)
}

/// Per-pixel aleatoric uncertainty, bounded to `[SIGMA_FLOOR, SIGMA_CEIL]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap(Grid<f64>);

impl UncertaintyMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(s) = grid.data.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSigma(*s));
        }
        if let Some(s) = grid
            .data
            .iter()
            .find(|s| **s < SIGMA_FLOOR * (1.0 - 1e-12) || **s > SIGMA_CEIL * (1.0 + 1e-12))
        {
            return Err(Error::InvalidRaster(format!(
                "sigma {s} outside [{SIGMA_FLOOR}, {SIGMA_CEIL}]"
            )));
        }
        Ok(Self(grid))
    }

    pub fn constant(width: usize, height: usize, sigma: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, sigma))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }
}

/// Coarse uncertainty lattice bilinearly upsampled to full resolution.
///
/// Node `(i, j)` sits at image coordinate `(i·stride, j·stride)`.
#[derive(Clone, Debug)]
pub struct SigmaUpsampler {
    pub nodes_x: usize,
    pub nodes_y: usize,
    pub width: usize,
    pub height: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl SigmaUpsampler {
    pub fn new(width: usize, height: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let nodes_x = width.div_ceil(stride) + 1;
        let nodes_y = height.div_ceil(stride) + 1;
        let mut taps = Vec::with_capacity(width * height);
        let s = stride as f64;
        for row in 0..height {
            for col in 0..width {
                let gx = (col as f64 + 0.5) / s;
                let gy = (row as f64 + 0.5) / s;
                let x0 = (gx.floor() as usize).min(nodes_x - 2);
                let y0 = (gy.floor() as usize).min(nodes_y - 2);
                let ax = gx - x0 as f64;
                let ay = gy - y0 as f64;
                let i = |x: usize, y: usize| (y * nodes_x + x) as u32;
                taps.push([
                    (i(x0, y0), (1.0 - ax) * (1.0 - ay)),
                    (i(x0 + 1, y0), ax * (1.0 - ay)),
                    (i(x0, y0 + 1), (1.0 - ax) * ay),
                    (i(x0 + 1, y0 + 1), ax * ay),
                ]);
            }
        }
        Self {
            nodes_x,
            nodes_y,
            width,
            height,
            taps,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes_x * self.nodes_y
    }

    /// Full-resolution σ from raw node parameters.
    pub fn upsample(&self, raw_nodes: &[f64]) -> Vec<f64> {
        let node_sigma: Vec<f64> = raw_nodes.iter().map(|&r| sigma_from_raw(r)).collect();
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * node_sigma[i as usize]).sum())
            .collect()
    }

    pub fn upsample_map(&self, raw_nodes: &[f64]) -> UncertaintyMap {
        UncertaintyMap(Grid {
            width: self.width,
            height: self.height,
            data: self.upsample(raw_nodes),
        })
    }

    /// Chain a per-pixel σ gradient back to the raw node parameters.
    pub fn backprop(&self, raw_nodes: &[f64], grad_sigma: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; raw_nodes.len()];
        for (t, gs) in self.taps.iter().zip(grad_sigma) {
            if *gs == 0.0 {
                continue;
            }
            for &(i, w) in t {
                g[i as usize] += w * gs;
            }
        }
        for (gi, &r) in g.iter_mut().zip(raw_nodes) {
            let e = r.exp();
            // clamped region has no gradient
            *gi = if (SIGMA_FLOOR..=SIGMA_CEIL).contains(&e) { *gi * e } else { 0.0 };
        }
        g
    }
}

/// Per-pixel L1 norm of the flow difference; masked pixels are 0.
pub fn flow_residual(induced: &FlowMap, reference: &FlowMap, mask: &Mask) -> Result<Grid<f64>> {
    if !induced.grid().same_shape(reference.grid()) || !induced.grid().same_shape(mask) {
        return Err(Error::DimensionMismatch(format!(
            "induced {}x{}, reference {}x{}, mask {}x{}",
            induced.width(),
            induced.height(),
            reference.width(),
            reference.height(),
            mask.width,
            mask.height
        )));
    }
    let data = induced
        .grid()
        .data
        .iter()
        .zip(&reference.grid().data)
        .zip(&mask.data)
        .map(|((a, b), &m)| if m { (a[0] - b[0]).abs() + (a[1] - b[1]).abs() } else { 0.0 })
        .collect();
    Grid::from_vec(induced.width(), induced.height(), data)
}

/// Negative log of the Laplace density with scale `σ/√2` at residual `ℓ`.
#[inline]
pub fn laplace_nll(residual: f64, sigma: f64) -> f64 {
    (SQRT_2 * sigma).ln() + SQRT_2 * residual / sigma
}

/// Mean over unmasked pixels of the Laplacian negative log-likelihood.
pub fn uncertainty_flow_nll(residual: &Grid<f64>, sigma: &UncertaintyMap, mask: &Mask) -> Result<f64> {
    Ok(uncertainty_flow_nll_with_grad(residual, sigma.grid(), mask)?.0)
}

/// Value plus gradients with respect to every residual and σ entry.
pub fn uncertainty_flow_nll_with_grad(
    residual: &Grid<f64>,
    sigma: &Grid<f64>,
    mask: &Mask,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !residual.same_shape(sigma) || !residual.same_shape(mask) {
        return Err(Error::DimensionMismatch("residual, sigma and mask shapes differ".into()));
    }
    if let Some(s) = sigma.data.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::NonPositiveSigma(*s));
    }
    let n = mask.data.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyInput("no valid pixels"));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_res = vec![0.0; residual.len()];
    let mut d_sig = vec![0.0; residual.len()];
    for i in 0..residual.len() {
        if !mask.data[i] {
            continue;
        }
        let (l, s) = (residual.data[i], sigma.data[i]);
        total += laplace_nll(l, s);
        d_res[i] = SQRT_2 / s * inv_n;
        d_sig[i] = (1.0 / s - SQRT_2 * l / (s * s)) * inv_n;
    }
    Ok((total * inv_n, d_res, d_sig))
}

/// One frame pair's inputs to the sequence flow loss.
pub struct PairTerm<'a> {
    pub residual: &'a Grid<f64>,
    pub sigma: &'a UncertaintyMap,
    pub mask: &'a Mask,
}

/// Sum of per-pair losses over neighbouring frames.
pub fn sequence_flow_nll(pairs: &[PairTerm<'_>]) -> Result<f64> {
    pairs
        .iter()
        .map(|p| uncertainty_flow_nll(p.residual, p.sigma, p.mask))
        .sum()
}

/// Precomputed back-projection of every pixel of one frame for one focal.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pub cam: Pinhole,
    /// `(u, v, X, Y, Z)` per pixel.
    points: Vec<[f64; 5]>,
}

impl PairGeometry {
    pub fn new(cam: Pinhole, depth: &DepthMap) -> Result<Self> {
        if depth.width() != cam.width || depth.height() != cam.height {
            return Err(Error::DimensionMismatch("depth does not match camera".into()));
        }
        let (cx, cy) = (cam.cx(), cam.cy());
        let mut points = Vec::with_capacity(cam.pixel_count());
        for row in 0..cam.height {
            for col in 0..cam.width {
                let c = Pinhole::pixel_center(col, row);
                let x = unproject_raw(cam.focal, cx, cy, c.x, c.y, depth.get(col, row));
                points.push([c.x, c.y, x[0], x[1], x[2]]);
            }
        }
        Ok(Self { cam, points })
    }
}

/// Flow loss of one frame pair with gradients.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub grad_pose: [f64; 6],
    /// d loss / d σ per pixel.
    pub grad_sigma: Vec<f64>,
    pub valid: usize,
}

/// Flow loss of one pair as a function of the six pose parameters and the
/// full-resolution σ raster.
pub fn pair_flow_loss(
    geom: &PairGeometry,
    pose: &[f64; 6],
    sigma: &[f64],
    reference: &FlowMap,
) -> Result<PairLoss> {
    let n_px = geom.points.len();
    if sigma.len() != n_px || reference.grid().len() != n_px {
        return Err(Error::DimensionMismatch("sigma or flow does not match the pair".into()));
    }
    let (rot, d_rot) = rotation_with_jacobian(&[pose[0], pose[1], pose[2]]);
    let t = [pose[3], pose[4], pose[5]];
    let (f, cx, cy) = (geom.cam.focal, geom.cam.cx(), geom.cam.cy());
    let mut value = 0.0;
    let mut grad_pose = [0.0; 6];
    let mut grad_sigma = vec![0.0; n_px];
    let mut valid = 0usize;
    let reference = &reference.grid().data;
    for i in 0..n_px {
        let [u, v, x, y, z] = geom.points[i];
        let p = [x, y, z];
        let q = [
            rot[0][0] * x + rot[0][1] * y + rot[0][2] * z + t[0],
            rot[1][0] * x + rot[1][1] * y + rot[1][2] * z + t[1],
            rot[2][0] * x + rot[2][1] * y + rot[2][2] * z + t[2],
        ];
        if q[2] <= 0.0 {
            continue;
        }
        let s = sigma[i];
        if !(s > 0.0) {
            return Err(Error::NonPositiveSigma(s));
        }
        let iz = 1.0 / q[2];
        let du = f * q[0] * iz + cx - u - reference[i][0];
        let dv = f * q[1] * iz + cy - v - reference[i][1];
        let l = du.abs() + dv.abs();
        valid += 1;
        value += laplace_nll(l, s);
        // d l / d q through the projection, weighted by the L1 signs
        let (su, sv) = (sign(du), sign(dv));
        let k = SQRT_2 / s * f * iz;
        let gq = [k * su, k * sv, -k * iz * (su * q[0] + sv * q[1])];
        for j in 0..3 {
            let dq = &d_rot[j];
            let mut acc = 0.0;
            for r in 0..3 {
                acc += gq[r] * (dq[r][0] * p[0] + dq[r][1] * p[1] + dq[r][2] * p[2]);
            }
            grad_pose[j] += acc;
            grad_pose[3 + j] += gq[j];
        }
        grad_sigma[i] = 1.0 / s - SQRT_2 * l / (s * s);
    }
    if valid == 0 {
        return Err(Error::EmptyInput("no valid pixels"));
    }
    let inv = 1.0 / valid as f64;
    value *= inv;
    for g in &mut grad_pose {
        *g *= inv;
    }
    for g in &mut grad_sigma {
        *g *= inv;
    }
    Ok(PairLoss {
        value,
        grad_pose,
        grad_sigma,
        valid,
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rotation matrix of `w` and its partial derivatives `∂R/∂w_j`.
pub fn rotation_with_jacobian(w: &[f64; 3]) -> ([[f64; 3]; 3], [[[f64; 3]; 3]; 3]) {
    let wd: [Dual<3>; 3] = std::array::from_fn(|i| Dual::variable(w[i], i));
    let mut r = [[0.0; 3]; 3];
    let mut dr = [[[0.0; 3]; 3]; 3];
    for c in 0..3 {
        let mut e = [Dual::constant(0.0); 3];
        e[c] = Dual::constant(1.0);
        let col = rotate(&wd, &e);
        for row in 0..3 {
            r[row][c] = col[row].re;
            for j in 0..3 {
                dr[j][row][c] = col[row].eps[j];
            }
        }
    }
    (r, dr)
}

/// Reference implementation of the pair loss built from the raster-level
/// operations; slower, used to cross-check [`pair_flow_loss`].
pub fn pair_flow_loss_value(
    pose: &PoseSE3,
    depth: &DepthMap,
    cam: &Pinhole,
    sigma: &UncertaintyMap,
    reference: &FlowMap,
) -> Result<f64> {
    let (induced, mask) = crate::geometry::induced_flow(pose, depth, cam)?;
    let residual = flow_residual(&induced, reference, &mask)?;
    uncertainty_flow_nll(&residual, sigma, &mask)
}

/// `‖M(a)·M(b) − I₄‖₁,₁` on generic scalars.
fn product_deviation<T: Real>(wa: &[T; 3], ta: &[T; 3], wb: &[T; 3], tb: &[T; 3]) -> T {
    let mut acc = T::cst(0.0);
    for c in 0..3 {
        let mut e = [T::cst(0.0); 3];
        e[c] = T::cst(1.0);
        let col = rotate(wa, &rotate(wb, &e));
        for (r, v) in col.iter().enumerate() {
            acc += if r == c { (*v - 1.0).abs() } else { v.abs() };
        }
    }
    let t = rotate(wa, tb);
    acc + (t[0] + ta[0]).abs() + (t[1] + ta[1]).abs() + (t[2] + ta[2]).abs()
}

/// Entrywise deviation from identity of `M(a)·M(b)`; zero exactly when `b`
/// undoes `a`.
pub fn pose_deviation(a: &PoseSE3, b: &PoseSE3) -> f64 {
    let (pa, pb) = (a.params(), b.params());
    product_deviation(
        &[pa[0], pa[1], pa[2]],
        &[pa[3], pa[4], pa[5]],
        &[pb[0], pb[1], pb[2]],
        &[pb[3], pb[4], pb[5]],
    )
}

/// Value and gradient (12 entries: `a` then `b` parameters) of
/// [`pose_deviation`].
pub fn pose_deviation_with_grad(a: &[f64; 6], b: &[f64; 6]) -> (f64, [f64; 12]) {
    let v: [Dual<12>; 12] = std::array::from_fn(|i| {
        Dual::variable(if i < 6 { a[i] } else { b[i - 6] }, i)
    });
    let d = product_deviation(
        &[v[0], v[1], v[2]],
        &[v[3], v[4], v[5]],
        &[v[6], v[7], v[8]],
        &[v[9], v[10], v[11]],
    );
    (d.re, d.eps)
}

/// Sum over pairs of `‖M(P_fwd)·M(P_bwd) − I₄‖₁,₁`, where `bwd[i]` is the
/// pose `P^{i+1→i}` predicted on the reversed sequence. A consistent pair
/// satisfies `P^{i+1→i} = (P^{i→i+1})^{-1}` and costs nothing.
pub fn fwd_bwd_consistency_loss(fwd: &[PoseSE3], bwd: &[PoseSE3]) -> Result<f64> {
    if fwd.len() != bwd.len() {
        return Err(Error::LengthMismatch {
            left: fwd.len(),
            right: bwd.len(),
        });
    }
    Ok(fwd.iter().zip(bwd).map(|(f, b)| pose_deviation(f, b)).sum())
}

/// Gradient of the consistency loss with respect to every pose parameter.
pub fn fwd_bwd_consistency_grad(
    fwd: &[PoseSE3],
    bwd: &[PoseSE3],
) -> Result<(f64, Vec<[f64; 6]>, Vec<[f64; 6]>)> {
    if fwd.len() != bwd.len() {
        return Err(Error::LengthMismatch {
            left: fwd.len(),
            right: bwd.len(),
        });
    }
    let mut total = 0.0;
    let mut gf = Vec::with_capacity(fwd.len());
    let mut gb = Vec::with_capacity(fwd.len());
    for (f, b) in fwd.iter().zip(bwd) {
        let (v, g) = pose_deviation_with_grad(&f.params(), &b.params());
        total += v;
        gf.push(std::array::from_fn(|i| g[i]));
        gb.push(std::array::from_fn(|i| g[6 + i]));
    }
    Ok((total, gf, gb))
}

/// `D_KL(target ‖ predicted)`. The target is a constant: callers derive it
/// from detached flow losses, so no gradient ever reaches the candidates.
pub fn intrinsics_kl_loss(predicted: &LikelihoodVector, target: &LikelihoodVector) -> Result<f64> {
    let (p, t) = (predicted.as_slice(), target.as_slice());
    if p.len() != t.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: t.len(),
        });
    }
    let mut kl = 0.0;
    for (k, (&pk, &tk)) in p.iter().zip(t).enumerate() {
        if tk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(Error::ZeroPredictedMass(k));
        }
        kl += tk * (tk / pk).ln();
    }
    Ok(kl)
}

/// Gradient of [`intrinsics_kl_loss`] with respect to the logits that
/// produced `predicted` through a softmax: `predicted − target`.
pub fn intrinsics_kl_grad_logits(predicted: &LikelihoodVector, target: &LikelihoodVector) -> Vec<f64> {
    predicted
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| p - t)
        .collect()
}

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_flow: f64,
    pub lambda_consistency: f64,
    pub lambda_intr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_flow: 1.0,
            lambda_consistency: 1.0,
            lambda_intr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_flow", self.lambda_flow),
            ("lambda_consistency", self.lambda_consistency),
            ("lambda_intr", self.lambda_intr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// All loss terms of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub flow: Vec<f64>,
    pub consistency: Vec<f64>,
    pub intrinsics_kl: f64,
    pub total: f64,
}

impl LossReport {
    /// Assemble the report; the KL target is built from the flow losses
    /// as constants.
    pub fn from_parts(
        flow: Vec<f64>,
        consistency: Vec<f64>,
        predicted: &LikelihoodVector,
        temperature: f64,
        weights: &LossWeights,
    ) -> Result<Self> {
        let target = losses_to_target_distribution(&flow, temperature)?;
        let intrinsics_kl = intrinsics_kl_loss(predicted, &target)?;
        let total = total_loss(&flow, &consistency, intrinsics_kl, weights)?;
        Ok(Self {
            flow,
            consistency,
            intrinsics_kl,
            total,
        })
    }
}

/// `Σ_k (λ_F·L^F_k + λ_c·L^c_k) + λ_I·L^I`.
pub fn total_loss(flow: &[f64], consistency: &[f64], intrinsics_kl: f64, w: &LossWeights) -> Result<f64> {
    if flow.len() != consistency.len() {
        return Err(Error::LengthMismatch {
            left: flow.len(),
            right: consistency.len(),
        });
    }
    let parts = flow.iter().chain(consistency).chain(std::iter::once(&intrinsics_kl));
    if parts.clone().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss("loss part".into()));
    }
    let per_candidate: f64 = flow
        .iter()
        .zip(consistency)
        .map(|(f, c)| w.lambda_flow * f + w.lambda_consistency * c)
        .sum();
    Ok(per_candidate + w.lambda_intr * intrinsics_kl)
}

/// Partial derivatives of the total objective with respect to its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalGradients {
    pub d_flow: Vec<f64>,
    pub d_consistency: Vec<f64>,
    pub d_pred_logits: Vec<f64>,
}

/// Backward pass of the combined objective. Because the KL target is
/// detached, `d_flow` is exactly `λ_F` for every candidate.
pub fn total_loss_gradients(
    flow: &[f64],
    predicted: &LikelihoodVector,
    temperature: f64,
    w: &LossWeights,
) -> Result<TotalGradients> {
    let target = losses_to_target_distribution(flow, temperature)?;
    let d_pred_logits = intrinsics_kl_grad_logits(predicted, &target)
        .into_iter()
        .map(|g| g * w.lambda_intr)
        .collect();
    Ok(TotalGradients {
        d_flow: vec![w.lambda_flow; flow.len()],
        d_consistency: vec![w.lambda_consistency; flow.len()],
        d_pred_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::induced_flow;
    use crate::optim::gradient_check;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn all_valid(w: usize, h: usize) -> Mask {
        Grid::filled(w, h, true)
    }

    #[test]
    fn residual_examples() {
        let a = FlowMap::new(Grid::from_fn(3, 2, |c, r| [c as f64, r as f64])).unwrap();
        let z = flow_residual(&a, &a, &all_valid(3, 2)).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));

        let mut g = a.grid().clone();
        g.set(1, 1, [g.get(1, 1)[0] + 3.0, g.get(1, 1)[1] + 4.0]);
        let b = FlowMap::new(g).unwrap();
        let r = flow_residual(&b, &a, &all_valid(3, 2)).unwrap();
        assert_eq!(r.get(1, 1), 7.0);
        assert_eq!(r, flow_residual(&a, &b, &all_valid(3, 2)).unwrap());

        let mut m = all_valid(3, 2);
        m.set(1, 1, false);
        assert_eq!(flow_residual(&b, &a, &m).unwrap().get(1, 1), 0.0);

        let c = FlowMap::zeros(2, 2);
        assert!(matches!(flow_residual(&a, &c, &all_valid(3, 2)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn nll_closed_forms() {
        let m = all_valid(4, 4);
        let s = UncertaintyMap::constant(4, 4, 1.0).unwrap();
        let zero = Grid::filled(4, 4, 0.0);
        let v = uncertainty_flow_nll(&zero, &s, &m).unwrap();
        assert!((v - SQRT_2.ln()).abs() < 1e-12);
        assert!((v - 0.346574).abs() < 1e-6);
        let one = Grid::filled(4, 4, 1.0);
        let v = uncertainty_flow_nll(&one, &s, &m).unwrap();
        assert!((v - (SQRT_2.ln() + SQRT_2)).abs() < 1e-12);
        assert!((v - 1.760787).abs() < 1e-6);
    }

    #[test]
    fn nll_minimizer_by_grid_search() {
        for &l in &[0.05, 0.3, 1.0, 2.5] {
            let mut best = (f64::INFINITY, 0.0);
            let mut s = 0.01;
            while s < 8.0 {
                let v = laplace_nll(l, s);
                if v < best.0 {
                    best = (v, s);
                }
                s += 1e-4;
            }
            assert!((best.1 - SQRT_2 * l).abs() < 2e-4, "l={l}: {}", best.1);
        }
    }

    #[test]
    fn nll_uses_mean_over_valid_pixels() {
        let mut m = all_valid(2, 1);
        m.set(1, 0, false);
        let r = Grid::from_vec(2, 1, vec![1.0, 100.0]).unwrap();
        let s = UncertaintyMap::constant(2, 1, 1.0).unwrap();
        let v = uncertainty_flow_nll(&r, &s, &m).unwrap();
        assert!((v - laplace_nll(1.0, 1.0)).abs() < 1e-15);
        let none = Grid::filled(2, 1, false);
        assert!(uncertainty_flow_nll(&r, &s, &none).is_err());
    }

    #[test]
    fn nll_rejects_nonpositive_sigma() {
        let r = Grid::filled(2, 2, 0.0);
        let s = Grid::filled(2, 2, 0.0);
        assert!(matches!(
            uncertainty_flow_nll_with_grad(&r, &s, &all_valid(2, 2)),
            Err(Error::NonPositiveSigma(_))
        ));
        assert!(UncertaintyMap::constant(2, 2, -1.0).is_err());
        assert!(UncertaintyMap::constant(2, 2, 20.0).is_err());
    }

    #[test]
    fn sequence_wrapper_is_sum_of_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<_> = (0..5)
            .map(|_| {
                let r = Grid::from_fn(6, 5, |_, _| rng.gen_range(0.0..3.0));
                let s = UncertaintyMap::new(Grid::from_fn(6, 5, |_, _| rng.gen_range(0.01..5.0))).unwrap();
                (r, s, all_valid(6, 5))
            })
            .collect();
        let terms: Vec<_> = maps
            .iter()
            .map(|(r, s, m)| PairTerm {
                residual: r,
                sigma: s,
                mask: m,
            })
            .collect();
        let sum = sequence_flow_nll(&terms).unwrap();
        let manual: f64 = maps.iter().map(|(r, s, m)| uncertainty_flow_nll(r, s, m).unwrap()).sum();
        assert!((sum - manual).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fwd: Vec<_> = (0..4)
            .map(|_| {
                PoseSE3::new(
                    Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let bwd: Vec<_> = fwd.iter().map(|p| p.inverse()).collect();
        assert!(fwd_bwd_consistency_loss(&fwd, &bwd).unwrap() < 1e-12);
        assert!(fwd_bwd_consistency_loss(&fwd, &fwd).unwrap() > 0.0);

        let t = PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let v = fwd_bwd_consistency_loss(&[t], &[PoseSE3::identity()]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(fwd_bwd_consistency_loss(&[t], &[]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = LikelihoodVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(intrinsics_kl_loss(&p, &p).unwrap().abs() < 1e-15);
        let t = LikelihoodVector::new(vec![1.0, 0.0]).unwrap();
        let half = LikelihoodVector::uniform(2);
        assert!((intrinsics_kl_loss(&half, &t).unwrap() - LN_2).abs() < 1e-12);
        let zero = LikelihoodVector::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(intrinsics_kl_loss(&zero, &t), Err(Error::ZeroPredictedMass(0))));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&[0.0, 0.0], &[0.0, 0.0], 0.0, &w).unwrap(), 0.0);
        assert_eq!(total_loss(&[1.0, 2.0], &[0.0, 0.0], 0.5, &w).unwrap(), 3.5);
        let w2 = LossWeights {
            lambda_intr: 2.0,
            ..w
        };
        let a = total_loss(&[1.0, 2.0], &[0.3, 0.1], 0.5, &w).unwrap();
        let b = total_loss(&[1.0, 2.0], &[0.3, 0.1], 0.5, &w2).unwrap();
        assert!((b - a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_reproduces_total() {
        let w = LossWeights {
            lambda_flow: 0.7,
            lambda_consistency: 1.3,
            lambda_intr: 2.0,
        };
        let pred = LikelihoodVector::new(vec![0.25, 0.5, 0.25]).unwrap();
        let r = LossReport::from_parts(vec![0.1, 0.2, 0.05], vec![0.01, 0.0, 0.3], &pred, 100.0, &w).unwrap();
        let manual = 0.7 * (0.1 + 0.2 + 0.05) + 1.3 * (0.01 + 0.0 + 0.3) + 2.0 * r.intrinsics_kl;
        assert!((r.total - manual).abs() < 1e-9);
    }

    #[test]
    fn kl_target_is_detached_from_candidates() {
        let w = LossWeights::default();
        let pred = LikelihoodVector::new(vec![0.1, 0.6, 0.3]).unwrap();
        let g = total_loss_gradients(&[0.3, 0.1, 0.2], &pred, 100.0, &w).unwrap();
        assert_eq!(g.d_flow, vec![1.0; 3]);
        assert_eq!(g.d_consistency, vec![1.0; 3]);
    }

    #[test]
    fn kl_logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let losses: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..0.05)).collect();
            let target = losses_to_target_distribution(&losses, 100.0).unwrap();
            let f = |z: &[f64]| intrinsics_kl_loss(&LikelihoodVector::softmax(z), &target).unwrap();
            let g = intrinsics_kl_grad_logits(&LikelihoodVector::softmax(&logits), &target);
            let report = gradient_check(&logits, &g, f);
            assert!(report.max_relative_deviation < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = all_valid(3, 3);
        for _ in 0..100 {
            let r: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..2.0)).collect();
            let s: Vec<f64> = (0..9).map(|_| rng.gen_range(0.05..3.0)).collect();
            let mut x = r.clone();
            x.extend(&s);
            let eval = |x: &[f64]| {
                let r = Grid::from_vec(3, 3, x[..9].to_vec()).unwrap();
                let s = Grid::from_vec(3, 3, x[9..].to_vec()).unwrap();
                uncertainty_flow_nll_with_grad(&r, &s, &m).unwrap().0
            };
            let (_, dr, ds) = uncertainty_flow_nll_with_grad(
                &Grid::from_vec(3, 3, r).unwrap(),
                &Grid::from_vec(3, 3, s).unwrap(),
                &m,
            )
            .unwrap();
            let mut g = dr;
            g.extend(ds);
            let report = gradient_check(&x, &g, eval);
            assert!(report.max_relative_deviation < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let a: [f64; 6] = std::array::from_fn(|i| x[i]);
            let b: [f64; 6] = std::array::from_fn(|i| x[6 + i]);
            let (_, g) = pose_deviation_with_grad(&a, &b);
            let eval = |x: &[f64]| pose_deviation(&PoseSE3::from_params(&x[..6]), &PoseSE3::from_params(&x[6..]));
            let report = gradient_check(&x, &g, eval);
            assert!(report.max_relative_deviation < 1e-4, "{report:?}");
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng) -> (Pinhole, DepthMap, FlowMap, PoseSE3) {
        let cam = Pinhole::new(20.0, 12, 10).unwrap();
        let depth = DepthMap::new(Grid::from_fn(12, 10, |_, _| rng.gen_range(1.5..4.0))).unwrap();
        let truth = PoseSE3::new(
            Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
            Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
        );
        let (flow, _) = induced_flow(&truth, &depth, &cam).unwrap();
        (cam, depth, flow, truth)
    }

    #[test]
    fn pair_loss_matches_raster_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (cam, depth, flow, _) = random_scene(&mut rng);
        let geom = PairGeometry::new(cam, &depth).unwrap();
        for _ in 0..10 {
            let pose = PoseSE3::from_params(&(0..6).map(|_| rng.gen_range(-0.1..0.1)).collect::<Vec<_>>());
            let sigma = UncertaintyMap::new(Grid::from_fn(12, 10, |_, _| rng.gen_range(0.01..2.0))).unwrap();
            let a = pair_flow_loss(&geom, &pose.params(), &sigma.grid().data, &flow).unwrap();
            let b = pair_flow_loss_value(&pose, &depth, &cam, &sigma, &flow).unwrap();
            assert!((a.value - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cam, depth, flow, _) = random_scene(&mut rng);
        let geom = PairGeometry::new(cam, &depth).unwrap();
        let up = SigmaUpsampler::new(12, 10, 4);
        let mut checked = 0;
        while checked < 100 {
            let pose: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.1..0.1)).collect();
            // Central differences are meaningless across the |·| kink; skip
            // points where some residual component is within reach of zero.
            let pp = PoseSE3::from_params(&pose);
            let (induced, _) = induced_flow(&pp, &depth, &cam).unwrap();
            let near_kink = induced.grid().data.iter().zip(&flow.grid().data).any(|(a, b)| {
                (a[0] - b[0]).abs() < 1e-2 || (a[1] - b[1]).abs() < 1e-2
            });
            if near_kink {
                continue;
            }
            checked += 1;
            let raw: Vec<f64> = (0..up.node_count()).map(|_| rng.gen_range(-3.0..1.0)).collect();
            let mut x = pose.clone();
            x.extend(&raw);
            let eval = |x: &[f64]| {
                let p: [f64; 6] = std::array::from_fn(|i| x[i]);
                pair_flow_loss(&geom, &p, &up.upsample(&x[6..]), &flow).unwrap().value
            };
            let p: [f64; 6] = std::array::from_fn(|i| pose[i]);
            let l = pair_flow_loss(&geom, &p, &up.upsample(&raw), &flow).unwrap();
            let mut g = l.grad_pose.to_vec();
            g.extend(up.backprop(&raw, &l.grad_sigma));
            let report = gradient_check(&x, &g, eval);
            assert!(report.max_relative_deviation < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn static_scene_loss_is_minimal_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (cam, depth, flow, truth) = random_scene(&mut rng);
        let geom = PairGeometry::new(cam, &depth).unwrap();
        let sigma = vec![0.5; cam.pixel_count()];
        let at_truth = pair_flow_loss(&geom, &truth.params(), &sigma, &flow).unwrap().value;
        for _ in 0..1000 {
            let mut p = truth.params();
            for v in &mut p {
                *v += rng.gen_range(-0.02..0.02);
            }
            let l = pair_flow_loss(&geom, &p, &sigma, &flow).unwrap().value;
            assert!(at_truth <= l);
        }
    }

    #[test]
    fn upsampler_reproduces_constant_fields() {
        let up = SigmaUpsampler::new(13, 7, 4);
        let raw = vec![0.3f64; up.node_count()];
        for s in up.upsample(&raw) {
            assert!((s - 0.3f64.exp()).abs() < 1e-12);
        }
        let raw = vec![-20.0; up.node_count()];
        assert!(up.upsample(&raw).iter().all(|&s| (s - SIGMA_FLOOR).abs() < 1e-15));
    }
}
