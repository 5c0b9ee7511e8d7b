//! Network-free estimation: for every focal candidate, optimize relative
//! poses and coarse uncertainty grids directly against the flow and
//! consistency losses, then rank the candidates by their flow loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, FlowMap, PoseSE3};
use crate::hypotheses::{argmin, losses_to_target_distribution, FocalSchedule, LikelihoodVector, DEFAULT_TEMPERATURE};
use crate::losses::{
    pair_flow_loss, pose_deviation_with_grad, LossWeights, PairGeometry, SigmaUpsampler,
    UncertaintyMap, SIGMA_CEIL, SIGMA_FLOOR,
};
use crate::optim::Adam;
use crate::Pinhole;

pub use crate::optim::{gradient_check, GradientReport};

/// Observations of one frame. `flow_fwd`/`flow_bwd` hold `F^{i→i+1}` and
/// `F^{i+1→i}` and are absent on the last frame.
#[derive(Clone, Debug)]
pub struct FrameObservations {
    pub depth: DepthMap,
    pub flow_fwd: Option<FlowMap>,
    pub flow_bwd: Option<FlowMap>,
}

impl FrameObservations {
    pub fn dims(&self) -> (usize, usize) {
        (self.depth.width(), self.depth.height())
    }
}

/// Build per-frame observations from aligned depth and flow lists.
pub fn observations_from_parts(
    depths: Vec<DepthMap>,
    flow_fwd: Vec<FlowMap>,
    flow_bwd: Vec<FlowMap>,
) -> Result<Vec<FrameObservations>> {
    let n = depths.len();
    if flow_fwd.len() + 1 != n.max(1) || flow_bwd.len() != flow_fwd.len() {
        return Err(Error::InvalidConfig(format!(
            "{n} depth maps need {} forward and backward flows, got {} and {}",
            n.saturating_sub(1),
            flow_fwd.len(),
            flow_bwd.len()
        )));
    }
    let mut fwd = flow_fwd.into_iter();
    let mut bwd = flow_bwd.into_iter();
    Ok(depths
        .into_iter()
        .map(|depth| FrameObservations {
            depth,
            flow_fwd: fwd.next(),
            flow_bwd: bwd.next(),
        })
        .collect())
}

impl From<&crate::synth::SyntheticSequence> for Vec<FrameObservations> {
    fn from(seq: &crate::synth::SyntheticSequence) -> Self {
        observations_from_parts(seq.depths.clone(), seq.flow_fwd.clone(), seq.flow_bwd.clone())
            .expect("synthetic sequences are consistent")
    }
}

/// Check frame count and dimensions; returns `(width, height)`.
pub fn validate_observations(obs: &[FrameObservations]) -> Result<(usize, usize)> {
    if obs.len() < 2 {
        return Err(Error::SingleFrame(obs.len()));
    }
    let dims = obs[0].dims();
    for (i, o) in obs.iter().enumerate() {
        if o.dims() != dims {
            return Err(Error::DimensionMismatch(format!("frame {i} depth is {:?}, expected {dims:?}", o.dims())));
        }
        let last = i + 1 == obs.len();
        for (name, f) in [("forward", &o.flow_fwd), ("backward", &o.flow_bwd)] {
            match (f, last) {
                (Some(f), false) => {
                    if (f.width(), f.height()) != dims {
                        return Err(Error::DimensionMismatch(format!("frame {i} {name} flow size")));
                    }
                }
                (None, false) => {
                    return Err(Error::InvalidConfig(format!("frame {i} is missing its {name} flow")));
                }
                _ => {}
            }
        }
    }
    Ok(dims)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Initial Adam step for pose parameters.
    pub step_size: f64,
    /// Initial Adam step for the log-uncertainty grid.
    pub sigma_step_size: f64,
    /// Both steps decay geometrically to this fraction by the last iteration.
    pub final_step_fraction: f64,
    pub max_iterations: usize,
    /// Spacing of the uncertainty grid nodes in pixels.
    pub sigma_resolution: usize,
    /// Stop when the objective changed by less than this (relative) over the
    /// last 20 iterations; 0 disables early stopping.
    pub convergence_tol: f64,
    pub seed: u64,
    pub temperature: f64,
    pub weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            sigma_step_size: 0.05,
            final_step_fraction: 0.01,
            max_iterations: 300,
            sigma_resolution: 8,
            convergence_tol: 0.0,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("sigma_step_size", self.sigma_step_size),
            ("final_step_fraction", self.final_step_fraction),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 || self.sigma_resolution == 0 {
            return Err(Error::InvalidConfig("max_iterations and sigma_resolution must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be nonnegative".into()));
        }
        self.weights.validate()
    }

    fn step_scale(&self, iter: usize) -> f64 {
        let t = iter as f64 / self.max_iterations.max(1) as f64;
        self.final_step_fraction.powf(t)
    }
}

/// Fitted state of one focal candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateEstimate {
    pub focal: f64,
    /// `P^{i→i+1}`.
    pub poses: Vec<PoseSE3>,
    /// `P^{i+1→i}` fitted on the reversed sequence.
    pub backward_poses: Vec<PoseSE3>,
    /// `σ^i` on frame `i` for the forward pairs.
    pub sigmas: Vec<UncertaintyMap>,
    /// Sum over forward pairs of the uncertainty-aware flow loss.
    pub flow_loss: f64,
    pub backward_flow_loss: f64,
    pub consistency_loss: f64,
    /// Objective value at every iteration.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub candidates: Vec<CandidateEstimate>,
    pub likelihood: LikelihoodVector,
    pub best: usize,
}

impl FitResult {
    pub fn best_candidate(&self) -> &CandidateEstimate {
        &self.candidates[self.best]
    }

    pub fn flow_losses(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.flow_loss).collect()
    }
}

/// Objective of a single focal candidate over a flat parameter vector.
///
/// Layout: forward poses (6 per pair), backward poses (6 per pair), forward
/// σ grids, backward σ grids (raw log values, one grid per pair).
pub struct CandidateProblem<'a> {
    pub focal: f64,
    pairs: usize,
    fwd_geom: Vec<PairGeometry>,
    bwd_geom: Vec<PairGeometry>,
    fwd_flow: Vec<&'a FlowMap>,
    bwd_flow: Vec<&'a FlowMap>,
    pub upsampler: SigmaUpsampler,
    weights: LossWeights,
}

/// Objective value split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveParts {
    pub flow: f64,
    pub backward_flow: f64,
    pub consistency: f64,
    pub total: f64,
}

impl<'a> CandidateProblem<'a> {
    pub fn new(obs: &'a [FrameObservations], focal: f64, config: &FitConfig) -> Result<Self> {
        let (w, h) = validate_observations(obs)?;
        let cam = Pinhole::new(focal, w, h)?;
        let pairs = obs.len() - 1;
        let mut fwd_geom = Vec::with_capacity(pairs);
        let mut bwd_geom = Vec::with_capacity(pairs);
        let mut fwd_flow = Vec::with_capacity(pairs);
        let mut bwd_flow = Vec::with_capacity(pairs);
        for i in 0..pairs {
            fwd_geom.push(PairGeometry::new(cam, &obs[i].depth)?);
            bwd_geom.push(PairGeometry::new(cam, &obs[i + 1].depth)?);
            fwd_flow.push(obs[i].flow_fwd.as_ref().expect("validated"));
            bwd_flow.push(obs[i].flow_bwd.as_ref().expect("validated"));
        }
        Ok(Self {
            focal,
            pairs,
            fwd_geom,
            bwd_geom,
            fwd_flow,
            bwd_flow,
            upsampler: SigmaUpsampler::new(w, h, config.sigma_resolution),
            weights: config.weights,
        })
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn pose_len(&self) -> usize {
        12 * self.pairs
    }

    pub fn len(&self) -> usize {
        self.pose_len() + 2 * self.pairs * self.upsampler.node_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Identity poses and σ = 1 everywhere.
    pub fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.len()]
    }

    fn pose(params: &[f64], k: usize) -> [f64; 6] {
        std::array::from_fn(|i| params[6 * k + i])
    }

    fn sigma_slice<'p>(&self, params: &'p [f64], backward: bool, pair: usize) -> &'p [f64] {
        let g = self.upsampler.node_count();
        let base = self.pose_len() + if backward { self.pairs * g } else { 0 } + pair * g;
        &params[base..base + g]
    }

    /// Objective and its gradient.
    pub fn evaluate(&self, params: &[f64]) -> Result<(ObjectiveParts, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let mut parts = ObjectiveParts::default();
        let g = self.upsampler.node_count();
        let w = &self.weights;
        for i in 0..self.pairs {
            for backward in [false, true] {
                let pose_k = if backward { self.pairs + i } else { i };
                let pose = Self::pose(params, pose_k);
                let raw = self.sigma_slice(params, backward, i);
                let sigma = self.upsampler.upsample(raw);
                let (geom, flow) = if backward {
                    (&self.bwd_geom[i], self.bwd_flow[i])
                } else {
                    (&self.fwd_geom[i], self.fwd_flow[i])
                };
                let l = pair_flow_loss(geom, &pose, &sigma, flow)?;
                if backward {
                    parts.backward_flow += l.value;
                } else {
                    parts.flow += l.value;
                }
                for j in 0..6 {
                    grad[6 * pose_k + j] += w.lambda_flow * l.grad_pose[j];
                }
                let gs = self.upsampler.backprop(raw, &l.grad_sigma);
                let base = self.pose_len() + if backward { self.pairs * g } else { 0 } + i * g;
                for (k, v) in gs.into_iter().enumerate() {
                    grad[base + k] += w.lambda_flow * v;
                }
            }
            let (c, gc) = pose_deviation_with_grad(&Self::pose(params, i), &Self::pose(params, self.pairs + i));
            parts.consistency += c;
            for j in 0..6 {
                grad[6 * i + j] += w.lambda_consistency * gc[j];
                grad[6 * (self.pairs + i) + j] += w.lambda_consistency * gc[6 + j];
            }
        }
        parts.total = w.lambda_flow * (parts.flow + parts.backward_flow) + w.lambda_consistency * parts.consistency;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "focal {}: flow {} backward {} consistency {}",
                self.focal, parts.flow, parts.backward_flow, parts.consistency
            )));
        }
        Ok((parts, grad))
    }

    /// Run the optimizer from the initial parameters.
    pub fn solve(&self, config: &FitConfig) -> Result<CandidateEstimate> {
        let mut params = self.initial_params();
        let mut adam = Adam::new(params.len());
        let mut history = Vec::with_capacity(config.max_iterations);
        let pose_len = self.pose_len();
        let (raw_lo, raw_hi) = (SIGMA_FLOOR.ln(), SIGMA_CEIL.ln());
        let mut lr = vec![0.0; params.len()];
        for it in 0..config.max_iterations {
            let (parts, grad) = self.evaluate(&params)?;
            history.push(parts.total);
            if config.convergence_tol > 0.0 && it >= 20 {
                let prev = history[it - 20];
                if (prev - parts.total).abs() <= config.convergence_tol * parts.total.abs().max(1e-12) {
                    break;
                }
            }
            let scale = config.step_scale(it);
            for (k, l) in lr.iter_mut().enumerate() {
                *l = scale * if k < pose_len { config.step_size } else { config.sigma_step_size };
            }
            adam_step_per_param(&mut adam, &mut params, &grad, &lr);
            for r in &mut params[pose_len..] {
                *r = r.clamp(raw_lo, raw_hi);
            }
        }
        let (parts, _) = self.evaluate(&params)?;
        Ok(CandidateEstimate {
            focal: self.focal,
            poses: (0..self.pairs).map(|i| PoseSE3::from_params(&params[6 * i..6 * i + 6])).collect(),
            backward_poses: (0..self.pairs)
                .map(|i| PoseSE3::from_params(&params[6 * (self.pairs + i)..6 * (self.pairs + i) + 6]))
                .collect(),
            sigmas: (0..self.pairs)
                .map(|i| self.upsampler.upsample_map(self.sigma_slice(&params, false, i)))
                .collect(),
            flow_loss: parts.flow,
            backward_flow_loss: parts.backward_flow,
            consistency_loss: parts.consistency,
            loss_history: history,
        })
    }
}

/// Adam step with a per-parameter learning rate; implemented by scaling the
/// update of a unit-rate step.
fn adam_step_per_param(adam: &mut Adam, params: &mut [f64], grad: &[f64], lr: &[f64]) {
    let before = params.to_vec();
    adam.step(params, grad, 1.0);
    for ((p, b), l) in params.iter_mut().zip(before).zip(lr) {
        *p = b + (*p - b) * l;
    }
}

/// Fit a single focal candidate.
pub fn fit_candidate(obs: &[FrameObservations], focal: f64, config: &FitConfig) -> Result<CandidateEstimate> {
    config.validate()?;
    CandidateProblem::new(obs, focal, config)?.solve(config)
}

/// Fit every candidate of the schedule and rank them by flow loss.
pub fn fit_sequence(obs: &[FrameObservations], schedule: &FocalSchedule, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    validate_observations(obs)?;
    let candidates: Vec<CandidateEstimate> = schedule
        .candidates
        .par_iter()
        .map(|&f| fit_candidate(obs, f, config))
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = candidates.iter().map(|c| c.flow_loss).collect();
    let likelihood = losses_to_target_distribution(&losses, config.temperature)?;
    Ok(FitResult {
        best: argmin(&losses),
        candidates,
        likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, CameraPath, SceneSpec};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_sequence(frames: usize) -> Vec<FrameObservations> {
        let path = CameraPath::RotationDominant {
            angular_velocity: Vector3::new(0.01, 0.015, 0.0),
            velocity: Vector3::new(0.04, -0.01, 0.02),
        };
        let seq = generate_scene(&SceneSpec::random_static(16, 12, 14.0, frames, path, 3, 1)).unwrap();
        (&seq).into()
    }

    #[test]
    fn single_frame_is_rejected() {
        let obs = tiny_sequence(2);
        let one = vec![FrameObservations {
            depth: obs[0].depth.clone(),
            flow_fwd: None,
            flow_bwd: None,
        }];
        let schedule = FocalSchedule::new(2, 5.0, 20.0).unwrap();
        assert!(matches!(fit_sequence(&one, &schedule, &FitConfig::default()), Err(Error::SingleFrame(1))));
    }

    #[test]
    fn missing_flow_is_rejected() {
        let mut obs = tiny_sequence(3);
        obs[1].flow_bwd = None;
        assert!(validate_observations(&obs).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let obs = tiny_sequence(3);
        let config = FitConfig {
            sigma_resolution: 6,
            ..FitConfig::default()
        };
        let problem = CandidateProblem::new(&obs, 14.0, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 20 {
            let mut x = problem.initial_params();
            for (k, v) in x.iter_mut().enumerate() {
                *v = if k < problem.pose_len() { rng.gen_range(-0.05..0.05) } else { rng.gen_range(-3.0..0.5) };
            }
            let (_, g) = problem.evaluate(&x).unwrap();
            let report = gradient_check(&x, &g, |p| problem.evaluate(p).unwrap().0.total);
            // L1 kinks occasionally fall inside the difference stencil; those
            // points say nothing about the analytic gradient.
            if report.max_relative_deviation > 1e-4 {
                let i = report.worst_index;
                let kinked = [-1e-5, 1e-5].iter().any(|h| {
                    let mut a = x.clone();
                    a[i] += h;
                    let ga = problem.evaluate(&a).unwrap().1[i];
                    (ga - g[i]).abs() > 1e-3 * g[i].abs().max(1e-6)
                });
                assert!(kinked, "{report:?}");
                continue;
            }
            checked += 1;
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let obs = tiny_sequence(3);
        let config = FitConfig {
            max_iterations: 30,
            ..FitConfig::default()
        };
        let a = fit_candidate(&obs, 14.0, &config).unwrap();
        let b = fit_candidate(&obs, 14.0, &config).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.poses, b.poses);
    }

    #[test]
    fn output_shapes() {
        let obs = tiny_sequence(4);
        let schedule = FocalSchedule::new(3, 5.0, 40.0).unwrap();
        let config = FitConfig {
            max_iterations: 10,
            ..FitConfig::default()
        };
        let r = fit_sequence(&obs, &schedule, &config).unwrap();
        assert_eq!(r.candidates.len(), 3);
        for c in &r.candidates {
            assert_eq!(c.poses.len(), 3);
            assert_eq!(c.sigmas.len(), 3);
            assert!(c.flow_loss.is_finite());
        }
        let s: f64 = r.likelihood.as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(r.best, argmin(&r.flow_losses()));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let obs = tiny_sequence(2);
        let bad = FitConfig {
            step_size: 0.0,
            ..FitConfig::default()
        };
        assert!(fit_candidate(&obs, 14.0, &bad).is_err());
    }
}
