//! Toy-scale sequence model: a patch-pooled encoder over flow and depth, self
//! attention across frame pairs, one pose token per pair plus a sequence
//! token, `m` candidate heads (pose and uncertainty) and a sequence head that
//! scores the candidates.
//!
//! Gradients are computed with the small reverse-mode [`tape`]; the loss
//! terms themselves come from [`crate::losses`] and are seeded into the tape.

pub mod tape;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, FlowMap, Pinhole, PoseSE3};
use crate::hypotheses::{losses_to_target_distribution, select_best_candidate, FocalSchedule, LikelihoodVector, DEFAULT_TEMPERATURE};
use crate::losses::{
    fwd_bwd_consistency_loss, intrinsics_kl_grad_logits, intrinsics_kl_loss, pair_flow_loss, pose_deviation_with_grad,
    LossWeights, PairGeometry, SigmaUpsampler,
};
use crate::optim::Adam;
use crate::solver::{validate_observations, CandidateEstimate, FitResult, FrameObservations};
use tape::{Tape, Tensor, Var};

/// Channels pooled per patch: flow u, flow v, inverse depth, and flow scaled
/// by depth.
const CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    /// Side of the square pooling patches, pixels.
    pub patch_stride: usize,
    pub m: usize,
    pub p_drop: f64,
    pub weight_decay_pose_tokens: f64,
    pub head_hidden: usize,
    pub sigma_resolution: usize,
    /// Longest supported sequence, in frame pairs.
    pub max_pairs: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            attention_layers: 2,
            attention_heads: 2,
            patch_stride: 4,
            m: 8,
            p_drop: 0.1,
            weight_decay_pose_tokens: 0.01,
            head_hidden: 32,
            sigma_resolution: 8,
            max_pairs: 16,
            width: 16,
            height: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.feature_dim == 0
            || self.attention_heads == 0
            || self.patch_stride == 0
            || self.head_hidden == 0
            || self.sigma_resolution == 0
            || self.max_pairs == 0
            || self.width == 0
            || self.height == 0
        {
            return bad("model dimensions must be positive".into());
        }
        if self.m < 2 {
            return bad(format!("need at least 2 candidates, got {}", self.m));
        }
        if self.feature_dim % self.attention_heads != 0 {
            return bad(format!(
                "feature_dim {} is not divisible by {} heads",
                self.feature_dim, self.attention_heads
            ));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(self.weight_decay_pose_tokens >= 0.0) {
            return bad("weight_decay_pose_tokens must be non-negative".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> (usize, usize) {
        (self.width.div_ceil(self.patch_stride), self.height.div_ceil(self.patch_stride))
    }

    pub fn input_dim(&self) -> usize {
        let (px, py) = self.patches();
        CHANNELS * px * py
    }

    pub fn sigma_nodes(&self) -> usize {
        SigmaUpsampler::new(self.width, self.height, self.sigma_resolution).node_count()
    }

    pub fn schedule(&self) -> Result<FocalSchedule> {
        FocalSchedule::for_height(self.m, self.height)
    }
}

/// Location of one parameter tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    Xavier,
    Small,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let (d, hh) = (cfg.feature_dim, cfg.head_hidden);
    let mut t = vec![
        ("enc.w1".to_string(), cfg.input_dim(), d, Init::Xavier),
        ("enc.b1".to_string(), 1, d, Init::Zero),
        ("enc.w2".to_string(), d, d, Init::Xavier),
        ("enc.b2".to_string(), 1, d, Init::Zero),
        ("enc.pos".to_string(), cfg.max_pairs, d, Init::Small),
        ("seq.token".to_string(), 1, d, Init::Small),
    ];
    for l in 0..cfg.attention_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            t.push((format!("attn{l}.{w}"), d, d, Init::Xavier));
        }
        t.push((format!("attn{l}.m1"), d, d, Init::Xavier));
        t.push((format!("attn{l}.mb1"), 1, d, Init::Zero));
        t.push((format!("attn{l}.m2"), d, d, Init::Xavier));
        t.push((format!("attn{l}.mb2"), 1, d, Init::Zero));
    }
    let nodes = cfg.sigma_nodes();
    for k in 0..cfg.m {
        t.push((format!("head{k}.p1"), d, hh, Init::Xavier));
        t.push((format!("head{k}.pb1"), 1, hh, Init::Zero));
        t.push((format!("head{k}.p2"), hh, 6, Init::Zero));
        t.push((format!("head{k}.pb2"), 1, 6, Init::Zero));
        t.push((format!("head{k}.s1"), d, hh, Init::Xavier));
        t.push((format!("head{k}.sb1"), 1, hh, Init::Zero));
        t.push((format!("head{k}.s2"), hh, nodes, Init::Zero));
        t.push((format!("head{k}.sb2"), 1, nodes, Init::Zero));
    }
    t.push(("seqhead.w1".to_string(), d, hh, Init::Xavier));
    t.push(("seqhead.b1".to_string(), 1, hh, Init::Zero));
    t.push(("seqhead.w2".to_string(), hh, cfg.m, Init::Zero));
    t.push(("seqhead.b2".to_string(), 1, cfg.m, Init::Zero));
    t
}

/// Parameters plus the directory describing them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub tensors: Vec<TensorInfo>,
    index: HashMap<String, usize>,
}

/// Per-pair input features of one direction of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs {
    pub features: Vec<Vec<f64>>,
}

/// Everything the loss needs about one training sequence.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub frames: Vec<FrameObservations>,
    pub fwd: PairInputs,
    pub bwd: PairInputs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Forward flow loss per candidate (the KL target is built from these).
    pub flow: Vec<f64>,
    pub backward_flow: Vec<f64>,
    pub consistency: Vec<f64>,
    pub intrinsics_kl: f64,
    pub pose_token_penalty: f64,
    pub total: f64,
}

/// Dropout masks for the pose tokens of the two directions.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub fwd: Vec<f64>,
    pub bwd: Vec<f64>,
}

struct Forward {
    tape: Tape,
    /// Pose tokens before dropout, `pairs × d`.
    pose_tokens: Var,
    seq_token: Var,
    poses: Vec<Var>,
    sigma_raw: Vec<Var>,
    logits: Var,
}

/// Pool flow and depth over square patches into one feature vector.
pub fn pair_features(flow: &FlowMap, depth: &DepthMap, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if (flow.width(), flow.height()) != (cfg.width, cfg.height) || (depth.width(), depth.height()) != (cfg.width, cfg.height) {
        return Err(Error::DimensionMismatch(format!(
            "model expects {}x{} rasters, got flow {}x{} and depth {}x{}",
            cfg.width,
            cfg.height,
            flow.width(),
            flow.height(),
            depth.width(),
            depth.height()
        )));
    }
    let (px, py) = cfg.patches();
    let s = cfg.patch_stride;
    // flow of a tenth of the width maps to one
    let a = 10.0 / cfg.width as f64;
    let mut out = vec![0.0; CHANNELS * px * py];
    for j in 0..py {
        for i in 0..px {
            let mut acc = [0.0; CHANNELS];
            let mut count = 0.0;
            for row in j * s..((j + 1) * s).min(cfg.height) {
                for col in i * s..((i + 1) * s).min(cfg.width) {
                    let [u, v] = flow.get(col, row);
                    let d = depth.get(col, row);
                    acc[0] += u * a;
                    acc[1] += v * a;
                    acc[2] += 1.0 / d;
                    acc[3] += u * a * d;
                    acc[4] += v * a * d;
                    count += 1.0;
                }
            }
            let base = CHANNELS * (j * px + i);
            for c in 0..CHANNELS {
                out[base + c] = acc[c] / count;
            }
        }
    }
    Ok(out)
}

/// Zero each pose-token element independently with probability `p_drop`.
/// The sequence token is left alone.
pub fn apply_pose_token_dropout(tokens: &TokenState, p_drop: f64, seed: u64) -> TokenState {
    let mask = dropout_mask(tokens.pose_tokens.len() * tokens.dim(), p_drop, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = tokens.clone();
    let d = tokens.dim();
    for (i, t) in out.pose_tokens.iter_mut().enumerate() {
        for (k, v) in t.iter_mut().enumerate() {
            *v *= mask[i * d + k];
        }
    }
    out
}

fn dropout_mask(n: usize, p_drop: f64, rng: &mut impl Rng) -> Vec<f64> {
    if p_drop <= 0.0 {
        return vec![1.0; n];
    }
    (0..n).map(|_| if rng.gen::<f64>() < p_drop { 0.0 } else { 1.0 }).collect()
}

/// Pose tokens and sequence token after the attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub pose_tokens: Vec<Vec<f64>>,
    pub sequence_token: Vec<f64>,
}

impl TokenState {
    pub fn dim(&self) -> usize {
        self.sequence_token.len()
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (_, rows, cols, init) in layout(&config) {
            match init {
                Init::Zero => params.extend(std::iter::repeat(0.0).take(rows * cols)),
                Init::Xavier => {
                    let lim = (6.0 / (rows + cols) as f64).sqrt();
                    let u = Uniform::new_inclusive(-lim, lim);
                    params.extend((0..rows * cols).map(|_| u.sample(&mut rng)));
                }
                Init::Small => {
                    let u = Uniform::new_inclusive(-0.02, 0.02);
                    params.extend((0..rows * cols).map(|_| u.sample(&mut rng)));
                }
            }
        }
        Self::from_parts(config, params)
    }

    /// Rebuild a model from its configuration and flat parameters, e.g. when
    /// loading a checkpoint.
    pub fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, rows, cols, _) in layout(&config) {
            tensors.push(TensorInfo { name, rows, cols, offset });
            offset += rows * cols;
        }
        if params.len() != offset {
            return Err(Error::DimensionMismatch(format!(
                "configuration needs {offset} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("non-finite model parameter".into()));
        }
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Ok(Self {
            config,
            params,
            tensors,
            index,
        })
    }

    pub fn tensor(&self, name: &str) -> &TensorInfo {
        &self.tensors[self.index[name]]
    }

    /// Offsets `[start, end)` of every tensor whose name starts with `prefix`.
    pub fn ranges_with_prefix(&self, prefix: &str) -> Vec<(usize, usize)> {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix))
            .map(|t| (t.offset, t.offset + t.len()))
            .collect()
    }

    fn p(&self, tape: &mut Tape, params: &[f64], name: &str) -> Var {
        let t = self.tensor(name);
        tape.param(params, t.offset, t.rows, t.cols)
    }

    /// `tanh(x·w1 + b1)·w2 + b2`
    fn mlp(&self, tape: &mut Tape, params: &[f64], x: Var, names: [&str; 4]) -> Var {
        let w1 = self.p(tape, params, names[0]);
        let b1 = self.p(tape, params, names[1]);
        let w2 = self.p(tape, params, names[2]);
        let b2 = self.p(tape, params, names[3]);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    fn build(&self, params: &[f64], inputs: &PairInputs, mask: Option<&[f64]>) -> Forward {
        let cfg = &self.config;
        let (n, d) = (inputs.features.len(), cfg.feature_dim);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(n, cfg.input_dim(), inputs.features.concat()));
        let h = self.mlp(&mut tape, params, x, ["enc.w1", "enc.b1", "enc.w2", "enc.b2"]);
        let pos = self.p(&mut tape, params, "enc.pos");
        let pos = tape.slice_rows(pos, 0, n);
        let h = tape.add(h, pos);
        let seq = self.p(&mut tape, params, "seq.token");
        let mut xs = tape.concat_rows(&[h, seq]);
        let heads = cfg.attention_heads;
        let dh = d / heads;
        for l in 0..cfg.attention_layers {
            let wq = self.p(&mut tape, params, &format!("attn{l}.wq"));
            let wk = self.p(&mut tape, params, &format!("attn{l}.wk"));
            let wv = self.p(&mut tape, params, &format!("attn{l}.wv"));
            let wo = self.p(&mut tape, params, &format!("attn{l}.wo"));
            let q = tape.matmul(xs, wq);
            let k = tape.matmul(xs, wk);
            let v = tape.matmul(xs, wv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let a = tape.softmax_rows(s);
                outs.push(tape.matmul(a, vh));
            }
            let o = tape.concat_cols(&outs);
            let o = tape.matmul(o, wo);
            xs = tape.add(xs, o);
            let names = [
                format!("attn{l}.m1"),
                format!("attn{l}.mb1"),
                format!("attn{l}.m2"),
                format!("attn{l}.mb2"),
            ];
            let f = self.mlp(&mut tape, params, xs, [&names[0], &names[1], &names[2], &names[3]]);
            xs = tape.add(xs, f);
        }
        let pose_tokens = tape.slice_rows(xs, 0, n);
        let seq_token = tape.slice_rows(xs, n, 1);
        let dropped = match mask {
            Some(m) => tape.mul_const(pose_tokens, m.to_vec()),
            None => pose_tokens,
        };
        let mut poses = Vec::with_capacity(cfg.m);
        let mut sigma_raw = Vec::with_capacity(cfg.m);
        for k in 0..cfg.m {
            let pn = [
                format!("head{k}.p1"),
                format!("head{k}.pb1"),
                format!("head{k}.p2"),
                format!("head{k}.pb2"),
            ];
            poses.push(self.mlp(&mut tape, params, dropped, [&pn[0], &pn[1], &pn[2], &pn[3]]));
            // the uncertainty pathway never sees dropout
            let sn = [
                format!("head{k}.s1"),
                format!("head{k}.sb1"),
                format!("head{k}.s2"),
                format!("head{k}.sb2"),
            ];
            sigma_raw.push(self.mlp(&mut tape, params, pose_tokens, [&sn[0], &sn[1], &sn[2], &sn[3]]));
        }
        // likelihood gradients stop at the sequence head
        let detached = tape.detach(seq_token);
        let logits = self.mlp(&mut tape, params, detached, ["seqhead.w1", "seqhead.b1", "seqhead.w2", "seqhead.b2"]);
        Forward {
            tape,
            pose_tokens,
            seq_token,
            poses,
            sigma_raw,
            logits,
        }
    }

    /// Encoder features for both directions of a sequence with forward and
    /// backward flow.
    pub fn prepare(&self, frames: &[FrameObservations]) -> Result<PreparedSequence> {
        let n = frames.len();
        if n < 2 {
            return Err(Error::SingleFrame(n));
        }
        if n - 1 > self.config.max_pairs {
            return Err(Error::DimensionMismatch(format!(
                "sequence has {} pairs, model supports {}",
                n - 1,
                self.config.max_pairs
            )));
        }
        let mut fwd = Vec::with_capacity(n - 1);
        let mut bwd = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let f = frames[i].flow_fwd.as_ref().ok_or(Error::EmptyInput("forward flow"))?;
            fwd.push(pair_features(f, &frames[i].depth, &self.config)?);
        }
        // reversed sequence: pair k goes from frame n−1−k to n−2−k
        for k in 0..n - 1 {
            let i = n - 2 - k;
            if let Some(b) = frames[i].flow_bwd.as_ref() {
                bwd.push(pair_features(b, &frames[i + 1].depth, &self.config)?);
            }
        }
        if !bwd.is_empty() && bwd.len() != n - 1 {
            return Err(Error::EmptyInput("backward flow for some pairs"));
        }
        Ok(PreparedSequence {
            frames: frames.to_vec(),
            fwd: PairInputs { features: fwd },
            bwd: PairInputs { features: bwd },
        })
    }

    /// Pose and sequence tokens for the forward direction (evaluation mode).
    pub fn tokens(&self, frames: &[FrameObservations]) -> Result<TokenState> {
        let prep = self.prepare(frames)?;
        let f = self.build(&self.params, &prep.fwd, None);
        let pt = f.tape.value(f.pose_tokens);
        Ok(TokenState {
            pose_tokens: (0..pt.rows).map(|r| pt.row(r).to_vec()).collect(),
            sequence_token: f.tape.value(f.seq_token).data.clone(),
        })
    }

    /// Evaluation-mode prediction: candidate bank, likelihoods and the
    /// selected candidate. Flow losses are reported per candidate.
    pub fn forward(&self, frames: &[FrameObservations]) -> Result<FitResult> {
        let (w, h) = validate_observations(frames)?;
        if (w, h) != (self.config.width, self.config.height) {
            return Err(Error::DimensionMismatch(format!(
                "model expects {}x{} rasters, got {w}x{h}",
                self.config.width, self.config.height
            )));
        }
        let prep = self.prepare(frames)?;
        let schedule = self.config.schedule()?;
        let up = SigmaUpsampler::new(w, h, self.config.sigma_resolution);
        let fwd = self.build(&self.params, &prep.fwd, None);
        let bwd = (!prep.bwd.features.is_empty()).then(|| self.build(&self.params, &prep.bwd, None));
        let logits = fwd.tape.value(fwd.logits).data.clone();
        let likelihood = LikelihoodVector::softmax(&logits);
        let pairs = frames.len() - 1;
        let mut candidates = Vec::with_capacity(self.config.m);
        for k in 0..self.config.m {
            let focal = schedule.candidates[k];
            let cam = Pinhole::new(focal, w, h)?;
            let poses = rows_to_poses(fwd.tape.value(fwd.poses[k]));
            let raw = fwd.tape.value(fwd.sigma_raw[k]);
            let sigmas: Vec<_> = (0..pairs).map(|i| up.upsample_map(raw.row(i))).collect();
            let mut flow_loss = 0.0;
            for i in 0..pairs {
                let geom = PairGeometry::new(cam, &frames[i].depth)?;
                let flow = frames[i].flow_fwd.as_ref().expect("validated");
                let s = up.upsample(raw.row(i));
                flow_loss += pair_flow_loss(&geom, &poses[i].params(), &s, flow)?.value;
            }
            let (backward_poses, backward_flow_loss, consistency_loss) = match &bwd {
                Some(b) => {
                    let rev = rows_to_poses(b.tape.value(b.poses[k]));
                    // reorder so entry i is P^{i+1→i}
                    let bp: Vec<PoseSE3> = (0..pairs).map(|i| rev[pairs - 1 - i]).collect();
                    let braw = b.tape.value(b.sigma_raw[k]);
                    let mut bl = 0.0;
                    for i in 0..pairs {
                        let geom = PairGeometry::new(cam, &frames[i + 1].depth)?;
                        let flow = frames[i].flow_bwd.as_ref().expect("validated");
                        let s = up.upsample(braw.row(pairs - 1 - i));
                        bl += pair_flow_loss(&geom, &bp[i].params(), &s, flow)?.value;
                    }
                    let c = fwd_bwd_consistency_loss(&poses, &bp)?;
                    (bp, bl, c)
                }
                None => (Vec::new(), 0.0, 0.0),
            };
            candidates.push(CandidateEstimate {
                focal,
                poses,
                backward_poses,
                sigmas,
                flow_loss,
                backward_flow_loss,
                consistency_loss,
                loss_history: Vec::new(),
            });
        }
        let best = select_best_candidate(&likelihood);
        Ok(FitResult {
            candidates,
            likelihood,
            best,
        })
    }

    /// Training objective of one prepared sequence and its gradient with
    /// respect to every parameter. `masks` are the pose-token dropout masks
    /// (`None` in evaluation mode).
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        prep: &PreparedSequence,
        masks: Option<&DropoutMasks>,
        weights: &LossWeights,
        temperature: f64,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        self.loss_and_grad_with_target(params, prep, masks, weights, temperature, None)
    }

    /// As [`Model::loss_and_grad`] but with an externally fixed likelihood
    /// target instead of the one derived from the current flow losses.
    pub fn loss_and_grad_with_target(
        &self,
        params: &[f64],
        prep: &PreparedSequence,
        masks: Option<&DropoutMasks>,
        weights: &LossWeights,
        temperature: f64,
        target: Option<&LikelihoodVector>,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let cfg = &self.config;
        if prep.bwd.features.is_empty() {
            return Err(Error::EmptyInput("backward flow"));
        }
        let frames = &prep.frames;
        let pairs = frames.len() - 1;
        let (w, h) = (cfg.width, cfg.height);
        let schedule = cfg.schedule()?;
        let up = SigmaUpsampler::new(w, h, cfg.sigma_resolution);
        let fwd = self.build(params, &prep.fwd, masks.map(|m| m.fwd.as_slice()));
        let bwd = self.build(params, &prep.bwd, masks.map(|m| m.bwd.as_slice()));
        let mut seeds_f: Vec<(Var, Vec<f64>)> = Vec::new();
        let mut seeds_b: Vec<(Var, Vec<f64>)> = Vec::new();
        let mut out = LossBreakdown::default();
        for k in 0..cfg.m {
            let cam = Pinhole::new(schedule.candidates[k], w, h)?;
            let fp = fwd.tape.value(fwd.poses[k]).clone();
            let bp = bwd.tape.value(bwd.poses[k]).clone();
            let fr = fwd.tape.value(fwd.sigma_raw[k]).clone();
            let br = bwd.tape.value(bwd.sigma_raw[k]).clone();
            let mut g_fp = vec![0.0; fp.data.len()];
            let mut g_bp = vec![0.0; bp.data.len()];
            let mut g_fr = vec![0.0; fr.data.len()];
            let mut g_br = vec![0.0; br.data.len()];
            let (mut lf, mut lb, mut lc) = (0.0, 0.0, 0.0);
            for i in 0..pairs {
                let pose: [f64; 6] = std::array::from_fn(|c| fp.at(i, c));
                let s = up.upsample(fr.row(i));
                let geom = PairGeometry::new(cam, &frames[i].depth)?;
                let r = pair_flow_loss(&geom, &pose, &s, frames[i].flow_fwd.as_ref().expect("prepared"))
                    .map_err(|e| Error::NonFiniteLoss(format!("forward pair {i}, candidate {k}: {e}")))?;
                lf += r.value;
                for c in 0..6 {
                    g_fp[i * 6 + c] += weights.lambda_flow * r.grad_pose[c];
                }
                let gs: Vec<f64> = r.grad_sigma.iter().map(|g| g * weights.lambda_flow).collect();
                let gn = up.backprop(fr.row(i), &gs);
                for (j, g) in gn.iter().enumerate() {
                    g_fr[i * fr.cols + j] += g;
                }

                // reversed row for P^{i+1→i}
                let ri = pairs - 1 - i;
                let bpose: [f64; 6] = std::array::from_fn(|c| bp.at(ri, c));
                let s = up.upsample(br.row(ri));
                let geom = PairGeometry::new(cam, &frames[i + 1].depth)?;
                let r = pair_flow_loss(&geom, &bpose, &s, frames[i].flow_bwd.as_ref().expect("prepared"))
                    .map_err(|e| Error::NonFiniteLoss(format!("backward pair {i}, candidate {k}: {e}")))?;
                lb += r.value;
                for c in 0..6 {
                    g_bp[ri * 6 + c] += weights.lambda_flow * r.grad_pose[c];
                }
                let gs: Vec<f64> = r.grad_sigma.iter().map(|g| g * weights.lambda_flow).collect();
                let gn = up.backprop(br.row(ri), &gs);
                for (j, g) in gn.iter().enumerate() {
                    g_br[ri * br.cols + j] += g;
                }

                let (v, g) = pose_deviation_with_grad(&pose, &bpose);
                lc += v;
                for c in 0..6 {
                    g_fp[i * 6 + c] += weights.lambda_consistency * g[c];
                    g_bp[ri * 6 + c] += weights.lambda_consistency * g[6 + c];
                }
            }
            out.flow.push(lf);
            out.backward_flow.push(lb);
            out.consistency.push(lc);
            seeds_f.push((fwd.poses[k], g_fp));
            seeds_f.push((fwd.sigma_raw[k], g_fr));
            seeds_b.push((bwd.poses[k], g_bp));
            seeds_b.push((bwd.sigma_raw[k], g_br));
        }
        let predicted = LikelihoodVector::softmax(&fwd.tape.value(fwd.logits).data);
        let target = match target {
            Some(t) => t.clone(),
            None => losses_to_target_distribution(&out.flow, temperature)?,
        };
        out.intrinsics_kl = intrinsics_kl_loss(&predicted, &target)?;
        let g_logits: Vec<f64> = intrinsics_kl_grad_logits(&predicted, &target)
            .into_iter()
            .map(|g| g * weights.lambda_intr)
            .collect();
        seeds_f.push((fwd.logits, g_logits));
        let wd = cfg.weight_decay_pose_tokens;
        for (f, seeds) in [(&fwd, &mut seeds_f), (&bwd, &mut seeds_b)] {
            let t = f.tape.value(f.pose_tokens);
            out.pose_token_penalty += 0.5 * wd * t.data.iter().map(|v| v * v).sum::<f64>();
            seeds.push((f.pose_tokens, t.data.iter().map(|v| wd * v).collect()));
        }
        out.total = (0..cfg.m)
            .map(|k| weights.lambda_flow * (out.flow[k] + out.backward_flow[k]) + weights.lambda_consistency * out.consistency[k])
            .sum::<f64>()
            + weights.lambda_intr * out.intrinsics_kl
            + out.pose_token_penalty;
        if !out.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!("training loss {}", out.total)));
        }
        let mut grad = vec![0.0; params.len()];
        fwd.tape.backward(&seeds_f, &mut grad);
        bwd.tape.backward(&seeds_b, &mut grad);
        Ok((out, grad))
    }

    /// Sample dropout masks for a prepared sequence.
    pub fn sample_masks(&self, prep: &PreparedSequence, rng: &mut impl Rng) -> DropoutMasks {
        let d = self.config.feature_dim;
        DropoutMasks {
            fwd: dropout_mask(prep.fwd.features.len() * d, self.config.p_drop, rng),
            bwd: dropout_mask(prep.bwd.features.len() * d, self.config.p_drop, rng),
        }
    }

    /// A copy whose candidate head `k` is this model's head `perm[k]`.
    pub fn permute_heads(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.config.m {
            return Err(Error::DimensionMismatch(format!(
                "permutation of {} heads for a model with {}",
                perm.len(),
                self.config.m
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidConfig(format!("{perm:?} is not a permutation")));
            }
        }
        let mut out = self.clone();
        for (k, &src) in perm.iter().enumerate() {
            for part in ["p1", "pb1", "p2", "pb2", "s1", "sb1", "s2", "sb2"] {
                let to = self.tensor(&format!("head{k}.{part}"));
                let from = self.tensor(&format!("head{src}.{part}"));
                out.params[to.offset..to.offset + to.len()]
                    .copy_from_slice(&self.params[from.offset..from.offset + from.len()]);
            }
        }
        Ok(out)
    }
}

fn rows_to_poses(t: &Tensor) -> Vec<PoseSE3> {
    (0..t.rows).map(|r| PoseSE3::from_params(t.row(r))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Sequence lengths (frames) of the two stages.
    pub stage1_len: usize,
    pub stage2_len: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub late_step_size: f64,
    /// Step index from which `late_step_size` applies.
    pub step_boundary: usize,
    pub temperature: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 5000,
            stage2_steps: 5000,
            stage1_len: 2,
            stage2_len: 8,
            batch_size: 4,
            step_size: 1e-4,
            late_step_size: 1e-5,
            step_boundary: 8000,
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.stage1_steps + self.stage2_steps == 0 {
            return bad("at least one training step is required");
        }
        if self.stage1_len < 2 || self.stage2_len < 2 {
            return bad("stage sequence lengths must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.step_size > 0.0 && self.late_step_size > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Mean KL term per step.
    pub intrinsics_kl: Vec<f64>,
    /// Sequence length used at each step.
    pub lengths: Vec<usize>,
}

/// Train on a corpus of sequences with forward and backward flow. Stage 1
/// draws random windows of `stage1_len` frames, stage 2 of `stage2_len`.
pub fn train(model: &mut Model, corpus: &[Vec<FrameObservations>], config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    for seq in corpus {
        validate_observations(seq)?;
        if seq.len() < config.stage1_len {
            return Err(Error::InsufficientLength(format!(
                "training sequence of {} frames is shorter than stage length",
                seq.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(model.params.len());
    let mut log = TrainLog::default();
    let total = config.stage1_steps + config.stage2_steps;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    for step in 0..total {
        let len = if step < config.stage1_steps {
            config.stage1_len
        } else {
            config.stage2_len
        };
        // draw a batch of windows plus a seed per item so masks do not
        // depend on thread scheduling
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &corpus[order[cursor]];
            cursor += 1;
            let len = len.min(seq.len());
            let start = rng.gen_range(0..=seq.len() - len);
            batch.push((&seq[start..start + len], rng.gen::<u64>()));
        }
        let params = &model.params;
        let m: &Model = model;
        let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
            .par_iter()
            .map(|(frames, seed)| {
                let prep = m.prepare(frames)?;
                let masks = m.sample_masks(&prep, &mut ChaCha8Rng::seed_from_u64(*seed));
                m.loss_and_grad(params, &prep, Some(&masks), &config.weights, config.temperature)
            })
            .collect();
        let mut grad = vec![0.0; model.params.len()];
        let (mut loss, mut kl) = (0.0, 0.0);
        let inv = 1.0 / config.batch_size as f64;
        for r in results {
            let (b, g) = r.map_err(|e| match e {
                Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("step {step}: {msg}")),
                other => other,
            })?;
            loss += b.total * inv;
            kl += b.intrinsics_kl * inv;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v * inv;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("step {step}: non-finite gradient")));
        }
        let lr = if step < config.step_boundary {
            config.step_size
        } else {
            config.late_step_size
        };
        opt.step(&mut model.params, &grad, lr);
        log.losses.push(loss);
        log.intrinsics_kl.push(kl);
        log.lengths.push(len);
    }
    Ok(log)
}

/// Synthetic static scenes whose true focal is drawn from the model's
/// schedule; the training and held-out data of the toy predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sequences: usize,
    pub frames: usize,
    pub deg_per_frame: f64,
    pub trans_per_frame: f64,
    pub static_boxes: usize,
    /// Flow noise standard deviation, pixels.
    pub flow_noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            sequences: 200,
            frames: 8,
            deg_per_frame: 2.0,
            trans_per_frame: 0.05,
            static_boxes: 5,
            flow_noise: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub frames: Vec<FrameObservations>,
    pub focal_bin: usize,
    pub focal: f64,
}

pub fn focal_corpus(config: &ModelConfig, spec: &CorpusSpec, seed: u64) -> Result<Vec<LabeledSequence>> {
    config.validate()?;
    if spec.frames < 2 {
        return Err(Error::SingleFrame(spec.frames));
    }
    let schedule = config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        let base: u64 = rng.gen();
        let mut last = None;
        // very wide candidates can look past the scene; draw another layout
        for attempt in 0..64u64 {
            let s = base.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let bin = r.gen_range(0..config.m);
            let focal = schedule.candidates[bin];
            let path = crate::synth::random_rotation_path(&mut r, spec.deg_per_frame, spec.trans_per_frame);
            let scene = crate::synth::SceneSpec::random_static(
                config.width,
                config.height,
                focal,
                spec.frames,
                path,
                spec.static_boxes,
                s,
            );
            match crate::synth::generate_scene(&scene).and_then(|seq| {
                crate::synth::perturb(
                    &seq,
                    &crate::synth::NoiseSpec {
                        flow_sigma: spec.flow_noise,
                        depth_rel_sigma: 0.0,
                        seed: s,
                    },
                )
            }) {
                Ok(seq) => {
                    out.push(LabeledSequence {
                        frames: (&seq).into(),
                        focal_bin: bin,
                        focal,
                    });
                    last = None;
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            return Err(e);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, perturb, random_rotation_path, NoiseSpec, SceneSpec};

    fn mini_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 16,
            attention_layers: 1,
            attention_heads: 2,
            patch_stride: 4,
            m: 4,
            head_hidden: 8,
            sigma_resolution: 4,
            max_pairs: 4,
            width: 8,
            height: 8,
            ..Default::default()
        }
    }

    fn sequence(cfg: &ModelConfig, frames: usize, seed: u64) -> Vec<FrameObservations> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = random_rotation_path(&mut rng, 2.0, 0.05);
        let f = cfg.schedule().unwrap().candidates[cfg.m / 2];
        let spec = SceneSpec::random_static(cfg.width, cfg.height, f, frames, path, 3, seed);
        let seq = generate_scene(&spec).unwrap();
        let noisy = perturb(
            &seq,
            &NoiseSpec {
                flow_sigma: 0.05,
                depth_rel_sigma: 0.0,
                seed,
            },
        )
        .unwrap();
        (&noisy).into()
    }

    fn randomized(model: &Model, scale: f64, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-scale, scale);
        let params = model.params.iter().map(|p| p + u.sample(&mut rng)).collect();
        Model::from_parts(model.config.clone(), params).unwrap()
    }

    #[test]
    fn shapes_and_identity_at_init() {
        let cfg = mini_config();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let obs = sequence(&cfg, 4, 1);
        let out = model.forward(&obs).unwrap();
        assert_eq!(out.candidates.len(), cfg.m);
        assert_eq!(out.likelihood.len(), cfg.m);
        assert!((out.likelihood.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for c in &out.candidates {
            assert_eq!(c.poses.len(), 3);
            assert_eq!(c.backward_poses.len(), 3);
            assert_eq!(c.sigmas.len(), 3);
            for p in c.poses.iter().chain(&c.backward_poses) {
                assert_eq!(p.params(), [0.0; 6]);
            }
        }
        let tokens = model.tokens(&obs).unwrap();
        assert_eq!(tokens.pose_tokens.len(), 3);
        assert_eq!(tokens.dim(), cfg.feature_dim);
    }

    #[test]
    fn rejects_wrong_raster_size() {
        let model = Model::new(mini_config(), 0).unwrap();
        let other = ModelConfig {
            width: 12,
            height: 12,
            ..mini_config()
        };
        let obs = sequence(&other, 3, 0);
        assert!(matches!(model.forward(&obs), Err(Error::DimensionMismatch(_))));
        assert!(model.forward(&obs[..1]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { p_drop: 1.0, ..Default::default() },
            ModelConfig { feature_dim: 0, ..Default::default() },
            ModelConfig { feature_dim: 30, attention_heads: 4, ..Default::default() },
            ModelConfig { m: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = mini_config();
        let model = randomized(&Model::new(cfg.clone(), 5).unwrap(), 0.05, 6);
        let obs = sequence(&cfg, 3, 2);
        let prep = model.prepare(&obs).unwrap();
        let masks = model.sample_masks(&prep, &mut ChaCha8Rng::seed_from_u64(9));
        let w = LossWeights::default();
        let (base, _) = model.loss_and_grad(&model.params, &prep, Some(&masks), &w, 100.0).unwrap();
        // the likelihood target is detached, so hold it fixed
        let target = losses_to_target_distribution(&base.flow, 100.0).unwrap();
        let f = |p: &[f64]| {
            model
                .loss_and_grad_with_target(p, &prep, Some(&masks), &w, 100.0, Some(&target))
                .unwrap()
        };
        let (_, grad) = f(&model.params);
        let mut params = model.params.clone();
        let h = 1e-5;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        let seq_head = model.ranges_with_prefix("seqhead.");
        for i in 0..params.len() {
            // the sequence token is detached, so outside the sequence head the
            // intrinsics term has no gradient by construction
            let in_head = seq_head.iter().any(|&(a, e)| (a..e).contains(&i));
            let objective = |b: &LossBreakdown| if in_head { b.total } else { b.total - w.lambda_intr * b.intrinsics_kl };
            let x0 = params[i];
            params[i] = x0 + h;
            let (lp, gp) = f(&params);
            params[i] = x0 - h;
            let (lm, gm) = f(&params);
            params[i] = x0;
            // skip coordinates sitting on an L1 kink
            if (gp[i] - gm[i]).abs() > 1e-3 * (1.0 + grad[i].abs()) {
                continue;
            }
            let fd = (objective(&lp) - objective(&lm)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-2);
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(checked > params.len() * 9 / 10, "only {checked} of {} checked", params.len());
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn intrinsics_term_never_reaches_frame_heads() {
        let cfg = mini_config();
        let model = randomized(&Model::new(cfg.clone(), 1).unwrap(), 0.1, 2);
        let obs = sequence(&cfg, 3, 4);
        let prep = model.prepare(&obs).unwrap();
        let only_kl = LossWeights {
            lambda_flow: 0.0,
            lambda_consistency: 0.0,
            lambda_intr: 1.0,
        };
        let no_decay = Model::from_parts(
            ModelConfig {
                weight_decay_pose_tokens: 0.0,
                ..cfg
            },
            model.params.clone(),
        )
        .unwrap();
        let (b, grad) = no_decay.loss_and_grad(&model.params, &prep, None, &only_kl, 100.0).unwrap();
        assert!(b.intrinsics_kl > 0.0);
        let seq_head: Vec<_> = no_decay.ranges_with_prefix("seqhead.");
        let mut nonzero_seq = false;
        for (i, g) in grad.iter().enumerate() {
            if seq_head.iter().any(|&(a, e)| (a..e).contains(&i)) {
                nonzero_seq |= *g != 0.0;
            } else {
                assert_eq!(*g, 0.0, "parameter {i} received intrinsics gradient");
            }
        }
        assert!(nonzero_seq);
    }

    #[test]
    fn head_permutation_permutes_bank() {
        let cfg = mini_config();
        let model = randomized(&Model::new(cfg.clone(), 7).unwrap(), 0.1, 8);
        let obs = sequence(&cfg, 3, 5);
        let perm = [2, 0, 3, 1];
        let a = model.forward(&obs).unwrap();
        let b = model.permute_heads(&perm).unwrap().forward(&obs).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(b.candidates[k].poses, a.candidates[src].poses);
            assert_eq!(b.candidates[k].backward_poses, a.candidates[src].backward_poses);
            assert_eq!(b.candidates[k].sigmas, a.candidates[src].sigmas);
        }
        assert!(model.permute_heads(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn dropout_statistics_and_boundaries() {
        let tokens = TokenState {
            pose_tokens: vec![vec![1.0; 100]; 1000],
            sequence_token: vec![2.0; 100],
        };
        let dropped = apply_pose_token_dropout(&tokens, 0.1, 42);
        let zeros = dropped.pose_tokens.iter().flatten().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / 1e5;
        assert!((0.09..=0.11).contains(&frac), "zero fraction {frac}");
        assert_eq!(dropped.sequence_token, tokens.sequence_token);
        assert_eq!(apply_pose_token_dropout(&tokens, 0.0, 1), tokens);
        let all = apply_pose_token_dropout(&tokens, 1.0, 1);
        assert!(all.pose_tokens.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(all.sequence_token, tokens.sequence_token);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = mini_config();
        let model = randomized(&Model::new(cfg.clone(), 2).unwrap(), 0.1, 3);
        let obs = sequence(&cfg, 4, 6);
        assert_eq!(model.forward(&obs).unwrap(), model.forward(&obs).unwrap());
    }

    #[test]
    fn dropout_leaves_uncertainty_alone() {
        let cfg = mini_config();
        let model = randomized(&Model::new(cfg.clone(), 2).unwrap(), 0.1, 3);
        let prep = model.prepare(&sequence(&cfg, 3, 1)).unwrap();
        let plain = model.build(&model.params, &prep.fwd, None);
        let zero = vec![0.0; prep.fwd.features.len() * cfg.feature_dim];
        let dropped = model.build(&model.params, &prep.fwd, Some(&zero));
        for k in 0..cfg.m {
            assert_eq!(plain.tape.value(plain.sigma_raw[k]), dropped.tape.value(dropped.sigma_raw[k]));
            assert_eq!(plain.tape.value(plain.logits), dropped.tape.value(dropped.logits));
        }
    }

    #[test]
    fn short_training_run_is_finite_and_seeded() {
        let cfg = mini_config();
        let corpus: Vec<_> = (0..3).map(|s| sequence(&cfg, 4, s)).collect();
        let tc = TrainConfig {
            stage1_steps: 3,
            stage2_steps: 2,
            stage2_len: 4,
            batch_size: 2,
            step_boundary: 4,
            ..Default::default()
        };
        let mut a = Model::new(cfg.clone(), 0).unwrap();
        let mut b = a.clone();
        let la = train(&mut a, &corpus, &tc).unwrap();
        let lb = train(&mut b, &corpus, &tc).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
        assert_eq!(la.lengths, vec![2, 2, 2, 4, 4]);
        assert!(la.losses.iter().all(|l| l.is_finite()));
    }
}
