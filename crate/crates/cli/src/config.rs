//! Flat `key=value` run configuration covering every stage.

use std::path::Path;

use camtraj_core::eval::AlignmentMode;
use camtraj_core::hypotheses::FocalSchedule;
use camtraj_core::predictor::{CorpusSpec, ModelConfig, TrainConfig};
use camtraj_core::refine::RefineConfig;
use camtraj_core::solver::FitConfig;
use camtraj_core::LossWeights;

use crate::error::{CliError, CliResult};
use crate::fsutil;

/// Synthetic scene parameters for the `synth` subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    /// `arc`, `rotation`, `straight` or `identity`.
    pub path: String,
    pub path_deg: f64,
    pub path_radius: f64,
    pub path_trans: f64,
    pub boxes: usize,
    /// 0 disables the mover.
    pub mover_coverage: f64,
    pub mover_depth: f64,
    pub mover_velocity: f64,
    pub flow_noise: f64,
    pub depth_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            focal: 30.0,
            frames: 8,
            path: "arc".into(),
            path_deg: 1.0,
            path_radius: 5.0,
            path_trans: 0.05,
            boxes: 4,
            mover_coverage: 0.0,
            mover_depth: 1.8,
            mover_velocity: 0.03,
            flow_noise: 0.0,
            depth_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule_m: usize,
    /// Absent bounds default to 0.1·H and 3.5·H.
    pub schedule_f_min: Option<f64>,
    pub schedule_f_max: Option<f64>,
    pub weights: LossWeights,
    pub fit: FitConfig,
    pub refine: RefineConfig,
    pub alignment: AlignmentMode,
    pub rpe_delta: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule_m: 32,
            schedule_f_min: None,
            schedule_f_max: None,
            weights: LossWeights::default(),
            fit: FitConfig::default(),
            refine: RefineConfig::default(),
            alignment: AlignmentMode::default(),
            rpe_delta: 1,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusSpec::default(),
        }
    }
}

mod parse {
    use super::*;

    fn err(key: &str, value: &str, what: &str) -> CliError {
        CliError::input(format!("{key}: cannot parse {value:?} as {what}"))
    }

    pub fn usize(key: &str, v: &str) -> CliResult<usize> {
        v.parse().map_err(|_| err(key, v, "a non-negative integer"))
    }

    pub fn u64(key: &str, v: &str) -> CliResult<u64> {
        v.parse().map_err(|_| err(key, v, "a non-negative integer"))
    }

    pub fn f64(key: &str, v: &str) -> CliResult<f64> {
        let x: f64 = v.parse().map_err(|_| err(key, v, "a number"))?;
        if !x.is_finite() {
            return Err(err(key, v, "a finite number"));
        }
        Ok(x)
    }

    pub fn opt_f64(key: &str, v: &str) -> CliResult<Option<f64>> {
        if v == "auto" {
            Ok(None)
        } else {
            f64(key, v).map(Some)
        }
    }

    pub fn alignment(key: &str, v: &str) -> CliResult<AlignmentMode> {
        v.parse().map_err(|_| err(key, v, "an alignment mode (none, rigid, similarity)"))
    }

    pub fn string(_: &str, v: &str) -> CliResult<String> {
        Ok(v.to_string())
    }
}

mod show {
    use super::*;

    pub fn usize(v: &usize) -> String {
        v.to_string()
    }

    pub fn u64(v: &u64) -> String {
        v.to_string()
    }

    pub fn f64(v: &f64) -> String {
        format!("{v:?}")
    }

    pub fn opt_f64(v: &Option<f64>) -> String {
        v.map_or_else(|| "auto".to_string(), |x| format!("{x:?}"))
    }

    pub fn alignment(v: &AlignmentMode) -> String {
        v.to_string()
    }

    pub fn string(v: &String) -> String {
        v.clone()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $kind:ident),* $(,)?) => {
        /// Every accepted key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_value(cfg: &mut RunConfig, key: &str, value: &str) -> CliResult<()> {
            match key {
                $($key => cfg.$($field).+ = parse::$kind(key, value)?,)*
                _ => return Err(CliError::input(format!("unknown configuration key {key:?}"))),
            }
            Ok(())
        }

        fn get_value(cfg: &RunConfig, key: &str) -> String {
            match key {
                $($key => show::$kind(&cfg.$($field).+),)*
                _ => unreachable!("key list and accessors are generated together"),
            }
        }
    };
}

keys! {
    "seed" => seed: u64,
    "schedule.m" => schedule_m: usize,
    "schedule.f_min" => schedule_f_min: opt_f64,
    "schedule.f_max" => schedule_f_max: opt_f64,
    "loss.lambda_flow" => weights.lambda_flow: f64,
    "loss.lambda_consistency" => weights.lambda_consistency: f64,
    "loss.lambda_intr" => weights.lambda_intr: f64,
    "fit.step_size" => fit.step_size: f64,
    "fit.sigma_step_size" => fit.sigma_step_size: f64,
    "fit.final_step_fraction" => fit.final_step_fraction: f64,
    "fit.max_iterations" => fit.max_iterations: usize,
    "fit.sigma_resolution" => fit.sigma_resolution: usize,
    "fit.convergence_tol" => fit.convergence_tol: f64,
    "fit.temperature" => fit.temperature: f64,
    "refine.grid" => refine.grid: usize,
    "refine.track_length" => refine.track_length: usize,
    "refine.stride" => refine.stride: usize,
    "refine.window" => refine.window: usize,
    "refine.overlap" => refine.overlap: usize,
    "refine.steps_per_window" => refine.steps_per_window: usize,
    "refine.global_steps" => refine.global_steps: usize,
    "refine.step_size" => refine.step_size: f64,
    "refine.sigma_max" => refine.sigma_max: f64,
    "refine.lambda_smooth" => refine.lambda_smooth: f64,
    "eval.alignment" => alignment: alignment,
    "eval.rpe_delta" => rpe_delta: usize,
    "synth.width" => synth.width: usize,
    "synth.height" => synth.height: usize,
    "synth.focal" => synth.focal: f64,
    "synth.frames" => synth.frames: usize,
    "synth.path" => synth.path: string,
    "synth.path_deg" => synth.path_deg: f64,
    "synth.path_radius" => synth.path_radius: f64,
    "synth.path_trans" => synth.path_trans: f64,
    "synth.boxes" => synth.boxes: usize,
    "synth.mover_coverage" => synth.mover_coverage: f64,
    "synth.mover_depth" => synth.mover_depth: f64,
    "synth.mover_velocity" => synth.mover_velocity: f64,
    "synth.flow_noise" => synth.flow_noise: f64,
    "synth.depth_noise" => synth.depth_noise: f64,
    "model.feature_dim" => model.feature_dim: usize,
    "model.attention_layers" => model.attention_layers: usize,
    "model.attention_heads" => model.attention_heads: usize,
    "model.patch_stride" => model.patch_stride: usize,
    "model.m" => model.m: usize,
    "model.p_drop" => model.p_drop: f64,
    "model.weight_decay_pose_tokens" => model.weight_decay_pose_tokens: f64,
    "model.head_hidden" => model.head_hidden: usize,
    "model.sigma_resolution" => model.sigma_resolution: usize,
    "model.max_pairs" => model.max_pairs: usize,
    "model.width" => model.width: usize,
    "model.height" => model.height: usize,
    "train.stage1_steps" => train.stage1_steps: usize,
    "train.stage2_steps" => train.stage2_steps: usize,
    "train.stage1_len" => train.stage1_len: usize,
    "train.stage2_len" => train.stage2_len: usize,
    "train.batch_size" => train.batch_size: usize,
    "train.step_size" => train.step_size: f64,
    "train.late_step_size" => train.late_step_size: f64,
    "train.step_boundary" => train.step_boundary: usize,
    "train.temperature" => train.temperature: f64,
    "train.corpus_size" => corpus.sequences: usize,
    "train.corpus_frames" => corpus.frames: usize,
    "train.corpus_deg" => corpus.deg_per_frame: f64,
    "train.corpus_trans" => corpus.trans_per_frame: f64,
    "train.corpus_boxes" => corpus.static_boxes: usize,
    "train.corpus_flow_noise" => corpus.flow_noise: f64,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::input(format!("line {}: expected key=value, found {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::input(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            set_value(&mut cfg, key, value).map_err(|e| CliError::input(format!("line {}: {}", n + 1, e.message)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::parse(&fsutil::read_to_string(path)?).map_err(|e| e.at(path))
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", get_value(self, k))).collect()
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.seed,
            weights: self.weights,
            ..self.fit.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            weights: self.weights,
            ..self.train.clone()
        }
    }

    pub fn schedule(&self, height: usize) -> CliResult<FocalSchedule> {
        let h = height as f64;
        let f_min = self.schedule_f_min.unwrap_or(0.1 * h);
        let f_max = self.schedule_f_max.unwrap_or(3.5 * h);
        Ok(FocalSchedule::new(self.schedule_m, f_min, f_max)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.fit_config().validate()?;
        self.refine.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        if self.rpe_delta == 0 {
            return Err(CliError::input("eval.rpe_delta must be positive"));
        }
        // catches inverted or non-positive explicit bounds early
        self.schedule(64)?;
        let s = &self.synth;
        if s.width == 0 || s.height == 0 || s.frames < 2 || !(s.focal > 0.0) {
            return Err(CliError::input(
                "synth.width, synth.height and synth.focal must be positive and synth.frames at least 2",
            ));
        }
        if !["arc", "rotation", "straight", "identity"].contains(&s.path.as_str()) {
            return Err(CliError::input(format!(
                "synth.path must be arc, rotation, straight or identity, got {:?}",
                s.path
            )));
        }
        if s.flow_noise < 0.0 || s.depth_noise < 0.0 {
            return Err(CliError::input("synth noise levels must be non-negative"));
        }
        if self.corpus.sequences == 0 || self.corpus.frames < 2 {
            return Err(CliError::input("train.corpus_size must be positive and train.corpus_frames at least 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn values_and_comments() {
        let cfg = RunConfig::parse("# comment\nseed = 7\nfit.max_iterations=10 # trailing\neval.alignment=rigid\nschedule.f_min=auto\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fit.max_iterations, 10);
        assert_eq!(cfg.alignment, AlignmentMode::Rigid);
        assert_eq!(cfg.fit_config().seed, 7);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nonsense.key=1",
            "seed",
            "seed=1\nseed=2",
            "fit.step_size=abc",
            "fit.step_size=-1",
            "refine.overlap=8",
            "model.p_drop=1.0",
            "synth.path=spiral",
            "schedule.f_min=100\nschedule.f_max=10",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        let e = RunConfig::parse("nonsense.key=1").unwrap_err();
        assert!(e.message.contains("unknown configuration key"));
    }
}
