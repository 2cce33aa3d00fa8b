//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys are
//! rejected and every value is range-checked while parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Stage, TextEncoderKind};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::training::{CountScope, StageConfig};

/// Gradient-check fault injection, used as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdFault {
    None,
    Tokens,
    Adapter,
}

impl FromStr for FdFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tokens" => Ok(Self::Tokens),
            "adapter" => Ok(Self::Adapter),
            other => Err(Error::invalid(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub classes: usize,
    pub subclusters: usize,
    pub samples_per_subcluster: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub inter_class_min_angle: f64,
    pub intra_class_min_angle: f64,
    pub frames_per_sequence: usize,
    pub distortion: f64,

    pub subclasses: usize,
    pub tokens: usize,
    pub context_length: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub encoder: TextEncoderKind,
    pub residual: bool,
    pub temperature: f64,

    pub epochs1: usize,
    pub lr1: f64,
    pub wd1: f64,
    pub optimizer1: OptimizerKind,
    pub schedule1: LrSchedule,
    pub batch1: usize,

    pub epochs2: usize,
    pub lr2: f64,
    pub wd2: f64,
    pub optimizer2: OptimizerKind,
    pub schedule2: LrSchedule,
    pub batch2: usize,

    pub count_scope: CountScope,
    pub oversample: bool,
    pub threads: usize,

    pub strategies: Vec<String>,
    pub parallel_strategies: bool,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub baseline_batch: usize,

    pub fd_instances: usize,
    pub fd_h: f64,
    pub fd_tolerance: f64,
    pub fd_fault: FdFault,

    pub metrics_log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = StageConfig::stage1();
        let s2 = StageConfig::stage2();
        let synth = SynthConfig::default();
        Self {
            seed: 7,
            classes: synth.n_classes,
            subclusters: synth.subclusters_per_class,
            samples_per_subcluster: synth.samples_per_subcluster,
            feature_dim: synth.feature_dim,
            sigma: synth.intra_spread,
            inter_class_min_angle: synth.inter_class_min_angle,
            intra_class_min_angle: synth.intra_class_min_angle,
            frames_per_sequence: synth.frames_per_sequence,
            distortion: 0.0,
            subclasses: 5,
            tokens: 4,
            context_length: 4,
            token_dim: 16,
            embed_dim: 16,
            encoder: TextEncoderKind::IdentityMean,
            residual: true,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            epochs1: s1.epochs,
            lr1: s1.learning_rate,
            wd1: s1.weight_decay,
            optimizer1: s1.optimizer,
            schedule1: s1.schedule,
            batch1: s1.batch_size,
            epochs2: s2.epochs,
            lr2: s2.learning_rate,
            wd2: s2.weight_decay,
            optimizer2: s2.optimizer,
            schedule2: s2.schedule,
            batch2: s2.batch_size,
            count_scope: CountScope::Epoch,
            oversample: false,
            threads: 1,
            strategies: crate::harness::DEFAULT_STRATEGIES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            parallel_strategies: false,
            baseline_epochs: 30,
            baseline_lr: 1e-2,
            baseline_batch: 32,
            fd_instances: 20,
            fd_h: 1e-5,
            fd_tolerance: 1e-4,
            fd_fault: FdFault::None,
            metrics_log: None,
        }
    }
}

fn parse_value<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse::<T>()
        .map_err(|_| format!("cannot parse `{raw}`"))
}

fn positive_usize(raw: &str) -> std::result::Result<usize, String> {
    match parse_value::<usize>(raw)? {
        0 => Err("must be >= 1".into()),
        n => Ok(n),
    }
}

fn positive_f64(raw: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_value(raw)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got `{raw}`"))
    }
}

fn non_negative_f64(raw: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_value(raw)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got `{raw}`"))
    }
}

fn angle(raw: &str) -> std::result::Result<f64, String> {
    let v: f64 = parse_value(raw)?;
    if (0.0..=180.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 180] degrees, got `{raw}`"))
    }
}

fn parsed<T: FromStr<Err = Error>>(raw: &str) -> std::result::Result<T, String> {
    raw.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: line.to_string(),
                    line: line_no,
                    message: "expected `key = value`".into(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    key: key.into(),
                    line: line_no,
                    message: "duplicate key".into(),
                });
            }
            cfg.set(key, value).map_err(|message| Error::Config {
                key: key.into(),
                line: line_no,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_value(v)?,
            "classes" => self.classes = positive_usize(v)?,
            "subclusters" => self.subclusters = positive_usize(v)?,
            "samples_per_subcluster" => self.samples_per_subcluster = positive_usize(v)?,
            "feature_dim" => self.feature_dim = positive_usize(v)?,
            "sigma" => self.sigma = non_negative_f64(v)?,
            "inter_class_min_angle" => self.inter_class_min_angle = angle(v)?,
            "intra_class_min_angle" => self.intra_class_min_angle = angle(v)?,
            "frames_per_sequence" => self.frames_per_sequence = positive_usize(v)?,
            "distortion" => self.distortion = non_negative_f64(v)?,
            "subclasses" => self.subclasses = positive_usize(v)?,
            "tokens" => self.tokens = positive_usize(v)?,
            "context_length" => self.context_length = parse_value(v)?,
            "token_dim" => self.token_dim = positive_usize(v)?,
            "embed_dim" => self.embed_dim = positive_usize(v)?,
            "encoder" => self.encoder = parsed(v)?,
            "residual" => self.residual = parse_value(v)?,
            "temperature" => self.temperature = positive_f64(v)?,
            "epochs1" => self.epochs1 = parse_value(v)?,
            "lr1" => self.lr1 = positive_f64(v)?,
            "wd1" => self.wd1 = non_negative_f64(v)?,
            "optimizer1" => self.optimizer1 = parsed(v)?,
            "schedule1" => self.schedule1 = parsed(v)?,
            "batch1" => self.batch1 = positive_usize(v)?,
            "epochs2" => self.epochs2 = parse_value(v)?,
            "lr2" => self.lr2 = positive_f64(v)?,
            "wd2" => self.wd2 = non_negative_f64(v)?,
            "optimizer2" => self.optimizer2 = parsed(v)?,
            "schedule2" => self.schedule2 = parsed(v)?,
            "batch2" => self.batch2 = positive_usize(v)?,
            "count_scope" => self.count_scope = parsed(v)?,
            "oversample" => self.oversample = parse_value(v)?,
            "threads" => self.threads = positive_usize(v)?,
            "strategies" => {
                let names: Vec<String> = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if names.is_empty() {
                    return Err("needs at least one strategy".into());
                }
                self.strategies = names;
            }
            "parallel_strategies" => self.parallel_strategies = parse_value(v)?,
            "baseline_epochs" => self.baseline_epochs = parse_value(v)?,
            "baseline_lr" => self.baseline_lr = positive_f64(v)?,
            "baseline_batch" => self.baseline_batch = positive_usize(v)?,
            "fd_instances" => self.fd_instances = positive_usize(v)?,
            "fd_h" => self.fd_h = positive_f64(v)?,
            "fd_tolerance" => self.fd_tolerance = positive_f64(v)?,
            "fd_fault" => self.fd_fault = parsed(v)?,
            "metrics_log" => self.metrics_log = Some(PathBuf::from(v)),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: &str| Error::Config {
            key: key.into(),
            line: 0,
            message: message.into(),
        };
        if self.encoder == TextEncoderKind::IdentityMean && self.token_dim != self.embed_dim {
            return Err(fail(
                "encoder",
                "identity-mean requires token_dim == embed_dim",
            ));
        }
        if self.residual && self.feature_dim != self.embed_dim {
            return Err(fail(
                "residual",
                "residual adapter requires feature_dim == embed_dim",
            ));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_classes: self.classes,
            subclusters_per_class: self.subclusters,
            samples_per_subcluster: self.samples_per_subcluster,
            feature_dim: self.feature_dim,
            intra_spread: self.sigma,
            inter_class_min_angle: self.inter_class_min_angle,
            intra_class_min_angle: self.intra_class_min_angle,
            frames_per_sequence: self.frames_per_sequence,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.classes,
            n_subclasses: self.subclasses,
            n_tokens: self.tokens,
            token_dim: self.token_dim,
            context_length: self.context_length,
            embed_dim: self.embed_dim,
            feature_dim: self.feature_dim,
            encoder: self.encoder,
            residual: self.residual,
            seed: self.seed,
        }
    }

    pub fn stage(&self, stage: Stage) -> StageConfig {
        let (epochs, lr, wd, optimizer, schedule, batch) = match stage {
            Stage::Descriptors => (
                self.epochs1,
                self.lr1,
                self.wd1,
                self.optimizer1,
                self.schedule1,
                self.batch1,
            ),
            Stage::Adapter => (
                self.epochs2,
                self.lr2,
                self.wd2,
                self.optimizer2,
                self.schedule2,
                self.batch2,
            ),
        };
        StageConfig {
            stage,
            epochs,
            learning_rate: lr,
            weight_decay: wd,
            optimizer,
            schedule,
            batch_size: batch,
            seed: self.seed,
            temperature: self.temperature,
            count_scope: self.count_scope,
            threads: self.threads,
        }
    }

    /// Canonical rendering; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("classes", self.classes.to_string());
        kv("subclusters", self.subclusters.to_string());
        kv(
            "samples_per_subcluster",
            self.samples_per_subcluster.to_string(),
        );
        kv("feature_dim", self.feature_dim.to_string());
        kv("sigma", self.sigma.to_string());
        kv(
            "inter_class_min_angle",
            self.inter_class_min_angle.to_string(),
        );
        kv(
            "intra_class_min_angle",
            self.intra_class_min_angle.to_string(),
        );
        kv("frames_per_sequence", self.frames_per_sequence.to_string());
        kv("distortion", self.distortion.to_string());
        kv("subclasses", self.subclasses.to_string());
        kv("tokens", self.tokens.to_string());
        kv("context_length", self.context_length.to_string());
        kv("token_dim", self.token_dim.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("encoder", self.encoder.to_string());
        kv("residual", self.residual.to_string());
        kv("temperature", self.temperature.to_string());
        kv("epochs1", self.epochs1.to_string());
        kv("lr1", self.lr1.to_string());
        kv("wd1", self.wd1.to_string());
        kv("optimizer1", self.optimizer1.to_string());
        kv("schedule1", self.schedule1.to_string());
        kv("batch1", self.batch1.to_string());
        kv("epochs2", self.epochs2.to_string());
        kv("lr2", self.lr2.to_string());
        kv("wd2", self.wd2.to_string());
        kv("optimizer2", self.optimizer2.to_string());
        kv("schedule2", self.schedule2.to_string());
        kv("batch2", self.batch2.to_string());
        kv("count_scope", self.count_scope.to_string());
        kv("oversample", self.oversample.to_string());
        kv("threads", self.threads.to_string());
        kv("strategies", self.strategies.join(","));
        kv("parallel_strategies", self.parallel_strategies.to_string());
        kv("baseline_epochs", self.baseline_epochs.to_string());
        kv("baseline_lr", self.baseline_lr.to_string());
        kv("baseline_batch", self.baseline_batch.to_string());
        kv("fd_instances", self.fd_instances.to_string());
        kv("fd_h", self.fd_h.to_string());
        kv("fd_tolerance", self.fd_tolerance.to_string());
        kv(
            "fd_fault",
            match self.fd_fault {
                FdFault::None => "none",
                FdFault::Tokens => "tokens",
                FdFault::Adapter => "adapter",
            }
            .into(),
        );
        if let Some(p) = &self.metrics_log {
            kv("metrics_log", p.display().to_string());
        }
        out
    }
}
