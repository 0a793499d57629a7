// SPDX-License-Identifier: MIT OR Apache-2.0

//! Optimizers, schedules, freezing, checkpoints and the three training
//! phases: base pretraining on salient-span masking, knowledge injection into
//! the bank with the base frozen, and whole-model fine-tuning.

mod checkpoint;
mod data;
mod eval;
mod optim;
mod phases;

use std::fmt;
use std::str::FromStr;

use crate::config::Settings;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, RngState, FORMAT_VERSION};
pub use data::{copy_task, Batcher, Example, ProxyTask, Sample, QA_PROMPT};
pub use eval::{evaluate_em, normalize_answer, proxy_lm_eval, EmReport, QaModel, PROXY_MAX_LEN};
pub use optim::{clip_global_norm, global_norm, OptimizerState, ParamGroup};
pub use phases::{
    finetune, inject_knowledge, param_hashes, pretrain_base, ssm_loss, train_phase, MetricRecord, PhaseReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    ConstantWithWarmup,
    LinearWithWarmup,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::ConstantWithWarmup => "constant_with_warmup",
            Schedule::LinearWithWarmup => "linear_with_warmup",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "constant_with_warmup" => Ok(Schedule::ConstantWithWarmup),
            "linear_with_warmup" => Ok(Schedule::LinearWithWarmup),
            _ => Err(format!("unknown schedule {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adafactor => "adafactor",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adafactor" => Ok(OptimizerKind::Adafactor),
            _ => Err(format!("unknown optimizer {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub dropout: f64,
    pub nkb_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 1000,
            warmup_steps: 100,
            peak_lr: 3e-3,
            schedule: Schedule::ConstantWithWarmup,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            dropout: 0.0,
            nkb_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.warmup_steps > self.max_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be finite and non-negative"));
        }
        for (name, p) in [("dropout", self.dropout), ("nkb_dropout", self.nkb_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Reads `prefix.field` keys over `self`.
    pub fn apply_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        let k = |f: &str| format!("{prefix}.{f}");
        s.take_into(&k("batch_size"), &mut self.batch_size)?;
        s.take_into(&k("max_steps"), &mut self.max_steps)?;
        s.take_into(&k("warmup_steps"), &mut self.warmup_steps)?;
        s.take_into(&k("peak_lr"), &mut self.peak_lr)?;
        s.take_into(&k("schedule"), &mut self.schedule)?;
        s.take_into(&k("optimizer"), &mut self.optimizer)?;
        s.take_into(&k("clip_norm"), &mut self.clip_norm)?;
        s.take_into(&k("dropout"), &mut self.dropout)?;
        s.take_into(&k("nkb_dropout"), &mut self.nkb_dropout)?;
        s.take_into(&k("seed"), &mut self.seed)?;
        self.validate()
    }

    pub fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        let k = |f: &str| format!("{prefix}.{f}");
        vec![
            (k("batch_size"), self.batch_size.to_string()),
            (k("max_steps"), self.max_steps.to_string()),
            (k("warmup_steps"), self.warmup_steps.to_string()),
            (k("peak_lr"), self.peak_lr.to_string()),
            (k("schedule"), self.schedule.to_string()),
            (k("optimizer"), self.optimizer.to_string()),
            (k("clip_norm"), self.clip_norm.to_string()),
            (k("dropout"), self.dropout.to_string()),
            (k("nkb_dropout"), self.nkb_dropout.to_string()),
            (k("seed"), self.seed.to_string()),
        ]
    }
}

/// Learning rate for the `step`-th update (updates count from 1).
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let warm = cfg.warmup_steps;
    let ramp = |t: usize| if warm == 0 { 1.0 } else { (t as f64 / warm as f64).min(1.0) };
    match cfg.schedule {
        Schedule::Constant => peak,
        Schedule::ConstantWithWarmup => peak * ramp(step),
        Schedule::LinearWithWarmup => {
            if step >= cfg.max_steps {
                0.0
            } else if step < warm {
                peak * ramp(step)
            } else {
                peak * (cfg.max_steps - step) as f64 / (cfg.max_steps - warm) as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(schedule: Schedule) -> TrainConfig {
        TrainConfig {
            schedule,
            warmup_steps: 100,
            max_steps: 1000,
            peak_lr: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_end_hits_peak_exactly() {
        assert_eq!(lr_at(100, &cfg(Schedule::ConstantWithWarmup)), 0.5);
        assert_eq!(lr_at(100, &cfg(Schedule::LinearWithWarmup)), 0.5);
        assert_eq!(lr_at(7, &cfg(Schedule::Constant)), 0.5);
    }

    #[test]
    fn half_warmup_is_half_peak() {
        assert_eq!(lr_at(50, &cfg(Schedule::ConstantWithWarmup)), 0.25);
        assert_eq!(lr_at(5000, &cfg(Schedule::ConstantWithWarmup)), 0.5);
    }

    #[test]
    fn linear_decays_to_zero_at_max_steps() {
        let c = cfg(Schedule::LinearWithWarmup);
        assert_eq!(lr_at(1000, &c), 0.0);
        assert!((lr_at(550, &c) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn settings_round_trip_and_validation() {
        let c = cfg(Schedule::LinearWithWarmup);
        let mut s = Settings::new();
        for (k, v) in c.to_kv("inject") {
            s.set(&k, v);
        }
        let mut back = TrainConfig::default();
        back.apply_settings(&mut s, "inject").unwrap();
        s.finish().unwrap();
        assert_eq!(back, c);

        let mut s = Settings::parse("x.warmup_steps = 10\nx.max_steps = 5").unwrap();
        assert!(matches!(TrainConfig::default().apply_settings(&mut s, "x"), Err(Error::Config(_))));
        let mut s = Settings::parse("x.clip_norm = 0").unwrap();
        assert!(TrainConfig::default().apply_settings(&mut s, "x").is_err());
        let mut s = Settings::parse("x.schedule = cosine").unwrap();
        assert!(TrainConfig::default().apply_settings(&mut s, "x").is_err());
    }
}
