//! Closed-form learning-rate trajectories and batch bookkeeping.
//!
//! Every schedule is a pure function of the step, so resuming, replaying or
//! querying out of order gives the same value as walking the steps in order.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup, then geometric decay applied once per interval.
    WarmupIntervalDecay,
    /// Linear warmup, then cosine annealing to the floor.
    WarmupCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub init_lr: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_steps: Option<usize>,
}

impl ScheduleSpec {
    /// PLIP pretraining: 1e-5 warmed to 1e-4 over 1,000 steps, then decayed
    /// once per epoch to 5e-5 at the end of 30 epochs.
    pub fn plip(steps_per_epoch: usize) -> Self {
        Self {
            kind: ScheduleKind::WarmupIntervalDecay,
            init_lr: 1e-5,
            peak_lr: 1e-4,
            floor_lr: 5e-5,
            warmup_steps: 1000,
            total_steps: 30 * steps_per_epoch,
            interval_steps: Some(steps_per_epoch),
        }
    }

    /// Warmup-cosine with a 3% warmup fraction (at least one step).
    pub fn cosine(init_lr: f64, peak_lr: f64, floor_lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            init_lr,
            peak_lr,
            floor_lr,
            warmup_steps: ((total_steps as f64 * 0.03).ceil() as usize)
                .clamp(1, total_steps.max(1)),
            total_steps,
            interval_steps: None,
        }
    }

    /// Alignment stage: up to 1e-4, cosine to 0.
    pub fn alignment(total_steps: usize) -> Self {
        Self::cosine(1e-5, 1e-4, 0.0, total_steps)
    }

    /// Instruction stage, connector group: 1e-5 → 1e-4 → 1e-6.
    pub fn instruction_connector(total_steps: usize) -> Self {
        Self::cosine(1e-5, 1e-4, 1e-6, total_steps)
    }

    /// Instruction stage, LoRA group: up to 2e-4, cosine to 1e-6.
    pub fn instruction_lora(total_steps: usize) -> Self {
        Self::cosine(1e-5, 2e-4, 1e-6, total_steps)
    }

    /// Keeps the shape (fractions of the horizon) but rescales to `total_steps`.
    pub fn rescaled(&self, total_steps: usize) -> Self {
        let frac = |s: usize| {
            if self.total_steps == 0 {
                0
            } else {
                ((s as f64 / self.total_steps as f64) * total_steps as f64).round() as usize
            }
        };
        // A schedule that warms up keeps at least one warmup step.
        let min_warmup = usize::from(self.warmup_steps > 0);
        Self {
            warmup_steps: frac(self.warmup_steps).max(min_warmup).min(total_steps),
            interval_steps: self.interval_steps.map(|i| frac(i).max(1)),
            total_steps,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.init_lr, self.peak_lr, self.floor_lr];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative: {rates:?}"
            )));
        }
        if self.floor_lr > self.peak_lr {
            return Err(Error::Config(format!(
                "floor_lr {} exceeds peak_lr {}",
                self.floor_lr, self.peak_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.kind == ScheduleKind::WarmupIntervalDecay {
            let interval = self.interval_steps.unwrap_or(0);
            if interval == 0 {
                return Err(Error::Config(
                    "interval decay needs interval_steps >= 1".into(),
                ));
            }
            if self.floor_lr != self.peak_lr && self.decay_intervals() == 0 {
                return Err(Error::Config(
                    "interval decay horizon shorter than one interval cannot reach floor_lr".into(),
                ));
            }
        }
        Ok(())
    }

    fn decay_intervals(&self) -> usize {
        let interval = self.interval_steps.unwrap_or(1).max(1);
        (self.total_steps - self.warmup_steps.min(self.total_steps)) / interval
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        match self.kind {
            ScheduleKind::WarmupIntervalDecay => plip_lr(step, self),
            ScheduleKind::WarmupCosine => warmup_cosine(step, self),
        }
    }

    /// Learning rate at every step `0..=total_steps`.
    pub fn trajectory(&self) -> Result<Vec<f64>> {
        (0..=self.total_steps).map(|s| self.lr(s)).collect()
    }
}

fn check_step(step: usize, spec: &ScheduleSpec) -> Result<()> {
    if step > spec.total_steps {
        return Err(invalid!(
            "step {step} outside schedule range 0..={}",
            spec.total_steps
        ));
    }
    Ok(())
}

fn warmup(step: usize, spec: &ScheduleSpec) -> f64 {
    let frac = step as f64 / spec.warmup_steps as f64;
    spec.init_lr + (spec.peak_lr - spec.init_lr) * frac
}

/// Warmup followed by a geometric decay that multiplies by
/// `γ = (floor/peak)^(1/n)` at each of the `n` interval boundaries, landing
/// on `floor_lr` at `total_steps`.
pub fn plip_lr(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    check_step(step, spec)?;
    spec.validate()?;
    if step < spec.warmup_steps {
        return Ok(warmup(step, spec));
    }
    let n = spec.decay_intervals();
    if n == 0 {
        return Ok(spec.peak_lr);
    }
    let interval = spec.interval_steps.unwrap_or(1);
    let k = ((step - spec.warmup_steps) / interval).min(n);
    if k == 0 {
        return Ok(spec.peak_lr);
    }
    let ratio = spec.floor_lr / spec.peak_lr;
    Ok(spec.peak_lr * ratio.powf(k as f64 / n as f64))
}

/// Warmup followed by `floor + (peak − floor)·½·(1 + cos(π·t))`, with `t`
/// running from 0 at the end of warmup to 1 at `total_steps`.
pub fn warmup_cosine(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    check_step(step, spec)?;
    spec.validate()?;
    if step < spec.warmup_steps {
        return Ok(warmup(step, spec));
    }
    let span = spec.total_steps - spec.warmup_steps;
    if span == 0 {
        return Ok(spec.floor_lr);
    }
    let t = (step - spec.warmup_steps) as f64 / span as f64;
    let cos = (std::f64::consts::PI * t).cos();
    Ok(spec.floor_lr + (spec.peak_lr - spec.floor_lr) * 0.5 * (1.0 + cos))
}

/// Samples per optimizer update: micro-batch × accumulation steps × workers.
pub fn effective_batch(micro_batch: usize, accum: usize, workers: usize) -> Result<usize> {
    if micro_batch == 0 || accum == 0 || workers == 0 {
        return Err(invalid!(
            "batch factors must be >= 1, got ({micro_batch}, {accum}, {workers})"
        ));
    }
    Ok(micro_batch * accum * workers)
}
