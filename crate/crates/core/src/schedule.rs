//! Epoch-granular learning-rate programs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `initial_lr · factor^(milestones passed)`.
    StepDecay {
        initial_lr: f64,
        factor: f64,
        milestones: Vec<usize>,
        total_epochs: usize,
    },
    /// Discrete cyclical program: `steps + 2` geometrically spaced values
    /// from `max_lr` down to `min_lr`, repeated every `period` epochs.
    Cyclical {
        max_lr: f64,
        min_lr: f64,
        period: usize,
        steps: usize,
        total_epochs: usize,
    },
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive, got {v}")))
    }
}

impl ScheduleSpec {
    /// Cyclical schedule with bounds derived from the full-precision rates.
    pub fn cyclical_from(
        full_precision_lrs: &[f64],
        period: usize,
        steps: usize,
        total_epochs: usize,
    ) -> Result<Self> {
        let (max_lr, min_lr) = derive_cycle_bounds(full_precision_lrs)?;
        let spec = ScheduleSpec::Cyclical {
            max_lr,
            min_lr,
            period,
            steps,
            total_epochs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::StepDecay {
                initial_lr,
                factor,
                milestones,
                total_epochs,
            } => {
                positive(*initial_lr, "initial lr")?;
                positive(*factor, "decay factor")?;
                if *total_epochs == 0 {
                    return Err(Error::InvalidArgument("schedule needs at least one epoch".into()));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument("milestones must be strictly ascending".into()));
                }
            }
            ScheduleSpec::Cyclical {
                max_lr,
                min_lr,
                period,
                steps,
                total_epochs,
            } => {
                positive(*min_lr, "cycle minimum lr")?;
                positive(*max_lr, "cycle maximum lr")?;
                if max_lr <= min_lr {
                    return Err(Error::InvalidArgument(format!(
                        "cycle maximum {max_lr} must exceed minimum {min_lr}"
                    )));
                }
                if !(1..=2).contains(steps) {
                    return Err(Error::InvalidArgument(format!(
                        "intermediate step count must be 1 or 2, got {steps}"
                    )));
                }
                if *period < steps + 2 {
                    return Err(Error::InvalidArgument(format!(
                        "period {period} is shorter than the {} ladder values",
                        steps + 2
                    )));
                }
                if *total_epochs == 0 {
                    return Err(Error::InvalidArgument("schedule needs at least one epoch".into()));
                }
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        match self {
            ScheduleSpec::StepDecay { total_epochs, .. }
            | ScheduleSpec::Cyclical { total_epochs, .. } => *total_epochs,
        }
    }

    /// Descending distinct values of one cyclical period.
    pub fn ladder(&self) -> Option<Vec<f64>> {
        let ScheduleSpec::Cyclical {
            max_lr,
            min_lr,
            steps,
            ..
        } = *self
        else {
            return None;
        };
        let last = steps + 1;
        Some(
            (0..=last)
                .map(|i| match i {
                    0 => max_lr,
                    i if i == last => min_lr,
                    i => max_lr * (min_lr / max_lr).powf(i as f64 / last as f64),
                })
                .collect(),
        )
    }

    /// Index into `ladder()` for position `pos` within a period. Each value
    /// dwells `period / len` epochs; the remainder goes to the lowest value.
    fn ladder_index(period: usize, len: usize, pos: usize) -> usize {
        (pos / (period / len)).min(len - 1)
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.total_epochs() {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs()
            )));
        }
        Ok(match self {
            ScheduleSpec::StepDecay {
                initial_lr,
                factor,
                milestones,
                ..
            } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                initial_lr * factor.powi(passed as i32)
            }
            ScheduleSpec::Cyclical { period, .. } => {
                let ladder = self.ladder().unwrap();
                ladder[Self::ladder_index(*period, ladder.len(), epoch % period)]
            }
        })
    }

    /// Every lr the schedule emits, in epoch order.
    pub fn lrs(&self) -> Result<Vec<f64>> {
        (0..self.total_epochs()).map(|e| self.lr_at(e)).collect()
    }

    /// Distinct lr values used over the whole schedule.
    pub fn distinct_lrs(&self) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = Vec::new();
        for lr in self.lrs()? {
            if !out.contains(&lr) {
                out.push(lr);
            }
        }
        Ok(out)
    }

    /// Last epoch of every complete cyclical period.
    pub fn capture_epochs(&self) -> Result<Vec<usize>> {
        self.validate()?;
        match self {
            ScheduleSpec::Cyclical {
                period,
                total_epochs,
                ..
            } => Ok((1..=total_epochs / period).map(|p| p * period - 1).collect()),
            ScheduleSpec::StepDecay { .. } => Err(Error::InvalidArgument(
                "capture points are only defined for cyclical schedules".into(),
            )),
        }
    }

    /// Short stable identifier recorded in checkpoint provenance.
    pub fn id(&self) -> String {
        match self {
            ScheduleSpec::StepDecay {
                initial_lr,
                factor,
                milestones,
                total_epochs,
            } => format!("step:{initial_lr}x{factor}@{milestones:?}/{total_epochs}"),
            ScheduleSpec::Cyclical {
                max_lr,
                min_lr,
                period,
                steps,
                total_epochs,
            } => format!("cyclic:{max_lr}-{min_lr}/c{period}k{steps}/{total_epochs}"),
        }
    }
}

/// `(max(lrs) / 10, min(lrs) / 10)`.
pub fn derive_cycle_bounds(full_precision_lrs: &[f64]) -> Result<(f64, f64)> {
    if full_precision_lrs.is_empty() {
        return Err(Error::InvalidArgument("no full-precision learning rates".into()));
    }
    for &lr in full_precision_lrs {
        positive(lr, "full-precision lr")?;
    }
    let max = full_precision_lrs.iter().copied().fold(f64::MIN, f64::max);
    let min = full_precision_lrs.iter().copied().fold(f64::MAX, f64::min);
    if max <= min {
        return Err(Error::InvalidArgument(
            "cycle bounds need at least two distinct learning rates".into(),
        ));
    }
    Ok((max / 10.0, min / 10.0))
}

/// Monotone fine-tuning program `initial_lr · decay^epoch`.
pub fn finetune_lrs(initial_lr: f64, decay: f64, epochs: usize) -> Result<Vec<f64>> {
    positive(initial_lr, "fine-tune lr")?;
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::InvalidArgument(format!("decay {decay} must be in (0, 1)")));
    }
    Ok((0..epochs).map(|e| initial_lr * decay.powi(e as i32)).collect())
}
