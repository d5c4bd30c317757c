//! Per-epoch learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One interval `[start, end)` of a piecewise schedule. The rate ramps
/// linearly from `from` (at `start`) towards `to` (reached at `end`); a
/// constant segment has `from == to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u32,
    pub end: u32,
    pub from: f64,
    pub to: f64,
}

impl Segment {
    pub fn constant(start: u32, end: u32, rate: f64) -> Self {
        Self {
            start,
            end,
            from: rate,
            to: rate,
        }
    }

    fn rate(&self, epoch: u32) -> f64 {
        let frac = f64::from(epoch - self.start) / f64::from(self.end - self.start);
        self.from + (self.to - self.from) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant { rate: f64 },
    Piecewise { segments: Vec<Segment> },
}

/// Learning-rate schedule over `total_epochs` epochs plus a cursor.
///
/// [`LrSchedule::rate_at`] is a pure function of the definition; the cursor
/// only decides which epoch [`LrSchedule::current`] reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub total_epochs: u32,
    #[serde(default)]
    pub position: u32,
}

impl LrSchedule {
    pub fn constant(rate: f64, total_epochs: u32) -> Self {
        Self {
            kind: ScheduleKind::Constant { rate },
            total_epochs,
            position: 0,
        }
    }

    /// Segments must tile `[0, total_epochs)` without gaps.
    pub fn piecewise(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next || s.end <= s.start {
                return Err(Error::Config(format!(
                    "schedule segment [{}, {}) does not continue from epoch {next}",
                    s.start, s.end
                )));
            }
            next = s.end;
        }
        if next == 0 {
            return Err(Error::Config("empty piecewise schedule".into()));
        }
        Ok(Self {
            kind: ScheduleKind::Piecewise { segments },
            total_epochs: next,
            position: 0,
        })
    }

    pub fn rate_at(&self, epoch: u32) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Usage(format!(
                "epoch {epoch} outside schedule [0, {})",
                self.total_epochs
            )));
        }
        Ok(match &self.kind {
            ScheduleKind::Constant { rate } => *rate,
            ScheduleKind::Piecewise { segments } => segments
                .iter()
                .find(|s| epoch >= s.start && epoch < s.end)
                .map(|s| s.rate(epoch))
                .ok_or_else(|| Error::Usage(format!("no segment covers epoch {epoch}")))?,
        })
    }

    pub fn current(&self) -> Result<f64> {
        self.rate_at(self.position)
    }

    pub fn advance(&mut self) {
        self.position += 1;
    }

    pub fn rewind_to(&mut self, epoch: u32) {
        self.position = epoch;
    }
}
