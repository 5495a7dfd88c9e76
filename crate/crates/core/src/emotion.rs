//! Per-session arousal/valence state and its 3×3 quantization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NEUTRAL_AROUSAL: f64 = 1.0 / 3.0;
pub const NEUTRAL_VALENCE: f64 = 0.0;
/// Time constant of the relaxation toward neutral.
pub const DECAY_TAU_SECONDS: f64 = 60.0;

const THIRD: f64 = 1.0 / 3.0;
const TWO_THIRDS: f64 = 2.0 / 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmotionError {
    #[error("event weight {0} outside (0, 1]")]
    Weight(f64),
    #[error("emotion labels: {0}")]
    Labels(String),
}

fn clamp_or(x: f64, lo: f64, hi: f64, fallback: f64) -> f64 {
    if x.is_nan() {
        fallback
    } else {
        x.clamp(lo, hi)
    }
}

pub fn clamp_arousal(a: f64) -> f64 {
    clamp_or(a, 0.0, 1.0, NEUTRAL_AROUSAL)
}

pub fn clamp_valence(v: f64) -> f64 {
    clamp_or(v, -1.0, 1.0, NEUTRAL_VALENCE)
}

/// A point in arousal × valence with the time it was last touched, in
/// seconds on whatever clock the caller uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionState {
    arousal: f64,
    valence: f64,
    updated_at: f64,
}

impl EmotionState {
    /// Out-of-range values are clamped; NaN falls back to neutral.
    pub fn new(arousal: f64, valence: f64, updated_at: f64) -> Self {
        Self {
            arousal: clamp_arousal(arousal),
            valence: clamp_valence(valence),
            updated_at,
        }
    }

    pub fn neutral(updated_at: f64) -> Self {
        Self::new(NEUTRAL_AROUSAL, NEUTRAL_VALENCE, updated_at)
    }

    pub fn arousal(&self) -> f64 {
        self.arousal
    }

    pub fn valence(&self) -> f64 {
        self.valence
    }

    pub fn updated_at(&self) -> f64 {
        self.updated_at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEvent {
    pub name: String,
    pub arousal_target: f64,
    pub valence_target: f64,
    pub weight: f64,
    /// Game clock in seconds; `None` means "now" to whoever applies it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl GameEvent {
    pub fn new(name: impl Into<String>, arousal_target: f64, valence_target: f64, weight: f64) -> Result<Self, EmotionError> {
        let event = Self {
            name: name.into(),
            arousal_target,
            valence_target,
            weight,
            timestamp: None,
        };
        event.check()?;
        Ok(event)
    }

    pub fn at(mut self, timestamp: f64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn check(&self) -> Result<(), EmotionError> {
        if self.weight > 0.0 && self.weight <= 1.0 {
            Ok(())
        } else {
            Err(EmotionError::Weight(self.weight))
        }
    }

    /// True when either target lies outside its axis and will be clamped.
    pub fn targets_out_of_range(&self) -> bool {
        !(0.0..=1.0).contains(&self.arousal_target) || !(-1.0..=1.0).contains(&self.valence_target)
    }
}

/// `x' = (1 - w)·x + w·target` on both axes, targets clamped first. The
/// update time becomes the event's timestamp when it has one.
pub fn update(state: &EmotionState, event: &GameEvent) -> EmotionState {
    let w = event.weight.clamp(0.0, 1.0);
    let pull = |x: f64, target: f64| (1.0 - w) * x + w * target;
    EmotionState::new(
        pull(state.arousal, clamp_arousal(event.arousal_target)),
        pull(state.valence, clamp_valence(event.valence_target)),
        event.timestamp.unwrap_or(state.updated_at),
    )
}

/// Relaxes both axes toward neutral: `x' = n + (x - n)·exp(-dt/τ)`. Negative
/// `dt` counts as zero.
pub fn decay(state: &EmotionState, dt_seconds: f64) -> EmotionState {
    let k = (-dt_seconds.max(0.0) / DECAY_TAU_SECONDS).exp();
    EmotionState::new(
        NEUTRAL_AROUSAL + (state.arousal - NEUTRAL_AROUSAL) * k,
        NEUTRAL_VALENCE + (state.valence - NEUTRAL_VALENCE) * k,
        state.updated_at + dt_seconds.max(0.0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArousalLevel {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValenceBand {
    Negative,
    Neutral,
    Positive,
}

/// One of the nine grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub arousal: ArousalLevel,
    pub valence: ValenceBand,
}

impl Cell {
    pub const ALL: [Cell; 9] = {
        use ArousalLevel::*;
        use ValenceBand::*;
        [
            Cell { arousal: Low, valence: Negative },
            Cell { arousal: Low, valence: Neutral },
            Cell { arousal: Low, valence: Positive },
            Cell { arousal: Mid, valence: Negative },
            Cell { arousal: Mid, valence: Neutral },
            Cell { arousal: Mid, valence: Positive },
            Cell { arousal: High, valence: Negative },
            Cell { arousal: High, valence: Neutral },
            Cell { arousal: High, valence: Positive },
        ]
    };

    /// Thirds on each axis, lower edges closed; the top third also keeps the
    /// axis maximum.
    pub fn of(arousal: f64, valence: f64) -> Cell {
        let arousal = clamp_arousal(arousal);
        let valence = clamp_valence(valence);
        let a = if arousal < THIRD {
            ArousalLevel::Low
        } else if arousal < TWO_THIRDS {
            ArousalLevel::Mid
        } else {
            ArousalLevel::High
        };
        let v = if valence < -THIRD {
            ValenceBand::Negative
        } else if valence < THIRD {
            ValenceBand::Neutral
        } else {
            ValenceBand::Positive
        };
        Cell { arousal: a, valence: v }
    }
}

/// Names of the nine cells, rows by arousal level and columns negative,
/// neutral, positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabels {
    pub high: [String; 3],
    pub mid: [String; 3],
    pub low: [String; 3],
}

impl Default for EmotionLabels {
    fn default() -> Self {
        let row = |a: &str, b: &str, c: &str| [a.to_string(), b.to_string(), c.to_string()];
        Self {
            high: row("angry", "tense", "excited"),
            mid: row("annoyed", "neutral", "happy"),
            low: row("sad", "calm", "relaxed"),
        }
    }
}

impl EmotionLabels {
    pub fn validate(&self) -> Result<(), EmotionError> {
        let all: Vec<&String> = self.high.iter().chain(&self.mid).chain(&self.low).collect();
        if let Some(blank) = all.iter().find(|n| n.trim().is_empty()) {
            return Err(EmotionError::Labels(format!("blank label {blank:?}")));
        }
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(EmotionError::Labels(format!("label {a:?} used twice")));
            }
        }
        Ok(())
    }

    pub fn name(&self, cell: Cell) -> &str {
        let row = match cell.arousal {
            ArousalLevel::High => &self.high,
            ArousalLevel::Mid => &self.mid,
            ArousalLevel::Low => &self.low,
        };
        let col = match cell.valence {
            ValenceBand::Negative => 0,
            ValenceBand::Neutral => 1,
            ValenceBand::Positive => 2,
        };
        &row[col]
    }

    pub fn cell_named(&self, name: &str) -> Option<Cell> {
        Cell::ALL.into_iter().find(|&c| self.name(c) == name)
    }

    /// Label of the cell holding `state`.
    pub fn quantize(&self, state: &EmotionState) -> &str {
        self.name(Cell::of(state.arousal, state.valence))
    }
}
