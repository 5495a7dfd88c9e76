//! Strategies: which generation parameters apply in which part of the
//! arousal/valence plane, and how many layers sound at a given arousal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{EmotionLabels, EmotionState};

pub const LAYER_COUNT: usize = 4;
/// Shipped strategy table, nine cells.
pub const DEFAULT_CONFIG: &str = include_str!("../config/strategies.toml");

const AROUSAL_AXIS: (f64, f64) = (0.0, 1.0);
const VALENCE_AXIS: (f64, f64) = (-1.0, 1.0);
const GRID_STEPS: usize = 100;

/// `[min, max)`, or `[min, max]` when `max` is the top of the axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn contains(&self, x: f64, axis_max: f64) -> bool {
        x >= self.min && (x < self.max || (self.max >= axis_max && x <= self.max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub name: String,
    pub arousal: Interval,
    pub valence: Interval,
    /// General MIDI program per layer, layer 1 first.
    pub instruments: [u8; LAYER_COUNT],
    pub temperatures: [f64; LAYER_COUNT],
    /// Pass-through tags for whoever plays the music.
    pub effects: Vec<String>,
    pub tempo_bpm: Option<f64>,
}

impl Strategy {
    /// The `isInRange` test.
    pub fn is_in_range(&self, arousal: f64, valence: f64) -> bool {
        self.arousal.contains(arousal, AROUSAL_AXIS.1) && self.valence.contains(valence, VALENCE_AXIS.1)
    }

    /// Instrument and temperature of layer `index` (0-based).
    pub fn get(&self, index: usize) -> Option<(u8, f64)> {
        Some((*self.instruments.get(index)?, self.temperatures[index]))
    }

    fn check(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("empty name".into());
        }
        for (axis, iv, (lo, hi)) in [("arousal", self.arousal, AROUSAL_AXIS), ("valence", self.valence, VALENCE_AXIS)] {
            if !(iv.min.is_finite() && iv.max.is_finite() && lo <= iv.min && iv.min < iv.max && iv.max <= hi) {
                return Err(format!("{axis} range [{}, {}) not inside [{lo}, {hi}]", iv.min, iv.max));
            }
        }
        if let Some(p) = self.instruments.iter().find(|&&p| p > 127) {
            return Err(format!("program {p} above 127"));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(format!("temperature {t} must be positive"));
        }
        if let Some(bpm) = self.tempo_bpm {
            if !(bpm.is_finite() && bpm > 0.0) {
                return Err(format!("tempo {bpm} must be positive"));
            }
        }
        Ok(())
    }
}

/// What [`Registry::validate`] found wrong, at the first offending point.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("registry has no strategies")]
    Empty,
    #[error("strategy {name:?} is invalid: {reason}")]
    InvalidStrategy { name: String, reason: String },
    #[error("strategy name {0:?} appears twice")]
    DuplicateName(String),
    #[error("no strategy covers arousal {arousal}, valence {valence}")]
    Gap { arousal: f64, valence: f64 },
    #[error("strategies {first:?} and {second:?} both cover arousal {arousal}, valence {valence}")]
    Overlap {
        arousal: f64,
        valence: f64,
        first: String,
        second: String,
    },
}

/// Number of layers that sound at `arousal`: `clamp(ceil(4a), 1, 4)`.
pub fn active_layer_count(arousal: f64) -> usize {
    if arousal.is_nan() {
        return 1;
    }
    ((LAYER_COUNT as f64 * arousal).ceil().max(1.0) as usize).min(LAYER_COUNT)
}

/// Ordered strategies. A registry obtained from [`Registry::new`],
/// [`Registry::register`] or [`load_config`] has passed validation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registry {
    strategies: Vec<Strategy>,
}

fn sample_axis(lo: f64, hi: f64, cuts: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut edges: Vec<f64> = cuts.chain([lo, hi]).filter(|x| (lo..=hi).contains(x)).collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let mut points = edges.clone();
    points.extend(edges.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    points.extend((0..=GRID_STEPS).map(|i| lo + (hi - lo) * i as f64 / GRID_STEPS as f64));
    points
}

impl Registry {
    pub fn new(strategies: Vec<Strategy>) -> Result<Self, Violation> {
        let registry = Self { strategies };
        registry.validate()?;
        Ok(registry)
    }

    /// Checks each strategy, then probes every rectangle corner, the
    /// midpoints between consecutive edges and a 101×101 grid for gaps and
    /// overlaps.
    pub fn validate(&self) -> Result<(), Violation> {
        if self.strategies.is_empty() {
            return Err(Violation::Empty);
        }
        for (i, s) in self.strategies.iter().enumerate() {
            s.check().map_err(|reason| Violation::InvalidStrategy {
                name: s.name.clone(),
                reason,
            })?;
            if self.strategies[..i].iter().any(|o| o.name == s.name) {
                return Err(Violation::DuplicateName(s.name.clone()));
            }
        }
        let arousal = sample_axis(
            AROUSAL_AXIS.0,
            AROUSAL_AXIS.1,
            self.strategies.iter().flat_map(|s| [s.arousal.min, s.arousal.max]),
        );
        let valence = sample_axis(
            VALENCE_AXIS.0,
            VALENCE_AXIS.1,
            self.strategies.iter().flat_map(|s| [s.valence.min, s.valence.max]),
        );
        for &a in &arousal {
            for &v in &valence {
                let mut hits = self.strategies.iter().filter(|s| s.is_in_range(a, v));
                match (hits.next(), hits.next()) {
                    (None, _) => return Err(Violation::Gap { arousal: a, valence: v }),
                    (Some(first), Some(second)) => {
                        return Err(Violation::Overlap {
                            arousal: a,
                            valence: v,
                            first: first.name.clone(),
                            second: second.name.clone(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Strategy> {
        self.strategies.iter().find(|s| s.name == name)
    }

    /// The strategy covering the point, if any.
    pub fn lookup_point(&self, arousal: f64, valence: f64) -> Option<&Strategy> {
        self.strategies.iter().find(|s| s.is_in_range(arousal, valence))
    }

    /// The strategy covering `state`. Every in-range state has one in a
    /// validated registry.
    pub fn lookup(&self, state: &EmotionState) -> Option<&Strategy> {
        self.lookup_point(state.arousal(), state.valence())
    }

    /// Appends `strategy` and revalidates. On failure the registry comes
    /// back unchanged alongside the reason.
    pub fn register(self, strategy: Strategy) -> Result<Registry, (Registry, Violation)> {
        let mut candidate = self.clone();
        candidate.strategies.push(strategy);
        match candidate.validate() {
            Ok(()) => Ok(candidate),
            Err(v) => Err((self, v)),
        }
    }

    /// Drops the named strategy. The result usually leaves a hole and is not
    /// validated; refill it with [`Registry::register`].
    pub fn remove(mut self, name: &str) -> (Registry, Option<Strategy>) {
        let removed = self
            .strategies
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.strategies.remove(i));
        (self, removed)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("strategy config: {0}")]
    Parse(String),
    #[error("strategy config: bad bound {0:?}")]
    Bound(String),
    #[error(transparent)]
    Labels(#[from] crate::emotion::EmotionError),
    #[error(transparent)]
    Invalid(#[from] Violation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Bound {
    Number(f64),
    Text(String),
}

impl Bound {
    fn value(&self) -> Result<f64, ConfigError> {
        let text = match self {
            Bound::Number(x) => return Ok(*x),
            Bound::Text(t) => t.trim(),
        };
        let bad = || ConfigError::Bound(text.to_string());
        match text.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n.trim().parse().map_err(|_| bad())?;
                let d: f64 = d.trim().parse().map_err(|_| bad())?;
                if d == 0.0 {
                    return Err(bad());
                }
                Ok(n / d)
            }
            None => text.parse().map_err(|_| bad()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyRecord {
    name: String,
    arousal: [Bound; 2],
    valence: [Bound; 2],
    instruments: [u8; LAYER_COUNT],
    temperatures: [f64; LAYER_COUNT],
    #[serde(default)]
    effects: Vec<String>,
    tempo_bpm: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    labels: EmotionLabels,
    #[serde(default)]
    strategy: Vec<StrategyRecord>,
}

/// Labels plus the validated registry, as read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub labels: EmotionLabels,
    pub registry: Registry,
}

impl StrategyConfig {
    /// Label of the cell `state` falls in.
    pub fn emotion_label(&self, state: &EmotionState) -> &str {
        self.labels.quantize(state)
    }
}

/// Parses a TOML strategy table. Bounds may be numbers or `"a/b"` fractions
/// so that thirds are exact.
pub fn load_config(text: &str) -> Result<StrategyConfig, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    file.labels.validate()?;
    let strategies = file
        .strategy
        .into_iter()
        .map(|r| {
            Ok(Strategy {
                name: r.name,
                arousal: Interval::new(r.arousal[0].value()?, r.arousal[1].value()?),
                valence: Interval::new(r.valence[0].value()?, r.valence[1].value()?),
                instruments: r.instruments,
                temperatures: r.temperatures,
                effects: r.effects,
                tempo_bpm: r.tempo_bpm,
            })
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    Ok(StrategyConfig {
        labels: file.labels,
        registry: Registry::new(strategies)?,
    })
}

pub fn default_config() -> StrategyConfig {
    load_config(DEFAULT_CONFIG).expect("shipped strategy table is valid")
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.3}, {:.3})", self.min, self.max)
    }
}
