//! Scripted game client. A scenario is a timeline of wire records, one JSON
//! object per line, each with two extra fields: `at` (seconds from the start)
//! and `label`. Lines starting with `#` and blank lines are ignored.
//!
//! ```text
//! {"at": 0,  "label": "ordinary_world", "type": "game_event", "name": "village", "arousal_target": 0.15, "valence_target": 0.6, "weight": 0.8}
//! {"at": 2,  "label": "ordinary_world_music", "type": "music_request"}
//! ```
//!
//! `session` may be left out; the emulator fills in its own.

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::Value;
use thiserror::Error;
use tracing::{info, warn};

use crate::server::WireMessage;

pub const HERO_JOURNEY: &str = include_str!("../scenarios/hero_journey.jsonl");
pub const DEFAULT_SESSION: &str = "emulator";

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub at_seconds: f64,
    pub label: String,
    pub line: usize,
    /// A `game_event` or `music_request`.
    pub message: WireMessage,
}

impl Step {
    pub fn is_request(&self) -> bool {
        matches!(self.message, WireMessage::MusicRequest(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn requests(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.is_request())
    }

    pub fn hero_journey() -> Self {
        parse_scenario("hero_journey", HERO_JOURNEY).expect("shipped scenario parses")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("scenario has no steps")]
    Empty,
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("line {line}: step {label:?} at {at}s comes before the previous step at {previous}s")]
    OutOfOrder {
        line: usize,
        label: String,
        at: f64,
        previous: f64,
    },
}

fn line_error(line: usize, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Line {
        line,
        reason: reason.into(),
    }
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label.len() <= 64
        && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn parse_scenario(name: &str, text: &str) -> Result<Scenario, ScenarioError> {
    let mut steps: Vec<Step> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut value: Value = serde_json::from_str(trimmed).map_err(|e| line_error(line, e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| line_error(line, "expected a JSON object"))?;
        let at = obj
            .remove("at")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| line_error(line, "missing numeric \"at\""))?;
        if !(at.is_finite() && at >= 0.0) {
            return Err(line_error(line, "\"at\" must be a non-negative number"));
        }
        let label = match obj.remove("label") {
            Some(Value::String(s)) => s,
            _ => return Err(line_error(line, "missing string \"label\"")),
        };
        if !valid_label(&label) {
            return Err(line_error(line, format!("label {label:?} must be 1-64 of [A-Za-z0-9_-]")));
        }
        match obj.get("type").and_then(Value::as_str) {
            Some("game_event" | "music_request") => {}
            Some(other) => return Err(line_error(line, format!("unknown step kind {other:?}"))),
            None => return Err(line_error(line, "missing \"type\"")),
        }
        obj.entry("session").or_insert_with(|| Value::String(DEFAULT_SESSION.into()));
        let message: WireMessage = serde_json::from_value(value).map_err(|e| line_error(line, e.to_string()))?;

        if let Some(prev) = steps.last() {
            if at < prev.at_seconds {
                return Err(ScenarioError::OutOfOrder {
                    line,
                    label,
                    at,
                    previous: prev.at_seconds,
                });
            }
        }
        let step = Step {
            at_seconds: at,
            label,
            line,
            message,
        };
        if step.is_request() && steps.iter().any(|s| s.is_request() && s.label == step.label) {
            return Err(line_error(line, format!("duplicate request label {:?}", step.label)));
        }
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(ScenarioError::Empty);
    }
    Ok(Scenario {
        name: name.to_string(),
        steps,
    })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
    parse_scenario(&name, &text)
}

/// One music request and what came back.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptRow {
    pub label: String,
    pub strategy: String,
    pub emotion_label: String,
    pub arousal: f64,
    pub valence: f64,
    pub active_layers: usize,
    pub piece_id: String,
    pub latency_ms: f64,
    /// Set when the server answered with an error record.
    pub error: Option<String>,
    pub midi_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub rows: Vec<TranscriptRow>,
    /// Game events the server rejected, by label.
    pub event_errors: Vec<(String, String)>,
}

pub const TRANSCRIPT_HEADER: &str =
    "label\tstrategy\temotion_label\tarousal\tvalence\tactive_layers\tpiece_id\tlatency_ms\terror";

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{TRANSCRIPT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{:.1}\t{}",
                r.label,
                r.strategy,
                r.emotion_label,
                r.arousal,
                r.valence,
                r.active_layers,
                r.piece_id,
                r.latency_ms,
                r.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " ")
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
#[error("{source} (after {} transcript rows)", transcript.rows.len())]
pub struct RunError {
    pub transcript: Transcript,
    #[source]
    pub source: io::Error,
}

fn exchange(
    reader: &mut BufReader<TcpStream>,
    writer: &mut TcpStream,
    message: &WireMessage,
) -> io::Result<WireMessage> {
    writer.write_all(format!("{}\n", message.to_line()).as_bytes())?;
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"));
    }
    WireMessage::from_line(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Replays `scenario` against the server at `addr`, step `k` no earlier than
/// `at_k * time_scale` seconds after the start. Game events carry `at` as
/// their timestamp, so the emotion trajectory does not depend on the scale.
/// Each received piece is written to `out_dir/<label>.mid`, and the
/// transcript to `out_dir/transcript.tsv`.
pub fn run(scenario: &Scenario, addr: &str, out_dir: &Path, time_scale: f64) -> Result<Transcript, RunError> {
    let mut transcript = Transcript::default();
    let fail = |transcript: Transcript, source: io::Error| RunError { transcript, source };
    if !(time_scale.is_finite() && time_scale >= 0.0) {
        return Err(fail(
            transcript,
            io::Error::new(io::ErrorKind::InvalidInput, "time scale must be a non-negative number"),
        ));
    }
    if let Err(e) = fs::create_dir_all(out_dir) {
        return Err(fail(transcript, e));
    }
    let stream = match TcpStream::connect(addr) {
        Ok(s) => s,
        Err(e) => return Err(fail(transcript, e)),
    };
    let _ = stream.set_nodelay(true);
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(e) => return Err(fail(transcript, e)),
    };
    let mut reader = BufReader::new(stream);
    let start = Instant::now();
    info!(scenario = %scenario.name, steps = scenario.steps.len(), addr, "replaying");

    for step in &scenario.steps {
        let due = Duration::from_secs_f64(step.at_seconds * time_scale);
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            thread::sleep(wait);
        }
        let mut message = step.message.clone();
        if let WireMessage::GameEvent(e) = &mut message {
            e.timestamp.get_or_insert(step.at_seconds);
        }
        let sent = Instant::now();
        let reply = match exchange(&mut reader, &mut writer, &message) {
            Ok(r) => r,
            Err(e) => return Err(fail(transcript, e)),
        };
        let latency_ms = sent.elapsed().as_secs_f64() * 1000.0;

        match (&message, reply) {
            (WireMessage::GameEvent(_), WireMessage::Error(e)) => {
                warn!(label = %step.label, detail = %e.detail, "event rejected");
                transcript.event_errors.push((step.label.clone(), e.detail));
            }
            (WireMessage::GameEvent(_), _) => {}
            (_, WireMessage::MusicResponse(r)) => {
                let path = out_dir.join(format!("{}.mid", step.label));
                let written = base64::engine::general_purpose::STANDARD
                    .decode(&r.midi_payload)
                    .map_err(|e| e.to_string())
                    .and_then(|bytes| fs::write(&path, bytes).map_err(|e| e.to_string()));
                let error = written.as_ref().err().cloned();
                transcript.rows.push(TranscriptRow {
                    label: step.label.clone(),
                    strategy: r.strategy,
                    emotion_label: r.emotion_label,
                    arousal: r.arousal,
                    valence: r.valence,
                    active_layers: r.active_layers,
                    piece_id: r.piece_id,
                    latency_ms,
                    error,
                    midi_path: written.ok().map(|_| path),
                });
            }
            (_, other) => {
                let detail = match other {
                    WireMessage::Error(e) => format!("{:?}: {}", e.code, e.detail),
                    other => format!("unexpected reply {}", other.to_line()),
                };
                warn!(label = %step.label, %detail, "request failed");
                transcript.rows.push(TranscriptRow {
                    label: step.label.clone(),
                    strategy: String::new(),
                    emotion_label: String::new(),
                    arousal: f64::NAN,
                    valence: f64::NAN,
                    active_layers: 0,
                    piece_id: String::new(),
                    latency_ms,
                    error: Some(detail),
                    midi_path: None,
                });
            }
        }
    }
    if let Err(e) = fs::write(out_dir.join("transcript.tsv"), transcript.to_string()) {
        return Err(fail(transcript, e));
    }
    Ok(transcript)
}
