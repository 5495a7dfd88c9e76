//! Newline-delimited JSON records, one object per line, tagged by `"type"`.

use serde::{Deserialize, Serialize};

use crate::emotion::GameEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    GenerationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEventMessage {
    pub session: String,
    pub name: String,
    pub arousal_target: f64,
    pub valence_target: f64,
    pub weight: f64,
    /// Game clock in seconds. Without it the server's own clock is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl GameEventMessage {
    pub fn event(&self) -> GameEvent {
        GameEvent {
            name: self.name.clone(),
            arousal_target: self.arousal_target,
            valence_target: self.valence_target,
            weight: self.weight,
            timestamp: self.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicRequest {
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicResponse {
    pub strategy: String,
    pub emotion_label: String,
    pub arousal: f64,
    pub valence: f64,
    pub active_layers: usize,
    pub tempo_bpm: f64,
    pub piece_id: String,
    /// Standard MIDI File, base64.
    pub midi_payload: String,
}

/// Reply to a game event: the session's state after applying it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session: String,
    pub arousal: f64,
    pub valence: f64,
    pub emotion_label: String,
    /// Set when a target was outside its axis and got clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    GameEvent(GameEventMessage),
    MusicRequest(MusicRequest),
    MusicResponse(MusicResponse),
    Ack(Ack),
    Error(ErrorMessage),
}

impl WireMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        WireMessage::Error(ErrorMessage {
            code,
            detail: detail.into(),
        })
    }

    /// One line of JSON without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        serde_json::from_str(line.trim()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_carry_a_type_tag() {
        let line = WireMessage::MusicRequest(MusicRequest { session: "p1".into() }).to_line();
        assert_eq!(line, r#"{"type":"music_request","session":"p1"}"#);
        let err = WireMessage::error(ErrorCode::BadRequest, "nope").to_line();
        assert_eq!(err, r#"{"type":"error","code":"bad_request","detail":"nope"}"#);
    }

    #[test]
    fn game_event_parses_with_and_without_timestamp() {
        let m = WireMessage::from_line(
            r#"{"type":"game_event","session":"s","name":"boss","arousal_target":1,"valence_target":-1,"weight":0.5}"#,
        )
        .unwrap();
        let WireMessage::GameEvent(e) = m else { panic!("wrong variant") };
        assert_eq!(e.timestamp, None);
        assert_eq!(e.weight, 0.5);
        let m = WireMessage::from_line(
            r#"{"type":"game_event","session":"s","name":"boss","arousal_target":1,"valence_target":-1,"weight":0.5,"timestamp":3.5}"#,
        )
        .unwrap();
        assert!(matches!(m, WireMessage::GameEvent(GameEventMessage { timestamp: Some(t), .. }) if t == 3.5));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(WireMessage::from_line("{").is_err());
        assert!(WireMessage::from_line(r#"{"type":"dance"}"#).is_err());
        assert!(WireMessage::from_line(r#"{"type":"music_request"}"#).is_err());
    }
}
