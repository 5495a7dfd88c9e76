//! Performance-event tokens: the model's input/output alphabet.
//!
//! | ids       | event                                   |
//! |-----------|-----------------------------------------|
//! | 0..128    | `NOTE_ON(p)` = p                        |
//! | 128..256  | `NOTE_OFF(p)` = 128 + p                 |
//! | 256..356  | `TIME_SHIFT(k)` = 255 + k, k in 1..=100 |
//! | 356..388  | `VELOCITY(b)` = 356 + b, b in 0..32     |
//!
//! One time-shift unit is a 32nd note (60 ticks at 480 per quarter). Velocity
//! buckets hold four values each and decode to their midpoint `4b + 2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{NoteEvent, Track, TICKS_PER_QUARTER};

pub const VOCAB_SIZE: usize = 388;
pub const MAX_TIME_SHIFT: u8 = 100;
pub const VELOCITY_BUCKETS: u8 = 32;
/// Bucket assumed by the decoder before any `VELOCITY` token.
pub const DEFAULT_VELOCITY_BUCKET: u8 = 16;
/// Time-shift unit at the internal resolution.
pub const GRID_TICKS: u64 = TICKS_PER_QUARTER as u64 / 8;

const NOTE_OFF_BASE: u16 = 128;
const TIME_SHIFT_BASE: u16 = 255;
const VELOCITY_BASE: u16 = 356;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    NoteOn(u8),
    NoteOff(u8),
    /// Advance the clock by 1..=100 grid units.
    TimeShift(u8),
    /// Switch the current velocity bucket, 0..32.
    Velocity(u8),
}

impl Token {
    pub fn id(self) -> u16 {
        match self {
            Token::NoteOn(p) => u16::from(p),
            Token::NoteOff(p) => NOTE_OFF_BASE + u16::from(p),
            Token::TimeShift(k) => TIME_SHIFT_BASE + u16::from(k),
            Token::Velocity(b) => VELOCITY_BASE + u16::from(b),
        }
    }

    pub fn from_id(id: u16) -> Option<Token> {
        match id {
            0..=127 => Some(Token::NoteOn(id as u8)),
            128..=255 => Some(Token::NoteOff((id - NOTE_OFF_BASE) as u8)),
            256..=355 => Some(Token::TimeShift((id - TIME_SHIFT_BASE) as u8)),
            356..=387 => Some(Token::Velocity((id - VELOCITY_BASE) as u8)),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("token id {0} outside the vocabulary of 388")]
    OutOfVocabulary(u16),
    #[error("ticks per quarter {0} is not a multiple of 8")]
    Resolution(u32),
    #[error("tick {tick} is not on the {grid}-tick time-shift grid")]
    OffGrid { tick: u64, grid: u64 },
}

/// Token ids, each below [`VOCAB_SIZE`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u16>", into = "Vec<u16>")]
pub struct TokenSequence(Vec<u16>);

impl TokenSequence {
    pub fn new(ids: Vec<u16>) -> Result<Self, TokenizeError> {
        if let Some(&bad) = ids.iter().find(|&&id| usize::from(id) >= VOCAB_SIZE) {
            return Err(TokenizeError::OutOfVocabulary(bad));
        }
        Ok(Self(ids))
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = Token>) -> Self {
        Self(tokens.into_iter().map(Token::id).collect())
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.0
            .iter()
            .map(|&id| Token::from_id(id).expect("ids validated on construction"))
    }
}

impl TryFrom<Vec<u16>> for TokenSequence {
    type Error = TokenizeError;

    fn try_from(ids: Vec<u16>) -> Result<Self, Self::Error> {
        Self::new(ids)
    }
}

impl From<TokenSequence> for Vec<u16> {
    fn from(seq: TokenSequence) -> Self {
        seq.0
    }
}

fn bucket(velocity: u8) -> u8 {
    velocity.min(127) / 4
}

/// The velocity a note comes back with after a trip through the tokenizer.
pub fn snap_velocity(velocity: u8) -> u8 {
    bucket(velocity) * 4 + 2
}

fn push_shift(out: &mut Vec<u16>, mut units: u64) {
    while units > 0 {
        let step = units.min(u64::from(MAX_TIME_SHIFT));
        out.push(Token::TimeShift(step as u8).id());
        units -= step;
    }
}

/// Encodes a track quantized to the time-shift grid (one 32nd note, i.e.
/// `ticks_per_quarter / 8` ticks). Events at the same instant are ordered
/// note-offs first, then note-ons, each by ascending pitch. A trailing time
/// shift carries the track to its end.
pub fn encode_tokens(track: &Track, ticks_per_quarter: u32) -> Result<TokenSequence, TokenizeError> {
    if ticks_per_quarter == 0 || ticks_per_quarter % 8 != 0 {
        return Err(TokenizeError::Resolution(ticks_per_quarter));
    }
    let grid = u64::from(ticks_per_quarter / 8);
    let on_grid = |tick: u64| {
        if tick % grid == 0 {
            Ok(tick / grid)
        } else {
            Err(TokenizeError::OffGrid { tick, grid })
        }
    };

    // (unit, 0 = off / 1 = on, pitch, velocity)
    let mut events = Vec::with_capacity(track.notes().len() * 2);
    for n in track.notes() {
        events.push((on_grid(n.start)?, 1u8, n.pitch, n.velocity));
        events.push((on_grid(n.end())?, 0u8, n.pitch, 0));
    }
    let end_unit = on_grid(track.end())?;
    events.sort_unstable_by_key(|&(unit, kind, pitch, _)| (unit, kind, pitch));

    let mut out = Vec::with_capacity(events.len() * 2);
    let mut clock = 0u64;
    let mut current_bucket: Option<u8> = None;
    for (unit, kind, pitch, velocity) in events {
        push_shift(&mut out, unit - clock);
        clock = unit;
        if kind == 0 {
            out.push(Token::NoteOff(pitch).id());
        } else {
            let b = bucket(velocity);
            if current_bucket != Some(b) {
                out.push(Token::Velocity(b).id());
                current_bucket = Some(b);
            }
            out.push(Token::NoteOn(pitch).id());
        }
    }
    push_shift(&mut out, end_unit.saturating_sub(clock));
    Ok(TokenSequence(out))
}

/// Decodes any token sequence into a track at 480 ticks per quarter, program
/// 0 on channel 0.
///
/// Decoding never fails: a `NOTE_OFF` for a pitch that is not sounding is
/// skipped, a `NOTE_ON` for a sounding pitch re-strikes it, and notes still
/// open at the end close at the final clock. Every note lasts at least one
/// grid unit.
pub fn decode_tokens(tokens: &TokenSequence) -> Track {
    let mut open: [Option<(u64, u8)>; 128] = [None; 128];
    let mut notes = Vec::new();
    let mut clock = 0u64;
    let mut velocity = snap_velocity(DEFAULT_VELOCITY_BUCKET * 4);

    let close = |notes: &mut Vec<NoteEvent>, pitch: u8, (start, vel): (u64, u8), at: u64| {
        let duration = (at - start).max(GRID_TICKS);
        notes.push(NoteEvent::new(pitch, start, duration, vel));
    };

    for token in tokens.tokens() {
        match token {
            Token::NoteOn(p) => {
                let slot = &mut open[usize::from(p)];
                match *slot {
                    Some((start, _)) if start == clock => {}
                    Some(prev) => {
                        close(&mut notes, p, prev, clock);
                        *slot = Some((clock, velocity));
                    }
                    None => *slot = Some((clock, velocity)),
                }
            }
            Token::NoteOff(p) => {
                if let Some(prev) = open[usize::from(p)].take() {
                    close(&mut notes, p, prev, clock);
                }
            }
            Token::TimeShift(k) => clock += u64::from(k) * GRID_TICKS,
            Token::Velocity(b) => velocity = b * 4 + 2,
        }
    }
    for (pitch, slot) in open.iter().enumerate() {
        if let Some(prev) = *slot {
            close(&mut notes, pitch as u8, prev, clock);
        }
    }
    Track::with_end(0, 0, notes, clock).expect("decoded notes are valid")
}
