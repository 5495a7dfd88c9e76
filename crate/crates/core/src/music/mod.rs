//! Quantized symbolic music: notes, tracks and pieces, plus Standard MIDI File
//! I/O and the event-token encoding consumed by the model.

mod midi;
mod tokens;

pub use midi::{read_midi, read_midi_report, write_midi, MidiError, ReadWarning};
pub use tokens::{
    decode_tokens, encode_tokens, snap_velocity, Token, TokenSequence, TokenizeError,
    DEFAULT_VELOCITY_BUCKET, GRID_TICKS, MAX_TIME_SHIFT, VELOCITY_BUCKETS, VOCAB_SIZE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Resolution of every piece produced inside this crate.
pub const TICKS_PER_QUARTER: u32 = 480;

/// A Standard MIDI File has 16 channels; one track per channel at most.
pub const MAX_TRACKS: usize = 16;

const DEFAULT_MICROS_PER_QUARTER: u32 = 500_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MusicError {
    #[error("pitch {0} outside 0..=127")]
    Pitch(u8),
    #[error("velocity {0} outside 0..=127")]
    Velocity(u8),
    #[error("note at tick {start} has zero duration")]
    ZeroDuration { start: u64 },
    #[error("program {0} outside 0..=127")]
    Program(u8),
    #[error("channel {0} outside 0..=15")]
    Channel(u8),
    #[error("piece holds {0} tracks, at most 16 fit in a MIDI file")]
    Capacity(usize),
    #[error("ticks per quarter must be positive")]
    Resolution,
    #[error("tempo must be positive and finite")]
    Tempo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub start: u64,
    pub duration: u64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, start: u64, duration: u64, velocity: u8) -> Self {
        Self {
            pitch,
            start,
            duration,
            velocity,
        }
    }

    pub fn end(&self) -> u64 {
        self.start + self.duration
    }

    fn validate(&self) -> Result<(), MusicError> {
        if self.pitch > 127 {
            return Err(MusicError::Pitch(self.pitch));
        }
        if self.velocity > 127 {
            return Err(MusicError::Velocity(self.velocity));
        }
        if self.duration == 0 {
            return Err(MusicError::ZeroDuration { start: self.start });
        }
        Ok(())
    }
}

/// One instrument line. Notes are kept sorted by `(start, pitch)`.
///
/// Construction normalizes the note list so that a pitch sounds at most once
/// at any instant: a re-struck pitch cuts the previous note short, and two
/// notes of the same pitch starting together collapse into the longer one.
/// A velocity of 0 (a note-off in MIDI) is lifted to 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    program: u8,
    channel: u8,
    notes: Vec<NoteEvent>,
    end: u64,
}

impl Track {
    pub fn new(program: u8, channel: u8, notes: Vec<NoteEvent>) -> Result<Self, MusicError> {
        Self::with_end(program, channel, notes, 0)
    }

    /// Like [`Track::new`], with the track extended to at least `end` ticks.
    pub fn with_end(
        program: u8,
        channel: u8,
        mut notes: Vec<NoteEvent>,
        end: u64,
    ) -> Result<Self, MusicError> {
        if program > 127 {
            return Err(MusicError::Program(program));
        }
        if channel > 15 {
            return Err(MusicError::Channel(channel));
        }
        for note in &notes {
            note.validate()?;
        }
        for note in &mut notes {
            note.velocity = note.velocity.max(1);
        }
        notes.sort_by(|a, b| {
            (a.start, a.pitch)
                .cmp(&(b.start, b.pitch))
                .then((b.duration, b.velocity).cmp(&(a.duration, a.velocity)))
        });
        notes.dedup_by(|later, earlier| later.start == earlier.start && later.pitch == earlier.pitch);

        let mut last_of_pitch: [Option<usize>; 128] = [None; 128];
        for i in 0..notes.len() {
            let pitch = notes[i].pitch as usize;
            if let Some(prev) = last_of_pitch[pitch] {
                let start = notes[i].start;
                if notes[prev].end() > start {
                    notes[prev].duration = start - notes[prev].start;
                }
            }
            last_of_pitch[pitch] = Some(i);
        }

        let last_end = notes.iter().map(NoteEvent::end).max().unwrap_or(0);
        Ok(Self {
            program,
            channel,
            notes,
            end: end.max(last_end),
        })
    }

    pub fn empty(program: u8, channel: u8) -> Result<Self, MusicError> {
        Self::new(program, channel, Vec::new())
    }

    pub fn program(&self) -> u8 {
        self.program
    }

    pub fn channel(&self) -> u8 {
        self.channel
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    /// Tick at which the track ends; never before the last note ends.
    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn with_instrument(mut self, program: u8, channel: u8) -> Result<Self, MusicError> {
        if program > 127 {
            return Err(MusicError::Program(program));
        }
        if channel > 15 {
            return Err(MusicError::Channel(channel));
        }
        self.program = program;
        self.channel = channel;
        Ok(self)
    }

    /// Cuts or pads the track so that it ends exactly at `end`. Notes starting
    /// at or after `end` are dropped, notes crossing it are shortened.
    pub fn fit_to(&self, end: u64) -> Track {
        let notes = self
            .notes
            .iter()
            .filter(|n| n.start < end)
            .map(|n| NoteEvent {
                duration: n.duration.min(end - n.start),
                ..*n
            })
            .collect();
        Track {
            program: self.program,
            channel: self.channel,
            notes,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    ticks_per_quarter: u32,
    micros_per_quarter: u32,
    tracks: Vec<Track>,
}

impl Piece {
    pub fn new(
        ticks_per_quarter: u32,
        micros_per_quarter: u32,
        tracks: Vec<Track>,
    ) -> Result<Self, MusicError> {
        if ticks_per_quarter == 0 {
            return Err(MusicError::Resolution);
        }
        if micros_per_quarter == 0 || micros_per_quarter > 0xFF_FFFF {
            return Err(MusicError::Tempo);
        }
        if tracks.len() > MAX_TRACKS {
            return Err(MusicError::Capacity(tracks.len()));
        }
        Ok(Self {
            ticks_per_quarter,
            micros_per_quarter,
            tracks,
        })
    }

    /// A piece at the internal resolution with the tempo given in beats per
    /// minute. The tempo is stored the way MIDI stores it, as whole
    /// microseconds per quarter note.
    pub fn with_bpm(tempo_bpm: f64, tracks: Vec<Track>) -> Result<Self, MusicError> {
        Self::new(TICKS_PER_QUARTER, micros_for_bpm(tempo_bpm)?, tracks)
    }

    pub fn ticks_per_quarter(&self) -> u32 {
        self.ticks_per_quarter
    }

    pub fn micros_per_quarter(&self) -> u32 {
        self.micros_per_quarter
    }

    pub fn tempo_bpm(&self) -> f64 {
        60_000_000.0 / f64::from(self.micros_per_quarter)
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn into_tracks(self) -> Vec<Track> {
        self.tracks
    }

    pub fn end(&self) -> u64 {
        self.tracks.iter().map(Track::end).max().unwrap_or(0)
    }
}

impl Default for Piece {
    fn default() -> Self {
        Self {
            ticks_per_quarter: TICKS_PER_QUARTER,
            micros_per_quarter: DEFAULT_MICROS_PER_QUARTER,
            tracks: Vec::new(),
        }
    }
}

pub fn micros_for_bpm(tempo_bpm: f64) -> Result<u32, MusicError> {
    if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
        return Err(MusicError::Tempo);
    }
    let micros = (60_000_000.0 / tempo_bpm).round();
    if !(1.0..=f64::from(0xFF_FFFFu32)).contains(&micros) {
        return Err(MusicError::Tempo);
    }
    Ok(micros as u32)
}

/// Nearest multiple of `grid`, ties rounding up.
fn round_to_grid(value: u64, grid: u64) -> u64 {
    (2 * value + grid) / (2 * grid) * grid
}

/// Snaps every note start and duration to the nearest multiple of `grid`
/// ticks. Durations never fall below one grid unit, and track ends move up to
/// the next grid line. Idempotent.
///
/// # Panics
///
/// If `grid` is zero.
pub fn quantize(piece: &Piece, grid: u64) -> Piece {
    assert!(grid > 0, "quantization grid must be positive");
    let tracks = piece
        .tracks
        .iter()
        .map(|track| {
            let notes = track
                .notes
                .iter()
                .map(|n| NoteEvent {
                    start: round_to_grid(n.start, grid),
                    duration: round_to_grid(n.duration, grid).max(grid),
                    ..*n
                })
                .collect();
            let end = track.end.div_ceil(grid) * grid;
            Track::with_end(track.program, track.channel, notes, end)
                .expect("quantizing keeps notes valid")
        })
        .collect();
    Piece {
        ticks_per_quarter: piece.ticks_per_quarter,
        micros_per_quarter: piece.micros_per_quarter,
        tracks,
    }
}
