//! Standard MIDI File reading (formats 0 and 1) and writing (format 1).

use std::collections::HashMap;

use thiserror::Error;
use tracing::warn;

use super::{MusicError, NoteEvent, Piece, Track, DEFAULT_MICROS_PER_QUARTER, TICKS_PER_QUARTER};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI file at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI file: {0}")]
    Unsupported(String),
    #[error("piece holds {0} tracks, at most 16 fit in a MIDI file")]
    Capacity(usize),
    #[error(transparent)]
    Music(#[from] MusicError),
}

/// Something questionable that reading recovered from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadWarning {
    /// A note-on never saw its note-off; the note was closed at the end of
    /// its track.
    UnclosedNote { chunk: usize, channel: u8, pitch: u8, start: u64 },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn malformed(&self, reason: impl Into<String>) -> MidiError {
        MidiError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed(format!(
                "needed {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Result<u8, MidiError> {
        self.bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.malformed("unexpected end of data"))
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let byte = self.u8()?;
            value = (value << 7) | u32::from(byte & 0x7F);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Malformed {
            offset: start,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

#[derive(Default)]
struct ChannelNotes {
    program: Option<u8>,
    notes: Vec<NoteEvent>,
    open: HashMap<u8, (u64, u8)>,
}

struct ChunkEvents {
    channels: Vec<(u8, ChannelNotes)>,
    first_channel: Option<u8>,
    end_tick: u64,
}

impl ChunkEvents {
    fn channel(&mut self, channel: u8) -> &mut ChannelNotes {
        if let Some(i) = self.channels.iter().position(|(c, _)| *c == channel) {
            &mut self.channels[i].1
        } else {
            self.channels.push((channel, ChannelNotes::default()));
            &mut self.channels.last_mut().expect("just pushed").1
        }
    }

    fn has_notes(&self) -> bool {
        self.channels.iter().any(|(_, c)| !c.notes.is_empty())
    }
}

fn rescale(tick: u64, division: u64) -> u64 {
    let target = u64::from(TICKS_PER_QUARTER);
    if division == target {
        tick
    } else {
        (tick * target * 2 + division) / (division * 2)
    }
}

fn close_note(notes: &mut Vec<NoteEvent>, pitch: u8, start: u64, velocity: u8, end: u64) {
    notes.push(NoteEvent::new(pitch, start, end.saturating_sub(start).max(1), velocity));
}

fn parse_chunk(
    cur: &mut Cursor<'_>,
    len: usize,
    chunk: usize,
    division: u64,
    tempo: &mut Option<u32>,
    warnings: &mut Vec<ReadWarning>,
) -> Result<ChunkEvents, MidiError> {
    let end_pos = cur.pos + len;
    let mut events = ChunkEvents {
        channels: Vec::new(),
        first_channel: None,
        end_tick: 0,
    };
    let mut tick = 0u64;
    let mut running: Option<u8> = None;

    while cur.pos < end_pos {
        tick += u64::from(cur.vlq()?);
        let status = if cur.peek()? & 0x80 != 0 {
            cur.u8()?
        } else {
            running.ok_or_else(|| cur.malformed("data byte without running status"))?
        };
        match status {
            0xFF => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let data = cur.take(len)?;
                match kind {
                    0x51 if len == 3 && tempo.is_none() => {
                        let micros = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if micros > 0 {
                            *tempo = Some(micros);
                        }
                    }
                    0x2F => break,
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let kind = status & 0xF0;
                let channel = status & 0x0F;
                let data1 = cur.u8()?;
                let data2 = if kind == 0xC0 || kind == 0xD0 {
                    0
                } else {
                    cur.u8()?
                };
                if data1 > 127 || data2 > 127 {
                    return Err(cur.malformed("data byte above 127"));
                }
                events.first_channel.get_or_insert(channel);
                let at = rescale(tick, division);
                match kind {
                    0x90 if data2 > 0 => {
                        let notes = events.channel(channel);
                        if let Some((start, velocity)) = notes.open.remove(&data1) {
                            if at > start {
                                close_note(&mut notes.notes, data1, start, velocity, at);
                            }
                        }
                        notes.open.insert(data1, (at, data2));
                    }
                    0x80 | 0x90 => {
                        let notes = events.channel(channel);
                        if let Some((start, velocity)) = notes.open.remove(&data1) {
                            close_note(&mut notes.notes, data1, start, velocity, at);
                        }
                    }
                    0xC0 => {
                        events.channel(channel).program.get_or_insert(data1);
                    }
                    _ => {}
                }
            }
            _ => return Err(cur.malformed(format!("invalid status byte {status:#04x}"))),
        }
    }
    if cur.pos > end_pos {
        return Err(cur.malformed("event runs past the end of its chunk"));
    }
    cur.pos = end_pos;

    let end_tick = rescale(tick, division);
    for (channel, notes) in &mut events.channels {
        let mut open: Vec<_> = notes.open.drain().collect();
        open.sort_unstable();
        for (pitch, (start, velocity)) in open {
            warnings.push(ReadWarning::UnclosedNote {
                chunk,
                channel: *channel,
                pitch,
                start,
            });
            close_note(&mut notes.notes, pitch, start, velocity, end_tick);
        }
    }
    events.end_tick = end_tick;
    Ok(events)
}

/// Reads a format 0 or format 1 file. Warnings are logged and dropped; use
/// [`read_midi_report`] to see them.
pub fn read_midi(bytes: &[u8]) -> Result<Piece, MidiError> {
    let (piece, warnings) = read_midi_report(bytes)?;
    for w in &warnings {
        warn!(?w, "recovered while reading MIDI");
    }
    Ok(piece)
}

/// Reads a format 0 or format 1 file into a piece at 480 ticks per quarter.
///
/// Each track chunk yields one track per MIDI channel it uses (in order of
/// first use), or a single empty track if it holds no notes. In format 1 the
/// first chunk is the conductor track and is skipped when it has no notes.
/// Tempo comes from the first set-tempo event, 120 BPM when there is none.
pub fn read_midi_report(bytes: &[u8]) -> Result<(Piece, Vec<ReadWarning>), MidiError> {
    if bytes.get(..4) != Some(b"MThd".as_slice()) {
        return Err(MidiError::Malformed {
            offset: 0,
            reason: "missing MThd header".into(),
        });
    }
    let mut cur = Cursor::new(bytes);
    cur.pos = 4;
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(cur.malformed(format!("header length {header_len} below 6")));
    }
    let header_start = cur.pos;
    let format = cur.u16()?;
    let declared_tracks = cur.u16()?;
    let division = cur.u16()?;
    cur.take(header_len - (cur.pos - header_start))?;
    if format > 1 {
        return Err(MidiError::Unsupported(format!("format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::Malformed {
            offset: 12,
            reason: "division of zero ticks per quarter".into(),
        });
    }

    let mut tempo = None;
    let mut warnings = Vec::new();
    let mut tracks = Vec::new();
    let mut chunk = 0usize;
    while !cur.at_end() && chunk < usize::from(declared_tracks) {
        let chunk_start = cur.pos;
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        if id != b"MTrk" {
            cur.take(len)?;
            continue;
        }
        if cur.bytes.len() - cur.pos < len {
            return Err(MidiError::Malformed {
                offset: chunk_start,
                reason: format!("track chunk declares {len} bytes, file is shorter"),
            });
        }
        let events = parse_chunk(
            &mut cur,
            len,
            chunk,
            u64::from(division),
            &mut tempo,
            &mut warnings,
        )?;
        let conductor = format == 1 && chunk == 0 && !events.has_notes();
        if !conductor {
            if events.has_notes() {
                for (channel, notes) in events.channels {
                    if notes.notes.is_empty() {
                        continue;
                    }
                    tracks.push(Track::with_end(
                        notes.program.unwrap_or(0),
                        channel,
                        notes.notes,
                        events.end_tick,
                    )?);
                }
            } else {
                let channel = events.first_channel.unwrap_or(0);
                let program = events
                    .channels
                    .iter()
                    .find_map(|(_, c)| c.program)
                    .unwrap_or(0);
                tracks.push(Track::with_end(program, channel, Vec::new(), events.end_tick)?);
            }
        }
        chunk += 1;
    }
    if chunk < usize::from(declared_tracks) {
        return Err(cur.malformed(format!(
            "header declares {declared_tracks} track chunks, found {chunk}"
        )));
    }
    if tracks.len() > super::MAX_TRACKS {
        return Err(MidiError::Capacity(tracks.len()));
    }
    let piece = Piece::new(
        TICKS_PER_QUARTER,
        tempo.unwrap_or(DEFAULT_MICROS_PER_QUARTER),
        tracks,
    )?;
    Ok((piece, warnings))
}

fn push_vlq(out: &mut Vec<u8>, mut value: u64) {
    let mut stack = [0u8; 10];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7F) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

fn push_chunk(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

fn track_body(track: &Track) -> Vec<u8> {
    let ch = track.channel();
    // (tick, note-offs before note-ons, pitch)
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(track.notes().len() * 2);
    for n in track.notes() {
        events.push((n.start, 1, n.pitch, n.velocity));
        events.push((n.end(), 0, n.pitch, 0));
    }
    events.sort_unstable_by_key(|&(tick, kind, pitch, _)| (tick, kind, pitch));

    let mut body = vec![0x00, 0xC0 | ch, track.program()];
    let mut clock = 0u64;
    for (tick, kind, pitch, velocity) in events {
        push_vlq(&mut body, tick - clock);
        clock = tick;
        if kind == 0 {
            body.extend_from_slice(&[0x80 | ch, pitch, 0]);
        } else {
            body.extend_from_slice(&[0x90 | ch, pitch, velocity]);
        }
    }
    push_vlq(&mut body, track.end() - clock);
    body.extend_from_slice(&[0xFF, 0x2F, 0x00]);
    body
}

/// Writes a format 1 file: a conductor chunk holding the tempo, then one chunk
/// per track that opens with the track's program change.
pub fn write_midi(piece: &Piece) -> Result<Vec<u8>, MidiError> {
    if piece.tracks().len() > super::MAX_TRACKS {
        return Err(MidiError::Capacity(piece.tracks().len()));
    }
    let division = u16::try_from(piece.ticks_per_quarter())
        .ok()
        .filter(|d| d & 0x8000 == 0)
        .ok_or_else(|| MidiError::Unsupported("division above 32767 ticks".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(piece.tracks().len() as u16 + 1).to_be_bytes());
    out.extend_from_slice(&division.to_be_bytes());

    let t = piece.micros_per_quarter().to_be_bytes();
    push_chunk(
        &mut out,
        &[0x00, 0xFF, 0x51, 0x03, t[1], t[2], t[3], 0x00, 0xFF, 0x2F, 0x00],
    );
    for track in piece.tracks() {
        push_chunk(&mut out, &track_body(track));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Format 0, division 480, one chunk: note-on C4 vel 64 at 0, note-off at
    /// 480, end of track. Laid out byte by byte from the SMF layout.
    const MINIMAL_FORMAT0: &[u8] = &[
        b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0, //
        b'M', b'T', b'r', b'k', 0, 0, 0, 13, //
        0x00, 0x90, 60, 64, //
        0x83, 0x60, 0x80, 60, 0, // delta 480 = 0x83 0x60
        0x00, 0xFF, 0x2F, 0x00,
    ];

    /// What `write_midi` must emit for the same single note: format 1, a
    /// conductor chunk with tempo 500000 us, then the note chunk opening with
    /// program change 0.
    const MINIMAL_FORMAT1: &[u8] = &[
        b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 1, 0, 2, 0x01, 0xE0, //
        b'M', b'T', b'r', b'k', 0, 0, 0, 11, //
        0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, //
        0x00, 0xFF, 0x2F, 0x00, //
        b'M', b'T', b'r', b'k', 0, 0, 0, 16, //
        0x00, 0xC0, 0, //
        0x00, 0x90, 60, 64, //
        0x83, 0x60, 0x80, 60, 0, //
        0x00, 0xFF, 0x2F, 0x00,
    ];

    fn single_note_piece() -> Piece {
        let track = Track::new(0, 0, vec![NoteEvent::new(60, 0, 480, 64)]).unwrap();
        Piece::new(480, 500_000, vec![track]).unwrap()
    }

    #[test]
    fn reads_hand_built_minimal_file() {
        let piece = read_midi(MINIMAL_FORMAT0).unwrap();
        assert_eq!(piece.tracks().len(), 1);
        assert_eq!(piece.tracks()[0].notes(), &[NoteEvent::new(60, 0, 480, 64)]);
        assert_eq!(piece.tempo_bpm(), 120.0);
    }

    #[test]
    fn writes_hand_built_bytes_exactly() {
        assert_eq!(write_midi(&single_note_piece()).unwrap(), MINIMAL_FORMAT1);
        assert_eq!(read_midi(MINIMAL_FORMAT1).unwrap(), single_note_piece());
    }

    #[test]
    fn zero_tracks_gives_header_and_tempo_chunk() {
        let bytes = write_midi(&Piece::default()).unwrap();
        assert_eq!(&bytes[8..12], &[0, 1, 0, 1]);
        assert_eq!(&bytes[14..], &MINIMAL_FORMAT1[14..33]);
        assert_eq!(read_midi(&bytes).unwrap(), Piece::default());
    }

    #[test]
    fn empty_chunk_is_one_empty_track() {
        let bytes = [
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 0,
        ];
        let piece = read_midi(&bytes).unwrap();
        assert_eq!(piece.tracks().len(), 1);
        assert!(piece.tracks()[0].is_empty());
    }

    #[test]
    fn running_status_and_velocity_zero_note_off() {
        let bytes = [
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 96, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 17, //
            0x00, 0x91, 64, 100, //
            0x60, 64, 0, // running status, vel 0 = off after 96 ticks
            0x00, 67, 90, //
            0x30, 67, 0, //
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let piece = read_midi(&bytes).unwrap();
        let track = &piece.tracks()[0];
        assert_eq!(track.channel(), 1);
        // division 96 rescaled to 480
        assert_eq!(
            track.notes(),
            &[NoteEvent::new(64, 0, 480, 100), NoteEvent::new(67, 480, 240, 90)]
        );
    }

    #[test]
    fn unclosed_note_closes_at_track_end_with_warning() {
        let bytes = [
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 9, //
            0x00, 0x90, 60, 64, //
            0x81, 0x70, 0xFF, 0x2F, 0x00, // end of track at tick 240
        ];
        let (piece, warnings) = read_midi_report(&bytes).unwrap();
        assert_eq!(piece.tracks()[0].notes(), &[NoteEvent::new(60, 0, 240, 64)]);
        assert_eq!(
            warnings,
            vec![ReadWarning::UnclosedNote { chunk: 0, channel: 0, pitch: 60, start: 0 }]
        );
    }

    #[test]
    fn malformed_input_names_byte_offset() {
        let err = read_midi(b"MThx\0\0\0\x06").unwrap_err();
        assert!(matches!(err, MidiError::Malformed { offset: 0, .. }));

        let mut truncated = MINIMAL_FORMAT0.to_vec();
        truncated.truncate(30);
        match read_midi(&truncated).unwrap_err() {
            MidiError::Malformed { offset, .. } => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad_status = MINIMAL_FORMAT0.to_vec();
        bad_status[23] = 0x40; // data byte with no running status
        match read_midi(&bad_status).unwrap_err() {
            MidiError::Malformed { offset, .. } => assert_eq!(offset, 23),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multi_channel_chunk_splits_into_tracks() {
        let bytes = [
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 24, //
            0x00, 0xC2, 33, //
            0x00, 0x92, 40, 80, //
            0x00, 0x90, 72, 70, //
            0x83, 0x60, 0x82, 40, 0, //
            0x00, 0x80, 72, 0, //
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let piece = read_midi(&bytes).unwrap();
        assert_eq!(piece.tracks().len(), 2);
        assert_eq!((piece.tracks()[0].channel(), piece.tracks()[0].program()), (2, 33));
        assert_eq!((piece.tracks()[1].channel(), piece.tracks()[1].program()), (0, 0));
    }

    #[test]
    fn vlq_encoding_matches_reference_values() {
        for (value, expected) in [
            (0u64, vec![0x00]),
            (0x40, vec![0x40]),
            (0x7F, vec![0x7F]),
            (0x80, vec![0x81, 0x00]),
            (0x2000, vec![0xC0, 0x00]),
            (0x3FFF, vec![0xFF, 0x7F]),
            (0x0FFF_FFFF, vec![0xFF, 0xFF, 0xFF, 0x7F]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, value);
            assert_eq!(out, expected, "{value:#x}");
            assert_eq!(Cursor::new(&out).vlq().unwrap() as u64, value);
        }
    }

    #[test]
    fn format_2_and_smpte_are_unsupported() {
        let mut bytes = MINIMAL_FORMAT0.to_vec();
        bytes[9] = 2;
        assert!(matches!(read_midi(&bytes), Err(MidiError::Unsupported(_))));
        let mut bytes = MINIMAL_FORMAT0.to_vec();
        bytes[12] = 0xE7;
        assert!(matches!(read_midi(&bytes), Err(MidiError::Unsupported(_))));
    }
}
