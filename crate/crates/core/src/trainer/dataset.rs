use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use super::TrainError;
use crate::music::{encode_tokens, quantize, read_midi, Piece, TokenSequence, GRID_TICKS};

/// Tracks encoding to fewer tokens than this are dropped.
pub const MIN_SEQUENCE_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
}

/// One encoded track and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub source: String,
    pub track: usize,
    pub split: Split,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub files_read: usize,
    /// File name and reason for every file that could not be used.
    pub skipped: Vec<(String, String)>,
    pub tracks_kept: usize,
    pub tracks_discarded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    sequences: Vec<Sequence>,
    report: BuildReport,
}

/// Every tenth file by name hash goes to validation.
pub fn split_for(file_name: &str) -> Split {
    let digest = Sha256::digest(file_name.as_bytes());
    let head = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    if head % 10 == 0 {
        Split::Validation
    } else {
        Split::Train
    }
}

fn midi_files(dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let entries = fs::read_dir(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("mid") || x.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every `.mid`/`.midi` file in `dir` (not recursive), quantizes it to
/// the token grid and encodes each track. Unreadable files are skipped with a
/// warning; a directory with nothing usable is an error.
pub fn build_dataset(dir: &Path) -> Result<Dataset, TrainError> {
    let files = midi_files(dir)?;
    if files.is_empty() {
        return Err(TrainError::Config(format!("no MIDI files in {}", dir.display())));
    }
    let mut pieces = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match fs::read(&path).map_err(|e| e.to_string()).and_then(|b| read_midi(&b).map_err(|e| e.to_string())) {
            Ok(piece) => pieces.push((name, piece)),
            Err(reason) => {
                warn!(file = %name, %reason, "skipping unreadable MIDI file");
                skipped.push((name, reason));
            }
        }
    }
    let mut dataset = Dataset::from_pieces(pieces)?;
    dataset.report.skipped = skipped;
    info!(
        files = dataset.report.files_read,
        skipped = dataset.report.skipped.len(),
        sequences = dataset.report.tracks_kept,
        discarded = dataset.report.tracks_discarded,
        "dataset built"
    );
    Ok(dataset)
}

impl Dataset {
    /// Builds from already-parsed pieces, each named by its source file.
    pub fn from_pieces(pieces: Vec<(String, Piece)>) -> Result<Self, TrainError> {
        let mut report = BuildReport::default();
        let mut sequences = Vec::new();
        for (name, piece) in pieces {
            report.files_read += 1;
            let split = split_for(&name);
            let piece = quantize(&piece, GRID_TICKS);
            for (i, track) in piece.tracks().iter().enumerate() {
                let tokens = encode_tokens(track, piece.ticks_per_quarter())
                    .map_err(|e| TrainError::Config(format!("{name} track {i}: {e}")))?;
                if tokens.len() < MIN_SEQUENCE_TOKENS {
                    report.tracks_discarded += 1;
                    continue;
                }
                report.tracks_kept += 1;
                sequences.push(Sequence {
                    source: name.clone(),
                    track: i,
                    split,
                    tokens,
                });
            }
        }
        if sequences.is_empty() {
            return Err(TrainError::Config("corpus yields no usable sequences".into()));
        }
        Ok(Self { sequences, report })
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn report(&self) -> &BuildReport {
        &self.report
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    /// The same sequences with everything marked for training, for runs that
    /// deliberately fit the whole corpus.
    pub fn all_for_training(&self) -> Self {
        let mut out = self.clone();
        out.sequences.iter_mut().for_each(|s| s.split = Split::Train);
        out
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Picks a random window of up to `len` tokens from `sequences`, choosing a
/// sequence with probability proportional to its length.
pub(crate) fn random_crop<'a, R: Rng>(sequences: &[&'a Sequence], len: usize, rng: &mut R) -> &'a [u16] {
    let total: usize = sequences.iter().map(|s| s.tokens.len()).sum();
    let mut pick = rng.random_range(0..total);
    let seq = sequences
        .iter()
        .find(|s| {
            if pick < s.tokens.len() {
                true
            } else {
                pick -= s.tokens.len();
                false
            }
        })
        .expect("pick is below the total");
    let ids = seq.tokens.ids();
    if ids.len() <= len {
        return ids;
    }
    let start = rng.random_range(0..=ids.len() - len);
    &ids[start..start + len]
}

/// Windows of at most `len` tokens advancing by half a window, each paired
/// with the index of its first prediction that no earlier window scored. So
/// every next-token prediction is scored once, and after the first window
/// each sees at least `len / 2` tokens of context.
pub(crate) fn eval_windows<'a>(
    sequences: impl IntoIterator<Item = &'a Sequence>,
    len: usize,
) -> Vec<(&'a [u16], usize)> {
    let stride = (len / 2).max(1);
    let mut out = Vec::new();
    for s in sequences {
        let ids = s.tokens.ids();
        if ids.len() < 2 {
            continue;
        }
        let mut scored_to = 0; // predictions 0..scored_to are done
        let mut start = 0;
        loop {
            let end = (start + len).min(ids.len());
            out.push((&ids[start..end], scored_to - start));
            scored_to = end - 1;
            if end == ids.len() {
                break;
            }
            start = (start + stride).min(ids.len() - len.min(ids.len()));
        }
    }
    out
}
