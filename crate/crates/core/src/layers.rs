//! Four-layer pieces: one model, four seeds, four temperatures.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{generate, LanguageModel, ModelError};
use crate::music::{decode_tokens, MusicError, Piece, TokenSequence, Track, TICKS_PER_QUARTER};
use crate::strategy::{Strategy, LAYER_COUNT};
use crate::trainer::Dataset;

pub const SEED_TOKENS: usize = 16;
pub const DEFAULT_LENGTH_TOKENS: usize = 512;
pub const PIECE_BARS: u64 = 16;
pub const DEFAULT_TEMPO_BPM: f64 = 90.0;
/// Common length of every layer, 16 bars of 4/4.
pub const PIECE_TICKS: u64 = PIECE_BARS * 4 * TICKS_PER_QUARTER as u64;

pub const LAYER_ROLES: [&str; LAYER_COUNT] = ["neutral", "excitement", "immersion", "tension"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("no corpus sequences to draw seeds from")]
    EmptyDataset,
    #[error("layer count {0} outside 1..=4")]
    ActiveCount(usize),
    #[error("piece length must be positive")]
    ZeroLength,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Music(#[from] MusicError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// 1-based; layer 1 is the one that always plays.
    pub index: usize,
    pub role: String,
    pub seed_tokens: TokenSequence,
    pub temperature: f64,
    pub instrument: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLayer {
    pub spec: LayerSpec,
    pub rng_seed: u64,
    pub tokens: TokenSequence,
    /// Decoded and fitted to [`PIECE_TICKS`]; program and channel are set at
    /// render time.
    pub track: Track,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPiece {
    pub piece_id: String,
    pub strategy_name: String,
    pub layers: Vec<GeneratedLayer>,
    pub length_tokens: usize,
    pub tempo_bpm: f64,
    /// Unix seconds; informational only.
    pub created_at: f64,
}

fn has_note_on(window: &[u16]) -> bool {
    window.iter().any(|&t| t < 128)
}

/// Every window start of `ids`, preferring ones that contain a note-on.
fn window_starts(ids: &[u16]) -> Vec<usize> {
    let last = ids.len().saturating_sub(SEED_TOKENS);
    let all: Vec<usize> = (0..=last).collect();
    let with_notes: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&s| has_note_on(&ids[s..(s + SEED_TOKENS).min(ids.len())]))
        .collect();
    if with_notes.is_empty() {
        all
    } else {
        with_notes
    }
}

fn window(ids: &[u16], start: usize) -> TokenSequence {
    TokenSequence::new(ids[start..(start + SEED_TOKENS).min(ids.len())].to_vec()).expect("corpus ids are in range")
}

/// Four seed windows drawn from four different corpus sequences, or from
/// distinct offsets when the corpus has fewer than four. Instruments and
/// temperatures come from `strategy`.
pub fn make_layer_specs(strategy: &Strategy, dataset: &Dataset, rng_seed: u64) -> Result<Vec<LayerSpec>, LayerError> {
    let sequences: Vec<&[u16]> = dataset
        .sequences()
        .iter()
        .map(|s| s.tokens.ids())
        .filter(|ids| !ids.is_empty())
        .collect();
    if sequences.is_empty() {
        return Err(LayerError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seeds: Vec<TokenSequence> = if sequences.len() >= LAYER_COUNT {
        sample(&mut rng, sequences.len(), LAYER_COUNT)
            .into_iter()
            .map(|i| {
                let starts = window_starts(sequences[i]);
                window(sequences[i], starts[rng.random_range(0..starts.len())])
            })
            .collect()
    } else {
        let candidates: Vec<(usize, usize)> = sequences
            .iter()
            .enumerate()
            .flat_map(|(i, ids)| window_starts(ids).into_iter().map(move |s| (i, s)))
            .collect();
        let picks: Vec<usize> = if candidates.len() >= LAYER_COUNT {
            sample(&mut rng, candidates.len(), LAYER_COUNT).into_vec()
        } else {
            // too short for four distinct windows: reuse them in turn
            (0..LAYER_COUNT).map(|k| k % candidates.len()).collect()
        };
        picks
            .into_iter()
            .map(|k| window(sequences[candidates[k].0], candidates[k].1))
            .collect()
    };
    Ok(seeds
        .into_iter()
        .enumerate()
        .map(|(i, seed_tokens)| LayerSpec {
            index: i + 1,
            role: LAYER_ROLES[i].to_string(),
            seed_tokens,
            temperature: strategy.temperatures[i],
            instrument: strategy.instruments[i],
        })
        .collect())
}

fn layer_seed(rng_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn piece_id(strategy_name: &str, rng_seed: u64, layers: &[GeneratedLayer]) -> String {
    let mut h = Sha256::new();
    h.update(strategy_name.as_bytes());
    h.update(rng_seed.to_le_bytes());
    for layer in layers {
        h.update([layer.spec.instrument]);
        h.update(layer.spec.temperature.to_le_bytes());
        for t in layer.tokens.ids() {
            h.update(t.to_le_bytes());
        }
    }
    let digest = h.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("{strategy_name}-{hex}")
}

/// Generates every layer from its seed and aligns them all to 16 bars.
/// Deterministic in `(model, specs, length_tokens, rng_seed)`.
pub fn generate_piece<M: LanguageModel + ?Sized>(
    model: &M,
    strategy_name: &str,
    specs: &[LayerSpec],
    length_tokens: usize,
    rng_seed: u64,
    tempo_bpm: f64,
) -> Result<GeneratedPiece, LayerError> {
    if length_tokens == 0 {
        return Err(LayerError::ZeroLength);
    }
    let layers = specs
        .iter()
        .map(|spec| {
            let seed = layer_seed(rng_seed, spec.index);
            let tokens = generate(model, &spec.seed_tokens, length_tokens, spec.temperature, seed)?;
            let track = decode_tokens(&tokens).fit_to(PIECE_TICKS);
            Ok(GeneratedLayer {
                spec: spec.clone(),
                rng_seed: seed,
                tokens,
                track,
            })
        })
        .collect::<Result<Vec<_>, LayerError>>()?;
    let created_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    Ok(GeneratedPiece {
        piece_id: piece_id(strategy_name, rng_seed, &layers),
        strategy_name: strategy_name.to_string(),
        layers,
        length_tokens,
        tempo_bpm,
        created_at,
    })
}

/// The first `active_count` layers as a playable piece, layer `i` on
/// channel `i - 1` with its strategy instrument.
pub fn render(piece: &GeneratedPiece, active_count: usize) -> Result<Piece, LayerError> {
    if !(1..=piece.layers.len().min(LAYER_COUNT)).contains(&active_count) {
        return Err(LayerError::ActiveCount(active_count));
    }
    let tracks = piece.layers[..active_count]
        .iter()
        .enumerate()
        .map(|(i, layer)| layer.track.clone().with_instrument(layer.spec.instrument, i as u8))
        .collect::<Result<Vec<_>, MusicError>>()?;
    Ok(Piece::with_bpm(piece.tempo_bpm, tracks)?)
}
