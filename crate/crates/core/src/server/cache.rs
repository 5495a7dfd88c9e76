//! Per-strategy piece queues.
//!
//! Every strategy owns a numbered stream of pieces: piece `n` is a pure
//! function of (server seed, strategy, n). The `n`-th request that lands on a
//! strategy is always answered with piece `n`, fetched from the queue when it
//! is there and generated on the spot when it is not. Background refreshes
//! generate the next unclaimed numbers ahead of demand.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use crate::layers::GeneratedPiece;

#[derive(Debug, Default)]
struct Stream {
    pieces: VecDeque<(u64, Arc<GeneratedPiece>, Instant)>,
    next_serve: u64,
    next_generate: u64,
    in_flight: usize,
}

impl Stream {
    fn drop_stale(&mut self) {
        while self.pieces.front().is_some_and(|(i, _, _)| *i < self.next_serve) {
            self.pieces.pop_front();
        }
        self.next_generate = self.next_generate.max(self.next_serve);
    }
}

/// How one queue looks right now.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueStatus {
    pub strategy: String,
    pub queued: usize,
    pub in_flight: usize,
    /// Stream numbers of the queued pieces, oldest first.
    pub indices: Vec<u64>,
    pub next_serve: u64,
}

#[derive(Debug)]
pub struct PieceCache {
    capacity: usize,
    streams: Mutex<HashMap<String, Stream>>,
}

impl PieceCache {
    pub fn new(capacity: usize, strategies: impl IntoIterator<Item = String>) -> Self {
        Self {
            capacity,
            streams: Mutex::new(strategies.into_iter().map(|s| (s, Stream::default())).collect()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> MutexGuard<'_, HashMap<String, Stream>> {
        self.streams.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Takes the next stream number for a request. Returns the cached piece
    /// when it is at the head of the queue.
    pub fn claim_serve(&self, strategy: &str) -> (u64, Option<Arc<GeneratedPiece>>) {
        let mut streams = self.lock();
        let s = streams.entry(strategy.to_string()).or_default();
        let n = s.next_serve;
        s.next_serve += 1;
        let hit = match s.pieces.front() {
            Some((i, _, _)) if *i == n => s.pieces.pop_front().map(|(_, p, _)| p),
            _ => None,
        };
        s.drop_stale();
        (n, hit)
    }

    /// Reserves a stream number for generation if the queue plus work in
    /// progress stays within `limit` (never above capacity).
    pub fn claim_generate(&self, strategy: &str, limit: usize) -> Option<u64> {
        let limit = limit.min(self.capacity);
        let mut streams = self.lock();
        let s = streams.entry(strategy.to_string()).or_default();
        s.drop_stale();
        if s.pieces.len() + s.in_flight >= limit {
            return None;
        }
        let m = s.next_generate;
        s.next_generate += 1;
        s.in_flight += 1;
        Some(m)
    }

    /// Ends a reservation. Returns false when the piece was not stored,
    /// either because it failed or because requests already moved past it.
    pub fn complete(&self, strategy: &str, index: u64, piece: Option<Arc<GeneratedPiece>>) -> bool {
        let mut streams = self.lock();
        let s = streams.entry(strategy.to_string()).or_default();
        s.in_flight = s.in_flight.saturating_sub(1);
        let Some(piece) = piece else { return false };
        if index < s.next_serve {
            return false;
        }
        let at = s.pieces.partition_point(|(i, _, _)| *i < index);
        if s.pieces.get(at).is_some_and(|(i, _, _)| *i == index) {
            return false;
        }
        s.pieces.insert(at, (index, piece, Instant::now()));
        true
    }

    pub fn len(&self, strategy: &str) -> usize {
        self.lock().get(strategy).map_or(0, |s| s.pieces.len())
    }

    pub fn is_empty(&self, strategy: &str) -> bool {
        self.len(strategy) == 0
    }

    /// Drops every queued piece of `strategy`; returns how many.
    pub fn evict(&self, strategy: &str) -> usize {
        self.lock().get_mut(strategy).map_or(0, |s| {
            let n = s.pieces.len();
            s.pieces.clear();
            n
        })
    }

    /// Seconds since the oldest queued piece of `strategy` was stored.
    pub fn oldest_age(&self, strategy: &str) -> Option<f64> {
        self.lock()
            .get(strategy)
            .and_then(|s| s.pieces.front().map(|(_, _, at)| at.elapsed().as_secs_f64()))
    }

    pub fn status(&self) -> Vec<QueueStatus> {
        let streams = self.lock();
        let mut out: Vec<QueueStatus> = streams
            .iter()
            .map(|(name, s)| QueueStatus {
                strategy: name.clone(),
                queued: s.pieces.len(),
                in_flight: s.in_flight,
                indices: s.pieces.iter().map(|(i, _, _)| *i).collect(),
                next_serve: s.next_serve,
            })
            .collect();
        out.sort_by(|a, b| a.strategy.cmp(&b.strategy));
        out
    }
}
