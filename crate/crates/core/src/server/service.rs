use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::Engine;
use sha2::{Digest, Sha256};
use tracing::{debug, error, info, warn};

use super::cache::{PieceCache, QueueStatus};
use super::protocol::{Ack, ErrorCode, GameEventMessage, MusicResponse, WireMessage};
use super::ServerError;
use crate::emotion::{decay, update, EmotionState};
use crate::layers::{generate_piece, make_layer_specs, render, GeneratedPiece, LayerError, DEFAULT_TEMPO_BPM};
use crate::model::{LanguageModel, ModelConfig, ModelError};
use crate::music::write_midi;
use crate::strategy::{active_layer_count, Strategy, StrategyConfig};
use crate::trainer::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// Root of every piece stream; same seed, same pieces.
    pub seed: u64,
    /// Background generation threads.
    pub workers: usize,
    pub cache_capacity: usize,
    /// Pieces per strategy generated before the server is handed out.
    pub warm_depth: usize,
    pub length_tokens: usize,
    /// Pause before each retry of a failed refresh.
    pub retry_delays: Vec<Duration>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 2,
            cache_capacity: 2,
            warm_depth: 1,
            length_tokens: crate::layers::DEFAULT_LENGTH_TOKENS,
            retry_delays: vec![Duration::from_secs(1), Duration::from_secs(5), Duration::from_secs(25)],
        }
    }
}

/// Counters for tests and logs. Forward passes are split by the path that
/// spent them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub request_forward_passes: u64,
    pub background_forward_passes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub refresh_generated: u64,
    pub refresh_dropped: u64,
    pub refresh_discarded: u64,
    pub refresh_failed: u64,
}

#[derive(Default)]
struct Counters {
    request_forward_passes: AtomicU64,
    background_forward_passes: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    refresh_generated: AtomicU64,
    refresh_dropped: AtomicU64,
    refresh_discarded: AtomicU64,
    refresh_failed: AtomicU64,
}

/// Counts every call that reaches the model.
struct Counted<'a> {
    inner: &'a dyn LanguageModel,
    counter: &'a AtomicU64,
}

impl LanguageModel for Counted<'_> {
    fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    fn next_logits(&self, context: &[u16]) -> Result<Vec<f64>, ModelError> {
        self.counter.fetch_add(1, Ordering::Relaxed);
        self.inner.next_logits(context)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub emotion: EmotionState,
    pub last_strategy: Option<String>,
    touched: bool,
}

enum Job {
    Refresh(String),
}

struct Inner {
    model: Arc<dyn LanguageModel>,
    strategies: StrategyConfig,
    dataset: Arc<Dataset>,
    config: ServerConfig,
    cache: PieceCache,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counters: Counters,
    started: Instant,
    jobs: Mutex<Option<Sender<Job>>>,
    pending: Mutex<usize>,
    idle: Condvar,
    stopping: AtomicBool,
}

/// The music service without any transport: sessions, cache, generation and
/// background refresh. Cloning shares the same service.
#[derive(Clone)]
pub struct MusicService {
    inner: Arc<Inner>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

fn stream_seed(root: u64, strategy: &str, index: u64, purpose: u8) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(strategy.as_bytes());
    h.update([0, purpose]);
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl Inner {
    fn strategy(&self, name: &str) -> &Strategy {
        self.strategies.registry.get(name).expect("queues exist only for registered strategies")
    }

    /// Piece `index` of the strategy's stream.
    fn make_piece(&self, strategy: &Strategy, index: u64, counter: &AtomicU64) -> Result<GeneratedPiece, LayerError> {
        let specs = make_layer_specs(strategy, &self.dataset, stream_seed(self.config.seed, &strategy.name, index, 0))?;
        let model = Counted {
            inner: &*self.model,
            counter,
        };
        generate_piece(
            &model,
            &strategy.name,
            &specs,
            self.config.length_tokens,
            stream_seed(self.config.seed, &strategy.name, index, 1),
            strategy.tempo_bpm.unwrap_or(DEFAULT_TEMPO_BPM),
        )
    }

    fn clock(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn session(&self, id: &str) -> Arc<Mutex<Session>> {
        let mut sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        sessions
            .entry(id.to_string())
            .or_insert_with(|| {
                debug!(session = id, "new session at neutral");
                Arc::new(Mutex::new(Session {
                    id: id.to_string(),
                    emotion: EmotionState::neutral(0.0),
                    last_strategy: None,
                    touched: false,
                }))
            })
            .clone()
    }

    fn enqueue_refresh(&self, strategy: &str) {
        let jobs = self.jobs.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(tx) = jobs.as_ref() {
            *self.pending.lock().unwrap_or_else(|e| e.into_inner()) += 1;
            if tx.send(Job::Refresh(strategy.to_string())).is_err() {
                self.finish_job();
            }
        }
    }

    fn finish_job(&self) {
        let mut pending = self.pending.lock().unwrap_or_else(|e| e.into_inner());
        *pending = pending.saturating_sub(1);
        if *pending == 0 {
            self.idle.notify_all();
        }
    }

    /// Sleeps up to `d`, waking early on shutdown. False when stopping.
    fn pause(&self, d: Duration) -> bool {
        let until = Instant::now() + d;
        while Instant::now() < until {
            if self.stopping.load(Ordering::Relaxed) {
                return false;
            }
            thread::sleep(Duration::from_millis(20).min(until - Instant::now()));
        }
        !self.stopping.load(Ordering::Relaxed)
    }

    /// One refresh job: generate one piece for `name` unless its queue is
    /// full. A piece overtaken by requests while it was being made is thrown
    /// away and the slot is claimed again.
    fn refresh(&self, name: &str) {
        let strategy = self.strategy(name);
        let counter = &self.counters.background_forward_passes;
        let mut overtaken = 0;
        'claim: loop {
            let Some(index) = self.cache.claim_generate(name, self.cache.capacity()) else {
                if overtaken == 0 {
                    self.counters.refresh_dropped.fetch_add(1, Ordering::Relaxed);
                    debug!(strategy = name, "refresh dropped, queue full");
                }
                return;
            };
            let mut attempt = 0;
            loop {
                match self.make_piece(strategy, index, counter) {
                    Ok(piece) => {
                        if self.cache.complete(name, index, Some(Arc::new(piece))) {
                            self.counters.refresh_generated.fetch_add(1, Ordering::Relaxed);
                            return;
                        }
                        self.counters.refresh_discarded.fetch_add(1, Ordering::Relaxed);
                        overtaken += 1;
                        if overtaken > 8 || self.stopping.load(Ordering::Relaxed) {
                            return;
                        }
                        continue 'claim;
                    }
                    Err(e) => {
                        let Some(&delay) = self.config.retry_delays.get(attempt) else {
                            self.cache.complete(name, index, None);
                            self.counters.refresh_failed.fetch_add(1, Ordering::Relaxed);
                            error!(strategy = name, index, error = %e, "refresh failed, giving up");
                            return;
                        };
                        attempt += 1;
                        warn!(strategy = name, index, attempt, error = %e, ?delay, "refresh failed, retrying");
                        if !self.pause(delay) {
                            self.cache.complete(name, index, None);
                            return;
                        }
                    }
                }
            }
        }
    }
}

fn worker_loop(inner: Arc<Inner>, jobs: Arc<Mutex<Receiver<Job>>>) {
    loop {
        let job = {
            let rx = jobs.lock().unwrap_or_else(|e| e.into_inner());
            rx.recv()
        };
        match job {
            Ok(Job::Refresh(name)) => {
                if !inner.stopping.load(Ordering::Relaxed) {
                    inner.refresh(&name);
                }
                inner.finish_job();
            }
            Err(_) => return,
        }
    }
}

impl MusicService {
    /// Validates the strategy table, fills every queue to `warm_depth` and
    /// starts the refresh workers. Returns only once the cache is warm.
    pub fn start(
        model: Arc<dyn LanguageModel>,
        strategies: StrategyConfig,
        dataset: Arc<Dataset>,
        config: ServerConfig,
    ) -> Result<Self, ServerError> {
        strategies.registry.validate()?;
        if dataset.is_empty() {
            return Err(ServerError::Config("dataset is empty".into()));
        }
        if config.cache_capacity == 0 || config.workers == 0 || config.length_tokens == 0 {
            return Err(ServerError::Config(
                "cache capacity, workers and length_tokens must be positive".into(),
            ));
        }
        let names: Vec<String> = strategies.registry.strategies().iter().map(|s| s.name.clone()).collect();
        let (tx, rx) = channel();
        let inner = Arc::new(Inner {
            model,
            cache: PieceCache::new(config.cache_capacity, names),
            strategies,
            dataset,
            config,
            sessions: Mutex::new(HashMap::new()),
            counters: Counters::default(),
            started: Instant::now(),
            jobs: Mutex::new(Some(tx)),
            pending: Mutex::new(0),
            idle: Condvar::new(),
            stopping: AtomicBool::new(false),
        });
        let service = Self {
            inner,
            workers: Arc::new(Mutex::new(Vec::new())),
        };
        service.warmup()?;
        let rx = Arc::new(Mutex::new(rx));
        let mut workers = service.workers.lock().unwrap_or_else(|e| e.into_inner());
        for i in 0..service.inner.config.workers {
            let (inner, rx) = (service.inner.clone(), rx.clone());
            workers.push(
                thread::Builder::new()
                    .name(format!("refresh-{i}"))
                    .spawn(move || worker_loop(inner, rx))
                    .map_err(|e| ServerError::Config(format!("cannot spawn worker: {e}")))?,
            );
        }
        drop(workers);
        Ok(service)
    }

    /// Tops every queue up to `warm_depth`, spreading the work over the
    /// worker count. Returns how many pieces were generated; a second call on
    /// warm queues generates nothing.
    pub fn warmup(&self) -> Result<usize, ServerError> {
        let inner = &self.inner;
        let t0 = Instant::now();
        let mut todo = Vec::new();
        for s in inner.strategies.registry.strategies() {
            while let Some(index) = inner.cache.claim_generate(&s.name, inner.config.warm_depth) {
                todo.push((s, index));
            }
        }
        let count = todo.len();
        let next = Mutex::new(todo.into_iter());
        let failure: Mutex<Option<ServerError>> = Mutex::new(None);
        thread::scope(|scope| {
            for _ in 0..inner.config.workers.min(count.max(1)) {
                scope.spawn(|| loop {
                    let Some((s, index)) = next.lock().unwrap_or_else(|e| e.into_inner()).next() else {
                        return;
                    };
                    match inner.make_piece(s, index, &inner.counters.background_forward_passes) {
                        Ok(piece) => {
                            inner.cache.complete(&s.name, index, Some(Arc::new(piece)));
                        }
                        Err(e) => {
                            inner.cache.complete(&s.name, index, None);
                            failure
                                .lock()
                                .unwrap_or_else(|e| e.into_inner())
                                .get_or_insert(ServerError::Warmup {
                                    strategy: s.name.clone(),
                                    reason: e.to_string(),
                                });
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap_or_else(|e| e.into_inner()) {
            return Err(e);
        }
        info!(pieces = count, seconds = t0.elapsed().as_secs_f64(), "cache warm");
        Ok(count)
    }

    pub fn strategies(&self) -> &StrategyConfig {
        &self.inner.strategies
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.config
    }

    /// Applies a game event to its session (creating it at neutral): decay
    /// over the time since the last event, then the weighted pull.
    pub fn handle_game_event(&self, msg: &GameEventMessage) -> Result<Ack, (ErrorCode, String)> {
        if msg.session.is_empty() {
            return Err((ErrorCode::BadRequest, "empty session id".into()));
        }
        let mut event = msg.event();
        event.check().map_err(|e| (ErrorCode::BadRequest, e.to_string()))?;
        if !(event.arousal_target.is_finite() && event.valence_target.is_finite()) {
            return Err((ErrorCode::BadRequest, "targets must be finite numbers".into()));
        }
        if let Some(t) = event.timestamp {
            if !t.is_finite() {
                return Err((ErrorCode::BadRequest, "timestamp must be finite".into()));
            }
        }
        let now = event.timestamp.unwrap_or_else(|| self.inner.clock());
        event.timestamp = Some(now);
        let session = self.inner.session(&msg.session);
        let mut session = session.lock().unwrap_or_else(|e| e.into_inner());
        let dt = if session.touched {
            now - session.emotion.updated_at()
        } else {
            0.0
        };
        let relaxed = decay(&session.emotion, dt);
        session.emotion = update(&relaxed, &event);
        session.touched = true;
        Ok(Ack {
            session: msg.session.clone(),
            arousal: session.emotion.arousal(),
            valence: session.emotion.valence(),
            emotion_label: self.inner.strategies.emotion_label(&session.emotion).to_string(),
            clamped: event.targets_out_of_range(),
        })
    }

    /// Steps 2 to 7: map the session's emotion to a strategy, take the next
    /// piece of that strategy's stream (from the cache, or generated now),
    /// render the active layers, and queue a refresh.
    pub fn handle_music_request(&self, session_id: &str) -> Result<MusicResponse, (ErrorCode, String)> {
        let inner = &self.inner;
        let emotion = {
            let session = inner.session(session_id);
            let session = session.lock().unwrap_or_else(|e| e.into_inner());
            session.emotion
        };
        let strategy = inner
            .strategies
            .registry
            .lookup(&emotion)
            .expect("a validated registry covers every in-range state");
        let active = active_layer_count(emotion.arousal());

        let (index, cached) = inner.cache.claim_serve(&strategy.name);
        let piece = match cached {
            Some(piece) => {
                inner.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                piece
            }
            None => {
                inner.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
                debug!(strategy = %strategy.name, index, "cache miss, generating now");
                match inner.make_piece(strategy, index, &inner.counters.request_forward_passes) {
                    Ok(piece) => Arc::new(piece),
                    Err(e) => {
                        inner.enqueue_refresh(&strategy.name);
                        return Err((ErrorCode::GenerationFailed, format!("{}: {e}", strategy.name)));
                    }
                }
            }
        };
        let midi = render(&piece, active)
            .map_err(|e| e.to_string())
            .and_then(|p| write_midi(&p).map_err(|e| e.to_string()));
        inner.enqueue_refresh(&strategy.name);
        let midi = midi.map_err(|e| (ErrorCode::GenerationFailed, e))?;

        {
            let session = inner.session(session_id);
            session.lock().unwrap_or_else(|e| e.into_inner()).last_strategy = Some(strategy.name.clone());
        }
        Ok(MusicResponse {
            strategy: strategy.name.clone(),
            emotion_label: inner.strategies.emotion_label(&emotion).to_string(),
            arousal: emotion.arousal(),
            valence: emotion.valence(),
            active_layers: active,
            tempo_bpm: piece.tempo_bpm,
            piece_id: piece.piece_id.clone(),
            midi_payload: base64::engine::general_purpose::STANDARD.encode(midi),
        })
    }

    /// Exactly one reply per request record.
    pub fn handle(&self, msg: &WireMessage) -> WireMessage {
        let out = match msg {
            WireMessage::GameEvent(e) => self.handle_game_event(e).map(WireMessage::Ack),
            WireMessage::MusicRequest(r) => self.handle_music_request(&r.session).map(WireMessage::MusicResponse),
            _ => Err((ErrorCode::BadRequest, "only game_event and music_request are accepted".into())),
        };
        out.unwrap_or_else(|(code, detail)| WireMessage::error(code, detail))
    }

    pub fn handle_line(&self, line: &str) -> WireMessage {
        match WireMessage::from_line(line) {
            Ok(msg) => self.handle(&msg),
            Err(e) => WireMessage::error(ErrorCode::BadRequest, e),
        }
    }

    /// Queues one background refresh for `strategy`, exactly as a serve
    /// does. False for an unknown strategy.
    pub fn refresh_memory(&self, strategy: &str) -> bool {
        if self.inner.strategies.registry.get(strategy).is_none() {
            return false;
        }
        self.inner.enqueue_refresh(strategy);
        true
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        let sessions = self.inner.sessions.lock().unwrap_or_else(|e| e.into_inner());
        sessions
            .get(id)
            .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).clone())
    }

    pub fn queue_len(&self, strategy: &str) -> usize {
        self.inner.cache.len(strategy)
    }

    pub fn cache_status(&self) -> Vec<QueueStatus> {
        self.inner.cache.status()
    }

    /// Empties one strategy's queue, so the next request for it misses.
    pub fn evict(&self, strategy: &str) -> usize {
        self.inner.cache.evict(strategy)
    }

    pub fn stats(&self) -> Stats {
        let c = &self.inner.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        Stats {
            request_forward_passes: get(&c.request_forward_passes),
            background_forward_passes: get(&c.background_forward_passes),
            cache_hits: get(&c.cache_hits),
            cache_misses: get(&c.cache_misses),
            refresh_generated: get(&c.refresh_generated),
            refresh_dropped: get(&c.refresh_dropped),
            refresh_discarded: get(&c.refresh_discarded),
            refresh_failed: get(&c.refresh_failed),
        }
    }

    /// Blocks until no refresh job is queued or running, or `timeout`
    /// passes. True when idle.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut pending = self.inner.pending.lock().unwrap_or_else(|e| e.into_inner());
        while *pending > 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            pending = self
                .inner
                .idle
                .wait_timeout(pending, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        true
    }

    /// Stops accepting refresh jobs and joins the workers. Jobs already
    /// running finish their current generation first.
    pub fn shutdown(&self) {
        self.inner.stopping.store(true, Ordering::Relaxed);
        self.inner.jobs.lock().unwrap_or_else(|e| e.into_inner()).take();
        let handles: Vec<JoinHandle<()>> = self.workers.lock().unwrap_or_else(|e| e.into_inner()).drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}
