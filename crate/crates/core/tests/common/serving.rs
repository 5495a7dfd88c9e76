use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use maestro_core::model::{init_params, LanguageModel, ModelConfig, ModelError, Params};
use maestro_core::music::VOCAB_SIZE;
use maestro_core::server::{MusicService, ServerConfig};
use maestro_core::strategy::default_config;
use maestro_core::trainer::{build_dataset, Dataset};

pub fn small_model() -> Params<f64> {
    let config = ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_seq_len: 32,
        dropout: 0.0,
    };
    init_params(&config, 21).unwrap()
}

pub fn corpus() -> Arc<Dataset> {
    Arc::new(build_dataset(&super::fixture_dir()).unwrap())
}

pub fn quick_config(seed: u64) -> ServerConfig {
    ServerConfig {
        seed,
        length_tokens: 24,
        retry_delays: vec![Duration::from_millis(10); 3],
        ..ServerConfig::default()
    }
}

pub fn start(model: Arc<dyn LanguageModel>, config: ServerConfig) -> MusicService {
    MusicService::start(model, default_config(), corpus(), config).unwrap()
}

pub fn small_service(seed: u64) -> MusicService {
    start(Arc::new(small_model()), quick_config(seed))
}

/// A model that can be switched to fail every call.
pub struct Flaky {
    pub inner: Params<f64>,
    pub failing: AtomicBool,
}

impl Flaky {
    pub fn new(failing: bool) -> Arc<Self> {
        Arc::new(Self {
            inner: small_model(),
            failing: AtomicBool::new(failing),
        })
    }

    pub fn set_failing(&self, failing: bool) {
        self.failing.store(failing, Ordering::SeqCst);
    }
}

impl LanguageModel for Flaky {
    fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    fn next_logits(&self, context: &[u16]) -> Result<Vec<f64>, ModelError> {
        if self.failing.load(Ordering::SeqCst) {
            return Err(ModelError::Backend("switched off".into()));
        }
        self.inner.next_logits(context)
    }
}

/// Polls `check` until it holds or `timeout` passes.
pub fn eventually(timeout: Duration, mut check: impl FnMut() -> bool) -> bool {
    let until = Instant::now() + timeout;
    loop {
        if check() {
            return true;
        }
        if Instant::now() > until {
            return false;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}
