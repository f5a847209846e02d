use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use gmssl_core::config::TrainConfig;

/// Resolved config plus provenance, written before training starts. The
/// provenance lines are comments, so the file loads back with `--config`.
pub struct RunManifest {
    pub config: TrainConfig,
    pub binary_hash: String,
    pub corpus_seed: u64,
    pub started: u64,
}

/// FNV-1a over the running executable, or over the version string when the
/// executable cannot be read.
fn binary_hash() -> String {
    let bytes = std::env::current_exe()
        .and_then(fs::read)
        .unwrap_or_else(|_| env!("CARGO_PKG_VERSION").as_bytes().to_vec());
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl RunManifest {
    pub fn new(config: &TrainConfig, corpus_seed: u64) -> Self {
        RunManifest {
            config: config.clone(),
            binary_hash: binary_hash(),
            corpus_seed,
            started: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "# gm-ssl {}\n# binary = {}\n# corpus_seed = {}\n# started = {}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.binary_hash,
            self.corpus_seed,
            self.started,
            self.config
        )
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.render())
    }
}
