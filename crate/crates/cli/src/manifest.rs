use std::path::Path;

use anyhow::{Context, Result};
use hyperflux::config::RunConfig;
use sha2::{Digest, Sha256};

/// Writes the resolved config next to a manifest holding its hash, the seeds
/// and the tool version, which together reproduce the run.
pub fn write(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml();
    let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, &text)
        .with_context(|| format!("writing {}", config_path.display()))?;
    let manifest = serde_json::json!({
        "tool": "hyperflux",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "config": "config.toml",
        "config_sha256": hash,
        "seeds": {
            "train": cfg.train.seed,
            "init": cfg.model.init_seed,
            "data": cfg.data.seed,
        },
    });
    let path = out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, body + "\n").with_context(|| format!("writing {}", path.display()))
}
