//! File plumbing shared by the subcommands: inputs, outputs, configuration
//! resolution and the reproducibility stanza.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::RgbImage;
use sha2::{Digest, Sha256};
use stylize_core::{OptTrace, Preset, TraceEntry, TransferConfig, WeightStore};

use crate::RunConfig;

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} file not found: {}", path.display());
    }
    Ok(())
}

pub fn load_image(path: &Path, what: &str) -> Result<RgbImage> {
    require_file(path, what)?;
    let img = image::open(path)
        .with_context(|| format!("cannot read {what} image {}", path.display()))?;
    Ok(img.to_rgb8())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    image
        .save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// `o.png` → `o.trace.csv`.
pub fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

/// Where the configuration came from, for the trace.
pub enum Source {
    Preset(Preset),
    Config(PathBuf),
}

pub struct Resolved {
    pub cfg: TransferConfig,
    pub source: Source,
    pub store: WeightStore,
    pub weights_sha256: String,
}

/// Expands the preset or reads the config file, then applies flag overrides.
pub fn resolve(run: &RunConfig, fallback: Option<Preset>) -> Result<Resolved> {
    require_file(&run.weights, "weights")?;
    let (mut cfg, source) = match (&run.config, run.preset.or(fallback)) {
        (Some(path), _) => {
            require_file(path, "config")?;
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let cfg: TransferConfig = serde_json::from_str(&text)
                .with_context(|| format!("invalid config {}", path.display()))?;
            (cfg, Source::Config(path.clone()))
        }
        (None, Some(p)) => (p.config(), Source::Preset(p)),
        (None, None) => bail!("one of --preset or --config is required"),
    };
    if let Some(seed) = run.seed {
        cfg.optimizer.seed = seed;
    }
    if let Some(iters) = run.iters {
        cfg.optimizer.max_iters = iters;
    }
    if let Some(pooling) = run.pooling {
        cfg.pooling = pooling;
    }
    let bytes =
        fs::read(&run.weights).with_context(|| format!("cannot read {}", run.weights.display()))?;
    let store = WeightStore::from_bytes(&bytes)
        .with_context(|| format!("cannot load weights {}", run.weights.display()))?;
    Ok(Resolved {
        cfg,
        source,
        store,
        weights_sha256: sha256_hex(&bytes),
    })
}

impl Resolved {
    /// `# key=value` lines heading every trace.
    pub fn stanza(&self, command: &str, inputs: &[(&str, &Path)]) -> Result<Vec<(String, String)>> {
        let cfg_json = serde_json::to_vec(&self.cfg)?;
        let mut s = vec![
            (
                "engine".to_string(),
                format!("stylize {}", stylize_core::VERSION),
            ),
            ("command".into(), command.into()),
        ];
        match &self.source {
            Source::Preset(p) => s.push(("preset".into(), p.to_string())),
            Source::Config(path) => s.push(("config".into(), path.display().to_string())),
        }
        s.push(("seed".into(), self.cfg.optimizer.seed.to_string()));
        s.push(("config_sha256".into(), sha256_hex(&cfg_json)));
        s.push(("weights_sha256".into(), self.weights_sha256.clone()));
        for (name, path) in inputs {
            s.push((format!("{name}_sha256"), file_sha256(path)?));
        }
        Ok(s)
    }
}

pub fn write_trace(
    path: &Path,
    trace: &OptTrace,
    stanza: &[(String, String)],
    timings: bool,
) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf, stanza, timings)?;
    fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

pub fn report(prefix: &str, e: &TraceEntry) {
    if e.iter.is_multiple_of(10) {
        eprintln!(
            "{prefix}iter {:>5}  loss {:.6e}  content {:.6e}  style {:.6e}",
            e.iter, e.loss, e.content_loss, e.style_loss
        );
    }
}
