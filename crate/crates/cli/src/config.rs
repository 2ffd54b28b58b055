use std::fs;
use std::path::Path;

use millie_core::pipeline::RunConfig;

use crate::Failure;

/// Command-line values that override the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tta_replicas: Option<usize>,
    pub k: Option<usize>,
}

pub fn parse_config(text: &str) -> Result<RunConfig, Failure> {
    toml::from_str(text).map_err(|e| Failure::config(format!("config: {}", e.message())))
}

pub fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(r) = o.tta_replicas {
        cfg.train.tta_replicas = r;
    }
    if let Some(k) = o.k {
        cfg.metrics.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}
