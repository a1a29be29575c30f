//! Resolution of training settings: built-in defaults, then the preset,
//! then the config file, then command-line flags.

use std::fs;
use std::path::PathBuf;

use prose::disentangle::ProseConfig;
use prose::kv;

use crate::args::{BackboneArg, ConfigFlags, TrainArgs};
use crate::CliError;

/// Keys a config file may hold besides the model keys.
pub const RUN_KEYS: [&str; 4] = ["preset", "out", "data", "data_seed"];

/// Fully resolved `train` invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub config: ProseConfig,
    pub config_path: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub data_seed: u64,
    pub out: PathBuf,
}

fn preset(name: &str) -> Result<ProseConfig, CliError> {
    ProseConfig::preset(name).ok_or_else(|| CliError::Usage(format!("unknown preset {name:?}")))
}

pub fn resolve(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let flags = &args.config;
    let file_pairs = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.display().to_string(),
                source,
            })?;
            kv::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let (run_pairs, model_pairs): (Vec<_>, Vec<_>) = file_pairs
        .into_iter()
        .partition(|(k, _)| RUN_KEYS.contains(&k.as_str()));

    let preset_name = match flags.preset {
        Some(p) => p.name().to_string(),
        None => kv::get(&run_pairs, "preset").unwrap_or("quads").to_string(),
    };
    let mut config = preset(&preset_name)?;
    for (k, v) in &model_pairs {
        config.set(k, v).map_err(|e| CliError::Config(e.to_string()))?;
    }
    apply_flags(&mut config, flags);
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let out = args
        .out
        .clone()
        .or_else(|| kv::get(&run_pairs, "out").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("train needs --out (or `out` in the config file)".into()))?;
    let data = args
        .data
        .data
        .clone()
        .or_else(|| kv::get(&run_pairs, "data").map(PathBuf::from));
    let data_seed = match (args.data.data_seed, kv::get(&run_pairs, "data_seed")) {
        (Some(v), _) => v,
        (None, Some(v)) => v
            .parse()
            .map_err(|_| CliError::Config(format!("bad value {v:?} for data_seed")))?,
        (None, None) => 0,
    };
    Ok(RunConfig {
        config,
        config_path: flags.config.clone(),
        data,
        data_seed,
        out,
    })
}

fn apply_flags(config: &mut ProseConfig, flags: &ConfigFlags) {
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    if let Some(v) = flags.epochs {
        config.epochs = v;
    }
    if let Some(v) = flags.lambda_orth {
        config.lambda_orth = v;
    }
    if let Some(v) = flags.tau {
        config.tau = v;
    }
    if let Some(v) = flags.backbone {
        config.backbone = match v {
            BackboneArg::Swap => prose::disentangle::Backbone::SwapAutoencoder,
            BackboneArg::Bvae => prose::disentangle::Backbone::BetaVae,
        };
    }
    if let Some(v) = flags.beta {
        config.beta = v;
    }
    if flags.no_cayley {
        config.cayley_enabled = false;
    }
}
