use std::fmt;
use std::str::FromStr;

use super::TrainError;
use crate::kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// Deterministic autoencoder trained with reconstruction plus a
    /// swap / re-encode / swap-back cycle.
    SwapAutoencoder,
    /// Gaussian encoder with a β-weighted KL term.
    BetaVae,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::SwapAutoencoder => "swap",
            Backbone::BetaVae => "bvae",
        })
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "swap" | "swap_autoencoder" => Ok(Backbone::SwapAutoencoder),
            "bvae" | "beta_vae" => Ok(Backbone::BetaVae),
            other => Err(format!("unknown backbone {other:?} (expected swap or bvae)")),
        }
    }
}

/// Where the matrix `J` of the Cayley skew `A = J Zᵀ − Z Jᵀ` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianSource {
    /// `J = ∂‖ZᵀZ − I‖²_F / ∂Z`. Closed form, differentiated through exactly.
    /// Note that this `J` makes `A` vanish: `J Zᵀ = 4 Z S Zᵀ` is symmetric,
    /// so the step reduces to the identity up to rounding.
    OrthPenalty,
    /// `J = ∂ℓ/∂Z` of the per-example objective (reconstruction plus the
    /// weighted penalty), obtained from a look-ahead decoder pass and
    /// treated as a constant in the backward pass.
    Objective,
}

impl fmt::Display for JacobianSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JacobianSource::OrthPenalty => "orth",
            JacobianSource::Objective => "objective",
        })
    }
}

impl FromStr for JacobianSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orth" => Ok(JacobianSource::OrthPenalty),
            "objective" => Ok(JacobianSource::Objective),
            other => Err(format!(
                "unknown cayley_jacobian {other:?} (expected orth or objective)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProseConfig {
    /// Number of latent blocks.
    pub k: usize,
    /// Dimension of each block.
    pub d: usize,
    pub backbone: Backbone,
    pub beta: f64,
    pub lambda_orth: f64,
    pub tau: f64,
    pub cayley_enabled: bool,
    pub cayley_jacobian: JacobianSource,
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProseConfig {
    fn default() -> Self {
        Self::quads()
    }
}

impl ProseConfig {
    /// Quads toy preset: four blocks of dimension 16, swap backbone.
    pub fn quads() -> Self {
        Self {
            k: 4,
            d: 16,
            backbone: Backbone::SwapAutoencoder,
            beta: 4.0,
            lambda_orth: 1.0,
            tau: 0.1,
            cayley_enabled: true,
            cayley_jacobian: JacobianSource::OrthPenalty,
            hidden: vec![256, 128],
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    /// MNIST preset: three blocks of dimension 8.
    pub fn mnist() -> Self {
        Self {
            k: 3,
            d: 8,
            ..Self::quads()
        }
    }

    /// β-VAE split of a 12-dimensional latent into three blocks of four.
    pub fn beta_vae() -> Self {
        Self {
            k: 3,
            d: 4,
            backbone: Backbone::BetaVae,
            beta: 4.0,
            ..Self::quads()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "quads" => Some(Self::quads()),
            "mnist" => Some(Self::mnist()),
            _ => None,
        }
    }

    /// Width of the flattened code, `d · k`.
    pub fn code_width(&self) -> usize {
        self.d * self.k
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.k < 2 {
            return bad(format!("k = {} but at least 2 blocks are needed", self.k));
        }
        if self.d < self.k {
            return bad(format!(
                "d = {} < k = {}: orthonormal blocks are infeasible",
                self.d, self.k
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.lambda_orth >= 0.0 && self.lambda_orth.is_finite()) {
            return bad(format!("lambda_orth must be >= 0, got {}", self.lambda_orth));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 13] = [
        "k",
        "d",
        "backbone",
        "beta",
        "lambda_orth",
        "tau",
        "cayley",
        "cayley_jacobian",
        "hidden",
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
    ];

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let hidden = self
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        [
            ("k", self.k.to_string()),
            ("d", self.d.to_string()),
            ("backbone", self.backbone.to_string()),
            ("beta", format!("{:?}", self.beta)),
            ("lambda_orth", format!("{:?}", self.lambda_orth)),
            ("tau", format!("{:?}", self.tau)),
            ("cayley", self.cayley_enabled.to_string()),
            ("cayley_jacobian", self.cayley_jacobian.to_string()),
            ("hidden", hidden),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "k" => self.k = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "backbone" => self.backbone = value.parse().map_err(TrainError::Config)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda_orth" => self.lambda_orth = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "cayley" => self.cayley_enabled = parse(key, value)?,
            "cayley_jacobian" => self.cayley_jacobian = value.parse().map_err(TrainError::Config)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse(key, v.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(TrainError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Builds a config from pairs on top of `base`, rejecting unknown keys.
    pub fn from_pairs(base: ProseConfig, pairs: &[(String, String)]) -> Result<Self, TrainError> {
        let mut cfg = base;
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        kv::render(&self.to_pairs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let q = ProseConfig::quads();
        assert_eq!((q.k, q.d, q.backbone), (4, 16, Backbone::SwapAutoencoder));
        assert_eq!(q.tau, 0.1);
        let m = ProseConfig::mnist();
        assert_eq!((m.k, m.d), (3, 8));
        let b = ProseConfig::beta_vae();
        assert_eq!((b.k, b.d, b.beta, b.code_width()), (3, 4, 4.0, 12));
        for c in [q, m, b] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = ProseConfig::mnist();
        cfg.lambda_orth = 0.1 + 0.2;
        cfg.hidden = vec![7, 3];
        cfg.cayley_jacobian = JacobianSource::Objective;
        let back = ProseConfig::from_pairs(ProseConfig::quads(), &cfg.to_pairs()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.lambda_orth.to_bits(), cfg.lambda_orth.to_bits());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ProseConfig::quads();
        cfg.d = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ProseConfig::quads();
        cfg.k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ProseConfig::quads();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("tau", "fast").is_err());
        cfg.set("lambda_orth", "-1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
