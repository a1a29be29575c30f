//! Binary checkpoints: magic `PROSECKP`, the shared tensor container
//! ([`crate::codec`]), a `key = value` header holding the config and
//! counters, and one tensor per parameter and Adam moment.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{architecture, ProseConfig, ProseModel};
use crate::codec::{self, FormatError, Tensor};
use crate::kv;
use crate::linalg::Matrix;
use crate::nn::{AdamConfig, AdamState, DenseLayer, Mlp};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PROSECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
}

/// ChaCha8 position: seed, stream and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ProseModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
}

const META_KEYS: [&str; 11] = [
    "input_dim",
    "epoch",
    "step",
    "adam_step",
    "adam_learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "rng_seed",
    "rng_stream",
    "rng_word_pos",
];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    pub fn config(&self) -> &ProseConfig {
        &self.model.config
    }

    pub fn header_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = self.model.config.to_pairs();
        let a = &self.adam.config;
        pairs.extend(
            [
                ("input_dim", self.model.input_dim.to_string()),
                ("epoch", self.epoch.to_string()),
                ("step", self.step.to_string()),
                ("adam_step", self.adam.step.to_string()),
                ("adam_learning_rate", format!("{:?}", a.learning_rate)),
                ("adam_beta1", format!("{:?}", a.beta1)),
                ("adam_beta2", format!("{:?}", a.beta2)),
                ("adam_epsilon", format!("{:?}", a.epsilon)),
                ("rng_seed", hex(&self.rng.seed)),
                ("rng_stream", self.rng.stream.to_string()),
                ("rng_word_pos", self.rng.word_pos.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        pairs
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("encoder", &self.model.encoder), ("decoder", &self.model.decoder)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push(Tensor::new(
                    format!("{prefix}.{i}.weight"),
                    vec![l.weights.rows(), l.weights.cols()],
                    l.weights.data().to_vec(),
                ));
                out.push(Tensor::new(
                    format!("{prefix}.{i}.bias"),
                    vec![l.bias.len()],
                    l.bias.clone(),
                ));
            }
        }
        for (g, m) in self.adam.first_moment.iter().enumerate() {
            out.push(Tensor::new(format!("adam.m.{g}"), vec![m.len()], m.clone()));
        }
        for (g, v) in self.adam.second_moment.iter().enumerate() {
            out.push(Tensor::new(format!("adam.v.{g}"), vec![v.len()], v.clone()));
        }
        out
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    codec::encode(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &kv::render(&ckpt.header_pairs()),
        &ckpt.tensors(),
    )
}

/// Parses and validates a checkpoint: magic, version, header, the full
/// shape table against the configured architecture, then the checksum.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let c = codec::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let pairs = kv::parse(&c.text).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let (meta, cfg_pairs): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .partition(|(k, _)| META_KEYS.contains(&k.as_str()));
    let config = ProseConfig::from_pairs(ProseConfig::quads(), &cfg_pairs)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let get = |key: &str| -> Result<&str, CheckpointError> {
        kv::get(&meta, key).ok_or_else(|| CheckpointError::Header(format!("missing {key}")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CheckpointError> {
        v.parse()
            .map_err(|_| CheckpointError::Header(format!("bad value {v:?} for {key}")))
    }
    let input_dim: usize = num("input_dim", get("input_dim")?)?;
    let adam_config = AdamConfig {
        learning_rate: num("adam_learning_rate", get("adam_learning_rate")?)?,
        beta1: num("adam_beta1", get("adam_beta1")?)?,
        beta2: num("adam_beta2", get("adam_beta2")?)?,
        epsilon: num("adam_epsilon", get("adam_epsilon")?)?,
    };
    let rng = RngState {
        seed: unhex(get("rng_seed")?)
            .ok_or_else(|| CheckpointError::Header("bad rng_seed".into()))?,
        stream: num("rng_stream", get("rng_stream")?)?,
        word_pos: num("rng_word_pos", get("rng_word_pos")?)?,
    };

    let ((enc_w, enc_a), (dec_w, dec_a)) = architecture(&config, input_dim);
    let layer_count = enc_a.len() + dec_a.len();
    let groups = 2 * layer_count;
    let expected_tensors = groups * 3;
    if c.tensors.len() != expected_tensors {
        return Err(CheckpointError::TensorCount {
            expected: expected_tensors,
            found: c.tensors.len(),
        });
    }
    let mut it = c.tensors.into_iter();
    let mut take = |name: String, dims: Vec<usize>| -> Result<Vec<f64>, CheckpointError> {
        let t = it.next().expect("count checked");
        if t.name != name || t.dims != dims {
            return Err(CheckpointError::Shape {
                name: if t.name == name {
                    name
                } else {
                    format!("{name} (found {:?})", t.name)
                },
                expected: dims,
                found: t.dims,
            });
        }
        Ok(t.data)
    };
    let mut build = |prefix: &str, widths: &[usize], acts: &[crate::nn::Activation]| {
        let mut layers = Vec::new();
        for (i, (w, &activation)) in widths.windows(2).zip(acts).enumerate() {
            let weights = take(format!("{prefix}.{i}.weight"), vec![w[1], w[0]])?;
            let bias = take(format!("{prefix}.{i}.bias"), vec![w[1]])?;
            layers.push(DenseLayer {
                weights: Matrix::from_vec(w[1], w[0], weights).expect("dims checked"),
                bias,
                activation,
            });
        }
        Ok::<_, CheckpointError>(Mlp { layers })
    };
    let encoder = build("encoder", &enc_w, &enc_a)?;
    let decoder = build("decoder", &dec_w, &dec_a)?;
    let sizes: Vec<usize> = encoder
        .param_slices()
        .into_iter()
        .chain(decoder.param_slices())
        .map(<[f64]>::len)
        .collect();
    let mut adam = AdamState::new(adam_config, &sizes);
    adam.step = num("adam_step", get("adam_step")?)?;
    for (g, &n) in sizes.iter().enumerate() {
        adam.first_moment[g] = take(format!("adam.m.{g}"), vec![n])?;
    }
    for (g, &n) in sizes.iter().enumerate() {
        adam.second_moment[g] = take(format!("adam.v.{g}"), vec![n])?;
    }
    Ok(Checkpoint {
        model: ProseModel {
            config,
            input_dim,
            encoder,
            decoder,
        },
        adam,
        epoch: num("epoch", get("epoch")?)?,
        step: num("step", get("step")?)?,
        rng,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
