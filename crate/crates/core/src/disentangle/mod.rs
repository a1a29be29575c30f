//! Block-partitioned encoder/decoder training with orthonormal latent
//! blocks.
//!
//! The latent code of an example is a `d × k` matrix (see
//! [`LatentBlocks`]). Training minimizes the backbone's disentangling loss
//! plus `lambda_orth · ‖ZᵀZ − I‖²_F` (averaged over the batch), and, when
//! enabled, passes each code through one Cayley retraction before decoding.
//! The retraction only runs while training; [`ProseModel::codes`] and
//! [`ProseModel::decode`] never apply it.

mod checkpoint;
mod config;
mod loss;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Backbone, JacobianSource, ProseConfig};
pub use loss::{disentangle_loss, DisentangleOutput, EncodedBatch, StepPlan};
pub use train::{metrics_csv, train, EpochMetrics, StepMetrics, TrainOutcome, Trainer};

use rand::Rng;
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::manifold::{LatentBlocks, ManifoldError};
use crate::nn::{Activation, Mlp, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {component} loss ({value})")]
    Divergence { component: &'static str, value: f64 },
    #[error("batch of {0} examples is too small to form swap pairs")]
    BatchTooSmall(usize),
    #[error("block index {index} out of range for k = {k}")]
    BlockIndex { index: usize, k: usize },
    #[error("input width {got} does not match model input {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Encoder and decoder for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProseModel {
    pub config: ProseConfig,
    pub input_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Layer widths and activations `(encoder, decoder)` for a config.
pub fn architecture(
    config: &ProseConfig,
    input_dim: usize,
) -> ((Vec<usize>, Vec<Activation>), (Vec<usize>, Vec<Activation>)) {
    let out = match config.backbone {
        Backbone::SwapAutoencoder => config.code_width(),
        Backbone::BetaVae => 2 * config.code_width(),
    };
    let mut enc = vec![input_dim];
    enc.extend(&config.hidden);
    enc.push(out);
    let mut enc_act = vec![Activation::Tanh; config.hidden.len()];
    enc_act.push(Activation::Identity);

    let mut dec = vec![config.code_width()];
    dec.extend(config.hidden.iter().rev());
    dec.push(input_dim);
    let mut dec_act = vec![Activation::Tanh; config.hidden.len()];
    dec_act.push(Activation::Sigmoid);
    ((enc, enc_act), (dec, dec_act))
}

impl ProseModel {
    pub fn new<R: Rng>(config: ProseConfig, input_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ((enc, enc_act), (dec, dec_act)) = architecture(&config, input_dim);
        let encoder = Mlp::init(&enc, &enc_act, rng);
        let decoder = Mlp::init(&dec, &dec_act, rng);
        Ok(Self {
            config,
            input_dim,
            encoder,
            decoder,
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(TrainError::InputWidth {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Test-time codes, one flattened `d·k` row per input row (block-major,
    /// see [`LatentBlocks::from_flat`]). The β-VAE backbone returns the
    /// posterior mean. No Cayley step is applied.
    pub fn codes(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let out = self.encoder.predict(x)?;
        Ok(match self.config.backbone {
            Backbone::SwapAutoencoder => out,
            Backbone::BetaVae => split_columns(&out, self.config.code_width()).0,
        })
    }

    pub fn encode(&self, x: &Matrix) -> Result<Vec<LatentBlocks>> {
        let codes = self.codes(x)?;
        (0..codes.rows())
            .map(|r| Ok(LatentBlocks::from_flat(codes.row(r), self.config.d, self.config.k)?))
            .collect()
    }

    /// `(mu, logvar, z)` for the β-VAE backbone with caller-supplied
    /// standard-normal noise of shape `batch × d·k`.
    pub fn encode_variational(&self, x: &Matrix, noise: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        self.check_input(x)?;
        if self.config.backbone != Backbone::BetaVae {
            return Err(TrainError::Config(
                "variational encoding needs the bvae backbone".into(),
            ));
        }
        let out = self.encoder.predict(x)?;
        let (mu, logvar) = split_columns(&out, self.config.code_width());
        let z = crate::nn::gaussian_reparameterize(&mu, &logvar, noise)?;
        Ok((mu, logvar, z))
    }

    /// Decodes flattened codes (one per row) to images in `[0, 1]`.
    pub fn decode_flat(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.config.code_width() {
            return Err(TrainError::InputWidth {
                expected: self.config.code_width(),
                got: z.cols(),
            });
        }
        Ok(self.decoder.predict(z)?)
    }

    pub fn decode(&self, z: &[LatentBlocks]) -> Result<Matrix> {
        let mut flat = Matrix::zeros(z.len(), self.config.code_width());
        for (r, blocks) in z.iter().enumerate() {
            if blocks.d() != self.config.d || blocks.k() != self.config.k {
                return Err(TrainError::Config(format!(
                    "latent shape {}x{} vs configured {}x{}",
                    blocks.d(),
                    blocks.k(),
                    self.config.d,
                    self.config.k
                )));
            }
            blocks.write_flat(flat.row_mut(r));
        }
        self.decode_flat(&flat)
    }
}

/// Splits the columns of `m` at `at`.
pub(crate) fn split_columns(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    let left = Matrix::from_fn(m.rows(), at, |r, c| m.get(r, c));
    let right = Matrix::from_fn(m.rows(), m.cols() - at, |r, c| m.get(r, c + at));
    (left, right)
}

/// Returns `zb` with block `i` taken from `za`.
pub fn swap_blocks(za: &LatentBlocks, zb: &LatentBlocks, i: usize) -> Result<LatentBlocks> {
    if za.matrix().shape() != zb.matrix().shape() {
        return Err(LinalgError::Shape {
            op: "swap_blocks",
            left: za.matrix().shape(),
            right: zb.matrix().shape(),
        }
        .into());
    }
    if i >= zb.k() {
        return Err(TrainError::BlockIndex { index: i, k: zb.k() });
    }
    let mut out = zb.matrix().clone();
    out.set_column(i, &za.block(i));
    Ok(LatentBlocks::new(out)?)
}

/// Flat-layout variant of [`swap_blocks`]: copies block `i` of `donor` into
/// `target` in place.
pub(crate) fn swap_block_flat(donor: &[f64], target: &mut [f64], i: usize, d: usize) {
    target[i * d..(i + 1) * d].copy_from_slice(&donor[i * d..(i + 1) * d]);
}
