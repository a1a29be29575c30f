use rand::Rng;
use rand_distr::StandardNormal;

use super::{split_columns, swap_block_flat, Backbone, ProseConfig, ProseModel, Result, TrainError};
use crate::linalg::Matrix;
use crate::nn::{self, MlpGrads, Trace};

/// Random choices for one training step, drawn up front so a step can be
/// replayed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// Example `j` receives a block from `partner[j]`.
    pub partner: Vec<usize>,
    /// Block swapped for example `j`.
    pub swap_block: Vec<usize>,
    /// Standard-normal reparameterization noise (β-VAE only).
    pub noise: Option<Matrix>,
}

impl StepPlan {
    pub fn draw<R: Rng>(rng: &mut R, batch: usize, config: &ProseConfig) -> Result<Self> {
        match config.backbone {
            Backbone::SwapAutoencoder => {
                if batch < 2 {
                    return Err(TrainError::BatchTooSmall(batch));
                }
                Ok(Self {
                    partner: (0..batch).map(|j| (j + 1) % batch).collect(),
                    swap_block: (0..batch).map(|_| rng.random_range(0..config.k)).collect(),
                    noise: None,
                })
            }
            Backbone::BetaVae => Ok(Self {
                partner: Vec::new(),
                swap_block: Vec::new(),
                noise: Some(Matrix::from_fn(batch, config.code_width(), |_, _| {
                    rng.sample(StandardNormal)
                })),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variational {
    pub mu: Matrix,
    pub logvar: Matrix,
    pub noise: Matrix,
}

/// Encoder pass of a training step.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub trace: Trace,
    /// Encoder codes (sampled for the β-VAE), one flattened `d·k` row each.
    pub raw: Matrix,
    pub variational: Option<Variational>,
    /// Codes handed to the decoder: `raw`, or `raw` after the Cayley step.
    pub z: Matrix,
}

impl EncodedBatch {
    pub fn encode(model: &ProseModel, x: &Matrix, plan: &StepPlan) -> Result<Self> {
        if x.cols() != model.input_dim {
            return Err(TrainError::InputWidth {
                expected: model.input_dim,
                got: x.cols(),
            });
        }
        let trace = model.encoder.forward(x)?;
        let (raw, variational) = match model.config.backbone {
            Backbone::SwapAutoencoder => (trace.output().clone(), None),
            Backbone::BetaVae => {
                let (mu, logvar) = split_columns(trace.output(), model.config.code_width());
                let noise = plan
                    .noise
                    .clone()
                    .ok_or_else(|| TrainError::Config("β-VAE step without noise".into()))?;
                let z = nn::gaussian_reparameterize(&mu, &logvar, &noise)?;
                (z, Some(Variational { mu, logvar, noise }))
            }
        };
        Ok(Self {
            z: raw.clone(),
            trace,
            raw,
            variational,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DisentangleOutput {
    /// Mean squared reconstruction error per pixel.
    pub recon: f64,
    /// Swap-cycle reconstruction error (swap backbone) or `β · KL` (β-VAE).
    pub aux: f64,
    /// `∂(recon + aux)/∂z` for the decoder-side codes `z`.
    pub grad_z: Matrix,
    /// Gradient that bypasses `z` and lands directly on the encoder output
    /// (the KL term of the β-VAE).
    pub grad_encoder_out: Option<Matrix>,
    /// Encoder gradients from the re-encoding inside the swap cycle.
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl DisentangleOutput {
    pub fn total(&self) -> f64 {
        self.recon + self.aux
    }
}

/// `Σ (a − b)² / n` and its gradient w.r.t. `a`.
fn mse(pred: &Matrix, target: &Matrix, n: f64) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let diff = p - t;
        loss += diff * diff;
        *g = 2.0 * diff / n;
    }
    (loss / n, grad)
}

/// The backbone's disentangling loss on the decoder-side codes
/// `encoded.z`, with gradients w.r.t. those codes and the parameters.
///
/// * swap: `MSE(g(z_j), x_j) + MSE(g(unswap(f(g(swap(z_j, z_p, i))), z_j, i)), x_j)`
///   where block `i` of `z_j` is replaced by the partner's, decoded,
///   re-encoded, and then restored from `z_j`.
/// * β-VAE: `MSE(g(z), x) + β · mean_batch KL(q(z|x) ‖ N(0, I))`.
pub fn disentangle_loss(
    model: &ProseModel,
    x: &Matrix,
    encoded: &EncodedBatch,
    plan: &StepPlan,
) -> Result<DisentangleOutput> {
    let cfg = &model.config;
    let batch = x.rows();
    let d = cfg.d;
    let n = (batch * model.input_dim) as f64;
    let z = &encoded.z;

    let recon_trace = model.decoder.forward(z)?;
    let (recon, g_recon) = mse(recon_trace.output(), x, n);
    let (dec_recon, mut grad_z) = model.decoder.backward(&recon_trace, &g_recon)?;
    let mut decoder = dec_recon;
    let mut encoder = MlpGrads::zeros_like(&model.encoder);

    match cfg.backbone {
        Backbone::SwapAutoencoder => {
            if batch < 2 {
                return Err(TrainError::BatchTooSmall(batch));
            }
            if plan.partner.len() != batch || plan.swap_block.len() != batch {
                return Err(TrainError::Config(format!(
                    "step plan covers {} examples, batch has {batch}",
                    plan.partner.len()
                )));
            }
            let mut mixed = z.clone();
            for j in 0..batch {
                swap_block_flat(z.row(plan.partner[j]), mixed.row_mut(j), plan.swap_block[j], d);
            }
            let mix_trace = model.decoder.forward(&mixed)?;
            let re_trace = model.encoder.forward(mix_trace.output())?;
            let mut restored = re_trace.output().clone();
            for j in 0..batch {
                swap_block_flat(z.row(j), restored.row_mut(j), plan.swap_block[j], d);
            }
            let back_trace = model.decoder.forward(&restored)?;
            let (aux, g_back) = mse(back_trace.output(), x, n);

            let (dec_back, g_restored) = model.decoder.backward(&back_trace, &g_back)?;
            decoder.accumulate(&dec_back);
            let mut g_re = g_restored.clone();
            for j in 0..batch {
                let i = plan.swap_block[j];
                let src = &g_restored.row(j)[i * d..(i + 1) * d];
                for (g, s) in grad_z.row_mut(j)[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *g += s;
                }
                g_re.row_mut(j)[i * d..(i + 1) * d].fill(0.0);
            }
            let (enc_re, g_mix_img) = model.encoder.backward(&re_trace, &g_re)?;
            encoder.accumulate(&enc_re);
            let (dec_mix, g_mixed) = model.decoder.backward(&mix_trace, &g_mix_img)?;
            decoder.accumulate(&dec_mix);
            for j in 0..batch {
                let i = plan.swap_block[j];
                let row = g_mixed.row(j);
                for (c, g) in row.iter().enumerate() {
                    let owner = if c / d == i { plan.partner[j] } else { j };
                    let cur = grad_z.get(owner, c);
                    grad_z.set(owner, c, cur + g);
                }
            }
            Ok(DisentangleOutput {
                recon,
                aux,
                grad_z,
                grad_encoder_out: None,
                encoder,
                decoder,
            })
        }
        Backbone::BetaVae => {
            let var = encoded
                .variational
                .as_ref()
                .ok_or_else(|| TrainError::Config("β-VAE loss without posterior".into()))?;
            let kl = nn::kl_to_standard_normal(&var.mu, &var.logvar)? / batch as f64;
            let aux = cfg.beta * kl;
            let (g_mu, g_lv) = nn::kl_to_standard_normal_grad(&var.mu, &var.logvar);
            let w = cfg.code_width();
            let scale = cfg.beta / batch as f64;
            let grad_out = Matrix::from_fn(batch, 2 * w, |r, c| {
                if c < w {
                    scale * g_mu.get(r, c)
                } else {
                    scale * g_lv.get(r, c - w)
                }
            });
            Ok(DisentangleOutput {
                recon,
                aux,
                grad_z,
                grad_encoder_out: Some(grad_out),
                encoder,
                decoder,
            })
        }
    }
}
