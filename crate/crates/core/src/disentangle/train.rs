use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{disentangle_loss, EncodedBatch, StepPlan};
use super::{Backbone, Checkpoint, JacobianSource, ProseConfig, ProseModel, Result, RngState, TrainError};
use crate::data::{FactorDataset, Split};
use crate::linalg::Matrix;
use crate::manifold::{self, CayleyConfig, CayleyTrace, LatentBlocks};
use crate::nn::{AdamConfig, AdamState, MlpGrads};

/// Loss components of one step. `total == recon + aux + orth` exactly;
/// `orth` is the weighted term `lambda_orth · orth_penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub recon: f64,
    pub aux: f64,
    pub orth: f64,
    /// Batch mean of `‖ZᵀZ − I‖²_F` before weighting.
    pub orth_penalty: f64,
    pub total: f64,
    /// Largest `‖Z_newᵀZ_new − ZᵀZ‖_F` over the batch when the Cayley step ran.
    pub gram_drift: Option<f64>,
}

/// Per-epoch means, one metrics CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub recon: f64,
    pub aux: f64,
    pub orth: f64,
    pub total: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,step,recon,aux,orth,total\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.step, r.recon, r.aux, r.orth, r.total
        ));
    }
    s
}

/// Cayley bookkeeping for one example.
struct Stepped {
    raw: LatentBlocks,
    jacobian: Matrix,
    trace: CayleyTrace,
}

/// Everything the reverse pass of a step needs.
pub(crate) struct Gradients {
    pub metrics: StepMetrics,
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

pub struct Trainer {
    pub model: ProseModel,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

fn finite(component: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::Divergence { component, value })
    }
}

impl Trainer {
    /// Fresh model and optimizer; every random choice flows from
    /// `config.seed`.
    pub fn new(config: ProseConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adam_config = AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        };
        let model = ProseModel::new(config, input_dim, &mut rng)?;
        let shapes: Vec<usize> = model
            .encoder
            .param_slices()
            .into_iter()
            .chain(model.decoder.param_slices())
            .map(<[f64]>::len)
            .collect();
        Ok(Self {
            model,
            adam: AdamState::new(adam_config, &shapes),
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Self {
            model: ckpt.model.clone(),
            adam: ckpt.adam.clone(),
            rng,
            epoch: ckpt.epoch,
            step: ckpt.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    pub fn config(&self) -> &ProseConfig {
        &self.model.config
    }

    /// Draws the step's random choices from the trainer's RNG and runs
    /// [`Trainer::step_with_plan`].
    pub fn train_step(&mut self, x: &Matrix) -> Result<StepMetrics> {
        let plan = StepPlan::draw(&mut self.rng, x.rows(), &self.model.config)?;
        self.step_with_plan(x, &plan)
    }

    /// Forward, backward and one Adam update with a fixed plan.
    pub fn step_with_plan(&mut self, x: &Matrix, plan: &StepPlan) -> Result<StepMetrics> {
        let grads = self.gradients(x, plan)?;
        let mut params: Vec<&mut [f64]> = self
            .model
            .encoder
            .param_slices_mut()
            .into_iter()
            .chain(self.model.decoder.param_slices_mut())
            .collect();
        let flat: Vec<&[f64]> = grads
            .encoder
            .slices()
            .into_iter()
            .chain(grads.decoder.slices())
            .collect();
        self.adam.step(&mut params, &flat).map_err(TrainError::from)?;
        self.step += 1;
        Ok(grads.metrics)
    }

    /// Loss and parameter gradients of the full objective for one batch,
    /// without touching the parameters.
    pub fn loss_and_gradients(&self, x: &Matrix, plan: &StepPlan) -> Result<(StepMetrics, MlpGrads, MlpGrads)> {
        let g = self.gradients(x, plan)?;
        Ok((g.metrics, g.encoder, g.decoder))
    }

    pub(crate) fn gradients(&self, x: &Matrix, plan: &StepPlan) -> Result<Gradients> {
        let model = &self.model;
        let cfg = &model.config;
        let (d, k) = (cfg.d, cfg.k);
        let batch = x.rows();
        if batch == 0 {
            return Err(TrainError::EmptyDataset);
        }

        let mut encoded = EncodedBatch::encode(model, x, plan)?;
        let raw_blocks: Vec<LatentBlocks> = (0..batch)
            .map(|j| LatentBlocks::from_flat(encoded.raw.row(j), d, k))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| TrainError::Divergence {
                component: "latent",
                value: f64::NAN,
            })?;

        let mut stepped: Vec<Stepped> = Vec::new();
        let mut gram_drift = None;
        if cfg.cayley_enabled {
            let cayley = CayleyConfig::with_tau(cfg.tau);
            let jacobians = self.jacobians(x, &encoded, &raw_blocks)?;
            let mut drift: f64 = 0.0;
            for (j, (raw, jac)) in raw_blocks.iter().zip(jacobians).enumerate() {
                let trace = manifold::cayley_step_traced(raw, &jac, &cayley)?;
                trace.z_new.write_flat(encoded.z.row_mut(j));
                let moved = trace.z_new.gram().sub(&raw.gram())?.frobenius_norm();
                drift = drift.max(moved);
                stepped.push(Stepped {
                    raw: raw.clone(),
                    jacobian: jac,
                    trace,
                });
            }
            gram_drift = Some(drift);
        }

        let out = disentangle_loss(model, x, &encoded, plan)?;
        let recon = finite("recon", out.recon)?;
        let aux = finite("aux", out.aux)?;
        let orth_penalty = finite(
            "orth",
            raw_blocks.iter().map(manifold::orth_penalty).sum::<f64>() / batch as f64,
        )?;
        let orth = cfg.lambda_orth * orth_penalty;
        let total = finite("total", recon + aux + orth)?;

        // ∂/∂(raw code) = Cayley VJP of ∂/∂z, plus the penalty gradient.
        let mut grad_raw = out.grad_z;
        if cfg.cayley_enabled {
            let cayley = CayleyConfig::with_tau(cfg.tau);
            for (j, s) in stepped.iter().enumerate() {
                let upstream = manifold::flat_to_matrix(grad_raw.row(j), d, k);
                let (mut gz, gj) =
                    manifold::cayley_vjp_traced(&s.raw, &s.jacobian, &cayley, &s.trace, &upstream)?;
                if cfg.cayley_jacobian == JacobianSource::OrthPenalty {
                    gz.axpy(1.0, &manifold::orth_penalty_grad_vjp(&s.raw, &gj)?)?;
                }
                manifold::matrix_to_flat(&gz, grad_raw.row_mut(j));
            }
        }
        if cfg.lambda_orth != 0.0 {
            let scale = cfg.lambda_orth / batch as f64;
            for (j, raw) in raw_blocks.iter().enumerate() {
                let g = manifold::orth_penalty_grad(raw);
                let row = grad_raw.row_mut(j);
                for c in 0..k {
                    for r in 0..d {
                        row[c * d + r] += scale * g.get(r, c);
                    }
                }
            }
        }

        let grad_enc_out = match cfg.backbone {
            Backbone::SwapAutoencoder => grad_raw,
            Backbone::BetaVae => {
                let var = encoded.variational.as_ref().expect("β-VAE encode sets posterior");
                let w = cfg.code_width();
                let mut g = out
                    .grad_encoder_out
                    .expect("β-VAE loss returns encoder-output gradient");
                for r in 0..batch {
                    for c in 0..w {
                        let gz = grad_raw.get(r, c);
                        let std = (0.5 * var.logvar.get(r, c)).exp();
                        let mu_g = g.get(r, c) + gz;
                        let lv_g = g.get(r, w + c) + gz * var.noise.get(r, c) * 0.5 * std;
                        g.set(r, c, mu_g);
                        g.set(r, w + c, lv_g);
                    }
                }
                g
            }
        };
        let (mut encoder, _) = model.encoder.backward(&encoded.trace, &grad_enc_out)?;
        encoder.accumulate(&out.encoder);

        Ok(Gradients {
            metrics: StepMetrics {
                recon,
                aux,
                orth,
                orth_penalty,
                total,
                gram_drift,
            },
            encoder,
            decoder: out.decoder,
        })
    }

    /// The `J` of each example's Cayley skew.
    fn jacobians(&self, x: &Matrix, encoded: &EncodedBatch, raw: &[LatentBlocks]) -> Result<Vec<Matrix>> {
        let cfg = &self.model.config;
        match cfg.cayley_jacobian {
            JacobianSource::OrthPenalty => Ok(raw.iter().map(manifold::orth_penalty_grad).collect()),
            JacobianSource::Objective => {
                // per-example mean-pixel reconstruction loss through a
                // look-ahead decoder pass, plus the weighted penalty
                let trace = self.model.decoder.forward(&encoded.raw)?;
                let p = self.model.input_dim as f64;
                let mut g = trace.output().sub(x)?;
                g = g.scale(2.0 / p);
                let (_, grad) = self.model.decoder.backward(&trace, &g)?;
                raw.iter()
                    .enumerate()
                    .map(|(j, z)| {
                        let mut jac = manifold::flat_to_matrix(grad.row(j), cfg.d, cfg.k);
                        if cfg.lambda_orth != 0.0 {
                            jac.axpy(cfg.lambda_orth, &manifold::orth_penalty_grad(z))?;
                        }
                        Ok(jac)
                    })
                    .collect()
            }
        }
    }

    /// One pass over the training split in a freshly shuffled order.
    pub fn run_epoch(&mut self, dataset: &FactorDataset) -> Result<EpochMetrics> {
        let mut order = dataset.indices(Split::Train);
        if order.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        order.shuffle(&mut self.rng);
        let min_batch = match self.model.config.backbone {
            Backbone::SwapAutoencoder => 2,
            Backbone::BetaVae => 1,
        };
        let (mut recon, mut aux, mut orth, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.model.config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let m = self.train_step(&dataset.batch(chunk))?;
            if let Some(drift) = m.gram_drift {
                debug!("step {}: cayley gram drift {drift:e}", self.step);
            }
            recon += m.recon;
            aux += m.aux;
            orth += m.orth;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps.max(1) as f64;
        let (recon, aux, orth) = (recon / n, aux / n, orth / n);
        Ok(EpochMetrics {
            epoch: self.epoch,
            step: self.step,
            recon,
            aux,
            orth,
            total: recon + aux + orth,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains from scratch for `config.epochs` epochs. Deterministic in
/// `(config, dataset)`.
pub fn train(config: &ProseConfig, dataset: &FactorDataset) -> Result<TrainOutcome> {
    if dataset.is_empty() || dataset.indices(Split::Train).is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut trainer = Trainer::new(config.clone(), dataset.images.cols())?;
    let mut metrics = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let row = trainer.run_epoch(dataset)?;
        info!(
            "epoch {:>3} step {:>6}  recon {:.6}  aux {:.6}  orth {:.6}  total {:.6}",
            row.epoch, row.step, row.recon, row.aux, row.orth, row.total
        );
        metrics.push(row);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}
