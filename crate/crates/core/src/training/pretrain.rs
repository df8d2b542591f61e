use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_finite, check_frames, component_seed, epoch_rng, lr_multistep, make_batch, milestones_for, shuffled,
    Component, EpochRecord, Metrics, Sgd,
};
use crate::augment::AugmentPolicy;
use crate::contrastive::{enqueue, loss_mix, similarity_logits, ContrastiveConfig, EncoderPair, QueueState};
use crate::error::{Error, Result};
use crate::events::FrameTensor;
use crate::snn::{apply_bn_updates, init_projection_head, projection_head, Backbone, BackboneConfig, BnMode};
use crate::tensor::{Gradients, ParamStore, Tape, Tensor};

const NORM_EPS: f32 = 1e-12;

/// Contrastive pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Key-encoder momentum `m`.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the learning rate drops by `lr_gamma`.
    pub milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentPolicy,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl PretrainConfig {
    /// Full-scale schedule.
    pub fn paper() -> Self {
        PretrainConfig {
            steps: 16,
            momentum: 0.999,
            batch_size: 32,
            epochs: 200,
            lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![0.6, 0.8],
            lr_gamma: 0.1,
            contrastive: ContrastiveConfig {
                queue_len: 4096,
                ..ContrastiveConfig::default()
            },
            augment: AugmentPolicy::default(),
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }

    /// Workstation-sized schedule on 32x32 synthetic data.
    pub fn desk() -> Self {
        PretrainConfig {
            momentum: 0.99,
            epochs: 20,
            contrastive: ContrastiveConfig::default(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("pretrain steps, batch_size and epochs must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("pretrain lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return bad("sgd momentum must be in [0, 1) and weight decay non-negative".into());
        }
        if self.milestones.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.lr_gamma > 0.0) {
            return bad("milestones must be fractions in [0, 1] and gamma positive".into());
        }
        if self.batch_size > self.contrastive.queue_len {
            return bad(format!(
                "batch size {} exceeds queue length {}",
                self.batch_size, self.contrastive.queue_len
            ));
        }
        self.contrastive.validate()?;
        self.augment.validate()?;
        self.backbone.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_multistep(epoch, self.lr, &milestones_for(self.epochs, &self.milestones), self.lr_gamma)
    }
}

/// Outcome of one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    /// Gradients of the query encoder.
    pub grads_q: Gradients<f32>,
    /// Gradients found on the key encoder's leaves; always empty.
    pub grads_k: Gradients<f32>,
}

/// Momentum-contrast training state.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    cfg: PretrainConfig,
    backbone: Backbone,
    pair: EncoderPair<f32>,
    queue: QueueState<f32>,
    opt: Sgd<f32>,
    epochs_done: usize,
    metrics: Metrics,
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(cfg.seed, Component::Init));
        let mut theta = backbone.init_params(&mut rng);
        let dim = cfg.backbone.embed_dim;
        init_projection_head(&mut theta, dim, &mut rng);
        let (steps, len) = (cfg.steps, cfg.contrastive.queue_len);
        let queue = if cfg.contrastive.prefill_random {
            QueueState::random(steps, len, dim, &mut rng)?
        } else {
            QueueState::empty(steps, len, dim)?
        };
        Ok(Pretrainer {
            pair: EncoderPair::new(theta, cfg.momentum)?,
            opt: Sgd::new(cfg.sgd_momentum, cfg.weight_decay),
            cfg,
            backbone,
            queue,
            epochs_done: 0,
            metrics: Metrics::default(),
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn pair(&self) -> &EncoderPair<f32> {
        &self.pair
    }

    pub fn queue(&self) -> &QueueState<f32> {
        &self.queue
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Both encoders under `q.` and `k.` prefixes.
    pub fn checkpoint_store(&self) -> ParamStore<f32> {
        let mut out = self.pair.theta_q.prefixed("q.");
        out.extend_from(&self.pair.theta_k.prefixed("k."));
        out
    }

    /// One update on a pair of views, each `(T, N, 2, H, W)`.
    pub fn step(&mut self, xq: &Tensor<f32>, xk: &Tensor<f32>, lr: f64) -> Result<StepReport> {
        let (alpha, beta, tau) = (self.cfg.contrastive.alpha, self.cfg.contrastive.beta, self.cfg.contrastive.temperature);

        let key_tape = Tape::new();
        let key_bind = self.pair.theta_k.bind(&key_tape, false);
        let key_in = key_tape.constant(xk.clone());
        let key_out = self.backbone.forward(&key_bind, &self.pair.theta_k, key_in, BnMode::Train)?;
        let k = projection_head(&key_bind, key_out.embeddings)?.l2_normalize(2, NORM_EPS)?;
        let keys = (*k.value()).clone();

        let tape = Tape::new();
        let bind = self.pair.theta_q.bind(&tape, true);
        let input = tape.constant(xq.clone());
        let out = self.backbone.forward(&bind, &self.pair.theta_q, input, BnMode::Train)?;
        let q = projection_head(&bind, out.embeddings)?.l2_normalize(2, NORM_EPS)?;
        let logits = similarity_logits(q, tape.constant(keys.clone()), &self.queue, tau)?;
        let loss = loss_mix(logits, alpha, beta)?;
        let value = loss.value().item()? as f64;
        check_finite(value, "pretraining loss")?;
        tape.backward(loss)?;
        let grads_q = bind.gradients();
        let grads_k = key_bind.gradients();

        self.opt.step(&mut self.pair.theta_q, &grads_q, lr)?;
        let bn_m = self.cfg.backbone.bn_momentum;
        apply_bn_updates(&mut self.pair.theta_q, &out.bn_updates, bn_m)?;
        apply_bn_updates(&mut self.pair.theta_k, &key_out.bn_updates, bn_m)?;
        self.pair.momentum_update()?;
        enqueue(&mut self.queue, &keys)?;
        Ok(StepReport {
            loss: value,
            grads_q,
            grads_k,
        })
    }

    /// One pass over `pool` in a seed-determined order; returns the mean
    /// loss per sample.
    pub fn run_epoch(&mut self, pool: &[FrameTensor]) -> Result<f64> {
        check_frames(pool, self.cfg.steps, self.cfg.backbone.resolution)?;
        let epoch = self.epochs_done;
        let seed = self.cfg.seed;
        let order = shuffled(pool.len(), &mut epoch_rng(seed, Component::Data, epoch));
        let mut r1 = epoch_rng(seed, Component::View1, epoch);
        let mut r2 = epoch_rng(seed, Component::View2, epoch);
        let seeds1: Vec<u64> = order.iter().map(|_| r1.next_u64()).collect();
        let seeds2: Vec<u64> = order.iter().map(|_| r2.next_u64()).collect();
        let lr = self.cfg.lr_at(epoch);
        let policy = self.cfg.augment.clone();
        let mut total = 0.0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let at = b * self.cfg.batch_size;
            let s1 = &seeds1[at..at + idx.len()];
            let s2 = &seeds2[at..at + idx.len()];
            let xq = make_batch(pool, idx, Some((&policy, s1)))?;
            let xk = make_batch(pool, idx, Some((&policy, s2)))?;
            total += self.step(&xq, &xk, lr)?.loss * idx.len() as f64;
        }
        self.epochs_done += 1;
        Ok(total / pool.len() as f64)
    }
}

/// Runs the full schedule. `on_epoch` sees the state after each epoch, e.g.
/// to write a checkpoint.
pub fn pretrain(
    cfg: PretrainConfig,
    pool: &[FrameTensor],
    mut on_epoch: impl FnMut(&Pretrainer) -> Result<()>,
) -> Result<Pretrainer> {
    let mut trainer = Pretrainer::new(cfg)?;
    check_frames(pool, trainer.cfg.steps, trainer.cfg.backbone.resolution)?;
    for epoch in 0..trainer.cfg.epochs {
        let start = Instant::now();
        let lr = trainer.cfg.lr_at(epoch);
        let loss = trainer.run_epoch(pool)?;
        let record = EpochRecord {
            phase: "pretrain".into(),
            epoch,
            loss,
            lr,
            train_acc: None,
            test_acc: None,
        };
        trainer.metrics.push(record, start.elapsed().as_secs_f64());
        on_epoch(&trainer)?;
    }
    Ok(trainer)
}
