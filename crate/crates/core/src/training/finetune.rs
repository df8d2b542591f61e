use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    check_finite, check_frames, component_seed, epoch_rng, lr_warmup_cosine, make_batch, shuffled, AdamW,
    Component, EpochRecord, LabeledSet, Metrics,
};
use crate::augment::AugmentPolicy;
use crate::contrastive::{check_mix, loss_mac_with, loss_mbc_with, loss_mix_with};
use crate::error::{Error, Result};
use crate::snn::{
    apply_bn_updates, classification_head, init_classification_head, Backbone, BackboneConfig, BnMode,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// How per-time-step class logits are reduced to a training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SupervisedLoss {
    /// Cross-entropy at every time step, then the mean.
    #[default]
    Mac,
    /// Cross-entropy of the time-averaged logits.
    Mbc,
    Mix { alpha: f64, beta: f64 },
}

impl SupervisedLoss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SupervisedLoss::Mix { alpha, beta } => check_mix(alpha, beta),
            _ => Ok(()),
        }
    }

    pub fn apply<'t>(&self, logits: Var<'t, f32>, labels: &[usize]) -> Result<Var<'t, f32>> {
        match *self {
            SupervisedLoss::Mac => loss_mac_with(logits, labels),
            SupervisedLoss::Mbc => loss_mbc_with(logits, labels),
            SupervisedLoss::Mix { alpha, beta } => loss_mix_with(logits, labels, alpha, beta),
        }
    }
}

/// Supervised training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub num_classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub loss: SupervisedLoss,
    /// Train only the classifier on a frozen backbone.
    pub linear_probe: bool,
    /// Random views of the training samples, if any.
    pub augment: Option<AugmentPolicy>,
    pub eval_batch_size: usize,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn paper() -> Self {
        FinetuneConfig {
            steps: 16,
            num_classes: 10,
            batch_size: 16,
            epochs: 100,
            lr: 0.001,
            weight_decay: 0.06,
            warmup_epochs: 30,
            loss: SupervisedLoss::Mac,
            linear_probe: false,
            augment: None,
            eval_batch_size: 64,
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        FinetuneConfig {
            num_classes: 4,
            epochs: 10,
            warmup_epochs: 3,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.epochs == 0 || self.eval_batch_size == 0 {
            return bad("finetune steps, batch sizes and epochs must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup of {} epochs exceeds {} epochs",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return bad("finetune lr and weight decay must be finite and non-negative".into());
        }
        self.loss.validate()?;
        if let Some(policy) = &self.augment {
            policy.validate()?;
        }
        self.backbone.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_warmup_cosine(epoch, self.lr, self.warmup_epochs, self.epochs)
    }

    fn check_labels(&self, set: &LabeledSet) -> Result<()> {
        check_frames(&set.frames, self.steps, self.backbone.resolution)?;
        match set.labels.iter().find(|&&y| y >= self.num_classes) {
            Some(y) => Err(Error::Config(format!(
                "label {y} does not fit a {}-class head",
                self.num_classes
            ))),
            None => Ok(()),
        }
    }
}

/// Index of the largest time-averaged logit per sample; ties go to the
/// lowest class index.
pub fn predict_from_logits(logits: &Tensor<f32>) -> Vec<usize> {
    let &[t, n, k] = logits.shape() else {
        return Vec::new();
    };
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mean = |c: usize| (0..t).map(|s| d[(s * n + i) * k + c]).sum::<f32>() / t as f32;
            let mut best = 0;
            let mut top = mean(0);
            for c in 1..k {
                let v = mean(c);
                if v > top {
                    best = c;
                    top = v;
                }
            }
            best
        })
        .collect()
}

/// Accuracy with its confusion matrix, `confusion[truth][predicted]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

fn predict_batch(backbone: &Backbone, store: &ParamStore<f32>, x: Tensor<f32>) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let bind = store.bind(&tape, false);
    let out = backbone.forward(&bind, store, tape.constant(x), BnMode::Eval)?;
    let logits = classification_head(&bind, out.embeddings)?;
    Ok(predict_from_logits(&logits.value()))
}

/// Classifies `set` with batch norm in inference mode. Batches run in
/// parallel; the result does not depend on the batch size.
pub fn evaluate(backbone: &Backbone, store: &ParamStore<f32>, set: &LabeledSet, batch_size: usize) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty set".into()));
    }
    let classes = store.get("cls.bias")?.len();
    if let Some(y) = set.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Config(format!("label {y} does not fit a {classes}-class head")));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<Vec<usize>> = idx
        .chunks(batch_size.max(1))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| predict_batch(backbone, store, make_batch(&set.frames, chunk, None)?))
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = chunks.into_iter().flatten().collect();
    let mut confusion = vec![vec![0; classes]; classes];
    for (&y, &p) in set.labels.iter().zip(&predictions) {
        confusion[y][p] += 1;
    }
    let correct = (0..classes).map(|c| confusion[c][c]).sum::<usize>();
    Ok(EvalReport {
        accuracy: correct as f64 / set.len() as f64,
        correct,
        total: set.len(),
        predictions,
        confusion,
    })
}

/// Classifier training state.
#[derive(Clone, Debug)]
pub struct Finetuner {
    cfg: FinetuneConfig,
    backbone: Backbone,
    store: ParamStore<f32>,
    opt: AdamW<f32>,
    epochs_done: usize,
    metrics: Metrics,
}

impl Finetuner {
    /// Fresh backbone and classifier; `init`, if given, must supply every
    /// backbone entry by its bare name.
    pub fn new(cfg: FinetuneConfig, init: Option<&ParamStore<f32>>) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(cfg.seed, Component::Init));
        let mut store: ParamStore<f32> = backbone.init_params(&mut rng);
        if let Some(init) = init {
            let expected = store.len();
            let loaded = store.load_matching(init)?;
            if loaded != expected {
                let missing: Vec<&str> = store
                    .iter()
                    .map(|p| p.name.as_str())
                    .filter(|n| !init.contains(n))
                    .collect();
                return Err(Error::Integrity(format!(
                    "initial weights lack {} backbone entries, e.g. `{}`",
                    missing.len(),
                    missing.first().copied().unwrap_or("?")
                )));
            }
        }
        init_classification_head(&mut store, cfg.backbone.embed_dim, cfg.num_classes, &mut rng);
        if cfg.linear_probe {
            store.set_frozen("", true);
            store.set_frozen("cls.", false);
        }
        Ok(Finetuner {
            opt: AdamW::new(cfg.weight_decay),
            cfg,
            backbone,
            store,
            epochs_done: 0,
            metrics: Metrics::default(),
        })
    }

    /// Backbone weights of a pretraining checkpoint's key encoder.
    pub fn from_checkpoint(cfg: FinetuneConfig, checkpoint: &ParamStore<f32>) -> Result<Self> {
        let keys = checkpoint.strip_prefix("k.");
        if keys.is_empty() {
            return Err(Error::Integrity("checkpoint has no `k.` entries".into()));
        }
        Self::new(cfg, Some(&keys))
    }

    pub fn config(&self) -> &FinetuneConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    fn bn_mode(&self) -> BnMode {
        if self.cfg.linear_probe {
            BnMode::Eval
        } else {
            BnMode::Train
        }
    }

    /// One update; returns the loss and the batch's predictions.
    pub fn step(&mut self, x: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<(f64, Vec<usize>)> {
        let tape = Tape::new();
        let bind = self.store.bind(&tape, true);
        let mode = self.bn_mode();
        let out = self.backbone.forward(&bind, &self.store, tape.constant(x.clone()), mode)?;
        let logits = classification_head(&bind, out.embeddings)?;
        let preds = predict_from_logits(&logits.value());
        let loss = self.cfg.loss.apply(logits, labels)?;
        let value = loss.value().item()? as f64;
        check_finite(value, "fine-tuning loss")?;
        tape.backward(loss)?;
        self.opt.step(&mut self.store, &bind.gradients(), lr)?;
        apply_bn_updates(&mut self.store, &out.bn_updates, self.cfg.backbone.bn_momentum)?;
        Ok((value, preds))
    }

    /// One pass over `train`; returns mean loss and training accuracy.
    pub fn run_epoch(&mut self, train: &LabeledSet) -> Result<(f64, f64)> {
        self.cfg.check_labels(train)?;
        let epoch = self.epochs_done;
        let order = shuffled(train.len(), &mut epoch_rng(self.cfg.seed, Component::Data, epoch));
        let mut view_rng = epoch_rng(self.cfg.seed, Component::View1, epoch);
        let seeds: Vec<u64> = order.iter().map(|_| view_rng.next_u64()).collect();
        let lr = self.cfg.lr_at(epoch);
        let (mut total, mut correct) = (0.0, 0);
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let at = b * self.cfg.batch_size;
            let views = self.cfg.augment.as_ref().map(|p| (p, &seeds[at..at + idx.len()]));
            let x = make_batch(&train.frames, idx, views)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, preds) = self.step(&x, &labels, lr)?;
            total += loss * idx.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        self.epochs_done += 1;
        Ok((total / train.len() as f64, correct as f64 / train.len() as f64))
    }

    pub fn evaluate(&self, set: &LabeledSet) -> Result<EvalReport> {
        evaluate(&self.backbone, &self.store, set, self.cfg.eval_batch_size)
    }
}

/// Runs the full schedule, scoring `test` after every epoch.
pub fn finetune(
    cfg: FinetuneConfig,
    init: Option<&ParamStore<f32>>,
    train: &LabeledSet,
    test: &LabeledSet,
    mut on_epoch: impl FnMut(&Finetuner) -> Result<()>,
) -> Result<Finetuner> {
    let mut tuner = Finetuner::new(cfg, init)?;
    tuner.cfg.check_labels(train)?;
    tuner.cfg.check_labels(test)?;
    for epoch in 0..tuner.cfg.epochs {
        let start = Instant::now();
        let lr = tuner.cfg.lr_at(epoch);
        let (loss, train_acc) = tuner.run_epoch(train)?;
        let report = tuner.evaluate(test)?;
        let record = EpochRecord {
            phase: "finetune".into(),
            epoch,
            loss,
            lr,
            train_acc: Some(train_acc),
            test_acc: Some(report.accuracy),
        };
        tuner.metrics.push(record, start.elapsed().as_secs_f64());
        on_epoch(&tuner)?;
    }
    Ok(tuner)
}
