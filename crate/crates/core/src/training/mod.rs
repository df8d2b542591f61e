//! Optimizers, schedules and the two training phases.
//!
//! Pretraining learns a query encoder `theta_q` by momentum contrast and
//! keeps a key encoder `theta_k` as its moving average. Fine-tuning starts
//! from `theta_k`'s backbone, attaches a classifier and trains with labels.
//!
//! Every random choice derives from one root seed, split into independent
//! streams for data order, the two augmentation views and initialization,
//! so a `(config, seed)` pair reproduces a run exactly.

mod finetune;
mod metrics;
mod optim;
mod pretrain;

pub use finetune::{
    evaluate, finetune, predict_from_logits, EvalReport, FinetuneConfig, Finetuner, SupervisedLoss,
};
pub use metrics::{EpochRecord, Metrics, MetricsLine, Summary};
pub use optim::{lr_multistep, lr_warmup_cosine, milestones_for, AdamW, Sgd};
pub use pretrain::{pretrain, PretrainConfig, Pretrainer, StepReport};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{apply_view, sample_view_params, AugmentPolicy};
use crate::error::{Error, Result};
use crate::events::{bin_events, gen_synthetic_stream, BinningConfig, EventStream, FrameTensor, GeneratorParams};
use crate::snn::stack_frames;
use crate::tensor::Tensor;

/// Independent random streams split from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Data = 1,
    View1 = 2,
    View2 = 3,
    Init = 4,
}

/// Seed of one component; distinct components never share a stream.
pub fn component_seed(root: u64, component: Component) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(component as u64);
    rng.next_u64()
}

/// Generator for one epoch of one component.
pub(crate) fn epoch_rng(root: u64, component: Component, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(root, component));
    rng.set_stream(epoch as u64);
    rng
}

pub(crate) fn shuffled(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// Frames with class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub frames: Vec<FrameTensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(frames: Vec<FrameTensor>, labels: Vec<usize>) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} samples but {} labels",
                frames.len(),
                labels.len()
            )));
        }
        Ok(LabeledSet { frames, labels })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Checks that every sample has shape `(steps, 2, h, w)`.
pub(crate) fn check_frames(frames: &[FrameTensor], steps: usize, res: (usize, usize)) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.steps() != steps || (f.height(), f.width()) != res {
            return Err(Error::Config(format!(
                "sample {i} has shape {:?}, expected ({steps}, 2, {}, {})",
                f.shape(),
                res.0,
                res.1
            )));
        }
    }
    Ok(())
}

/// Stacks the selected samples, optionally warping each with its own view.
pub(crate) fn make_batch(
    frames: &[FrameTensor],
    idx: &[usize],
    views: Option<(&AugmentPolicy, &[u64])>,
) -> Result<Tensor<f32>> {
    match views {
        None => {
            let picked: Vec<&FrameTensor> = idx.iter().map(|&i| &frames[i]).collect();
            stack_frames(&picked)
        }
        Some((policy, seeds)) => {
            let warped: Vec<FrameTensor> = idx
                .par_iter()
                .zip(seeds)
                .map(|(&i, &s)| {
                    let f = &frames[i];
                    apply_view(f, &sample_view_params(policy, f.height(), f.width(), s))
                })
                .collect();
            let refs: Vec<&FrameTensor> = warped.iter().collect();
            stack_frames(&refs)
        }
    }
}

pub(crate) fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} became {loss}")))
    }
}

/// `count` generated recordings; sample `i` has class `i % num_classes`.
pub fn synthetic_streams(params: &GeneratorParams, count: usize, seed: u64) -> Result<Vec<(EventStream, usize)>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    seeds
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| gen_synthetic_stream(i % params.num_classes, s, params))
        .collect()
}

/// [`synthetic_streams`] binned into `steps` windows each.
pub fn synthetic_set(params: &GeneratorParams, steps: usize, count: usize, seed: u64) -> Result<LabeledSet> {
    let binning = BinningConfig::new(steps);
    let samples: Vec<(FrameTensor, usize)> = synthetic_streams(params, count, seed)?
        .into_par_iter()
        .map(|(stream, label)| Ok((bin_events(&stream, &binning)?.frames, label)))
        .collect::<Result<_>>()?;
    let (frames, labels) = samples.into_iter().unzip();
    LabeledSet::new(frames, labels)
}
