//! Momentum-contrast self-supervised pretraining for spiking neural networks
//! on event-camera data.
//!
//! - [`events`]: event streams, binning into time frames, file formats and a
//!   synthetic generator.
//! - [`tensor`]: dense tensors with a reverse-mode tape and finite-difference
//!   checks.
//! - [`snn`]: LIF neurons and the SEW residual backbone.
//! - [`augment`]: time-consistent geometric views.
//! - [`contrastive`]: the key queue, similarity logits and the time-aware
//!   InfoNCE reductions.
//! - [`training`]: pretraining, fine-tuning, schedules and metrics.
//! - [`cli`]: the `neuromoco` command.

pub mod augment;
pub mod cli;
pub mod contrastive;
pub mod error;
pub mod events;
pub mod snn;
mod io_util;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/spiking.md")]
    mod spiking {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
