//! Spiking neurons and the convolutional encoder built from them.
//!
//! Activations carry a leading time axis. Convolutions and batch norm see the
//! time and batch axes folded together as `(T*N, C, H, W)` in time-major
//! order; the neurons unfold them again and integrate over `T`.

mod backbone;
mod lif;

pub use backbone::{
    apply_bn_updates, classification_head, init_classification_head, init_projection_head,
    projection_head, stack_frames, Backbone, BackboneConfig, BnMode, BnUpdates, EncoderOutput,
};
pub use lif::{lif_sequence, lif_step, LifConfig, LifState, ResetMode};

#[cfg(test)]
mod tests;
