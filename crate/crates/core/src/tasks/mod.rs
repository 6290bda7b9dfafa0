//! Downstream heads, losses and training loops.

mod bss;
mod finetune;
mod heads;

pub use bss::{
    bss_forward, mixture_loss, permutations, pit_loss, pit_mse, BssConfig, BssHead, PitOutput, SeparationOutput,
    SeparationTarget, FULL_EMBED_DIM, FULL_WIDTHS, LATENT_PER_SOURCE, MAX_PIT_SOURCES,
};
pub use finetune::{
    accuracy, extract_features, fit, linear_probe, trainable_mask, BackboneMode, Batches, FitConfig, LinearProbe,
    Standardizer,
};
pub use heads::{
    argmax, classify_loss, feature_dim, joint_loss, latent_reg, pooled_features, predictions, Dense, JointHead,
    JointOutput, REGRESSION_TARGETS,
};

#[cfg(test)]
mod tests;
