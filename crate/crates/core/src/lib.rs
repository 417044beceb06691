//! Cross-modal contrastive pre-training of 12-lead ECG encoders against
//! free-text reports, with a uni-modal augmentation baseline, prompt-based
//! zero-shot classification and linear-probe evaluation.
//!
//! Everything numeric runs on the small reverse-mode autodiff engine in
//! [`autodiff`].

pub mod autodiff;
pub mod data;
pub mod evalkit;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod trainer;
