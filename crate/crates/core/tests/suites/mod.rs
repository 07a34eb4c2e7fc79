//! Checks shared by the per-topic test targets and the acceptance runner.
#![allow(dead_code)]

pub mod gradients;
pub mod identities;
pub mod oracle;
pub mod pipeline;
pub mod samplers;
pub mod training;
