//! Desk-scale cross-modal retrieval: transformer dual encoders for structured
//! recipes and small raster images, a training-only multimodal regularization
//! block, dynamic-margin triplet losses, and a full retrieval evaluation
//! protocol — all on a from-scratch f64 reverse-mode autodiff core.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod image;
pub mod losses;
pub mod mmr;
pub mod model;
pub mod optim;
pub mod recipe;
pub mod tensor;
pub mod train;
