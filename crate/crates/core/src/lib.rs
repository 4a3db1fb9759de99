//! Desk-scale pathology vision-language assistant.
//!
//! A contrastive image/text pretraining model supplies the image tower; a
//! tiling connector turns any image into a fixed block of visual tokens;
//! a small decoder with low-rank adapters answers questions about it.
//! Around the models sit the curation pipeline, learning-rate schedules,
//! checkpointing and the evaluation metrics.

pub mod assistant;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod connector;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod image;
pub mod judge;
pub mod lm;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod plip;
pub mod schedules;
pub mod tokenizer;

pub use error::{Error, Result};
