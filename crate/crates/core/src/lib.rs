//! Semantic query initialisation for DETR-style human-object interaction
//! detection.
//!
//! The crate contains a small reverse-mode tensor engine ([`numerics`]), the
//! two query-initialisation branches ([`actor`] for action-aware queries
//! built by attending to an interaction prompt dictionary, [`pdqd`] for
//! object-aware tokens distilled from detector pseudo-labels), a miniature
//! set-prediction host pipeline ([`detector`], [`matcher`]), a seeded
//! synthetic benchmark ([`data`]) and the Full/Rare/Non-Rare mAP protocol
//! ([`eval`]). [`train`] and [`cli`] tie them into runnable experiments.

pub mod actor;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod matcher;
pub mod nn;
pub mod numerics;
pub mod pdqd;
pub mod textbank;
pub mod train;

#[cfg(test)]
mod reference;

pub use error::{Error, Result};
