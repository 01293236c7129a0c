//! Dense-representation 3D hand pose estimation from depth images.
//!
//! The pipeline: crop a metric cube around the hand and normalize it
//! ([`geometry`]), encode poses into dense per-pixel maps in one of six
//! representations ([`repcodec`]), recover per-pixel joint hypotheses and
//! fuse them with adaptively weighted averaging ([`awr`]), train a small
//! convolutional regressor end to end through that decoder ([`nncore`]),
//! generate synthetic labelled depth frames for experiments ([`synthhand`]),
//! and score predictions ([`evalkit`]).

pub mod awr;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod nncore;
pub mod repcodec;
pub mod synthhand;

pub use error::{Error, Result};
