//! Two-phase human-object interaction detection on synthetic scenes:
//! interaction proposals, interaction structure, and a structure-aware
//! transformer decoder, built on a small reverse-mode autodiff engine.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod proposal;
pub mod scene;
pub mod structure;
pub mod train;
pub mod transformer;
