//! Simulation and analysis of self-similar processes built from embedded
//! branching: a crossing tree whose families have random subcrossing counts
//! and multiplicative duration weights.
//!
//! The crate is organized around one model description and three ways to
//! realize it:
//!
//! - [`model`] defines offspring-pattern and weight laws, their spectral
//!   quantities (mean offspring matrix, moment matrices and eigensystems,
//!   first-crossing orientation probabilities), and the standing-assumption
//!   checks that decide whether a model is well posed.
//! - [`engine`] runs the on-line simulator: it emits unit-scale crossings one
//!   by one while growing a spine of coarser crossings lazily, in fixed-origin
//!   or stationary (random-start) mode, with exact snapshot and resume.
//! - [`oracle`] builds explicit finite crossing trees by direct recursion and
//!   evaluates them exactly, as an independent reference for validating the
//!   engine's output distribution.
//! - [`analyze`] rebuilds the crossing tree of an emitted path and estimates
//!   offspring counts and duration scaling from it.
//!
//! [`sizebias`] carries the size-biased families and spine orientation chains
//! shared by the engine and the checks; [`record`] fixes the sample formats;
//! [`config`] parses the text model-configuration format.

pub mod analyze;
pub mod config;
pub mod engine;
pub mod model;
pub mod oracle;
pub mod record;
pub mod sizebias;
mod special;
