//! Simulation and verification laboratory for a family of exact
//! area-preserving twist maps on the semi-infinite cylinder.
//!
//! The crate provides:
//! - exact evaluation of the map, its inverse and derivatives ([`map`]);
//! - curve-with-density pairs and their one-step evolution ([`pairs`]);
//! - membership classification and Monte Carlo measure estimates for the
//!   critical sets where hyperbolic expansion fails ([`critical`]);
//! - the image-splitting algorithm producing aligned/boundary/stand-by
//!   pieces and critical times ([`decomposition`]);
//! - equidistribution diagnostics: expectations, phase tables, periodicity
//!   and Fourier decay ([`equidistribution`]);
//! - the biased-random-walk comparison and escape-regime scans ([`walk`]);
//! - a reproducible experiment runner behind the `fermi-twist` CLI
//!   ([`config`], [`experiments`], [`report`]).

pub mod config;
pub mod critical;
pub mod decomposition;
pub mod equidistribution;
pub mod experiments;
pub mod map;
pub mod numerics;
pub mod pairs;
pub mod par;
pub mod report;
pub mod walk;

pub use map::{apply_map, inverse_map, iterate, jacobian, MapError, MapParams, Orbit, Point};
