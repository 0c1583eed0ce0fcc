//! Total lung volume regression workbench.
//!
//! The crate covers the whole pipeline: analytic thorax phantoms with known
//! lung volume ([`phantom`]), volume resampling and volumetry ([`volgrid`]),
//! simulated frontal/lateral radiographs by average-intensity projection
//! ([`drr`]), a small CNN engine with analytic gradients ([`nnreg`]), the
//! training and hyperparameter search harness ([`trainer`]) and agreement
//! statistics ([`evalstat`]). The [`cli`] module wires them into the
//! `lungvol` command.

pub mod cli;
pub mod drr;
pub mod evalstat;
pub mod io;
pub mod nnreg;
pub mod phantom;
pub mod seed;
pub mod trainer;
pub mod volgrid;
