//! Clusterability analysis for neural-network weight graphs.
//!
//! Networks are read from NWA archives ([`archive`]), turned into weighted
//! graphs ([`graph`]), partitioned by normalized spectral clustering and
//! scored by n-cut ([`spectral`]), and compared against shuffled counterparts
//! ([`shuffle`]). [`regularizer`] and [`init`] implement two ways of making
//! MLPs more clusterable, and [`trainer`] is a small trainer to exercise them.

pub mod archive;
pub mod graph;
pub mod init;
pub mod regularizer;
pub mod scenarios;
pub mod seed;
pub mod shuffle;
pub mod spectral;
pub mod trainer;
