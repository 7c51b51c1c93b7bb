//! Multi-aspect vulnerability analytics over areal units.
//!
//! The crate is organised by analysis stage:
//!
//! * [`ingest`] parses indicator tables and population series into a [`Dataset`].
//! * [`spatial`] builds row-standardised contiguity weights and spatial lags.
//! * [`autocorr`] computes global Moran's I and LISA with conditional permutation inference.
//! * [`coda`] holds Aitchison-geometry operations, compositional PCA and PERMANOVA.
//! * [`fda`] smooths log-growth curves with cubic B-splines and runs functional PCA.
//! * [`ranking`] bins hazard, selects units by quartile thresholds and aggregates rankings
//!   with the Copeland rule.
//! * [`distributional`] clusters provinces by the Wasserstein distance between their
//!   indicator distributions.

pub mod autocorr;
pub mod coda;
pub mod distributional;
pub mod error;
pub mod fda;
pub mod ingest;
pub mod ranking;
pub mod rng;
pub mod spatial;
pub mod stats;
pub mod synth;

pub use autocorr::{LisaResult, Quadrant, StandardizedField, StratifiedHotspot};
pub use coda::{ClrVector, CodaPcaResult, Composition, PermanovaResult};
pub use distributional::{Dendrogram, ProvinceDistribution};
pub use error::{Error, Result};
pub use fda::{FpcaResult, GrowthCurve};
pub use ingest::{Dataset, MunicipalityRecord};
pub use ranking::{CopelandResult, HazardClass, SelectionThresholds};
pub use spatial::SpatialWeights;
