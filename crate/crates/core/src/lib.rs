//! Brain-network generation from paired-modality voxel data, healthy-ageing
//! trajectory modelling and MCI-to-AD conversion prediction.
//!
//! The pipeline has three independently trained stages:
//!
//! 1. [`netgen`] turns voxel vectors into [`datamodel::BrainNetwork`]s with a
//!    node autoencoder and a cross-modal contrastive edge encoder.
//! 2. [`graphencoder`] compresses each network into a 256-wide feature, and
//!    [`agingvae`] forecasts how that feature evolves under healthy ageing.
//! 3. [`conversion`] reads residuals against the forecast with a recurrent
//!    model and predicts conversion; [`interpret`] ranks abnormal tracts.
//!
//! [`synth`] generates cohorts with planted ground truth and [`harness`]
//! wires everything into a command-line workflow.

pub mod agingvae;
pub mod conversion;
pub mod datamodel;
pub mod error;
pub mod graphencoder;
pub mod harness;
pub mod interpret;
pub mod netgen;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
