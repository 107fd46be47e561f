//! Language-guided 3D reasoning segmentation at desk scale: a point encoder,
//! query interactor, small causal language model and hierarchical mask
//! decoder, trained end to end on synthetic indoor scenes.

pub mod blocks;
pub mod config;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod hmd;
pub mod interactor;
pub mod langmodel;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod postprocess;
pub mod synthdata;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{Example, Inference, PreparedScene, Reason3D};
pub use train::Trainer;
