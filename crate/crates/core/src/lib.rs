//! Weakly supervised lesion segmentation from RECIST diameters.
//!
//! The pipeline turns a single-slice RECIST measurement into a 2D mask via a
//! geometry-derived trimap and GrabCut, trains a pixel-wise appearance model
//! on those masks, and then grows the segmentation slice by slice through the
//! volume by alternating model inference, trimap construction, GrabCut
//! refinement and retraining.

pub mod appearance;
pub mod enhance;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod grabcut;
pub mod graphcut;
pub mod grid;
pub mod metrics;
pub mod raster;
pub mod recist3d;
pub mod selfpaced;
pub mod trimap;
pub mod volume_io;

pub use error::{Error, Result};
pub use grid::{Grid, Image};
