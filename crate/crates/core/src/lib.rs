//! Self-supervised stereo depth estimation with optimal-transport epipolar attention.
//!
//! A Siamese encoder-decoder predicts a sigmoid disparity map per view and
//! scale; mutual attention blocks exchange information between the two views
//! along each image row (the epipolar line of a rectified pair). Training needs
//! no depth labels: each view is reconstructed from the other by warping with
//! the predicted disparity and compared photometrically.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod ot;
pub mod rng;
pub mod scene;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
