//! Weakly supervised semantic segmentation with a multi-class
//! multiple-instance loss on a small fully convolutional network.
//!
//! The crate carries its own reverse-mode differentiation engine
//! ([`autograd`]), the network ([`net`]), the max-point MIL loss and mask
//! inference ([`mil`]), a synthetic shape dataset with netpbm I/O ([`data`]),
//! and the training/evaluation machinery ([`train`]).

pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mil;
pub mod net;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use mil::{LabelBag, ProbStack, SegmentationMask, SelectedPoints};
pub use net::{build_network, transfer_classifier_weights, Network, NetworkConfig, ScoreStack};
pub use tensor::Tensor;
