//! UNet, UNet++ and UNet 3+ segmentation networks on a small reverse-mode
//! autodiff core, with full-scale deep supervision, the focal + MS-SSIM +
//! IoU hybrid loss, and a classification-guided output gate.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
mod kernels;
pub mod losses;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use arch::{ArchSpec, Network, Variant};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use nn::{Mode, ParamId, ParamStore};
pub use tensor::{Fill, Tensor};
