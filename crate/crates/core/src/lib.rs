//! Information-bottleneck regularized training of small convolutional
//! classifiers, HSIC dependence estimation, last-layer channel masking and
//! white-box L∞ attacks, all on a compact reverse-mode autodiff engine.

pub mod attacks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hsic;
mod linalg;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod tensor;

pub use attacks::{Attack, AttackConfig, AttackLoss, AttackMethod};
pub use data::{one_hot, Dataset};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use hsic::{Bandwidth, KernelConfig, KernelKind};
pub use losses::{AdvTrainKind, IbLossConfig, LayerSet};
pub use network::{ActivationTrace, ChannelMask, LayerSpec, Network, NetworkConfig};
pub use tensor::Tensor;
