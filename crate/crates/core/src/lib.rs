//! Learning joint priors over model parameters with normalizing flows.
//!
//! A flow `p_λ(θ)` is trained so that statistics of simulated prior
//! predictive quantities match statistics elicited from an expert (here
//! simulated from a known "oracle" prior).

pub mod diagnostics;
pub mod elicitation;
pub mod error;
pub mod flow;
pub mod loss;
pub mod models;
pub mod oracle;
pub mod study;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use flow::{FlowConfig, JointPriorFlow};
pub use loss::{LossComponentSpec, LossKind, LossReport};
pub use tensor::{Graph, Tensor, Var};
