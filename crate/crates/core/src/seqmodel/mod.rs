//! The return-conditioned policy: trajectory embedding, gated causal
//! attention blocks, and an action head.

pub mod attention;
pub mod config;
pub mod freeze;
pub mod model;
pub mod params;
pub mod window;

pub use attention::{attention_head_forward, bilinear_scores, AttentionHeadParams};
pub use config::ModelConfig;
pub use freeze::{freeze_mask, FreezeMode};
pub use model::{ForwardOptions, ForwardOutput, HeadRef, PolicyModel, TapeForward};
pub use params::{head_param_name, ParamRole, ParamStore};
pub use window::Window;
