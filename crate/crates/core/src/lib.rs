//! Latent-action reinforcement learning for multimodal conversational
//! agents, at desk scale.

pub mod backbone;
pub mod config;
pub mod corpus_tasks;
pub mod error;
pub mod eval;
pub mod latent_space;
pub mod model;
pub mod policy_bc;
pub mod projector;
pub mod rl_engine;
pub mod seed;
pub mod transformer;
pub mod world_model;

pub use error::{Error, Result};
pub use model::Model;
