//! Latent-action and token-level RL: rollouts, rewards, group-relative
//! advantages, the clipped policy update, SFT and the training loop.

pub mod advantage;
pub mod reward;
pub mod rollout;
pub mod sft;
pub mod train;
pub mod update;
