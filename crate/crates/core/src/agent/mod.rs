//! PPO learner: actor-critic network, rollout collection, GAE and the
//! clipped-surrogate update.

mod gae;
mod policy;
mod ppo;
mod rollout;

pub use gae::gae;
pub use policy::{ActOutput, PolicyNet, PolicyVars};
pub use ppo::{normalize_advantages, ppo_terms, PpoConfig, PpoLearner, PpoStats, PpoTerms};
pub use rollout::{collect_rollout, RolloutBatch};
