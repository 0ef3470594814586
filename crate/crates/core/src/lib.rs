//! Learning from preference feedback at desk scale.
//!
//! A byte-level decoder-only transformer serves as policy, reference, reward
//! and value model. On top of it sit a Bradley–Terry reward-model trainer,
//! a DPO trainer, a PPO trainer with token-level KL shaping and the EOS
//! trick, a preference-data pipeline and synthetic oracle environments.

pub mod cli;
pub mod dpo;
pub mod error;
pub mod eval_env;
pub mod lm;
pub mod math;
pub mod ppo;
pub mod pref_data;
pub mod reward;
pub mod seed;

pub use error::{Error, Result};
