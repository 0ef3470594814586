//! Shared toy-task pipeline for the integration tests.

#![allow(dead_code)]

use preflearn::dpo::{train_dpo, DpoConfig};
use preflearn::eval_env::toy::{tokens, ToyTask};
use preflearn::eval_env::{make_synthetic_preferences, mean_oracle_reward};
use preflearn::lm::sft::train_sft;
use preflearn::lm::{ModelKind, Params, PolicyParams, TrainConfig};
use preflearn::ppo::{train_ppo, PpoConfig, ValueModelParams};
use preflearn::pref_data::{PreferencePair, PromptPool};
use preflearn::reward::{pairwise_accuracy, train_reward_model, RewardModelParams};

pub const EVAL_TEMPERATURE: f64 = 0.7;

pub struct Toy {
    pub task: ToyTask,
    pub train_prompts: Vec<String>,
    pub eval_prompts: Vec<String>,
    pub pool: PromptPool,
    pub sft: PolicyParams,
    pub pairs: Vec<PreferencePair>,
    pub heldout: Vec<PreferencePair>,
    pub rm: RewardModelParams,
    pub rm_accuracy: f64,
}

pub fn sft_config() -> TrainConfig {
    TrainConfig { learning_rate: 2e-3, epochs: 2, batch_size: 32, seed: 0, ..TrainConfig::sft_defaults() }
}

pub fn rm_config() -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, epochs: 10, batch_size: 32, warmup_fraction: 0.03, seed: 0, ..TrainConfig::reward_defaults() }
}

pub fn ppo_config(seed: u64) -> PpoConfig {
    PpoConfig {
        batch_prompts: 16,
        minibatch: 16,
        max_prompt_len: 4,
        max_len: 8,
        eta: 1e-4,
        epochs: 20,
        max_steps: Some(300),
        seed,
        ..PpoConfig::default()
    }
}

pub fn dpo_config(seed: u64) -> DpoConfig {
    DpoConfig { beta: 0.1, learning_rate: 1e-4, epochs: 3, batch_size: 32, seed, ..DpoConfig::default() }
}

pub fn build_toy() -> Toy {
    let task = ToyTask::default();
    let train_prompts = task.prompts(256, 0, 0);
    let eval_prompts = task.prompts(100, 1, 0);
    let sft_prompts = task.prompts(2048, 3, 0);
    let demos = task.demonstrations(&sft_prompts, 0);
    let init = Params::init(task.model, ModelKind::Policy, 0).unwrap();
    let sft = train_sft(&sft_config(), &init, &demos).unwrap();
    let oracle = task.oracle();
    let pairs = make_synthetic_preferences(&oracle, &sft, &train_prompts, 512, task.max_len, 1).unwrap();
    let heldout = make_synthetic_preferences(&oracle, &sft, &eval_prompts, 200, task.max_len, 2).unwrap();
    let rm = train_reward_model(&rm_config(), &sft, &pairs).unwrap();
    let rm_accuracy = pairwise_accuracy(&rm, &heldout).unwrap();
    let pool = task.pool("toy", &train_prompts).unwrap();
    Toy { task, train_prompts, eval_prompts, pool, sft, pairs, heldout, rm, rm_accuracy }
}

impl Toy {
    pub fn oracle_score(&self, policy: &PolicyParams, seed: u64) -> f64 {
        mean_oracle_reward(&self.task.oracle(), policy, &tokens(&self.eval_prompts), EVAL_TEMPERATURE, self.task.max_len, seed)
            .unwrap()
    }

    pub fn run_ppo(&self, cfg: &PpoConfig) -> (PolicyParams, ValueModelParams) {
        train_ppo(cfg, &self.sft, &self.sft, &self.rm, &self.pool).unwrap()
    }

    pub fn run_dpo(&self, cfg: &DpoConfig) -> PolicyParams {
        train_dpo(cfg, &self.sft, &self.sft, &self.pairs).unwrap()
    }
}

/// `--set` overrides that scale the PPO defaults to the toy task for the
/// beta sweep.
pub fn sweep_overrides() -> Vec<String> {
    ["B=16", "b=16", "L_p=4", "L_c=8", "eta=0.0001", "E=20", "max_steps=120"].iter().map(|s| s.to_string()).collect()
}
