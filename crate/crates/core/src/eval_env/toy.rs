//! The desk-scale target-density task: short letter prompts, random-letter
//! demonstrations for SFT, and an oracle that rewards one letter.

use rand::Rng;

use super::OracleTask;
use crate::error::Result;
use crate::lm::sft::Demonstration;
use crate::lm::{encode, ModelConfig};
use crate::pref_data::{PromptPool, Turn};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub alphabet: Vec<u8>,
    pub target: u8,
    pub prompt_len: (usize, usize),
    pub demo_len: (usize, usize),
    /// `L_c` used for sampling; prompts fit in the rest of the context.
    pub max_len: usize,
    pub model: ModelConfig,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            alphabet: b"abcdefgh".to_vec(),
            target: b'a',
            prompt_len: (2, 4),
            demo_len: (2, 6),
            max_len: 8,
            model: ModelConfig::new(64, 2, 4, 16).expect("valid toy model"),
        }
    }
}

impl ToyTask {
    pub fn oracle(&self) -> OracleTask {
        OracleTask::target_density(self.target)
    }

    fn letters(&self, rng: &mut impl Rng, (lo, hi): (usize, usize)) -> Vec<u8> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| self.alphabet[rng.random_range(0..self.alphabet.len())]).collect()
    }

    /// `n` prompts; `split` separates disjoint draws (train, eval, ...).
    pub fn prompts(&self, n: usize, split: u64, seed: u64) -> Vec<String> {
        let mut rng = seed::rng_for(seed, &[seed::stream::DATA, split]);
        (0..n)
            .map(|_| String::from_utf8(self.letters(&mut rng, self.prompt_len)).expect("ascii"))
            .collect()
    }

    /// Uniformly random letters after each prompt: a policy that writes
    /// plausible text without favouring the target.
    pub fn demonstrations(&self, prompts: &[String], seed: u64) -> Vec<Demonstration> {
        let mut rng = seed::rng_for(seed, &[seed::stream::DATA, u64::MAX]);
        prompts
            .iter()
            .map(|p| Demonstration::new(encode(p.as_bytes()), encode(&self.letters(&mut rng, self.demo_len))))
            .collect()
    }

    pub fn pool(&self, tag: &str, prompts: &[String]) -> Result<PromptPool> {
        PromptPool::new(tag, prompts.iter().map(|p| vec![Turn::user(p.clone())]).collect())
    }
}

pub fn tokens(prompts: &[String]) -> Vec<Vec<u32>> {
    prompts.iter().map(|p| encode(p.as_bytes())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_fit_and_are_deterministic() {
        let t = ToyTask::default();
        let a = t.prompts(50, 0, 7);
        assert_eq!(a, t.prompts(50, 0, 7));
        assert_ne!(a, t.prompts(50, 1, 7));
        for p in &a {
            assert!((2..=4).contains(&p.len()));
            assert!(1 + p.len() + t.max_len <= t.model.context);
        }
        let d = t.demonstrations(&a, 1);
        assert!(d.iter().all(|d| d.target.len() >= 3 && d.target.len() <= 7));
    }
}
