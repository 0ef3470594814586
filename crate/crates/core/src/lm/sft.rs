//! Supervised finetuning on (prompt, target) demonstrations.

use super::optim::{par_loss_grad, train_loop, LrSchedule, StepReport, TrainConfig};
use super::params::{Params, Scalar};
use super::vocab::EOS;
use super::{eval_response, response_backward};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub prompt: Vec<u32>,
    /// Target continuation, EOS-terminated.
    pub target: Vec<u32>,
}

impl Demonstration {
    /// Appends EOS to `target` unless already present.
    pub fn new(prompt: Vec<u32>, mut target: Vec<u32>) -> Self {
        if target.last() != Some(&EOS) {
            target.push(EOS);
        }
        Self { prompt, target }
    }
}

/// Mean next-token cross-entropy over all target tokens of the batch.
pub fn sft_loss_and_grad<S: Scalar>(params: &Params<S>, batch: &[&Demonstration]) -> Result<(f64, Vec<S>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty SFT batch".into()));
    }
    let tokens: usize = batch.iter().map(|d| d.target.len()).sum();
    let scale = S::of(1.0 / tokens as f64);
    par_loss_grad(batch, params.data.len(), |d, grad| {
        let ev = eval_response(params, &d.prompt, &d.target)?;
        let dlogp = vec![-scale; d.target.len()];
        response_backward(params, &ev, &dlogp, None, grad);
        Ok(-ev.sum_logprob().f64() / tokens as f64)
    })
}

pub fn train_sft(config: &TrainConfig, params: &Params<f32>, demonstrations: &[Demonstration]) -> Result<Params<f32>> {
    train_sft_observed(config, params, demonstrations, |_, _| Ok(()))
}

pub fn train_sft_observed<R>(
    config: &TrainConfig,
    params: &Params<f32>,
    demonstrations: &[Demonstration],
    report: R,
) -> Result<Params<f32>>
where
    R: FnMut(&StepReport, &Params<f32>) -> Result<()>,
{
    if demonstrations.is_empty() {
        return Err(Error::Config("train_sft needs at least one demonstration".into()));
    }
    config.validate()?;
    let mut out = params.clone();
    let total = config.total_steps(demonstrations.len());
    let schedule = LrSchedule::new(config.learning_rate, config.warmup_fraction, total, Some(config.final_lr_ratio));
    train_loop(&mut out, demonstrations, config, schedule, sft_loss_and_grad, report)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::{ModelConfig, ModelKind};

    #[test]
    fn zero_head_loss_is_ln_vocab() {
        let cfg = ModelConfig::new(8, 1, 2, 12).unwrap();
        let mut p = Params::<f64>::init(cfg, ModelKind::Policy, 1).unwrap();
        let layout = p.layout();
        p.data[layout.spec("lm_head.weight").unwrap().range()].fill(0.0);
        let d = Demonstration::new(vec![1, 2], vec![3, 4, 5]);
        let (loss, _) = sft_loss_and_grad(&p, &[&d]).unwrap();
        assert!((loss - 258f64.ln()).abs() < 1e-9);
        assert!((loss - 5.5530).abs() < 1e-4);
    }

    #[test]
    fn empty_demonstrations_rejected() {
        let cfg = ModelConfig::new(8, 1, 2, 12).unwrap();
        let p = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        assert!(matches!(train_sft(&TrainConfig::sft_defaults(), &p, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_leaves_input_alone() {
        let cfg = ModelConfig::new(8, 1, 2, 12).unwrap();
        let p = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        let demos = vec![Demonstration::new(vec![1], vec![2, 3]), Demonstration::new(vec![4], vec![5])];
        let mut tc = TrainConfig::sft_defaults();
        tc.max_steps = Some(5);
        let a = train_sft(&tc, &p, &demos).unwrap();
        let b = train_sft(&tc, &p, &demos).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, p.data);
        assert_eq!(p, Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap());
    }
}
