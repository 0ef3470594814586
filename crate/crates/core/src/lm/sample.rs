use rand::Rng;

use super::model::{forward_unchecked, log_softmax_rows, Logits};
use super::params::Params;
use super::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub continuation: Vec<u32>,
    /// Untempered `log π(y_t | x, y_<t)` of each sampled token, captured at
    /// generation time.
    pub logprobs: Vec<f32>,
    pub truncated: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draw a continuation from `softmax(logits / temperature)`, stopping at EOS
/// or after `max_len` tokens. Temperature 0 is greedy decoding.
pub fn sample(params: &Params<f32>, prompt: &[u32], temperature: f64, max_len: usize, seed: u64) -> Result<Sample> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let ctx = params.config.context;
    if 1 + prompt.len() + max_len > ctx {
        return Err(Error::Length {
            len: 1 + prompt.len() + max_len,
            limit: ctx,
            what: "BOS + prompt + max continuation".into(),
        });
    }
    let v = params.config.vocab;
    if let Some((position, &id)) = prompt.iter().enumerate().find(|(_, &t)| t as usize >= v) {
        return Err(Error::InvalidToken { position, id });
    }

    let layout = params.layout();
    let mut rng = seed::rng(seed);
    let mut input = Vec::with_capacity(1 + prompt.len() + max_len);
    input.push(BOS);
    input.extend_from_slice(prompt);
    let mut continuation = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    let mut probs = vec![0.0f64; v];

    for _ in 0..max_len {
        let trace = forward_unchecked(params, &layout, &input, Logits::Last);
        let lp = log_softmax_rows(&trace.logits, v);
        let token = if temperature == 0.0 {
            argmax_lowest(&trace.logits)
        } else {
            let inv = 1.0 / temperature;
            let m = trace.logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let mut total = 0.0;
            for (p, &x) in probs.iter_mut().zip(&trace.logits) {
                *p = ((x as f64 - m) * inv).exp();
                total += *p;
            }
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = v - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let token = token as u32;
        continuation.push(token);
        logprobs.push(lp[token as usize]);
        if token == EOS {
            return Ok(Sample { continuation, logprobs, truncated: false });
        }
        input.push(token);
    }
    Ok(Sample { continuation, logprobs, truncated: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::{ModelConfig, ModelKind};
    use crate::lm::{forward_logprobs, VOCAB_SIZE};

    fn model() -> Params<f32> {
        let cfg = ModelConfig::new(16, 1, 2, 16).unwrap();
        let mut p = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        for x in p.data.iter_mut() {
            *x *= 30.0;
        }
        p
    }

    fn bias_towards(token: Option<u32>) -> Params<f32> {
        let cfg = ModelConfig::new(8, 1, 2, 16).unwrap();
        let mut p = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        let layout = p.layout();
        p.data[layout.spec("lm_head.weight").unwrap().range()].fill(0.0);
        let b = layout.spec("lm_head.bias").unwrap().offset;
        match token {
            Some(t) => p.data[b + t as usize] = 5.0,
            None => p.data[b + EOS as usize] = -50.0,
        }
        p
    }

    #[test]
    fn same_seed_same_output() {
        let p = model();
        let a = sample(&p, &[1, 2, 3], 0.7, 8, 42).unwrap();
        let b = sample(&p, &[1, 2, 3], 0.7, 8, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_eos() {
        let p = bias_towards(Some(EOS));
        let s = sample(&p, &[65], 0.0, 5, 0).unwrap();
        assert_eq!(s.continuation, vec![EOS]);
        assert!(!s.truncated);
    }

    #[test]
    fn truncation_when_eos_never_emitted() {
        let p = bias_towards(None);
        let s = sample(&p, &[65], 1.0, 3, 9).unwrap();
        assert_eq!(s.continuation.len(), 3);
        assert!(s.truncated);
        assert!(!s.continuation.contains(&EOS));
    }

    #[test]
    fn greedy_matches_per_step_argmax() {
        let p = model();
        let prompt = [10u32, 20];
        let s = sample(&p, &prompt, 0.0, 6, 3).unwrap();
        let mut seq = prompt.to_vec();
        for &tok in &s.continuation {
            let table = forward_logprobs(&p, &seq).unwrap();
            let last = table.row(table.rows - 1);
            assert_eq!(argmax_lowest(last) as u32, tok);
            seq.push(tok);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0; VOCAB_SIZE]), 0);
    }

    #[test]
    fn rollout_logprobs_equal_full_forward() {
        let p = model();
        let prompt = [7u32, 8, 9];
        let s = sample(&p, &prompt, 1.0, 6, 11).unwrap();
        let ev = crate::lm::eval_response(&p, &prompt, &s.continuation).unwrap();
        assert_eq!(ev.logprobs, s.logprobs);
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = model();
        assert!(sample(&p, &[1], -1.0, 3, 0).is_err());
        assert!(matches!(sample(&p, &[1; 10], 1.0, 8, 0), Err(Error::Length { .. })));
    }
}
