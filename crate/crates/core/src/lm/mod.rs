//! Tiny byte-level language model: vocabulary, parameters, exact
//! log-probabilities, sampling, SFT and gradient tooling.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod sample;
pub mod sft;
pub mod vocab;

pub use model::{backward, forward, log_softmax_rows, Logits, Trace};
pub use optim::{AdamConfig, TrainConfig};
pub use params::{ModelConfig, ModelKind, Params, PolicyParams, Scalar};
pub use sample::{sample, Sample};
pub use vocab::{decode, decode_continuation, encode, TokenSequence, Vocabulary, BOS, EOS, VOCAB_SIZE};

use crate::error::{Error, Result};

/// Per-position log-distributions over the next token.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTable<S> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> LogProbTable<S> {
    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn get(&self, t: usize, token: u32) -> S {
        self.row(t)[token as usize]
    }

    pub fn logsumexp(&self, t: usize) -> f64 {
        let row = self.row(t);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        m + row.iter().map(|x| (x.f64() - m).exp()).sum::<f64>().ln()
    }
}

/// Log-probabilities for `sequence` with BOS prepended. Row `t` is the
/// distribution of token `t` given the tokens before it; the table has
/// `sequence.len() + 1` rows.
pub fn forward_logprobs<S: Scalar>(params: &Params<S>, sequence: &[u32]) -> Result<LogProbTable<S>> {
    let mut input = Vec::with_capacity(sequence.len() + 1);
    input.push(BOS);
    input.extend_from_slice(sequence);
    let trace = forward(params, &input, Logits::All)?;
    let v = params.config.vocab;
    Ok(LogProbTable { rows: input.len(), vocab: v, data: log_softmax_rows(&trace.logits, v) })
}

/// `[BOS] ++ prompt ++ response`, checked against the model context.
pub fn frame(prompt: &[u32], response: &[u32], context: usize) -> Result<Vec<u32>> {
    let len = 1 + prompt.len() + response.len();
    if len > context {
        return Err(Error::Length { len, limit: context, what: "BOS + prompt + response".into() });
    }
    let mut v = Vec::with_capacity(len);
    v.push(BOS);
    v.extend_from_slice(prompt);
    v.extend_from_slice(response);
    Ok(v)
}

/// A forward pass over a prompt/response pair with the response-token
/// log-probabilities extracted.
#[derive(Debug, Clone)]
pub struct ResponseEval<S> {
    pub trace: Trace<S>,
    pub prompt_len: usize,
    pub response: Vec<u32>,
    /// `log π(y_t | x, y_<t)` for every response token.
    pub logprobs: Vec<S>,
    table: Vec<S>,
}

impl<S: Scalar> ResponseEval<S> {
    /// Trace row whose output predicts response token `t`.
    pub fn row_for(&self, t: usize) -> usize {
        self.prompt_len + t
    }

    pub fn sum_logprob(&self) -> S {
        self.logprobs.iter().copied().sum()
    }

    pub fn log_row(&self, row: usize) -> &[S] {
        let v = self.table.len() / self.trace.len();
        &self.table[row * v..(row + 1) * v]
    }
}

pub fn eval_response<S: Scalar>(params: &Params<S>, prompt: &[u32], response: &[u32]) -> Result<ResponseEval<S>> {
    if response.is_empty() {
        return Err(Error::Shape("empty response".into()));
    }
    let input = frame(prompt, response, params.config.context)?;
    let trace = forward(params, &input, Logits::All)?;
    let v = params.config.vocab;
    let table = log_softmax_rows(&trace.logits, v);
    let p = prompt.len();
    let logprobs = response
        .iter()
        .enumerate()
        .map(|(t, &y)| table[(p + t) * v + y as usize])
        .collect();
    Ok(ResponseEval { trace, prompt_len: p, response: response.to_vec(), logprobs, table })
}

/// Backpropagate `dlogp[t] = ∂L/∂log π(y_t)` (plus an optional gradient on
/// the final hidden states) into `grad`.
pub fn response_backward<S: Scalar>(
    params: &Params<S>,
    ev: &ResponseEval<S>,
    dlogp: &[S],
    dhidden: Option<&[S]>,
    grad: &mut [S],
) {
    assert_eq!(dlogp.len(), ev.response.len());
    let v = params.config.vocab;
    let mut dlogits = vec![S::zero(); ev.trace.len() * v];
    for (t, (&g, &y)) in dlogp.iter().zip(&ev.response).enumerate() {
        if g == S::zero() {
            continue;
        }
        let row = ev.row_for(t);
        let lp = ev.log_row(row);
        let d = &mut dlogits[row * v..(row + 1) * v];
        for (dj, &l) in d.iter_mut().zip(lp) {
            *dj -= g * l.exp();
        }
        d[y as usize] += g;
    }
    backward(params, &ev.trace, Some(&dlogits), dhidden, grad);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_head(cfg: ModelConfig) -> Params<f64> {
        let mut p = Params::<f64>::init(cfg, ModelKind::Policy, 2).unwrap();
        let layout = p.layout();
        for name in ["lm_head.weight", "lm_head.bias"] {
            p.data[layout.spec(name).unwrap().range()].fill(0.0);
        }
        p
    }

    #[test]
    fn zero_head_gives_uniform_logprobs() {
        let p = zero_head(ModelConfig::new(8, 1, 2, 10).unwrap());
        let table = forward_logprobs(&p, &[1, 2, 3]).unwrap();
        assert_eq!(table.rows, 4);
        let expected = -(258f64).ln();
        assert!((expected + 5.5530).abs() < 1e-4);
        assert!(table.data.iter().all(|&x| (x - expected).abs() < 1e-12));
    }

    #[test]
    fn logprob_rows_normalized() {
        let cfg = ModelConfig::new(16, 2, 4, 16).unwrap();
        let mut p = Params::<f32>::init(cfg, ModelKind::Policy, 4).unwrap();
        for x in p.data.iter_mut() {
            *x *= 20.0;
        }
        let table = forward_logprobs(&p, &[10, 200, 3, 3, 257]).unwrap();
        for t in 0..table.rows {
            assert!(table.logsumexp(t).abs() < 1e-6, "row {t}: {}", table.logsumexp(t));
        }
    }

    #[test]
    fn over_length_is_a_length_error() {
        let p = zero_head(ModelConfig::new(8, 1, 2, 4).unwrap());
        assert!(matches!(forward_logprobs(&p, &[1, 2, 3, 4]), Err(Error::Length { .. })));
        assert!(matches!(eval_response(&p, &[1, 2], &[3, 4]), Err(Error::Length { .. })));
    }

    #[test]
    fn response_logprobs_match_table() {
        let cfg = ModelConfig::new(8, 1, 2, 10).unwrap();
        let p = Params::<f64>::init(cfg, ModelKind::Policy, 8).unwrap();
        let ev = eval_response(&p, &[5, 6], &[7, 257]).unwrap();
        let table = forward_logprobs(&p, &[5, 6, 7, 257]).unwrap();
        assert_eq!(ev.logprobs[0], table.get(2, 7));
        assert_eq!(ev.logprobs[1], table.get(3, 257));
    }
}
