//! Per-prefix value estimates `V(x ∘ y_<t)` read from the scalar head at
//! the position that predicts response token `t`.

use crate::error::{Error, Result};
use crate::lm::model::{backward, dot, forward, Logits, Trace};
use crate::lm::{frame, Params, Scalar};

#[derive(Debug, Clone)]
pub struct ValueTrace<S> {
    pub trace: Trace<S>,
    pub prompt_len: usize,
    pub values: Vec<S>,
}

pub fn value_trace<S: Scalar>(params: &Params<S>, prompt: &[u32], continuation: &[u32]) -> Result<ValueTrace<S>> {
    let (w, b) = params
        .scalar_head()
        .ok_or_else(|| Error::Shape("value model has no scalar head".into()))?;
    if continuation.is_empty() {
        return Err(Error::Shape("empty continuation".into()));
    }
    let input = frame(prompt, continuation, params.config.context)?;
    let trace = forward(params, &input, Logits::None)?;
    let c = params.config.width;
    let p = prompt.len();
    let values = (0..continuation.len()).map(|t| dot(w, trace.hidden_row(p + t, c)) + b).collect();
    Ok(ValueTrace { trace, prompt_len: p, values })
}

/// Accumulate `Σ_t dvalues[t] · ∂V_t/∂θ` into `grad`.
pub fn value_backward<S: Scalar>(params: &Params<S>, vt: &ValueTrace<S>, dvalues: &[S], grad: &mut [S]) {
    assert_eq!(dvalues.len(), vt.values.len());
    let c = params.config.width;
    let head = params.layout().head.expect("scalar head");
    let w = params.data[head..head + c].to_vec();
    let mut dhidden = vec![S::zero(); vt.trace.len() * c];
    for (t, &dv) in dvalues.iter().enumerate() {
        if dv == S::zero() {
            continue;
        }
        let row = vt.prompt_len + t;
        let h = vt.trace.hidden_row(row, c);
        for i in 0..c {
            dhidden[row * c + i] = w[i] * dv;
            grad[head + i] += h[i] * dv;
        }
        grad[head + c] += dv;
    }
    backward(params, &vt.trace, None, Some(&dhidden), grad);
}
