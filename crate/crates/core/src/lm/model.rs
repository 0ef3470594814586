//! Decoder-only transformer: learned positional embeddings, pre-norm blocks,
//! causal multi-head attention, tanh-GELU MLP, final layer norm and a linear
//! LM head. Forward caches every activation the hand-written backward needs.

use super::params::{Layout, Params, Scalar};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Which rows of the LM head to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Logits {
    None,
    Last,
    All,
}

#[derive(Debug, Clone)]
struct BlockTrace<S> {
    x_in: Vec<S>,
    ln1: Vec<S>,
    ln1_mean: Vec<S>,
    ln1_rstd: Vec<S>,
    qkv: Vec<S>,
    att: Vec<S>,
    atty: Vec<S>,
    x_mid: Vec<S>,
    ln2: Vec<S>,
    ln2_mean: Vec<S>,
    ln2_rstd: Vec<S>,
    fc_pre: Vec<S>,
    fc_act: Vec<S>,
}

/// Cached activations of one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    pub tokens: Vec<u32>,
    blocks: Vec<BlockTrace<S>>,
    resid: Vec<S>,
    lnf_mean: Vec<S>,
    lnf_rstd: Vec<S>,
    /// Final-layer-norm output, `len × width`.
    pub hidden: Vec<S>,
    /// `len × vocab` for [`Logits::All`], `1 × vocab` for [`Logits::Last`].
    pub logits: Vec<S>,
}

impl<S: Scalar> Trace<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hidden_row(&self, t: usize, width: usize) -> &[S] {
        &self.hidden[t * width..(t + 1) * width]
    }
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn linear<S: Scalar>(out: &mut [S], inp: &[S], w: &[S], b: &[S], n_in: usize, n_out: usize) {
    for (o, x) in out.chunks_exact_mut(n_out).zip(inp.chunks_exact(n_in)) {
        o.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            axpy(o, xi, &w[i * n_out..(i + 1) * n_out]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<S: Scalar>(
    mut dinp: Option<&mut [S]>,
    dw: &mut [S],
    db: &mut [S],
    dout: &[S],
    inp: &[S],
    w: &[S],
    n_in: usize,
    n_out: usize,
) {
    for (r, (g, x)) in dout.chunks_exact(n_out).zip(inp.chunks_exact(n_in)).enumerate() {
        axpy(db, S::one(), g);
        for (i, &xi) in x.iter().enumerate() {
            let wrow = &w[i * n_out..(i + 1) * n_out];
            axpy(&mut dw[i * n_out..(i + 1) * n_out], xi, g);
            if let Some(d) = dinp.as_deref_mut() {
                d[r * n_in + i] += dot(wrow, g);
            }
        }
    }
}

fn layernorm<S: Scalar>(out: &mut [S], mean: &mut [S], rstd: &mut [S], inp: &[S], w: &[S], b: &[S], c: usize) {
    let n = S::of(c as f64);
    let eps = S::of(LN_EPS);
    for (t, (o, x)) in out.chunks_exact_mut(c).zip(inp.chunks_exact(c)).enumerate() {
        let m = x.iter().copied().sum::<S>() / n;
        let v = x.iter().map(|&xi| (xi - m) * (xi - m)).sum::<S>() / n;
        let r = S::one() / (v + eps).sqrt();
        for i in 0..c {
            o[i] = (x[i] - m) * r * w[i] + b[i];
        }
        mean[t] = m;
        rstd[t] = r;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward<S: Scalar>(
    dinp: &mut [S],
    dw: &mut [S],
    db: &mut [S],
    dout: &[S],
    inp: &[S],
    w: &[S],
    mean: &[S],
    rstd: &[S],
    c: usize,
) {
    let n = S::of(c as f64);
    for t in 0..mean.len() {
        let x = &inp[t * c..(t + 1) * c];
        let g = &dout[t * c..(t + 1) * c];
        let (m, r) = (mean[t], rstd[t]);
        let mut dnorm_mean = S::zero();
        let mut dnorm_norm_mean = S::zero();
        for i in 0..c {
            let norm = (x[i] - m) * r;
            let dnorm = w[i] * g[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= n;
        dnorm_norm_mean /= n;
        let dx = &mut dinp[t * c..(t + 1) * c];
        for i in 0..c {
            let norm = (x[i] - m) * r;
            let dnorm = w[i] * g[i];
            db[i] += g[i];
            dw[i] += norm * g[i];
            dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * r;
        }
    }
}

/// Causal attention. `qkv` rows are `[q | k | v]`, heads split the width.
fn attention<S: Scalar>(out: &mut [S], att: &mut [S], qkv: &[S], t_len: usize, c: usize, heads: usize) {
    let d = c / heads;
    let scale = S::one() / S::of(d as f64).sqrt();
    let c3 = 3 * c;
    for h in 0..heads {
        for t in 0..t_len {
            let q = &qkv[t * c3 + h * d..t * c3 + h * d + d];
            let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let mut maxv = S::neg_infinity();
            for t2 in 0..=t {
                let k = &qkv[t2 * c3 + c + h * d..t2 * c3 + c + h * d + d];
                let s = dot(q, k) * scale;
                row[t2] = s;
                if s > maxv {
                    maxv = s;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut().take(t + 1) {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in row.iter_mut().take(t + 1) {
                *v /= sum;
            }
            for v in row.iter_mut().skip(t + 1) {
                *v = S::zero();
            }
            let o = &mut out[t * c + h * d..t * c + h * d + d];
            o.fill(S::zero());
            for (t2, &a) in row.iter().enumerate().take(t + 1) {
                let v = &qkv[t2 * c3 + 2 * c + h * d..t2 * c3 + 2 * c + h * d + d];
                axpy(o, a, v);
            }
        }
    }
}

fn attention_backward<S: Scalar>(
    dqkv: &mut [S],
    dout: &[S],
    qkv: &[S],
    att: &[S],
    t_len: usize,
    c: usize,
    heads: usize,
) {
    let d = c / heads;
    let scale = S::one() / S::of(d as f64).sqrt();
    let c3 = 3 * c;
    let mut datt = vec![S::zero(); t_len];
    let mut dq = vec![S::zero(); d];
    for h in 0..heads {
        for t in 0..t_len {
            let row = &att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let g = &dout[t * c + h * d..t * c + h * d + d];
            for t2 in 0..=t {
                let voff = t2 * c3 + 2 * c + h * d;
                datt[t2] = dot(g, &qkv[voff..voff + d]);
                axpy(&mut dqkv[voff..voff + d], row[t2], g);
            }
            let inner: S = (0..=t).map(|k| row[k] * datt[k]).sum();
            dq.fill(S::zero());
            let q = &qkv[t * c3 + h * d..t * c3 + h * d + d];
            for t2 in 0..=t {
                let dpre = row[t2] * (datt[t2] - inner) * scale;
                let koff = t2 * c3 + c + h * d;
                axpy(&mut dq, dpre, &qkv[koff..koff + d]);
                axpy(&mut dqkv[koff..koff + d], dpre, q);
            }
            axpy(&mut dqkv[t * c3 + h * d..t * c3 + h * d + d], S::one(), &dq);
        }
    }
}

fn gelu_consts<S: Scalar>() -> (S, S) {
    (S::of((2.0 / std::f64::consts::PI).sqrt()), S::of(0.044715))
}

fn gelu<S: Scalar>(out: &mut [S], inp: &[S]) {
    let (s, k) = gelu_consts::<S>();
    let half = S::of(0.5);
    for (o, &x) in out.iter_mut().zip(inp) {
        *o = half * x * (S::one() + (s * (x + k * x * x * x)).tanh());
    }
}

fn gelu_backward<S: Scalar>(dinp: &mut [S], inp: &[S], dout: &[S]) {
    let (s, k) = gelu_consts::<S>();
    let half = S::of(0.5);
    let three = S::of(3.0);
    for ((d, &x), &g) in dinp.iter_mut().zip(inp).zip(dout) {
        let u = s * (x + k * x * x * x);
        let th = u.tanh();
        let sech2 = S::one() - th * th;
        let local = half * (S::one() + th) + half * x * sech2 * s * (S::one() + three * k * x * x);
        *d += local * g;
    }
}

/// Split a gradient buffer into the adjacent weight and bias slices of one layer.
fn wb_mut<S>(grad: &mut [S], w: usize, b: usize, b_len: usize) -> (&mut [S], &mut [S]) {
    let (dw, db) = grad[w..b + b_len].split_at_mut(b - w);
    (dw, db)
}

pub fn check_tokens<S: Scalar>(params: &Params<S>, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if tokens.len() > params.config.context {
        return Err(Error::Length {
            len: tokens.len(),
            limit: params.config.context,
            what: "input exceeds model context".into(),
        });
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= params.config.vocab) {
        return Err(Error::InvalidToken { position, id });
    }
    Ok(())
}

/// Run the network over `tokens` (framing tokens already included).
pub fn forward<S: Scalar>(params: &Params<S>, tokens: &[u32], logits: Logits) -> Result<Trace<S>> {
    check_tokens(params, tokens)?;
    let layout = params.layout();
    Ok(forward_unchecked(params, &layout, tokens, logits))
}

pub(crate) fn forward_unchecked<S: Scalar>(
    params: &Params<S>,
    layout: &Layout,
    tokens: &[u32],
    want: Logits,
) -> Trace<S> {
    let cfg = &params.config;
    let (c, v, t_len, heads) = (cfg.width, cfg.vocab, tokens.len(), cfg.heads);
    let p = &params.data;

    let mut x = vec![S::zero(); t_len * c];
    for (t, &tok) in tokens.iter().enumerate() {
        let te = &p[layout.tok_emb + tok as usize * c..layout.tok_emb + (tok as usize + 1) * c];
        let pe = &p[layout.pos_emb + t * c..layout.pos_emb + (t + 1) * c];
        for i in 0..c {
            x[t * c + i] = te[i] + pe[i];
        }
    }

    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for bo in &layout.blocks {
        let mut ln1 = vec![S::zero(); t_len * c];
        let mut ln1_mean = vec![S::zero(); t_len];
        let mut ln1_rstd = vec![S::zero(); t_len];
        layernorm(&mut ln1, &mut ln1_mean, &mut ln1_rstd, &x, &p[bo.ln1_w..bo.ln1_w + c], &p[bo.ln1_b..bo.ln1_b + c], c);
        let mut qkv = vec![S::zero(); t_len * 3 * c];
        linear(&mut qkv, &ln1, &p[bo.qkv_w..bo.qkv_w + 3 * c * c], &p[bo.qkv_b..bo.qkv_b + 3 * c], c, 3 * c);
        let mut att = vec![S::zero(); heads * t_len * t_len];
        let mut atty = vec![S::zero(); t_len * c];
        attention(&mut atty, &mut att, &qkv, t_len, c, heads);
        let mut x_mid = vec![S::zero(); t_len * c];
        linear(&mut x_mid, &atty, &p[bo.attn_w..bo.attn_w + c * c], &p[bo.attn_b..bo.attn_b + c], c, c);
        for (m, &xi) in x_mid.iter_mut().zip(&x) {
            *m += xi;
        }
        let mut ln2 = vec![S::zero(); t_len * c];
        let mut ln2_mean = vec![S::zero(); t_len];
        let mut ln2_rstd = vec![S::zero(); t_len];
        layernorm(&mut ln2, &mut ln2_mean, &mut ln2_rstd, &x_mid, &p[bo.ln2_w..bo.ln2_w + c], &p[bo.ln2_b..bo.ln2_b + c], c);
        let mut fc_pre = vec![S::zero(); t_len * 4 * c];
        linear(&mut fc_pre, &ln2, &p[bo.fc_w..bo.fc_w + 4 * c * c], &p[bo.fc_b..bo.fc_b + 4 * c], c, 4 * c);
        let mut fc_act = vec![S::zero(); t_len * 4 * c];
        gelu(&mut fc_act, &fc_pre);
        let mut x_out = vec![S::zero(); t_len * c];
        linear(&mut x_out, &fc_act, &p[bo.proj_w..bo.proj_w + 4 * c * c], &p[bo.proj_b..bo.proj_b + c], 4 * c, c);
        for (o, &m) in x_out.iter_mut().zip(&x_mid) {
            *o += m;
        }
        let x_in = std::mem::replace(&mut x, x_out);
        blocks.push(BlockTrace {
            x_in,
            ln1,
            ln1_mean,
            ln1_rstd,
            qkv,
            att,
            atty,
            x_mid,
            ln2,
            ln2_mean,
            ln2_rstd,
            fc_pre,
            fc_act,
        });
    }

    let mut hidden = vec![S::zero(); t_len * c];
    let mut lnf_mean = vec![S::zero(); t_len];
    let mut lnf_rstd = vec![S::zero(); t_len];
    layernorm(&mut hidden, &mut lnf_mean, &mut lnf_rstd, &x, &p[layout.lnf_w..layout.lnf_w + c], &p[layout.lnf_b..layout.lnf_b + c], c);

    let lm_w = &p[layout.lm_w..layout.lm_w + c * v];
    let lm_b = &p[layout.lm_b..layout.lm_b + v];
    let logits = match want {
        Logits::None => Vec::new(),
        Logits::Last => {
            let mut out = vec![S::zero(); v];
            linear(&mut out, &hidden[(t_len - 1) * c..], lm_w, lm_b, c, v);
            out
        }
        Logits::All => {
            let mut out = vec![S::zero(); t_len * v];
            linear(&mut out, &hidden, lm_w, lm_b, c, v);
            out
        }
    };

    Trace { tokens: tokens.to_vec(), blocks, resid: x, lnf_mean, lnf_rstd, hidden, logits }
}

/// Accumulate parameter gradients into `grad` given upstream gradients on
/// the logits (`len × vocab`, requires a [`Logits::All`] trace) and/or on the
/// final hidden states (`len × width`).
pub fn backward<S: Scalar>(
    params: &Params<S>,
    trace: &Trace<S>,
    dlogits: Option<&[S]>,
    dhidden: Option<&[S]>,
    grad: &mut [S],
) {
    assert_eq!(grad.len(), params.data.len(), "gradient buffer size");
    let layout = params.layout();
    let cfg = &params.config;
    let (c, v, t_len, heads) = (cfg.width, cfg.vocab, trace.len(), cfg.heads);
    let p = &params.data;

    let mut dh = match dhidden {
        Some(d) => d.to_vec(),
        None => vec![S::zero(); t_len * c],
    };
    if let Some(dl) = dlogits {
        assert_eq!(dl.len(), t_len * v, "dlogits must cover every position");
        let (dw, db) = wb_mut(grad, layout.lm_w, layout.lm_b, v);
        linear_backward(Some(&mut dh), dw, db, dl, &trace.hidden, &p[layout.lm_w..layout.lm_w + c * v], c, v);
    }

    let mut dx = vec![S::zero(); t_len * c];
    {
        let (dw, db) = wb_mut(grad, layout.lnf_w, layout.lnf_b, c);
        layernorm_backward(&mut dx, dw, db, &dh, &trace.resid, &p[layout.lnf_w..layout.lnf_w + c], &trace.lnf_mean, &trace.lnf_rstd, c);
    }

    for (bo, bt) in layout.blocks.iter().zip(&trace.blocks).rev() {
        // x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
        let mut dx_mid = dx.clone();
        let mut dfc_act = vec![S::zero(); t_len * 4 * c];
        {
            let (dw, db) = wb_mut(grad, bo.proj_w, bo.proj_b, c);
            linear_backward(Some(&mut dfc_act), dw, db, &dx, &bt.fc_act, &p[bo.proj_w..bo.proj_w + 4 * c * c], 4 * c, c);
        }
        let mut dfc_pre = vec![S::zero(); t_len * 4 * c];
        gelu_backward(&mut dfc_pre, &bt.fc_pre, &dfc_act);
        let mut dln2 = vec![S::zero(); t_len * c];
        {
            let (dw, db) = wb_mut(grad, bo.fc_w, bo.fc_b, 4 * c);
            linear_backward(Some(&mut dln2), dw, db, &dfc_pre, &bt.ln2, &p[bo.fc_w..bo.fc_w + 4 * c * c], c, 4 * c);
        }
        {
            let (dw, db) = wb_mut(grad, bo.ln2_w, bo.ln2_b, c);
            layernorm_backward(&mut dx_mid, dw, db, &dln2, &bt.x_mid, &p[bo.ln2_w..bo.ln2_w + c], &bt.ln2_mean, &bt.ln2_rstd, c);
        }

        // x_mid = x_in + proj(attn(qkv(ln1(x_in))))
        let mut dx_in = dx_mid.clone();
        let mut datty = vec![S::zero(); t_len * c];
        {
            let (dw, db) = wb_mut(grad, bo.attn_w, bo.attn_b, c);
            linear_backward(Some(&mut datty), dw, db, &dx_mid, &bt.atty, &p[bo.attn_w..bo.attn_w + c * c], c, c);
        }
        let mut dqkv = vec![S::zero(); t_len * 3 * c];
        attention_backward(&mut dqkv, &datty, &bt.qkv, &bt.att, t_len, c, heads);
        let mut dln1 = vec![S::zero(); t_len * c];
        {
            let (dw, db) = wb_mut(grad, bo.qkv_w, bo.qkv_b, 3 * c);
            linear_backward(Some(&mut dln1), dw, db, &dqkv, &bt.ln1, &p[bo.qkv_w..bo.qkv_w + 3 * c * c], c, 3 * c);
        }
        {
            let (dw, db) = wb_mut(grad, bo.ln1_w, bo.ln1_b, c);
            layernorm_backward(&mut dx_in, dw, db, &dln1, &bt.x_in, &p[bo.ln1_w..bo.ln1_w + c], &bt.ln1_mean, &bt.ln1_rstd, c);
        }
        dx = dx_in;
    }

    for (t, &tok) in trace.tokens.iter().enumerate() {
        let g = &dx[t * c..(t + 1) * c];
        let te = layout.tok_emb + tok as usize * c;
        axpy(&mut grad[te..te + c], S::one(), g);
        let pe = layout.pos_emb + t * c;
        axpy(&mut grad[pe..pe + c], S::one(), g);
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<S: Scalar>(logits: &[S], v: usize) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    for (o, row) in out.chunks_exact_mut(v).zip(logits.chunks_exact(v)) {
        // Normaliser accumulated in f64 so f32 rows stay normalised to ~1e-7.
        let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let lse = m + row.iter().map(|x| (x.f64() - m).exp()).sum::<f64>().ln();
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = S::of(x.f64() - lse);
        }
    }
    out
}
