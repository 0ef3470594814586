//! The model forward pass checked against a naive 64-bit implementation
//! written directly from the architecture description.

use preflearn::lm::{forward, Logits, ModelConfig, ModelKind, Params, BOS, EOS};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Naive<'a> {
    p: &'a Params<f64>,
}

impl Naive<'_> {
    fn t(&self, name: &str) -> &[f64] {
        let spec = self.p.layout().spec(name).unwrap_or_else(|| panic!("missing tensor {name}")).clone();
        &self.p.data[spec.range()]
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
    }

    /// `x · W + b` with `W` stored row-major as `[in, out]`.
    fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let out = b.len();
        (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn logits(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        let cfg = self.p.config;
        let (c, h) = (cfg.width, cfg.heads);
        let d = c / h;
        let tok = self.t("tok_emb");
        let pos = self.t("pos_emb");
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| (0..c).map(|i| tok[id as usize * c + i] + pos[t * c + i]).collect())
            .collect();
        for l in 0..cfg.layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            let a: Vec<Vec<f64>> =
                x.iter().map(|r| Self::layer_norm(r, self.t(&n("ln1.weight")), self.t(&n("ln1.bias")))).collect();
            let qkv: Vec<Vec<f64>> =
                a.iter().map(|r| Self::affine(r, self.t(&n("attn.qkv.weight")), self.t(&n("attn.qkv.bias")))).collect();
            let mut y = vec![vec![0.0; c]; x.len()];
            for head in 0..h {
                for t in 0..x.len() {
                    let q = &qkv[t][head * d..(head + 1) * d];
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| {
                            let k = &qkv[s][c + head * d..c + (head + 1) * d];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (s, sc) in scores.iter().enumerate() {
                        let w = (sc - m).exp() / z;
                        for i in 0..d {
                            y[t][head * d + i] += w * qkv[s][2 * c + head * d + i];
                        }
                    }
                }
            }
            for (xt, yt) in x.iter_mut().zip(&y) {
                let o = Self::affine(yt, self.t(&n("attn.proj.weight")), self.t(&n("attn.proj.bias")));
                xt.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            }
            for xt in x.iter_mut() {
                let a = Self::layer_norm(xt, self.t(&n("ln2.weight")), self.t(&n("ln2.bias")));
                let hdn: Vec<f64> = Self::affine(&a, self.t(&n("mlp.fc.weight")), self.t(&n("mlp.fc.bias")))
                    .into_iter()
                    .map(Self::gelu)
                    .collect();
                let o = Self::affine(&hdn, self.t(&n("mlp.proj.weight")), self.t(&n("mlp.proj.bias")));
                xt.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            }
        }
        x.iter()
            .map(|r| {
                let hn = Self::layer_norm(r, self.t("ln_f.weight"), self.t("ln_f.bias"));
                Self::affine(&hn, self.t("lm_head.weight"), self.t("lm_head.bias"))
            })
            .collect()
    }
}

fn random_params(cfg: ModelConfig, seed: u64) -> Params<f64> {
    let mut p = Params::<f64>::init(cfg, ModelKind::Policy, seed).unwrap();
    let mut rng = preflearn::seed::rng(seed + 1000);
    let noise = Normal::new(0.0, 0.3).unwrap();
    for x in p.data.iter_mut() {
        *x += noise.sample(&mut rng);
    }
    p
}

#[test]
fn matches_naive_implementation() {
    let mut rng = preflearn::seed::rng(5);
    for (i, (width, layers, heads)) in [(8, 1, 2), (12, 2, 3), (16, 2, 4), (6, 3, 1)].into_iter().enumerate() {
        let cfg = ModelConfig::new(width, layers, heads, 12).unwrap();
        let p = random_params(cfg, i as u64);
        let len = rng.random_range(1..=12);
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..258)).collect();
        tokens[0] = BOS;
        let fast = forward(&p, &tokens, Logits::All).unwrap().logits;
        let slow = Naive { p: &p }.logits(&tokens);
        for (t, row) in slow.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let f = fast[t * 258 + j];
                assert!((f - v).abs() <= 1e-10 * (1.0 + v.abs()), "config {i} pos {t} logit {j}: {f} vs {v}");
            }
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let cfg = ModelConfig::new(16, 2, 4, 16).unwrap();
    let p = random_params(cfg, 3);
    let tokens = [BOS, 104, 105, 33, EOS];
    let exact = Naive { p: &p }.logits(&tokens);
    let single = forward(&p.cast::<f32>(), &tokens, Logits::All).unwrap().logits;
    for (t, row) in exact.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((single[t * 258 + j] as f64 - v).abs() < 1e-3 * (1.0 + v.abs()));
        }
    }
}
