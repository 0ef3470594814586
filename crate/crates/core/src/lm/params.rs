//! Model configuration, parameter layout and the flat parameter container.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, Normal};

use super::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::seed;

/// Floating-point type the model can run in. Training uses `f32`; gradient
/// checks run the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn new(width: usize, layers: usize, heads: usize, context: usize) -> Result<Self> {
        let cfg = Self { width, layers, heads, context, vocab: VOCAB_SIZE };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.context < 2 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!("vocab must be {VOCAB_SIZE}, got {}", self.vocab)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

impl Default for ModelConfig {
    /// The toy-scale model: 2 layers, width 64, 4 heads.
    fn default() -> Self {
        Self { width: 64, layers: 2, heads: 4, context: 32, vocab: VOCAB_SIZE }
    }
}

/// What the parameter set is used as. Reward and value models carry an
/// extra scalar regression head on top of the language-model backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Policy,
    Reward,
    Value,
}

impl ModelKind {
    pub fn has_scalar_head(self) -> bool {
        !matches!(self, ModelKind::Policy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Policy => "policy",
            ModelKind::Reward => "reward",
            ModelKind::Value => "value",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "policy" => Some(ModelKind::Policy),
            "reward" => Some(ModelKind::Reward),
            "value" => Some(ModelKind::Value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block. Weight matrices are stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockOffsets {
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub attn_w: usize,
    pub attn_b: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_w: usize,
    pub lnf_b: usize,
    pub lm_w: usize,
    pub lm_b: usize,
    /// Scalar head: `width` weights followed by one bias.
    pub head: Option<usize>,
    pub total: usize,
    pub specs: Vec<TensorSpec>,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    next: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.next;
        let spec = TensorSpec { name: name.into(), shape: shape.to_vec(), offset };
        self.next += spec.len();
        self.specs.push(spec);
        offset
    }
}

impl Layout {
    pub fn new(config: &ModelConfig, kind: ModelKind) -> Self {
        let c = config.width;
        let v = config.vocab;
        let mut b = LayoutBuilder { specs: Vec::new(), next: 0 };
        let tok_emb = b.push("tok_emb", &[v, c]);
        let pos_emb = b.push("pos_emb", &[config.context, c]);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                BlockOffsets {
                    ln1_w: b.push(p("ln1.weight"), &[c]),
                    ln1_b: b.push(p("ln1.bias"), &[c]),
                    qkv_w: b.push(p("attn.qkv.weight"), &[c, 3 * c]),
                    qkv_b: b.push(p("attn.qkv.bias"), &[3 * c]),
                    attn_w: b.push(p("attn.proj.weight"), &[c, c]),
                    attn_b: b.push(p("attn.proj.bias"), &[c]),
                    ln2_w: b.push(p("ln2.weight"), &[c]),
                    ln2_b: b.push(p("ln2.bias"), &[c]),
                    fc_w: b.push(p("mlp.fc.weight"), &[c, 4 * c]),
                    fc_b: b.push(p("mlp.fc.bias"), &[4 * c]),
                    proj_w: b.push(p("mlp.proj.weight"), &[4 * c, c]),
                    proj_b: b.push(p("mlp.proj.bias"), &[c]),
                }
            })
            .collect();
        let lnf_w = b.push("ln_f.weight", &[c]);
        let lnf_b = b.push("ln_f.bias", &[c]);
        let lm_w = b.push("lm_head.weight", &[c, v]);
        let lm_b = b.push("lm_head.bias", &[v]);
        let head = kind.has_scalar_head().then(|| b.push("head", &[c + 1]));
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_w,
            lnf_b,
            lm_w,
            lm_b,
            head,
            total: b.next,
            specs: b.specs,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Full parameter set of the byte-level transformer, stored as one flat
/// array so optimizers and finite differences can treat it uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub version: u64,
    pub data: Vec<S>,
}

pub type PolicyParams = Params<f32>;

impl<S: Scalar> Params<S> {
    pub fn zeros(config: ModelConfig, kind: ModelKind) -> Self {
        let total = Layout::new(&config, kind).total;
        Self { config, kind, version: 0, data: vec![S::zero(); total] }
    }

    /// Weights and embeddings ~ N(0, 0.02²), layer-norm gains 1, all biases
    /// and the scalar head 0.
    pub fn init(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, kind);
        let mut rng = seed::rng_for(seed, &[seed::stream::INIT]);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut data = vec![S::zero(); layout.total];
        for spec in &layout.specs {
            let name = spec.name.as_str();
            let slot = &mut data[spec.range()];
            if name.ends_with("ln1.weight") || name.ends_with("ln2.weight") || name == "ln_f.weight" {
                slot.fill(S::one());
            } else if name.ends_with("bias") || name == "head" {
                slot.fill(S::zero());
            } else {
                for x in slot.iter_mut() {
                    *x = S::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self { config, kind, version: 0, data })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config, self.kind)
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            config: self.config,
            kind: self.kind,
            version: self.version,
            data: self.data.iter().map(|&x| T::of(x.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Params<S>) -> bool {
        self.config == other.config && self.kind == other.kind && self.data.len() == other.data.len()
    }

    pub fn check_compatible<T>(&self, other: &Params<T>) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Shape(format!(
                "model configs differ: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        Ok(())
    }

    /// Re-tag as another kind. Converting a policy into a reward or value
    /// model appends a zero scalar head; the other direction drops it.
    pub fn with_kind(&self, kind: ModelKind) -> Self {
        let backbone = Layout::new(&self.config, ModelKind::Policy).total;
        let mut data = self.data[..backbone].to_vec();
        if kind.has_scalar_head() {
            match Layout::new(&self.config, self.kind).head {
                Some(h) => data.extend_from_slice(&self.data[h..h + self.config.width + 1]),
                None => data.extend(std::iter::repeat_n(S::zero(), self.config.width + 1)),
            }
        }
        Self { config: self.config, kind, version: self.version, data }
    }

    /// Scalar head weights and bias.
    pub fn scalar_head(&self) -> Option<(&[S], S)> {
        let h = self.layout().head?;
        let c = self.config.width;
        Some((&self.data[h..h + c], self.data[h + c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::new(8, 2, 2, 10).unwrap();
        for kind in [ModelKind::Policy, ModelKind::Reward] {
            let layout = Layout::new(&cfg, kind);
            let mut next = 0;
            for s in &layout.specs {
                assert_eq!(s.offset, next, "{}", s.name);
                next += s.len();
            }
            assert_eq!(next, layout.total);
        }
        let p = Layout::new(&cfg, ModelKind::Policy).total;
        let r = Layout::new(&cfg, ModelKind::Reward).total;
        assert_eq!(r - p, 9);
    }

    #[test]
    fn same_config_same_shapes() {
        let cfg = ModelConfig::new(8, 1, 2, 10).unwrap();
        let a = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        let b = Params::<f32>::init(cfg, ModelKind::Policy, 2).unwrap();
        assert!(a.same_shape(&b));
        assert_ne!(a.data, b.data);
        assert!(a.is_finite());
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig::new(32, 1, 4, 16).unwrap();
        let p = Params::<f64>::init(cfg, ModelKind::Policy, 3).unwrap();
        let layout = p.layout();
        let emb = &p.data[layout.spec("tok_emb").unwrap().range()];
        let mean = emb.iter().sum::<f64>() / emb.len() as f64;
        let var = emb.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / emb.len() as f64;
        assert!(mean.abs() < 2e-3);
        assert!((var.sqrt() - 0.02).abs() < 1e-3);
        assert!(p.data[layout.spec("lm_head.bias").unwrap().range()].iter().all(|&x| x == 0.0));
        assert!(p.data[layout.spec("ln_f.weight").unwrap().range()].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn kind_conversion_keeps_backbone() {
        let cfg = ModelConfig::new(8, 1, 2, 10).unwrap();
        let p = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        let r = p.with_kind(ModelKind::Reward);
        assert_eq!(&r.data[..p.data.len()], &p.data[..]);
        let (w, b) = r.scalar_head().unwrap();
        assert!(w.iter().all(|&x| x == 0.0) && b == 0.0);
        assert_eq!(r.with_kind(ModelKind::Policy), p);
    }

    #[test]
    fn rejects_bad_head_count() {
        assert!(ModelConfig::new(10, 1, 3, 8).is_err());
    }
}
