//! Toy-scale vision transformer: a patch encoder producing visual tokens and
//! a per-class query decoder producing one logit per class. Softmax of the
//! logits gives class probabilities; an elementwise sigmoid of the same
//! logits gives the confidence response used for label revision.

mod decoder;
mod encoder;
mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

pub use decoder::{lift_anchors, DecoderConfig, PooledHead, QueryDecoder};
pub use encoder::{patchify, Encoder, EncoderConfig};
pub use layers::{Attention, LayerNorm, Linear, Mlp};
pub use params::{Parameters, Tensor};

use crate::datasets::Image;
use crate::error::{Error, Result};
use crate::objectives::AnchorSet;
use crate::rng::{rng_for, stream};

fn check_finite(logits: &[f64]) -> Result<()> {
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {v}")));
    }
    Ok(())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    if logits.is_empty() {
        return Err(Error::Validation("softmax of an empty vector".into()));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Class probabilities ζ.
pub fn classifier_probs(logits: &[f64]) -> Result<Vec<f64>> {
    softmax(logits)
}

/// Confidence response φ, the elementwise sigmoid of the logits.
pub fn confidence_response(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    Ok(logits.iter().map(|&x| sigmoid(x)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Query,
    /// Mean-pooled tokens and a linear layer (decoder ablation).
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            head: HeadKind::Query,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.embed_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassHead {
    Query(QueryDecoder),
    Pooled(PooledHead),
}

impl Parameters for ClassHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            ClassHead::Query(d) => d.visit(&params::join(prefix, "decoder"), f),
            ClassHead::Pooled(p) => p.visit(&params::join(prefix, "pooled_head"), f),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match self {
            ClassHead::Query(d) => d.visit_mut(&params::join(prefix, "decoder"), f),
            ClassHead::Pooled(p) => p.visit_mut(&params::join(prefix, "pooled_head"), f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: ClassHead,
}

impl Parameters for Classifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&params::join(prefix, "encoder"), f);
        self.head.visit(prefix, f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.encoder.visit_mut(&params::join(prefix, "encoder"), f);
        self.head.visit_mut(prefix, f);
    }
}

enum HeadCache {
    Query(decoder::DecoderCache),
    Pooled(decoder::PooledCache),
}

pub struct ClassifierCache {
    encoder: encoder::EncoderCache,
    head: HeadCache,
}

impl Classifier {
    pub fn new(config: ModelConfig, anchors: Option<&AnchorSet>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::INIT, 0);
        let encoder = Encoder::new(config.encoder, &mut rng)?;
        let d = config.encoder.embed_dim;
        let head = match config.head {
            HeadKind::Query => ClassHead::Query(QueryDecoder::new(
                config.decoder,
                d,
                config.encoder.mlp_ratio,
                anchors,
                &mut rng,
            )?),
            HeadKind::Pooled => ClassHead::Pooled(PooledHead::new(d, config.decoder.num_classes, &mut rng)),
        };
        Ok(Self {
            config,
            encoder,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// The learnable class queries, when the query decoder is in use.
    pub fn queries(&self) -> Option<&Tensor> {
        match &self.head {
            ClassHead::Query(d) => Some(&d.queries),
            ClassHead::Pooled(_) => None,
        }
    }

    pub fn queries_mut(&mut self) -> Option<&mut Tensor> {
        match &mut self.head {
            ClassHead::Query(d) => Some(&mut d.queries),
            ClassHead::Pooled(_) => None,
        }
    }

    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        self.encoder.encode(image)
    }

    /// Per-class logits from visual tokens.
    pub fn decode_queries(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        match &self.head {
            ClassHead::Query(d) => d.forward(tokens).map(|(l, _)| l),
            ClassHead::Pooled(p) => p.forward(tokens).map(|(l, _)| l),
        }
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        let tokens = self.encode(image)?;
        self.decode_queries(&tokens)
    }

    pub fn forward(&self, patches: &Tensor, mask: Option<&[bool]>) -> Result<(Vec<f64>, ClassifierCache)> {
        let (tokens, enc) = self.encoder.forward(patches, mask)?;
        let (logits, head) = match &self.head {
            ClassHead::Query(d) => {
                let (l, c) = d.forward(&tokens)?;
                (l, HeadCache::Query(c))
            }
            ClassHead::Pooled(p) => {
                let (l, c) = p.forward(&tokens)?;
                (l, HeadCache::Pooled(c))
            }
        };
        Ok((logits, ClassifierCache { encoder: enc, head }))
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`.
    pub fn backward(&self, cache: &ClassifierCache, dlogits: &[f64], grads: &mut Classifier) {
        let dtokens = match (&self.head, &cache.head, &mut grads.head) {
            (ClassHead::Query(d), HeadCache::Query(c), ClassHead::Query(g)) => d.backward(c, dlogits, g),
            (ClassHead::Pooled(p), HeadCache::Pooled(c), ClassHead::Pooled(g)) => p.backward(c, dlogits, g),
            _ => unreachable!("gradient container has a different head than the model"),
        };
        self.encoder.backward(&cache.encoder, &dtokens, &mut grads.encoder);
    }
}

/// Encoder plus a linear head regressing per-patch HOG descriptors. The head
/// is only used during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub mim_head: Linear,
}

impl Parameters for PretrainModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&params::join(prefix, "encoder"), f);
        self.mim_head.visit(&params::join(prefix, "mim_head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.encoder.visit_mut(&params::join(prefix, "encoder"), f);
        self.mim_head.visit_mut(&params::join(prefix, "mim_head"), f);
    }
}

pub struct PretrainCache {
    encoder: encoder::EncoderCache,
    tokens: Tensor,
}

impl PretrainModel {
    pub fn new(config: EncoderConfig, target_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, stream::INIT, 1);
        let encoder = Encoder::new(config, &mut rng)?;
        let mim_head = Linear::new(config.embed_dim, target_dim, &mut rng);
        Ok(Self { encoder, mim_head })
    }

    /// Predicted descriptors for every patch (masked or not).
    pub fn forward(&self, patches: &Tensor, mask: &[bool]) -> Result<(Tensor, PretrainCache)> {
        let (tokens, encoder) = self.encoder.forward(patches, Some(mask))?;
        let pred = self.mim_head.forward(&tokens);
        Ok((pred, PretrainCache { encoder, tokens }))
    }

    pub fn backward(&self, cache: &PretrainCache, dpred: &Tensor, grads: &mut PretrainModel) {
        let dtokens = self.mim_head.backward(&cache.tokens, dpred, &mut grads.mim_head);
        self.encoder.backward(&cache.encoder, &dtokens, &mut grads.encoder);
    }
}
