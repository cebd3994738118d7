use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{normal_tensor, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
use super::params::{impl_parameters, Tensor};
use crate::error::{Error, Result};
use crate::objectives::AnchorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            depth: 2,
            heads: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "decoder needs K >= 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("decoder depth must be >= 1".into()));
        }
        if self.heads == 0 || embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} is not divisible by {} decoder heads",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}
impl_parameters!(DecoderBlock { norm1, self_attn, norm2, cross_attn, norm3, mlp });

struct BlockCache {
    n1: LayerNormCache,
    sa: AttentionCache,
    n2: LayerNormCache,
    ca: AttentionCache,
    n3: LayerNormCache,
    mlp: MlpCache,
}

impl DecoderBlock {
    fn new<R: Rng>(d: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(d),
            self_attn: Attention::new(d, heads, rng),
            norm2: LayerNorm::new(d),
            cross_attn: Attention::new(d, heads, rng),
            norm3: LayerNorm::new(d),
            mlp: Mlp::new(d, d * mlp_ratio, rng),
        }
    }

    fn forward(&self, q: &Tensor, tokens: &Tensor) -> (Tensor, BlockCache) {
        let (h1, n1) = self.norm1.forward(q);
        let (a1, sa) = self.self_attn.forward(&h1, &h1);
        let q1 = q + &a1;
        let (h2, n2) = self.norm2.forward(&q1);
        let (a2, ca) = self.cross_attn.forward(&h2, tokens);
        let q2 = q1 + a2;
        let (h3, n3) = self.norm3.forward(&q2);
        let (m, mlp) = self.mlp.forward(&h3);
        (q2 + m, BlockCache { n1, sa, n2, ca, n3, mlp })
    }

    /// Returns `(d queries, d tokens)`.
    fn backward(&self, c: &BlockCache, dy: &Tensor, g: &mut DecoderBlock) -> (Tensor, Tensor) {
        let dh3 = self.mlp.backward(&c.mlp, dy, &mut g.mlp);
        let dq2 = dy + &self.norm3.backward(&c.n3, &dh3, &mut g.norm3);
        let (dh2, dtokens) = self.cross_attn.backward(&c.ca, &dq2, &mut g.cross_attn);
        let dq1 = &dq2 + &self.norm2.backward(&c.n2, &dh2, &mut g.norm2);
        let (dsq, dskv) = self.self_attn.backward(&c.sa, &dq1, &mut g.self_attn);
        let dh1 = dsq + dskv;
        (dq1 + self.norm1.backward(&c.n1, &dh1, &mut g.norm1), dtokens)
    }
}

/// One learnable query per class, refined by self-attention among queries
/// and cross-attention to the visual tokens. A projection shared by all
/// queries maps refined query `j` to the logit of class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDecoder {
    pub config: DecoderConfig,
    pub queries: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}
impl_parameters!(QueryDecoder { queries, blocks, norm, head });

pub struct DecoderCache {
    tokens_rows: usize,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    normed: Tensor,
}

/// Lifts anchors of dimension `<= d` into `d` dimensions by zero padding.
pub fn lift_anchors(anchors: &AnchorSet, d: usize) -> Result<Tensor> {
    if anchors.dim() > d {
        return Err(Error::Config(format!(
            "anchors have dimension {} > embed dim {d}",
            anchors.dim()
        )));
    }
    let t = anchors.matrix();
    let mut out = Array2::zeros((anchors.num_classes(), d));
    out.slice_mut(ndarray::s![.., ..anchors.dim()]).assign(&t);
    Ok(out)
}

impl QueryDecoder {
    /// Queries start at the anchors when given, otherwise at random unit
    /// vectors.
    pub fn new<R: Rng>(
        config: DecoderConfig,
        embed_dim: usize,
        mlp_ratio: usize,
        anchors: Option<&AnchorSet>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(embed_dim)?;
        let queries = match anchors {
            Some(a) => {
                if a.num_classes() != config.num_classes {
                    return Err(Error::Config(format!(
                        "{} anchors for {} classes",
                        a.num_classes(),
                        config.num_classes
                    )));
                }
                lift_anchors(a, embed_dim)?
            }
            None => {
                let mut q = normal_tensor(config.num_classes, embed_dim, 1.0, rng);
                for mut r in q.rows_mut() {
                    let n = r.dot(&r).sqrt();
                    r.mapv_inplace(|v| v / n);
                }
                q
            }
        };
        Ok(Self {
            config,
            queries,
            blocks: (0..config.depth)
                .map(|_| DecoderBlock::new(embed_dim, config.heads, mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(embed_dim),
            head: Linear::new(embed_dim, 1, rng),
        })
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<(Vec<f64>, DecoderCache)> {
        if tokens.ncols() != self.queries.ncols() || tokens.nrows() == 0 {
            return Err(Error::Validation(format!(
                "decoder expects tokens of width {}, got {:?}",
                self.queries.ncols(),
                tokens.dim()
            )));
        }
        let mut q = self.queries.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&q, tokens);
            caches.push(c);
            q = y;
        }
        let (normed, norm) = self.norm.forward(&q);
        let logits = self.head.forward(&normed).column(0).to_vec();
        Ok((
            logits,
            DecoderCache {
                tokens_rows: tokens.nrows(),
                blocks: caches,
                norm,
                normed,
            },
        ))
    }

    /// Returns the gradient with respect to the tokens.
    pub fn backward(&self, c: &DecoderCache, dlogits: &[f64], g: &mut QueryDecoder) -> Tensor {
        let dl = Array2::from_shape_vec((dlogits.len(), 1), dlogits.to_vec()).unwrap();
        let dnormed = self.head.backward(&c.normed, &dl, &mut g.head);
        let mut dq = self.norm.backward(&c.norm, &dnormed, &mut g.norm);
        let mut dtokens = Array2::zeros((c.tokens_rows, self.queries.ncols()));
        for (b, (bc, bg)) in self.blocks.iter().zip(c.blocks.iter().zip(g.blocks.iter_mut())).rev() {
            let (dqi, dti) = b.backward(bc, &dq, bg);
            dq = dqi;
            dtokens += &dti;
        }
        g.queries += &dq;
        dtokens
    }
}

/// Ablation head: mean-pooled tokens through one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledHead {
    pub linear: Linear,
}
impl_parameters!(PooledHead { linear });

pub struct PooledCache {
    pooled: Tensor,
    rows: usize,
}

impl PooledHead {
    pub fn new<R: Rng>(embed_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(embed_dim, num_classes, rng),
        }
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<(Vec<f64>, PooledCache)> {
        if tokens.ncols() != self.linear.w.nrows() || tokens.nrows() == 0 {
            return Err(Error::Validation(format!(
                "pooled head expects tokens of width {}, got {:?}",
                self.linear.w.nrows(),
                tokens.dim()
            )));
        }
        let pooled = tokens.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let logits = self.linear.forward(&pooled).row(0).to_vec();
        Ok((
            logits,
            PooledCache {
                pooled,
                rows: tokens.nrows(),
            },
        ))
    }

    pub fn backward(&self, c: &PooledCache, dlogits: &[f64], g: &mut PooledHead) -> Tensor {
        let dl = Array2::from_shape_vec((1, dlogits.len()), dlogits.to_vec()).unwrap();
        let dpooled = self.linear.backward(&c.pooled, &dl, &mut g.linear);
        let row = dpooled.row(0).mapv(|v| v / c.rows as f64);
        let mut out = Array2::zeros((c.rows, row.len()));
        for mut r in out.rows_mut() {
            r.assign(&row);
        }
        out
    }
}
