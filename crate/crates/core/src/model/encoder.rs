use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{normal_tensor, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
use super::params::{impl_parameters, Tensor};
use crate::datasets::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder depth and mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Hex SHA-256 of the canonical JSON form; identifies architecture-compatible
    /// encoder weights.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Splits an image into row-major patches, one flattened patch per row.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    let (h, w) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Validation(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch));
    for py in 0..gh {
        for px in 0..gw {
            let block = image.slice(s![py * patch..(py + 1) * patch, px * patch..(px + 1) * patch]);
            let mut row = out.row_mut(py * gw + px);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}
impl_parameters!(EncoderBlock { norm1, attn, norm2, mlp });

struct BlockCache {
    n1: LayerNormCache,
    attn: AttentionCache,
    n2: LayerNormCache,
    mlp: MlpCache,
}

impl EncoderBlock {
    fn new<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(d),
            attn: Attention::new(d, cfg.heads, rng),
            norm2: LayerNorm::new(d),
            mlp: Mlp::new(d, d * cfg.mlp_ratio, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, BlockCache) {
        let (h, n1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&h, &h);
        let x1 = x + &a;
        let (h2, n2) = self.norm2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2);
        (x1 + m, BlockCache { n1, attn, n2, mlp })
    }

    fn backward(&self, c: &BlockCache, dy: &Tensor, g: &mut EncoderBlock) -> Tensor {
        let dh2 = self.mlp.backward(&c.mlp, dy, &mut g.mlp);
        let dx1 = dy + &self.norm2.backward(&c.n2, &dh2, &mut g.norm2);
        let (dq, dkv) = self.attn.backward(&c.attn, &dx1, &mut g.attn);
        let dh = dq + dkv;
        dx1 + self.norm1.backward(&c.n1, &dh, &mut g.norm1)
    }
}

/// Patch embedding, learned positions, pre-norm transformer blocks and a
/// final layer norm. Masked patches have their embedding replaced by a
/// shared learned token before positions are added.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub mask_token: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}
impl_parameters!(Encoder { patch_embed, pos_embed, mask_token, blocks, norm });

pub struct EncoderCache {
    patches: Tensor,
    mask: Option<Vec<bool>>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            config,
            patch_embed: Linear::new(config.patch_pixels(), d, rng),
            pos_embed: normal_tensor(config.num_patches(), d, 0.02, rng),
            mask_token: normal_tensor(1, d, 0.02, rng),
            blocks: (0..config.depth).map(|_| EncoderBlock::new(&config, rng)).collect(),
            norm: LayerNorm::new(d),
        })
    }

    fn check_input(&self, patches: &Tensor, mask: Option<&[bool]>) -> Result<()> {
        let want = (self.config.num_patches(), self.config.patch_pixels());
        if patches.dim() != want {
            return Err(Error::Validation(format!(
                "encoder expects {want:?} patch matrix, got {:?}",
                patches.dim()
            )));
        }
        if let Some(m) = mask {
            if m.len() != want.0 {
                return Err(Error::Validation(format!(
                    "mask has {} flags for {} patches",
                    m.len(),
                    want.0
                )));
            }
        }
        Ok(())
    }

    /// Visual tokens (one row per patch, row-major) for an image.
    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        if image.dim() != (self.config.image_size, self.config.image_size) {
            return Err(Error::Validation(format!(
                "encoder expects {0}x{0} images, got {1:?}",
                self.config.image_size,
                image.dim()
            )));
        }
        let patches = patchify(image, self.config.patch_size)?;
        Ok(self.forward(&patches, None)?.0)
    }

    pub fn forward(&self, patches: &Tensor, mask: Option<&[bool]>) -> Result<(Tensor, EncoderCache)> {
        self.check_input(patches, mask)?;
        let mut x = self.patch_embed.forward(patches);
        if let Some(m) = mask {
            for (i, &masked) in m.iter().enumerate() {
                if masked {
                    x.row_mut(i).assign(&self.mask_token.row(0));
                }
            }
        }
        x += &self.pos_embed;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x);
            caches.push(c);
            x = y;
        }
        let (out, norm) = self.norm.forward(&x);
        Ok((
            out,
            EncoderCache {
                patches: patches.clone(),
                mask: mask.map(<[bool]>::to_vec),
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(&self, c: &EncoderCache, dtokens: &Tensor, g: &mut Encoder) {
        let mut dx = self.norm.backward(&c.norm, dtokens, &mut g.norm);
        for (b, (bc, bg)) in self.blocks.iter().zip(c.blocks.iter().zip(g.blocks.iter_mut())).rev() {
            dx = b.backward(bc, &dx, bg);
        }
        g.pos_embed += &dx;
        if let Some(m) = &c.mask {
            for (i, &masked) in m.iter().enumerate() {
                if masked {
                    let row = dx.row(i).to_owned();
                    g.mask_token.row_mut(0).scaled_add(1.0, &row);
                    dx.row_mut(i).fill(0.0);
                }
            }
        }
        self.patch_embed.backward(&c.patches, &dx, &mut g.patch_embed);
    }
}
