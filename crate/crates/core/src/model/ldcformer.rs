use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, Session};
use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::ldc::{fuse_features, LdcLayer};
use crate::Error;

/// Architecture of an LDCformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdcformerConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch side length `P`.
    pub patch: usize,
    /// Token width `DN`.
    pub dim: usize,
    /// Attention heads `k`.
    pub heads: usize,
    /// LDCformer encoders `N1`.
    pub n_ldc: usize,
    /// Standard transformer encoders `N2`.
    pub n_vit: usize,
    pub mlp_width: usize,
    /// Weight of the LDC branch in `z + alpha * z_ldc`.
    pub alpha: f32,
}

impl Default for LdcformerConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 32,
            heads: 2,
            n_ldc: 2,
            n_vit: 2,
            mlp_width: 64,
            alpha: 0.15,
        }
    }
}

impl LdcformerConfig {
    /// Token count `N = HW / P^2`.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Side of the square token grid, `sqrt(N)`.
    pub fn grid(&self) -> usize {
        self.height / self.patch
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "patch {} must divide image size {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if self.height != self.width {
            return bad("token grid must be square: height must equal width".into());
        }
        if self.channels == 0 || self.dim == 0 || self.mlp_width == 0 {
            return bad("channels, dim and mlp_width must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.n_ldc + self.n_vit == 0 {
            return bad("need at least one encoder (n_ldc + n_vit >= 1)".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        Ok(())
    }
}

/// One encoder block. With `ldc` present this is an LDCformer encoder,
/// otherwise a standard transformer encoder.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ldc: Option<LdcLayer>,
    pub alpha: f32,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    /// `[B,N,D]` tokens to the `[B,D,g,g]` spatial layout and LDC fusion.
    fn fuse_ldc(&self, s: &mut Session, z: Var, ldc: &LdcLayer) -> Result<Var, TensorError> {
        let shape = s.graph.shape(z).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let side = (n as f64).sqrt() as usize;
        let grid = s.graph.permute(z, &[0, 2, 1])?;
        let grid = s.graph.reshape(grid, &[b, d, side, side])?;
        let feat = ldc.forward(s, grid)?;
        let feat = s.graph.reshape(feat, &[b, d, n])?;
        let feat = s.graph.permute(feat, &[0, 2, 1])?;
        fuse_features(&mut s.graph, z, feat, self.alpha)
    }

    /// Self-attention sub-layer; for LDCformer blocks this is LDC-MSA over
    /// the already fused tokens.
    pub fn attention(&self, s: &mut Session, z_hat: Var) -> Result<Var, TensorError> {
        self.attn.forward(s, z_hat)
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var, TensorError> {
        let z_hat = match &self.ldc {
            Some(ldc) => self.fuse_ldc(s, z, ldc)?,
            None => z,
        };
        let h = self.ln1.forward(s, z_hat)?;
        let h = self.attention(s, h)?;
        let t = s.graph.add(h, z_hat)?;
        let h = self.ln2.forward(s, t)?;
        let h = self.mlp.forward(s, h)?;
        s.graph.add(h, t)
    }
}

/// Apply `blocks` in order; an empty slice returns `z0` unchanged.
pub fn encode(s: &mut Session, blocks: &[EncoderBlock], z0: Var) -> Result<Var, TensorError> {
    blocks.iter().try_fold(z0, |z, b| b.forward(s, z))
}

/// Output of [`Ldcformer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `z^{N1+N2}`, `[B,N,DN]`.
    pub features: Var,
    /// Token mean of the features, `[B,DN]`.
    pub pooled: Var,
    /// Liveness probability, `[B]`.
    pub score: Var,
}

#[derive(Clone, Debug)]
pub struct Ldcformer {
    pub config: LdcformerConfig,
    pub projection: Linear,
    pub position: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub head: Linear,
}

impl Ldcformer {
    /// Register all parameters under `prefix` in `store`.
    ///
    /// Projections use a truncated normal (std 0.02); biases, the position
    /// embedding and the classifier head start at zero, so an untrained
    /// model scores every input at exactly 0.5.
    pub fn new(
        config: LdcformerConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self, Error> {
        config.validate()?;
        let g = ParamGroup::Main;
        let d = config.dim;
        let projection = Linear::new(store, rng, &format!("{prefix}lp"), config.patch_len(), d, g);
        let position = store.add(format!("{prefix}pos"), Tensor::zeros(&[config.tokens(), d]), g);
        let blocks = (0..config.n_ldc + config.n_vit)
            .map(|i| {
                let name = format!("{prefix}enc{i}");
                let ldc = (i < config.n_ldc).then(|| LdcLayer::new(store, rng, &format!("{name}.ldc"), d, g));
                EncoderBlock {
                    ldc,
                    alpha: config.alpha,
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, g),
                    attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, config.heads, g),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, g),
                    mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, config.mlp_width, g),
                }
            })
            .collect();
        let head = Linear::zeros(store, &format!("{prefix}head"), d, 1, g);
        Ok(Self {
            config,
            projection,
            position,
            blocks,
            head,
        })
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize, TensorError> {
        let c = &self.config;
        match shape {
            [b, ch, h, w] if *ch == c.channels && *h == c.height && *w == c.width => Ok(*b),
            _ => Err(TensorError::Shape {
                op: "patch_embed",
                detail: format!(
                    "expected [B,{},{},{}], got {shape:?}",
                    c.channels, c.height, c.width
                ),
            }),
        }
    }

    /// Flattened patches `[B,N,P*P*C]`, each patch in (row, col, channel) order.
    pub fn patchify(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let b = self.check_images(s.graph.shape(x))?;
        let c = &self.config;
        let (gh, gw, p) = (c.height / c.patch, c.width / c.patch, c.patch);
        let t = s.graph.reshape(x, &[b, c.channels, gh, p, gw, p])?;
        let t = s.graph.permute(t, &[0, 2, 4, 3, 5, 1])?;
        s.graph.reshape(t, &[b, gh * gw, c.patch_len()])
    }

    /// `z0 = LP(x) + LP_pos`, `[B,N,DN]`.
    pub fn patch_embed(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let patches = self.patchify(s, x)?;
        let z = self.projection.forward(s, patches)?;
        let pos = s.p(self.position);
        s.graph.add(z, pos)
    }

    pub fn encode(&self, s: &mut Session, z0: Var) -> Result<Var, TensorError> {
        encode(s, &self.blocks, z0)
    }

    /// Features, pooled features and liveness score for images `[B,C,H,W]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ForwardOut, TensorError> {
        let z0 = self.patch_embed(s, x)?;
        let features = self.encode(s, z0)?;
        let pooled = s.graph.mean_axis(features, 1)?;
        let logit = self.head.forward(s, pooled)?;
        let b = s.graph.shape(logit)[0];
        let logit = s.graph.reshape(logit, &[b])?;
        let score = s.graph.sigmoid(logit)?;
        Ok(ForwardOut {
            features,
            pooled,
            score,
        })
    }

    /// `[B,N,DN]` tokens to the `[B,DN,g,g]` grid read by the estimators.
    pub fn token_grid(&self, s: &mut Session, features: Var) -> Result<Var, TensorError> {
        let shape = s.graph.shape(features).to_vec();
        let g = self.config.grid();
        let t = s.graph.permute(features, &[0, 2, 1])?;
        s.graph.reshape(t, &[shape[0], shape[2], g, g])
    }
}
