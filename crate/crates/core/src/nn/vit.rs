//! Tubelet-tokenized video transformer: encoder over visible tokens only,
//! shallow decoder that fills masked positions with a learned mask token.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::layers::{trunc_normal, Block, BlockCache, LayerNorm, Linear, LnCache};
use super::params::{join, visit2, visit2_mut, Parameters};
use crate::data::{Clip, ModalitySpec};
use crate::error::{Error, Result};
use crate::masking::{TokenGrid, TubeMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tubelet: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            tubelet: 2,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                "embed_dim must be a positive multiple of heads",
            ));
        }
        if self.decoder_dim == 0
            || self.decoder_heads == 0
            || self.decoder_dim % self.decoder_heads != 0
        {
            return Err(Error::config(
                "decoder_heads",
                "decoder_dim must be a positive multiple of decoder_heads",
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        if self.tubelet == 0 {
            return Err(Error::config("tubelet", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self, spec: &ModalitySpec, frames: usize) -> Result<TokenGrid> {
        let (gh, gw) = spec.grid_hw();
        TokenGrid::new(frames, self.tubelet, gh, gw)
    }

    pub fn patch_volume(&self, spec: &ModalitySpec) -> usize {
        self.tubelet * spec.patch_size * spec.patch_size * spec.channels
    }
}

/// Raw tubelet vectors for the given token indices, `len x patch_volume`.
///
/// Token `i` covers temporal slice `i / S` and spatial cell `i % S` (row-major);
/// each vector is laid out as `(frame, y, x, channel)`.
pub fn patchify(
    clip: &Clip,
    grid: &TokenGrid,
    tubelet: usize,
    indices: &[usize],
) -> Result<Array2<f64>> {
    clip.check_shape()?;
    let spec = &clip.spec;
    let (gh, gw) = spec.grid_hw();
    if (gh, gw) != (grid.grid_h, grid.grid_w) || clip.num_frames() != grid.temporal_slices * tubelet
    {
        return Err(Error::contract(format!(
            "{} clip with {} frames does not tokenize to grid {:?}",
            spec.kind,
            clip.num_frames(),
            grid
        )));
    }
    let p = spec.patch_size;
    let c = spec.channels;
    let s = grid.spatial();
    let mut out = Array2::zeros((indices.len(), tubelet * p * p * c));
    for (row, &i) in out.rows_mut().into_iter().zip(indices) {
        if i >= grid.total() {
            return Err(Error::contract(format!("token index {i} outside grid")));
        }
        let (slice, cell) = (i / s, i % s);
        let (gy, gx) = (cell / gw, cell % gw);
        let row = row.into_slice().expect("standard layout");
        let mut k = 0;
        for dt in 0..tubelet {
            let t = slice * tubelet + dt;
            for py in 0..p {
                let y = gy * p + py;
                for px in 0..p {
                    let x = gx * p + px;
                    for ch in 0..c {
                        row[k] = clip.frames[[t, y, x, ch]] as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-patch normalised pixels: zero mean and unit variance within each row.
pub fn normalize_patches(patches: &Array2<f64>) -> Array2<f64> {
    let mut out = patches.clone();
    let n = patches.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        row /= (var + 1e-6).sqrt();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub modality: ModalitySpec,
    pub grid: TokenGrid,
    pub tubelet: usize,
    pub heads: usize,
    pub patch_embed: Linear,
    /// Learned positional embeddings, one row per token of the full grid.
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct EncoderCache {
    patches: Array2<f64>,
    visible: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: LnCache,
}

/// Output of an encoder pass over the visible tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// `I_vis x d`, in the mask's canonical visible order.
    pub tokens: Array2<f64>,
    /// Mean over `tokens` rows.
    pub pooled: Array1<f64>,
}

impl Encoder {
    pub fn new<R: Rng>(
        config: &EncoderConfig,
        modality: ModalitySpec,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grid = config.grid(&modality, frames)?;
        let d = config.embed_dim;
        let patch_embed = Linear::new(rng, config.patch_volume(&modality), d);
        let pos = trunc_normal(rng, grid.total(), d);
        let blocks = (0..config.depth)
            .map(|_| Block::new(rng, d, config.heads, config.mlp_ratio))
            .collect();
        Ok(Encoder {
            modality,
            grid,
            tubelet: config.tubelet,
            heads: config.heads,
            patch_embed,
            pos,
            blocks,
            norm: LayerNorm::new(d),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.pos.ncols()
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_embed.in_dim()
    }

    fn check_mask(&self, mask: &TubeMask) -> Result<()> {
        if mask.grid != self.grid {
            return Err(Error::contract(format!(
                "mask grid {:?} does not match encoder grid {:?}",
                mask.grid, self.grid
            )));
        }
        Ok(())
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        if clip.spec != self.modality {
            return Err(Error::contract(format!(
                "{} encoder received a {} clip",
                self.modality.kind, clip.spec.kind
            )));
        }
        Ok(())
    }

    /// All `I` tubelets, linearly embedded (no positional embedding).
    pub fn tokenize(&self, clip: &Clip) -> Result<Array2<f64>> {
        self.check_clip(clip)?;
        let all: Vec<usize> = (0..self.grid.total()).collect();
        let patches = patchify(clip, &self.grid, self.tubelet, &all)?;
        Ok(self.patch_embed.forward(patches.view()))
    }

    /// Visible tubelets of `clip` under `mask`. Masked tubelets are never read.
    pub fn visible_patches(
        &self,
        clip: &Clip,
        mask: &TubeMask,
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        self.check_clip(clip)?;
        self.check_mask(mask)?;
        let visible = mask.visible_indices();
        let patches = patchify(clip, &self.grid, self.tubelet, &visible)?;
        Ok((patches, visible))
    }

    pub fn encode(&self, clip: &Clip, mask: &TubeMask) -> Result<Encoded> {
        let (patches, visible) = self.visible_patches(clip, mask)?;
        let (encoded, _) = self.forward(patches, visible);
        Ok(encoded)
    }

    pub fn forward(&self, patches: Array2<f64>, visible: Vec<usize>) -> (Encoded, EncoderCache) {
        let mut x = self.patch_embed.forward(patches.view());
        x += &self.pos.select(Axis(0), &visible);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(x);
            x = y;
            caches.push(c);
        }
        let (tokens, norm) = self.norm.forward(x.view());
        let pooled = tokens
            .mean_axis(Axis(0))
            .expect("at least one visible token");
        (
            Encoded { tokens, pooled },
            EncoderCache {
                patches,
                visible,
                blocks: caches,
                norm,
            },
        )
    }

    /// `dtokens` is the gradient with respect to the output tokens; pooled
    /// gradients must already be folded in with [`pooled_grad_to_tokens`].
    pub fn backward(&self, cache: &EncoderCache, dtokens: Array2<f64>, grad: &mut Encoder) {
        let mut dx = self
            .norm
            .backward(&cache.norm, dtokens.view(), &mut grad.norm);
        for ((block, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(c, dx, g);
        }
        for (row, &i) in dx.rows().into_iter().zip(&cache.visible) {
            let mut prow = grad.pos.row_mut(i);
            prow += &row;
        }
        self.patch_embed.backward(
            cache.patches.view(),
            dx.view(),
            &mut grad.patch_embed,
            false,
        );
    }
}

/// Adds the gradient of `pooled = mean(tokens)` to a token gradient.
pub fn pooled_grad_to_tokens(dtokens: &mut Array2<f64>, dpooled: &Array1<f64>) {
    let n = dtokens.nrows() as f64;
    let share = dpooled / n;
    for mut row in dtokens.rows_mut() {
        row += &share;
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        visit2(prefix, "pos", &self.pos, f);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        visit2_mut(prefix, "pos", &mut self.pos, f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub grid: TokenGrid,
    pub heads: usize,
    pub embed: Linear,
    pub mask_token: Array1<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// Decoder width to patch volume.
    pub head: Linear,
}

pub struct DecoderCache {
    enc_tokens: Array2<f64>,
    visible: Vec<usize>,
    masked: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: LnCache,
    masked_out: Array2<f64>,
}

impl Decoder {
    pub fn new<R: Rng>(
        config: &EncoderConfig,
        modality: &ModalitySpec,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grid = config.grid(modality, frames)?;
        let dd = config.decoder_dim;
        Ok(Decoder {
            grid,
            heads: config.decoder_heads,
            embed: Linear::new(rng, config.embed_dim, dd),
            mask_token: trunc_normal(rng, 1, dd).row(0).to_owned(),
            pos: trunc_normal(rng, grid.total(), dd),
            blocks: (0..config.decoder_depth)
                .map(|_| Block::new(rng, dd, config.decoder_heads, config.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(dd),
            head: Linear::new(rng, dd, config.patch_volume(modality)),
        })
    }

    pub fn patch_volume(&self) -> usize {
        self.head.out_dim()
    }

    /// Predicted (normalised) patches for the masked positions, in ascending token order.
    pub fn reconstruct(
        &self,
        encoded_tokens: &Array2<f64>,
        mask: &TubeMask,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(encoded_tokens.clone(), mask)?.0)
    }

    pub fn forward(
        &self,
        enc_tokens: Array2<f64>,
        mask: &TubeMask,
    ) -> Result<(Array2<f64>, DecoderCache)> {
        if mask.grid != self.grid {
            return Err(Error::contract("mask grid does not match decoder grid"));
        }
        let visible = mask.visible_indices();
        if enc_tokens.nrows() != visible.len() || enc_tokens.ncols() != self.embed.in_dim() {
            return Err(Error::contract(format!(
                "decoder expects {}x{} encoded tokens, got {:?}",
                visible.len(),
                self.embed.in_dim(),
                enc_tokens.dim()
            )));
        }
        let masked = mask.masked_indices();
        let z = self.embed.forward(enc_tokens.view());
        let mut x = self.pos.clone();
        for (row, &i) in z.rows().into_iter().zip(&visible) {
            let mut r = x.row_mut(i);
            r += &row;
        }
        for &i in &masked {
            let mut r = x.row_mut(i);
            r += &self.mask_token;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(x);
            x = y;
            caches.push(c);
        }
        let (y, norm) = self.norm.forward(x.view());
        let masked_out = y.select(Axis(0), &masked);
        let pred = self.head.forward(masked_out.view());
        Ok((
            pred,
            DecoderCache {
                enc_tokens,
                visible,
                masked,
                blocks: caches,
                norm,
                masked_out,
            },
        ))
    }

    /// Returns the gradient with respect to the encoded tokens.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        dpred: Array2<f64>,
        grad: &mut Decoder,
    ) -> Array2<f64> {
        let dmasked = self
            .head
            .backward(cache.masked_out.view(), dpred.view(), &mut grad.head, true)
            .expect("dx requested");
        let mut dy = Array2::zeros(self.pos.raw_dim());
        for (row, &i) in dmasked.rows().into_iter().zip(&cache.masked) {
            dy.row_mut(i).assign(&row);
        }
        let mut dx = self.norm.backward(&cache.norm, dy.view(), &mut grad.norm);
        for ((block, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(c, dx, g);
        }
        grad.pos += &dx;
        for &i in &cache.masked {
            grad.mask_token += &dx.row(i);
        }
        let dz = dx.select(Axis(0), &cache.visible);
        self.embed
            .backward(cache.enc_tokens.view(), dz.view(), &mut grad.embed, true)
            .expect("dx requested")
    }
}

impl Parameters for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.mask_token.visit(&join(prefix, "mask_token"), f);
        visit2(prefix, "pos", &self.pos, f);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.mask_token.visit_mut(&join(prefix, "mask_token"), f);
        visit2_mut(prefix, "pos", &mut self.pos, f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
