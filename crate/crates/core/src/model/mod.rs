//! Context/target encoders and the pixel and latent decoders.

mod config;
pub mod layers;

pub use config::{Mode, ModelConfig};
pub use layers::{trunc_normal, NamedTensors};

use rand::Rng;

use crate::error::{Error, Result};
use crate::patching::{positional_table, MaskPlan, PositionalTable};
use crate::tensor::Matrix;
use layers::{join, Block, BlockCache, LayerNorm, Linear, LnCache, INIT_STD};

/// ViT encoder: patch projection, `[CLS]` token, pre-norm blocks, final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub heads: usize,
    pub patch_embed: Linear,
    pub cls_token: Matrix,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct EncoderCache {
    patches: Matrix,
    blocks: Vec<BlockCache>,
    norm: LnCache,
}

impl Encoder {
    pub fn init(rng: &mut impl Rng, patch_dim: usize, dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            heads,
            patch_embed: Linear::init(rng, patch_dim, dim),
            cls_token: trunc_normal(rng, 1, dim, INIT_STD),
            blocks: (0..depth).map(|_| Block::init(rng, dim)).collect(),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.cls_token.cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_embed.weight.rows()
    }

    /// Encodes `patches` (one row per patch, listed in `indices` order) with
    /// `[CLS]` prepended. Output row 0 is `[CLS]`, row `j + 1` is `indices[j]`.
    pub fn forward(
        &self,
        patches: &Matrix,
        indices: &[usize],
        pos: &PositionalTable,
    ) -> Result<(Matrix, EncoderCache)> {
        if patches.rows() != indices.len() || patches.cols() != self.patch_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoder got {:?} patches for {} indices, patch dim {}",
                patches.shape(),
                indices.len(),
                self.patch_dim()
            )));
        }
        if patches.rows() == 0 {
            return Err(Error::ShapeMismatch("encoder needs at least one patch".into()));
        }
        if pos.dim() != self.dim() || indices.iter().any(|&i| i >= pos.n_patches()) {
            return Err(Error::ShapeMismatch(format!(
                "positional table {}x{} does not cover encoder input",
                pos.n_patches(),
                pos.dim()
            )));
        }
        let d = self.dim();
        let embedded = self.patch_embed.forward(patches);
        let mut x = Matrix::zeros(1 + indices.len(), d);
        for (o, (c, p)) in x.row_mut(0).iter_mut().zip(self.cls_token.data().iter().zip(pos.token_row(0))) {
            *o = c + p;
        }
        for (j, &i) in indices.iter().enumerate() {
            let prow = pos.token_row(i + 1);
            for (o, (e, p)) in x.row_mut(j + 1).iter_mut().zip(embedded.row(j).iter().zip(prow)) {
                *o = e + p;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, self.heads);
            caches.push(c);
            x = y;
        }
        let (out, norm) = self.norm.forward(&x);
        Ok((
            out,
            EncoderCache {
                patches: patches.clone(),
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache, dout: &Matrix, grad: &mut Encoder) {
        let mut dx = self.norm.backward(&cache.norm, dout, &mut grad.norm);
        for ((block, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(c, &dx, self.heads, g);
        }
        grad.cls_token.add_assign(&Matrix::row_vector(dx.row(0).to_vec()));
        let dembed = Matrix::from_vec(dx.rows() - 1, dx.cols(), dx.data()[dx.cols()..].to_vec());
        self.patch_embed.backward_params(&cache.patches, &dembed, &mut grad.patch_embed);
    }
}

impl NamedTensors for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "cls_token"), &self.cls_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "cls_token"), &mut self.cls_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_mut(&join(prefix, "norm"), out);
    }
}

/// Decoder shared by the pixel and latent branches; they differ only in
/// their own weights, mask token and output width.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub heads: usize,
    pub embed: Linear,
    pub mask_token: Matrix,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

pub struct DecoderCache {
    z: Matrix,
    blocks: Vec<BlockCache>,
    norm: LnCache,
    normed: Matrix,
}

impl Decoder {
    pub fn init(
        rng: &mut impl Rng,
        enc_dim: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            heads,
            embed: Linear::init(rng, enc_dim, dim),
            mask_token: trunc_normal(rng, 1, dim, INIT_STD),
            blocks: (0..depth).map(|_| Block::init(rng, dim)).collect(),
            norm: LayerNorm::new(dim),
            head: Linear::init(rng, dim, out_dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mask_token.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.embed.weight.rows()
    }

    /// Projects the encoded tokens, scatters them back to their grid
    /// positions with the mask token filling `plan.masked()`, adds positions
    /// and decodes. Returns `(1 + N) x out_dim`, row 0 being `[CLS]`.
    pub fn forward(
        &self,
        z: &Matrix,
        plan: &MaskPlan,
        pos: &PositionalTable,
    ) -> Result<(Matrix, DecoderCache)> {
        let n = plan.n_patches();
        if z.rows() != 1 + plan.visible().len() || z.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {}x{} encoded tokens, got {:?}",
                1 + plan.visible().len(),
                self.in_dim(),
                z.shape()
            )));
        }
        if pos.n_patches() != n || pos.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "decoder positional table {}x{} for {n} patches of width {}",
                pos.n_patches(),
                pos.dim(),
                self.dim()
            )));
        }
        let projected = self.embed.forward(z);
        let mut x = Matrix::zeros(1 + n, self.dim());
        x.row_mut(0).copy_from_slice(projected.row(0));
        for (j, &i) in plan.visible().iter().enumerate() {
            x.row_mut(i + 1).copy_from_slice(projected.row(j + 1));
        }
        for &i in plan.masked() {
            x.row_mut(i + 1).copy_from_slice(self.mask_token.data());
        }
        x.add_assign(pos.table());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, self.heads);
            caches.push(c);
            x = y;
        }
        let (normed, norm) = self.norm.forward(&x);
        let out = self.head.forward(&normed);
        Ok((
            out,
            DecoderCache {
                z: z.clone(),
                blocks: caches,
                norm,
                normed,
            },
        ))
    }

    /// Returns the gradient w.r.t. the encoded tokens.
    pub fn backward(&self, cache: &DecoderCache, plan: &MaskPlan, dout: &Matrix, grad: &mut Decoder) -> Matrix {
        let dnormed = self.head.backward(&cache.normed, dout, &mut grad.head);
        let mut dx = self.norm.backward(&cache.norm, &dnormed, &mut grad.norm);
        for ((block, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(c, &dx, self.heads, g);
        }
        for &i in plan.masked() {
            for (g, v) in grad.mask_token.data_mut().iter_mut().zip(dx.row(i + 1)) {
                *g += v;
            }
        }
        let mut dproj = Matrix::zeros(cache.z.rows(), self.dim());
        dproj.row_mut(0).copy_from_slice(dx.row(0));
        for (j, &i) in plan.visible().iter().enumerate() {
            dproj.row_mut(j + 1).copy_from_slice(dx.row(i + 1));
        }
        self.embed.backward(&cache.z, &dproj, &mut grad.embed)
    }
}

impl NamedTensors for Decoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.embed.collect(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.embed.collect_mut(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_mut(&join(prefix, "norm"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// Trainable parameters: the context encoder plus whichever decoders the mode uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoder: Encoder,
    pub pixel_decoder: Option<Decoder>,
    pub latent_decoder: Option<Decoder>,
}

pub const ENCODER_PREFIX: &str = "encoder";
pub const PIXEL_DECODER_PREFIX: &str = "pixel_decoder";
pub const LATENT_DECODER_PREFIX: &str = "latent_decoder";

impl NamedTensors for Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.encoder.collect(&join(prefix, ENCODER_PREFIX), out);
        if let Some(d) = &self.pixel_decoder {
            d.collect(&join(prefix, PIXEL_DECODER_PREFIX), out);
        }
        if let Some(d) = &self.latent_decoder {
            d.collect(&join(prefix, LATENT_DECODER_PREFIX), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.encoder.collect_mut(&join(prefix, ENCODER_PREFIX), out);
        if let Some(d) = &mut self.pixel_decoder {
            d.collect_mut(&join(prefix, PIXEL_DECODER_PREFIX), out);
        }
        if let Some(d) = &mut self.latent_decoder {
            d.collect_mut(&join(prefix, LATENT_DECODER_PREFIX), out);
        }
    }
}

/// Truncated-normal weights (std 0.02), zero biases, unit/zero norms.
/// Tensors are drawn in a fixed order so a seed fully determines them.
pub fn init_params(config: &ModelConfig, rng: &mut impl Rng) -> Result<Params> {
    config.validate()?;
    let encoder = Encoder::init(
        rng,
        config.patch_dim(),
        config.enc_dim,
        config.enc_depth,
        config.enc_heads,
    );
    let pixel_decoder = config.mode.has_pixel_decoder().then(|| {
        Decoder::init(
            rng,
            config.enc_dim,
            config.dec_dim,
            config.dec_depth,
            config.dec_heads,
            config.patch_dim(),
        )
    });
    let latent_decoder = config.mode.has_latent_decoder().then(|| {
        Decoder::init(
            rng,
            config.enc_dim,
            config.dec_dim,
            config.dec_depth,
            config.dec_heads,
            config.latent_dim(),
        )
    });
    Ok(Params {
        encoder,
        pixel_decoder,
        latent_decoder,
    })
}

/// Positional tables at encoder and decoder widths for one config.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTables {
    pub encoder: PositionalTable,
    pub decoder: PositionalTable,
}

impl PositionalTables {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: positional_table(config.grid(), config.enc_dim)?,
            decoder: positional_table(config.grid(), config.dec_dim)?,
        })
    }
}

/// Encoded visible tokens `Z_V`; row 0 is `[CLS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub tokens: Matrix,
}

/// Target-encoder output `T` over the full image; row 0 is the `[CLS]` target.
/// Plain data: nothing downstream can propagate gradients into its producer.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetLatents {
    pub tokens: Matrix,
}

/// Runs the context encoder on the visible patches (rows ordered as `plan.visible()`).
pub fn context_encode(
    visible: &Matrix,
    plan: &MaskPlan,
    params: &Params,
    pos: &PositionalTable,
) -> Result<EncoderOutput> {
    let (tokens, _) = params.encoder.forward(visible, plan.visible(), pos)?;
    Ok(EncoderOutput { tokens })
}

/// Runs the target encoder on every patch of the image.
pub fn target_encode(all_patches: &Matrix, target: &Encoder, pos: &PositionalTable) -> Result<TargetLatents> {
    if all_patches.rows() != pos.n_patches() {
        return Err(Error::ShapeMismatch(format!(
            "target encoder needs all {} patches, got {}",
            pos.n_patches(),
            all_patches.rows()
        )));
    }
    let indices: Vec<usize> = (0..all_patches.rows()).collect();
    let (tokens, _) = target.forward(all_patches, &indices, pos)?;
    Ok(TargetLatents { tokens })
}

fn missing_decoder(which: &str) -> Error {
    Error::ShapeMismatch(format!("this model has no {which} decoder"))
}

/// Pixel predictions `N x D_x`; the `[CLS]` row is dropped.
pub fn decode_pixel(z: &EncoderOutput, plan: &MaskPlan, params: &Params, pos: &PositionalTable) -> Result<Matrix> {
    let dec = params.pixel_decoder.as_ref().ok_or_else(|| missing_decoder("pixel"))?;
    let (out, _) = dec.forward(&z.tokens, plan, pos)?;
    Ok(drop_first_row(&out))
}

/// Latent predictions `(1 + N) x D_t`, row 0 predicting the `[CLS]` target.
pub fn decode_latent(z: &EncoderOutput, plan: &MaskPlan, params: &Params, pos: &PositionalTable) -> Result<Matrix> {
    let dec = params.latent_decoder.as_ref().ok_or_else(|| missing_decoder("latent"))?;
    let (out, _) = dec.forward(&z.tokens, plan, pos)?;
    Ok(out)
}

pub(crate) fn drop_first_row(m: &Matrix) -> Matrix {
    Matrix::from_vec(m.rows() - 1, m.cols(), m.data()[m.cols()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(mode: Mode) -> ModelConfig {
        ModelConfig {
            enc_depth: 1,
            enc_dim: 16,
            enc_heads: 2,
            dec_depth: 1,
            dec_dim: 8,
            dec_heads: 2,
            patch_size: 4,
            image_size: 16,
            mode,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn init_is_deterministic_and_mode_shaped() {
        let cfg = toy(Mode::Pilamim);
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let px = init_params(&toy(Mode::PixelOnly), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(px.tensors().iter().all(|(n, _)| !n.starts_with(LATENT_DECODER_PREFIX)));
        let lt = init_params(&toy(Mode::LatentOnly), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(lt.tensors().iter().all(|(n, _)| !n.starts_with(PIXEL_DECODER_PREFIX)));
    }

    #[test]
    fn attention_shapes_are_consistent() {
        let cfg = ModelConfig {
            enc_dim: 64,
            enc_heads: 4,
            ..toy(Mode::Pilamim)
        };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for b in &p.encoder.blocks {
            assert_eq!(b.qkv.weight.shape(), (64, 192));
            assert_eq!(b.proj.weight.shape(), (64, 64));
            assert_eq!(b.fc1.weight.shape(), (64, 256));
        }
        assert_eq!(p.latent_decoder.unwrap().head.weight.shape(), (8, 64));
        assert_eq!(p.pixel_decoder.unwrap().head.weight.shape(), (8, 48));
    }

    #[test]
    fn decode_shapes() {
        let cfg = toy(Mode::Pilamim);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng).unwrap();
        let pos = PositionalTables::new(&cfg).unwrap();
        let n = cfg.n_patches();
        let x = Matrix::from_fn(n, cfg.patch_dim(), |_, _| rng.gen());
        let plan = crate::patching::sample_mask(n, 0.75, &mut rng).unwrap();
        let z = context_encode(&x.select_rows(plan.visible()), &plan, &params, &pos.encoder).unwrap();
        assert_eq!(z.tokens.shape(), (1 + plan.visible().len(), 16));
        assert_eq!(decode_pixel(&z, &plan, &params, &pos.decoder).unwrap().shape(), (n, 48));
        assert_eq!(decode_latent(&z, &plan, &params, &pos.decoder).unwrap().shape(), (n + 1, 16));
        let t = target_encode(&x, &params.encoder, &pos.encoder).unwrap();
        assert_eq!(t.tokens.shape(), (n + 1, 16));
    }

    #[test]
    fn empty_visible_set_is_rejected() {
        let cfg = toy(Mode::Pilamim);
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pos = PositionalTables::new(&cfg).unwrap();
        let plan = MaskPlan::from_masked(16, &(0..16).collect::<Vec<_>>()).unwrap();
        let err = context_encode(&Matrix::zeros(0, 48), &plan, &params, &pos.encoder);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn missing_decoder_is_an_error() {
        let cfg = toy(Mode::PixelOnly);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng).unwrap();
        let pos = PositionalTables::new(&cfg).unwrap();
        let plan = crate::patching::sample_mask(16, 0.75, &mut rng).unwrap();
        let x = Matrix::zeros(4, 48);
        let z = context_encode(&x, &plan, &params, &pos.encoder).unwrap();
        assert!(decode_latent(&z, &plan, &params, &pos.decoder).is_err());
    }
}
