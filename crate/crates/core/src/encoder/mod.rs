//! Patch-based transformer vision encoder producing `[T, D]` token features.

mod image;

use serde::{Deserialize, Serialize};

pub use self::image::{decode_pnm, decode_rt, ImageRaster};

use crate::error::{Error, Result};
use crate::numerics::nn::{self, AttentionWeights};
use crate::numerics::{
    multi_head_attention, Bindings, Element, Graph, Init, ParamSpec, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 8,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl EncoderConfig {
    /// Token count `(H / patch) * (W / patch)`.
    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        for (name, v) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
        ] {
            if v == 0 || v % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "{name} {v} must be a positive multiple of patch_size {}",
                    self.patch_size
                )));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut specs = nn::linear_specs("encoder.patch_embed", self.patch_len(), d, true);
        specs.push(ParamSpec::new(
            "encoder.pos",
            vec![self.tokens(), d],
            Init::Uniform { fan_in: d },
        ));
        for i in 0..self.layers {
            let p = format!("encoder.blocks.{i}");
            specs.extend(nn::layer_norm_specs(&format!("{p}.ln1"), d));
            specs.extend(AttentionWeights::specs(&format!("{p}.attn"), d));
            specs.extend(nn::layer_norm_specs(&format!("{p}.ln2"), d));
            specs.extend(nn::mlp_specs(&format!("{p}.mlp"), d, self.mlp_hidden));
        }
        specs.extend(nn::layer_norm_specs("encoder.norm", d));
        specs
    }
}

/// Split an image into non-overlapping `patch x patch` tiles in raster order.
/// Each row holds one tile flattened as (y, x, channel).
pub fn patchify(img: &ImageRaster, patch: usize) -> Result<Tensor<f32>> {
    let (h, w, ch) = img.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into patches of {patch}: dims must be multiples of {patch}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let len = patch * patch * ch;
    let mut data = Vec::with_capacity(ph * pw * len);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                data.extend_from_slice(&img.pixels()[row * ch..(row + patch) * ch]);
            }
        }
    }
    Tensor::new(vec![ph * pw, len], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor<f32>,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<ImageRaster> {
    let pw = width / patch;
    let mut pixels = vec![0.0; height * width * channels];
    let len = patch * patch * channels;
    for (t, tile) in patches.data().chunks_exact(len).enumerate() {
        let (py, px) = (t / pw, t % pw);
        for y in 0..patch {
            let row = (py * patch + y) * width + px * patch;
            pixels[row * channels..(row + patch) * channels]
                .copy_from_slice(&tile[y * patch * channels..(y + 1) * patch * channels]);
        }
    }
    ImageRaster::new(height, width, channels, pixels)
}

/// `[T, D]` features for one image.
pub fn encode_image<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    img: &ImageRaster,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let (h, w, ch) = img.dims();
    if (h, w, ch) != (cfg.image_height, cfg.image_width, cfg.channels) {
        return Err(Error::Validation(format!(
            "image is {h}x{w}x{ch}, encoder expects {}x{}x{}",
            cfg.image_height, cfg.image_width, cfg.channels
        )));
    }
    let patches = patchify(img, cfg.patch_size)?.cast::<T>();
    let x = g.constant(patches);
    let x = nn::linear(g, b, "encoder.patch_embed", x, true)?;
    let mut x = g.add(x, b.get("encoder.pos")?)?;
    for i in 0..cfg.layers {
        let p = format!("encoder.blocks.{i}");
        let h = nn::layer_norm(g, b, &format!("{p}.ln1"), x)?;
        let w = AttentionWeights::bind(b, &format!("{p}.attn"))?;
        let a = multi_head_attention(g, h, h, h, &w, cfg.heads, None)?;
        x = g.add(x, a)?;
        let h = nn::layer_norm(g, b, &format!("{p}.ln2"), x)?;
        let m = nn::mlp(g, b, &format!("{p}.mlp"), h)?;
        x = g.add(x, m)?;
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite(format!(
                "encoder activations after layer {i}"
            )));
        }
    }
    nn::layer_norm(g, b, "encoder.norm", x)
}

/// `[N, T, D]` features: every frame through the same encoder, stacked on a
/// leading frame axis.
pub fn encode_frames<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    frames: &[ImageRaster],
    cfg: &EncoderConfig,
) -> Result<Var> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Validation("no frames to encode".into()))?;
    if let Some((i, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.dims() != first.dims())
    {
        return Err(Error::Validation(format!(
            "frame {i} is {:?}, frame 0 is {:?}",
            f.dims(),
            first.dims()
        )));
    }
    let feats = frames
        .iter()
        .map(|f| encode_image(g, b, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    g.stack0(&feats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, ch: usize) -> ImageRaster {
        let n = h * w * ch;
        ImageRaster::new(h, w, ch, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn single_patch_is_whole_image() {
        let img = ramp(4, 4, 1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), img.pixels());
    }

    #[test]
    fn patches_follow_raster_order() {
        let img = ramp(8, 8, 1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        // first element of each tile is the tile's top-left pixel
        let corners: Vec<f32> = (0..4).map(|t| p.data()[t * 16]).collect();
        assert_eq!(
            corners,
            vec![
                img.get(0, 0, 0),
                img.get(0, 4, 0),
                img.get(4, 0, 0),
                img.get(4, 4, 0)
            ]
        );
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        for ch in [1, 3] {
            let img = ramp(8, 12, ch);
            let back = unpatchify(&patchify(&img, 4).unwrap(), 8, 12, ch, 4).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn indivisible_dims_name_the_multiple() {
        let err = patchify(&ramp(6, 8, 1), 4).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.tokens(), 16);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.image_width = 30;
        assert!(cfg.validate().is_err());
    }
}
