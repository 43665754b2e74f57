//! Miniature patch-token vision transformer: patchify, linear patch
//! projection, learned CLS token, positional encodings, encoder stack, and a
//! projected unit-norm image embedding from the CLS output.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{add_positional, AttentionConfig, EncoderBlock, ForwardCtx, Linear};
use crate::tensor::{Result, Tensor, TensorError};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const PIXELS_PER_IMAGE: usize = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;

/// Fixed-size raster, values in [0, 1], row-major H x W x C.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS_PER_IMAGE {
            return Err(TensorError::InvalidInput(format!(
                "image must have {PIXELS_PER_IMAGE} values, got {}",
                pixels.len()
            )));
        }
        Ok(ImageSample { pixels })
    }
}

/// Non-overlapping row-major patches, each flattened to P*P*C values.
pub fn patchify(img: &ImageSample, patch: usize) -> Result<Tensor> {
    if IMAGE_SIZE % patch != 0 {
        return Err(TensorError::InvalidInput(format!(
            "patch size {patch} does not divide image size {IMAGE_SIZE}"
        )));
    }
    let grid = IMAGE_SIZE / patch;
    let pdim = patch * patch * IMAGE_CHANNELS;
    let mut out = vec![0.0; grid * grid * pdim];
    for py in 0..grid {
        for px in 0..grid {
            let pi = py * grid + px;
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..IMAGE_CHANNELS {
                        let src = ((py * patch + y) * IMAGE_SIZE + px * patch + x)
                            * IMAGE_CHANNELS
                            + c;
                        let dst = pi * pdim + (y * patch + x) * IMAGE_CHANNELS + c;
                        out[dst] = img.pixels[src];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[grid * grid, pdim], out))
}

#[derive(Debug, Clone)]
pub struct ImageEncoderConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub enc_cfg: AttentionConfig,
}

impl ImageEncoderConfig {
    pub fn toy() -> Self {
        ImageEncoderConfig {
            patch_size: 8,
            d_model: 64,
            d_embed: 64,
            // the shallow patch encoder keeps standard-scale residual
            // branches so image embeddings depend on the pixels from step
            // one; without this, same-class images start collapsed and the
            // triplet loss cannot tell them apart
            enc_cfg: AttentionConfig::new(2, 4, 64).with_residual_gain(0.5),
        }
    }

    pub fn num_tokens(&self) -> usize {
        let grid = IMAGE_SIZE / self.patch_size;
        grid * grid
    }
}

/// Image token sequence t_I plus the unit-norm image embedding e_I.
pub struct ImageTokens {
    pub t_i: Tensor,
    pub e_i: Tensor,
}

pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    patch_proj: Linear,
    cls: Tensor, // [1 x d_model]
    enc: EncoderBlock,
    out_proj: Linear,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let pdim = cfg.patch_size * cfg.patch_size * IMAGE_CHANNELS;
        ImageEncoder {
            patch_proj: Linear::new(pdim, cfg.d_model, rng),
            cls: Tensor::randn_param(&[1, cfg.d_model], 0.1, rng),
            enc: EncoderBlock::new(&cfg.enc_cfg, rng),
            out_proj: Linear::new(cfg.d_model, cfg.d_embed, rng),
            cfg,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch_proj.params(&format!("{prefix}.patch_proj"), out);
        out.push((format!("{prefix}.cls"), self.cls.clone()));
        self.enc.params(&format!("{prefix}.enc"), out);
        self.out_proj.params(&format!("{prefix}.out_proj"), out);
    }

    pub fn encode(&self, img: &ImageSample, ctx: &mut ForwardCtx) -> Result<ImageTokens> {
        let patches = patchify(img, self.cfg.patch_size)?;
        let tokens = self.patch_proj.forward(&patches)?;
        let seq = Tensor::concat(0, &[self.cls.clone(), tokens])?;
        let seq = add_positional(&seq)?;
        let enc = self.enc.forward(&seq, ctx)?;
        let n = self.cfg.num_tokens();
        let cls_out = enc.slice_rows(0, 1)?;
        let t_i = enc.slice_rows(1, n + 1)?;
        let e_i = self.out_proj.forward(&cls_out)?.l2_normalize_rows()?;
        Ok(ImageTokens { t_i, e_i })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patchify_shapes_and_constant_image() {
        let img = ImageSample::new(vec![0.25; PIXELS_PER_IMAGE]).unwrap();
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        let d = p.data();
        // constant image: all patch vectors identical
        for i in 1..16 {
            assert_eq!(&d[..192], &d[i * 192..(i + 1) * 192]);
        }
    }

    #[test]
    fn patchify_single_lit_pixel() {
        let mut px = vec![0.0; PIXELS_PER_IMAGE];
        px[0] = 1.0; // pixel (0,0), channel 0
        let img = ImageSample::new(px).unwrap();
        let p = patchify(&img, 8).unwrap().data();
        assert!(p[..192].iter().any(|v| *v != 0.0));
        assert!(p[192..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn patchify_divisibility_error() {
        let img = ImageSample::new(vec![0.0; PIXELS_PER_IMAGE]).unwrap();
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn encode_shapes_and_norm() {
        let mut r = rng(0);
        let mut cfg = ImageEncoderConfig::toy();
        cfg.enc_cfg = cfg.enc_cfg.with_dropout(0.0);
        let enc = ImageEncoder::new(cfg, &mut r);
        let img = ImageSample::new((0..PIXELS_PER_IMAGE).map(|i| (i % 7) as f64 / 7.0).collect())
            .unwrap();
        let mut er = rng(0);
        let out = enc.encode(&img, &mut ForwardCtx::eval(&mut er)).unwrap();
        assert_eq!(out.t_i.shape(), &[16, 64]);
        assert_eq!(out.e_i.shape(), &[1, 64]);
        let norm: f64 = out.e_i.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_pixel_change_moves_embedding() {
        let mut r = rng(1);
        let mut cfg = ImageEncoderConfig::toy();
        cfg.enc_cfg = cfg.enc_cfg.with_dropout(0.0);
        let enc = ImageEncoder::new(cfg, &mut r);
        let img1 = ImageSample::new(vec![0.5; PIXELS_PER_IMAGE]).unwrap();
        let mut px = vec![0.5; PIXELS_PER_IMAGE];
        px[100] = 0.9;
        let img2 = ImageSample::new(px).unwrap();
        let mut er = rng(0);
        let a = enc
            .encode(&img1, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .e_i
            .data();
        let b = enc
            .encode(&img2, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .e_i
            .data();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-10);
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let mut r = rng(2);
        let mut cfg = ImageEncoderConfig::toy();
        cfg.enc_cfg = cfg.enc_cfg.with_dropout(0.0);
        let enc = ImageEncoder::new(cfg, &mut r);
        let img = ImageSample::new((0..PIXELS_PER_IMAGE).map(|i| (i % 11) as f64 / 11.0).collect())
            .unwrap();
        let mut er = rng(0);
        let a = enc.encode(&img, &mut ForwardCtx::eval(&mut er)).unwrap().e_i.data();
        let b = enc.encode(&img, &mut ForwardCtx::eval(&mut er)).unwrap().e_i.data();
        assert_eq!(a, b);
    }
}
