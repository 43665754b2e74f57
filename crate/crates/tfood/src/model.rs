//! Full dual-encoder model: recipe encoder, image encoder, and the optional
//! training-only MMR block, with a flat named-parameter registry and batch
//! encoding helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ForwardCtx;
use crate::image::{ImageEncoder, ImageEncoderConfig, ImageSample, ImageTokens};
use crate::mmr::{Mmr, MmrConfig};
use crate::recipe::{HtdMode, RecipeEncoder, RecipeEncoderConfig, RecipeSample, RecipeTokens};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub htd_mode: HtdMode,
    pub use_mmr: bool,
    pub dropout_rate: f64,
    pub mmr: MmrConfig,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            htd_mode: HtdMode::Full,
            use_mmr: true,
            // from-scratch training at the toy step budget is dropout-hostile;
            // regularization is optional via config
            dropout_rate: 0.0,
            mmr: MmrConfig::default(),
        }
    }

    pub fn recipe_cfg(&self) -> RecipeEncoderConfig {
        let mut cfg = RecipeEncoderConfig::toy(self.vocab_size);
        cfg.htd_mode = self.htd_mode;
        cfg.t_cfg = cfg.t_cfg.with_dropout(self.dropout_rate);
        cfg.ht_cfg = cfg.ht_cfg.with_dropout(self.dropout_rate);
        cfg.htd_cfg = cfg.htd_cfg.with_dropout(self.dropout_rate);
        cfg
    }

    pub fn image_cfg(&self) -> ImageEncoderConfig {
        let mut cfg = ImageEncoderConfig::toy();
        cfg.enc_cfg = cfg.enc_cfg.with_dropout(self.dropout_rate);
        cfg
    }

    pub fn mmr_cfg(&self) -> MmrConfig {
        MmrConfig {
            dropout_rate: self.dropout_rate,
            ..self.mmr.clone()
        }
    }
}

pub struct TFoodModel {
    pub cfg: ModelConfig,
    pub recipe: RecipeEncoder,
    pub image: ImageEncoder,
    pub mmr: Option<Mmr>,
}

/// Batch encoding output: per-sample token structures plus stacked unit-norm
/// embedding matrices E_r and E_v, each [B x d].
pub struct BatchEncoding {
    pub recipes: Vec<RecipeTokens>,
    pub images: Vec<ImageTokens>,
    pub e_r: Tensor,
    pub e_v: Tensor,
}

impl TFoodModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recipe = RecipeEncoder::new(cfg.recipe_cfg(), &mut rng);
        let image = ImageEncoder::new(cfg.image_cfg(), &mut rng);
        let mmr = cfg
            .use_mmr
            .then(|| Mmr::new(cfg.mmr_cfg(), cfg.recipe_cfg().d_model, &mut rng));
        TFoodModel {
            cfg,
            recipe,
            image,
            mmr,
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.recipe.params("recipe", &mut out);
        self.image.params("image", &mut out);
        if let Some(mmr) = &self.mmr {
            mmr.params("mmr", &mut out);
        }
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    pub fn encode_batch(
        &self,
        recipes: &[&RecipeSample],
        images: &[&ImageSample],
        ctx: &mut ForwardCtx,
    ) -> Result<BatchEncoding> {
        assert_eq!(recipes.len(), images.len());
        let mut r_tokens = Vec::with_capacity(recipes.len());
        let mut i_tokens = Vec::with_capacity(images.len());
        let mut e_r_rows = Vec::with_capacity(recipes.len());
        let mut e_v_rows = Vec::with_capacity(images.len());
        for (r, img) in recipes.iter().zip(images) {
            let rt = self.recipe.encode(r, ctx)?;
            let it = self.image.encode(img, ctx)?;
            e_r_rows.push(rt.e_r.clone());
            e_v_rows.push(it.e_i.clone());
            r_tokens.push(rt);
            i_tokens.push(it);
        }
        Ok(BatchEncoding {
            recipes: r_tokens,
            images: i_tokens,
            e_r: Tensor::concat(0, &e_r_rows)?,
            e_v: Tensor::concat(0, &e_v_rows)?,
        })
    }

    /// MTD match probability (as a plain number) for one recipe/image token
    /// pair; used by evaluation-time re-ranking.
    pub fn match_probability(
        &self,
        rt: &RecipeTokens,
        it: &ImageTokens,
        ctx: &mut ForwardCtx,
    ) -> Result<f64> {
        let mmr = self
            .mmr
            .as_ref()
            .expect("match_probability requires the MMR block");
        let score = mmr.score_pair(
            &rt.t_r,
            rt.t_ttl3.shape()[0],
            rt.t_ing3.shape()[0],
            &it.t_i,
            ctx,
        )?;
        Ok(score.probability.item())
    }
}
