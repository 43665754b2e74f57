//! Training-only MultiModal Regularization: ITEM enhances image tokens by
//! cross-attending to recipe tokens, MTD fuses recipe queries with the
//! enhanced image tokens, and an ITM head scores pair match probability with
//! hardest in-batch negatives.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{AttentionConfig, DecoderBlock, ForwardCtx, Linear};
use crate::tensor::{Result, Tensor, TensorError};

/// Which recipe tokens ITEM uses as keys/values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ItemKvMode {
    All,
    TitleOnly,
    IngredientsOnly,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MmrConfig {
    pub item_layers: usize,
    pub item_heads: usize,
    pub mtd_layers: usize,
    pub mtd_heads: usize,
    pub mmr_dim: usize,
    pub item_kv_mode: ItemKvMode,
    pub use_item: bool,
    pub dropout_rate: f64,
}

impl Default for MmrConfig {
    fn default() -> Self {
        MmrConfig {
            item_layers: 1,
            item_heads: 4,
            mtd_layers: 4,
            mtd_heads: 4,
            mmr_dim: 64,
            item_kv_mode: ItemKvMode::All,
            use_item: true,
            dropout_rate: 0.1,
        }
    }
}

impl MmrConfig {
    // the MMR sees detached encoder features, so its residual branches can
    // start larger than the deep recipe stack's; near-identity init left the
    // MTD head too weak to discriminate within the re-ranking window, while
    // full-scale init trained slower still
    fn item_attn(&self) -> AttentionConfig {
        AttentionConfig::new(self.item_layers, self.item_heads, self.mmr_dim)
            .with_dropout(self.dropout_rate)
            .with_residual_gain(0.1)
    }

    fn mtd_attn(&self) -> AttentionConfig {
        AttentionConfig::new(self.mtd_layers, self.mtd_heads, self.mmr_dim)
            .with_dropout(self.dropout_rate)
            .with_residual_gain(0.1)
    }
}

/// A pair match score; probability is always sigmoid(logit).
pub struct MatchScore {
    pub logit: Tensor,
    pub probability: Tensor,
}

/// Recipe tokens projected into the MMR space, keeping entity boundaries so
/// ITEM can restrict its keys/values.
pub struct ProjectedRecipe {
    pub tokens: Tensor,
    pub title_len: usize,
    pub ingredient_len: usize,
}

pub struct Mmr {
    pub cfg: MmrConfig,
    proj_r: Linear,
    proj_i: Linear,
    item: DecoderBlock,
    mtd: DecoderBlock,
    head: Linear,
}

impl Mmr {
    pub fn new(cfg: MmrConfig, encoder_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj_r = Linear::new(encoder_dim, cfg.mmr_dim, rng);
        let proj_i = Linear::new(encoder_dim, cfg.mmr_dim, rng);
        let item = DecoderBlock::new(&cfg.item_attn(), rng);
        let mtd = DecoderBlock::new(&cfg.mtd_attn(), rng);
        let head = Linear::new(cfg.mmr_dim, 1, rng);
        // ITM sees one positive per two negatives; starting the head bias at
        // the prior logit(1/3) = -ln 2 means the BCE gradient targets
        // discrimination from the first step instead of spending early epochs
        // re-fitting the class balance
        head.bias.set_data(&[-std::f64::consts::LN_2]);
        Mmr {
            proj_r,
            proj_i,
            item,
            mtd,
            head,
            cfg,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj_r.params(&format!("{prefix}.proj_r"), out);
        self.proj_i.params(&format!("{prefix}.proj_i"), out);
        self.item.params(&format!("{prefix}.item"), out);
        self.mtd.params(&format!("{prefix}.mtd"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }

    /// Two distinct linear maps into the MMR dimension.
    pub fn project_to_mmr(
        &self,
        t_r: &Tensor,
        title_len: usize,
        ingredient_len: usize,
        t_i: &Tensor,
    ) -> Result<(ProjectedRecipe, Tensor)> {
        let tokens = self.proj_r.forward(t_r)?;
        let t_i = self.proj_i.forward(t_i)?;
        Ok((
            ProjectedRecipe {
                tokens,
                title_len,
                ingredient_len,
            },
            t_i,
        ))
    }

    fn item_kv(&self, recipe: &ProjectedRecipe) -> Result<Tensor> {
        let t = recipe.title_len;
        let g = recipe.ingredient_len;
        match self.cfg.item_kv_mode {
            ItemKvMode::All => Ok(recipe.tokens.clone()),
            ItemKvMode::TitleOnly => recipe.tokens.slice_rows(0, t),
            ItemKvMode::IngredientsOnly => recipe.tokens.slice_rows(t, t + g),
        }
    }

    /// Image tokens as queries over recipe tokens. Output length equals the
    /// image token count.
    pub fn item_enhance(
        &self,
        t_i: &Tensor,
        recipe: &ProjectedRecipe,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        if !self.cfg.use_item {
            return Ok(t_i.clone());
        }
        let kv = self.item_kv(recipe)?;
        self.item.forward(t_i, &kv, ctx)
    }

    /// Recipe tokens as queries over enhanced image tokens; final query tokens
    /// mean-pooled into a single logit.
    pub fn mtd_score(
        &self,
        recipe: &ProjectedRecipe,
        enhanced: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<MatchScore> {
        let fused = self.mtd.forward(&recipe.tokens, enhanced, ctx)?;
        let pooled = fused.mean_axis(0)?;
        let logit = self.head.forward(&pooled)?;
        let probability = logit.sigmoid();
        Ok(MatchScore {
            logit,
            probability,
        })
    }

    /// Full pair score: projection, ITEM enhancement, MTD.
    pub fn score_pair(
        &self,
        t_r: &Tensor,
        title_len: usize,
        ingredient_len: usize,
        t_i: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<MatchScore> {
        let (recipe, t_i) = self.project_to_mmr(t_r, title_len, ingredient_len, t_i)?;
        let enhanced = self.item_enhance(&t_i, &recipe, ctx)?;
        self.mtd_score(&recipe, &enhanced, ctx)
    }
}

/// Hardest in-batch negatives by embedding cosine similarity. For image
/// anchor i the negative recipe is argmax over j != i of E_v[i] . E_r[j];
/// symmetric for recipe anchors. Ties break toward the lowest index.
pub fn select_hard_negatives(e_r: &Tensor, e_v: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = e_r.shape()[0];
    if e_v.shape()[0] != b || e_r.shape() != e_v.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "select_hard_negatives",
            lhs: e_r.shape().to_vec(),
            rhs: e_v.shape().to_vec(),
        });
    }
    if b < 2 {
        return Err(TensorError::InvalidInput(
            "select_hard_negatives: batch size must be at least 2".to_string(),
        ));
    }
    let d = e_r.shape()[1];
    let r = e_r.data();
    let v = e_v.data();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut neg_recipe = Vec::with_capacity(b);
    let mut neg_image = Vec::with_capacity(b);
    for i in 0..b {
        let vi = &v[i * d..(i + 1) * d];
        let ri = &r[i * d..(i + 1) * d];
        let mut best_r = (f64::NEG_INFINITY, 0);
        let mut best_v = (f64::NEG_INFINITY, 0);
        for j in 0..b {
            if j == i {
                continue;
            }
            let s_r = dot(vi, &r[j * d..(j + 1) * d]);
            if s_r > best_r.0 {
                best_r = (s_r, j);
            }
            let s_v = dot(ri, &v[j * d..(j + 1) * d]);
            if s_v > best_v.0 {
                best_v = (s_v, j);
            }
        }
        neg_recipe.push(best_r.1);
        neg_image.push(best_v.1);
    }
    Ok((neg_recipe, neg_image))
}

/// Binary cross-entropy over match probabilities, mean over all scored pairs.
/// Probabilities are clamped to [1e-7, 1 - 1e-7].
pub fn itm_loss(pos: &[MatchScore], neg: &[MatchScore]) -> Result<Tensor> {
    assert!(!pos.is_empty() || !neg.is_empty());
    let mut terms: Vec<Tensor> = Vec::with_capacity(pos.len() + neg.len());
    for s in pos {
        let p = s.probability.clamp(1e-7, 1.0 - 1e-7);
        terms.push(p.log().scale(-1.0));
    }
    for s in neg {
        let p = s.probability.clamp(1e-7, 1.0 - 1e-7);
        terms.push(p.scale(-1.0).add_scalar(1.0).log().scale(-1.0));
    }
    let n = terms.len() as f64;
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    total.scale(1.0 / n).reshape(&[1])
}
