//! Training loop: per-epoch shuffling, batch-all triplet losses with margin
//! schedules, semantic loss on the labeled fraction, ITM through the MMR block
//! with hardest in-batch negatives, image-encoder freezing, per-epoch
//! validation, and checkpoint selection by validation medR then R@1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ForwardCtx;
use crate::checkpoint::{Checkpoint, EmbeddingFile};
use crate::corpus::Pair;
use crate::eval::{evaluate, EvalConfig};
use crate::losses::{
    active_triplet_count, itc_loss, margin_at, semantic_loss, total_loss, MarginKind, MarginPolicy,
};
use crate::mmr::{itm_loss, select_hard_negatives, MatchScore};
use crate::model::{BatchEncoding, ModelConfig, TFoodModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps of linear learning-rate warmup from 0 to `learning_rate`.
    pub warmup_steps: usize,
    pub freeze_image_epochs: usize,
    pub margin: MarginPolicy,
    pub lambda_sem: f64,
    pub lambda_itm: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            // post-norm stacks are sensitive to the very first updates; two
            // epochs of linear warmup avoid early collapse on bad seeds
            warmup_steps: 32,
            // the paper freezes its pretrained image encoder early on; ours
            // trains from scratch, so freezing is opt-in
            freeze_image_epochs: 0,
            margin: MarginPolicy::inc(),
            lambda_sem: 0.1,
            lambda_itm: 1.0,
            labeled_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub itc: f64,
    pub sem: f64,
    pub itm: f64,
    pub total: f64,
    pub delta_r: usize,
    pub delta_v: usize,
    pub margin: f64,
    pub val_medr: Option<f64>,
    pub val_r1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: TFoodModel,
    pub adam: Adam,
    pub metrics: Vec<EpochMetrics>,
    pub best: Checkpoint,
    pub best_epoch: usize,
}

/// Loss terms of a single optimization step, as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub itc: f64,
    pub sem: f64,
    pub itm: f64,
    pub total: f64,
    pub delta_r: usize,
    pub delta_v: usize,
    pub margin: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
    )
}

/// Class labels for a shuffled batch: the first `labeled_fraction` of rows
/// keep their class, the rest are treated as unlabeled.
fn batch_classes(pairs: &[&Pair], labeled_fraction: f64) -> Vec<Option<usize>> {
    let labeled = (labeled_fraction * pairs.len() as f64).round() as usize;
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| if k < labeled { Some(p.dish.class) } else { None })
        .collect()
}

fn itm_scores(
    model: &TFoodModel,
    enc: &BatchEncoding,
    ctx: &mut ForwardCtx,
) -> Result<(Vec<MatchScore>, Vec<MatchScore>)> {
    let mmr = model.mmr.as_ref().expect("itm requires the MMR block");
    let (neg_recipe, neg_image) = select_hard_negatives(&enc.e_r, &enc.e_v)?;
    let b = enc.recipes.len();
    let score = |ri: usize, ii: usize, ctx: &mut ForwardCtx| -> Result<MatchScore> {
        let rt = &enc.recipes[ri];
        // token sequences are detached: the ITM signal trains the MMR block
        // against stable encoder features instead of destabilizing them
        mmr.score_pair(
            &rt.t_r.detach(),
            rt.t_ttl3.shape()[0],
            rt.t_ing3.shape()[0],
            &enc.images[ii].t_i.detach(),
            ctx,
        )
    };
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(2 * b);
    for i in 0..b {
        pos.push(score(i, i, ctx)?);
    }
    for i in 0..b {
        // hardest recipe against image anchor i, hardest image against recipe i
        neg.push(score(neg_recipe[i], i, ctx)?);
        neg.push(score(i, neg_image[i], ctx)?);
    }
    Ok((pos, neg))
}

/// One forward/backward/update over a batch. Exposed for tests.
pub fn train_step(
    model: &TFoodModel,
    adam: &mut Adam,
    cfg: &TrainConfig,
    batch: &[&Pair],
    epoch: usize,
    frozen: &[&str],
    ctx: &mut ForwardCtx,
) -> Result<StepLosses> {
    let recipes: Vec<_> = batch.iter().map(|p| &p.recipe).collect();
    let images: Vec<_> = batch.iter().map(|p| &p.image).collect();
    let enc = model.encode_batch(&recipes, &images, ctx)?;

    let margin = match cfg.margin.kind {
        MarginKind::Ada => {
            let delta = active_triplet_count(&enc.e_r, &enc.e_v, cfg.margin.alpha)?;
            margin_at(&cfg.margin, epoch, delta)
        }
        _ => margin_at(&cfg.margin, epoch, 0),
    };

    let (itc, stats) = itc_loss(&enc.e_r, &enc.e_v, margin)?;
    let classes = batch_classes(batch, cfg.labeled_fraction);
    let (sem, _) = semantic_loss(&enc.e_r, &enc.e_v, &classes, margin)?;
    let itm = if model.mmr.is_some() && cfg.lambda_itm != 0.0 {
        let (pos, neg) = itm_scores(model, &enc, ctx)?;
        itm_loss(&pos, &neg)?
    } else {
        Tensor::scalar(0.0)
    };
    let total = total_loss(&itc, &sem, &itm, cfg.lambda_sem, cfg.lambda_itm)?;

    let losses = StepLosses {
        itc: itc.item(),
        sem: sem.item(),
        itm: itm.item(),
        total: total.item(),
        delta_r: stats.delta_r,
        delta_v: stats.delta_v,
        margin,
    };
    if !losses.total.is_finite() {
        return Err(TensorError::InvalidInput(format!(
            "non-finite training loss at epoch {epoch}: itc={} sem={} itm={} margin={} delta_r={} delta_v={}",
            losses.itc, losses.sem, losses.itm, losses.margin, losses.delta_r, losses.delta_v
        )));
    }

    model.zero_grad();
    total.backward();
    // linear warmup, indexed by the optimizer's own step count so a resumed
    // run replays the same schedule
    let scale = if cfg.warmup_steps > 0 {
        ((adam.step_count + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    adam.cfg.learning_rate = cfg.learning_rate * scale;
    adam.step(&model.params(), frozen)?;
    Ok(losses)
}

/// Validation retrieval metrics: one bag covering up to 100 held-out pairs.
pub fn validate(model: &TFoodModel, pairs: &[Pair], seed: u64) -> Result<(f64, f64)> {
    let emb = export_embeddings(model, pairs)?;
    let cfg = EvalConfig {
        bag_size: pairs.len().min(100),
        num_bags: 1,
        image_to_recipe: true,
        recipe_to_image: false,
        rerank_top_k: None,
        seed,
    };
    let rep = evaluate(&emb.e_r, &emb.e_v, emb.dim, &cfg, None)?;
    let dir = rep.image_to_recipe.expect("direction enabled");
    Ok((dir.medr, dir.recall_at[&1]))
}

/// Embeddings for a whole split in eval mode (deterministic).
pub fn export_embeddings(model: &TFoodModel, pairs: &[Pair]) -> Result<EmbeddingFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx::eval(&mut rng);
    let d = model.image.cfg.d_embed;
    let mut e_r = Vec::with_capacity(pairs.len() * d);
    let mut e_v = Vec::with_capacity(pairs.len() * d);
    let mut pair_ids = Vec::with_capacity(pairs.len());
    for p in pairs {
        e_r.extend(model.recipe.encode(&p.recipe, &mut ctx)?.e_r.data());
        e_v.extend(model.image.encode(&p.image, &mut ctx)?.e_i.data());
        pair_ids.push(p.id);
    }
    Ok(EmbeddingFile {
        dim: d,
        e_r,
        e_v,
        pair_ids,
    })
}

/// Evaluation-time re-ranker: scores candidates with the MTD match
/// probability, encoding each pair's token sequences on demand and caching.
pub struct MtdReranker<'a> {
    model: &'a TFoodModel,
    pairs: &'a [Pair],
    cache: std::cell::RefCell<
        std::collections::HashMap<usize, (crate::recipe::RecipeTokens, crate::image::ImageTokens)>,
    >,
}

impl<'a> MtdReranker<'a> {
    pub fn new(model: &'a TFoodModel, pairs: &'a [Pair]) -> Self {
        assert!(model.mmr.is_some(), "re-ranking requires the MMR block");
        MtdReranker {
            model,
            pairs,
            cache: std::cell::RefCell::new(std::collections::HashMap::new()),
        }
    }

    fn ensure(&self, idx: usize) -> Result<()> {
        let mut cache = self.cache.borrow_mut();
        if !cache.contains_key(&idx) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx::eval(&mut rng);
            let p = &self.pairs[idx];
            let rt = self.model.recipe.encode(&p.recipe, &mut ctx)?;
            let it = self.model.image.encode(&p.image, &mut ctx)?;
            cache.insert(idx, (rt, it));
        }
        Ok(())
    }

    pub fn probability(&self, recipe_idx: usize, image_idx: usize) -> Result<f64> {
        self.ensure(recipe_idx)?;
        self.ensure(image_idx)?;
        let cache = self.cache.borrow();
        let (rt, _) = &cache[&recipe_idx];
        let (_, it) = &cache[&image_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let mmr = self.model.mmr.as_ref().expect("checked in new");
        let score = mmr.score_pair(
            &rt.t_r,
            rt.t_ttl3.shape()[0],
            rt.t_ing3.shape()[0],
            &it.t_i,
            &mut ctx,
        )?;
        Ok(score.probability.item())
    }
}

impl crate::eval::Reranker for MtdReranker<'_> {
    fn rerank(&self, dir: crate::eval::Direction, query: usize, candidates: &[usize]) -> Vec<usize> {
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&c| {
                let (r, i) = match dir {
                    crate::eval::Direction::ImageToRecipe => (c, query),
                    crate::eval::Direction::RecipeToImage => (query, c),
                };
                self.probability(r, i).expect("pair scoring failed")
            })
            .collect();
        crate::eval::rerank_by_scores(candidates, &scores)
    }
}

pub fn train(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    resume: Option<&Checkpoint>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochMetrics)>,
) -> Result<TrainOutcome> {
    if train_pairs.len() < 2 {
        return Err(TensorError::InvalidInput(
            "training requires at least 2 pairs".to_string(),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(TensorError::InvalidInput(
            "batch size must be at least 2".to_string(),
        ));
    }
    let (model, mut adam, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.config != model_cfg {
                return Err(TensorError::InvalidInput(
                    "resume checkpoint config does not match requested model config".to_string(),
                ));
            }
            let (model, adam) = ckpt.restore(cfg.learning_rate)?;
            (model, adam, ckpt.epoch as usize)
        }
        None => (
            TFoodModel::new(model_cfg, cfg.seed),
            Adam::new(AdamConfig::new(cfg.learning_rate)),
            0,
        ),
    };

    let mut metrics = Vec::new();
    let mut best: Option<(f64, f64, usize, Checkpoint)> = None;
    for epoch in start_epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let frozen: &[&str] = if epoch < cfg.freeze_image_epochs {
            &["image."]
        } else {
            &[]
        };
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a trailing singleton has no in-batch negatives
            }
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let mut ctx = ForwardCtx::train(&mut rng);
            let step = train_step(&model, &mut adam, cfg, &batch, epoch, frozen, &mut ctx)?;
            sums.0 += step.itc;
            sums.1 += step.sem;
            sums.2 += step.itm;
            sums.3 += step.total;
            sums.4 += step.delta_r;
            sums.5 += step.delta_v;
            sums.6 += step.margin;
            batches += 1;
        }
        if batches == 0 {
            return Err(TensorError::InvalidInput(
                "no usable batches (need at least 2 pairs per batch)".to_string(),
            ));
        }
        let nb = batches as f64;
        let (val_medr, val_r1) = if val_pairs.is_empty() {
            (None, None)
        } else {
            let (m, r1) = validate(&model, val_pairs, cfg.seed)?;
            (Some(m), Some(r1))
        };
        let em = EpochMetrics {
            epoch,
            itc: sums.0 / nb,
            sem: sums.1 / nb,
            itm: sums.2 / nb,
            total: sums.3 / nb,
            delta_r: sums.4,
            delta_v: sums.5,
            margin: sums.6 / nb,
            val_medr,
            val_r1,
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&em);
        }
        let key = (val_medr.unwrap_or(f64::INFINITY), -val_r1.unwrap_or(0.0));
        let better = match &best {
            Some((bm, br, _, _)) => key < (*bm, *br),
            None => true,
        };
        if better || val_medr.is_none() {
            best = Some((
                key.0,
                key.1,
                epoch,
                Checkpoint::capture(&model, epoch as u64 + 1, &adam),
            ));
        }
        metrics.push(em);
    }
    let (_, _, best_epoch, best) = best.ok_or_else(|| {
        TensorError::InvalidInput("training ran no epochs (resume epoch >= epochs?)".to_string())
    })?;
    Ok(TrainOutcome {
        model,
        adam,
        metrics,
        best,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};

    fn tiny_corpus(n: usize, seed: u64) -> crate::corpus::Corpus {
        generate(&CorpusSpec {
            num_pairs: n,
            num_classes: 2,
            num_ingredient_words: 8,
            noise_level: 0.05,
            seed,
        })
        .unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lambda_itm: 0.0,
            lambda_sem: 0.0,
            freeze_image_epochs: 0,
            warmup_steps: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_over_steps() {
        let c = tiny_corpus(8, 1);
        let mut mc = ModelConfig::toy(c.vocab.len());
        mc.use_mmr = false;
        mc.dropout_rate = 0.0;
        let cfg = fast_cfg();
        let model = TFoodModel::new(mc, cfg.seed);
        let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate));
        let batch: Vec<&Pair> = c.pairs.iter().collect();
        let mut losses = Vec::new();
        for _ in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            losses.push(
                train_step(&model, &mut adam, &cfg, &batch, 0, &[], &mut ForwardCtx::train(&mut rng))
                    .unwrap()
                    .total,
            );
        }
        // the active-triplet normalization makes the mean hinge non-monotone,
        // but at least one step must strictly reduce the loss
        assert!(
            losses.windows(2).any(|w| w[1] < w[0]),
            "no decreasing step in {losses:?}"
        );
    }

    #[test]
    fn full_freeze_keeps_image_params_constant() {
        let c = tiny_corpus(8, 2);
        let mut mc = ModelConfig::toy(c.vocab.len());
        mc.use_mmr = false;
        mc.dropout_rate = 0.0;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            freeze_image_epochs: 1,
            lambda_itm: 0.0,
            ..TrainConfig::default()
        };
        let snapshot = |m: &TFoodModel| -> Vec<(String, Vec<f64>)> {
            m.params()
                .into_iter()
                .filter(|(n, _)| n.starts_with("image."))
                .map(|(n, p)| (n, p.data()))
                .collect()
        };
        let out = train(mc, &cfg, &c.pairs, &[], None, None).unwrap();
        let reference = TFoodModel::new(out.model.cfg.clone(), cfg.seed);
        assert_eq!(snapshot(&out.model), snapshot(&reference));
    }

    #[test]
    fn metrics_log_is_deterministic() {
        let c = tiny_corpus(8, 3);
        let mc = ModelConfig::toy(c.vocab.len());
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(mc.clone(), &cfg, &c.pairs, &c.pairs, None, None).unwrap();
        let b = train(mc, &cfg, &c.pairs, &c.pairs, None, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
    }

    #[test]
    fn inc_margin_log_matches_schedule() {
        let c = tiny_corpus(6, 4);
        let mut mc = ModelConfig::toy(c.vocab.len());
        mc.use_mmr = false;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            margin: MarginPolicy::inc(),
            lambda_itm: 0.0,
            ..TrainConfig::default()
        };
        let out = train(mc, &cfg, &c.pairs, &[], None, None).unwrap();
        for em in &out.metrics {
            assert_eq!(em.margin, margin_at(&cfg.margin, em.epoch, 0));
        }
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let c = tiny_corpus(8, 5);
        let mc = ModelConfig::toy(c.vocab.len());
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let full = train(mc.clone(), &cfg, &c.pairs, &[], None, None).unwrap();
        let one = train(
            mc.clone(),
            &TrainConfig { epochs: 1, ..cfg.clone() },
            &c.pairs,
            &[],
            None,
            None,
        )
        .unwrap();
        let ckpt = Checkpoint::capture(&one.model, 1, &one.adam);
        let resumed = train(mc, &cfg, &c.pairs, &[], Some(&ckpt), None).unwrap();
        assert_eq!(resumed.metrics.len(), 1);
        let a = &full.metrics[1];
        let b = &resumed.metrics[0];
        assert!((a.total - b.total).abs() < 1e-9, "{} vs {}", a.total, b.total);
        assert_eq!(a.delta_r, b.delta_r);
    }

    #[test]
    fn export_embeddings_unit_norm() {
        let c = tiny_corpus(4, 6);
        let mut mc = ModelConfig::toy(c.vocab.len());
        mc.dropout_rate = 0.0;
        let model = TFoodModel::new(mc, 0);
        let emb = export_embeddings(&model, &c.pairs).unwrap();
        assert_eq!(emb.count(), 4);
        for i in 0..4 {
            let row = &emb.e_r[i * emb.dim..(i + 1) * emb.dim];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(emb.pair_ids, vec![0, 1, 2, 3]);
    }
}
