//! Retrieval evaluation: exact pairwise cosine similarity, medR and R@K over
//! repeated random bags, and optional re-ranking of each query's top-k
//! candidates by a fine-grained pair scorer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

pub const EVAL_THREADS_ENV: &str = "TFOOD_EVAL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToRecipe,
    RecipeToImage,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub bag_size: usize,
    pub num_bags: usize,
    pub image_to_recipe: bool,
    pub recipe_to_image: bool,
    pub rerank_top_k: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bag_size: 100,
            num_bags: 10,
            image_to_recipe: true,
            recipe_to_image: true,
            rerank_top_k: None,
            seed: 0,
        }
    }
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagMetrics {
    pub medr: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionReport {
    pub medr: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub per_bag: Vec<BagMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_to_recipe: Option<DirectionReport>,
    pub recipe_to_image: Option<DirectionReport>,
}

/// Reorders a query's candidate list (given in descending dual-encoder
/// similarity order) by a finer pair score.
pub trait Reranker {
    fn rerank(&self, dir: Direction, query: usize, candidates: &[usize]) -> Vec<usize>;
}

/// Reranks by descending score with a stable sort, so score ties preserve the
/// incoming dual-encoder order.
pub fn rerank_by_scores(candidates: &[usize], scores: &[f64]) -> Vec<usize> {
    assert_eq!(candidates.len(), scores.len());
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order.into_iter().map(|i| candidates[i]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of candidate i for query i when candidates are sorted by
/// descending similarity; exact-similarity ties break by candidate index.
pub fn rank_matrix(queries: &[f64], candidates: &[f64], n: usize, d: usize) -> Vec<usize> {
    assert_eq!(queries.len(), n * d);
    assert_eq!(candidates.len(), n * d);
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let q = &queries[i * d..(i + 1) * d];
        let s_gt = dot(q, &candidates[i * d..(i + 1) * d]);
        let mut rank = 1;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = dot(q, &candidates[j * d..(j + 1) * d]);
            if s > s_gt || (s == s_gt && j < i) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    ranks
}

/// Median of 1-based ranks; even counts average the two middle values.
pub fn median_rank(ranks: &[usize]) -> f64 {
    assert!(!ranks.is_empty());
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

fn bag_metrics(ranks: &[usize]) -> BagMetrics {
    let n = ranks.len() as f64;
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, 100.0 * hits as f64 / n)
        })
        .collect();
    BagMetrics {
        medr: median_rank(ranks),
        recall_at,
    }
}

fn summarize(per_bag: Vec<BagMetrics>) -> DirectionReport {
    let n = per_bag.len() as f64;
    let medr = per_bag.iter().map(|b| b.medr).sum::<f64>() / n;
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| (k, per_bag.iter().map(|b| b.recall_at[&k]).sum::<f64>() / n))
        .collect();
    DirectionReport {
        medr,
        recall_at,
        per_bag,
    }
}

fn sample_bag(n: usize, bag_size: usize, seed: u64, bag: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((bag as u64).wrapping_mul(0x9e3779b97f4a7c15)));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(bag_size);
    idx
}

fn eval_threads() -> usize {
    std::env::var(EVAL_THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

/// Ranks for one direction within one bag, optionally re-ranking each query's
/// dual-encoder top-k with the given scorer.
fn bag_ranks(
    dir: Direction,
    e_r: &[f64],
    e_v: &[f64],
    d: usize,
    bag: &[usize],
    reranker: Option<(&dyn Reranker, usize)>,
) -> Vec<usize> {
    let (q_all, c_all) = match dir {
        Direction::ImageToRecipe => (e_v, e_r),
        Direction::RecipeToImage => (e_r, e_v),
    };
    let m = bag.len();
    let mut ranks = Vec::with_capacity(m);
    for (qi, &qg) in bag.iter().enumerate() {
        let q = &q_all[qg * d..(qg + 1) * d];
        let mut sims: Vec<(f64, usize)> = bag
            .iter()
            .enumerate()
            .map(|(ci, &cg)| (dot(q, &c_all[cg * d..(cg + 1) * d]), ci))
            .collect();
        // descending similarity, ties by candidate position in the bag
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite sims").then(a.1.cmp(&b.1)));
        let order: Vec<usize> = sims.iter().map(|s| s.1).collect();
        let base_rank = order.iter().position(|&c| c == qi).expect("gt in bag") + 1;
        let rank = match reranker {
            Some((rr, top_k)) if top_k >= 1 => {
                let k = top_k.min(m);
                if base_rank <= k {
                    let top_global: Vec<usize> = order[..k].iter().map(|&c| bag[c]).collect();
                    let reordered = rr.rerank(dir, qg, &top_global);
                    assert_eq!(reordered.len(), k, "reranker must permute its input");
                    reordered
                        .iter()
                        .position(|&g| g == qg)
                        .expect("gt stays within the re-ranked window")
                        + 1
                } else {
                    base_rank
                }
            }
            _ => base_rank,
        };
        ranks.push(rank);
    }
    ranks
}

/// Full protocol: `num_bags` bags of `bag_size` pairs sampled without
/// replacement (independently across bags), medR and R@K per bag and averaged.
pub fn evaluate(
    e_r: &[f64],
    e_v: &[f64],
    d: usize,
    cfg: &EvalConfig,
    reranker: Option<(&dyn Reranker, usize)>,
) -> Result<EvalReport, TensorError> {
    let n = e_r.len() / d;
    if e_r.len() != n * d || e_v.len() != e_r.len() {
        return Err(TensorError::InvalidInput(
            "evaluate: embedding matrices must be aligned N x d".to_string(),
        ));
    }
    if cfg.bag_size > n {
        return Err(TensorError::InvalidInput(format!(
            "evaluate: bag size {} exceeds corpus size {n}",
            cfg.bag_size
        )));
    }
    if let Some((_, k)) = reranker {
        if k > cfg.bag_size {
            return Err(TensorError::InvalidInput(format!(
                "evaluate: rerank top-k {k} exceeds bag size {}",
                cfg.bag_size
            )));
        }
    }
    let bags: Vec<Vec<usize>> = (0..cfg.num_bags)
        .map(|b| sample_bag(n, cfg.bag_size, cfg.seed, b))
        .collect();

    let run_dir = |dir: Direction| -> DirectionReport {
        let threads = eval_threads().min(bags.len().max(1));
        let per_bag: Vec<BagMetrics> = if threads > 1 && reranker.is_none() {
            let mut slots: Vec<Option<BagMetrics>> = vec![None; bags.len()];
            std::thread::scope(|scope| {
                let chunks: Vec<_> = slots.chunks_mut(bags.len().div_ceil(threads)).collect();
                let mut start = 0;
                for chunk in chunks {
                    let len = chunk.len();
                    let bags = &bags;
                    let offset = start;
                    scope.spawn(move || {
                        for (i, slot) in chunk.iter_mut().enumerate() {
                            let ranks = bag_ranks(dir, e_r, e_v, d, &bags[offset + i], None);
                            *slot = Some(bag_metrics(&ranks));
                        }
                    });
                    start += len;
                }
            });
            slots.into_iter().map(|s| s.expect("bag computed")).collect()
        } else {
            bags.iter()
                .map(|bag| bag_metrics(&bag_ranks(dir, e_r, e_v, d, bag, reranker)))
                .collect()
        };
        summarize(per_bag)
    };

    Ok(EvalReport {
        image_to_recipe: cfg.image_to_recipe.then(|| run_dir(Direction::ImageToRecipe)),
        recipe_to_image: cfg.recipe_to_image.then(|| run_dir(Direction::RecipeToImage)),
    })
}

pub fn format_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    for (name, dir) in [
        ("image-to-recipe", &report.image_to_recipe),
        ("recipe-to-image", &report.recipe_to_image),
    ] {
        if let Some(d) = dir {
            out.push_str(&format!(
                "{name}: medR {:.2}  R@1 {:.2}  R@5 {:.2}  R@10 {:.2}  ({} bags)\n",
                d.medr, d.recall_at[&1], d.recall_at[&5], d.recall_at[&10], d.per_bag.len()
            ));
        }
    }
    out
}

/// One JSON record per bag plus a summary record per direction.
pub fn format_report_jsonl(report: &EvalReport) -> String {
    let mut lines = Vec::new();
    for (name, dir) in [
        ("image_to_recipe", &report.image_to_recipe),
        ("recipe_to_image", &report.recipe_to_image),
    ] {
        if let Some(d) = dir {
            for (i, bag) in d.per_bag.iter().enumerate() {
                lines.push(
                    serde_json::json!({
                        "record": "bag", "direction": name, "bag": i,
                        "medr": bag.medr, "recall_at": bag.recall_at,
                    })
                    .to_string(),
                );
            }
            lines.push(
                serde_json::json!({
                    "record": "summary", "direction": name,
                    "medr": d.medr, "recall_at": d.recall_at,
                })
                .to_string(),
            );
        }
    }
    lines.join("\n") + "\n"
}
