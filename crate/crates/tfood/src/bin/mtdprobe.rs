//! Scratch diagnostic: MTD discrimination on a held-out split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tfood::blocks::ForwardCtx;
use tfood::checkpoint::Checkpoint;
use tfood::corpus;
use tfood::train::export_embeddings;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (ckpt_path, data) = (&args[1], &args[2]);
    let ckpt = Checkpoint::load(std::path::Path::new(ckpt_path)).unwrap();
    let (model, _) = ckpt.restore(1e-3).unwrap();
    let split = args.get(3).map(String::as_str).unwrap_or("test");
    let limit: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(100);
    let vocab = corpus::load_vocab(std::path::Path::new(data)).unwrap();
    let mut pairs = corpus::load_split(std::path::Path::new(data), split, &vocab).unwrap();
    pairs.truncate(limit);
    let n = pairs.len();
    let emb = export_embeddings(&model, &pairs).unwrap();
    let d = emb.dim;

    // token cache
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx::eval(&mut rng);
    let toks: Vec<_> = pairs
        .iter()
        .map(|p| {
            (
                model.recipe.encode(&p.recipe, &mut ctx).unwrap(),
                model.image.encode(&p.image, &mut ctx).unwrap(),
            )
        })
        .collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut p_pos = Vec::new();
    let mut p_neg = Vec::new();
    let mut top1 = 0;
    let mut truth_mean_rank = 0.0;
    for i in 0..n {
        // DE top-10 recipes for image i
        let vi = &emb.e_v[i * d..(i + 1) * d];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            dot(vi, &emb.e_r[b * d..(b + 1) * d])
                .partial_cmp(&dot(vi, &emb.e_r[a * d..(a + 1) * d]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let top10 = &order[..10];
        let mut scored: Vec<(f64, usize)> = top10
            .iter()
            .map(|&r| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = ForwardCtx::eval(&mut rng);
                let p = model
                    .match_probability(&toks[r].0, &toks[i].1, &mut ctx)
                    .unwrap();
                if r == i {
                    p_pos.push(p);
                } else {
                    p_neg.push(p);
                }
                (p, r)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        if scored[0].1 == i {
            top1 += 1;
        }
        if let Some(rank) = scored.iter().position(|&(_, r)| r == i) {
            truth_mean_rank += rank as f64 + 1.0;
        } else {
            truth_mean_rank += 50.0; // truth outside DE top-10
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "pos: mean {:.4} min {:.4}   neg(top10): mean {:.4} max {:.4}",
        mean(&p_pos),
        p_pos.iter().cloned().fold(f64::INFINITY, f64::min),
        mean(&p_neg),
        p_neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    println!(
        "MTD top-1 within DE top-10: {top1}/{n}   truth mean rank after rerank: {:.2}",
        truth_mean_rank / n as f64
    );
}
