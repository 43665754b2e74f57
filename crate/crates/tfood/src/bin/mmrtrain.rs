//! Scratch diagnostic: train a fresh MMR against frozen encoder features and
//! report how its within-window discrimination scales with epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tfood::blocks::ForwardCtx;
use tfood::checkpoint::Checkpoint;
use tfood::corpus;
use tfood::mmr::{itm_loss, select_hard_negatives, Mmr};
use tfood::optim::{Adam, AdamConfig};
use tfood::tensor::Tensor;
use tfood::train::export_embeddings;

struct Cached {
    t_r: Tensor,
    ttl: usize,
    ing: usize,
    t_i: Tensor,
}

fn cache(model: &tfood::model::TFoodModel, pairs: &[corpus::Pair]) -> Vec<Cached> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx::eval(&mut rng);
    pairs
        .iter()
        .map(|p| {
            let rt = model.recipe.encode(&p.recipe, &mut ctx).unwrap();
            let it = model.image.encode(&p.image, &mut ctx).unwrap();
            Cached {
                t_r: rt.t_r.detach(),
                ttl: rt.t_ttl3.shape()[0],
                ing: rt.t_ing3.shape()[0],
                t_i: it.t_i.detach(),
            }
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (ckpt_path, data) = (&args[1], &args[2]);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let ckpt = Checkpoint::load(std::path::Path::new(ckpt_path)).unwrap();
    let (model, _) = ckpt.restore(1e-3).unwrap();
    let vocab = corpus::load_vocab(std::path::Path::new(data)).unwrap();
    let train_pairs = corpus::load_split(std::path::Path::new(data), "train", &vocab).unwrap();
    let mut test_pairs = corpus::load_split(std::path::Path::new(data), "test", &vocab).unwrap();
    test_pairs.truncate(100);

    let tr_tok = cache(&model, &train_pairs);
    let te_tok = cache(&model, &test_pairs);
    let tr_emb = export_embeddings(&model, &train_pairs).unwrap();
    let te_emb = export_embeddings(&model, &test_pairs).unwrap();
    let d = tr_emb.dim;
    let n_te = test_pairs.len();

    // DE top-10 per test image query, fixed
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let top10: Vec<Vec<usize>> = (0..n_te)
        .map(|i| {
            let vi = &te_emb.e_v[i * d..(i + 1) * d];
            let mut order: Vec<usize> = (0..n_te).collect();
            order.sort_by(|&a, &b| {
                dot(vi, &te_emb.e_r[b * d..(b + 1) * d])
                    .partial_cmp(&dot(vi, &te_emb.e_r[a * d..(a + 1) * d]))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order[..10].to_vec()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mmr = Mmr::new(model.cfg.mmr_cfg(), 64, &mut rng);
    let mut params = Vec::new();
    mmr.params("mmr", &mut params);
    let mut adam = Adam::new(AdamConfig::new(lr));

    let score = |r: usize, i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let c = &tr_tok[r];
        mmr.score_pair(&c.t_r, c.ttl, c.ing, &tr_tok[i].t_i, &mut ctx)
            .unwrap()
    };

    for epoch in 0..epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(100 + epoch as u64);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut erng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(32) {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let mut er = Vec::with_capacity(b * d);
            let mut ev = Vec::with_capacity(b * d);
            for &i in chunk {
                er.extend_from_slice(&tr_emb.e_r[i * d..(i + 1) * d]);
                ev.extend_from_slice(&tr_emb.e_v[i * d..(i + 1) * d]);
            }
            let er = Tensor::from_vec(&[b, d], er);
            let ev = Tensor::from_vec(&[b, d], ev);
            let (neg_r, neg_i) = select_hard_negatives(&er, &ev).unwrap();
            let mut pos = Vec::with_capacity(b);
            let mut neg = Vec::with_capacity(2 * b);
            for (k, &i) in chunk.iter().enumerate() {
                pos.push(score(i, i));
                neg.push(score(chunk[neg_r[k]], i));
                neg.push(score(i, chunk[neg_i[k]]));
            }
            let loss = itm_loss(&pos, &neg).unwrap();
            loss_sum += loss.item();
            for (_, p) in &params {
                p.zero_grad();
            }
            loss.backward();
            adam.step(&params, &[]).unwrap();
            batches += 1;
        }
        if epoch % 5 == 4 || epoch == epochs - 1 {
            let mut top1 = 0;
            for i in 0..n_te {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for &r in &top10[i] {
                    let mut rr = ChaCha8Rng::seed_from_u64(0);
                    let mut ctx = ForwardCtx::eval(&mut rr);
                    let c = &te_tok[r];
                    let p = mmr
                        .score_pair(&c.t_r, c.ttl, c.ing, &te_tok[i].t_i, &mut ctx)
                        .unwrap()
                        .probability
                        .item();
                    if p > best.0 {
                        best = (p, r);
                    }
                }
                if best.1 == i {
                    top1 += 1;
                }
            }
            println!(
                "epoch {epoch}: itm {:.4}  test top-1 within DE top-10: {top1}/{n_te}",
                loss_sum / batches as f64
            );
        } else {
            println!("epoch {epoch}: itm {:.4}", loss_sum / batches as f64);
        }
    }
}
