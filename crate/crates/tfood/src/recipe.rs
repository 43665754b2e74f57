//! Hierarchical recipe encoder: sentence-level transformer T, entity-level
//! transformer HT, a cross-entity decoder stage HTD, and pooling into the
//! recipe embedding e_R.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::blocks::{add_positional, AttentionConfig, DecoderBlock, EncoderBlock, ForwardCtx, Linear};
use crate::tensor::{Result, Tensor, TensorError};

pub const OOV_ID: usize = 0;

/// Corpus-derived word-level vocabulary. Id 0 is reserved for
/// out-of-vocabulary words.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.add("<oov>");
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<usize> {
        sentence
            .split_whitespace()
            .map(|w| self.lookup(&w.to_lowercase()))
            .collect()
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }
}

#[derive(Debug, Clone)]
pub struct RecipeSample {
    pub title: Vec<usize>,
    pub ingredients: Vec<Vec<usize>>,
    pub instructions: Vec<Vec<usize>>,
    pub class_label: Option<usize>,
}

impl RecipeSample {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.title.is_empty() || self.ingredients.is_empty() || self.instructions.is_empty() {
            return Err(TensorError::InvalidInput(
                "recipe sample needs a title, at least one ingredient and one instruction"
                    .to_string(),
            ));
        }
        let all = self
            .title
            .iter()
            .chain(self.ingredients.iter().flatten())
            .chain(self.instructions.iter().flatten());
        for &id in all {
            if id >= vocab_size {
                return Err(TensorError::InvalidInput(format!(
                    "token id {id} exceeds vocabulary size {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

/// How the HTD cross attention wires the three entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HtdMode {
    /// Disabled: t^3 entities are the t^2 entities.
    Off,
    /// Each entity attends to the concatenation of the other two.
    Full,
    /// v2: ingredients attend only to instructions and vice versa; the title
    /// still attends to both.
    V2,
}

#[derive(Debug, Clone)]
pub struct RecipeEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub t_cfg: AttentionConfig,
    pub ht_cfg: AttentionConfig,
    pub htd_cfg: AttentionConfig,
    pub htd_mode: HtdMode,
    /// One HTD parameter set shared across the three entity roles, or three
    /// separate decoders.
    pub shared_htd: bool,
    pub use_positional: bool,
    pub max_title_tokens: usize,
    pub max_sentences: usize,
    pub max_ingredient_tokens: usize,
    pub max_instruction_tokens: usize,
}

impl RecipeEncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        let d = 64;
        RecipeEncoderConfig {
            vocab_size,
            d_model: d,
            d_embed: 64,
            t_cfg: AttentionConfig::new(2, 4, d),
            ht_cfg: AttentionConfig::new(2, 4, d),
            htd_cfg: AttentionConfig::new(2, 4, d),
            htd_mode: HtdMode::Full,
            shared_htd: true,
            use_positional: true,
            max_title_tokens: 8,
            max_sentences: 12,
            max_ingredient_tokens: 6,
            max_instruction_tokens: 8,
        }
    }
}

/// Token-level outputs of the recipe encoder.
pub struct RecipeTokens {
    pub t_ttl3: Tensor,
    pub t_ing3: Tensor,
    pub t_ins3: Tensor,
    /// Concatenation [t_ttl3; t_ing3; t_ins3].
    pub t_r: Tensor,
    /// Unit-norm recipe embedding.
    pub e_r: Tensor,
}

pub struct RecipeEncoder {
    pub cfg: RecipeEncoderConfig,
    embedding: Tensor, // [vocab x d_model]
    t_enc: EncoderBlock,
    ht_enc: EncoderBlock,
    htd: Vec<DecoderBlock>, // 1 when shared, 3 otherwise (ttl, ing, ins)
    pool: Linear,           // [3*d_model -> d_embed]
}

impl RecipeEncoder {
    pub fn new(cfg: RecipeEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let embedding = Tensor::randn_param(&[cfg.vocab_size, cfg.d_model], 0.1, rng);
        let t_enc = EncoderBlock::new(&cfg.t_cfg, rng);
        let ht_enc = EncoderBlock::new(&cfg.ht_cfg, rng);
        let n_htd = if cfg.shared_htd { 1 } else { 3 };
        let htd = (0..n_htd).map(|_| DecoderBlock::new(&cfg.htd_cfg, rng)).collect();
        let pool = Linear::new(3 * cfg.d_model, cfg.d_embed, rng);
        RecipeEncoder {
            cfg,
            embedding,
            t_enc,
            ht_enc,
            htd,
            pool,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.embedding"), self.embedding.clone()));
        self.t_enc.params(&format!("{prefix}.t"), out);
        self.ht_enc.params(&format!("{prefix}.ht"), out);
        for (i, d) in self.htd.iter().enumerate() {
            d.params(&format!("{prefix}.htd{i}"), out);
        }
        self.pool.params(&format!("{prefix}.pool"), out);
    }

    fn htd_for(&self, role: usize) -> &DecoderBlock {
        if self.cfg.shared_htd {
            &self.htd[0]
        } else {
            &self.htd[role]
        }
    }

    fn embed_sentence(&self, ids: &[usize], max_len: usize) -> Result<Tensor> {
        let ids = &ids[..ids.len().min(max_len)];
        let emb = Tensor::embedding_lookup(&self.embedding, ids)?;
        if self.cfg.use_positional {
            add_positional(&emb)
        } else {
            Ok(emb)
        }
    }

    /// Sentence-level stage: title through T only; ingredient and instruction
    /// sentences through T, mean-pooled to one vector per sentence, then the
    /// sentence sequence through HT.
    pub fn encode_level1(
        &self,
        sample: &RecipeSample,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        sample.validate(self.cfg.vocab_size)?;
        let ttl = self.embed_sentence(&sample.title, self.cfg.max_title_tokens)?;
        let t_ttl2 = self.t_enc.forward(&ttl, ctx)?;

        let t_ing2 = self.encode_entity(
            &sample.ingredients,
            self.cfg.max_ingredient_tokens,
            ctx,
        )?;
        let t_ins2 = self.encode_entity(
            &sample.instructions,
            self.cfg.max_instruction_tokens,
            ctx,
        )?;
        Ok((t_ttl2, t_ing2, t_ins2))
    }

    fn encode_entity(
        &self,
        sentences: &[Vec<usize>],
        max_tokens: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let sentences = &sentences[..sentences.len().min(self.cfg.max_sentences)];
        let mut vecs = Vec::with_capacity(sentences.len());
        for s in sentences {
            let emb = self.embed_sentence(s, max_tokens)?;
            let enc = self.t_enc.forward(&emb, ctx)?;
            vecs.push(enc.mean_axis(0)?);
        }
        let seq = Tensor::concat(0, &vecs)?;
        let seq = if self.cfg.use_positional {
            add_positional(&seq)?
        } else {
            seq
        };
        self.ht_enc.forward(&seq, ctx)
    }

    /// Cross-entity stage: each entity's tokens query the tokens of the other
    /// entities, then everything is concatenated and pooled into e_R.
    pub fn encode_htd(
        &self,
        t_ttl2: &Tensor,
        t_ing2: &Tensor,
        t_ins2: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<RecipeTokens> {
        let (t_ttl3, t_ing3, t_ins3) = match self.cfg.htd_mode {
            HtdMode::Off => (t_ttl2.clone(), t_ing2.clone(), t_ins2.clone()),
            HtdMode::Full => {
                let kv_ttl = Tensor::concat(0, &[t_ing2.clone(), t_ins2.clone()])?;
                let kv_ing = Tensor::concat(0, &[t_ttl2.clone(), t_ins2.clone()])?;
                let kv_ins = Tensor::concat(0, &[t_ttl2.clone(), t_ing2.clone()])?;
                (
                    self.htd_for(0).forward(t_ttl2, &kv_ttl, ctx)?,
                    self.htd_for(1).forward(t_ing2, &kv_ing, ctx)?,
                    self.htd_for(2).forward(t_ins2, &kv_ins, ctx)?,
                )
            }
            HtdMode::V2 => {
                let kv_ttl = Tensor::concat(0, &[t_ing2.clone(), t_ins2.clone()])?;
                (
                    self.htd_for(0).forward(t_ttl2, &kv_ttl, ctx)?,
                    self.htd_for(1).forward(t_ing2, t_ins2, ctx)?,
                    self.htd_for(2).forward(t_ins2, t_ing2, ctx)?,
                )
            }
        };
        let t_r = Tensor::concat(0, &[t_ttl3.clone(), t_ing3.clone(), t_ins3.clone()])?;
        let e_r = self.pool_recipe(&t_ttl3, &t_ing3, &t_ins3)?;
        Ok(RecipeTokens {
            t_ttl3,
            t_ing3,
            t_ins3,
            t_r,
            e_r,
        })
    }

    /// e_R = normalize(W . [mean(t_ttl3); mean(t_ing3); mean(t_ins3)]).
    fn pool_recipe(&self, ttl: &Tensor, ing: &Tensor, ins: &Tensor) -> Result<Tensor> {
        let pooled = Tensor::concat(
            1,
            &[ttl.mean_axis(0)?, ing.mean_axis(0)?, ins.mean_axis(0)?],
        )?;
        self.pool.forward(&pooled)?.l2_normalize_rows()
    }

    pub fn encode(&self, sample: &RecipeSample, ctx: &mut ForwardCtx) -> Result<RecipeTokens> {
        let (t_ttl2, t_ing2, t_ins2) = self.encode_level1(sample, ctx)?;
        self.encode_htd(&t_ttl2, &t_ing2, &t_ins2, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg(vocab: usize) -> RecipeEncoderConfig {
        let mut cfg = RecipeEncoderConfig::toy(vocab);
        let d = 16;
        cfg.d_model = d;
        cfg.d_embed = 16;
        cfg.t_cfg = AttentionConfig::new(1, 2, d).with_dropout(0.0);
        cfg.ht_cfg = AttentionConfig::new(1, 2, d).with_dropout(0.0);
        cfg.htd_cfg = AttentionConfig::new(1, 2, d).with_dropout(0.0);
        cfg
    }

    fn sample(n_ing: usize, n_ins: usize, title_len: usize) -> RecipeSample {
        RecipeSample {
            title: (1..=title_len).collect(),
            ingredients: (0..n_ing).map(|i| vec![1 + i, 2]).collect(),
            instructions: (0..n_ins).map(|i| vec![3, 1 + i, 4]).collect(),
            class_label: None,
        }
    }

    #[test]
    fn level1_shapes() {
        let mut r = rng(0);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let s = sample(3, 4, 5);
        let mut er = rng(0);
        let mut ctx = ForwardCtx::eval(&mut er);
        let (ttl, ing, ins) = enc.encode_level1(&s, &mut ctx).unwrap();
        assert_eq!(ttl.shape(), &[5, 16]);
        assert_eq!(ing.shape(), &[3, 16]);
        assert_eq!(ins.shape(), &[4, 16]);
    }

    #[test]
    fn one_sentence_entity_degenerates_to_one_token() {
        let mut r = rng(1);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let s = sample(1, 1, 2);
        let mut er = rng(0);
        let mut ctx = ForwardCtx::eval(&mut er);
        let (_, ing, _) = enc.encode_level1(&s, &mut ctx).unwrap();
        assert_eq!(ing.shape(), &[1, 16]);
    }

    #[test]
    fn empty_entity_is_input_error() {
        let mut r = rng(2);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let s = RecipeSample {
            title: vec![1],
            ingredients: vec![],
            instructions: vec![vec![1]],
            class_label: None,
        };
        let mut er = rng(0);
        let mut ctx = ForwardCtx::eval(&mut er);
        assert!(enc.encode_level1(&s, &mut ctx).is_err());
    }

    #[test]
    fn swapping_ingredients_permutes_rows_without_positions() {
        let mut r = rng(3);
        let mut cfg = small_cfg(16);
        cfg.use_positional = false;
        let enc = RecipeEncoder::new(cfg, &mut r);
        let mut s = sample(3, 2, 2);
        s.ingredients = vec![vec![5, 6], vec![7, 8], vec![9, 10]];
        let mut er = rng(0);
        let out1 = enc
            .encode_level1(&s, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .1
            .data();
        s.ingredients.swap(0, 2);
        let out2 = enc
            .encode_level1(&s, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .1
            .data();
        let d = 16;
        for j in 0..d {
            assert!((out1[j] - out2[2 * d + j]).abs() < 1e-10);
            assert!((out1[2 * d + j] - out2[j]).abs() < 1e-10);
            assert!((out1[d + j] - out2[d + j]).abs() < 1e-10);
        }
    }

    #[test]
    fn t_r_length_is_sum_of_entities() {
        let mut r = rng(4);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let s = sample(3, 4, 5);
        let mut er = rng(0);
        let mut ctx = ForwardCtx::eval(&mut er);
        let toks = enc.encode(&s, &mut ctx).unwrap();
        assert_eq!(toks.t_r.shape(), &[12, 16]);
        assert_eq!(toks.e_r.shape(), &[1, 16]);
        let norm: f64 = toks.e_r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_htd_weights_reduce_to_layer_norms_of_t2() {
        let mut r = rng(5);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let mut params = Vec::new();
        enc.params("re", &mut params);
        for (name, t) in &params {
            if name.contains(".htd0.") && (name.contains(".wo.") || name.contains(".lin2.")) {
                t.set_data(&vec![0.0; t.numel()]);
            }
        }
        let s = sample(2, 2, 3);
        let mut er = rng(0);
        let mut ctx = ForwardCtx::eval(&mut er);
        let (ttl2, ing2, ins2) = enc.encode_level1(&s, &mut ctx).unwrap();
        let toks = enc.encode_htd(&ttl2, &ing2, &ins2, &mut ctx).unwrap();
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let mut expect = ttl2;
        for _ in 0..3 {
            expect = expect.layer_norm(&gamma, &beta, 1e-5).unwrap();
        }
        for (a, b) in toks.t_ttl3.data().iter().zip(&expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_reaches_all_level1_inputs() {
        let mut r = rng(6);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let ttl2 = Tensor::randn_param(&[2, 16], 1.0, &mut r);
        let ing2 = Tensor::randn_param(&[2, 16], 1.0, &mut r);
        let ins2 = Tensor::randn_param(&[3, 16], 1.0, &mut r);
        let mut er = rng(0);
        let mut ctx = ForwardCtx::eval(&mut er);
        let toks = enc.encode_htd(&ttl2, &ing2, &ins2, &mut ctx).unwrap();
        toks.t_r.sum_all().backward();
        for t in [&ttl2, &ing2, &ins2] {
            let g = t.grad().expect("grad reached input");
            assert!(g.iter().any(|v| v.abs() > 0.0));
        }
    }

    #[test]
    fn e_r_depends_on_every_entity() {
        let mut r = rng(7);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let s = sample(2, 2, 3);
        let mut er = rng(0);
        let base = enc
            .encode(&s, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .e_r
            .data();
        for entity in 0..3 {
            let mut s2 = s.clone();
            match entity {
                0 => s2.title = vec![11, 12, 13],
                1 => s2.ingredients = vec![vec![11, 12], vec![13, 14]],
                _ => s2.instructions = vec![vec![11, 12, 13], vec![14, 15, 11]],
            }
            let other = enc
                .encode(&s2, &mut ForwardCtx::eval(&mut er))
                .unwrap()
                .e_r
                .data();
            let diff: f64 = base
                .iter()
                .zip(&other)
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-8, "entity {entity} change did not affect e_R");
        }
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let mut r = rng(8);
        let enc = RecipeEncoder::new(small_cfg(16), &mut r);
        let s = sample(2, 3, 4);
        let mut er = rng(0);
        let a = enc
            .encode(&s, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .e_r
            .data();
        let b = enc
            .encode(&s, &mut ForwardCtx::eval(&mut er))
            .unwrap()
            .e_r
            .data();
        assert_eq!(a, b);
    }
}
