//! Synthetic paired corpus. Each pair is derived from a latent dish
//! (class, ingredient subset): the recipe text is templated from the latent,
//! and the image is a 32x32 raster whose 8x8 patch colors are a deterministic
//! function of the latent plus uniform pixel noise. Alignment between the
//! modalities is therefore learnable from data.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ImageSample, IMAGE_CHANNELS, IMAGE_SIZE, PIXELS_PER_IMAGE};
use crate::recipe::{RecipeSample, Vocab};
use crate::tensor::{Result, TensorError};

pub const MIN_INGREDIENTS: usize = 2;
pub const MAX_INGREDIENTS: usize = 5;
const PATCH: usize = 8;
const GRID: usize = IMAGE_SIZE / PATCH;

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub num_pairs: usize,
    pub num_classes: usize,
    pub num_ingredient_words: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_pairs: 512,
            num_classes: 8,
            num_ingredient_words: 16,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(TensorError::InvalidInput(format!(
                "corpus needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_ingredient_words < MAX_INGREDIENTS {
            return Err(TensorError::InvalidInput(format!(
                "corpus needs at least {MAX_INGREDIENTS} ingredient words, got {}",
                self.num_ingredient_words
            )));
        }
        if self.num_pairs == 0 {
            return Err(TensorError::InvalidInput("corpus must have pairs".to_string()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) || !self.noise_level.is_finite() {
            return Err(TensorError::InvalidInput(format!(
                "noise level must be in [0, 1], got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// The latent a pair is rendered from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dish {
    pub class: usize,
    pub ingredients: Vec<usize>, // sorted, distinct ids < num_ingredient_words
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub id: u64,
    pub dish: Dish,
    pub recipe: RecipeSample,
    pub image: ImageSample,
}

pub struct Corpus {
    pub vocab: Vocab,
    pub pairs: Vec<Pair>,
}

const TEMPLATE_WORDS: [&str; 8] = ["recipe", "with", "fresh", "chopped", "add", "then", "mix", "serve"];

fn class_word(c: usize) -> String {
    format!("dish{c}")
}

fn ingredient_word(k: usize) -> String {
    format!("ing{k}")
}

/// Fixed vocabulary for a spec: OOV plus templates, class names, ingredients.
pub fn build_vocab(spec: &CorpusSpec) -> Vocab {
    let mut vocab = Vocab::new();
    for w in TEMPLATE_WORDS {
        vocab.add(w);
    }
    for c in 0..spec.num_classes {
        vocab.add(&class_word(c));
    }
    for k in 0..spec.num_ingredient_words {
        vocab.add(&ingredient_word(k));
    }
    vocab
}

fn render_recipe(vocab: &Vocab, dish: &Dish) -> RecipeSample {
    let ids = |s: String| vocab.tokenize(&s);
    let title = ids(format!("{} recipe", class_word(dish.class)));
    let ingredients = dish
        .ingredients
        .iter()
        .map(|&k| {
            let adj = if k % 2 == 0 { "fresh" } else { "chopped" };
            ids(format!("{adj} {}", ingredient_word(k)))
        })
        .collect();
    let instructions = dish
        .ingredients
        .iter()
        .map(|&k| ids(format!("add {} then mix", ingredient_word(k))))
        .chain(std::iter::once(ids(format!(
            "serve with {}",
            class_word(dish.class)
        ))))
        .collect();
    RecipeSample {
        title,
        ingredients,
        instructions,
        class_label: Some(dish.class),
    }
}

/// Well-separated palette: the first 27 ids map to a 3-level RGB cube
/// (channel distance >= 0.35 between distinct colors, comfortably above the
/// noise amplitude); further ids fall back to a hash color in the same range.
fn color(id: usize) -> [f64; 3] {
    const LEVELS: [f64; 3] = [0.15, 0.5, 0.85];
    // index 13 of the cube is pure gray, invisible against the neutral
    // background, so the palette skips it
    let id = if id >= 13 { id + 1 } else { id };
    if id < 27 {
        return [LEVELS[id % 3], LEVELS[(id / 3) % 3], LEVELS[(id / 9) % 3]];
    }
    let mut x = (id as u64).wrapping_mul(0x9e3779b97f4a7c15);
    let mut out = [0.0; 3];
    for ch in &mut out {
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        *ch = 0.15 + 0.7 * ((x >> 11) as f64 / (1u64 << 53) as f64);
    }
    out
}

/// Neutral background with a light class tint; each ingredient paints the
/// patch at (id mod 16) with its own full-strength color, collisions
/// averaged; then uniform noise. The tint keeps the class learnable while
/// leaving most of the image variance to the ingredient subset, so
/// within-class pairs stay distinguishable.
fn render_image(spec: &CorpusSpec, dish: &Dish, noise: f64, rng: &mut ChaCha8Rng) -> ImageSample {
    let class_color = color(spec.num_ingredient_words + dish.class);
    let mut bg = [0.0; 3];
    for ch in 0..3 {
        bg[ch] = 0.5 + 0.15 * (class_color[ch] - 0.5);
    }
    let mut patch_color: Vec<[f64; 3]> = vec![bg; GRID * GRID];
    let mut patch_count = vec![0usize; GRID * GRID];
    for &k in &dish.ingredients {
        let p = k % (GRID * GRID);
        let c = color(k);
        if patch_count[p] == 0 {
            patch_color[p] = c;
        } else {
            for ch in 0..3 {
                patch_color[p][ch] += c[ch];
            }
        }
        patch_count[p] += 1;
    }
    for (p, &n) in patch_count.iter().enumerate() {
        if n > 1 {
            for ch in 0..3 {
                patch_color[p][ch] /= n as f64;
            }
        }
    }
    let mut pixels = vec![0.0; PIXELS_PER_IMAGE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let p = (y / PATCH) * GRID + x / PATCH;
            for ch in 0..IMAGE_CHANNELS {
                let v = patch_color[p][ch] + rng.gen_range(-noise..=noise);
                pixels[(y * IMAGE_SIZE + x) * IMAGE_CHANNELS + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageSample { pixels }
}

/// Balanced class assignment (round-robin over a shuffled class order, so
/// every class appears whenever num_pairs >= num_classes), random ingredient
/// subsets of size [MIN_INGREDIENTS, MAX_INGREDIENTS].
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = build_vocab(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<usize> = (0..spec.num_pairs).map(|i| i % spec.num_classes).collect();
    classes.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(spec.num_pairs);
    for (i, class) in classes.into_iter().enumerate() {
        let count = rng.gen_range(MIN_INGREDIENTS..=MAX_INGREDIENTS);
        let mut pool: Vec<usize> = (0..spec.num_ingredient_words).collect();
        pool.shuffle(&mut rng);
        let mut ingredients: Vec<usize> = pool[..count].to_vec();
        ingredients.sort_unstable();
        let dish = Dish { class, ingredients };
        let recipe = render_recipe(&vocab, &dish);
        recipe.validate(vocab.words().len())?;
        let image = render_image(spec, &dish, spec.noise_level, &mut rng);
        pairs.push(Pair {
            id: i as u64,
            dish,
            recipe,
            image,
        });
    }
    Ok(Corpus { vocab, pairs })
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/vocab.txt plus per-split index.txt / recipes.txt /
// images.bin (f32 little-endian rasters, one per pair, in index order).

fn io_err(what: &str, e: std::io::Error) -> TensorError {
    TensorError::InvalidInput(format!("{what}: {e}"))
}

fn format_sentence(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| vocab.words()[i].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn save_vocab(dir: &Path, vocab: &Vocab) -> Result<()> {
    let body = vocab.words().join("\n") + "\n";
    fs::write(dir.join("vocab.txt"), body).map_err(|e| io_err("write vocab.txt", e))
}

pub fn load_vocab(dir: &Path) -> Result<Vocab> {
    let body = fs::read_to_string(dir.join("vocab.txt")).map_err(|e| io_err("read vocab.txt", e))?;
    let words: Vec<String> = body.lines().map(str::to_string).collect();
    if words.is_empty() {
        return Err(TensorError::InvalidInput("vocab.txt is empty".to_string()));
    }
    Ok(Vocab::from_words(words))
}

/// Writes one split (e.g. "train" or "test") under `dir/<split>/`.
pub fn save_split(dir: &Path, split: &str, vocab: &Vocab, pairs: &[Pair]) -> Result<()> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| io_err("create split dir", e))?;
    let mut recipes = Vec::new();
    let mut images = BufWriter::new(
        fs::File::create(sub.join("images.bin")).map_err(|e| io_err("create images.bin", e))?,
    );
    let mut index = String::new();
    let mut image_offset = 0u64;
    for pair in pairs {
        let recipe_offset = recipes.len() as u64;
        let mut block = String::new();
        block.push_str(&format!("pair {}\n", pair.id));
        block.push_str(&format!("class {}\n", pair.dish.class));
        block.push_str(&format!("title {}\n", format_sentence(vocab, &pair.recipe.title)));
        for s in &pair.recipe.ingredients {
            block.push_str(&format!("ingredient {}\n", format_sentence(vocab, s)));
        }
        for s in &pair.recipe.instructions {
            block.push_str(&format!("instruction {}\n", format_sentence(vocab, s)));
        }
        block.push_str("end\n");
        recipes.extend_from_slice(block.as_bytes());
        for &v in &pair.image.pixels {
            images
                .write_all(&(v as f32).to_le_bytes())
                .map_err(|e| io_err("write images.bin", e))?;
        }
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            pair.id, pair.dish.class, recipe_offset, image_offset
        ));
        image_offset += (PIXELS_PER_IMAGE * 4) as u64;
    }
    images.flush().map_err(|e| io_err("flush images.bin", e))?;
    fs::write(sub.join("recipes.txt"), recipes).map_err(|e| io_err("write recipes.txt", e))?;
    fs::write(sub.join("index.txt"), index).map_err(|e| io_err("write index.txt", e))?;
    Ok(())
}

fn parse_index_line(line: &str) -> Result<(u64, usize, u64, u64)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(TensorError::InvalidInput(format!(
            "malformed index line: {line:?}"
        )));
    }
    let bad = |f: &str| TensorError::InvalidInput(format!("malformed index field: {f:?}"));
    Ok((
        fields[0].parse().map_err(|_| bad(fields[0]))?,
        fields[1].parse().map_err(|_| bad(fields[1]))?,
        fields[2].parse().map_err(|_| bad(fields[2]))?,
        fields[3].parse().map_err(|_| bad(fields[3]))?,
    ))
}

fn parse_recipe_block(vocab: &Vocab, block: &str, expect_id: u64) -> Result<(Dish, RecipeSample)> {
    let mut class = None;
    let mut title = Vec::new();
    let mut ingredients = Vec::new();
    let mut instructions = Vec::new();
    let mut seen_end = false;
    for line in block.lines() {
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "pair" => {
                let id: u64 = rest
                    .parse()
                    .map_err(|_| TensorError::InvalidInput(format!("bad pair id {rest:?}")))?;
                if id != expect_id {
                    return Err(TensorError::InvalidInput(format!(
                        "recipe block id {id} does not match index id {expect_id}"
                    )));
                }
            }
            "class" => {
                class = Some(rest.parse().map_err(|_| {
                    TensorError::InvalidInput(format!("bad class {rest:?}"))
                })?)
            }
            "title" => title = vocab.tokenize(rest),
            "ingredient" => ingredients.push(vocab.tokenize(rest)),
            "instruction" => instructions.push(vocab.tokenize(rest)),
            "end" => {
                seen_end = true;
                break;
            }
            other => {
                return Err(TensorError::InvalidInput(format!(
                    "unknown recipe tag {other:?}"
                )))
            }
        }
    }
    if !seen_end {
        return Err(TensorError::InvalidInput(format!(
            "unterminated recipe block for pair {expect_id}"
        )));
    }
    let class = class
        .ok_or_else(|| TensorError::InvalidInput(format!("pair {expect_id} missing class")))?;
    // ingredient ids recovered from the ingredient words, for completeness
    let mut ing_ids: Vec<usize> = ingredients
        .iter()
        .filter_map(|s| {
            s.iter().find_map(|&id| {
                vocab.words()[id]
                    .strip_prefix("ing")
                    .and_then(|n| n.parse().ok())
            })
        })
        .collect();
    ing_ids.sort_unstable();
    Ok((
        Dish {
            class,
            ingredients: ing_ids,
        },
        RecipeSample {
            title,
            ingredients,
            instructions,
            class_label: Some(class),
        },
    ))
}

pub fn load_split(dir: &Path, split: &str, vocab: &Vocab) -> Result<Vec<Pair>> {
    let sub = dir.join(split);
    let index = fs::read_to_string(sub.join("index.txt")).map_err(|e| io_err("read index.txt", e))?;
    let recipes = fs::read_to_string(sub.join("recipes.txt"))
        .map_err(|e| io_err("read recipes.txt", e))?;
    let images = fs::read(sub.join("images.bin")).map_err(|e| io_err("read images.bin", e))?;
    let mut pairs = Vec::new();
    for line in index.lines() {
        let (id, _class, r_off, i_off) = parse_index_line(line)?;
        let block = recipes
            .get(r_off as usize..)
            .ok_or_else(|| TensorError::InvalidInput(format!("recipe offset {r_off} out of range")))?;
        let (dish, recipe) = parse_recipe_block(vocab, block, id)?;
        recipe.validate(vocab.words().len())?;
        let start = i_off as usize;
        let end = start + PIXELS_PER_IMAGE * 4;
        let raw = images.get(start..end).ok_or_else(|| {
            TensorError::InvalidInput(format!("image offset {i_off} out of range"))
        })?;
        let pixels = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        pairs.push(Pair {
            id,
            dish,
            recipe,
            image: ImageSample::new(pixels)?,
        });
    }
    if pairs.is_empty() {
        return Err(TensorError::InvalidInput(format!("split {split:?} is empty")));
    }
    Ok(pairs)
}

pub fn save_corpus(dir: &Path, corpus: &Corpus, split: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err("create corpus dir", e))?;
    save_vocab(dir, &corpus.vocab)?;
    save_split(dir, split, &corpus.vocab, &corpus.pairs)
}
