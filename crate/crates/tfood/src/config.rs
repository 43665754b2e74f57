//! Line-oriented configuration: `[section]` headers and `key = value` lines,
//! `#` comments. Every corpus / train / eval / model / mmr field is
//! addressable; later entries (e.g. CLI overrides) win.

use std::path::Path;

use crate::corpus::CorpusSpec;
use crate::eval::EvalConfig;
use crate::losses::{MarginKind, MarginPolicy};
use crate::mmr::ItemKvMode;
use crate::model::ModelConfig;
use crate::recipe::HtdMode;
use crate::tensor::{Result, TensorError};
use crate::train::TrainConfig;

/// All tunable configuration in one place. `model.vocab_size` is filled in
/// from the corpus vocabulary at load time, not from config text.
#[derive(Debug, Clone)]
pub struct FullConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            model: ModelConfig::toy(0),
        }
    }
}

/// Ordered (section, key, value) assignments.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    entries: Vec<(String, String, String)>,
}

fn cfg_err(msg: String) -> TensorError {
    TensorError::InvalidInput(msg)
}

pub fn parse(text: &str) -> Result<Settings> {
    let mut out = Settings::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(format!("line {}: unterminated section header", lineno + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("line {}: expected key = value", lineno + 1)))?;
        if section.is_empty() {
            return Err(cfg_err(format!(
                "line {}: assignment before any [section]",
                lineno + 1
            )));
        }
        out.entries.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
        ));
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Settings> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("read config {}: {e}", path.display())))?;
    parse(&text)
}

fn p_usize(k: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| cfg_err(format!("{k}: expected integer, got {v:?}")))
}

fn p_u64(k: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| cfg_err(format!("{k}: expected integer, got {v:?}")))
}

fn p_f64(k: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| cfg_err(format!("{k}: expected number, got {v:?}")))
}

fn p_bool(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(format!("{k}: expected boolean, got {v:?}"))),
    }
}

impl Settings {
    /// Appends an assignment; used for CLI overrides, which therefore win
    /// over file values.
    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.entries
            .push((section.to_string(), key.to_string(), value.to_string()));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn apply(&self, cfg: &mut FullConfig) -> Result<()> {
        for (section, key, value) in &self.entries {
            let k = format!("{section}.{key}");
            match (section.as_str(), key.as_str()) {
                ("corpus", "num_pairs") => cfg.corpus.num_pairs = p_usize(&k, value)?,
                ("corpus", "num_classes") => cfg.corpus.num_classes = p_usize(&k, value)?,
                ("corpus", "num_ingredient_words") => {
                    cfg.corpus.num_ingredient_words = p_usize(&k, value)?
                }
                ("corpus", "noise_level") => cfg.corpus.noise_level = p_f64(&k, value)?,
                ("corpus", "seed") => cfg.corpus.seed = p_u64(&k, value)?,

                ("train", "epochs") => cfg.train.epochs = p_usize(&k, value)?,
                ("train", "batch_size") => cfg.train.batch_size = p_usize(&k, value)?,
                ("train", "learning_rate") => cfg.train.learning_rate = p_f64(&k, value)?,
                ("train", "warmup_steps") => cfg.train.warmup_steps = p_usize(&k, value)?,
                ("train", "freeze_image_epochs") => {
                    cfg.train.freeze_image_epochs = p_usize(&k, value)?
                }
                ("train", "lambda_sem") => cfg.train.lambda_sem = p_f64(&k, value)?,
                ("train", "lambda_itm") => cfg.train.lambda_itm = p_f64(&k, value)?,
                ("train", "labeled_fraction") => cfg.train.labeled_fraction = p_f64(&k, value)?,
                ("train", "seed") => cfg.train.seed = p_u64(&k, value)?,
                ("train", "margin") => {
                    cfg.train.margin = MarginPolicy::with_kind(parse_margin_kind(value)?)
                }
                ("train", "margin_alpha") => cfg.train.margin.alpha = p_f64(&k, value)?,
                ("train", "margin_inc_start") => {
                    cfg.train.margin.alpha_inc_start = p_f64(&k, value)?
                }
                ("train", "margin_inc_step") => cfg.train.margin.alpha_inc_step = p_f64(&k, value)?,
                ("train", "margin_clamp_min") => cfg.train.margin.clamp_min = p_f64(&k, value)?,
                ("train", "margin_clamp_max") => cfg.train.margin.clamp_max = p_f64(&k, value)?,

                ("eval", "bag_size") => cfg.eval.bag_size = p_usize(&k, value)?,
                ("eval", "num_bags") => cfg.eval.num_bags = p_usize(&k, value)?,
                ("eval", "image_to_recipe") => cfg.eval.image_to_recipe = p_bool(&k, value)?,
                ("eval", "recipe_to_image") => cfg.eval.recipe_to_image = p_bool(&k, value)?,
                ("eval", "rerank_top_k") => {
                    cfg.eval.rerank_top_k = if value == "none" {
                        None
                    } else {
                        Some(p_usize(&k, value)?)
                    }
                }
                ("eval", "seed") => cfg.eval.seed = p_u64(&k, value)?,

                ("model", "htd") => cfg.model.htd_mode = parse_htd_mode(value)?,
                ("model", "use_mmr") => cfg.model.use_mmr = p_bool(&k, value)?,
                ("model", "dropout_rate") => cfg.model.dropout_rate = p_f64(&k, value)?,

                ("mmr", "item_layers") => cfg.model.mmr.item_layers = p_usize(&k, value)?,
                ("mmr", "item_heads") => cfg.model.mmr.item_heads = p_usize(&k, value)?,
                ("mmr", "mtd_layers") => cfg.model.mmr.mtd_layers = p_usize(&k, value)?,
                ("mmr", "mtd_heads") => cfg.model.mmr.mtd_heads = p_usize(&k, value)?,
                ("mmr", "mmr_dim") => cfg.model.mmr.mmr_dim = p_usize(&k, value)?,
                ("mmr", "use_item") => cfg.model.mmr.use_item = p_bool(&k, value)?,
                ("mmr", "item_kv") => cfg.model.mmr.item_kv_mode = parse_item_kv(value)?,
                ("mmr", "dropout_rate") => cfg.model.mmr.dropout_rate = p_f64(&k, value)?,

                _ => return Err(cfg_err(format!("unknown config key {k}"))),
            }
        }
        Ok(())
    }
}

pub fn parse_margin_kind(v: &str) -> Result<MarginKind> {
    match v {
        "fixed" => Ok(MarginKind::Fixed),
        "inc" => Ok(MarginKind::Inc),
        "ada" => Ok(MarginKind::Ada),
        _ => Err(cfg_err(format!(
            "margin: expected one of fixed|inc|ada, got {v:?}"
        ))),
    }
}

pub fn parse_htd_mode(v: &str) -> Result<HtdMode> {
    match v {
        "off" => Ok(HtdMode::Off),
        "full" => Ok(HtdMode::Full),
        "v2" => Ok(HtdMode::V2),
        _ => Err(cfg_err(format!(
            "htd: expected one of off|full|v2, got {v:?}"
        ))),
    }
}

pub fn parse_item_kv(v: &str) -> Result<ItemKvMode> {
    match v {
        "all" => Ok(ItemKvMode::All),
        "title" => Ok(ItemKvMode::TitleOnly),
        "ingredients" => Ok(ItemKvMode::IngredientsOnly),
        _ => Err(cfg_err(format!(
            "item_kv: expected one of all|title|ingredients, got {v:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "\
# a comment
[train]
epochs = 7
learning_rate = 0.005  # inline comment
margin = ada
[corpus]
num_pairs = 128
[train]
epochs = 9
";
        let settings = parse(text).unwrap();
        let mut cfg = FullConfig::default();
        settings.apply(&mut cfg).unwrap();
        assert_eq!(cfg.train.epochs, 9); // later assignment wins
        assert_eq!(cfg.train.learning_rate, 0.005);
        assert_eq!(cfg.train.margin.kind, MarginKind::Ada);
        assert_eq!(cfg.corpus.num_pairs, 128);
    }

    #[test]
    fn cli_style_set_overrides_file() {
        let mut settings = parse("[train]\nepochs = 3\n").unwrap();
        settings.set("train", "epochs", "11");
        let mut cfg = FullConfig::default();
        settings.apply(&mut cfg).unwrap();
        assert_eq!(cfg.train.epochs, 11);
    }

    #[test]
    fn every_section_addressable() {
        let text = "\
[corpus]
num_pairs = 16
num_classes = 4
num_ingredient_words = 12
noise_level = 0.2
seed = 3
[train]
epochs = 2
batch_size = 4
learning_rate = 0.01
freeze_image_epochs = 1
lambda_sem = 0.2
lambda_itm = 0.5
labeled_fraction = 0.25
seed = 5
margin = inc
margin_alpha = 0.25
margin_inc_start = 0.04
margin_inc_step = 0.004
margin_clamp_min = 0.04
margin_clamp_max = 0.25
[eval]
bag_size = 50
num_bags = 5
image_to_recipe = true
recipe_to_image = false
rerank_top_k = 10
seed = 9
[model]
htd = v2
use_mmr = false
dropout_rate = 0.0
[mmr]
item_layers = 2
item_heads = 2
mtd_layers = 3
mtd_heads = 8
mmr_dim = 32
use_item = false
item_kv = title
dropout_rate = 0.05
";
        let mut cfg = FullConfig::default();
        parse(text).unwrap().apply(&mut cfg).unwrap();
        assert_eq!(cfg.corpus.num_classes, 4);
        assert_eq!(cfg.train.margin.alpha_inc_step, 0.004);
        assert_eq!(cfg.eval.rerank_top_k, Some(10));
        assert_eq!(cfg.model.htd_mode, crate::recipe::HtdMode::V2);
        assert_eq!(cfg.model.mmr.mtd_layers, 3);
        assert_eq!(cfg.model.mmr.item_kv_mode, ItemKvMode::TitleOnly);
    }

    #[test]
    fn errors_are_reported() {
        assert!(parse("[train\nepochs = 1\n").is_err());
        assert!(parse("epochs = 1\n").is_err());
        assert!(parse("[train]\nepochs\n").is_err());
        let mut cfg = FullConfig::default();
        assert!(parse("[train]\nbogus = 1\n").unwrap().apply(&mut cfg).is_err());
        assert!(parse("[train]\nepochs = x\n").unwrap().apply(&mut cfg).is_err());
    }
}
