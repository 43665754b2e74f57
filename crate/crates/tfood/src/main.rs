use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tfood::checkpoint::{Checkpoint, EmbeddingFile};
use tfood::config::{self, FullConfig, Settings};
use tfood::corpus::{self, CorpusSpec, Pair};
use tfood::eval::{evaluate, format_report_jsonl, format_report_text};
use tfood::model::TFoodModel;
use tfood::tensor::Result;
use tfood::train::{export_embeddings, train, MtdReranker};

#[derive(Parser)]
#[command(name = "tfood", about = "Cross-modal recipe/image retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired corpus (train and test splits)
    GenData(GenDataArgs),
    /// Train a model on a generated corpus
    Train(TrainArgs),
    /// Evaluate an embedding dump (optionally with MTD re-ranking)
    Eval(EvalArgs),
    /// Export embeddings for a corpus split from a checkpoint
    Export(ExportArgs),
    /// Train and evaluate a named ablation variant
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file ([section] / key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config value as section.key=value (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        if let Some(path) = &self.config {
            config::parse_file(path)?.apply(&mut cfg)?;
        }
        let mut overrides = Settings::default();
        for s in &self.sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                tfood::tensor::TensorError::InvalidInput(format!(
                    "--set expects section.key=value, got {s:?}"
                ))
            })?;
            let (section, key) = key.split_once('.').ok_or_else(|| {
                tfood::tensor::TensorError::InvalidInput(format!(
                    "--set expects section.key=value, got {s:?}"
                ))
            })?;
            overrides.set(section.trim(), key.trim(), value.trim());
        }
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pairs: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    ingredient_words: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out split size (generated from seed + 1)
    #[arg(long, default_value_t = 100)]
    test_pairs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory from gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the metrics log
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Embedding dump from `export`
    #[arg(long)]
    embeddings: PathBuf,
    /// Re-rank each query's top-k with the MTD head (needs --ckpt and --data)
    #[arg(long)]
    rerank_top_k: Option<usize>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the machine-readable report (JSON lines) here
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// One of: no-htd, htd-v2, no-mmr, no-item, item-t, item-n,
    /// mtd-layers=N, margin={fixed,inc,ada}
    #[arg(long)]
    variant: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn err_io(what: &str, e: std::io::Error) -> tfood::tensor::TensorError {
    tfood::tensor::TensorError::InvalidInput(format!("{what}: {e}"))
}

fn load_corpus(dir: &Path) -> Result<(tfood::recipe::Vocab, Vec<Pair>, Vec<Pair>)> {
    let vocab = corpus::load_vocab(dir)?;
    let train = corpus::load_split(dir, "train", &vocab)?;
    let test = corpus::load_split(dir, "test", &vocab).unwrap_or_default();
    Ok((vocab, train, test))
}

fn run_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = CorpusSpec {
        num_pairs: a.pairs,
        num_classes: a.classes,
        num_ingredient_words: a.ingredient_words,
        noise_level: a.noise,
        seed: a.seed,
    };
    let train = corpus::generate(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| err_io("create out dir", e))?;
    corpus::save_vocab(&a.out, &train.vocab)?;
    corpus::save_split(&a.out, "train", &train.vocab, &train.pairs)?;
    if a.test_pairs > 0 {
        let test = corpus::generate(&CorpusSpec {
            num_pairs: a.test_pairs,
            seed: a.seed + 1,
            ..spec
        })?;
        corpus::save_split(&a.out, "test", &test.vocab, &test.pairs)?;
    }
    println!(
        "wrote {} train + {} test pairs to {}",
        a.pairs,
        a.test_pairs,
        a.out.display()
    );
    Ok(())
}

fn run_training(
    data: &Path,
    out: &Path,
    cfg: &FullConfig,
    resume: Option<&Path>,
) -> Result<(TFoodModel, Vec<Pair>, f64, f64)> {
    let (vocab, train_pairs, test_pairs) = load_corpus(data)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let resume_ckpt = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    std::fs::create_dir_all(out).map_err(|e| err_io("create out dir", e))?;
    let mut log_lines = Vec::new();
    let mut on_epoch = |em: &tfood::train::EpochMetrics| {
        let line = serde_json::to_string(em).expect("metrics serialize");
        println!("{line}");
        log_lines.push(line);
    };
    let outcome = train(
        model_cfg,
        &cfg.train,
        &train_pairs,
        &test_pairs,
        resume_ckpt.as_ref(),
        Some(&mut on_epoch),
    )?;
    std::fs::write(out.join("metrics.jsonl"), log_lines.join("\n") + "\n")
        .map_err(|e| err_io("write metrics.jsonl", e))?;
    outcome.best.save(&out.join("best.ckpt"))?;
    Checkpoint::capture(&outcome.model, cfg.train.epochs as u64, &outcome.adam)
        .save(&out.join("last.ckpt"))?;
    let best = outcome
        .metrics
        .iter()
        .find(|m| m.epoch == outcome.best_epoch)
        .or_else(|| outcome.metrics.last())
        .expect("at least one epoch");
    let (medr, r1) = (best.val_medr.unwrap_or(f64::NAN), best.val_r1.unwrap_or(f64::NAN));
    println!(
        "done: best epoch {} (val medR {:?}, R@1 {:?}); checkpoints in {}",
        outcome.best_epoch,
        best.val_medr,
        best.val_r1,
        out.display()
    );
    Ok((outcome.model, test_pairs, medr, r1))
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    run_training(&a.data, &a.out, &cfg, a.resume.as_deref())?;
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let emb = EmbeddingFile::load(&a.embeddings)?;
    let mut eval_cfg = cfg.eval.clone();
    if let Some(k) = a.rerank_top_k {
        eval_cfg.rerank_top_k = Some(k);
    }
    let report = match eval_cfg.rerank_top_k {
        Some(k) => {
            let (ckpt_path, data) = match (&a.ckpt, &a.data) {
                (Some(c), Some(d)) => (c, d),
                _ => {
                    return Err(tfood::tensor::TensorError::InvalidInput(
                        "re-ranking requires --ckpt and --data".to_string(),
                    ))
                }
            };
            let ckpt = Checkpoint::load(ckpt_path)?;
            let (model, _) = ckpt.restore(cfg.train.learning_rate)?;
            let vocab = corpus::load_vocab(data)?;
            let pairs = corpus::load_split(data, &a.split, &vocab)?;
            if pairs.len() != emb.count() {
                return Err(tfood::tensor::TensorError::InvalidInput(format!(
                    "embedding dump has {} rows but split {:?} has {} pairs",
                    emb.count(),
                    a.split,
                    pairs.len()
                )));
            }
            let rr = MtdReranker::new(&model, &pairs);
            evaluate(&emb.e_r, &emb.e_v, emb.dim, &eval_cfg, Some((&rr, k)))?
        }
        None => evaluate(&emb.e_r, &emb.e_v, emb.dim, &eval_cfg, None)?,
    };
    print!("{}", format_report_text(&report));
    if let Some(path) = &a.report {
        std::fs::write(path, format_report_jsonl(&report)).map_err(|e| err_io("write report", e))?;
    }
    Ok(())
}

fn run_export(a: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, _) = ckpt.restore(1e-3)?;
    let vocab = corpus::load_vocab(&a.data)?;
    let pairs = corpus::load_split(&a.data, &a.split, &vocab)?;
    if model.cfg.vocab_size != vocab.len() {
        return Err(tfood::tensor::TensorError::InvalidInput(format!(
            "checkpoint vocab size {} does not match corpus vocab size {}",
            model.cfg.vocab_size,
            vocab.len()
        )));
    }
    let emb = export_embeddings(&model, &pairs)?;
    emb.save(&a.out)?;
    println!("wrote {} embedding pairs (d={}) to {}", emb.count(), emb.dim, a.out.display());
    Ok(())
}

pub fn apply_variant(cfg: &mut FullConfig, variant: &str) -> Result<()> {
    match variant {
        "no-htd" => cfg.model.htd_mode = tfood::recipe::HtdMode::Off,
        "htd-v2" => cfg.model.htd_mode = tfood::recipe::HtdMode::V2,
        "no-mmr" => cfg.model.use_mmr = false,
        "no-item" => cfg.model.mmr.use_item = false,
        "item-t" => cfg.model.mmr.item_kv_mode = tfood::mmr::ItemKvMode::TitleOnly,
        "item-n" => cfg.model.mmr.item_kv_mode = tfood::mmr::ItemKvMode::IngredientsOnly,
        _ => {
            if let Some(n) = variant.strip_prefix("mtd-layers=") {
                cfg.model.mmr.mtd_layers = n.parse().map_err(|_| {
                    tfood::tensor::TensorError::InvalidInput(format!(
                        "bad mtd-layers value {n:?}"
                    ))
                })?;
            } else if let Some(kind) = variant.strip_prefix("margin=") {
                cfg.train.margin =
                    tfood::losses::MarginPolicy::with_kind(config::parse_margin_kind(kind)?);
            } else {
                return Err(tfood::tensor::TensorError::InvalidInput(format!(
                    "unknown ablation variant {variant:?}"
                )));
            }
        }
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    apply_variant(&mut cfg, &a.variant)?;
    let (_, _, medr, r1) = run_training(&a.data, &a.out, &cfg, None)?;
    println!("variant {}: val medR {medr:.2}  R@1 {r1:.2}", a.variant);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Export(a) => run_export(a),
        Cmd::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
