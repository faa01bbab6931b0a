use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qvqa::config::RunConfig;
use qvqa::datagen::{build_dataset, load_dataset, save_dataset, EOS};
use qvqa::error::{Error, Result};
use qvqa::model::{Model, ModelConfig};
use qvqa::trainer::{evaluate, pretrain, resolve_checkpoint, split_indices, Preset, TrainConfig};
use qvqa::verify;

#[derive(Parser)]
#[command(name = "qvqa", version, about = "Synthetic multi-view ultrasound VQA pre-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset: images, reports, QA pairs, vocabulary.
    GenData {
        /// World seed; falls back to $QVQA_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on a generated dataset.
    Pretrain {
        /// Flat dotted-key JSON configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        preset: Preset,
        /// Additional key=value overrides applied after the config file.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: generation metrics, retrieval, nodule P/R.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which 7:1:2 slice to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the self-check suites.
    Verify {
        /// Restrict to one suite: gradients, losses, buffers, metrics.
        #[arg(long)]
        only: Option<String>,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("QVQA_SEED") {
        Ok(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("QVQA_SEED {s:?} is not a u64"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

fn cmd_gen_data(seed: Option<u64>, count: usize, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let seed = resolve_seed(seed)?;
    let ds = build_dataset(seed, count)?;
    save_dataset(out, &ds)?;
    let mut rc = RunConfig::empty();
    rc.set_override(&format!("gen.seed={seed}"))?;
    rc.set_override(&format!("gen.count={count}"))?;
    rc.save(&out.join("run_config.json"))?;
    println!("wrote {count} scenes ({} tokens in vocab) to {}", ds.vocab.len(), out.display());
    Ok(())
}

fn cmd_pretrain(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    preset: Preset,
    set: &[String],
    seed: Option<u64>,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut train_cfg = TrainConfig { preset, ..TrainConfig::default() };
    let mut model_cfg = ModelConfig::default();
    model_cfg.text.vocab_size = ds.vocab.len();
    let mut rc = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::empty(),
    };
    for s in set {
        rc.set_override(s)?;
    }
    rc.apply(&mut train_cfg, &mut model_cfg)?;
    if let Some(s) = seed.or(env_seed()?) {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(out)?;
    RunConfig::resolved(&train_cfg, &model_cfg).save(&out.join("config.json"))?;
    let mut model = Model::new(model_cfg, train_cfg.seed, EOS)?;
    let outcome = pretrain(&mut model, &ds, &train_cfg, Some(out))?;
    println!(
        "trained {} steps over {} epochs; best val loss {:.4} at epoch {}; final train loss {:.4}",
        outcome.steps_run,
        outcome.epochs_run,
        outcome.best_val_loss,
        outcome.best_epoch,
        outcome.final_train_loss
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, split: &str) -> Result<()> {
    let ds = load_dataset(data)?;
    let model = Model::load(&resolve_checkpoint(checkpoint), EOS)?;
    let n = ds.entries.len();
    let (train, val, test) = split_indices(n);
    let indices = match split {
        "train" => train,
        "val" => val,
        "test" => test,
        "all" => (0..n).collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?}; expected train, val, test, or all"
            )))
        }
    };
    let report = evaluate(&model, &ds, &indices)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut rc = RunConfig::empty();
    rc.set_override(&format!("eval.split=\"{split}\""))?;
    rc.set_override(&format!("eval.scenes={}", indices.len()))?;
    rc.save(&out.join("run_config.json"))?;
    let s = &report.summary;
    println!(
        "BLEU-4 {:.4}  ROUGE-L {:.4}  top-1 {:.4}  top-1(sq) {:.4}  exact {:.4}",
        s.bleu4, s.rouge_l, s.retrieval_top1, s.retrieval_top1_sq, s.exact_match
    );
    Ok(())
}

fn cmd_verify(only: Option<&str>) -> Result<bool> {
    let checks = verify::run(only)?;
    let mut all_ok = true;
    for c in &checks {
        let tag = if c.passed { "pass" } else { "FAIL" };
        println!("[{tag}] {}: {} - {}", c.suite, c.name, c.detail);
        all_ok &= c.passed;
    }
    println!("{}/{} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::GenData { seed, count, out } => cmd_gen_data(*seed, *count, out).map(|()| true),
        Cmd::Pretrain { config, data, out, preset, set, seed } => {
            cmd_pretrain(config.as_deref(), data, out, *preset, set, *seed).map(|()| true)
        }
        Cmd::Eval { checkpoint, data, out, split } => {
            cmd_eval(checkpoint, data, out, split).map(|()| true)
        }
        Cmd::Verify { only } => cmd_verify(only.as_deref()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
