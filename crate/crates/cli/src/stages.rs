//! The five subcommands. Each stage writes its artifacts plus a manifest into
//! its own subdirectory of the run, and the resolved config is copied to the
//! run root so every run directory is self-describing.

use crate::manifest;
use anyhow::{bail, Context, Result};
use egomotion::config::RunConfig;
use egomotion::episodes::{self, CorpusKind, CorpusRecord, EvalPair, PairRecord, RlQuery, SftSample};
use egomotion::eval::{eval_binary, eval_pairs, EvalReport, PolicyDecoder};
use egomotion::grpo::{self, RlStepMetrics};
use egomotion::ota::SynonymTable;
use egomotion::policy::{self, PolicyParams};
use egomotion::sft::{self, SftStepMetrics};
use egomotion::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub fn write_config_copy(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating run directory {}", cfg.out_dir.display()))?;
    let path = config_copy(cfg);
    fs::write(&path, cfg.to_toml_string())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn config_copy(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("config.toml")
}

fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn sft_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("sft")
}

fn rl_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("rl")
}

fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("eval")
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let dir = corpus_dir(cfg);
    fs::create_dir_all(&dir)?;
    let c = &cfg.corpus;
    let sft_records = episodes::make_dataset(
        CorpusKind::Sft,
        &cfg.geometry,
        c.sft_per_label,
        c.sft_distractors,
        c.sft_label_noise,
        cfg.corpus_seed(),
    )?;
    let rl_records = episodes::make_dataset(
        CorpusKind::Rl,
        &cfg.geometry,
        c.rl_per_label,
        c.rl_distractors,
        0.0,
        cfg.corpus_seed(),
    )?;
    let eval_records = episodes::make_dataset(
        CorpusKind::Rl,
        &cfg.geometry,
        c.eval_per_label,
        c.eval_distractors,
        0.0,
        cfg.eval_seed(),
    )?;
    let pair_records = episodes::make_eval_pairs(
        &cfg.geometry,
        c.pairs_per_question,
        c.eval_distractors,
        cfg.pairs_seed(),
    )?;
    let mut outputs = Vec::new();
    for (name, records) in [("sft.jsonl", &sft_records), ("rl.jsonl", &rl_records), ("eval.jsonl", &eval_records)] {
        let path = dir.join(name);
        episodes::write_jsonl(&path, records)?;
        outputs.push(path);
    }
    let pairs_path = dir.join("pairs.jsonl");
    episodes::write_jsonl(&pairs_path, &pair_records)?;
    outputs.push(pairs_path);
    manifest::write(&dir, &cfg.out_dir, "gen", cfg.seed, &[config_copy(cfg)], &outputs)?;
    println!(
        "gen: {} supervised / {} query / {} held-out episodes and {} pairs -> {}",
        sft_records.len(),
        rl_records.len(),
        eval_records.len(),
        pair_records.len(),
        dir.display()
    );
    Ok(())
}

/// A fresh policy sized for the configured scene and vocabulary, drawn from
/// the init stream of the master seed.
fn fresh_params(cfg: &RunConfig) -> PolicyParams {
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    PolicyParams::init(cfg.policy.hidden_dim, cfg.geometry.feature_len(), vocab.size(), &mut rng)
}

fn check_feature_len(cfg: &RunConfig, got: usize, path: &Path) -> Result<()> {
    let want = cfg.geometry.feature_len();
    if got != want {
        bail!(
            "corpus {} has feature length {got} but the configured geometry produces {want}; \
             regenerate the corpora or fix the geometry section",
            path.display()
        );
    }
    Ok(())
}

fn write_sft_metrics(path: &Path, metrics: &[SftStepMetrics]) -> Result<()> {
    let mut text = String::from("step,epoch,loss,grad_norm,lr\n");
    for m in metrics {
        writeln!(text, "{},{},{},{},{}", m.step, m.epoch, m.loss, m.grad_norm, m.lr)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_rl_metrics(path: &Path, metrics: &[RlStepMetrics]) -> Result<()> {
    let mut text = String::from(
        "step,reward_overall,reward_accuracy,reward_format,kl,entropy,sigma_ema,groups_pruned\n",
    );
    for m in metrics {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            m.step,
            m.reward_overall,
            m.reward_accuracy,
            m.reward_format,
            m.kl,
            m.entropy,
            m.sigma_ema,
            m.groups_pruned
        )?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_sft(cfg: &RunConfig) -> Result<()> {
    let dir = sft_dir(cfg);
    fs::create_dir_all(&dir)?;
    let corpus_path = corpus_dir(cfg).join("sft.jsonl");
    let records: Vec<CorpusRecord> = episodes::load_jsonl(&corpus_path)
        .with_context(|| format!("loading supervised corpus {}", corpus_path.display()))?;
    let vocab = Vocabulary::standard();
    let samples: Vec<SftSample> = records
        .iter()
        .map(|r| r.to_sft_sample(&vocab))
        .collect::<Result<_, _>>()?;
    if let Some(first) = samples.first() {
        check_feature_len(cfg, first.features.values.len(), &corpus_path)?;
    }
    let init = fresh_params(cfg);
    let outcome = sft::sft_train(&init, &samples, &cfg.sft, cfg.sft_seed(), Some(&dir))?;
    let metrics_path = dir.join("metrics.csv");
    write_sft_metrics(&metrics_path, &outcome.metrics)?;
    let mut outputs = vec![metrics_path];
    outputs.extend(outcome.epoch_checkpoints.iter().cloned());
    manifest::write(
        &dir,
        &cfg.out_dir,
        "sft",
        cfg.seed,
        &[config_copy(cfg), corpus_path],
        &outputs,
    )?;
    let last = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "sft: {} steps over {} samples, final loss {last:.4}, {} checkpoints -> {}",
        outcome.metrics.len(),
        samples.len(),
        outcome.epoch_checkpoints.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_rl(cfg: &RunConfig, init: Option<&Path>) -> Result<()> {
    let dir = rl_dir(cfg);
    fs::create_dir_all(&dir)?;
    let init_path = match init {
        Some(p) => p.to_path_buf(),
        None => sft_dir(cfg).join("epoch_001.ckpt"),
    };
    let params = policy::load_checkpoint(&init_path)
        .with_context(|| format!("loading starting checkpoint {}", init_path.display()))?;
    let corpus_path = corpus_dir(cfg).join("rl.jsonl");
    let records: Vec<CorpusRecord> = episodes::load_jsonl(&corpus_path)
        .with_context(|| format!("loading query corpus {}", corpus_path.display()))?;
    let vocab = Vocabulary::standard();
    let queries: Vec<RlQuery> = records
        .iter()
        .map(|r| r.to_rl_query(&vocab))
        .collect::<Result<_, _>>()?;
    if let Some(first) = queries.first() {
        check_feature_len(cfg, first.features.values.len(), &corpus_path)?;
    }
    let outcome = grpo::rl_train(
        &params,
        &queries,
        &cfg.grpo,
        cfg.rl_seed(),
        Some(&dir),
        SynonymTable::builtin(),
    )?;
    let final_path = dir.join("final.ckpt");
    policy::save_checkpoint(&outcome.params, &final_path)?;
    let metrics_path = dir.join("metrics.csv");
    write_rl_metrics(&metrics_path, &outcome.metrics)?;
    let mut outputs = vec![metrics_path, final_path];
    outputs.extend(outcome.checkpoints.iter().cloned());
    manifest::write(
        &dir,
        &cfg.out_dir,
        "rl",
        cfg.seed,
        &[config_copy(cfg), corpus_path, init_path],
        &outputs,
    )?;
    let last = outcome.metrics.last();
    println!(
        "rl: {} iterations, final reward {:.3} (accuracy {:.3}, format {:.3}) -> {}",
        outcome.metrics.len(),
        last.map(|m| m.reward_overall).unwrap_or(f64::NAN),
        last.map(|m| m.reward_accuracy).unwrap_or(f64::NAN),
        last.map(|m| m.reward_format).unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let dir = eval_dir(cfg);
    fs::create_dir_all(&dir)?;
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => rl_dir(cfg).join("final.ckpt"),
    };
    let params = policy::load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let vocab = Vocabulary::standard();
    let eval_path = corpus_dir(cfg).join("eval.jsonl");
    let records: Vec<CorpusRecord> = episodes::load_jsonl(&eval_path)
        .with_context(|| format!("loading held-out corpus {}", eval_path.display()))?;
    let queries: Vec<RlQuery> = records
        .iter()
        .map(|r| r.to_rl_query(&vocab))
        .collect::<Result<_, _>>()?;
    if let Some(first) = queries.first() {
        check_feature_len(cfg, first.features.values.len(), &eval_path)?;
    }
    let pairs_path = corpus_dir(cfg).join("pairs.jsonl");
    let pair_records: Vec<PairRecord> = episodes::load_jsonl(&pairs_path)
        .with_context(|| format!("loading paired corpus {}", pairs_path.display()))?;
    let pairs: Vec<EvalPair> = pair_records
        .iter()
        .map(|r| r.to_eval_pair(&vocab))
        .collect::<Result<_, _>>()?;
    let table = SynonymTable::builtin();
    let mut decoder = PolicyDecoder { params: &params, max_len: cfg.eval.max_len };
    let report = EvalReport {
        classification: Some(eval_binary(&mut decoder, &queries, table)),
        pairs: Some(eval_pairs(&mut decoder, &pairs, table)),
    };
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&json_path, json)?;
    let text_path = dir.join("report.txt");
    fs::write(&text_path, report.render_text())?;
    manifest::write(
        &dir,
        &cfg.out_dir,
        "eval",
        cfg.seed,
        &[config_copy(cfg), ckpt_path, eval_path, pairs_path],
        &[json_path, text_path],
    )?;
    print!("{}", report.render_text());
    Ok(())
}

pub fn cmd_pipeline(cfg: &RunConfig) -> Result<()> {
    cmd_gen(cfg)?;
    cmd_sft(cfg)?;
    cmd_rl(cfg, None)?;
    cmd_eval(cfg, None)?;
    println!("pipeline: complete -> {}", cfg.out_dir.display());
    Ok(())
}
