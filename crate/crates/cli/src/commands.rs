use std::fs::File;
use std::io::BufWriter;

use anyhow::{bail, Context, Result};
use fillerlm_core::corpus::{corpus_stats, generate_synthetic, write_corpus, DatasetSplits, Split, Target};
use fillerlm_core::eval::{mse_eval, probe_curves_csv, probe_curves_records, pseudo_perplexity, MseReport, PerplexityReport};
use fillerlm_core::experiment::{constant_baseline, eval_reviews, fit_head, fit_mlm, run_perplexity, run_probe, MlmRun, PipelineConfig};
use fillerlm_core::model::mix_seed;
use fillerlm_core::model::RegressionHead;
use fillerlm_core::stats::{seed_sweep_compare, Comparison};
use fillerlm_core::tokenize::{PreprocStrategy, StrategyConfig, TokenStrategy};
use fillerlm_core::train::{train_regressor, Predictor, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::artifacts::*;
use crate::config::ExperimentConfig;

pub const STATS_FORMAT: &str = "fillerlm.stats.v1";
pub const PPL_FORMAT: &str = "fillerlm.ppl.v1";
pub const MSE_FORMAT: &str = "fillerlm.mse.v1";
pub const TABLE_FORMAT: &str = "fillerlm.table.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Records,
}

pub struct Ctx {
    pub config: ExperimentConfig,
    pub format: Format,
}

impl Ctx {
    fn pipeline(&self) -> Result<PipelineConfig> {
        self.config.pipeline()
    }

    fn corpus(&self) -> Result<DatasetSplits> {
        load_corpus(&self.config.corpus_path())
    }
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config.synth()?;
    let seed = ctx.config.synth_seed()?;
    let splits = generate_synthetic(&cfg, seed)?;
    let path = ctx.config.corpus_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_corpus(&splits, BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))?;
    let dir = ctx.config.output_dir().join("synth");
    create_dir(&dir)?;
    write_config(&dir, &ctx.config)?;
    let stats = corpus_stats(splits.all());
    println!(
        "wrote {} reviews ({} train / {} dev / {} test), filler fraction {:.4}% to {}",
        splits.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        stats.filler_fraction * 100.0,
        path.display()
    );
    Ok(())
}

pub fn stats(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let s = corpus_stats(splits.all());
    let record = json!({
        "format": STATS_FORMAT,
        "corpus": ctx.config.get("corpus_path"),
        "n_reviews": s.n_reviews,
        "n_reviews_with_fillers": s.n_reviews_with_fillers,
        "n_sentences": s.n_sentences,
        "n_tokens": s.n_tokens,
        "n_um": s.n_um,
        "n_uh": s.n_uh,
        "n_fillers": s.n_um + s.n_uh,
        "filler_fraction": s.filler_fraction,
        "filler_percent": s.filler_fraction * 100.0,
        "mean_review_length": s.mean_review_length,
        "position_histogram": s.position_histogram,
    });
    let dir = ctx.config.output_dir().join("stats");
    create_dir(&dir)?;
    write_config(&dir, &ctx.config)?;
    write_json(&dir.join("stats.json"), &record)?;
    println!("reviews            {}", s.n_reviews);
    println!("reviews w/ fillers {}", s.n_reviews_with_fillers);
    println!("sentences          {}", s.n_sentences);
    println!("tokens             {}", s.n_tokens);
    println!("fillers            {} (um {}, uh {})", s.n_um + s.n_uh, s.n_um, s.n_uh);
    println!("filler fraction    {:.2}%", s.filler_fraction * 100.0);
    println!("mean review length {:.2}", s.mean_review_length);
    Ok(())
}

pub fn train_mlm(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let strategy = ctx.config.strategy()?;
    let seed = ctx.config.seed()?;
    let run = fit_mlm(&splits, &strategy, &ctx.pipeline()?, seed)?;
    let dir = mlm_dir(&ctx.config.output_dir(), &strategy, seed);
    save_mlm(&dir, &ctx.config, &strategy, seed, &run.vocab, &run.model, &run.epochs)?;
    match run.epochs.last() {
        Some(e) => println!("{}: {} epochs, last train loss {:.4}, dev ppl {:.4} -> {}", strategy, run.epochs.len(), e.train_loss, e.dev_metric, dir.display()),
        None => println!("{}: fine-tuning off, saved initial model -> {}", strategy, dir.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct PplRecord<'a> {
    format: &'a str,
    seed: u64,
    vocab_hash: &'a str,
    report: &'a PerplexityReport,
}

pub fn eval_ppl(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let strategy = ctx.config.strategy()?;
    let seed = ctx.config.seed()?;
    let loaded = load_mlm(&mlm_dir(&ctx.config.output_dir(), &strategy, seed), &strategy)?;
    let pipeline = ctx.pipeline()?;
    let report = pseudo_perplexity(&loaded.model, eval_reviews(&splits, &pipeline), &loaded.vocab, &strategy)?;
    let record = PplRecord {
        format: PPL_FORMAT,
        seed,
        vocab_hash: loaded.manifest.get("vocab_hash")?,
        report: &report,
    };
    write_json(&loaded.dir.join("ppl.json"), &record)?;
    println!("{} seed {}: pseudo-perplexity {:.6} over {} tokens", strategy, seed, report.value, report.n_scored_tokens);
    Ok(())
}

pub fn probe(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let strategy = ctx.config.strategy()?;
    let seed = ctx.config.seed()?;
    let root = ctx.config.output_dir();
    let baseline = StrategyConfig::new(strategy.token, PreprocStrategy::PS1, strategy.fine_tune);
    let with = load_mlm(&mlm_dir(&root, &strategy, seed), &strategy)?;
    let without = load_mlm(&mlm_dir(&root, &baseline, seed), &baseline).context("the probe compares against the PS1 model of the same seed")?;
    let curves = run_probe(&as_run(&with, strategy, seed), &as_run(&without, baseline, seed), &splits, &ctx.pipeline()?)?;
    let dir = root.join("probe").join(strategy.key()).join(format!("seed-{seed}"));
    create_dir(&dir)?;
    write_config(&dir, &ctx.config)?;
    let (name, text) = match ctx.format {
        Format::Csv => ("probe.csv", probe_curves_csv(&curves)),
        Format::Records => ("probe.jsonl", probe_curves_records(&curves)),
    };
    write_text(&dir.join(name), &text)?;
    for c in &curves {
        println!("{:<14} argmax {:?} max {:.5}", c.model_tag.name(), c.argmax(), c.max_value());
    }
    println!("-> {}", dir.join(name).display());
    Ok(())
}

fn as_run(l: &LoadedMlm, strategy: StrategyConfig, seed: u64) -> MlmRun {
    MlmRun {
        strategy,
        seed,
        vocab: l.vocab.clone(),
        model: l.model.clone(),
        epochs: Vec::new(),
    }
}

fn require_target(ctx: &Ctx) -> Result<Target> {
    match ctx.config.target()? {
        Some(t) => Ok(t),
        None => bail!("set `task` to confidence, sentiment or persuasiveness"),
    }
}

fn head_config(ctx: &Ctx, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        seed: mix_seed(seed, 303),
        ..ctx.config.head()?
    })
}

pub fn train_head(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let strategy = ctx.config.strategy()?;
    let seed = ctx.config.seed()?;
    let target = require_target(ctx)?;
    let root = ctx.config.output_dir();
    let loaded = load_mlm(&mlm_dir(&root, &strategy, seed), &strategy)?;
    let cfg = head_config(ctx, seed)?;
    let head = RegressionHead::init(loaded.model.config().d_model, cfg.head_hidden, mix_seed(seed, 202));
    let (predictor, epochs) = train_regressor(&loaded.model, &head, &splits, &loaded.vocab, &strategy, target, &cfg)?;
    let dir = head_dir(&root, &strategy, target, seed);
    create_dir(&dir)?;
    write_config(&dir, &ctx.config)?;
    let mut manifest = loaded.manifest.clone();
    manifest.insert("target", target.name());
    manifest.insert("head_hidden", cfg.head_hidden.to_string());
    manifest.insert("freeze_encoder", cfg.freeze_encoder.to_string());
    manifest.write(&dir)?;
    save_head(&dir, &predictor.head, (!cfg.freeze_encoder).then_some(&predictor.encoder))?;
    write_text(&dir.join("epochs.jsonl"), &epochs_jsonl(&epochs)?)?;
    let best = epochs.iter().map(|e| e.dev_metric).fold(f64::INFINITY, f64::min);
    println!("{} {} seed {}: {} epochs, best dev MSE {:.5} -> {}", strategy, target.name(), seed, epochs.len(), best, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct MseRecord<'a> {
    format: &'a str,
    seed: u64,
    vocab_hash: &'a str,
    report: &'a MseReport,
    constant_baseline_mse: f64,
}

pub fn eval_head(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let strategy = ctx.config.strategy()?;
    let seed = ctx.config.seed()?;
    let target = require_target(ctx)?;
    let root = ctx.config.output_dir();
    let loaded = load_mlm(&mlm_dir(&root, &strategy, seed), &strategy)?;
    let dir = head_dir(&root, &strategy, target, seed);
    let manifest = Manifest::read(&dir)?;
    if manifest.get("vocab_hash")? != loaded.manifest.get("vocab_hash")? {
        bail!("head in {} was trained on a different vocabulary", dir.display());
    }
    let hidden: usize = manifest.get("head_hidden")?.parse()?;
    let head = load_head(&dir, loaded.model.config().d_model, hidden)?;
    let encoder = load_encoder(&dir, loaded.model.config())?.unwrap_or(loaded.model);
    let predictor = Predictor { encoder, head };
    let test = splits.labeled(Split::Test, target);
    let report = mse_eval(&predictor, &test, &loaded.vocab, &strategy, target)?;
    let record = MseRecord {
        format: MSE_FORMAT,
        seed,
        vocab_hash: manifest.get("vocab_hash")?,
        report: &report,
        constant_baseline_mse: constant_baseline(&splits, target)?,
    };
    write_json(&dir.join("mse.json"), &record)?;
    println!(
        "{} {} seed {}: test MSE {:.6} over {} reviews (constant baseline {:.6})",
        strategy,
        target.name(),
        seed,
        report.mse,
        report.n_reviews,
        record.constant_baseline_mse
    );
    Ok(())
}

/// Test-split metric of one (strategy, seed) cell, trained from scratch.
fn cell_metric(splits: &DatasetSplits, pipeline: &PipelineConfig, strategy: &StrategyConfig, target: Option<Target>, seed: u64) -> fillerlm_core::Result<f64> {
    let run = fit_mlm(splits, strategy, pipeline, seed)?;
    match target {
        None => Ok(run_perplexity(&run, splits, pipeline)?.value),
        Some(t) => Ok(fit_head(&run, splits, t, pipeline)?.report.mse),
    }
}

fn metric_name(target: Option<Target>) -> String {
    match target {
        None => "pseudo_ppl".into(),
        Some(t) => format!("mse_{}", t.name()),
    }
}

pub fn compare(ctx: &Ctx) -> Result<()> {
    let splits = ctx.corpus()?;
    let pipeline = ctx.pipeline()?;
    let a = ctx.config.strategy()?;
    let b = ctx.config.against()?;
    let target = ctx.config.target()?;
    let seeds = ctx.config.seeds()?;
    let metric = metric_name(target);
    let comparison = seed_sweep_compare(
        |s: &StrategyConfig, seed| {
            let v = cell_metric(&splits, &pipeline, s, target, seed)?;
            eprintln!("  {s} seed {seed}: {metric} {v:.6}");
            Ok(v)
        },
        &a,
        &b,
        &metric,
        &seeds,
        ctx.config.threshold()?,
    )?;
    let dir = ctx.config.output_dir().join("compare").join(format!("{}_vs_{}", a.key(), b.key())).join(&metric);
    create_dir(&dir)?;
    write_config(&dir, &ctx.config)?;
    write_json(&dir.join("comparison.json"), &comparison)?;
    write_text(&dir.join("pairs.csv"), &pairs_csv(&comparison))?;
    println!("{}", comparison.verdict);
    Ok(())
}

fn pairs_csv(c: &Comparison) -> String {
    let mut out = format!("# format: {TABLE_FORMAT}\nseed,{},{}\n", c.pairs.condition_a, c.pairs.condition_b);
    for ((s, a), b) in c.pairs.seeds.iter().zip(&c.pairs.values_a).zip(&c.pairs.values_b) {
        out.push_str(&format!("{s},{a:.12e},{b:.12e}\n"));
    }
    out
}

/// Synthesizes a corpus if needed, fills every perplexity and downstream
/// cell for all seeds, then runs the paired comparisons and the probe.
pub fn repro_all(ctx: &Ctx) -> Result<()> {
    let path = ctx.config.corpus_path();
    if !path.exists() {
        synth(ctx)?;
    }
    let splits = ctx.corpus()?;
    let pipeline = ctx.pipeline()?;
    let seeds = ctx.config.seeds()?;
    let threshold = ctx.config.threshold()?;
    let dir = ctx.config.output_dir().join("repro");
    create_dir(&dir)?;
    write_config(&dir, &ctx.config)?;

    let t = |tok, p, ft| StrategyConfig::new(tok, p, ft);
    let mut ppl_cells = Vec::new();
    for ft in [true, false] {
        for p in [PreprocStrategy::PS1, PreprocStrategy::PS2, PreprocStrategy::PS3] {
            ppl_cells.push(t(TokenStrategy::T1, p, ft));
        }
    }
    ppl_cells.push(t(TokenStrategy::T2, PreprocStrategy::PS3, true));
    ppl_cells.push(t(TokenStrategy::T3, PreprocStrategy::PS3, true));
    let head_strategies: Vec<StrategyConfig> = [PreprocStrategy::PS1, PreprocStrategy::PS2, PreprocStrategy::PS3].iter().map(|&p| t(TokenStrategy::T1, p, true)).collect();
    let targets = [Target::Confidence, Target::Sentiment, Target::Persuasiveness];

    // (cell, metric) -> per-seed values
    let mut values: std::collections::BTreeMap<(String, String), Vec<f64>> = Default::default();
    let mut table = format!("# format: {TABLE_FORMAT}\ncell,metric,seed,value\n");
    for &seed in &seeds {
        for s in &ppl_cells {
            let run = fit_mlm(&splits, s, &pipeline, seed)?;
            let ppl = run_perplexity(&run, &splits, &pipeline)?.value;
            eprintln!("seed {seed} {s}: pseudo_ppl {ppl:.6}");
            table.push_str(&format!("{},pseudo_ppl,{seed},{ppl:.12e}\n", s.key()));
            values.entry((s.key(), "pseudo_ppl".into())).or_default().push(ppl);
            if head_strategies.contains(s) {
                for target in targets {
                    let head = fit_head(&run, &splits, target, &pipeline)?;
                    let m = metric_name(Some(target));
                    eprintln!("seed {seed} {s}: {m} {:.6}", head.report.mse);
                    table.push_str(&format!("{},{m},{seed},{:.12e}\n", s.key(), head.report.mse));
                    values.entry((s.key(), m)).or_default().push(head.report.mse);
                }
            }
            if seed == seeds[0] && *s == t(TokenStrategy::T1, PreprocStrategy::PS3, true) {
                let without = fit_mlm(&splits, &t(TokenStrategy::T1, PreprocStrategy::PS1, true), &pipeline, seed)?;
                let curves = run_probe(&run, &without, &splits, &pipeline)?;
                write_text(&dir.join("probe.csv"), &probe_curves_csv(&curves))?;
            }
        }
    }
    write_text(&dir.join("cells.csv"), &table)?;

    let pairs = [
        ("T1.PS3", "T1.PS1", "pseudo_ppl".to_string()),
        ("T1.PS3", "T1.PS2", "pseudo_ppl".to_string()),
        ("T2.PS3", "T1.PS3", "pseudo_ppl".to_string()),
        ("T3.PS3", "T1.PS3", "pseudo_ppl".to_string()),
        ("T1.PS3", "T1.PS1", metric_name(Some(Target::Confidence))),
        ("T1.PS3", "T1.PS1", metric_name(Some(Target::Sentiment))),
        ("T1.PS3", "T1.PS1", metric_name(Some(Target::Persuasiveness))),
    ];
    let mut summary = String::new();
    for (a, b, m) in pairs {
        let va = values[&(a.to_string(), m.clone())].clone();
        let vb = values[&(b.to_string(), m.clone())].clone();
        let paired = fillerlm_core::stats::PairedResults::new(a, b, m.as_str(), seeds.clone(), va, vb)?;
        let c = Comparison::from_pairs(paired, threshold)?;
        println!("{}", c.verdict);
        summary.push_str(&serde_json::to_string(&c)?);
        summary.push('\n');
    }
    write_text(&dir.join("comparisons.jsonl"), &summary)?;
    println!("-> {}", dir.display());
    Ok(())
}
