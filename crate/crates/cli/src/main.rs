use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rpo_core::certify::{certify, CheckedLoss};
use rpo_core::diagnostics::{diagnose, render_kl_table, DiagnosticsOptions, RecordDiagnostics};
use rpo_core::env::{margin_noise_sim, Critic, OracleCritic, Task};
use rpo_core::experiment::{compare, prepare, ExperimentConfig};
use rpo_core::objectives::Paradigm;
use rpo_core::pairgen::{build_corpus, corpus_hash, read_jsonl, write_jsonl, CorpusSpec};
use rpo_core::policy::Policy;
use rpo_core::train::{train_with_snapshots, LossKind, SnapshotFn};
use rpo_core::{mix_seed, rng_from_seed, RpoError};
use rpo_critique::{CritiqueError, HttpCritic};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "rpo-lab", version, about = "DPO vs reflective preference optimization on synthetic tasks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.learning_rate=0.05`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task and write it as JSON.
    GenTask {
        #[arg(long)]
        out: PathBuf,
        /// Task seed (overrides task.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a preference corpus and write it as JSONL.
    GenPairs {
        #[arg(long, value_enum, default_value = "reflective")]
        paradigm: ParadigmArg,
        #[arg(long)]
        out: PathBuf,
        /// Experiment seed used to build the base policy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate from this policy instead of the prepared one.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "oracle")]
        critic: CriticArg,
    },
    /// Train on a corpus and write the per-step trace as CSV.
    Train {
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// JSONL corpus; defaults to the prepared corpus matching the loss.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Starting policy; defaults to the prepared hint-pretrained policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out_policy: Option<PathBuf>,
        /// Snapshot reports (JSON) when train.eval_every > 0.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Diagnostics over matched corpora: JSON report plus per-record CSV.
    Diagnose {
        /// Policy to measure; defaults to the prepared hint-pretrained policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train DPO and RPO from the same start on matched corpora, per seed.
    Compare {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a loss gradient against central differences on random fixtures.
    GradCheck {
        #[arg(long, default_value = "rpo")]
        loss: CheckedLoss,
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte-Carlo margin statistics under shared score plus decoding noise.
    SimulateMargin {
        #[arg(long)]
        sigma: f64,
        #[arg(short = 'n', long = "samples", default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ParadigmArg {
    Reflective,
    SelfEvolution,
    Injection,
    Recognition,
}

impl From<ParadigmArg> for Paradigm {
    fn from(p: ParadigmArg) -> Self {
        match p {
            ParadigmArg::Reflective => Paradigm::Reflective,
            ParadigmArg::SelfEvolution => Paradigm::SelfEvolution,
            ParadigmArg::Injection => Paradigm::Injection,
            ParadigmArg::Recognition => Paradigm::Recognition,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CriticArg {
    Oracle,
    Http,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Dpo,
    Rpo,
}

fn apply_override(table: &mut toml::Table, raw: &str) -> anyhow::Result<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| RpoError::Config(format!("override {raw:?} is not of the form SECTION.KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!(RpoError::Config(format!("bad override key {key:?}")));
    }
    let value = value.trim();
    let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| RpoError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parsed);
    Ok(())
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let text = match &common.config {
        // an unreadable config is a usage problem, not a runtime failure
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| RpoError::Config(format!("reading {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| RpoError::Config(e.to_string()))?;
    for o in &common.overrides {
        apply_override(&mut table, o)?;
    }
    let text = toml::to_string(&table).map_err(|e| RpoError::Config(e.to_string()))?;
    Ok(ExperimentConfig::from_toml_str(&text)?)
}

fn write_out(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

fn records_csv(rows: &[RecordDiagnostics]) -> String {
    let mut s = String::from("index,paradigm,ctx,kl,margin,gt_avg_logprob\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e}\n",
            r.index, r.paradigm, r.ctx, r.kl, r.margin, r.gt_avg_logprob
        ));
    }
    s
}

fn diagnostics_options(cfg: &ExperimentConfig, seed: u64) -> DiagnosticsOptions {
    DiagnosticsOptions {
        bootstrap_resamples: cfg.diagnostics.bootstrap_resamples,
        ci_level: cfg.diagnostics.ci_level,
        hallucination_samples: cfg.diagnostics.hallucination_samples,
        beta: cfg.train.hyper.beta,
        seed: mix_seed(seed, 0xD1A6),
    }
}

fn load_policy_for(task: &Task, path: &Path) -> anyhow::Result<Policy> {
    let p = Policy::load_json(path)?;
    if p.vocab != task.vocab || p.num_contexts != task.num_contexts {
        bail!(RpoError::invalid(format!(
            "policy {} does not match the task shape",
            path.display()
        )));
    }
    Ok(p)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Command::GenTask { out, seed } => {
            let mut section = cfg.task.clone();
            if let Some(s) = seed {
                section.seed = s;
            }
            let task = section.build()?;
            task.save_json(&out)?;
            eprintln!("wrote task with {} contexts to {}", task.num_contexts, out.display());
        }
        Command::GenPairs {
            paradigm,
            out,
            seed,
            policy,
            critic,
        } => {
            let prepared = prepare(&cfg, seed)?;
            let policy = match policy {
                Some(p) => load_policy_for(&prepared.task, &p)?,
                None => prepared.pretrained.clone(),
            };
            let http;
            let critic: &dyn Critic = match critic {
                CriticArg::Oracle => &OracleCritic,
                CriticArg::Http => {
                    let ep = cfg
                        .critique_endpoint
                        .clone()
                        .ok_or_else(|| RpoError::Config("--critic http needs a [critique_endpoint] section".into()))?;
                    http = HttpCritic::new(ep)?;
                    &http
                }
            };
            let spec = CorpusSpec {
                max_regen_attempts: cfg.corpus.max_regen_attempts,
                injection_k: cfg.corpus.injection_k,
                ..CorpusSpec::new(paradigm.into(), cfg.corpus.pairs_per_context, mix_seed(seed, cfg.corpus.seed))
            };
            let corpus = build_corpus(&policy, &prepared.task, critic, &spec)?;
            write_jsonl(&out, &corpus)?;
            let degenerate = corpus.iter().filter(|r| r.meta.degenerate).count();
            println!(
                "{}",
                to_json(&serde_json::json!({
                    "records": corpus.len(),
                    "degenerate": degenerate,
                    "sha256": corpus_hash(&corpus),
                    "path": out,
                }))
            );
        }
        Command::Train {
            loss,
            corpus,
            policy,
            seed,
            trace,
            out_policy,
            snapshots,
        } => {
            let prepared = prepare(&cfg, seed)?;
            let mut tcfg = cfg.train.clone();
            if let Some(l) = loss {
                tcfg.loss = match l {
                    LossArg::Dpo => LossKind::Dpo,
                    LossArg::Rpo => LossKind::Rpo,
                };
            }
            tcfg.seed = mix_seed(seed, 0x7EA1);
            let start = match policy {
                Some(p) => load_policy_for(&prepared.task, &p)?,
                None => prepared.pretrained.clone(),
            };
            let records = match corpus {
                Some(p) => read_jsonl(&p)?,
                None => match tcfg.loss {
                    LossKind::Rpo => prepared.corpora.reflective.clone(),
                    LossKind::Dpo => prepared.corpora.self_evolution.clone(),
                },
            };
            let opts = diagnostics_options(&cfg, seed);
            let mut hook = |_step: usize, p: &Policy, r: &Policy| {
                diagnose(p, r, &prepared.task, &prepared.corpora, &opts).map(|(rep, _)| rep)
            };
            let hook: Option<&mut SnapshotFn<'_>> = if tcfg.eval_every > 0 { Some(&mut hook) } else { None };
            let (trained, tr) = train_with_snapshots(&start, &records, &tcfg, hook)?;
            std::fs::write(&trace, tr.to_csv()).with_context(|| format!("writing {}", trace.display()))?;
            if let Some(p) = out_policy {
                trained.save_json(&p)?;
            }
            if let Some(p) = snapshots {
                write_out(Some(&p), &to_json(&tr.snapshots))?;
            }
            let losses = tr.losses();
            println!(
                "{}",
                to_json(&serde_json::json!({
                    "steps": losses.len(),
                    "initial_loss": losses.first(),
                    "final_loss": rpo_core::train::final_loss(&losses, cfg.diagnostics.loss_window),
                    "steps_to_threshold": rpo_core::train::steps_to_threshold(
                        &losses, cfg.diagnostics.loss_threshold, cfg.diagnostics.loss_window),
                }))
            );
        }
        Command::Diagnose {
            policy,
            seed,
            out,
            records,
        } => {
            let prepared = prepare(&cfg, seed)?;
            let policy = match policy {
                Some(p) => load_policy_for(&prepared.task, &p)?,
                None => prepared.pretrained.clone(),
            };
            let (report, rows) = diagnose(
                &policy,
                &prepared.pretrained,
                &prepared.task,
                &prepared.corpora,
                &diagnostics_options(&cfg, seed),
            )?;
            let table: Vec<(&str, _)> = [
                ("RPO", "reflective"),
                ("Self-E. DPO", "self_evolution"),
                ("Hal. Rec. DPO", "recognition"),
            ]
            .iter()
            .filter_map(|(label, key)| report.kl_stats.get(*key).map(|k| (*label, *k)))
            .collect();
            eprintln!("{}", render_kl_table(&table));
            write_out(out.as_deref(), &to_json(&report))?;
            if let Some(p) = records {
                std::fs::write(&p, records_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Compare { seeds, out } => {
            if seeds == 0 {
                bail!(RpoError::invalid("--seeds must be >= 1"));
            }
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = compare(&cfg, &seeds)?;
            write_out(out.as_deref(), &to_json(&report))?;
        }
        Command::GradCheck { loss, fixtures, seed } => {
            if fixtures == 0 {
                bail!(RpoError::invalid("--fixtures must be >= 1"));
            }
            let reports = certify(loss, fixtures, seed)?;
            let max_rel = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            let max_abs = reports.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("loss={loss} fixtures={fixtures} failed={failed} max_rel_err={max_rel:.3e} max_abs_err={max_abs:.3e}");
            if failed > 0 {
                bail!(RpoError::Numeric(format!("{failed} of {fixtures} fixtures failed the gradient check")));
            }
        }
        Command::SimulateMargin { sigma, n, seed } => {
            let stats = margin_noise_sim(sigma, n, &mut rng_from_seed(seed))?;
            println!("{}", to_json(&stats));
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<RpoError>() {
        return match e {
            RpoError::InvalidInput(_) | RpoError::Config(_) | RpoError::Parse { .. } => 1,
            _ => 2,
        };
    }
    match err.downcast_ref::<CritiqueError>() {
        Some(CritiqueError::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
