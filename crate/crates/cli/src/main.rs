mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use engagetag::corpus::{bio_spans, load_dataset, save_dataset, Dataset, DatasetKind, EntityKind, EntityType};
use engagetag::decode::beam_search;
use engagetag::engagement::{harvest, load_events, load_pairs, save_events, save_jsonl, segment_sessions};
use engagetag::eval::{evaluate, run_grid, GridCorpora, PoolSizes};
use engagetag::kb::{load_kb, rerank, save_kb, KnowledgeBase, ValidationStatus};
use engagetag::labelgen::{normalize, project_labels, ProjectionConfig};
use engagetag::synthgen::{gen_corpus, gen_engagement_logs, gen_kb, GeneratorConfig};
use engagetag::tagger::{build_vocab, load_checkpoint, save_checkpoint, train, Head, Tagger};

use config::{input, optional_input, output, CliConfig, Overrides};

#[derive(Parser, Debug)]
#[command(name = "engagetag", version, about = "Weakly supervised music entity tagging from engagement signals")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Knowledge base TSV (title, artist, album).
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// Fuzzy-matching threshold used by projection.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Restrict the grid to one human-annotated size.
    #[arg(long, global = true)]
    human_size: Option<usize>,
    /// Restrict the grid to one engagement multiplier.
    #[arg(long, global = true)]
    engagement_mult: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a catalog, corpora and engagement logs into the --out directory.
    Synth,
    /// Turn engagement events into (utterance, accepted track) pairs.
    Harvest {
        #[arg(long)]
        events: Option<PathBuf>,
        /// Listening time that makes a play positive, in milliseconds.
        #[arg(long)]
        positive_ms: Option<u64>,
    },
    /// Project track metadata onto harvested utterances.
    Project {
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Train a tagger on coarse and fine corpora.
    Train {
        #[arg(long)]
        cg: Option<PathBuf>,
        #[arg(long)]
        fg: Option<PathBuf>,
    },
    /// Score a checkpoint on gold test sets.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test_cg: Option<PathBuf>,
        #[arg(long)]
        test_fg: Option<PathBuf>,
        /// Also write per-utterance re-ranking diagnostics as JSONL.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Run the data-size grid on synthetic data and write a TSV summary.
    Grid,
    /// Show the beam for one utterance with knowledge-base statuses.
    RerankDemo {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        utterance: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ENGAGETAG_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        kb: cli.kb,
        out: cli.out,
        beam: cli.beam,
        threshold: cli.threshold,
        human_size: cli.human_size,
        engagement_mult: cli.engagement_mult,
    });
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Harvest { events, positive_ms } => {
            let events = input(&events.or(cfg.paths.events.clone()), "events file")?;
            cmd_harvest(&events, &output(&cfg.paths.out)?, positive_ms.unwrap_or(cfg.positive_ms))
        }
        Command::Project { pairs } => {
            let pairs = input(&pairs.or(cfg.paths.pairs.clone()), "pairs file")?;
            let kb = optional_input(&cfg.paths.kb, "knowledge base")?;
            cmd_project(&cfg, &pairs, kb.as_deref(), &output(&cfg.paths.out)?)
        }
        Command::Train { cg, fg } => {
            let cg = optional_input(&cg.or(cfg.paths.cg.clone()), "coarse corpus")?;
            let fg = optional_input(&fg.or(cfg.paths.fg.clone()), "fine corpus")?;
            if cg.is_none() && fg.is_none() {
                bail!("train needs --cg, --fg or both");
            }
            cmd_train(&cfg, cg.as_deref(), fg.as_deref(), &output(&cfg.paths.out)?)
        }
        Command::Eval {
            checkpoint,
            test_cg,
            test_fg,
            diagnostics,
        } => {
            let checkpoint = input(&checkpoint.or(cfg.paths.checkpoint.clone()), "checkpoint")?;
            let test_cg = optional_input(&test_cg.or(cfg.paths.test_cg.clone()), "coarse test set")?;
            let test_fg = optional_input(&test_fg.or(cfg.paths.test_fg.clone()), "fine test set")?;
            let kb = optional_input(&cfg.paths.kb, "knowledge base")?;
            cmd_eval(&cfg, &checkpoint, test_cg.as_deref(), test_fg.as_deref(), kb.as_deref(), diagnostics.as_deref())
        }
        Command::Grid => {
            let kb = optional_input(&cfg.paths.kb, "knowledge base")?;
            cmd_grid(&cfg, kb.as_deref())
        }
        Command::RerankDemo { checkpoint, utterance } => {
            let checkpoint = input(&checkpoint.or(cfg.paths.checkpoint.clone()), "checkpoint")?;
            let kb = input(&cfg.paths.kb, "knowledge base")?;
            cmd_rerank_demo(&cfg, &checkpoint, &kb, &utterance)
        }
    }
}

fn read_kb(path: &Path) -> Result<KnowledgeBase> {
    load_kb(path).with_context(|| format!("reading knowledge base {}", path.display()))
}

fn read_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    load_dataset(path, kind).with_context(|| format!("reading dataset {}", path.display()))
}

/// Writes `kb.tsv`, `human_cg.jsonl`, `events.jsonl`, `engagement_gold_fg.jsonl`,
/// `test_cg.jsonl` and `test_fg.jsonl`. With --kb the given catalog is used
/// instead of a generated one and is not copied.
fn cmd_synth(cfg: &CliConfig) -> Result<()> {
    let dir = output(&cfg.paths.out)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let kb = match optional_input(&cfg.paths.kb, "knowledge base")? {
        Some(path) => read_kb(&path)?,
        None => {
            let kb = gen_kb(&cfg.generator)?;
            save_kb(&kb, dir.join("kb.tsv"))?;
            kb
        }
    };
    let part = |offset: u64, prefix: &str, n: usize| {
        let gen = GeneratorConfig {
            seed: cfg.generator.seed.wrapping_mul(4).wrapping_add(offset),
            id_prefix: format!("{prefix}-"),
            ..cfg.generator.clone()
        };
        gen_corpus(&kb, &gen, n).map(|c| (c, gen))
    };
    let (human, _) = part(0, "cg", cfg.synth.n_human)?;
    save_dataset(&human.coarse, dir.join("human_cg.jsonl"))?;
    let (engaged, gen) = part(1, "fg", cfg.synth.n_engagement)?;
    save_events(&gen_engagement_logs(&engaged, &kb, &gen)?, dir.join("events.jsonl"))?;
    save_dataset(&engaged.fine, dir.join("engagement_gold_fg.jsonl"))?;
    let (test, _) = part(2, "t", cfg.synth.n_test)?;
    save_dataset(&test.coarse, dir.join("test_cg.jsonl"))?;
    save_dataset(&test.fine, dir.join("test_fg.jsonl"))?;
    println!(
        "wrote {} records, {} human, {} engagement sessions, {} test utterances to {}",
        kb.len(),
        human.coarse.len(),
        engaged.fine.len(),
        test.fine.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_harvest(events: &Path, out: &Path, positive_ms: u64) -> Result<()> {
    let events = load_events(events).with_context(|| format!("reading events {}", events.display()))?;
    let segmented = segment_sessions(events);
    let (pairs, counts) = harvest(&segmented.sessions, positive_ms);
    save_jsonl(&pairs, out)?;
    println!(
        "harvested {} pairs ({} positive, {} corrected, {} skipped sessions)",
        pairs.len(),
        counts.positive,
        counts.negative,
        counts.skipped
    );
    Ok(())
}

/// With a knowledge base, pairs whose track is not in it are dropped before
/// projection.
fn cmd_project(cfg: &CliConfig, pairs: &Path, kb: Option<&Path>, out: &Path) -> Result<()> {
    let pairs = load_pairs(pairs).with_context(|| format!("reading pairs {}", pairs.display()))?;
    let kb = kb.map(read_kb).transpose()?;
    let proj = ProjectionConfig::new(cfg.threshold, cfg.max_span_len)?;
    let mut unknown = 0;
    let mut examples = Vec::new();
    for p in &pairs {
        if let Some(kb) = &kb {
            if !kb.records().iter().any(|r| r.same_track(&p.track)) {
                unknown += 1;
                continue;
            }
        }
        examples.extend(project_labels(&p.id, &p.tokens, &p.track, &proj));
    }
    let kept = examples.len();
    save_dataset(&Dataset::new(DatasetKind::FG, examples)?, out)?;
    println!(
        "projected {kept} of {} pairs ({unknown} not in the knowledge base, {} without a match)",
        pairs.len(),
        pairs.len() - unknown - kept
    );
    Ok(())
}

fn cmd_train(cfg: &CliConfig, cg: Option<&Path>, fg: Option<&Path>, out: &Path) -> Result<()> {
    let cg = match cg {
        Some(p) => read_dataset(p, DatasetKind::CG)?,
        None => Dataset::empty(DatasetKind::CG),
    };
    let fg = match fg {
        Some(p) => read_dataset(p, DatasetKind::FG)?,
        None => Dataset::empty(DatasetKind::FG),
    };
    let mut hyper = cfg.hyper.clone();
    // a missing source keeps the other at full weight
    if fg.is_empty() {
        hyper.sample_weight_fg = 0.0;
    }
    if cg.is_empty() {
        hyper.sample_weight_cg = 0.0;
    }
    let vocab = build_vocab(&[&cg, &fg], hyper.min_count)?;
    let mut tagger = Tagger::new(vocab, hyper)?;
    let log = train(&mut tagger, &cg, &fg)?;
    save_checkpoint(&tagger, out)?;
    let last = log.epochs.last();
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "trained {} epochs on {} coarse and {} fine utterances; final loss coarse {} fine {}; saved {}",
        log.epochs.len(),
        cg.len(),
        fg.len(),
        fmt(last.and_then(|e| e.coarse_loss)),
        fmt(last.and_then(|e| e.fine_loss)),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &CliConfig,
    checkpoint: &Path,
    test_cg: Option<&Path>,
    test_fg: Option<&Path>,
    kb: Option<&Path>,
    diagnostics: Option<&Path>,
) -> Result<()> {
    let tagger = load_checkpoint(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let test_cg = match test_cg {
        Some(p) => read_dataset(p, DatasetKind::CG)?,
        None => Dataset::empty(DatasetKind::CG),
    };
    let test_fg = match test_fg {
        Some(p) => read_dataset(p, DatasetKind::FG)?,
        None => Dataset::empty(DatasetKind::FG),
    };
    if test_cg.is_empty() && test_fg.is_empty() {
        bail!("eval needs --test-cg, --test-fg or both");
    }
    let kb = kb.map(read_kb).transpose()?;
    let (report, diags) = evaluate(&tagger, &test_cg, &test_fg, kb.as_ref(), cfg.beam)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &cfg.paths.out {
        Some(out) => fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?,
        None => println!("{json}"),
    }
    if let Some(path) = diagnostics {
        save_jsonl(&diags, path)?;
    }
    Ok(())
}

fn cmd_grid(cfg: &CliConfig, kb: Option<&Path>) -> Result<()> {
    let grid = cfg.grid_config();
    grid.validate()?;
    let kb = match kb {
        Some(p) => read_kb(p)?,
        None => gen_kb(&cfg.generator)?,
    };
    let corpora = GridCorpora::synthesize(&kb, &cfg.generator, PoolSizes::for_grid(&grid, cfg.grid.test_size))?;
    info!(
        "grid pools: {} coarse, {} fine, tests {} / {}",
        corpora.cg_pool.len(),
        corpora.fg_pool.len(),
        corpora.test_cg.len(),
        corpora.test_fg.len()
    );
    let report = run_grid(&grid, &corpora, &kb)?;
    match &cfg.paths.out {
        Some(out) => {
            let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(file);
            report.write_tsv(&mut w)?;
            w.flush()?;
            eprint!("{}", report.table());
        }
        None => {
            report.write_tsv(std::io::stdout().lock())?;
            eprint!("{}", report.table());
        }
    }
    Ok(())
}

fn cmd_rerank_demo(cfg: &CliConfig, checkpoint: &Path, kb: &Path, utterance: &str) -> Result<()> {
    let tagger = load_checkpoint(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let kb = read_kb(kb)?;
    let tokens: Vec<String> = normalize(utterance).split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        bail!("utterance has no tokens after normalization");
    }
    let lattice = tagger.lattice(&tokens, None, Head::Fine)?;
    let hyps = beam_search::<EntityType>(&lattice, cfg.beam)?;
    let diag = rerank(&kb, "demo", &tokens, &hyps)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "rank\tscore\tstatus\tchosen\tentities")?;
    for (i, (h, status)) in hyps.iter().zip(&diag.statuses).enumerate() {
        let entities: Vec<String> = bio_spans(&h.labels)
            .into_iter()
            .map(|(kind, span)| format!("{}={}", kind.name(), tokens[span].join(" ")))
            .collect();
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}\t{}",
            i + 1,
            h.score,
            status_name(*status),
            if i == diag.chosen() { "*" } else { "" },
            entities.join("; ")
        )?;
    }
    Ok(())
}

fn status_name(s: ValidationStatus) -> &'static str {
    match s {
        ValidationStatus::NotActivated => "not_activated",
        ValidationStatus::Valid => "valid",
        ValidationStatus::Invalid => "invalid",
    }
}
