//! Utterance-level error rates, KB-activated subset analysis and the
//! repeated-seed experiment grid.

use std::fmt::Write as _;
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{Dataset, DatasetKind, EntityType, LabeledExample, MusicEntity};
use crate::engagement::{harvest, segment_sessions, DEFAULT_POSITIVE_THRESHOLD_MS};
use crate::decode::{beam_search, Lattice};
use crate::error::{Error, Result};
use crate::kb::{rerank, KnowledgeBase, RerankDiagnostics};
use crate::labelgen::{project_labels, ProjectionConfig};
use crate::synthgen::{gen_corpus, gen_engagement_logs, GeneratorConfig};
use crate::tagger::{build_vocab, train, Head, Hyperparams, Tagger};

/// Fraction of utterances with at least one wrong token label.
pub fn utterance_error_rate<T: PartialEq>(preds: &[Vec<T>], golds: &[Vec<T>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            id: "utterances".into(),
            tokens: golds.len(),
            labels: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(Error::EmptyInput("no utterances to score"));
    }
    let mut wrong = 0usize;
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch {
                id: format!("utterance {i}"),
                tokens: g.len(),
                labels: p.len(),
            });
        }
        if p != g {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / golds.len() as f64)
}

/// Mean and standard error of the mean (sample standard deviation over √n).
pub fn mean_sem(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            what: "values for a standard error",
            requested: 2,
            available: n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    let (ma, sa) = mean_sem(a)?;
    let (mb, sb) = mean_sem(b)?;
    let (va, vb) = (sa * sa, sb * sb);
    let se2 = va + vb;
    if se2 == 0.0 {
        let p = if ma == mb { 1.0 } else { 0.0 };
        let t = if ma == mb { 0.0 } else { f64::INFINITY.copysign(ma - mb) };
        return Ok(WelchTest { t, df: f64::INFINITY, p });
    }
    let t = (ma - mb) / se2.sqrt();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(WelchTest {
        t,
        df,
        p: (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0),
    })
}

/// Metrics that need a missing test set or KB are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cg: usize,
    pub n_fg: usize,
    pub cgeer: Option<f64>,
    /// Fine error rate of the beam top-1.
    pub fgeer: Option<f64>,
    /// Fine error rate after KB re-ranking.
    pub fgeer_kb: Option<f64>,
    pub n_activated: usize,
    pub kb_activation_rate: Option<f64>,
    pub fgeer_activated: Option<f64>,
    pub fgeer_kb_activated: Option<f64>,
}

/// Scores `tagger` on the coarse and fine test sets. Fine utterances are
/// beam-decoded; with a KB the beam is re-ranked and per-utterance
/// diagnostics are returned.
pub fn evaluate(
    tagger: &Tagger,
    test_cg: &Dataset,
    test_fg: &Dataset,
    kb: Option<&KnowledgeBase>,
    beam: usize,
) -> Result<(EvalReport, Vec<RerankDiagnostics>)> {
    let mut report = EvalReport {
        n_cg: test_cg.len(),
        n_fg: test_fg.len(),
        ..EvalReport::default()
    };
    if !test_cg.is_empty() {
        let mut preds = Vec::with_capacity(test_cg.len());
        let mut golds = Vec::with_capacity(test_cg.len());
        for ex in test_cg.iter() {
            let gold = ex
                .coarse_labels()
                .ok_or(Error::HeadMismatch { source_kind: ex.source().as_str(), head: Head::Coarse.as_str() })?;
            preds.push(tagger.predict::<MusicEntity>(&ex.tokens, ex.feature)?);
            golds.push(gold.to_vec());
        }
        report.cgeer = Some(utterance_error_rate(&preds, &golds)?);
    }
    let mut diagnostics = Vec::new();
    if !test_fg.is_empty() {
        let lattices = test_fg
            .iter()
            .map(|ex| tagger.lattice(&ex.tokens, ex.feature, Head::Fine))
            .collect::<Result<Vec<_>>>()?;
        let (fine, diags) = evaluate_fine_lattices(test_fg, &lattices, kb, beam)?;
        diagnostics = diags;
        report = EvalReport {
            n_cg: report.n_cg,
            cgeer: report.cgeer,
            ..fine
        };
    }
    Ok((report, diagnostics))
}

/// Fine-grained metrics from precomputed lattices, one per example of
/// `test_fg`. Only the fine fields of the report are filled.
pub fn evaluate_fine_lattices(
    test_fg: &Dataset,
    lattices: &[Lattice],
    kb: Option<&KnowledgeBase>,
    beam: usize,
) -> Result<(EvalReport, Vec<RerankDiagnostics>)> {
    if lattices.len() != test_fg.len() {
        return Err(Error::LengthMismatch {
            id: "lattices".into(),
            tokens: test_fg.len(),
            labels: lattices.len(),
        });
    }
    let mut report = EvalReport {
        n_fg: test_fg.len(),
        ..EvalReport::default()
    };
    if test_fg.is_empty() {
        return Ok((report, Vec::new()));
    }
    let mut diagnostics = Vec::new();
    let mut top1 = Vec::with_capacity(test_fg.len());
    let mut chosen = Vec::with_capacity(test_fg.len());
    let mut golds = Vec::with_capacity(test_fg.len());
    for (ex, lattice) in test_fg.iter().zip(lattices) {
        let gold = ex
            .fine_labels()
            .ok_or(Error::HeadMismatch { source_kind: ex.source().as_str(), head: Head::Fine.as_str() })?;
        if lattice.len() != ex.tokens.len() {
            return Err(Error::LengthMismatch {
                id: ex.id.clone(),
                tokens: ex.tokens.len(),
                labels: lattice.len(),
            });
        }
        let hyps = beam_search::<EntityType>(lattice, beam)?;
        top1.push(hyps[0].labels.clone());
        if let Some(kb) = kb {
            let d = rerank(kb, &ex.id, &ex.tokens, &hyps)?;
            chosen.push(hyps[d.chosen()].labels.clone());
            diagnostics.push(d);
        }
        golds.push(gold.to_vec());
    }
    report.fgeer = Some(utterance_error_rate(&top1, &golds)?);
    if kb.is_some() {
        report.fgeer_kb = Some(utterance_error_rate(&chosen, &golds)?);
        let active: Vec<usize> = (0..golds.len()).filter(|&i| diagnostics[i].activated).collect();
        report.n_activated = active.len();
        report.kb_activation_rate = Some(active.len() as f64 / golds.len() as f64);
        if !active.is_empty() {
            let pick = |v: &[Vec<_>]| active.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let g = pick(&golds);
            report.fgeer_activated = Some(utterance_error_rate(&pick(&top1), &g)?);
            report.fgeer_kb_activated = Some(utterance_error_rate(&pick(&chosen), &g)?);
        }
    }
    Ok((report, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub human_sizes: Vec<usize>,
    pub engagement_multipliers: Vec<usize>,
    pub engagement_unit_size: usize,
    pub n_seeds: usize,
    /// Seeds used are `base_seed .. base_seed + n_seeds`.
    pub base_seed: u64,
    pub beam: usize,
    pub hyper: Hyperparams,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            human_sizes: vec![200, 1000],
            engagement_multipliers: vec![0, 1, 2],
            engagement_unit_size: 2000,
            n_seeds: 5,
            base_seed: 0,
            beam: 5,
            hyper: Hyperparams::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds < 2 {
            return Err(Error::InsufficientData {
                what: "seeds for a standard error",
                requested: 2,
                available: self.n_seeds,
            });
        }
        if self.human_sizes.is_empty() || self.engagement_multipliers.is_empty() {
            return Err(Error::InvalidConfig("grid needs at least one human size and multiplier".into()));
        }
        if self.beam == 0 {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        self.hyper.validate()
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.base_seed + k)
    }
}

/// Training pools and test sets shared by every grid cell.
#[derive(Debug, Clone)]
pub struct GridCorpora {
    /// Human-annotated coarse examples.
    pub cg_pool: Dataset,
    /// Engagement-annotated fine examples.
    pub fg_pool: Dataset,
    pub test_cg: Dataset,
    pub test_fg: Dataset,
}

/// Sizes of the synthetic pools built by [`GridCorpora::synthesize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub cg_pool: usize,
    pub fg_pool: usize,
    pub test_cg: usize,
    pub test_fg: usize,
}

impl PoolSizes {
    /// Pools just large enough for every cell of `cfg`.
    pub fn for_grid(cfg: &GridConfig, test_size: usize) -> Self {
        PoolSizes {
            cg_pool: cfg.human_sizes.iter().copied().max().unwrap_or(0),
            fg_pool: cfg.engagement_unit_size * cfg.engagement_multipliers.iter().copied().max().unwrap_or(0),
            test_cg: test_size,
            test_fg: test_size,
        }
    }
}

impl GridCorpora {
    /// Human coarse data and gold test sets come straight from the generator.
    /// The fine pool goes through the engagement path: simulated sessions are
    /// harvested and the played track is projected back onto the utterance.
    pub fn synthesize(kb: &KnowledgeBase, gen: &GeneratorConfig, sizes: PoolSizes) -> Result<Self> {
        let part = |offset: u64, prefix: &str, n: usize| {
            let cfg = GeneratorConfig {
                seed: gen.seed.wrapping_mul(4).wrapping_add(offset),
                id_prefix: format!("{prefix}-"),
                ..gen.clone()
            };
            gen_corpus(kb, &cfg, n).map(|c| (c, cfg))
        };
        let (human, _) = part(0, "cg", sizes.cg_pool)?;
        // projection discards a few utterances, so over-generate
        let raw_fg = sizes.fg_pool + sizes.fg_pool / 5 + 10;
        let (engaged, fg_cfg) = part(1, "fg", raw_fg)?;
        let events = gen_engagement_logs(&engaged, kb, &fg_cfg)?;
        let (pairs, _) = harvest(&segment_sessions(events).sessions, DEFAULT_POSITIVE_THRESHOLD_MS);
        let proj = ProjectionConfig::default();
        let mut projected: Vec<LabeledExample> = pairs
            .iter()
            .filter_map(|p| project_labels(&p.id, &p.tokens, &p.track, &proj))
            .collect();
        if projected.len() < sizes.fg_pool {
            return Err(Error::InsufficientData {
                what: "projected engagement examples",
                requested: sizes.fg_pool,
                available: projected.len(),
            });
        }
        projected.truncate(sizes.fg_pool);
        let (test_cg, _) = part(2, "tcg", sizes.test_cg)?;
        let (test_fg, _) = part(3, "tfg", sizes.test_fg)?;
        Ok(GridCorpora {
            cg_pool: human.coarse,
            fg_pool: Dataset::new(DatasetKind::FG, projected)?,
            test_cg: test_cg.coarse,
            test_fg: test_fg.fine,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub human_size: usize,
    pub multiplier: usize,
    pub seed: u64,
    pub report: EvalReport,
}

/// Metric names in report order. Coarse-only cells carry only `cgeer`.
pub const FINE_METRICS: &[&str] = &[
    "fgeer",
    "fgeer_kb",
    "kb_activation_rate",
    "fgeer_activated",
    "fgeer_kb_activated",
];

fn metric(report: &EvalReport, name: &str) -> Option<f64> {
    match name {
        "cgeer" => report.cgeer,
        "fgeer" => report.fgeer,
        "fgeer_kb" => report.fgeer_kb,
        "kb_activation_rate" => report.kb_activation_rate,
        "fgeer_activated" => report.fgeer_activated,
        "fgeer_kb_activated" => report.fgeer_kb_activated,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub name: String,
    /// NaN when no seed produced the metric.
    pub mean: f64,
    /// NaN when fewer than two seeds produced the metric.
    pub sem: f64,
    pub n_seeds: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub human_size: usize,
    pub multiplier: usize,
    pub metrics: Vec<MetricSummary>,
}

impl CellSummary {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
}

impl GridReport {
    pub fn cell(&self, human_size: usize, multiplier: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.human_size == human_size && c.multiplier == multiplier)
    }

    /// One row per (cell, metric).
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "human_size\tmultiplier\tmetric\tmean\tsem\tn_seeds")?;
        for c in &self.cells {
            for m in &c.metrics {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                    c.human_size, c.multiplier, m.name, m.mean, m.sem, m.n_seeds
                )?;
            }
        }
        Ok(())
    }

    /// Readable summary in percent, with Welch p-values of each cell against
    /// the multiplier-0 baseline of the same human size.
    pub fn table(&self) -> String {
        let pct = |m: Option<&MetricSummary>| match m {
            Some(m) if m.n_seeds == 0 => "-".to_string(),
            Some(m) if m.sem.is_nan() => format!("{:.2}", 100.0 * m.mean),
            Some(m) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.sem),
            None => "-".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>4} {:>16} {:>9} {:>16} {:>16} {:>16} {:>16}",
            "human", "mult", "CGEER %", "p(CG)", "FGEER %", "FGEER+KB %", "FGEER act %", "FGEER+KB act %"
        );
        for c in &self.cells {
            let p = match (self.cell(c.human_size, 0), c.multiplier) {
                (Some(base), m) if m > 0 => match (base.get("cgeer"), c.get("cgeer")) {
                    (Some(a), Some(b)) => welch_t_test(&a.values, &b.values)
                        .map(|w| format!("{:.4}", w.p))
                        .unwrap_or_else(|_| "-".into()),
                    _ => "-".into(),
                },
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>16} {:>9} {:>16} {:>16} {:>16} {:>16}",
                c.human_size,
                format!("{}x", c.multiplier),
                pct(c.get("cgeer")),
                p,
                pct(c.get("fgeer")),
                pct(c.get("fgeer_kb")),
                pct(c.get("fgeer_activated")),
                pct(c.get("fgeer_kb_activated")),
            );
        }
        out
    }
}

const HUMAN_STREAM: u64 = 10;
const ENGAGEMENT_STREAM: u64 = 11;

fn shuffled_prefix(pool: &Dataset, n: usize, seed: u64, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    Dataset {
        kind: pool.kind,
        examples: idx[..n].iter().map(|&i| pool.examples[i].clone()).collect(),
    }
}

/// Trains and evaluates one grid run.
pub fn run_cell(
    cfg: &GridConfig,
    corpora: &GridCorpora,
    kb: &KnowledgeBase,
    human_size: usize,
    multiplier: usize,
    seed: u64,
) -> Result<RunResult> {
    let fg_size = multiplier * cfg.engagement_unit_size;
    for (what, requested, available) in [
        ("human coarse examples", human_size, corpora.cg_pool.len()),
        ("engagement fine examples", fg_size, corpora.fg_pool.len()),
    ] {
        if requested > available {
            return Err(Error::InsufficientData { what, requested, available });
        }
    }
    // the subsets depend only on the seed, so 2x always contains 1x
    let cg = shuffled_prefix(&corpora.cg_pool, human_size, seed, HUMAN_STREAM);
    let fg = shuffled_prefix(&corpora.fg_pool, fg_size, seed, ENGAGEMENT_STREAM);
    let hyper = Hyperparams { seed, ..cfg.hyper.clone() };
    let vocab = build_vocab(&[&cg, &fg], hyper.min_count)?;
    let mut tagger = Tagger::new(vocab, hyper)?;
    train(&mut tagger, &cg, &fg)?;
    let empty = Dataset::empty(DatasetKind::FG);
    let test_fg = if multiplier == 0 { &empty } else { &corpora.test_fg };
    let (report, _) = evaluate(&tagger, &corpora.test_cg, test_fg, Some(kb), cfg.beam)?;
    info!("cell human={human_size} mult={multiplier} seed={seed}: {report:?}");
    Ok(RunResult {
        human_size,
        multiplier,
        seed,
        report,
    })
}

/// Every (human size, multiplier, seed) run, trained in parallel and
/// aggregated in a fixed order.
pub fn run_grid(cfg: &GridConfig, corpora: &GridCorpora, kb: &KnowledgeBase) -> Result<GridReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &h in &cfg.human_sizes {
        for &m in &cfg.engagement_multipliers {
            for seed in cfg.seeds() {
                jobs.push((h, m, seed));
            }
        }
    }
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(h, m, seed)| run_cell(cfg, corpora, kb, h, m, seed))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &h in &cfg.human_sizes {
        for &m in &cfg.engagement_multipliers {
            let reports: Vec<&EvalReport> = runs
                .iter()
                .filter(|r| r.human_size == h && r.multiplier == m)
                .map(|r| &r.report)
                .collect();
            let names: Vec<&str> = if m == 0 {
                vec!["cgeer"]
            } else {
                std::iter::once("cgeer").chain(FINE_METRICS.iter().copied()).collect()
            };
            let metrics = names
                .into_iter()
                .map(|name| {
                    let values: Vec<f64> = reports.iter().filter_map(|r| metric(r, name)).collect();
                    let (mean, sem) = match values.as_slice() {
                        [] => (f64::NAN, f64::NAN),
                        [only] => (*only, f64::NAN),
                        _ => mean_sem(&values).unwrap_or((f64::NAN, f64::NAN)),
                    };
                    MetricSummary {
                        name: name.to_string(),
                        mean,
                        sem,
                        n_seeds: values.len(),
                        values,
                    }
                })
                .collect();
            cells.push(CellSummary {
                human_size: h,
                multiplier: m,
                metrics,
            });
        }
    }
    Ok(GridReport { runs, cells })
}
