//! End-to-end acceptance checks. Each test prints one PASS or FAIL line and
//! then asserts on the same condition.

mod common;

use std::time::{Duration, Instant};

use common::{dp_confidence, exhaustive_top_k, gradient_check, random_lattice, random_normalized, tiny_hyper, tiny_task, toks};
use engagetag::corpus::{bio_spans, load_dataset, save_dataset, DatasetKind, EntityType, LabeledExample, Tag};
use engagetag::decode::beam_search_raw;
use engagetag::engagement::{harvest, segment_sessions, TrackMetadata, DEFAULT_POSITIVE_THRESHOLD_MS};
use engagetag::eval::{evaluate, run_grid, GridConfig, GridCorpora, GridReport, PoolSizes};
use engagetag::kb::{load_kb, save_kb, validate, KnowledgeBase, RelationalQuery, ValidationStatus};
use engagetag::labelgen::{fuzzy_confidence, normalize, project_labels, ProjectionConfig};
use engagetag::synthgen::{gen_corpus, gen_engagement_logs, gen_kb, split_kb, GeneratorConfig};
use engagetag::tagger::checkpoint::to_json;
use engagetag::tagger::tensor::Tensor;
use engagetag::tagger::{build_vocab, load_checkpoint, save_checkpoint, train, Head, Hyperparams, Tagger};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {n} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut heads = [0usize; 2];
    let mut entries = 0;
    for seed in 0..24 {
        let r = gradient_check(seed);
        worst = worst.max(r.max_rel_err);
        heads[(r.head == Head::Fine) as usize] += 1;
        entries += r.checked;
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && heads.iter().all(|&h| h > 0) && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient oracle",
        pass,
        format!("24 configs, {entries} entries, coarse/fine {heads:?}, max rel err {worst:.2e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_2_beam_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cases = 400;
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..cases {
        let t = rng.gen_range(1..=4);
        let l = rng.gen_range(1..=4);
        let lattice = random_lattice(&mut rng, t, l);
        let got = beam_search_raw(&lattice, 5).unwrap();
        ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
        if got != exhaustive_top_k(&lattice, 5) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10);
    verdict(
        2,
        "beam oracle",
        pass,
        format!("{cases} lattices (T, L <= 4), {mismatches} mismatches, {ties} adjacent ties, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_3_fuzzy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = 2000;
    let mut mismatches = 0;
    for _ in 0..pairs {
        let a = random_normalized(&mut rng, 40);
        let b = random_normalized(&mut rng, 40);
        if fuzzy_confidence(&a, &b) != dp_confidence(&a, &b) {
            mismatches += 1;
        }
    }
    let threshold = ProjectionConfig::default().threshold;
    let first = fuzzy_confidence(&normalize("your beautiful"), &normalize("you're beautiful"));
    let second = fuzzy_confidence(&normalize("this is you came for"), &normalize("this is what you came for"));
    let pass = mismatches == 0
        && (first - (1.0 - 1.0 / 15.0)).abs() < 1e-12
        && (second - 0.8).abs() < 1e-12
        && first >= threshold
        && second >= threshold;
    verdict(
        3,
        "fuzzy-matching oracle",
        pass,
        format!("{pairs} random pairs, {mismatches} mismatches; worked pairs {first:.4} and {second:.4} vs threshold {threshold}"),
    );
}

/// Utterances whose harvested and projected labels equal the gold labels.
fn closure(gen: &GeneratorConfig, n: usize) -> usize {
    let kb = gen_kb(gen).unwrap();
    let corpus = gen_corpus(&kb, gen, n).unwrap();
    let events = gen_engagement_logs(&corpus, &kb, gen).unwrap();
    let (pairs, _) = harvest(&segment_sessions(events).sessions, DEFAULT_POSITIVE_THRESHOLD_MS);
    let cfg = ProjectionConfig::default();
    corpus
        .fine
        .iter()
        .filter(|gold| {
            pairs
                .iter()
                .find(|p| p.id == gold.id)
                .and_then(|p| project_labels(&p.id, &p.tokens, &p.track, &cfg))
                .is_some_and(|ex| ex.labels == gold.labels)
        })
        .count()
}

#[test]
fn criterion_4_pipeline_closure() {
    // observed on the first green run of this fixed-seed check
    const PINNED_NOISY: usize = 958;
    let n = 1000;
    let clean = GeneratorConfig { ambiguous_title_fraction: 0.0, seed: 404, ..GeneratorConfig::default() };
    let noisy = GeneratorConfig { typo_char_rate: 0.05, ..clean.clone() };
    let exact = closure(&clean, n);
    let with_typos = closure(&noisy, n);
    let rate = with_typos as f64 / n as f64;
    let pass = exact == n && rate >= 0.9 && with_typos == PINNED_NOISY;
    verdict(
        4,
        "pipeline closure",
        pass,
        format!("clean {exact}/{n}; typo 0.05 {with_typos}/{n} ({:.1}%, pinned {PINNED_NOISY})", 100.0 * rate),
    );
}

fn noisy_generator() -> GeneratorConfig {
    GeneratorConfig { typo_char_rate: 0.02, token_drop_rate: 0.02, token_dup_rate: 0.02, ..GeneratorConfig::default() }
}

fn mean_of(report: &GridReport, h: usize, m: usize, metric: &str) -> f64 {
    report.cell(h, m).and_then(|c| c.get(metric)).map(|s| s.mean).unwrap_or(f64::NAN)
}

#[test]
fn criterion_5_multi_task_trend() {
    let start = Instant::now();
    let gen = noisy_generator();
    let kb = gen_kb(&gen).unwrap();
    let cfg = GridConfig::default();
    assert_eq!((cfg.human_sizes.clone(), cfg.engagement_multipliers.clone()), (vec![200, 1000], vec![0, 1, 2]));
    assert_eq!((cfg.engagement_unit_size, cfg.n_seeds), (2000, 5));
    let corpora = GridCorpora::synthesize(&kb, &gen, PoolSizes::for_grid(&cfg, 500)).unwrap();
    let report = run_grid(&cfg, &corpora, &kb).unwrap();
    let elapsed = start.elapsed();

    let mut pass = elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for &h in &cfg.human_sizes {
        let cg: Vec<f64> = (0..3).map(|m| 100.0 * mean_of(&report, h, m, "cgeer")).collect();
        let fg1 = 100.0 * mean_of(&report, h, 1, "fgeer");
        let fg2 = 100.0 * mean_of(&report, h, 2, "fgeer");
        pass &= cg[1] < cg[0] && fg2 <= fg1;
        parts.push(format!(
            "h={h}: CGEER 0x {:.2} 1x {:.2} 2x {:.2}, FGEER 1x {fg1:.2} 2x {fg2:.2}",
            cg[0], cg[1], cg[2]
        ));
    }
    verdict(5, "multi-task trend", pass, format!("{}; {elapsed:.0?}", parts.join("; ")));
}

/// Gold title/artist/album bindings of one utterance.
fn gold_query(ex: &LabeledExample) -> RelationalQuery {
    let labels = ex.fine_labels().unwrap();
    RelationalQuery::new(
        bio_spans(labels)
            .into_iter()
            .map(|(kind, span): (EntityType, _)| (kind, ex.tokens[span].join(" "))),
    )
}

#[test]
fn criterion_6_kb_rerank() {
    let gen = noisy_generator();
    let kb = gen_kb(&gen).unwrap();
    // the tagger never sees the held-out records, so their entity order has
    // to come from context or from the KB
    let (seen, held_out) = split_kb(&kb, 0.3, 99).unwrap();
    let cfg = GridConfig { human_sizes: vec![1000], engagement_multipliers: vec![1], ..GridConfig::default() };
    let mut corpora = GridCorpora::synthesize(&seen, &gen, PoolSizes::for_grid(&cfg, 500)).unwrap();
    let test_gen = GeneratorConfig { seed: 777, ..GeneratorConfig::default() };
    let test = gen_corpus(&held_out, &test_gen, 500).unwrap().fine;
    let resolvable = test
        .iter()
        .filter(|ex| bio_spans(ex.fine_labels().unwrap()).len() >= 2 && validate(&kb, &gold_query(ex)) == ValidationStatus::Valid)
        .count();
    let two_entity = resolvable as f64 / test.len() as f64;
    corpora.test_fg = test;
    let report = run_grid(&cfg, &corpora, &kb).unwrap();
    let cell = report.cell(1000, 1).unwrap();
    let without = cell.get("fgeer_activated").unwrap();
    let with = cell.get("fgeer_kb_activated").unwrap();
    let reduction = 1.0 - with.mean / without.mean;
    let improved = without.values.iter().zip(&with.values).filter(|(a, b)| b < a).count();
    let pass = two_entity >= 0.15 && without.n_seeds == 5 && with.mean < without.mean && reduction >= 0.2;
    verdict(
        6,
        "KB re-ranking",
        pass,
        format!(
            "{:.1}% two-entity KB-resolvable; activated FGEER {:.2}% -> {:.2}% with KB ({:.1}% relative reduction, {improved}/{} seeds improved)",
            100.0 * two_entity,
            100.0 * without.mean,
            100.0 * with.mean,
            100.0 * reduction,
            without.n_seeds
        ),
    );
}

#[test]
fn criterion_7_objective_fixture_and_gating() {
    let cg = engagetag::corpus::Dataset::new(
        DatasetKind::CG,
        vec![LabeledExample::coarse("x", toks("play"), vec![Tag::Default]).unwrap()],
    )
    .unwrap();
    let mut tagger = Tagger::new(build_vocab(&[&cg], 1).unwrap(), tiny_hyper(0)).unwrap();
    tagger.params.coarse_head.weight.data_mut().fill(0.0);
    // softmax(ln 2, 0, 0) = (0.5, 0.25, 0.25)
    tagger.params.coarse_head.bias = Tensor::from_vec(&[3], vec![2f64.ln(), 0.0, 0.0]).unwrap();
    let loss = tagger.loss(&cg.examples, Head::Coarse, 0.0).unwrap();
    let loss_err = (loss.total - std::f64::consts::LN_2).abs();

    let (cg, fg) = tiny_task(70);
    let hyper = Hyperparams { sample_weight_cg: 0.0, sample_weight_fg: 1.0, ..tiny_hyper(70) };
    let mut model = Tagger::new(build_vocab(&[&cg, &fg], 1).unwrap(), hyper).unwrap();
    let before = model.params.coarse_head.clone();
    let fine_before = model.params.fine_head.clone();
    let log = train(&mut model, &cg, &fg).unwrap();
    let same_bits = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let coarse_frozen = same_bits(&before.weight, &model.params.coarse_head.weight)
        && same_bits(&before.bias, &model.params.coarse_head.bias);
    let fine_moved = fine_before != model.params.fine_head;
    let fine_batches: usize = log.epochs.iter().map(|e| e.fine_batches).sum();
    let pass = loss_err < 1e-12 && coarse_frozen && fine_moved && fine_batches > 0;
    verdict(
        7,
        "objective fixture and head gating",
        pass,
        format!(
            "loss {:.15} (|err| {loss_err:.1e}); {fine_batches} fine batches, coarse head bit-identical: {coarse_frozen}",
            loss.total
        ),
    );
}

fn train_and_eval(dir: &std::path::Path, tag: &str) -> (String, String) {
    let gen = GeneratorConfig { n_artists: 12, typo_char_rate: 0.02, seed: 5, ..GeneratorConfig::default() };
    let kb = gen_kb(&gen).unwrap();
    let cfg = GridConfig { engagement_unit_size: 150, human_sizes: vec![150], ..GridConfig::default() };
    let corpora = GridCorpora::synthesize(&kb, &gen, PoolSizes::for_grid(&cfg, 60)).unwrap();
    let hyper = Hyperparams { epochs: 3, seed: 17, ..Hyperparams::default() };
    let vocab = build_vocab(&[&corpora.cg_pool, &corpora.fg_pool], hyper.min_count).unwrap();
    let mut tagger = Tagger::new(vocab, hyper).unwrap();
    let log = train(&mut tagger, &corpora.cg_pool, &corpora.fg_pool).unwrap();
    let (report, diags) = evaluate(&tagger, &corpora.test_cg, &corpora.test_fg, Some(&kb), 5).unwrap();
    let path = dir.join(format!("{tag}.json"));
    save_checkpoint(&tagger, &path).unwrap();
    let eval = serde_json::to_string(&(log, report, diags)).unwrap();
    (std::fs::read_to_string(path).unwrap(), eval)
}

#[test]
fn criterion_8_determinism_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt_a, eval_a) = train_and_eval(dir.path(), "a");
    let (ckpt_b, eval_b) = train_and_eval(dir.path(), "b");
    let deterministic = ckpt_a == ckpt_b && eval_a == eval_b;

    let loaded = load_checkpoint(dir.path().join("a.json")).unwrap();
    let ckpt_exact = to_json(&loaded).unwrap() == ckpt_a;

    let gen = GeneratorConfig { typo_char_rate: 0.05, token_dup_rate: 0.05, seed: 6, ..GeneratorConfig::default() };
    let kb = gen_kb(&gen).unwrap();
    let corpus = gen_corpus(&kb, &gen, 300).unwrap();
    let mut data_exact = true;
    for ds in [&corpus.fine, &corpus.coarse] {
        let path = dir.path().join("data.jsonl");
        save_dataset(ds, &path).unwrap();
        data_exact &= load_dataset(&path, ds.kind).unwrap() == *ds;
    }
    let kb_path = dir.path().join("kb.tsv");
    save_kb(&kb, &kb_path).unwrap();
    let with_empty_album = KnowledgeBase::new([TrackMetadata::new("One", "Metallica", "").unwrap()]).unwrap();
    let empty_path = dir.path().join("kb2.tsv");
    save_kb(&with_empty_album, &empty_path).unwrap();
    let kb_exact = load_kb(&kb_path).unwrap() == kb && load_kb(&empty_path).unwrap() == with_empty_album;

    let pass = deterministic && ckpt_exact && data_exact && kb_exact;
    verdict(
        8,
        "determinism and round trips",
        pass,
        format!(
            "repeat run identical: {deterministic} ({} checkpoint bytes); checkpoint {ckpt_exact}, datasets {data_exact}, KB {kb_exact}",
            ckpt_a.len()
        ),
    );
}
