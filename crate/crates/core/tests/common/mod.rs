#![allow(dead_code)]

use engagetag::corpus::Dataset;
use engagetag::decode::Lattice;
use engagetag::engagement::TrackMetadata;
use engagetag::kb::KnowledgeBase;
use engagetag::synthgen::{gen_corpus, gen_kb, GeneratorConfig};
use engagetag::tagger::network::{batch_objective, DropoutMasks, Encoded};
use engagetag::tagger::{Head, Hyperparams, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor for relative error; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug)]
pub struct GradCheck {
    pub head: Head,
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Draws a tiny random model and batch, then compares every analytic
/// gradient entry with a central difference.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.gen_range(3..=20);
    let use_features = rng.gen_bool(0.3);
    let hyper = Hyperparams {
        embed_dim: rng.gen_range(1..=8),
        hidden: rng.gen_range(1..=8),
        proj_dim: rng.gen_range(1..=8),
        feature_dim: if use_features { rng.gen_range(1..=3) } else { 0 },
        n_features: if use_features { 3 } else { 0 },
        ..Hyperparams::default()
    };
    let head = if seed % 2 == 0 { Head::Coarse } else { Head::Fine };
    let lambda = if rng.gen_bool(0.5) { 0.0 } else { 0.01 };
    // larger weights than the default init so the nonlinearities are exercised
    let mut params = ModelParams::init_scaled(vocab, &hyper, 0.5, &mut rng);
    for (name, t) in params.named_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let batch_len = rng.gen_range(1..=3);
    let batch: Vec<Encoded> = (0..batch_len)
        .map(|_| {
            let len = rng.gen_range(1..=6);
            Encoded {
                ids: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
                feature: use_features.then(|| rng.gen_range(0..3)),
                gold: (0..len).map(|_| rng.gen_range(0..head.num_labels())).collect(),
            }
        })
        .collect();
    let masks: Option<Vec<DropoutMasks>> = rng.gen_bool(0.5).then(|| {
        batch
            .iter()
            .map(|e| DropoutMasks::sample(e.ids.len(), hyper.hidden, 0.25, &mut rng))
            .collect()
    });

    let objective = |p: &ModelParams| {
        let (ce, l2) = batch_objective(p, &batch, head, lambda, masks.as_deref(), None).unwrap();
        ce + l2
    };
    let mut analytic = params.zeros_like();
    batch_objective(&params, &batch, head, lambda, masks.as_deref(), Some(&mut analytic)).unwrap();

    let names: Vec<&'static str> = params.named().iter().map(|(n, _)| *n).collect();
    let mut result = GradCheck { head, max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for (k, name) in names.iter().enumerate() {
        let n = params.named()[k].1.len();
        for i in 0..n {
            let orig = params.named()[k].1.data()[i];
            params.named_mut()[k].1.data_mut()[i] = orig + FD_EPS;
            let up = objective(&params);
            params.named_mut()[k].1.data_mut()[i] = orig - FD_EPS;
            let down = objective(&params);
            params.named_mut()[k].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic.named()[k].1.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            result.checked += 1;
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
                result.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    result
}

/// Log probabilities rounded to multiples of 2^-22. Sums of a few of them are
/// exact in f64, so tied sequences really tie whatever the summation order.
/// Weights come from 1..=4, which makes ties common.
pub fn random_lattice<R: Rng>(rng: &mut R, t: usize, l: usize) -> Lattice {
    const Q: f64 = (1u64 << 22) as f64;
    let rows = (0..t)
        .map(|_| {
            let w: Vec<f64> = (0..l).map(|_| rng.gen_range(1..=4) as f64).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|x| ((x / total).ln() * Q).round() / Q).collect()
        })
        .collect();
    Lattice::new(rows).unwrap()
}

/// Every `L^T` sequence scored by its mean log probability, best first, ties
/// in ascending lexicographic order; truncated to `k`.
pub fn exhaustive_top_k(lattice: &Lattice, k: usize) -> Vec<(Vec<usize>, f64)> {
    let t = lattice.len();
    let l = lattice.width();
    let mut all = Vec::new();
    for code in 0..l.pow(t as u32) {
        let mut ids = vec![0; t];
        let mut c = code;
        for pos in (0..t).rev() {
            ids[pos] = c % l;
            c /= l;
        }
        let score = ids.iter().enumerate().map(|(p, &j)| lattice.rows()[p][j]).sum::<f64>() / t as f64;
        all.push((ids, score));
    }
    // enumeration is already lexicographic and the sort is stable
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    all.truncate(k);
    all
}

/// Textbook full-matrix edit distance with unit costs.
pub fn dp_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn dp_confidence(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        1.0
    } else {
        1.0 - dp_levenshtein(a, b) as f64 / n as f64
    }
}

/// Normalized text over a small alphabet (so pairs share characters), with
/// single spaces between words, up to `max_len` characters.
pub fn random_normalized<R: Rng>(rng: &mut R, max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    let mut s = String::with_capacity(len);
    while s.len() < len {
        let c = if !s.is_empty() && !s.ends_with(' ') && s.len() + 1 < len && rng.gen_bool(0.15) {
            ' '
        } else {
            (b'a' + rng.gen_range(0..6)) as char
        };
        s.push(c);
    }
    s
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Small catalog used by the pipeline and CLI fixtures.
pub fn beatles_kb() -> KnowledgeBase {
    KnowledgeBase::new([
        TrackMetadata::new("Something", "The Beatles", "Abbey Road").unwrap(),
        TrackMetadata::new("Yesterday", "The Beatles", "Help!").unwrap(),
        TrackMetadata::new("Something", "Sparklehorse", "").unwrap(),
        TrackMetadata::new("Train in Vain", "The Clash", "London Calling").unwrap(),
    ])
    .unwrap()
}

/// A few hundred noise-free utterances over a tiny catalog, split into a
/// coarse and a fine set with disjoint ids.
pub fn tiny_task(seed: u64) -> (Dataset, Dataset) {
    let gen = GeneratorConfig { n_artists: 6, songs_per_artist: 3, seed, ..GeneratorConfig::default() };
    let kb = gen_kb(&gen).unwrap();
    let coarse = gen_corpus(&kb, &GeneratorConfig { id_prefix: "c".into(), ..gen.clone() }, 120).unwrap();
    let fine = gen_corpus(&kb, &GeneratorConfig { id_prefix: "f".into(), seed: seed + 1, ..gen }, 120).unwrap();
    (coarse.coarse, fine.fine)
}

pub fn tiny_hyper(seed: u64) -> Hyperparams {
    Hyperparams { embed_dim: 8, hidden: 8, proj_dim: 8, epochs: 3, seed, ..Hyperparams::default() }
}
