//! Synthetic knowledge base, gold-labeled utterances with ASR-style noise, and
//! engagement logs, so the whole pipeline runs without production data.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{fine_to_coarse, repair_bio, Dataset, DatasetKind, EntityType, FineTag, LabeledExample, Tag};
use crate::engagement::{EngagementEvent, EventKind, TrackMetadata, DEFAULT_POSITIVE_THRESHOLD_MS};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::labelgen::normalize;

const KB_STREAM: u64 = 0;
const CORPUS_STREAM: u64 = 1;
const LOG_STREAM: u64 = 2;

/// Real words used as song titles. They collide with ordinary request words.
pub const COMMON_TITLES: &[&str] = &[
    "one", "something", "train", "the the", "help", "yesterday", "home", "hello", "time", "more", "again", "now",
];

pub const DEFAULT_TEMPLATES: &[&str] = &[
    "play {title} by {artist}",
    "play {title}",
    "{title}",
    "play {artist} {title}",
    "play {title} {artist}",
    "can you play {title} from {artist} new album",
    "play {title} through my music {artist}",
    "put on {artist} {title} please",
    "play {title} from {album}",
    "i want to hear {title} by {artist} off {album}",
    "play the song {title}",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_artists: usize,
    pub songs_per_artist: usize,
    pub albums_per_artist: usize,
    pub templates: Vec<String>,
    /// Per-character substitution probability.
    pub typo_char_rate: f64,
    pub token_drop_rate: f64,
    pub token_dup_rate: f64,
    /// Probability that the assistant plays the requested track.
    pub correct_play_rate: f64,
    pub ambiguous_title_fraction: f64,
    pub seed: u64,
    /// Prefix of generated utterance ids.
    pub id_prefix: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_artists: 100,
            songs_per_artist: 5,
            albums_per_artist: 2,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            typo_char_rate: 0.0,
            token_drop_rate: 0.0,
            token_dup_rate: 0.0,
            correct_play_rate: 0.7,
            ambiguous_title_fraction: 0.1,
            seed: 0,
            id_prefix: "u".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("typo_char_rate", self.typo_char_rate),
            ("token_drop_rate", self.token_drop_rate),
            ("token_dup_rate", self.token_dup_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("correct_play_rate", self.correct_play_rate),
            ("ambiguous_title_fraction", self.ambiguous_title_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.n_artists == 0 || self.songs_per_artist == 0 || self.albums_per_artist == 0 {
            return bad("n_artists, songs_per_artist and albums_per_artist must be positive".into());
        }
        if self.templates.is_empty() {
            return bad("at least one template is required".into());
        }
        for t in &self.templates {
            parse_template(t)?;
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece<'a> {
    Word(&'a str),
    Slot(EntityType),
}

fn parse_template(template: &str) -> Result<Vec<Piece<'_>>> {
    let pieces: Vec<Piece> = template
        .split_whitespace()
        .map(|w| match w {
            "{title}" => Ok(Piece::Slot(EntityType::Title)),
            "{artist}" => Ok(Piece::Slot(EntityType::Artist)),
            "{album}" => Ok(Piece::Slot(EntityType::Album)),
            w if w.contains(['{', '}']) => Err(Error::InvalidConfig(format!("unknown slot `{w}` in template `{template}`"))),
            w => Ok(Piece::Word(w)),
        })
        .collect::<Result<_>>()?;
    if pieces.is_empty() {
        return Err(Error::InvalidConfig("empty template".into()));
    }
    Ok(pieces)
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    // 5 to 7 letters, so a single typo keeps confidence at or above 0.8
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if syllables == 2 || rng.gen_bool(0.5) {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    w
}

/// Fresh multi-word name whose words were never used before.
fn pseudo_name<R: Rng + ?Sized>(rng: &mut R, max_words: usize, used: &mut BTreeSet<String>) -> String {
    let words = rng.gen_range(1..=max_words);
    let mut parts = Vec::with_capacity(words);
    while parts.len() < words {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            parts.push(w);
        }
    }
    parts.join(" ")
}

/// Random catalog of `n_artists × songs_per_artist` tracks.
pub fn gen_kb(cfg: &GeneratorConfig) -> Result<KnowledgeBase> {
    cfg.validate()?;
    let mut rng = cfg.rng(KB_STREAM);
    let mut used: BTreeSet<String> = cfg
        .templates
        .iter()
        .flat_map(|t| t.split_whitespace().map(str::to_string))
        .chain(COMMON_TITLES.iter().flat_map(|t| t.split_whitespace().map(str::to_string)))
        .collect();
    let mut records = Vec::with_capacity(cfg.n_artists * cfg.songs_per_artist);
    for _ in 0..cfg.n_artists {
        let artist = pseudo_name(&mut rng, 2, &mut used);
        let albums: Vec<String> = (0..cfg.albums_per_artist)
            .map(|_| pseudo_name(&mut rng, 2, &mut used))
            .collect();
        let mut titles = BTreeSet::new();
        for song in 0..cfg.songs_per_artist {
            let mut title = pseudo_name(&mut rng, 2, &mut used);
            if rng.gen_bool(cfg.ambiguous_title_fraction) {
                let common = COMMON_TITLES.choose(&mut rng).unwrap().to_string();
                // an artist never has two songs with the same title
                if !titles.contains(&common) {
                    title = common;
                }
            }
            titles.insert(title.clone());
            let album = &albums[song % albums.len()];
            records.push(TrackMetadata::new(&title, &artist, album)?);
        }
    }
    KnowledgeBase::new(records)
}

/// Splits the catalog into two knowledge bases, holding out roughly
/// `held_out_fraction` of the records. Used to build test sets whose entities
/// never occur in training.
pub fn split_kb(kb: &KnowledgeBase, held_out_fraction: f64, seed: u64) -> Result<(KnowledgeBase, KnowledgeBase)> {
    if !(0.0..=1.0).contains(&held_out_fraction) {
        return Err(Error::InvalidConfig(format!("held-out fraction must be in [0, 1], got {held_out_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for rec in kb.records() {
        if rng.gen_bool(held_out_fraction) {
            held.push(rec.clone());
        } else {
            kept.push(rec.clone());
        }
    }
    Ok((KnowledgeBase::new(kept)?, KnowledgeBase::new(held)?))
}

/// Gold corpora plus the record behind each utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub fine: Dataset,
    pub coarse: Dataset,
    pub tracks: Vec<TrackMetadata>,
}

/// Utterances carry normalized text, whatever the catalog casing.
fn words(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(str::to_string).collect()
}

fn instantiate(pieces: &[Piece], track: &TrackMetadata) -> (Vec<String>, Vec<FineTag>) {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for piece in pieces {
        match *piece {
            Piece::Word(w) => {
                tokens.push(w.to_string());
                labels.push(Tag::Default);
            }
            Piece::Slot(kind) => {
                let value = match kind {
                    EntityType::Title => &track.title,
                    EntityType::Artist => &track.artist,
                    EntityType::Album => &track.album,
                };
                for (i, w) in words(value).into_iter().enumerate() {
                    tokens.push(w);
                    labels.push(if i == 0 { Tag::Begin(kind) } else { Tag::Inside(kind) });
                }
            }
        }
    }
    (tokens, labels)
}

/// Typos keep their label, dropped tokens lose theirs, duplicates continue
/// the span they copy.
fn add_noise<R: Rng + ?Sized>(
    tokens: Vec<String>,
    labels: Vec<FineTag>,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> (Vec<String>, Vec<FineTag>) {
    let mut out_t = Vec::with_capacity(tokens.len());
    let mut out_l = Vec::with_capacity(labels.len());
    for (tok, label) in tokens.into_iter().zip(labels) {
        let tok: String = tok
            .chars()
            .map(|c| {
                if cfg.typo_char_rate > 0.0 && rng.gen_bool(cfg.typo_char_rate) {
                    loop {
                        let r = *LETTERS.choose(rng).unwrap() as char;
                        if r != c {
                            break r;
                        }
                    }
                } else {
                    c
                }
            })
            .collect();
        if cfg.token_drop_rate > 0.0 && rng.gen_bool(cfg.token_drop_rate) {
            continue;
        }
        let dup = cfg.token_dup_rate > 0.0 && rng.gen_bool(cfg.token_dup_rate);
        out_t.push(tok.clone());
        out_l.push(label);
        if dup {
            out_t.push(tok);
            out_l.push(match label {
                Tag::Default => Tag::Default,
                Tag::Begin(k) | Tag::Inside(k) => Tag::Inside(k),
            });
        }
    }
    if out_t.is_empty() {
        // keep at least one token; an empty utterance carries no request
        return (vec!["play".to_string()], vec![Tag::Default]);
    }
    repair_bio(&mut out_l);
    (out_t, out_l)
}

/// `n` utterances, each a random template filled with a random record.
pub fn gen_corpus(kb: &KnowledgeBase, cfg: &GeneratorConfig, n: usize) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    if kb.is_empty() {
        return Err(Error::EmptyInput("knowledge base has no records"));
    }
    let templates: Vec<Vec<Piece>> = cfg.templates.iter().map(|t| parse_template(t)).collect::<Result<_>>()?;
    let mut rng = cfg.rng(CORPUS_STREAM);
    let mut fine = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    let mut tracks = Vec::with_capacity(n);
    for i in 0..n {
        let track = kb.records().choose(&mut rng).unwrap().clone();
        let usable: Vec<&Vec<Piece>> = templates
            .iter()
            .filter(|t| !track.album.trim().is_empty() || !t.contains(&Piece::Slot(EntityType::Album)))
            .collect();
        let pieces = usable
            .choose(&mut rng)
            .ok_or_else(|| Error::InvalidConfig("no template fits a record without an album".into()))?;
        let (tokens, labels) = instantiate(pieces, &track);
        let (tokens, labels) = add_noise(tokens, labels, cfg, &mut rng);
        let id = format!("{}{i:06}", cfg.id_prefix);
        let coarse_labels = fine_to_coarse(&labels)?;
        coarse.push(LabeledExample::coarse(id.clone(), tokens.clone(), coarse_labels)?);
        fine.push(LabeledExample::fine(id, tokens, labels)?);
        tracks.push(track);
    }
    Ok(SyntheticCorpus {
        fine: Dataset::new(DatasetKind::FG, fine)?,
        coarse: Dataset::new(DatasetKind::CG, coarse)?,
        tracks,
    })
}

/// One session per utterance. Either the assistant plays the right track and
/// it is listened to, or it plays a distractor that the user abandons before
/// replaying the right track by hand.
pub fn gen_engagement_logs(
    corpus: &SyntheticCorpus,
    kb: &KnowledgeBase,
    cfg: &GeneratorConfig,
) -> Result<Vec<EngagementEvent>> {
    cfg.validate()?;
    if cfg.correct_play_rate < 1.0 && kb.len() < 2 {
        return Err(Error::InsufficientData {
            what: "knowledge-base records for distractors",
            requested: 2,
            available: kb.len(),
        });
    }
    let mut rng = cfg.rng(LOG_STREAM);
    let listen = |rng: &mut ChaCha8Rng| rng.gen_range(DEFAULT_POSITIVE_THRESHOLD_MS..=240_000);
    let mut events = Vec::with_capacity(corpus.fine.len() * 5);
    for (ex, track) in corpus.fine.iter().zip(&corpus.tracks) {
        let sid = ex.id.as_str();
        let mut ts = rng.gen_range(0..1_000u64);
        events.push(EngagementEvent::new(sid, ts, EventKind::UtteranceIssued { tokens: ex.tokens.clone() }));
        ts += 800;
        if rng.gen_bool(cfg.correct_play_rate) {
            events.push(EngagementEvent::new(sid, ts, EventKind::AssistantPlay { track: track.clone() }));
            let played = listen(&mut rng);
            ts += played;
            events.push(EngagementEvent::new(sid, ts, EventKind::PlaybackEnd { duration_ms: played }));
        } else {
            let distractor = loop {
                let d = kb.records().choose(&mut rng).unwrap();
                if !d.same_track(track) {
                    break d.clone();
                }
            };
            events.push(EngagementEvent::new(sid, ts, EventKind::AssistantPlay { track: distractor }));
            ts += rng.gen_range(1_000..DEFAULT_POSITIVE_THRESHOLD_MS);
            events.push(EngagementEvent::new(sid, ts, EventKind::UserAbort));
            ts += rng.gen_range(2_000..10_000);
            events.push(EngagementEvent::new(sid, ts, EventKind::ManualPlay { track: track.clone() }));
            let played = listen(&mut rng);
            ts += played;
            events.push(EngagementEvent::new(sid, ts, EventKind::PlaybackEnd { duration_ms: played }));
        }
    }
    Ok(events)
}
