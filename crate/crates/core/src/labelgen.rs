//! Projection of played-track metadata back onto utterance tokens.
//!
//! Each metadata field is located in the utterance by scanning every
//! contiguous token span and scoring it with a character-level normalized
//! edit distance. Accepted spans become fine BIO tags; everything else is
//! `Default`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityType, FineTag, LabeledExample, Tag};
use crate::engagement::TrackMetadata;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Minimum accepted confidence, inclusive.
    pub threshold: f64,
    /// Longest token span considered for one field.
    pub max_span_len: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            threshold: 0.8,
            max_span_len: 10,
        }
    }
}

impl ProjectionConfig {
    pub fn new(threshold: f64, max_span_len: usize) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "projection threshold must be in (0, 1], got {threshold}"
            )));
        }
        if max_span_len == 0 {
            return Err(Error::InvalidConfig("max_span_len must be positive".into()));
        }
        Ok(ProjectionConfig {
            threshold,
            max_span_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanMatch {
    pub field: EntityType,
    pub token_range: Range<usize>,
    pub confidence: f64,
}

/// Lowercases, strips apostrophes and punctuation, collapses whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else if ch.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    out
}

/// Character-level Levenshtein distance, two-row formulation.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitution.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn confidence_chars(a: &[char], b: &[char]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over Unicode scalar values.
/// Inputs are expected to be normalized already.
pub fn fuzzy_confidence(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    confidence_chars(&a, &b)
}

/// Best-scoring contiguous span for one metadata field. Ties go to the longer
/// span, then to the leftmost one.
pub fn match_field(
    field: EntityType,
    field_value: &str,
    tokens: &[String],
    cfg: &ProjectionConfig,
) -> Option<SpanMatch> {
    let target: Vec<char> = normalize(field_value).chars().collect();
    if target.is_empty() {
        return None;
    }
    let normalized: Vec<String> = tokens.iter().map(|t| normalize(t)).collect();
    let mut best: Option<SpanMatch> = None;
    for start in 0..tokens.len() {
        let mut joined = String::new();
        for end in start + 1..=tokens.len().min(start + cfg.max_span_len) {
            let tok = &normalized[end - 1];
            if !tok.is_empty() {
                if !joined.is_empty() {
                    joined.push(' ');
                }
                joined.push_str(tok);
            }
            let candidate: Vec<char> = joined.chars().collect();
            let confidence = confidence_chars(&target, &candidate);
            let better = match &best {
                None => true,
                Some(b) => {
                    confidence > b.confidence
                        || (confidence == b.confidence
                            && (end - start > b.token_range.len()
                                || (end - start == b.token_range.len()
                                    && start < b.token_range.start)))
                }
            };
            if better {
                best = Some(SpanMatch {
                    field,
                    token_range: start..end,
                    confidence,
                });
            }
        }
    }
    best.filter(|m| m.confidence >= cfg.threshold)
}

/// Fine labels for `tokens` given the track that was finally played, or
/// `None` when the title cannot be placed.
pub fn project_tags(
    tokens: &[String],
    metadata: &TrackMetadata,
    cfg: &ProjectionConfig,
) -> Option<(Vec<FineTag>, Vec<SpanMatch>)> {
    let mut candidates: Vec<SpanMatch> = [
        (EntityType::Title, metadata.title.as_str()),
        (EntityType::Artist, metadata.artist.as_str()),
        (EntityType::Album, metadata.album.as_str()),
    ]
    .into_iter()
    .filter(|(_, value)| !value.trim().is_empty())
    .filter_map(|(field, value)| match_field(field, value, tokens, cfg))
    .collect();
    // stable sort keeps Title > Artist > Album among equal confidences
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut accepted: Vec<SpanMatch> = Vec::new();
    for cand in candidates {
        let overlaps = accepted.iter().any(|a| {
            a.token_range.start < cand.token_range.end && cand.token_range.start < a.token_range.end
        });
        if !overlaps {
            accepted.push(cand);
        }
    }
    if !accepted.iter().any(|m| m.field == EntityType::Title) {
        return None;
    }

    let mut tags = vec![Tag::Default; tokens.len()];
    for m in &accepted {
        tags[m.token_range.start] = Tag::Begin(m.field);
        for tag in &mut tags[m.token_range.start + 1..m.token_range.end] {
            *tag = Tag::Inside(m.field);
        }
    }
    accepted.sort_by_key(|m| m.token_range.start);
    Some((tags, accepted))
}

/// Mints an engagement-annotated fine example.
pub fn project_labels(
    id: &str,
    tokens: &[String],
    metadata: &TrackMetadata,
    cfg: &ProjectionConfig,
) -> Option<LabeledExample> {
    if tokens.is_empty() {
        return None;
    }
    let (tags, _) = project_tags(tokens, metadata, cfg)?;
    Some(
        LabeledExample::fine(id, tokens.to_vec(), tags)
            .expect("projected spans are disjoint and well-formed"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use EntityType::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn track(title: &str, artist: &str, album: &str) -> TrackMetadata {
        TrackMetadata::new(title, artist, album).unwrap()
    }

    /// Full-matrix Wagner-Fischer, kept separate from the two-row version.
    fn dp_levenshtein(a: &str, b: &str) -> usize {
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
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Play That Song!"), "play that song");
        assert_eq!(normalize("You're Beautiful"), "youre beautiful");
        assert_eq!(normalize("  AC/DC   Back\tin  Black "), "acdc back in black");
        assert_eq!(normalize("!!!"), "");
    }

    #[test]
    fn confidence_of_motivating_pairs() {
        assert_eq!(fuzzy_confidence("abc", "abc"), 1.0);
        assert_eq!(fuzzy_confidence("", ""), 1.0);
        let a = fuzzy_confidence("your beautiful", &normalize("you're beautiful"));
        assert_eq!(dp_levenshtein("your beautiful", "youre beautiful"), 1);
        assert!((a - (1.0 - 1.0 / 15.0)).abs() < 1e-12);
        let b = fuzzy_confidence("this is you came for", "this is what you came for");
        assert_eq!(dp_levenshtein("this is you came for", "this is what you came for"), 5);
        assert!((b - 0.8).abs() < 1e-12);
        assert!(b >= ProjectionConfig::default().threshold);
    }

    #[test]
    fn match_field_examples() {
        let cfg = ProjectionConfig::default();
        let tokens = toks("play play that song train");
        let m = match_field(Title, "Play that song", &tokens, &cfg).unwrap();
        assert_eq!(m.token_range, 1..4);
        assert_eq!(m.confidence, 1.0);
        let m = match_field(Artist, "Train", &tokens, &cfg).unwrap();
        assert_eq!(m.token_range, 4..5);
        assert_eq!(m.confidence, 1.0);
        assert!(match_field(Title, "Zzyzx", &toks("play hello"), &cfg).is_none());
    }

    #[test]
    fn match_field_ties_prefer_longer_then_leftmost() {
        let cfg = ProjectionConfig::default();
        // "one" appears twice, the leftmost exact copy wins
        let m = match_field(Title, "one", &toks("one and one"), &cfg).unwrap();
        assert_eq!(m.token_range, 0..1);
        // an empty-normalizing token extends the span at no cost
        let m = match_field(Title, "one", &toks("play one !"), &cfg).unwrap();
        assert_eq!(m.token_range, 1..3);
    }

    #[test]
    fn project_play_that_song_train() {
        let cfg = ProjectionConfig::default();
        let ex = project_labels(
            "u",
            &toks("play play that song train"),
            &track("Play that song", "Train", ""),
            &cfg,
        )
        .unwrap();
        assert_eq!(
            ex.fine_labels().unwrap(),
            &[
                Tag::Default,
                Tag::Begin(Title),
                Tag::Inside(Title),
                Tag::Inside(Title),
                Tag::Begin(Artist)
            ]
        );
    }

    #[test]
    fn project_the_the_kingdom_of_rain() {
        let cfg = ProjectionConfig::default();
        let ex = project_labels(
            "u",
            &toks("play the the kingdom of rain"),
            &track("Kingdom of Rain", "The The", ""),
            &cfg,
        )
        .unwrap();
        assert_eq!(
            ex.fine_labels().unwrap(),
            &[
                Tag::Default,
                Tag::Begin(Artist),
                Tag::Inside(Artist),
                Tag::Begin(Title),
                Tag::Inside(Title),
                Tag::Inside(Title)
            ]
        );
    }

    #[test]
    fn project_discards_when_title_missing() {
        let cfg = ProjectionConfig::default();
        assert!(project_labels("u", &toks("play train"), &track("Zzyzx Road", "Train", ""), &cfg).is_none());
    }

    #[test]
    fn project_album_is_optional_and_tagged_when_present() {
        let cfg = ProjectionConfig::default();
        let ex = project_labels(
            "u",
            &toks("play yesterday from help"),
            &track("Yesterday", "The Beatles", "Help!"),
            &cfg,
        )
        .unwrap();
        assert_eq!(
            ex.fine_labels().unwrap(),
            &[Tag::Default, Tag::Begin(Title), Tag::Default, Tag::Begin(Album)]
        );
    }

    #[test]
    fn overlapping_lower_confidence_match_is_dropped() {
        let cfg = ProjectionConfig::default();
        // title and album are identical strings; title wins the tie
        let (tags, spans) = project_tags(&toks("play one"), &track("One", "Metallica", "One"), &cfg).unwrap();
        assert_eq!(tags, vec![Tag::Default, Tag::Begin(Title)]);
        assert_eq!(spans.len(), 1);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(ProjectionConfig::new(0.0, 10).is_err());
        assert!(ProjectionConfig::new(1.5, 10).is_err());
        assert!(ProjectionConfig::new(1.0, 10).is_ok());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn confidence_matches_dp_oracle(a in "[a-e ]{0,40}", b in "[a-e ]{0,40}") {
            let expected = {
                let longest = a.chars().count().max(b.chars().count());
                if longest == 0 { 1.0 } else { 1.0 - dp_levenshtein(&a, &b) as f64 / longest as f64 }
            };
            prop_assert_eq!(fuzzy_confidence(&a, &b), expected);
            prop_assert_eq!(fuzzy_confidence(&a, &b), fuzzy_confidence(&b, &a));
            prop_assert_eq!(fuzzy_confidence(&a, &b) == 1.0, a == b);
        }

        #[test]
        fn raising_threshold_never_adds_spans(
            words in proptest::collection::vec("[a-d]{1,4}", 1..8),
            title in "[a-d]{1,4}( [a-d]{1,4})?",
            artist in "[a-d]{1,5}",
            lo in 0.5f64..0.9,
            bump in 0.0f64..0.1,
        ) {
            let meta = track(&title, &artist, "");
            let low = ProjectionConfig::new(lo, 10).unwrap();
            let high = ProjectionConfig::new(lo + bump, 10).unwrap();
            let count = |cfg: &ProjectionConfig| {
                project_tags(&words, &meta, cfg).map(|(t, _)| t.iter().filter(|t| !t.is_default()).count())
            };
            match (count(&low), count(&high)) {
                (None, Some(_)) => prop_assert!(false, "higher threshold accepted an example the lower one rejected"),
                (Some(l), Some(h)) => prop_assert!(h <= l),
                _ => {}
            }
        }
    }
}
