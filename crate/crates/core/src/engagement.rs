//! Engagement signals from playback sessions.
//!
//! A session starts with the user's utterance and records what the assistant
//! played and what the user did next. Two patterns yield trustworthy labels:
//! the assistant's choice was listened to past the threshold (positive), or
//! the user abandoned it and manually played something else past the
//! threshold (negative, corrected).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgen::normalize;

pub const DEFAULT_POSITIVE_THRESHOLD_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrackMetadata {
    pub title: String,
    pub artist: String,
    #[serde(default)]
    pub album: String,
}

impl TrackMetadata {
    pub fn new(title: &str, artist: &str, album: &str) -> Result<Self> {
        let track = TrackMetadata {
            title: title.to_string(),
            artist: artist.to_string(),
            album: album.to_string(),
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self.title.trim().is_empty() || self.artist.trim().is_empty() {
            return Err(Error::InvalidConfig(
                "track title and artist must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Field-wise normalized form used for identity comparisons.
    pub fn normalized_key(&self) -> (String, String, String) {
        (
            normalize(&self.title),
            normalize(&self.artist),
            normalize(&self.album),
        )
    }

    pub fn same_track(&self, other: &TrackMetadata) -> bool {
        self.normalized_key() == other.normalized_key()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    UtteranceIssued { tokens: Vec<String> },
    AssistantPlay { track: TrackMetadata },
    AssistantNotFound,
    UserAbort,
    ManualPlay { track: TrackMetadata },
    PlaybackEnd { duration_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementEvent {
    #[serde(rename = "session")]
    pub session_id: String,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl EngagementEvent {
    pub fn new(session_id: impl Into<String>, ts_ms: u64, kind: EventKind) -> Self {
        EngagementEvent {
            session_id: session_id.into(),
            ts_ms,
            kind,
        }
    }
}

/// Events of one session in timestamp order, starting at the utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub events: Vec<EngagementEvent>,
}

impl Session {
    pub fn utterance(&self) -> &[String] {
        match self.events.first().map(|e| &e.kind) {
            Some(EventKind::UtteranceIssued { tokens }) => tokens,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Positive(TrackMetadata),
    NegativeCorrected(TrackMetadata),
}

impl Verdict {
    pub fn track(&self) -> &TrackMetadata {
        match self {
            Verdict::Positive(t) | Verdict::NegativeCorrected(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signal {
    pub verdict: Verdict,
    pub utterance_tokens: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segmented {
    pub sessions: Vec<Session>,
    /// Sessions without any `UtteranceIssued` event.
    pub dropped: usize,
}

/// Groups events by session id (output sorted by id) and orders each session
/// by timestamp, keeping arrival order for ties. Events preceding the first
/// utterance are discarded.
pub fn segment_sessions(events: impl IntoIterator<Item = EngagementEvent>) -> Segmented {
    let mut by_id: BTreeMap<String, Vec<EngagementEvent>> = BTreeMap::new();
    for ev in events {
        by_id.entry(ev.session_id.clone()).or_default().push(ev);
    }
    let mut out = Segmented::default();
    for (id, mut events) in by_id {
        events.sort_by_key(|e| e.ts_ms);
        let Some(start) = events
            .iter()
            .position(|e| matches!(e.kind, EventKind::UtteranceIssued { .. }))
        else {
            log::warn!("session {id}: no utterance, dropped");
            out.dropped += 1;
            continue;
        };
        events.drain(..start);
        out.sessions.push(Session { id, events });
    }
    out
}

#[derive(Clone, Copy)]
enum Origin {
    Assistant,
    Manual,
}

/// Decides whether a session carries a usable engagement signal.
///
/// A positive pattern anywhere in the session takes precedence over a
/// negative one, so that raising the threshold can never turn a session
/// positive. Among patterns of the same kind the first one wins.
pub fn classify_signal(session: &Session, positive_threshold_ms: u64) -> Option<Signal> {
    let utterance = match session.events.first().map(|e| &e.kind) {
        Some(EventKind::UtteranceIssued { tokens }) => tokens,
        _ => return None,
    };

    let mut playing: Option<(Origin, &TrackMetadata, u64)> = None;
    let mut aborted: Option<&TrackMetadata> = None;
    let mut not_found = false;
    let mut corrected: Option<&TrackMetadata> = None;

    for ev in &session.events[1..] {
        match &ev.kind {
            EventKind::UtteranceIssued { .. } => {}
            EventKind::AssistantPlay { track } => playing = Some((Origin::Assistant, track, ev.ts_ms)),
            EventKind::ManualPlay { track } => playing = Some((Origin::Manual, track, ev.ts_ms)),
            EventKind::AssistantNotFound => {
                not_found = true;
                playing = None;
            }
            EventKind::UserAbort => {
                if let Some((Origin::Assistant, track, started)) = playing {
                    if ev.ts_ms.saturating_sub(started) < positive_threshold_ms {
                        aborted = Some(track);
                    }
                }
                playing = None;
            }
            EventKind::PlaybackEnd { duration_ms } => {
                let long_enough = *duration_ms >= positive_threshold_ms;
                match playing.take() {
                    Some((Origin::Assistant, track, _)) if long_enough => {
                        return Some(Signal {
                            verdict: Verdict::Positive(track.clone()),
                            utterance_tokens: utterance.clone(),
                        });
                    }
                    Some((Origin::Manual, track, _)) if long_enough && corrected.is_none() => {
                        let is_correction = match aborted {
                            Some(wrong) => !wrong.same_track(track),
                            None => not_found,
                        };
                        if is_correction {
                            corrected = Some(track);
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    corrected.map(|track| Signal {
        verdict: Verdict::NegativeCorrected(track.clone()),
        utterance_tokens: utterance.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestedPair {
    pub id: String,
    pub tokens: Vec<String>,
    pub track: TrackMetadata,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestCounts {
    pub positive: usize,
    pub negative: usize,
    pub skipped: usize,
}

/// One (utterance, finally accepted track) pair per session with a signal,
/// sorted by session id.
pub fn harvest(sessions: &[Session], positive_threshold_ms: u64) -> (Vec<HarvestedPair>, HarvestCounts) {
    let mut counts = HarvestCounts::default();
    let mut pairs = Vec::new();
    for session in sessions {
        match classify_signal(session, positive_threshold_ms) {
            Some(signal) => {
                match signal.verdict {
                    Verdict::Positive(_) => counts.positive += 1,
                    Verdict::NegativeCorrected(_) => counts.negative += 1,
                }
                pairs.push(HarvestedPair {
                    id: session.id.clone(),
                    tokens: signal.utterance_tokens,
                    track: signal.verdict.track().clone(),
                });
            }
            None => counts.skipped += 1,
        }
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    (pairs, counts)
}

pub fn read_events<R: Read>(reader: R) -> Result<Vec<EngagementEvent>> {
    let mut events = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::parse(idx + 1, "event", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: EngagementEvent =
            serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, "event", e.to_string()))?;
        events.push(ev);
    }
    Ok(events)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<EngagementEvent>> {
    let path = path.as_ref();
    read_events(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_events(events: &[EngagementEvent], path: impl AsRef<Path>) -> Result<()> {
    save_jsonl(events, path)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<HarvestedPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, "pair", e.to_string()))?,
        );
    }
    Ok(pairs)
}

pub fn save_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_jsonl(&mut writer, items)?;
    writer.flush().map_err(|e| Error::io(path, e))
}
