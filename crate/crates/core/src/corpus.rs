//! Label spaces, labeled examples and the JSONL dataset format.
//!
//! Two BIO label spaces are used throughout the crate: a coarse one with a
//! single `musicEntity` type (what human annotators produce) and a fine one
//! that separates titles, artists and albums (what engagement projection
//! produces). Both are instances of [`Tag`], parameterized by the entity
//! alphabet.

use std::fmt;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An entity alphabet. Tag ids are laid out as `Default = 0`, then
/// `B-x = 1 + 2k`, `I-x = 2 + 2k` for the k-th entity kind.
pub trait EntityKind:
    Copy + Eq + Ord + Hash + fmt::Debug + Send + Sync + 'static
{
    const ALL: &'static [Self];

    fn name(self) -> &'static str;

    fn index(self) -> usize {
        Self::ALL
            .iter()
            .position(|&k| k == self)
            .expect("entity kind listed in ALL")
    }
}

/// Coarse entity alphabet: any music reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MusicEntity {
    Entity,
}

impl EntityKind for MusicEntity {
    const ALL: &'static [Self] = &[MusicEntity::Entity];

    fn name(self) -> &'static str {
        "musicEntity"
    }
}

/// Fine entity alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Title,
    Artist,
    Album,
}

impl EntityKind for EntityType {
    const ALL: &'static [Self] = &[EntityType::Title, EntityType::Artist, EntityType::Album];

    fn name(self) -> &'static str {
        match self {
            EntityType::Title => "musicTitle",
            EntityType::Artist => "musicArtist",
            EntityType::Album => "musicAlbum",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A BIO tag over the entity alphabet `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag<E> {
    Default,
    Begin(E),
    Inside(E),
}

pub type CoarseTag = Tag<MusicEntity>;
pub type FineTag = Tag<EntityType>;

impl<E: EntityKind> Tag<E> {
    pub fn count() -> usize {
        1 + 2 * E::ALL.len()
    }

    pub fn id(self) -> usize {
        match self {
            Tag::Default => 0,
            Tag::Begin(e) => 1 + 2 * e.index(),
            Tag::Inside(e) => 2 + 2 * e.index(),
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        if id == 0 {
            return Some(Tag::Default);
        }
        let kind = *E::ALL.get((id - 1) / 2)?;
        Some(if id % 2 == 1 {
            Tag::Begin(kind)
        } else {
            Tag::Inside(kind)
        })
    }

    pub fn entity(self) -> Option<E> {
        match self {
            Tag::Default => None,
            Tag::Begin(e) | Tag::Inside(e) => Some(e),
        }
    }

    pub fn is_default(self) -> bool {
        matches!(self, Tag::Default)
    }

    pub fn name(self) -> String {
        match self {
            Tag::Default => "Default".to_string(),
            Tag::Begin(e) => format!("B-{}", e.name()),
            Tag::Inside(e) => format!("I-{}", e.name()),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "Default" {
            return Some(Tag::Default);
        }
        let (prefix, rest) = s.split_once('-')?;
        let kind = *E::ALL.iter().find(|k| k.name() == rest)?;
        match prefix {
            "B" => Some(Tag::Begin(kind)),
            "I" => Some(Tag::Inside(kind)),
            _ => None,
        }
    }
}

impl<E: EntityKind> fmt::Display for Tag<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Checks that every `I-x` continues a `B-x` or `I-x` of the same kind.
pub fn validate_bio<E: EntityKind>(tags: &[Tag<E>]) -> Result<()> {
    let mut prev: Option<E> = None;
    for (position, tag) in tags.iter().enumerate() {
        if let Tag::Inside(kind) = *tag {
            if prev != Some(kind) {
                return Err(Error::InvalidBio {
                    position,
                    message: format!("{tag} does not continue a {} span", kind.name()),
                });
            }
        }
        prev = tag.entity();
    }
    Ok(())
}

/// Rewrites every `I-x` that does not continue an `x` span into `B-x`.
pub fn repair_bio<E: EntityKind>(tags: &mut [Tag<E>]) {
    let mut prev: Option<E> = None;
    for tag in tags.iter_mut() {
        if let Tag::Inside(kind) = *tag {
            if prev != Some(kind) {
                *tag = Tag::Begin(kind);
            }
        }
        prev = tag.entity();
    }
}

/// Maximal entity spans of a valid BIO sequence, in order of start.
pub fn bio_spans<E: EntityKind>(tags: &[Tag<E>]) -> Vec<(E, Range<usize>)> {
    let mut spans: Vec<(E, Range<usize>)> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        match *tag {
            Tag::Default => {}
            Tag::Begin(kind) => spans.push((kind, i..i + 1)),
            Tag::Inside(kind) => match spans.last_mut() {
                Some((k, range)) if *k == kind && range.end == i => range.end = i + 1,
                _ => spans.push((kind, i..i + 1)),
            },
        }
    }
    spans
}

/// Collapses a fine sequence into the coarse space. Adjacent entities of any
/// fine type merge into one `musicEntity` span.
pub fn fine_to_coarse(labels: &[FineTag]) -> Result<Vec<CoarseTag>> {
    validate_bio(labels)?;
    let mut out = Vec::with_capacity(labels.len());
    let mut inside = false;
    for tag in labels {
        if tag.is_default() {
            out.push(Tag::Default);
            inside = false;
        } else if inside {
            out.push(Tag::Inside(MusicEntity::Entity));
        } else {
            out.push(Tag::Begin(MusicEntity::Entity));
            inside = true;
        }
    }
    Ok(out)
}

/// Provenance of a labeled example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    HumanCoarse,
    EngagementFine,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::HumanCoarse => "human_coarse",
            Source::EngagementFine => "engagement_fine",
        }
    }
}

/// Which label space a dataset lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Human-annotated, coarse-grained.
    CG,
    /// Engagement-annotated (or gold), fine-grained.
    FG,
}

impl DatasetKind {
    pub fn source(self) -> Source {
        match self {
            DatasetKind::CG => Source::HumanCoarse,
            DatasetKind::FG => Source::EngagementFine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    Coarse(Vec<CoarseTag>),
    Fine(Vec<FineTag>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Coarse(v) => v.len(),
            Labels::Fine(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<usize> {
        match self {
            Labels::Coarse(v) => v.iter().map(|t| t.id()).collect(),
            Labels::Fine(v) => v.iter().map(|t| t.id()).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            Labels::Coarse(v) => v.iter().map(|t| t.name()).collect(),
            Labels::Fine(v) => v.iter().map(|t| t.name()).collect(),
        }
    }

    pub fn source(&self) -> Source {
        match self {
            Labels::Coarse(_) => Source::HumanCoarse,
            Labels::Fine(_) => Source::EngagementFine,
        }
    }
}

/// A tokenized utterance with one label per token. The source is implied by
/// the label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: Labels,
    /// Optional per-utterance categorical context feature.
    pub feature: Option<usize>,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, labels: Labels) -> Result<Self> {
        let ex = LabeledExample {
            id: id.into(),
            tokens,
            labels,
            feature: None,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn coarse(id: impl Into<String>, tokens: Vec<String>, labels: Vec<CoarseTag>) -> Result<Self> {
        Self::new(id, tokens, Labels::Coarse(labels))
    }

    pub fn fine(id: impl Into<String>, tokens: Vec<String>, labels: Vec<FineTag>) -> Result<Self> {
        Self::new(id, tokens, Labels::Fine(labels))
    }

    pub fn with_feature(mut self, feature: Option<usize>) -> Self {
        self.feature = feature;
        self
    }

    pub fn source(&self) -> Source {
        self.labels.source()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::EmptyInput("example has no tokens"));
        }
        if self.tokens.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                id: self.id.clone(),
                tokens: self.tokens.len(),
                labels: self.labels.len(),
            });
        }
        match &self.labels {
            Labels::Coarse(v) => validate_bio(v),
            Labels::Fine(v) => validate_bio(v),
        }
    }

    pub fn fine_labels(&self) -> Option<&[FineTag]> {
        match &self.labels {
            Labels::Fine(v) => Some(v),
            Labels::Coarse(_) => None,
        }
    }

    pub fn coarse_labels(&self) -> Option<&[CoarseTag]> {
        match &self.labels {
            Labels::Coarse(v) => Some(v),
            Labels::Fine(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn empty(kind: DatasetKind) -> Self {
        Dataset {
            kind,
            examples: Vec::new(),
        }
    }

    pub fn new(kind: DatasetKind, examples: Vec<LabeledExample>) -> Result<Self> {
        for ex in &examples {
            ex.validate()?;
            if ex.source() != kind.source() {
                return Err(Error::InvalidConfig(format!(
                    "example `{}` has source {} in a {:?} dataset",
                    ex.id,
                    ex.source().as_str(),
                    kind
                )));
            }
        }
        Ok(Dataset { kind, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledExample> {
        self.examples.iter()
    }

    /// Parses JSONL records. Line numbers in errors are 1-based.
    pub fn read_from<R: Read>(reader: R, kind: DatasetKind) -> Result<Self> {
        let mut examples = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::parse(line_no, "record", e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_record(&line, line_no, kind)?);
        }
        Ok(Dataset { kind, examples })
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<()> {
        for ex in &self.examples {
            let record = Record {
                id: ex.id.clone(),
                tokens: ex.tokens.clone(),
                labels: ex.labels.names(),
                source: ex.source(),
                feature: ex.feature,
            };
            serde_json::to_writer(&mut writer, &record)?;
            writer
                .write_all(b"\n")
                .map_err(|e| Error::io("<dataset writer>", e))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    tokens: Vec<String>,
    labels: Vec<String>,
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<usize>,
}

fn parse_record(line: &str, line_no: usize, kind: DatasetKind) -> Result<LabeledExample> {
    let record: Record = serde_json::from_str(line).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .unwrap_or("record")
            .to_string();
        Error::Parse {
            line: line_no,
            field,
            message: msg,
        }
    })?;
    if record.source != kind.source() {
        return Err(Error::parse(
            line_no,
            "source",
            format!("expected {}, found {}", kind.source().as_str(), record.source.as_str()),
        ));
    }
    if record.tokens.is_empty() {
        return Err(Error::parse(line_no, "tokens", "at least one token required"));
    }
    if record.tokens.len() != record.labels.len() {
        return Err(Error::parse(
            line_no,
            "labels",
            format!(
                "{} labels for {} tokens",
                record.labels.len(),
                record.tokens.len()
            ),
        ));
    }
    let labels = match kind {
        DatasetKind::CG => Labels::Coarse(parse_tags(&record.labels, line_no)?),
        DatasetKind::FG => Labels::Fine(parse_tags(&record.labels, line_no)?),
    };
    let ex = LabeledExample {
        id: record.id,
        tokens: record.tokens,
        labels,
        feature: record.feature,
    };
    ex.validate()
        .map_err(|e| Error::parse(line_no, "labels", e.to_string()))?;
    Ok(ex)
}

fn parse_tags<E: EntityKind>(names: &[String], line_no: usize) -> Result<Vec<Tag<E>>> {
    names
        .iter()
        .map(|n| {
            Tag::parse(n).ok_or_else(|| Error::parse(line_no, "labels", format!("unknown label `{n}`")))
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_from(file, kind)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    dataset.write_to(&mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))
}
