//! Music knowledge base, relational validation of predicted entities, and
//! KB-driven re-ranking of decoder hypotheses.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EntityType;
use crate::decode::{extract_entities, Hypothesis};
use crate::engagement::TrackMetadata;
use crate::error::{Error, Result};
use crate::labelgen::normalize;

/// Immutable set of tracks with exact lookup by normalized field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    records: Vec<TrackMetadata>,
    by_title: BTreeMap<String, Vec<usize>>,
    by_artist: BTreeMap<String, Vec<usize>>,
    by_album: BTreeMap<String, Vec<usize>>,
}

impl KnowledgeBase {
    /// Builds the indexes. Records with the same normalized triple are kept
    /// once, first occurrence wins.
    pub fn new(records: impl IntoIterator<Item = TrackMetadata>) -> Result<Self> {
        let mut kb = KnowledgeBase::default();
        let mut seen = BTreeSet::new();
        for rec in records {
            rec.validate()?;
            if !seen.insert(rec.normalized_key()) {
                continue;
            }
            let id = kb.records.len();
            let (t, a, b) = rec.normalized_key();
            kb.by_title.entry(t).or_default().push(id);
            kb.by_artist.entry(a).or_default().push(id);
            if !b.is_empty() {
                kb.by_album.entry(b).or_default().push(id);
            }
            kb.records.push(rec);
        }
        Ok(kb)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrackMetadata] {
        &self.records
    }

    pub fn title_keys(&self) -> usize {
        self.by_title.len()
    }

    /// Record ids whose normalized `field` equals `normalize(value)`.
    pub fn lookup(&self, field: EntityType, value: &str) -> &[usize] {
        let index = match field {
            EntityType::Title => &self.by_title,
            EntityType::Artist => &self.by_artist,
            EntityType::Album => &self.by_album,
        };
        index.get(&normalize(value)).map_or(&[], Vec::as_slice)
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::parse(line_no, "line", e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    line_no,
                    "record",
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let rec = TrackMetadata::new(fields[0], fields[1], fields[2])
                .map_err(|e| Error::parse(line_no, "record", e.to_string()))?;
            records.push(rec);
        }
        KnowledgeBase::new(records)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            for field in [&rec.title, &rec.artist, &rec.album] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(Error::parse(i + 1, "record", "field contains a tab or newline"));
                }
            }
            writeln!(writer, "{}\t{}\t{}", rec.title, rec.artist, rec.album)
                .map_err(|e| Error::parse(i + 1, "record", e.to_string()))?;
        }
        Ok(())
    }
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    KnowledgeBase::read_from(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    kb.write_to(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// At most one surface string per entity type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationalQuery {
    pub bindings: BTreeMap<EntityType, String>,
}

impl RelationalQuery {
    pub fn new(bindings: impl IntoIterator<Item = (EntityType, String)>) -> Self {
        RelationalQuery {
            bindings: bindings.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    NotActivated,
    Valid,
    Invalid,
}

/// `Valid` when one record matches every binding after normalization.
pub fn validate(kb: &KnowledgeBase, query: &RelationalQuery) -> ValidationStatus {
    if query.bindings.len() < 2 {
        return ValidationStatus::NotActivated;
    }
    let mut iter = query.bindings.iter();
    let (&first, value) = iter.next().expect("at least two bindings");
    let rest: Vec<(EntityType, String)> = iter.map(|(&k, v)| (k, normalize(v))).collect();
    let matches = kb.lookup(first, value).iter().any(|&id| {
        let (t, a, b) = kb.records[id].normalized_key();
        rest.iter().all(|(kind, v)| match kind {
            EntityType::Title => &t == v,
            EntityType::Artist => &a == v,
            EntityType::Album => &b == v,
        })
    });
    if matches {
        ValidationStatus::Valid
    } else {
        ValidationStatus::Invalid
    }
}

/// Status of one label sequence. Two entities of the same type cannot form
/// a relational tuple, so such a hypothesis is activated but invalid.
pub fn validate_labels(kb: &KnowledgeBase, tokens: &[String], hyp: &Hypothesis<EntityType>) -> Result<ValidationStatus> {
    let entities = extract_entities(tokens, &hyp.labels)?;
    if entities.len() < 2 {
        return Ok(ValidationStatus::NotActivated);
    }
    let mut query = RelationalQuery::default();
    for e in entities {
        if query.bindings.insert(e.kind, e.text).is_some() {
            return Ok(ValidationStatus::Invalid);
        }
    }
    Ok(validate(kb, &query))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankDiagnostics {
    pub id: String,
    /// Some hypothesis had two or more entities.
    pub activated: bool,
    pub statuses: Vec<ValidationStatus>,
    /// 1-based rank of the returned hypothesis.
    pub chosen_rank: usize,
}

impl RerankDiagnostics {
    pub fn chosen(&self) -> usize {
        self.chosen_rank - 1
    }
}

/// Picks the best-scored `Valid` hypothesis, or the original top-1 when none
/// is valid.
pub fn rerank(
    kb: &KnowledgeBase,
    id: &str,
    tokens: &[String],
    hypotheses: &[Hypothesis<EntityType>],
) -> Result<RerankDiagnostics> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("no hypotheses to re-rank"));
    }
    let statuses = hypotheses
        .iter()
        .map(|h| validate_labels(kb, tokens, h))
        .collect::<Result<Vec<_>>>()?;
    let chosen = statuses
        .iter()
        .position(|&s| s == ValidationStatus::Valid)
        .unwrap_or(0);
    Ok(RerankDiagnostics {
        id: id.to_string(),
        activated: statuses.iter().any(|&s| s != ValidationStatus::NotActivated),
        statuses,
        chosen_rank: chosen + 1,
    })
}
