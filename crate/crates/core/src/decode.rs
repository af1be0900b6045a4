//! Top-k label sequences from a per-token probability lattice, and entity
//! extraction from a label sequence.

use std::cmp::Ordering;
use std::ops::Range;

use serde::Serialize;

use crate::corpus::{bio_spans, repair_bio, validate_bio, EntityKind, Tag};
use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-6;

/// `T × L` log probabilities for one head. Every row is a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    rows: Vec<Vec<f64>>,
}

impl Lattice {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != width || width == 0 {
                return Err(Error::InvalidConfig(format!("lattice row {t} has {} columns, expected {width}", row.len())));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if !(lse.abs() <= ROW_TOLERANCE) {
                return Err(Error::InvalidConfig(format!("lattice row {t} log-sum-exp is {lse}, expected 0")));
            }
        }
        Ok(Lattice { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Mean per-token log probability of a raw tag-id sequence, summed left
    /// to right.
    pub fn score(&self, ids: &[usize]) -> f64 {
        let sum: f64 = ids.iter().zip(&self.rows).map(|(&j, row)| row[j]).sum();
        if ids.is_empty() {
            0.0
        } else {
            sum / ids.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis<E> {
    /// Tag ids as ranked, before BIO repair.
    pub raw: Vec<usize>,
    #[serde(skip)]
    pub labels: Vec<Tag<E>>,
    /// Mean per-token log probability of `raw`.
    pub score: f64,
}

impl<E: EntityKind> Hypothesis<E> {
    fn from_raw(raw: Vec<usize>, score: f64) -> Self {
        let mut labels: Vec<Tag<E>> = raw.iter().map(|&j| Tag::from_id(j).expect("id within label space")).collect();
        repair_bio(&mut labels);
        Hypothesis { raw, labels, score }
    }
}

/// Descending score, then ascending lexicographic id sequence.
fn rank(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// The `beam` best raw id sequences of any lattice with their mean log
/// probability. Prefixes are kept by cumulative sum; with no transition
/// scores this is exact top-k, ties included, because adding the same suffix
/// preserves the prefix order.
pub fn beam_search_raw(lattice: &Lattice, beam: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam width must be at least 1".into()));
    }
    let mut prefixes: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new())];
    for row in lattice.rows() {
        let mut next = Vec::with_capacity(prefixes.len() * row.len());
        for (sum, ids) in &prefixes {
            for (j, &lp) in row.iter().enumerate() {
                let mut ids = ids.clone();
                ids.push(j);
                next.push((sum + lp, ids));
            }
        }
        next.sort_by(rank);
        next.truncate(beam);
        prefixes = next;
    }
    let t = lattice.len().max(1) as f64;
    Ok(prefixes.into_iter().map(|(sum, ids)| (ids, sum / t)).collect())
}

/// Top-k hypotheses in the label space of `E`, ranked before BIO repair.
pub fn beam_search<E: EntityKind>(lattice: &Lattice, beam: usize) -> Result<Vec<Hypothesis<E>>> {
    let labels = Tag::<E>::count();
    if !lattice.is_empty() && lattice.width() != labels {
        return Err(Error::InvalidConfig(format!(
            "lattice has {} columns but the label space has {labels}",
            lattice.width()
        )));
    }
    Ok(beam_search_raw(lattice, beam)?
        .into_iter()
        .map(|(ids, score)| Hypothesis::from_raw(ids, score))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Entity<E> {
    pub kind: E,
    pub text: String,
    pub span: Range<usize>,
}

/// One entity per maximal B/I run, in order of start; the surface is the
/// space-joined tokens.
pub fn extract_entities<E: EntityKind>(tokens: &[String], labels: &[Tag<E>]) -> Result<Vec<Entity<E>>> {
    if tokens.len() != labels.len() {
        return Err(Error::LengthMismatch {
            id: String::new(),
            tokens: tokens.len(),
            labels: labels.len(),
        });
    }
    validate_bio(labels)?;
    Ok(bio_spans(labels)
        .into_iter()
        .map(|(kind, span)| Entity {
            kind,
            text: tokens[span.clone()].join(" "),
            span,
        })
        .collect())
}
