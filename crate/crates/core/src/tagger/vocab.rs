use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::corpus::Dataset;
use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token to id map. Ids are dense; `<pad>` is 0 and `<unk>` is 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Checkpoint("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Tokens with frequency ≥ `min_count` get ids in order of decreasing
/// frequency, ties broken by the token string.
pub fn build_vocab(datasets: &[&Dataset], min_count: usize) -> Result<Vocab> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyInput("no examples to build a vocabulary from"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ds in datasets {
        for ex in ds.iter() {
            for tok in &ex.tokens {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(tok, n)| n >= min_count.max(1) && tok != PAD_TOKEN && tok != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = [PAD_TOKEN, UNK_TOKEN]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(str::to_string)
        .collect();
    Vocab::from_tokens(tokens, min_count)
}

/// Overwrites embedding rows from a textual `token v1 ... vd` file. Rows not
/// in the file keep their current values; `<unk>` becomes the mean of the
/// loaded rows. A leading `count dim` header line is skipped.
pub fn load_pretrained_vectors(path: impl AsRef<Path>, vocab: &Vocab, init: &Tensor) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dim = init.cols();
    let mut out = init.clone();
    let mut sum = vec![0.0; dim];
    let mut loaded = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if idx == 0 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        let row: Vec<f64> = values
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| Error::parse(line_no, "vector", e.to_string())))
            .collect::<Result<_>>()?;
        let Some(id) = vocab.get(token) else { continue };
        if id == PAD || id == UNK {
            continue;
        }
        out.row_mut(id).copy_from_slice(&row);
        for (s, v) in sum.iter_mut().zip(&row) {
            *s += v;
        }
        loaded += 1;
    }
    if loaded > 0 {
        let unk = out.row_mut(UNK);
        for (u, s) in unk.iter_mut().zip(&sum) {
            *u = s / loaded as f64;
        }
    }
    Ok(out)
}
