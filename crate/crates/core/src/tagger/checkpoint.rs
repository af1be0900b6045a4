//! JSON checkpoints. Floats are written with round-trip precision so a loaded
//! tagger is bit-identical to the saved one.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ModelParams;
use super::tensor::Tensor;
use super::vocab::Vocab;
use super::{Hyperparams, Tagger};

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    hyper: Hyperparams,
    vocab: Vec<String>,
    min_count: usize,
    arrays: BTreeMap<String, ArrayRecord>,
}

pub fn to_json(tagger: &Tagger) -> Result<String> {
    if !tagger.params.all_finite() {
        return Err(Error::Checkpoint("parameters contain non-finite values".into()));
    }
    let arrays = tagger
        .params
        .named()
        .into_iter()
        .map(|(name, t)| {
            (
                name.to_string(),
                ArrayRecord {
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        version: VERSION,
        hyper: tagger.hyper.clone(),
        vocab: tagger.vocab.tokens().to_vec(),
        min_count: tagger.vocab.min_count(),
        arrays,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn from_json(text: &str) -> Result<Tagger> {
    let mut file: CheckpointFile = serde_json::from_str(text)?;
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", file.version)));
    }
    file.hyper.validate()?;
    let vocab = Vocab::from_tokens(file.vocab, file.min_count)?;
    // shapes are fixed by the hyperparameters and vocabulary size
    let mut params = ModelParams::init_scaled(vocab.len(), &file.hyper, 1.0, &mut rand::rngs::mock::StepRng::new(0, 0));
    for (name, slot) in params.named_mut() {
        let rec = file
            .arrays
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if rec.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, expected {:?}",
                rec.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(&rec.shape, rec.values)
            .ok_or_else(|| Error::Checkpoint(format!("array `{name}` has the wrong number of values")))?;
    }
    if let Some(extra) = file.arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array `{extra}`")));
    }
    Ok(Tagger {
        hyper: file.hyper,
        vocab,
        params,
    })
}

pub fn save_checkpoint(tagger: &Tagger, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = to_json(tagger)?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Tagger> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    std::io::Read::read_to_string(&mut BufReader::new(file), &mut text).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
