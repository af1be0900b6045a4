//! Multi-task BiLSTM sequence tagger with a coarse and a fine softmax head.
//!
//! The embedding, both recurrent layers and the projection are shared. Each
//! mini-batch comes from a single source and only trains the head of that
//! source, so the loss of a batch is the cross-entropy of exactly one head
//! plus an L2 penalty on the weights that batch updates.

pub mod checkpoint;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{repair_bio, EntityKind, EntityType, LabeledExample, MusicEntity, Source, Tag};
use crate::decode::Lattice;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{DropoutMasks, Encoded, ForwardTrace};
pub use params::ModelParams;
pub use train::{train, EpochLog, TrainLog};
pub use vocab::{build_vocab, load_pretrained_vectors, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Coarse,
    Fine,
}

impl Head {
    pub fn num_labels(self) -> usize {
        match self {
            Head::Coarse => Tag::<MusicEntity>::count(),
            Head::Fine => Tag::<EntityType>::count(),
        }
    }

    pub fn for_source(source: Source) -> Head {
        match source {
            Source::HumanCoarse => Head::Coarse,
            Source::EngagementFine => Head::Fine,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Head::Coarse => "coarse",
            Head::Fine => "fine",
        }
    }
}

/// Ties an entity alphabet to the head that predicts it.
pub trait HeadLabels: EntityKind {
    const HEAD: Head;
}

impl HeadLabels for MusicEntity {
    const HEAD: Head = Head::Coarse;
}

impl HeadLabels for EntityType {
    const HEAD: Head = Head::Fine;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied at the end of each epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub l2_lambda: f64,
    pub dropout: f64,
    pub sample_weight_cg: f64,
    pub sample_weight_fg: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embed_dim: usize,
    /// Width of the context-feature embedding; 0 disables features.
    pub feature_dim: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub proj_dim: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Tokens seen fewer times map to UNK, which is how UNK gets trained.
    pub min_count: usize,
    /// One uniform init range for every weight; `None` scales by fan-in.
    pub init_scale: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr0: 0.9,
            lr_decay: 0.8,
            momentum: 0.9,
            l2_lambda: 0.0005,
            dropout: 0.25,
            sample_weight_cg: 0.5,
            sample_weight_fg: 0.5,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            embed_dim: 16,
            feature_dim: 0,
            n_features: 0,
            hidden: 16,
            proj_dim: 16,
            clip_norm: 5.0,
            min_count: 2,
            init_scale: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.sample_weight_cg < 0.0 || self.sample_weight_fg < 0.0 {
            return bad("sampling weights must be non-negative".into());
        }
        if !(self.sample_weight_cg + self.sample_weight_fg > 0.0) {
            return bad("sampling weights must not both be zero".into());
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.hidden == 0 || self.proj_dim == 0 {
            return bad("batch_size, embed_dim, hidden and proj_dim must be positive".into());
        }
        if self.feature_dim > 0 && self.n_features == 0 {
            return bad("feature_dim > 0 requires n_features > 0".into());
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.l2_lambda >= 0.0) {
            return bad("lr0 and lr_decay must be positive and l2_lambda non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.init_scale.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return bad("init_scale must be positive".into());
        }
        Ok(())
    }

    /// Sampling probability of the coarse source after normalization.
    pub fn coarse_probability(&self) -> f64 {
        self.sample_weight_cg / (self.sample_weight_cg + self.sample_weight_fg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_coarse: f64,
    pub ce_fine: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(head: Head, ce: f64, l2: f64) -> Self {
        let (ce_coarse, ce_fine) = match head {
            Head::Coarse => (ce, 0.0),
            Head::Fine => (0.0, ce),
        };
        LossBreakdown {
            ce_coarse,
            ce_fine,
            l2,
            total: ce + l2,
        }
    }
}

/// A trained (or freshly initialized) tagger with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub hyper: Hyperparams,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl Tagger {
    pub fn new(vocab: Vocab, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let params = ModelParams::init(vocab.len(), &hyper, &mut rng);
        Ok(Tagger { hyper, vocab, params })
    }

    pub fn encode(&self, ex: &LabeledExample) -> Encoded {
        Encoded {
            ids: self.vocab.encode(&ex.tokens),
            feature: ex.feature,
            gold: ex.labels.ids(),
        }
    }

    fn encode_batch(&self, batch: &[LabeledExample], head: Head) -> Result<Vec<Encoded>> {
        batch
            .iter()
            .map(|ex| {
                if Head::for_source(ex.source()) != head {
                    return Err(Error::HeadMismatch {
                        source_kind: ex.source().as_str(),
                        head: head.as_str(),
                    });
                }
                Ok(self.encode(ex))
            })
            .collect()
    }

    /// Per-token probabilities (`T × L`) from the selected head. In training
    /// mode dropout masks are drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        token_ids: &[usize],
        feature: Option<usize>,
        head: Head,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
        let masks = (train_mode && self.hyper.dropout > 0.0)
            .then(|| DropoutMasks::sample(token_ids.len(), self.hyper.hidden, self.hyper.dropout, rng));
        let trace = network::forward_with_masks(&self.params, token_ids, feature, head, masks)?;
        Ok((trace.prob_rows(), trace))
    }

    /// Inference-mode log-probabilities for a raw utterance.
    pub fn log_probs(&self, tokens: &[String], feature: Option<usize>, head: Head) -> Result<Vec<Vec<f64>>> {
        let ids = self.vocab.encode(tokens);
        let trace = network::forward_with_masks(&self.params, &ids, feature, head, None)?;
        Ok(trace.log_prob_rows())
    }

    /// Inference-mode lattice for the decoder.
    pub fn lattice(&self, tokens: &[String], feature: Option<usize>, head: Head) -> Result<Lattice> {
        Lattice::new(self.log_probs(tokens, feature, head)?)
    }

    /// Inference-mode loss of a batch drawn from one source.
    pub fn loss(&self, batch: &[LabeledExample], head: Head, lambda: f64) -> Result<LossBreakdown> {
        let encoded = self.encode_batch(batch, head)?;
        let (ce, l2) = network::batch_objective(&self.params, &encoded, head, lambda, None, None)?;
        Ok(LossBreakdown::new(head, ce, l2))
    }

    /// Gradient of the batch loss. With `rng`, dropout masks are sampled as in
    /// training; without it the network runs in inference mode.
    pub fn grad<R: Rng + ?Sized>(
        &self,
        batch: &[LabeledExample],
        head: Head,
        lambda: f64,
        rng: Option<&mut R>,
    ) -> Result<(ModelParams, LossBreakdown)> {
        let encoded = self.encode_batch(batch, head)?;
        let masks: Option<Vec<DropoutMasks>> = match rng {
            Some(rng) if self.hyper.dropout > 0.0 => Some(
                encoded
                    .iter()
                    .map(|e| DropoutMasks::sample(e.ids.len(), self.hyper.hidden, self.hyper.dropout, rng))
                    .collect(),
            ),
            _ => None,
        };
        let mut grads = self.params.zeros_like();
        let (ce, l2) = network::batch_objective(
            &self.params,
            &encoded,
            head,
            lambda,
            masks.as_deref(),
            Some(&mut grads),
        )?;
        Ok((grads, LossBreakdown::new(head, ce, l2)))
    }

    /// Greedy per-token argmax (lowest tag id wins ties), repaired to valid BIO.
    pub fn predict<E: HeadLabels>(&self, tokens: &[String], feature: Option<usize>) -> Result<Vec<Tag<E>>> {
        let rows = self.log_probs(tokens, feature, E::HEAD)?;
        Ok(argmax_tags(&rows))
    }
}

/// Row-wise argmax with ties to the lowest id, followed by BIO repair.
pub fn argmax_tags<E: EntityKind>(rows: &[Vec<f64>]) -> Vec<Tag<E>> {
    let mut tags: Vec<Tag<E>> = rows
        .iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Tag::from_id(best).expect("row width matches the label space")
        })
        .collect();
    repair_bio(&mut tags);
    tags
}
