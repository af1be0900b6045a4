//! Alternating-source mini-batch training.
//!
//! Each iteration picks a source at random in proportion to its sampling
//! weight, takes the next mini-batch from that source's shuffled cycle and
//! applies one momentum-SGD step to the shared layers and that source's head.
//! One epoch is `ceil((|CG| + |FG|) / batch_size)` iterations.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

use super::network::{self, DropoutMasks, Encoded};
use super::params::{trained_by, ModelParams};
use super::{Head, Tagger};

/// Stream id of the training rng, kept apart from the initialization stream.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub coarse_batches: usize,
    pub fine_batches: usize,
    /// Mean cross-entropy per token over the epoch's coarse batches.
    pub coarse_loss: Option<f64>,
    pub fine_loss: Option<f64>,
    pub clipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Draws the source of each mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct SourceSampler {
    p_coarse: f64,
}

impl SourceSampler {
    /// Weights are normalized here; only their ratio matters. An empty source
    /// is never drawn.
    pub fn new(w_coarse: f64, w_fine: f64, n_coarse: usize, n_fine: usize) -> Result<Self> {
        let w_coarse = if n_coarse == 0 { 0.0 } else { w_coarse };
        let w_fine = if n_fine == 0 { 0.0 } else { w_fine };
        if !(w_coarse >= 0.0 && w_fine >= 0.0 && w_coarse + w_fine > 0.0) {
            return Err(Error::EmptyInput("no source with positive weight and data"));
        }
        Ok(SourceSampler {
            p_coarse: w_coarse / (w_coarse + w_fine),
        })
    }

    pub fn p_coarse(&self) -> f64 {
        self.p_coarse
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Head {
        let u: f64 = rng.gen();
        if u < self.p_coarse {
            Head::Coarse
        } else {
            Head::Fine
        }
    }
}

/// Endless reshuffled pass over one source.
#[derive(Debug)]
struct BatchCycle {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycle {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchCycle { order, pos: 0 }
    }

    fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Rescales `grads` in place so its global norm is at most `max_norm`.
/// Returns whether clipping happened.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> bool {
    if max_norm <= 0.0 {
        return false;
    }
    let norm = grads.global_norm();
    if norm <= max_norm {
        return false;
    }
    let scale = max_norm / norm;
    for (_, t) in grads.named_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    true
}

/// `v ← m·v − (1 − m)·lr·g; θ ← θ + v` on the arrays a `head` batch trains.
/// The velocity is a running average of the gradient, so the step size stays
/// on the scale of `lr` whatever the momentum. Arrays of the other head, and
/// their velocities, are left untouched.
pub fn momentum_step(params: &mut ModelParams, velocity: &mut ModelParams, grads: &ModelParams, head: Head, lr: f64, momentum: f64) {
    let g = grads.named();
    for (((name, p), (_, v)), (_, g)) in params.named_mut().into_iter().zip(velocity.named_mut()).zip(g) {
        if !trained_by(name, head) {
            continue;
        }
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi - (1.0 - momentum) * lr * gi;
            *pi += *vi;
        }
    }
}

/// Learning rate used during `epoch` (0-based).
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Trains `tagger` in place on the coarse and fine corpora.
pub fn train(tagger: &mut Tagger, cg: &Dataset, fg: &Dataset) -> Result<TrainLog> {
    let hyper = tagger.hyper.clone();
    hyper.validate()?;
    let encode = |ds: &Dataset| -> Vec<Encoded> { ds.iter().map(|ex| tagger.encode(ex)).collect() };
    let coarse = encode(cg);
    let fine = encode(fg);
    let sampler = SourceSampler::new(hyper.sample_weight_cg, hyper.sample_weight_fg, coarse.len(), fine.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut coarse_cycle = BatchCycle::new(coarse.len(), &mut rng);
    let mut fine_cycle = BatchCycle::new(fine.len(), &mut rng);

    let iterations = (coarse.len() + fine.len()).div_ceil(hyper.batch_size);
    let mut velocity = tagger.params.zeros_like();
    let mut grads = tagger.params.zeros_like();
    let mut log = TrainLog::default();

    for epoch in 0..hyper.epochs {
        let lr = learning_rate(hyper.lr0, hyper.lr_decay, epoch);
        let mut entry = EpochLog {
            epoch,
            lr,
            coarse_batches: 0,
            fine_batches: 0,
            coarse_loss: None,
            fine_loss: None,
            clipped: 0,
        };
        let mut sums = [(0.0f64, 0usize); 2];
        for iteration in 0..iterations {
            let head = sampler.draw(&mut rng);
            let (pool, cycle) = match head {
                Head::Coarse => (&coarse, &mut coarse_cycle),
                Head::Fine => (&fine, &mut fine_cycle),
            };
            let batch: Vec<Encoded> = cycle
                .next_batch(hyper.batch_size, &mut rng)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            let masks: Option<Vec<DropoutMasks>> = (hyper.dropout > 0.0).then(|| {
                batch
                    .iter()
                    .map(|e| DropoutMasks::sample(e.ids.len(), hyper.hidden, hyper.dropout, &mut rng))
                    .collect()
            });
            for (_, t) in grads.named_mut() {
                t.fill(0.0);
            }
            let (ce, l2) = network::batch_objective(
                &tagger.params,
                &batch,
                head,
                hyper.l2_lambda,
                masks.as_deref(),
                Some(&mut grads),
            )?;
            if !(ce + l2).is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, iteration });
            }
            if clip_global_norm(&mut grads, hyper.clip_norm) {
                entry.clipped += 1;
            }
            momentum_step(&mut tagger.params, &mut velocity, &grads, head, lr, hyper.momentum);

            let tokens: usize = batch.iter().map(|e| e.ids.len()).sum();
            let slot = match head {
                Head::Coarse => {
                    entry.coarse_batches += 1;
                    &mut sums[0]
                }
                Head::Fine => {
                    entry.fine_batches += 1;
                    &mut sums[1]
                }
            };
            slot.0 += ce;
            slot.1 += tokens;
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        entry.coarse_loss = mean(sums[0]);
        entry.fine_loss = mean(sums[1]);
        debug!("epoch {epoch}: {entry:?}");
        log.epochs.push(entry);
    }
    if let Some(last) = log.epochs.last() {
        info!(
            "trained {} epochs; final coarse loss {:?}, fine loss {:?}",
            log.epochs.len(),
            last.coarse_loss,
            last.fine_loss
        );
    }
    Ok(log)
}
