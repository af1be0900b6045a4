//! Forward and backward passes of the two-layer bidirectional LSTM tagger.
//!
//! Each token's input is its word embedding, optionally concatenated with the
//! utterance's context-feature embedding. Layer 1 runs left-to-right and
//! right-to-left over the inputs; the two hidden states at each position are
//! concatenated and fed to layer 2, whose concatenated output `C_i` goes
//! through a linear projection and then one of the two softmax heads.

use rand::Rng;

use super::params::{is_bias, trained_by, BiLstmParams, LstmParams, ModelParams};
use super::tensor::{axpy, gemv_acc, gemv_t_acc, outer_acc, sigmoid, softmax_in_place};
use super::Head;
use crate::error::{Error, Result};

/// A token-id sequence ready for the network, with gold tag ids when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub feature: Option<usize>,
    pub gold: Vec<usize>,
}

/// Inverted-dropout masks for the outputs of both recurrent layers. Entries
/// are either 0 or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layer1: Vec<f64>,
    pub layer2: Vec<f64>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(len: usize, hidden: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mut draw = || -> Vec<f64> {
            (0..len * 2 * hidden)
                .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                .collect()
        };
        let layer1 = draw();
        let layer2 = draw();
        DropoutMasks { layer1, layer2 }
    }
}

/// Per-position activations of one LSTM direction. Rows are indexed by token
/// position regardless of the direction of travel.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    pub reverse: bool,
    /// Post-activation gates `[i, f, g, o]`, `T × 4h`.
    pub gates: Vec<f64>,
    pub cells: Vec<f64>,
    pub tanh_cells: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmTrace {
    pub forward: LstmTrace,
    pub backward: LstmTrace,
    /// `[L_i ; R_i]` per position, `T × 2h`, before dropout.
    pub output: Vec<f64>,
    /// `output` after the dropout mask (identical when no mask is applied).
    pub dropped: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub len: usize,
    pub head: Head,
    pub inputs: Vec<f64>,
    pub layer1: BiLstmTrace,
    pub layer2: BiLstmTrace,
    pub projected: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub masks: Option<DropoutMasks>,
    hidden: usize,
    num_labels: usize,
}

impl ForwardTrace {
    /// Top-layer state for token `i` and everything to its left.
    pub fn left_context(&self, i: usize) -> &[f64] {
        &self.layer2.forward.hidden[i * self.hidden..(i + 1) * self.hidden]
    }

    /// Top-layer state for token `i` and everything to its right.
    pub fn right_context(&self, i: usize) -> &[f64] {
        &self.layer2.backward.hidden[i * self.hidden..(i + 1) * self.hidden]
    }

    /// `C_i = [L_i ; R_i]`.
    pub fn context(&self, i: usize) -> &[f64] {
        &self.layer2.output[i * 2 * self.hidden..(i + 1) * 2 * self.hidden]
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn log_prob_row(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Probabilities as `T` rows.
    pub fn prob_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|i| self.prob_row(i).to_vec()).collect()
    }

    pub fn log_prob_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|i| self.log_prob_row(i).to_vec()).collect()
    }
}

fn check_inputs(params: &ModelParams, ids: &[usize], feature: Option<usize>) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let vocab = params.vocab_size();
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::OutOfRange {
            what: "token id",
            index: bad,
            limit: vocab,
        });
    }
    if let Some(f) = feature {
        if f >= params.n_features() {
            return Err(Error::OutOfRange {
                what: "feature id",
                index: f,
                limit: params.n_features(),
            });
        }
    }
    Ok(())
}

#[inline]
fn position(step: usize, len: usize, reverse: bool) -> usize {
    if reverse {
        len - 1 - step
    } else {
        step
    }
}

fn lstm_forward(p: &LstmParams, xs: &[f64], len: usize, reverse: bool) -> LstmTrace {
    let h = p.hidden();
    let d = p.input();
    let mut gates = vec![0.0; len * 4 * h];
    let mut cells = vec![0.0; len * h];
    let mut tanh_cells = vec![0.0; len * h];
    let mut hidden = vec![0.0; len * h];
    for step in 0..len {
        let t = position(step, len, reverse);
        let prev = (step > 0).then(|| position(step - 1, len, reverse));
        let z = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        z.copy_from_slice(p.bias.data());
        gemv_acc(&p.w_input, &xs[t * d..(t + 1) * d], z);
        if let Some(pv) = prev {
            gemv_acc(&p.w_recurrent, &hidden[pv * h..(pv + 1) * h], z);
        }
        for k in 0..h {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[h + k]);
            let g = z[2 * h + k].tanh();
            let o = sigmoid(z[3 * h + k]);
            z[k] = i;
            z[h + k] = f;
            z[2 * h + k] = g;
            z[3 * h + k] = o;
            let c_prev = prev.map_or(0.0, |pv| cells[pv * h + k]);
            let c = f * c_prev + i * g;
            let tc = c.tanh();
            cells[t * h + k] = c;
            tanh_cells[t * h + k] = tc;
            hidden[t * h + k] = o * tc;
        }
    }
    LstmTrace {
        reverse,
        gates,
        cells,
        tanh_cells,
        hidden,
    }
}

/// Backpropagation through time for one direction. `dh_out` holds the loss
/// gradient with respect to each position's hidden output (`T × h`).
fn lstm_backward(
    p: &LstmParams,
    trace: &LstmTrace,
    xs: &[f64],
    dh_out: &[f64],
    grads: &mut LstmParams,
    dxs: &mut [f64],
) {
    let h = p.hidden();
    let d = p.input();
    let len = trace.hidden.len() / h;
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for step in (0..len).rev() {
        let t = position(step, len, trace.reverse);
        let prev = (step > 0).then(|| position(step - 1, len, trace.reverse));
        let gates = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let dh = dh_out[t * h + k] + dh_next[k];
            let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let tc = trace.tanh_cells[t * h + k];
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            let c_prev = prev.map_or(0.0, |pv| trace.cells[pv * h + k]);
            dz[k] = dc * g * i * (1.0 - i);
            dz[h + k] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - g * g);
            dz[3 * h + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let x = &xs[t * d..(t + 1) * d];
        outer_acc(&mut grads.w_input, &dz, x);
        axpy(1.0, &dz, grads.bias.data_mut());
        gemv_t_acc(&p.w_input, &dz, &mut dxs[t * d..(t + 1) * d]);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if let Some(pv) = prev {
            outer_acc(&mut grads.w_recurrent, &dz, &trace.hidden[pv * h..(pv + 1) * h]);
            gemv_t_acc(&p.w_recurrent, &dz, &mut dh_next);
        }
    }
}

fn bilstm_forward(p: &BiLstmParams, xs: &[f64], len: usize, mask: Option<&[f64]>) -> BiLstmTrace {
    let h = p.forward.hidden();
    let forward = lstm_forward(&p.forward, xs, len, false);
    let backward = lstm_forward(&p.backward, xs, len, true);
    let mut output = vec![0.0; len * 2 * h];
    for t in 0..len {
        output[t * 2 * h..t * 2 * h + h].copy_from_slice(&forward.hidden[t * h..(t + 1) * h]);
        output[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&backward.hidden[t * h..(t + 1) * h]);
    }
    let dropped = match mask {
        Some(m) => output.iter().zip(m).map(|(v, m)| v * m).collect(),
        None => output.clone(),
    };
    BiLstmTrace {
        forward,
        backward,
        output,
        dropped,
    }
}

/// `d_output` is the gradient w.r.t. the dropped output; returns nothing but
/// accumulates into `grads` and `dxs`.
fn bilstm_backward(
    p: &BiLstmParams,
    trace: &BiLstmTrace,
    xs: &[f64],
    d_dropped: &[f64],
    mask: Option<&[f64]>,
    grads: &mut BiLstmParams,
    dxs: &mut [f64],
) {
    let h = p.forward.hidden();
    let len = trace.output.len() / (2 * h);
    let mut dh_f = vec![0.0; len * h];
    let mut dh_b = vec![0.0; len * h];
    for t in 0..len {
        for k in 0..h {
            let (a, b) = (t * 2 * h + k, t * 2 * h + h + k);
            let (ma, mb) = mask.map_or((1.0, 1.0), |m| (m[a], m[b]));
            dh_f[t * h + k] = d_dropped[a] * ma;
            dh_b[t * h + k] = d_dropped[b] * mb;
        }
    }
    lstm_backward(&p.forward, &trace.forward, xs, &dh_f, &mut grads.forward, dxs);
    lstm_backward(&p.backward, &trace.backward, xs, &dh_b, &mut grads.backward, dxs);
}

/// Runs the network with explicit dropout masks (`None` for inference).
pub fn forward_with_masks(
    params: &ModelParams,
    ids: &[usize],
    feature: Option<usize>,
    head: Head,
    masks: Option<DropoutMasks>,
) -> Result<ForwardTrace> {
    check_inputs(params, ids, feature)?;
    let len = ids.len();
    let d_e = params.embedding.cols();
    let d_f = params.feature_embedding.cols();
    let d_in = d_e + d_f;
    let h = params.hidden();

    let mut inputs = vec![0.0; len * d_in];
    for (t, &id) in ids.iter().enumerate() {
        let row = &mut inputs[t * d_in..(t + 1) * d_in];
        row[..d_e].copy_from_slice(params.embedding.row(id));
        if let Some(f) = feature {
            row[d_e..].copy_from_slice(params.feature_embedding.row(f));
        }
    }
    if let Some(m) = &masks {
        debug_assert_eq!(m.layer1.len(), len * 2 * h);
    }

    let layer1 = bilstm_forward(&params.layer1, &inputs, len, masks.as_ref().map(|m| m.layer1.as_slice()));
    let layer2 = bilstm_forward(
        &params.layer2,
        &layer1.dropped,
        len,
        masks.as_ref().map(|m| m.layer2.as_slice()),
    );

    let proj = &params.projection;
    let p_dim = proj.weight.rows();
    let mut projected = vec![0.0; len * p_dim];
    for t in 0..len {
        let out = &mut projected[t * p_dim..(t + 1) * p_dim];
        out.copy_from_slice(proj.bias.data());
        gemv_acc(&proj.weight, &layer2.dropped[t * 2 * h..(t + 1) * 2 * h], out);
    }

    let lin = params.head(head);
    let n_labels = lin.weight.rows();
    let mut logits = vec![0.0; len * n_labels];
    let mut probs = vec![0.0; len * n_labels];
    let mut log_probs = vec![0.0; len * n_labels];
    for t in 0..len {
        let z = &mut logits[t * n_labels..(t + 1) * n_labels];
        z.copy_from_slice(lin.bias.data());
        gemv_acc(&lin.weight, &projected[t * p_dim..(t + 1) * p_dim], z);
        let p = &mut probs[t * n_labels..(t + 1) * n_labels];
        p.copy_from_slice(z);
        let lse = softmax_in_place(p);
        for (lp, &zi) in log_probs[t * n_labels..(t + 1) * n_labels].iter_mut().zip(z.iter()) {
            *lp = zi - lse;
        }
    }

    Ok(ForwardTrace {
        len,
        head,
        inputs,
        layer1,
        layer2,
        projected,
        logits,
        log_probs,
        probs,
        masks,
        hidden: h,
        num_labels: n_labels,
    })
}

/// Summed token cross-entropy of a trace against gold tag ids.
pub fn cross_entropy(trace: &ForwardTrace, gold: &[usize]) -> f64 {
    gold.iter()
        .enumerate()
        .map(|(t, &y)| -trace.log_prob_row(t)[y])
        .sum()
}

/// Accumulates the cross-entropy gradient of one utterance into `grads`.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, ids: &[usize], feature: Option<usize>, gold: &[usize], grads: &mut ModelParams) {
    let len = trace.len;
    let h = params.hidden();
    let head = trace.head;
    let n_labels = trace.num_labels;
    let p_dim = params.projection.weight.rows();
    let masks = trace.masks.as_ref();

    let mut d_logits = vec![0.0; n_labels];
    let mut d_proj = vec![0.0; p_dim];
    let mut d_dropped2 = vec![0.0; len * 2 * h];
    for t in 0..len {
        d_logits.copy_from_slice(trace.prob_row(t));
        d_logits[gold[t]] -= 1.0;
        let projected = &trace.projected[t * p_dim..(t + 1) * p_dim];
        {
            let g = grads.head_mut(head);
            outer_acc(&mut g.weight, &d_logits, projected);
            axpy(1.0, &d_logits, g.bias.data_mut());
        }
        d_proj.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_acc(&params.head(head).weight, &d_logits, &mut d_proj);

        let c2 = &trace.layer2.dropped[t * 2 * h..(t + 1) * 2 * h];
        outer_acc(&mut grads.projection.weight, &d_proj, c2);
        axpy(1.0, &d_proj, grads.projection.bias.data_mut());
        gemv_t_acc(&params.projection.weight, &d_proj, &mut d_dropped2[t * 2 * h..(t + 1) * 2 * h]);
    }

    let mut d_dropped1 = vec![0.0; len * 2 * h];
    bilstm_backward(
        &params.layer2,
        &trace.layer2,
        &trace.layer1.dropped,
        &d_dropped2,
        masks.map(|m| m.layer2.as_slice()),
        &mut grads.layer2,
        &mut d_dropped1,
    );

    let d_e = params.embedding.cols();
    let d_in = d_e + params.feature_embedding.cols();
    let mut d_inputs = vec![0.0; len * d_in];
    bilstm_backward(
        &params.layer1,
        &trace.layer1,
        &trace.inputs,
        &d_dropped1,
        masks.map(|m| m.layer1.as_slice()),
        &mut grads.layer1,
        &mut d_inputs,
    );

    for (t, &id) in ids.iter().enumerate() {
        let row = &d_inputs[t * d_in..(t + 1) * d_in];
        axpy(1.0, &row[..d_e], grads.embedding.row_mut(id));
        if let Some(f) = feature {
            axpy(1.0, &row[d_e..], grads.feature_embedding.row_mut(f));
        }
    }
}

/// Adds `λ‖w‖²` for the arrays trained by `head` and, when `grads` is given,
/// its gradient `2λw`. Returns the penalty.
pub fn l2_penalty(params: &ModelParams, head: Head, lambda: f64, grads: Option<&mut ModelParams>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    if let Some(grads) = grads {
        for ((name, w), (_, g)) in params.named().into_iter().zip(grads.named_mut()) {
            if !is_bias(name) && trained_by(name, head) {
                axpy(2.0 * lambda, w.data(), g.data_mut());
            }
        }
    }
    lambda * params.l2_norm_sq(head)
}

/// Loss of a batch under fixed per-example masks, optionally accumulating
/// gradients. Returns `(cross_entropy, l2)`.
pub fn batch_objective(
    params: &ModelParams,
    batch: &[Encoded],
    head: Head,
    lambda: f64,
    masks: Option<&[DropoutMasks]>,
    mut grads: Option<&mut ModelParams>,
) -> Result<(f64, f64)> {
    let n_labels = head.num_labels();
    let mut ce = 0.0;
    for (k, ex) in batch.iter().enumerate() {
        if ex.gold.len() != ex.ids.len() {
            return Err(Error::LengthMismatch {
                id: format!("batch[{k}]"),
                tokens: ex.ids.len(),
                labels: ex.gold.len(),
            });
        }
        if let Some(&bad) = ex.gold.iter().find(|&&y| y >= n_labels) {
            return Err(Error::OutOfRange {
                what: "tag id",
                index: bad,
                limit: n_labels,
            });
        }
        let mask = masks.map(|m| m[k].clone());
        let trace = forward_with_masks(params, &ex.ids, ex.feature, head, mask)?;
        ce += cross_entropy(&trace, &ex.gold);
        if let Some(g) = grads.as_deref_mut() {
            backward(params, &trace, &ex.ids, ex.feature, &ex.gold, g);
        }
    }
    let l2 = l2_penalty(params, head, lambda, grads);
    Ok((ce, l2))
}
