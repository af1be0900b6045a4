use rand::Rng;

use super::tensor::Tensor;
use super::{Head, Hyperparams};

/// Gate rows are stacked as input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_recurrent: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        LstmParams {
            w_input: Tensor::uniform(&[4 * hidden, input], scale, rng),
            w_recurrent: Tensor::uniform(&[4 * hidden, hidden], scale, rng),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.cols()
    }

    pub fn input(&self) -> usize {
        self.w_input.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        BiLstmParams {
            forward: LstmParams::init(input, hidden, scale, rng),
            backward: LstmParams::init(input, hidden, scale, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::uniform(&[output, input], scale, rng),
            bias: Tensor::zeros(&[output]),
        }
    }
}

/// Which part of the network an array belongs to. Head arrays only move when
/// a mini-batch from their own source is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Shared,
    Head(Head),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    /// `n_features × feature_dim`; empty when context features are disabled.
    pub feature_embedding: Tensor,
    pub layer1: BiLstmParams,
    pub layer2: BiLstmParams,
    pub projection: Linear,
    pub coarse_head: Linear,
    pub fine_head: Linear,
}

macro_rules! param_list {
    ($s:ident, $($r:tt)+) => {
        vec![
            ("embedding", $($r)+ $s.embedding),
            ("feature_embedding", $($r)+ $s.feature_embedding),
            ("layer1.forward.w_input", $($r)+ $s.layer1.forward.w_input),
            ("layer1.forward.w_recurrent", $($r)+ $s.layer1.forward.w_recurrent),
            ("layer1.forward.bias", $($r)+ $s.layer1.forward.bias),
            ("layer1.backward.w_input", $($r)+ $s.layer1.backward.w_input),
            ("layer1.backward.w_recurrent", $($r)+ $s.layer1.backward.w_recurrent),
            ("layer1.backward.bias", $($r)+ $s.layer1.backward.bias),
            ("layer2.forward.w_input", $($r)+ $s.layer2.forward.w_input),
            ("layer2.forward.w_recurrent", $($r)+ $s.layer2.forward.w_recurrent),
            ("layer2.forward.bias", $($r)+ $s.layer2.forward.bias),
            ("layer2.backward.w_input", $($r)+ $s.layer2.backward.w_input),
            ("layer2.backward.w_recurrent", $($r)+ $s.layer2.backward.w_recurrent),
            ("layer2.backward.bias", $($r)+ $s.layer2.backward.bias),
            ("projection.weight", $($r)+ $s.projection.weight),
            ("projection.bias", $($r)+ $s.projection.bias),
            ("coarse_head.weight", $($r)+ $s.coarse_head.weight),
            ("coarse_head.bias", $($r)+ $s.coarse_head.bias),
            ("fine_head.weight", $($r)+ $s.fine_head.weight),
            ("fine_head.bias", $($r)+ $s.fine_head.bias),
        ]
    };
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("coarse_head.") {
        ParamGroup::Head(Head::Coarse)
    } else if name.starts_with("fine_head.") {
        ParamGroup::Head(Head::Fine)
    } else {
        ParamGroup::Shared
    }
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with("bias")
}

/// Whether a mini-batch for `head` trains this array.
pub fn trained_by(name: &str, head: Head) -> bool {
    match param_group(name) {
        ParamGroup::Shared => true,
        ParamGroup::Head(h) => h == head,
    }
}

fn feature_shape(hyper: &Hyperparams) -> (usize, usize) {
    if hyper.feature_dim > 0 && hyper.n_features > 0 {
        (hyper.n_features, hyper.feature_dim)
    } else {
        (0, 0)
    }
}

impl ModelParams {
    /// Zero biases. Embeddings are uniform(-1, 1), recurrent weights
    /// uniform(±1/√hidden) and linear weights uniform(±1/√fan_in), unless
    /// `hyper.init_scale` asks for one uniform range everywhere.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, hyper: &Hyperparams, rng: &mut R) -> Self {
        if let Some(scale) = hyper.init_scale {
            return Self::init_scaled(vocab_size, hyper, scale, rng);
        }
        let h = hyper.hidden;
        let (feature_rows, feature_cols) = feature_shape(hyper);
        let lstm = 1.0 / (h as f64).sqrt();
        ModelParams {
            embedding: Tensor::uniform(&[vocab_size, hyper.embed_dim], 1.0, rng),
            feature_embedding: Tensor::uniform(&[feature_rows, feature_cols], 1.0, rng),
            layer1: BiLstmParams::init(hyper.embed_dim + feature_cols, h, lstm, rng),
            layer2: BiLstmParams::init(2 * h, h, lstm, rng),
            projection: Linear::init(2 * h, hyper.proj_dim, 1.0 / ((2 * h) as f64).sqrt(), rng),
            coarse_head: Linear::init(hyper.proj_dim, Head::Coarse.num_labels(), 1.0 / (hyper.proj_dim as f64).sqrt(), rng),
            fine_head: Linear::init(hyper.proj_dim, Head::Fine.num_labels(), 1.0 / (hyper.proj_dim as f64).sqrt(), rng),
        }
    }

    /// Uniform(-scale, scale) for every weight, zero biases.
    pub fn init_scaled<R: Rng + ?Sized>(
        vocab_size: usize,
        hyper: &Hyperparams,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let h = hyper.hidden;
        let (feature_rows, feature_cols) = feature_shape(hyper);
        ModelParams {
            embedding: Tensor::uniform(&[vocab_size, hyper.embed_dim], scale, rng),
            feature_embedding: Tensor::uniform(&[feature_rows, feature_cols], scale, rng),
            layer1: BiLstmParams::init(hyper.embed_dim + feature_cols, h, scale, rng),
            layer2: BiLstmParams::init(2 * h, h, scale, rng),
            projection: Linear::init(2 * h, hyper.proj_dim, scale, rng),
            coarse_head: Linear::init(hyper.proj_dim, Head::Coarse.num_labels(), scale, rng),
            fine_head: Linear::init(hyper.proj_dim, Head::Fine.num_labels(), scale, rng),
        }
    }

    /// Same shapes, all zeros. Used as a gradient or velocity buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        param_list!(self, &)
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        param_list!(self, &mut)
    }

    pub fn head(&self, head: Head) -> &Linear {
        match head {
            Head::Coarse => &self.coarse_head,
            Head::Fine => &self.fine_head,
        }
    }

    pub fn head_mut(&mut self, head: Head) -> &mut Linear {
        match head {
            Head::Coarse => &mut self.coarse_head,
            Head::Fine => &mut self.fine_head,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn n_features(&self) -> usize {
        self.feature_embedding.rows()
    }

    pub fn hidden(&self) -> usize {
        self.layer1.forward.hidden()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// `‖w‖²` over the non-bias arrays trained by `head`.
    pub fn l2_norm_sq(&self, head: Head) -> f64 {
        self.named()
            .into_iter()
            .filter(|(name, _)| !is_bias(name) && trained_by(name, head))
            .map(|(_, t)| t.sum_squares())
            .sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }
}
