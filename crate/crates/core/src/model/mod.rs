//! Windowed feed-forward encoder with a HardKuma extractor head and a
//! masked mean-pooling classifier.
//!
//! All parameters live in one flat buffer; [`Layout`] names the segments.
//! Arithmetic is done in `f64` but every stored parameter is kept exactly
//! representable as `f32`, which makes checkpoints lossless.

mod checkpoint;
mod grad;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::{
    forward_train, gradient, BatchItem, Gradients, Loss, LossValue, OutputGrads, TrainOutputs,
};

use crate::error::{Error, Result};
use crate::rationale::{HardKuma, MaskPolicy, Objective, RationaleState, STRETCH_LOWER, STRETCH_UPPER};

/// Floor added to softplus outputs so HardKuma shapes stay positive.
pub const SHAPE_FLOOR: f64 = 1e-4;
/// Denominator floor for masked mean pooling.
pub const POOL_FLOOR: f64 = 1e-6;
/// Context half-width of the encoder.
pub const CONTEXT_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab_size: usize,
    pub embed: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Dims {
    pub fn layout(&self) -> Layout {
        let Dims {
            vocab_size: v,
            embed: d,
            hidden: h,
            classes: c,
        } = *self;
        let mut cursor = 0;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        Layout {
            embedding: take(v * d),
            w1: take(h * 2 * d),
            b1: take(h),
            w2: take(h * h),
            b2: take(h),
            wa: take(h),
            ba: take(1),
            wb: take(h),
            bb: take(1),
            wc: take(c * h),
            bc: take(c),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().bc.end
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Config(format!("degenerate model dimensions {self:?}")));
        }
        Ok(())
    }
}

/// Parameter segments, in checkpoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub wa: Range<usize>,
    pub ba: Range<usize>,
    pub wb: Range<usize>,
    pub bb: Range<usize>,
    pub wc: Range<usize>,
    pub bc: Range<usize>,
}

impl Layout {
    pub fn segments(&self) -> [(&'static str, Range<usize>); 11] {
        [
            ("embedding", self.embedding.clone()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
            ("wa", self.wa.clone()),
            ("ba", self.ba.clone()),
            ("wb", self.wb.clone()),
            ("bb", self.bb.clone()),
            ("wc", self.wc.clone()),
            ("bc", self.bc.clone()),
        ]
    }
}

/// Extractor and predictor for one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub objective: Objective,
    pub dims: Dims,
    pub stretch_lower: f64,
    pub stretch_upper: f64,
    pub vocab_hash: String,
    params: Vec<f64>,
    layout: Layout,
}

/// Per-token encoder activations. `reps` is the encoder output; the rest
/// is kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub n: usize,
    pub inputs: Vec<f64>,
    pub pre1: Vec<f64>,
    pub hidden1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub reps: Vec<f64>,
}

impl Encoded {
    pub fn rep(&self, i: usize, h: usize) -> &[f64] {
        &self.reps[i * h..(i + 1) * h]
    }
}

impl ModelBundle {
    /// Seeded uniform Glorot-style initialisation.
    pub fn init(objective: Objective, dims: Dims, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = dims.layout();
        let mut params = vec![0.0; dims.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, c) = (dims.embed, dims.hidden, dims.classes);
        let mut fill = |range: Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-scale..scale);
            }
        };
        fill(layout.embedding.clone(), 0.5);
        fill(layout.w1.clone(), (6.0 / (2 * d + h) as f64).sqrt());
        fill(layout.w2.clone(), (6.0 / (2 * h) as f64).sqrt());
        fill(layout.wa.clone(), (1.0 / h as f64).sqrt());
        fill(layout.wb.clone(), (1.0 / h as f64).sqrt());
        fill(layout.wc.clone(), (6.0 / (h + c) as f64).sqrt());
        for p in &mut params[layout.b1.clone()] {
            *p = 0.01;
        }
        for p in &mut params[layout.b2.clone()] {
            *p = 0.01;
        }
        // PAD embeds to zero.
        params[layout.embedding.start..layout.embedding.start + d]
            .iter_mut()
            .for_each(|p| *p = 0.0);
        let mut model = Self {
            objective,
            dims,
            stretch_lower: STRETCH_LOWER,
            stretch_upper: STRETCH_UPPER,
            vocab_hash: vocab_hash.into(),
            params,
            layout,
        };
        model.round_to_f32();
        Ok(model)
    }

    pub(crate) fn from_parts(
        objective: Objective,
        dims: Dims,
        stretch: (f64, f64),
        vocab_hash: String,
        params: Vec<f64>,
    ) -> Result<Self> {
        if params.len() != dims.param_count() {
            return Err(Error::CheckpointShape(format!(
                "{} parameters for dimensions needing {}",
                params.len(),
                dims.param_count()
            )));
        }
        if !(stretch.0 < 0.0 && stretch.1 > 1.0) {
            return Err(Error::CheckpointFormat(format!("invalid stretch constants {stretch:?}")));
        }
        Ok(Self {
            objective,
            dims,
            stretch_lower: stretch.0,
            stretch_upper: stretch.1,
            vocab_hash,
            layout: dims.layout(),
            params,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Direct parameter access for optimisers and gradient checks. Callers
    /// that persist the model should call [`Self::round_to_f32`] afterwards.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Checks that this model was built for `vocab`.
    pub fn ensure_vocab(&self, vocab: &crate::corpus::Vocabulary) -> Result<()> {
        if vocab.len() != self.dims.vocab_size {
            return Err(Error::CheckpointShape(format!(
                "model vocabulary size {} but current vocabulary has {}",
                self.dims.vocab_size,
                vocab.len()
            )));
        }
        if vocab.hash() != self.vocab_hash {
            return Err(Error::VocabMismatch {
                bias: self.vocab_hash.clone(),
                current: vocab.hash(),
            });
        }
        Ok(())
    }

    fn seg(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    pub fn hardkuma(&self, a: f64, b: f64) -> HardKuma {
        HardKuma {
            a,
            b,
            l: self.stretch_lower,
            r: self.stretch_upper,
        }
    }

    /// Token `i` sees its own embedding concatenated with the mean of the
    /// embeddings in the clipped window `[i - 2, i + 2]`, followed by two
    /// affine + ReLU layers.
    pub fn encode(&self, ids: &[usize]) -> Encoded {
        let Dims { embed: d, hidden: h, .. } = self.dims;
        let n = ids.len();
        let emb = self.seg(&self.layout.embedding);
        let row = |id: usize| {
            let id = id.min(self.dims.vocab_size - 1);
            &emb[id * d..(id + 1) * d]
        };
        let mut inputs = vec![0.0; n * 2 * d];
        for i in 0..n {
            let input = &mut inputs[i * 2 * d..(i + 1) * 2 * d];
            input[..d].copy_from_slice(row(ids[i]));
            let window = context_window(i, n);
            let scale = 1.0 / window.len() as f64;
            for j in window {
                for (c, e) in input[d..].iter_mut().zip(row(ids[j])) {
                    *c += e * scale;
                }
            }
        }
        let (w1, b1) = (self.seg(&self.layout.w1), self.seg(&self.layout.b1));
        let (w2, b2) = (self.seg(&self.layout.w2), self.seg(&self.layout.b2));
        let pre1 = affine(w1, b1, &inputs, n, 2 * d, h);
        let hidden1: Vec<f64> = pre1.iter().map(|&x| x.max(0.0)).collect();
        let pre2 = affine(w2, b2, &hidden1, n, h, h);
        let reps = pre2.iter().map(|&x| x.max(0.0)).collect();
        Encoded {
            n,
            inputs,
            pre1,
            hidden1,
            pre2,
            reps,
        }
    }

    /// Raw head scores `(s_a, s_b)` per token, before softplus.
    pub(crate) fn head_scores(&self, enc: &Encoded) -> Vec<(f64, f64)> {
        let h = self.dims.hidden;
        let (wa, ba) = (self.seg(&self.layout.wa), self.params[self.layout.ba.start]);
        let (wb, bb) = (self.seg(&self.layout.wb), self.params[self.layout.bb.start]);
        (0..enc.n)
            .map(|i| {
                let r = enc.rep(i, h);
                (dot(wa, r) + ba, dot(wb, r) + bb)
            })
            .collect()
    }

    /// HardKuma shape parameters `(a_i, b_i) = softplus(score) + 1e-4`.
    pub fn extractor_params(&self, enc: &Encoded) -> Vec<(f64, f64)> {
        self.head_scores(enc)
            .into_iter()
            .map(|(sa, sb)| (softplus(sa) + SHAPE_FLOOR, softplus(sb) + SHAPE_FLOOR))
            .collect()
    }

    pub fn selection_probs_encoded(&self, enc: &Encoded) -> Vec<f64> {
        self.extractor_params(enc)
            .into_iter()
            .map(|(a, b)| self.hardkuma(a, b).selection_prob())
            .collect()
    }

    pub fn selection_probs(&self, ids: &[usize]) -> Vec<f64> {
        self.selection_probs_encoded(&self.encode(ids))
    }

    /// Class logits from masked mean pooling of encoder outputs.
    pub fn logits_encoded(&self, enc: &Encoded, mask: &[f64]) -> Vec<f64> {
        let pooled = self.pool(enc, mask);
        let Dims { hidden: h, classes: c, .. } = self.dims;
        affine(self.seg(&self.layout.wc), self.seg(&self.layout.bc), &pooled, 1, h, c)
    }

    pub(crate) fn pool(&self, enc: &Encoded, mask: &[f64]) -> Vec<f64> {
        assert_eq!(mask.len(), enc.n, "mask length must equal input length");
        let h = self.dims.hidden;
        let total: f64 = mask.iter().sum();
        let denom = total.max(POOL_FLOOR);
        let mut pooled = vec![0.0; h];
        for (i, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                for (p, r) in pooled.iter_mut().zip(enc.rep(i, h)) {
                    *p += m * r;
                }
            }
        }
        pooled.iter_mut().for_each(|p| *p /= denom);
        pooled
    }

    pub fn predict_encoded(&self, enc: &Encoded, mask: &[f64]) -> Vec<f64> {
        softmax(&self.logits_encoded(enc, mask))
    }

    /// Class distribution for input `ids` restricted by `mask`.
    pub fn predict(&self, ids: &[usize], mask: &[f64]) -> Vec<f64> {
        self.predict_encoded(&self.encode(ids), mask)
    }

    pub fn rationale(&self, ids: &[usize], policy: &dyn MaskPolicy) -> RationaleState {
        RationaleState::new(self.objective, self.selection_probs(ids), policy)
    }
}

pub(crate) fn context_window(i: usize, n: usize) -> Range<usize> {
    i.saturating_sub(CONTEXT_RADIUS)..(i + CONTEXT_RADIUS + 1).min(n)
}

/// Row-wise `W x + b` for `rows` inputs of width `inp`; `W` is `out x inp`.
fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            y.push(dot(&w[o * inp..(o + 1) * inp], xr) + b[o]);
        }
    }
    y
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Converts a binary mask into pooling weights.
pub fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}
