//! Training forward pass and hand-written reverse-mode gradients.
//!
//! The loss is supplied as a [`Loss`] over the model outputs (logits,
//! per-token selection probabilities and gate samples). [`gradient`]
//! accumulates exact gradients of the mean batch loss into a buffer shaped
//! like the parameters.

use super::{context_window, dot, sigmoid, softmax, softplus, Dims, Encoded, ModelBundle, POOL_FLOOR, SHAPE_FLOOR};
use crate::error::{Error, Result};
use crate::rationale::ParamGrad;

/// One example in a gradient batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub ids: Vec<usize>,
    pub label: usize,
    /// One uniform draw in (0, 1) per token for the reparameterised gates.
    pub uniforms: Vec<f64>,
    /// Frozen bias-model energies, when the loss needs them.
    pub bias_energy: Option<Vec<f64>>,
    /// Pool over every token: all gates are 1 and carry no gradient.
    pub full_text: bool,
}

/// Everything the loss may depend on.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub encoded: Encoded,
    pub head_scores: Vec<(f64, f64)>,
    pub shapes: Vec<(f64, f64)>,
    pub select: Vec<ParamGrad>,
    pub gates: Vec<ParamGrad>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TrainOutputs {
    pub fn select_probs(&self) -> Vec<f64> {
        self.select.iter().map(|s| s.value).collect()
    }

    pub fn gate_values(&self) -> Vec<f64> {
        self.gates.iter().map(|g| g.value).collect()
    }
}

/// Loss value broken into named parts; `total` is what gets differentiated.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub nll: f64,
    pub sparsity: f64,
    pub dc: f64,
    /// NLL on full-text items.
    pub full_nll: f64,
}

/// Gradients of one example's loss with respect to the model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub logits: Vec<f64>,
    pub select_prob: Vec<f64>,
    pub gate: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros(n: usize, classes: usize) -> Self {
        Self {
            logits: vec![0.0; classes],
            select_prob: vec![0.0; n],
            gate: vec![0.0; n],
        }
    }
}

pub trait Loss {
    fn evaluate(&self, item: &BatchItem, out: &TrainOutputs) -> (LossValue, OutputGrads);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Forward pass with sampled gates, or all-ones gates for full-text items.
pub fn forward_train(model: &ModelBundle, item: &BatchItem) -> TrainOutputs {
    assert_eq!(item.uniforms.len(), item.ids.len(), "one uniform per token");
    let encoded = model.encode(&item.ids);
    let head_scores = model.head_scores(&encoded);
    let shapes: Vec<(f64, f64)> = head_scores
        .iter()
        .map(|&(sa, sb)| (softplus(sa) + SHAPE_FLOOR, softplus(sb) + SHAPE_FLOOR))
        .collect();
    let select = shapes
        .iter()
        .map(|&(a, b)| model.hardkuma(a, b).selection_prob_grad())
        .collect();
    let gates: Vec<ParamGrad> = if item.full_text {
        vec![
            ParamGrad {
                value: 1.0,
                d_a: 0.0,
                d_b: 0.0
            };
            item.ids.len()
        ]
    } else {
        shapes
            .iter()
            .zip(&item.uniforms)
            .map(|(&(a, b), &u)| model.hardkuma(a, b).sample_grad(u))
            .collect()
    };
    let gate_values: Vec<f64> = gates.iter().map(|g| g.value).collect();
    let pooled = model.pool(&encoded, &gate_values);
    let logits = model.logits_encoded(&encoded, &gate_values);
    let probs = softmax(&logits);
    TrainOutputs {
        encoded,
        head_scores,
        shapes,
        select,
        gates,
        pooled,
        logits,
        probs,
    }
}

/// Mean loss over `batch` and its exact gradient.
pub fn gradient(model: &ModelBundle, loss: &dyn Loss, batch: &[BatchItem]) -> Result<(LossValue, Gradients)> {
    let mut grads = Gradients::zeros(model.dims);
    let mut mean = LossValue::default();
    if batch.is_empty() {
        return Ok((mean, grads));
    }
    let scale = 1.0 / batch.len() as f64;
    for (index, item) in batch.iter().enumerate() {
        let out = forward_train(model, item);
        let (value, out_grads) = loss.evaluate(item, &out);
        if !value.total.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        mean.total += value.total * scale;
        mean.nll += value.nll * scale;
        mean.sparsity += value.sparsity * scale;
        mean.dc += value.dc * scale;
        backward(model, item, &out, &out_grads, scale, &mut grads.values);
    }
    Ok((mean, grads))
}

fn backward(
    model: &ModelBundle,
    item: &BatchItem,
    out: &TrainOutputs,
    og: &OutputGrads,
    scale: f64,
    g: &mut [f64],
) {
    let Dims {
        embed: d,
        hidden: h,
        classes: c,
        vocab_size,
    } = model.dims;
    let l = model.layout();
    let p = model.params();
    let enc = &out.encoded;
    let n = enc.n;

    // Classifier.
    let d_logits: Vec<f64> = og.logits.iter().map(|v| v * scale).collect();
    let mut d_pooled = vec![0.0; h];
    for k in 0..c {
        let row = l.wc.start + k * h;
        for j in 0..h {
            g[row + j] += d_logits[k] * out.pooled[j];
            d_pooled[j] += d_logits[k] * p[row + j];
        }
        g[l.bc.start + k] += d_logits[k];
    }

    // Masked mean pooling.
    let gate: Vec<f64> = out.gates.iter().map(|gp| gp.value).collect();
    let total: f64 = gate.iter().sum();
    let clamped = total <= POOL_FLOOR;
    let denom = total.max(POOL_FLOOR);
    let mut d_reps = vec![0.0; n * h];
    let mut d_gate: Vec<f64> = og.gate.iter().map(|v| v * scale).collect();
    for i in 0..n {
        let r = enc.rep(i, h);
        let centered = if clamped {
            dot(r, &d_pooled)
        } else {
            r.iter().zip(&out.pooled).zip(&d_pooled).map(|((r, q), dp)| (r - q) * dp).sum()
        };
        d_gate[i] += centered / denom;
        let w = gate[i] / denom;
        if w != 0.0 {
            for (dr, dp) in d_reps[i * h..(i + 1) * h].iter_mut().zip(&d_pooled) {
                *dr += w * dp;
            }
        }
    }

    // Extractor head: gates and selection probabilities depend on (a, b).
    for i in 0..n {
        let ds = og.select_prob[i] * scale;
        let (gs, sel) = (&out.gates[i], &out.select[i]);
        let d_a = d_gate[i] * gs.d_a + ds * sel.d_a;
        let d_b = d_gate[i] * gs.d_b + ds * sel.d_b;
        let (sa, sb) = out.head_scores[i];
        let d_sa = d_a * sigmoid(sa);
        let d_sb = d_b * sigmoid(sb);
        if d_sa == 0.0 && d_sb == 0.0 {
            continue;
        }
        let r = enc.rep(i, h);
        for j in 0..h {
            g[l.wa.start + j] += d_sa * r[j];
            g[l.wb.start + j] += d_sb * r[j];
            d_reps[i * h + j] += d_sa * p[l.wa.start + j] + d_sb * p[l.wb.start + j];
        }
        g[l.ba.start] += d_sa;
        g[l.bb.start] += d_sb;
    }

    // Encoder layer 2.
    let mut d_hidden1 = vec![0.0; n * h];
    for i in 0..n {
        let h1 = &enc.hidden1[i * h..(i + 1) * h];
        for o in 0..h {
            if enc.pre2[i * h + o] <= 0.0 {
                continue;
            }
            let dz = d_reps[i * h + o];
            if dz == 0.0 {
                continue;
            }
            let row = l.w2.start + o * h;
            for j in 0..h {
                g[row + j] += dz * h1[j];
                d_hidden1[i * h + j] += dz * p[row + j];
            }
            g[l.b2.start + o] += dz;
        }
    }

    // Encoder layer 1.
    let width = 2 * d;
    let mut d_inputs = vec![0.0; n * width];
    for i in 0..n {
        let x = &enc.inputs[i * width..(i + 1) * width];
        for o in 0..h {
            if enc.pre1[i * h + o] <= 0.0 {
                continue;
            }
            let dz = d_hidden1[i * h + o];
            if dz == 0.0 {
                continue;
            }
            let row = l.w1.start + o * width;
            for j in 0..width {
                g[row + j] += dz * x[j];
                d_inputs[i * width + j] += dz * p[row + j];
            }
            g[l.b1.start + o] += dz;
        }
    }

    // Embedding rows: own slot plus every window the token belongs to.
    for i in 0..n {
        let own = item.ids[i].min(vocab_size - 1);
        let di = &d_inputs[i * width..(i + 1) * width];
        let base = l.embedding.start + own * d;
        for j in 0..d {
            g[base + j] += di[j];
        }
        let window = context_window(i, n);
        let share = 1.0 / window.len() as f64;
        for k in window {
            let base = l.embedding.start + item.ids[k].min(vocab_size - 1) * d;
            for j in 0..d {
                g[base + j] += di[d + j] * share;
            }
        }
    }
}
