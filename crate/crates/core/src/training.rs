//! Two-stage training: the bias model first, then the task model against
//! the frozen bias model's energies.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{self, LabelKind};
use crate::model::{self, BatchItem, Dims, Loss, LossValue, ModelBundle, OutputGrads, TrainOutputs};
use crate::rationale::{energy, energy_grad, mask_policy, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Bias tolerance: bias energies at or below it are never penalised.
    pub tau: f64,
    pub lambda_dc: f64,
    pub lambda_s: f64,
    /// Target mean selection probability.
    pub sigma: f64,
    /// Weight of an extra full-text NLL term per example. It keeps the
    /// classifier calibrated on unmasked input, which the bias probe and
    /// the faithfulness metrics evaluate.
    pub lambda_full: f64,
    pub samples_per_example: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Mask policy used for validation.
    pub eval_policy: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 32,
            seed: 7,
            tau: 0.3,
            lambda_dc: 1.0,
            lambda_s: 10.0,
            sigma: 0.3,
            lambda_full: 1.0,
            samples_per_example: 1,
            embed: 32,
            hidden: 32,
            eval_policy: "threshold:0.5".into(),
        }
    }
}

impl TrainConfig {
    /// Defaults for the bias model: a sparser rationale target, so the
    /// extractor concentrates on the few explicitly gendered tokens.
    pub fn bias_defaults() -> Self {
        Self {
            sigma: 0.15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_example == 0 {
            return bad("epochs, batch_size and samples_per_example must be at least 1");
        }
        if !(self.tau >= 0.0 && self.lambda_dc >= 0.0 && self.lambda_s >= 0.0) {
            return bad("tau, lambda_dc and lambda_s must be non-negative");
        }
        if !(self.lambda_full >= 0.0 && self.lambda_full.is_finite()) {
            return bad("lambda_full must be non-negative");
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return bad("sigma must be in (0, 1]");
        }
        if self.embed == 0 || self.hidden == 0 {
            return bad("embed and hidden must be at least 1");
        }
        mask_policy(&self.eval_policy)?;
        Ok(())
    }

    /// Reads a JSON object or flat `key = value` lines (`#` starts a comment).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config = Self::parse(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return Ok(serde_json::from_str(text)?);
        }
        let mut map = serde_json::Map::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let value = value.trim();
            let json = serde_json::from_str(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_owned()));
            map.insert(key.trim().to_owned(), json);
        }
        Ok(serde_json::from_value(serde_json::Value::Object(map))?)
    }
}

/// `e_t + (e_b - tau)` when `e_b > tau`, otherwise zero.
pub fn dc_penalty(e_t: f64, e_b: f64, tau: f64) -> f64 {
    if e_b > tau {
        e_t + (e_b - tau)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcTerm {
    pub lambda: f64,
    pub tau: f64,
}

/// NLL of the gated prediction, squared deviation of the mean selection
/// probability from `sigma`, and optionally the token-mean DC penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationaleLoss {
    pub lambda_s: f64,
    pub sigma: f64,
    pub dc: Option<DcTerm>,
    pub lambda_full: f64,
}

impl Loss for RationaleLoss {
    fn evaluate(&self, item: &BatchItem, out: &TrainOutputs) -> (LossValue, OutputGrads) {
        let n = item.ids.len();
        let mut g = OutputGrads::zeros(n, out.logits.len());

        let nll = -out.probs[item.label].max(f64::MIN_POSITIVE).ln();
        for (k, p) in out.probs.iter().enumerate() {
            g.logits[k] = p - if k == item.label { 1.0 } else { 0.0 };
        }
        if item.full_text {
            g.logits.iter_mut().for_each(|v| *v *= self.lambda_full);
            let value = LossValue {
                total: self.lambda_full * nll,
                full_nll: nll,
                ..LossValue::default()
            };
            return (value, g);
        }

        let mean_select = out.select.iter().map(|s| s.value).sum::<f64>() / n as f64;
        let deviation = mean_select - self.sigma;
        let sparsity = deviation * deviation;
        let d_select = self.lambda_s * 2.0 * deviation / n as f64;
        g.select_prob.iter_mut().for_each(|v| *v = d_select);

        let mut dc = 0.0;
        if let Some(term) = self.dc {
            let bias_energy = item
                .bias_energy
                .as_ref()
                .expect("DC loss needs bias energies");
            for i in 0..n {
                let s = out.select[i].value;
                dc += dc_penalty(energy(s), bias_energy[i], term.tau);
                if bias_energy[i] > term.tau {
                    g.select_prob[i] += term.lambda / n as f64 * energy_grad(s);
                }
            }
            dc /= n as f64;
        }
        let lambda_dc = self.dc.map_or(0.0, |t| t.lambda);
        let total = nll + self.lambda_s * sparsity + lambda_dc * dc;
        (
            LossValue {
                total,
                nll,
                sparsity,
                dc,
                full_nll: 0.0,
            },
            g,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub dc: f64,
    pub sparsity: f64,
    pub valid_accuracy: f64,
    pub valid_bias_f1: f64,
    pub valid_mean_selection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub config: TrainConfig,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn dims_for(config: &TrainConfig, vocab: &Vocabulary, classes: usize) -> Dims {
    Dims {
        vocab_size: vocab.len(),
        embed: config.embed,
        hidden: config.hidden,
        classes,
    }
}

/// Trains `(g_b, f_b)` on bias labels.
pub fn train_bias_model(
    train: &[Example],
    valid: &[Example],
    vocab: &Vocabulary,
    num_bias_classes: usize,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    config.validate()?;
    let init = ModelBundle::init(
        Objective::Bias,
        dims_for(config, vocab, num_bias_classes),
        vocab.hash(),
        config.seed ^ 0xB1A5,
    )?;
    let loss = RationaleLoss {
        lambda_s: config.lambda_s,
        sigma: config.sigma,
        dc: None,
        lambda_full: config.lambda_full,
    };
    run(init, train, valid, None, &loss, LabelKind::Bias, config, |model| {
        let policy = mask_policy(&config.eval_policy)?;
        let masks = evaluation::rationale_masks(model, valid, policy.as_ref());
        evaluation::bias_probe_f1(model, valid, &masks)
    })
}

/// Trains `(g_t, f_t)` on task labels with the DC penalty against the
/// frozen `bias_model`. With `lambda_dc = 0` this is plain rationale
/// training.
pub fn train_task_model(
    train: &[Example],
    valid: &[Example],
    vocab: &Vocabulary,
    num_task_classes: usize,
    bias_model: &ModelBundle,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    config.validate()?;
    bias_model.ensure_vocab(vocab)?;
    let init = ModelBundle::init(
        Objective::Task,
        dims_for(config, vocab, num_task_classes),
        vocab.hash(),
        config.seed ^ 0x7A5C,
    )?;
    let loss = RationaleLoss {
        lambda_s: config.lambda_s,
        sigma: config.sigma,
        dc: Some(DcTerm {
            lambda: config.lambda_dc,
            tau: config.tau,
        }),
        lambda_full: config.lambda_full,
    };
    let bias_energies: Vec<Vec<f64>> = train
        .iter()
        .map(|ex| bias_model.selection_probs(&ex.tokens.ids).into_iter().map(energy).collect())
        .collect();
    run(init, train, valid, Some(&bias_energies), &loss, LabelKind::Task, config, |model| {
        let policy = mask_policy(&config.eval_policy)?;
        let masks = evaluation::rationale_masks(model, valid, policy.as_ref());
        evaluation::bias_probe_f1(bias_model, valid, &masks)
    })
}

#[allow(clippy::too_many_arguments)]
fn run(
    mut model: ModelBundle,
    train: &[Example],
    valid: &[Example],
    bias_energies: Option<&[Vec<f64>]>,
    loss: &dyn Loss,
    labels: LabelKind,
    config: &TrainConfig,
    probe_f1: impl Fn(&ModelBundle) -> Result<f64>,
) -> Result<(ModelBundle, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let policy = mask_policy(&config.eval_policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let items_per_example = config.samples_per_example + usize::from(config.lambda_full > 0.0);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossValue::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * config.samples_per_example);
            for &idx in chunk {
                let ex = &train[idx];
                for _ in 0..config.samples_per_example {
                    batch.push(BatchItem {
                        ids: ex.tokens.ids.clone(),
                        label: labels.of(ex),
                        uniforms: (0..ex.tokens.len())
                            .map(|_| rng.gen_range(1e-9..1.0 - 1e-9))
                            .collect(),
                        bias_energy: bias_energies.map(|e| e[idx].clone()),
                        full_text: false,
                    });
                }
                if config.lambda_full > 0.0 {
                    batch.push(BatchItem {
                        ids: ex.tokens.ids.clone(),
                        label: labels.of(ex),
                        uniforms: vec![0.5; ex.tokens.len()],
                        bias_energy: None,
                        full_text: true,
                    });
                }
            }
            let (value, grads) = model::gradient(&model, loss, &batch).map_err(|e| match e {
                Error::NonFiniteLoss { index } => {
                    let example = chunk[index / items_per_example];
                    log::error!("non-finite loss in epoch {epoch}, example {example}");
                    Error::NonFiniteLoss { index: example }
                }
                other => other,
            })?;
            if !grads.is_finite() {
                return Err(Error::Data(format!("non-finite gradient in epoch {epoch}")));
            }
            for (p, g) in model.params_mut().iter_mut().zip(&grads.values) {
                *p -= config.learning_rate * g;
            }
            model.round_to_f32();
            sums.total += value.total;
            sums.nll += value.nll;
            sums.sparsity += value.sparsity;
            sums.dc += value.dc;
            batches += 1;
        }

        let valid_accuracy = if valid.is_empty() {
            0.0
        } else {
            evaluation::accuracy(&model, valid, policy.as_ref(), labels)?
        };
        let valid_bias_f1 = if valid.is_empty() { 0.0 } else { probe_f1(&model)? };
        let valid_mean_selection = evaluation::mean_selection(&model, valid);
        let b = batches as f64;
        let report = EpochReport {
            epoch,
            loss: sums.total / b,
            nll: sums.nll / b,
            dc: sums.dc / b,
            sparsity: sums.sparsity / b,
            valid_accuracy,
            valid_bias_f1,
            valid_mean_selection,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} nll {:.4} dc {:.4} sparsity {:.4} valid acc {:.4} probe f1 {:.4} sel {:.3}",
            model.objective,
            report.loss,
            report.nll,
            report.dc,
            report.sparsity,
            report.valid_accuracy,
            report.valid_bias_f1,
            report.valid_mean_selection,
        );
        epochs.push(report);
        if best.as_ref().is_none_or(|(acc, _, _)| valid_accuracy > *acc) {
            best = Some((valid_accuracy, epoch, model.clone()));
        }
    }

    let (best_valid_accuracy, best_epoch, best_model) = best.expect("at least one epoch");
    let report = TrainReport {
        objective: best_model.objective,
        config: config.clone(),
        epochs,
        best_epoch,
        best_valid_accuracy,
    };
    Ok((best_model, report))
}
