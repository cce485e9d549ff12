use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::metrics::{
    bias_probe_f1, comprehensiveness, per_class_f1, predicted_class, probe_predictions, rerank_rationale, sufficiency,
};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::feedback::overlay_and_repredict;
use crate::model::{mask_weights, ModelBundle};
use crate::rationale::{energy, MaskPolicy};
use crate::registry::Registry;

pub struct EvalContext<'a> {
    pub task_model: &'a ModelBundle,
    pub bias_model: &'a ModelBundle,
    pub policy: &'a dyn MaskPolicy,
}

/// A way of choosing the tokens the task model is allowed to see.
pub trait EvalArm: Send + Sync {
    fn name(&self) -> &'static str;

    fn mask(&self, ctx: &EvalContext<'_>, example: &Example) -> Result<Vec<bool>>;
}

/// Every token visible.
pub struct FullText;

/// The raw task extractor rationale.
pub struct Extractor;

/// The inference-time rationale before any feedback: the bias extractor's
/// own beliefs overlaid on the task energies.
pub struct NoFeedback;

/// As many tokens as the extractor rationale holds, chosen by ascending
/// bias energy.
pub struct Rerank;

impl EvalArm for FullText {
    fn name(&self) -> &'static str {
        "full-text"
    }

    fn mask(&self, _ctx: &EvalContext<'_>, example: &Example) -> Result<Vec<bool>> {
        Ok(vec![true; example.tokens.len()])
    }
}

impl EvalArm for Extractor {
    fn name(&self) -> &'static str {
        "extractor"
    }

    fn mask(&self, ctx: &EvalContext<'_>, example: &Example) -> Result<Vec<bool>> {
        Ok(ctx.policy.select(&ctx.task_model.selection_probs(&example.tokens.ids)))
    }
}

impl EvalArm for NoFeedback {
    fn name(&self) -> &'static str {
        "no-feedback"
    }

    fn mask(&self, ctx: &EvalContext<'_>, example: &Example) -> Result<Vec<bool>> {
        let ids = &example.tokens.ids;
        let task_energy: Vec<f64> = ctx.task_model.selection_probs(ids).iter().map(|&p| energy(p)).collect();
        let bias_prob = ctx.bias_model.selection_probs(ids);
        Ok(overlay_and_repredict(ctx.task_model, ids, &task_energy, &bias_prob, 0.0, ctx.policy)?.mask)
    }
}

impl EvalArm for Rerank {
    fn name(&self) -> &'static str {
        "rerank"
    }

    fn mask(&self, ctx: &EvalContext<'_>, example: &Example) -> Result<Vec<bool>> {
        let ids = &example.tokens.ids;
        let task_probs = ctx.task_model.selection_probs(ids);
        let budget = ctx.policy.select(&task_probs).iter().filter(|&&m| m).count().max(1);
        let task_energy: Vec<f64> = task_probs.iter().map(|&p| energy(p)).collect();
        let bias_energy: Vec<f64> = ctx.bias_model.selection_probs(ids).iter().map(|&p| energy(p)).collect();
        rerank_rationale(&task_energy, &bias_energy, budget)
    }
}

pub fn eval_arms() -> &'static Registry<dyn EvalArm> {
    static REGISTRY: OnceLock<Registry<dyn EvalArm>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn EvalArm> = Registry::new("evaluation arm");
        reg.register("full-text", |_| Ok(Box::new(FullText)));
        reg.register("extractor", |_| Ok(Box::new(Extractor)));
        reg.register("no-feedback", |_| Ok(Box::new(NoFeedback)));
        reg.register("rerank", |_| Ok(Box::new(Rerank)));
        reg
    })
}

pub fn eval_arm(name: &str) -> Result<Box<dyn EvalArm>> {
    eval_arms().create(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub examples: usize,
    pub task_accuracy: f64,
    pub bias_f1: f64,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    /// Mean fraction of tokens kept by the masks.
    pub rationale_fraction: f64,
    pub task_f1_per_class: Vec<f64>,
    pub bias_f1_per_class: Vec<f64>,
    pub config: BTreeMap<String, String>,
}

pub fn evaluate(arm: &dyn EvalArm, ctx: &EvalContext<'_>, corpus: &[Example]) -> Result<EvalReport> {
    let masks = corpus.iter().map(|ex| arm.mask(ctx, ex)).collect::<Result<Vec<_>>>()?;
    evaluate_masks(arm.name(), ctx, corpus, &masks)
}

/// Scores precomputed task masks, one per example.
pub fn evaluate_masks(
    arm: &str,
    ctx: &EvalContext<'_>,
    corpus: &[Example],
    masks: &[Vec<bool>],
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Data("evaluation over an empty corpus".into()));
    }
    if masks.len() != corpus.len() {
        return Err(Error::Data(format!("{} masks for {} examples", masks.len(), corpus.len())));
    }
    let n = corpus.len() as f64;
    let (mut comp, mut suff, mut kept) = (0.0, 0.0, 0.0);
    let mut task_pred = Vec::with_capacity(corpus.len());
    for (ex, mask) in corpus.iter().zip(masks) {
        let ids = &ex.tokens.ids;
        if mask.len() != ids.len() {
            return Err(Error::Data(format!("mask of length {} for {} tokens", mask.len(), ids.len())));
        }
        task_pred.push(predicted_class(&ctx.task_model.predict(ids, &mask_weights(mask))));
        comp += comprehensiveness(ctx.task_model, ids, mask);
        suff += sufficiency(ctx.task_model, ids, mask);
        kept += mask.iter().filter(|&&m| m).count() as f64 / ids.len().max(1) as f64;
    }
    let task_gold: Vec<usize> = corpus.iter().map(|e| e.task_label).collect();
    let correct = task_gold.iter().zip(&task_pred).filter(|(g, p)| g == p).count();
    let bias_gold: Vec<usize> = corpus.iter().map(|e| e.bias_label).collect();
    let bias_pred = probe_predictions(ctx.bias_model, corpus, masks);

    let report = EvalReport {
        arm: arm.to_owned(),
        examples: corpus.len(),
        task_accuracy: correct as f64 / n,
        bias_f1: bias_probe_f1(ctx.bias_model, corpus, masks)?,
        comprehensiveness: comp / n,
        sufficiency: suff / n,
        rationale_fraction: kept / n,
        task_f1_per_class: per_class_f1(&task_gold, &task_pred, ctx.task_model.dims.classes),
        bias_f1_per_class: per_class_f1(&bias_gold, &bias_pred, ctx.bias_model.dims.classes),
        config: BTreeMap::from([
            ("policy".to_owned(), ctx.policy.spec()),
            ("vocab_hash".to_owned(), ctx.task_model.vocab_hash.clone()),
        ]),
    };
    let finite = [report.task_accuracy, report.bias_f1, report.comprehensiveness, report.sufficiency]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Data(format!("non-finite metric in {arm} report")));
    }
    Ok(report)
}
