//! Inference-time pipeline shared by the CLI and the HTTP service: analyse
//! an input with both extractors, then fold parsed feedback into the task
//! rationale.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Example, LabelMaps, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_masks, EvalContext, EvalReport};
use crate::feedback::{
    labels_to_user_probs, overlay_and_repredict, parse_with_fallback, smooth_bias_probs, user_prob_mode,
    FeedbackParse, FeedbackParser, OverlayResult,
};
use crate::model::{load_checkpoint, ModelBundle};
use crate::rationale::{mask_policy, MaskPolicy, Objective, RationaleState};

pub const VOCAB_FILE: &str = "vocab.json";
pub const LABELS_FILE: &str = "labels.json";
pub const BIAS_CHECKPOINT: &str = "bias.ckpt";
pub const TASK_CHECKPOINT: &str = "task.ckpt";

/// Bias variable named in prompts and parser calls.
pub const BIAS_VARIABLE: &str = "gender";

/// Tolerance used when overlaying feedback at inference time.
pub const INFERENCE_TAU: f64 = 0.0;

/// File layout of a training run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(path.into())
    }

    pub fn vocab(&self) -> PathBuf {
        self.0.join(VOCAB_FILE)
    }

    pub fn labels(&self) -> PathBuf {
        self.0.join(LABELS_FILE)
    }

    pub fn bias_checkpoint(&self) -> PathBuf {
        self.0.join(BIAS_CHECKPOINT)
    }

    pub fn task_checkpoint(&self) -> PathBuf {
        self.0.join(TASK_CHECKPOINT)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

/// Both extractors on one input, before any feedback.
///
/// `task` is the raw task extractor output. `baseline` is the state the
/// user first sees: the model's own bias belief overlaid on the task
/// energies, which is what feedback with `alpha = 1` reproduces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub tokens: TokenSequence,
    pub task: RationaleState,
    pub bias: RationaleState,
    pub baseline: OverlayResult,
}

pub struct Engine {
    pub bias_model: ModelBundle,
    pub task_model: ModelBundle,
    pub vocab: Vocabulary,
    pub labels: LabelMaps,
    pub policy: Box<dyn MaskPolicy>,
}

impl Engine {
    pub fn new(
        bias_model: ModelBundle,
        task_model: ModelBundle,
        vocab: Vocabulary,
        labels: LabelMaps,
        policy: Box<dyn MaskPolicy>,
    ) -> Result<Self> {
        if bias_model.objective != Objective::Bias || task_model.objective != Objective::Task {
            return Err(Error::Config("expected a bias checkpoint and a task checkpoint".into()));
        }
        bias_model.ensure_vocab(&vocab)?;
        task_model.ensure_vocab(&vocab)?;
        if bias_model.dims.classes != labels.num_bias_classes() || task_model.dims.classes != labels.num_task_classes()
        {
            return Err(Error::CheckpointShape("class counts disagree with the label maps".into()));
        }
        Ok(Self {
            bias_model,
            task_model,
            vocab,
            labels,
            policy,
        })
    }

    pub fn load(run: &RunDir, policy: &str) -> Result<Self> {
        Self::new(
            load_checkpoint(&run.bias_checkpoint())?,
            load_checkpoint(&run.task_checkpoint())?,
            Vocabulary::load(&run.vocab())?,
            LabelMaps::load(&run.labels())?,
            mask_policy(policy)?,
        )
    }

    pub fn with_policy(mut self, policy: Box<dyn MaskPolicy>) -> Self {
        self.policy = policy;
        self
    }

    pub fn context(&self) -> EvalContext<'_> {
        EvalContext {
            task_model: &self.task_model,
            bias_model: &self.bias_model,
            policy: self.policy.as_ref(),
        }
    }

    pub fn analyze_text(&self, text: &str) -> Result<Analysis> {
        self.analyze_text_with(text, self.policy.as_ref())
    }

    pub fn analyze_text_with(&self, text: &str, policy: &dyn MaskPolicy) -> Result<Analysis> {
        let mut tokens = tokenize(text)?;
        self.vocab.encode(&mut tokens);
        Ok(self.analyze_tokens_with(tokens, policy))
    }

    pub fn analyze_tokens(&self, tokens: TokenSequence) -> Analysis {
        self.analyze_tokens_with(tokens, self.policy.as_ref())
    }

    pub fn analyze_tokens_with(&self, tokens: TokenSequence, policy: &dyn MaskPolicy) -> Analysis {
        let task = self.task_model.rationale(&tokens.ids, policy);
        let bias = self.bias_model.rationale(&tokens.ids, policy);
        let baseline = overlay_and_repredict(
            &self.task_model,
            &tokens.ids,
            &task.energy,
            &bias.select_prob,
            INFERENCE_TAU,
            policy,
        )
        .expect("extractor outputs are index-aligned with the input");
        Analysis {
            tokens,
            task,
            bias,
            baseline,
        }
    }

    /// Smooths `parse` into the current bias belief and overlays the result
    /// on the original task energies. `current_bias_prob` is the bias belief
    /// left by earlier feedback turns, or the extractor's own for the first.
    pub fn apply_feedback(
        &self,
        analysis: &Analysis,
        current_bias_prob: &[f64],
        parse: &FeedbackParse,
        mode: &str,
        alpha: f64,
    ) -> Result<OverlayResult> {
        self.apply_feedback_with(analysis, current_bias_prob, parse, mode, alpha, self.policy.as_ref())
    }

    pub fn apply_feedback_with(
        &self,
        analysis: &Analysis,
        current_bias_prob: &[f64],
        parse: &FeedbackParse,
        mode: &str,
        alpha: f64,
        policy: &dyn MaskPolicy,
    ) -> Result<OverlayResult> {
        parse.validate(analysis.tokens.len())?;
        let user = labels_to_user_probs(parse, user_prob_mode(mode)?.as_ref());
        let p_new = smooth_bias_probs(current_bias_prob, &user, alpha)?;
        overlay_and_repredict(
            &self.task_model,
            &analysis.tokens.ids,
            &analysis.task.energy,
            &p_new,
            INFERENCE_TAU,
            policy,
        )
    }

    /// Human-readable class name for a task class id.
    pub fn task_class_name(&self, id: usize) -> &str {
        self.labels.profession.get(id).map_or("?", String::as_str)
    }
}

/// One line of a scripted-feedback file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFeedback {
    pub example_index: usize,
    pub feedback: String,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_mode() -> String {
    "coarse".into()
}

fn default_alpha() -> f64 {
    0.5
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptedFeedback>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub before: EvalReport,
    pub after: EvalReport,
    pub applied: usize,
    /// Script line index to error message.
    pub failures: BTreeMap<usize, String>,
    pub notices: Vec<String>,
}

/// Replays scripted feedback over `corpus`. Lines for the same example are
/// applied in file order, each building on the previous one. Examples
/// without feedback keep their baseline rationale, so `before` equals the
/// `no-feedback` evaluation arm.
pub fn simulate(
    engine: &Engine,
    corpus: &[Example],
    script: &[ScriptedFeedback],
    parser: &dyn FeedbackParser,
) -> Result<SimulationReport> {
    let mut analyses: Vec<Analysis> = corpus.iter().map(|ex| engine.analyze_tokens(ex.tokens.clone())).collect();
    let before_masks: Vec<Vec<bool>> = analyses.iter().map(|a| a.baseline.mask.clone()).collect();
    let mut after_masks = before_masks.clone();
    let mut beliefs: Vec<Vec<f64>> = analyses.iter().map(|a| a.baseline.bias_prob_new.clone()).collect();

    let mut failures = BTreeMap::new();
    let mut notices = Vec::new();
    let mut applied = 0;
    for (line, step) in script.iter().enumerate() {
        let k = step.example_index;
        if k >= corpus.len() {
            failures.insert(line, format!("example index {k} out of range ({} examples)", corpus.len()));
            continue;
        }
        let analysis = &mut analyses[k];
        let outcome = parse_with_fallback(parser, &step.feedback, &analysis.tokens, BIAS_VARIABLE).and_then(
            |(parse, notice)| {
                let result = engine.apply_feedback(analysis, &beliefs[k], &parse, &step.mode, step.alpha)?;
                Ok((result, notice))
            },
        );
        match outcome {
            Ok((result, notice)) => {
                notices.extend(notice);
                after_masks[k] = result.mask;
                beliefs[k] = result.bias_prob_new;
                applied += 1;
            }
            Err(e) => {
                failures.insert(line, e.to_string());
            }
        }
    }
    // Unused from here on; drop the token copies early on large corpora.
    analyses.clear();

    let ctx = engine.context();
    Ok(SimulationReport {
        before: evaluate_masks("no-feedback", &ctx, corpus, &before_masks)?,
        after: evaluate_masks("feedback", &ctx, corpus, &after_masks)?,
        applied,
        failures,
        notices,
    })
}
