use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{FeedbackParse, Label};
use crate::error::{Error, Result};
use crate::model::{mask_weights, ModelBundle};
use crate::rationale::{energy, prob_from_energy, MaskPolicy};
use crate::registry::Registry;

/// Converts parsed labels to per-token user bias probabilities.
pub trait UserProbMode: Send + Sync {
    fn name(&self) -> &'static str;

    fn user_prob(&self, label: Label, confidence: Option<f64>) -> Option<f64>;
}

/// Hard 1/0 probabilities from the label alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct Coarse;

/// The parser's confidence used as a soft probability.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fine;

impl UserProbMode for Coarse {
    fn name(&self) -> &'static str {
        "coarse"
    }

    fn user_prob(&self, label: Label, _confidence: Option<f64>) -> Option<f64> {
        match label {
            Label::High => Some(1.0),
            Label::Low => Some(0.0),
            Label::Na => None,
        }
    }
}

impl UserProbMode for Fine {
    fn name(&self) -> &'static str {
        "fine"
    }

    fn user_prob(&self, label: Label, confidence: Option<f64>) -> Option<f64> {
        match label {
            Label::Na => None,
            // A label without a confidence degrades to the coarse value.
            _ => confidence.or_else(|| Coarse.user_prob(label, None)),
        }
    }
}

pub fn user_prob_modes() -> &'static Registry<dyn UserProbMode> {
    static REGISTRY: OnceLock<Registry<dyn UserProbMode>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn UserProbMode> = Registry::new("feedback mode");
        reg.register("coarse", |_| Ok(Box::new(Coarse)));
        reg.register("fine", |_| Ok(Box::new(Fine)));
        reg
    })
}

pub fn user_prob_mode(name: &str) -> Result<Box<dyn UserProbMode>> {
    user_prob_modes().create(name)
}

pub fn labels_to_user_probs(parse: &FeedbackParse, mode: &dyn UserProbMode) -> Vec<Option<f64>> {
    parse
        .labels
        .iter()
        .zip(&parse.confidence)
        .map(|(&label, &conf)| mode.user_prob(label, conf))
        .collect()
}

/// `alpha * g_b + (1 - alpha) * p_user` where feedback exists; `g_b` elsewhere.
pub fn smooth_bias_probs(bias_probs: &[f64], user_probs: &[Option<f64>], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if bias_probs.len() != user_probs.len() {
        return Err(Error::Data(format!(
            "{} bias probabilities but {} user probabilities",
            bias_probs.len(),
            user_probs.len()
        )));
    }
    Ok(bias_probs
        .iter()
        .zip(user_probs)
        .map(|(&g, u)| match u {
            Some(p) => alpha * g + (1.0 - alpha) * p,
            None => g,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayResult {
    pub bias_prob_new: Vec<f64>,
    pub bias_energy_new: Vec<f64>,
    pub task_energy_adj: Vec<f64>,
    pub task_prob_adj: Vec<f64>,
    pub mask: Vec<bool>,
    pub prediction: Vec<f64>,
}

/// Subtracts the bias energy in excess of `tau` from each task energy, then
/// re-extracts the rationale and re-predicts.
pub fn overlay_and_repredict(
    task_model: &ModelBundle,
    ids: &[usize],
    task_energy: &[f64],
    bias_prob_new: &[f64],
    tau: f64,
    policy: &dyn MaskPolicy,
) -> Result<OverlayResult> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be non-negative, got {tau}")));
    }
    let n = ids.len();
    if task_energy.len() != n || bias_prob_new.len() != n {
        return Err(Error::Data(format!(
            "overlay length mismatch: {n} tokens, {} task energies, {} bias probabilities",
            task_energy.len(),
            bias_prob_new.len()
        )));
    }
    let bias_energy_new: Vec<f64> = bias_prob_new.iter().map(|&p| energy(p)).collect();
    let task_energy_adj: Vec<f64> = task_energy
        .iter()
        .zip(&bias_energy_new)
        .map(|(&et, &eb)| (et - (eb - tau).max(0.0)).max(0.0))
        .collect();
    let task_prob_adj: Vec<f64> = task_energy_adj.iter().map(|&e| prob_from_energy(e)).collect();
    let mask = policy.select(&task_prob_adj);
    let prediction = task_model.predict(ids, &mask_weights(&mask));
    Ok(OverlayResult {
        bias_prob_new: bias_prob_new.to_vec(),
        bias_energy_new,
        task_energy_adj,
        task_prob_adj,
        mask,
        prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::ParseSource;
    use crate::model::Dims;
    use crate::rationale::{Objective, Threshold};
    use proptest::prelude::*;

    fn parse_of(labels: &[Label], conf: &[Option<f64>]) -> FeedbackParse {
        FeedbackParse {
            labels: labels.to_vec(),
            confidence: conf.to_vec(),
            source: ParseSource::Grammar,
            warnings: vec![],
        }
    }

    fn small_model() -> ModelBundle {
        let dims = Dims {
            vocab_size: 10,
            embed: 4,
            hidden: 4,
            classes: 3,
        };
        ModelBundle::init(Objective::Task, dims, "h", 3).unwrap()
    }

    #[test]
    fn coarse_and_fine_rules() {
        let p = parse_of(&[Label::High, Label::Na, Label::Low], &[Some(0.9), None, Some(0.1)]);
        assert_eq!(labels_to_user_probs(&p, &Coarse), [Some(1.0), None, Some(0.0)]);
        assert_eq!(labels_to_user_probs(&p, &Fine), [Some(0.9), None, Some(0.1)]);
        let hard = parse_of(&[Label::High, Label::Low], &[Some(1.0), Some(0.0)]);
        assert_eq!(labels_to_user_probs(&hard, &Fine), labels_to_user_probs(&hard, &Coarse));
    }

    #[test]
    fn smoothing_substitution() {
        let p = smooth_bias_probs(&[0.2, 0.4], &[Some(1.0), None], 0.6).unwrap();
        // 0.6 * 0.2 + 0.4 * 1.0
        assert!((p[0] - 0.52).abs() < 1e-12);
        assert_eq!(p[1], 0.4);
        assert_eq!(smooth_bias_probs(&[0.2, 0.4], &[Some(1.0), Some(0.0)], 1.0).unwrap(), [0.2, 0.4]);
        assert!(smooth_bias_probs(&[0.2], &[None], 1.5).is_err());
        assert!(smooth_bias_probs(&[0.2], &[], 0.5).is_err());
    }

    #[test]
    fn overlay_floor_example() {
        let model = small_model();
        let eb_prob = prob_from_energy(0.7);
        let r = overlay_and_repredict(&model, &[2, 3], &[0.5, 0.5], &[eb_prob, 0.0], 0.0, &Threshold { theta: 0.3 })
            .unwrap();
        assert_eq!(r.task_energy_adj[0], 0.0);
        assert_eq!(r.task_energy_adj[1], 0.5);
    }

    #[test]
    fn zero_overlay_is_identity() {
        let model = small_model();
        let ids = [2, 5, 7, 3];
        let policy = Threshold { theta: 0.5 };
        let base = model.rationale(&ids, &policy);
        let r = overlay_and_repredict(&model, &ids, &base.energy, &[0.0; 4], 0.0, &policy).unwrap();
        assert_eq!(r.task_energy_adj, base.energy);
        assert_eq!(r.mask, base.mask);
        assert_eq!(r.prediction, model.predict(&ids, &mask_weights(&base.mask)));
    }

    proptest! {
        #[test]
        fn raising_user_prob_never_raises_task_energy(
            et in proptest::collection::vec(0.0f64..5.0, 1..12),
            gb_seed in proptest::collection::vec(0.0f64..1.0, 12),
            pu in 0.0f64..1.0, bump in 0.0f64..1.0, alpha in 0.0f64..0.999, pick in 0usize..12,
        ) {
            let model = small_model();
            let n = et.len();
            let i = pick % n;
            let ids: Vec<usize> = (0..n).map(|k| 2 + k % 8).collect();
            let gb = &gb_seed[..n];
            let mut user = vec![None; n];
            user[i] = Some(pu);
            let policy = Threshold { theta: 0.5 };
            let lo = overlay_and_repredict(&model, &ids, &et, &smooth_bias_probs(gb, &user, alpha).unwrap(), 0.0, &policy).unwrap();
            user[i] = Some((pu + bump).min(1.0));
            let hi = overlay_and_repredict(&model, &ids, &et, &smooth_bias_probs(gb, &user, alpha).unwrap(), 0.0, &policy).unwrap();
            prop_assert!(hi.task_energy_adj[i] <= lo.task_energy_adj[i]);
            prop_assert!(hi.task_prob_adj[i] <= lo.task_prob_adj[i]);
        }
    }
}
