use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::model::{mask_weights, ModelBundle};
use crate::rationale::{argmax, MaskPolicy};

/// Which label of an [`Example`] a metric scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Task,
    Bias,
}

impl LabelKind {
    pub fn of(self, ex: &Example) -> usize {
        match self {
            LabelKind::Task => ex.task_label,
            LabelKind::Bias => ex.bias_label,
        }
    }
}

/// Argmax with ties going to the lowest class id.
pub fn predicted_class(probs: &[f64]) -> usize {
    argmax(probs)
}

pub fn rationale_masks(model: &ModelBundle, corpus: &[Example], policy: &dyn MaskPolicy) -> Vec<Vec<bool>> {
    corpus
        .iter()
        .map(|ex| policy.select(&model.selection_probs(&ex.tokens.ids)))
        .collect()
}

pub fn mean_selection(model: &ModelBundle, corpus: &[Example]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in corpus {
        let probs = model.selection_probs(&ex.tokens.ids);
        count += probs.len();
        sum += probs.iter().sum::<f64>();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fraction of examples whose prediction on the given masks is correct.
pub fn accuracy_with_masks(
    model: &ModelBundle,
    corpus: &[Example],
    masks: &[Vec<bool>],
    labels: LabelKind,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("accuracy over an empty corpus".into()));
    }
    let correct = corpus
        .iter()
        .zip(masks)
        .filter(|(ex, mask)| {
            predicted_class(&model.predict(&ex.tokens.ids, &mask_weights(mask))) == labels.of(ex)
        })
        .count();
    Ok(correct as f64 / corpus.len() as f64)
}

/// Accuracy of `model` on its own extracted rationales.
pub fn accuracy(model: &ModelBundle, corpus: &[Example], policy: &dyn MaskPolicy, labels: LabelKind) -> Result<f64> {
    accuracy_with_masks(model, corpus, &rationale_masks(model, corpus, policy), labels)
}

pub fn task_accuracy(model: &ModelBundle, corpus: &[Example], policy: &dyn MaskPolicy) -> Result<f64> {
    accuracy(model, corpus, policy, LabelKind::Task)
}

/// Per-class F1 scores. Classes never seen in `gold` score 0.
pub fn per_class_f1(gold: &[usize], pred: &[usize], classes: usize) -> Vec<f64> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            if tp[c] + fneg[c] == 0 {
                log::warn!("class {c} is absent from the gold labels; its F1 is 0");
                return 0.0;
            }
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            2.0 * tp[c] as f64 / denom as f64
        })
        .collect()
}

pub fn macro_f1(gold: &[usize], pred: &[usize], classes: usize) -> f64 {
    let scores = per_class_f1(gold, pred, classes);
    scores.iter().sum::<f64>() / classes as f64
}

pub fn probe_predictions(bias_model: &ModelBundle, corpus: &[Example], masks: &[Vec<bool>]) -> Vec<usize> {
    corpus
        .iter()
        .zip(masks)
        .map(|(ex, mask)| predicted_class(&bias_model.predict(&ex.tokens.ids, &mask_weights(mask))))
        .collect()
}

/// Macro F1 of the frozen bias classifier applied to masked inputs. Lower
/// means the masks leak less bias information.
pub fn bias_probe_f1(bias_model: &ModelBundle, corpus: &[Example], masks: &[Vec<bool>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("bias probe over an empty corpus".into()));
    }
    let pred = probe_predictions(bias_model, corpus, masks);
    let gold: Vec<usize> = corpus.iter().map(|e| e.bias_label).collect();
    Ok(macro_f1(&gold, &pred, bias_model.dims.classes))
}

fn complement(mask: &[bool]) -> Vec<bool> {
    mask.iter().map(|m| !m).collect()
}

/// `p(y | x) - p(y | x without the rationale)` for the full-input argmax `y`.
pub fn comprehensiveness(model: &ModelBundle, ids: &[usize], mask: &[bool]) -> f64 {
    let enc = model.encode(ids);
    let full = model.predict_encoded(&enc, &vec![1.0; ids.len()]);
    let y = predicted_class(&full);
    let reduced = model.predict_encoded(&enc, &mask_weights(&complement(mask)));
    full[y] - reduced[y]
}

/// `p(y | x) - p(y | rationale only)` for the full-input argmax `y`.
pub fn sufficiency(model: &ModelBundle, ids: &[usize], mask: &[bool]) -> f64 {
    let enc = model.encode(ids);
    let full = model.predict_encoded(&enc, &vec![1.0; ids.len()]);
    let y = predicted_class(&full);
    let kept = model.predict_encoded(&enc, &mask_weights(mask));
    full[y] - kept[y]
}

/// Keeps the `k` tokens with the lowest bias energy; ties prefer higher
/// task energy, then the lower index.
pub fn rerank_rationale(task_energy: &[f64], bias_energy: &[f64], k: usize) -> Result<Vec<bool>> {
    if task_energy.len() != bias_energy.len() {
        return Err(Error::Data("energy vectors differ in length".into()));
    }
    if k == 0 {
        return Err(Error::Config("rerank budget must be at least 1".into()));
    }
    let n = bias_energy.len();
    let k = if k > n {
        log::warn!("rerank budget {k} exceeds {n} tokens; clamping");
        n
    } else {
        k
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        bias_energy[i]
            .total_cmp(&bias_energy[j])
            .then(task_energy[j].total_cmp(&task_energy[i]))
            .then(i.cmp(&j))
    });
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::TokenSequence;
    use crate::model::{softmax, Dims};
    use crate::rationale::{Objective, Threshold};

    fn example(ids: Vec<usize>, task: usize, bias: usize) -> Example {
        Example {
            text: String::new(),
            tokens: TokenSequence::from_ids(ids),
            task_label: task,
            bias_label: bias,
            gendered_token_indices: None,
        }
    }

    /// Two-class model: class 1 iff the pooled representation exceeds 1/3.
    fn hand_model() -> ModelBundle {
        let dims = Dims { vocab_size: 4, embed: 1, hidden: 1, classes: 2 };
        let mut m = ModelBundle::init(Objective::Task, dims, "h", 0).unwrap();
        let l = m.layout().clone();
        let p = m.params_mut();
        p[l.embedding.clone()].copy_from_slice(&[0.0, 0.0, 0.5, 2.0]);
        // layer1: h1 = relu(1 * own + 0 * ctx + 0)
        p[l.w1.clone()].copy_from_slice(&[1.0, 0.0]);
        p[l.b1.start] = 0.0;
        // layer2: rep = relu(1 * h1 + 0)
        p[l.w2.start] = 1.0;
        p[l.b2.start] = 0.0;
        // logits = [0, 3 * pooled - 1]
        p[l.wc.clone()].copy_from_slice(&[0.0, 3.0]);
        p[l.bc.clone()].copy_from_slice(&[0.0, -1.0]);
        m
    }

    #[test]
    fn faithfulness_by_hand() {
        let m = hand_model();
        let ids = [2, 3];
        // reps: [0.5, 2.0]
        let p1 = |pooled: f64| softmax(&[0.0, 3.0 * pooled - 1.0])[1];
        let full = p1((0.5 + 2.0) / 2.0);
        assert!(full > 0.5);
        // rationale = token 1 only
        let mask = [false, true];
        let comp = full - p1(0.5);
        let suff = full - p1(2.0);
        assert!((comprehensiveness(&m, &ids, &mask) - comp).abs() < 1e-12);
        assert!((sufficiency(&m, &ids, &mask) - suff).abs() < 1e-12);
    }

    #[test]
    fn faithfulness_identities() {
        let m = hand_model();
        let ids = [2, 3, 2];
        assert_eq!(comprehensiveness(&m, &ids, &[false; 3]), 0.0);
        assert_eq!(sufficiency(&m, &ids, &[true; 3]), 0.0);
        let full = m.predict(&ids, &[1.0; 3]);
        let empty = m.predict(&ids, &[0.0; 3]);
        let y = predicted_class(&full);
        assert_eq!(comprehensiveness(&m, &ids, &[true; 3]), full[y] - empty[y]);
        assert_eq!(sufficiency(&m, &ids, &[false; 3]), full[y] - empty[y]);
    }

    #[test]
    fn accuracy_counts() {
        let m = hand_model();
        // Both tokens pool above 1/3, so every prediction is class 1.
        let corpus = vec![
            example(vec![3], 1, 0),
            example(vec![3], 1, 0),
            example(vec![2], 1, 0),
            example(vec![2], 0, 0),
        ];
        let masks = vec![vec![true]; 4];
        assert_eq!(accuracy_with_masks(&m, &corpus, &masks, LabelKind::Task).unwrap(), 0.75);
        let policy = Threshold { theta: 0.5 };
        let a = task_accuracy(&m, &corpus, &policy).unwrap();
        assert_eq!(a, task_accuracy(&m, &corpus, &policy).unwrap());
        assert!(task_accuracy(&m, &[], &policy).is_err());
    }

    #[test]
    fn perfect_predictions_give_unit_f1() {
        let gold = [0, 1, 1, 0, 1];
        assert_eq!(macro_f1(&gold, &gold, 2), 1.0);
    }

    #[test]
    fn random_probe_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gold: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
        let pred: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
        assert!((macro_f1(&gold, &pred, 2) - 0.5).abs() < 0.05);
    }

    #[test]
    fn absent_gold_class_scores_zero() {
        assert_eq!(per_class_f1(&[0, 0], &[0, 1], 2), vec![2.0 / 3.0, 0.0]);
    }

    #[test]
    fn zero_masks_probe_is_constant_predictor() {
        let m = hand_model();
        let corpus: Vec<Example> = (0..10).map(|i| example(vec![2, 3], 0, (i % 3 == 0) as usize)).collect();
        let masks = vec![vec![false, false]; 10];
        let constant = predicted_class(&softmax(&[0.0, -1.0]));
        let gold: Vec<usize> = corpus.iter().map(|e| e.bias_label).collect();
        // Empirical F1 of always predicting `constant`.
        let tp = gold.iter().filter(|&&g| g == constant).count() as f64;
        let expected = (2.0 * tp / (tp + 10.0)) / 2.0;
        assert!((bias_probe_f1(&m, &corpus, &masks).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rerank_examples() {
        assert_eq!(rerank_rationale(&[0.0; 3], &[0.9, 0.1, 0.5], 2).unwrap(), [false, true, true]);
        assert_eq!(rerank_rationale(&[0.1, 0.9], &[0.2, 0.2], 1).unwrap(), [false, true]);
        assert_eq!(rerank_rationale(&[0.1, 0.2, 0.3], &[0.3, 0.2, 0.1], 3).unwrap(), [true; 3]);
        assert_eq!(rerank_rationale(&[0.1, 0.2], &[0.3, 0.2], 7).unwrap(), [true; 2]);
        assert!(rerank_rationale(&[0.1], &[0.1], 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rerank_never_skips_lower_bias(
            eb in proptest::collection::vec(0.0f64..3.0, 1..15),
            k in 1usize..15,
        ) {
            let et: Vec<f64> = eb.iter().map(|e| 3.0 - e).collect();
            let mask = rerank_rationale(&et, &eb, k).unwrap();
            for (i, &sel) in mask.iter().enumerate() {
                for (j, &other) in mask.iter().enumerate() {
                    if sel && !other {
                        proptest::prop_assert!(eb[i] <= eb[j]);
                    }
                }
            }
        }
    }
}
