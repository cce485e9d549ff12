//! End-to-end training properties on synthetic corpora.

use std::sync::OnceLock;

use debias_core::corpus::{generate_synthetic, Example, LabelMaps, SynthConfig, Vocabulary};
use debias_core::evaluation::rationale_masks;
use debias_core::model::{encode_checkpoint, ModelBundle};
use debias_core::rationale::mask_policy;
use debias_core::training::{train_bias_model, train_task_model, TrainConfig};

fn corpus(n: usize, rho: f64, seed: u64) -> (Vec<Example>, LabelMaps) {
    let config = SynthConfig { num_examples: n, bias_strength: rho, seed, ..SynthConfig::default() };
    (generate_synthetic(&config).unwrap(), config.label_maps())
}

struct Fixture {
    vocab: Vocabulary,
    labels: LabelMaps,
    train: Vec<Example>,
    valid: Vec<Example>,
    bias: ModelBundle,
}

/// ρ=0.9 task data, with the probe trained on balanced data.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let (mut train, labels) = corpus(5000, 0.9, 7);
        let (mut valid, _) = corpus(500, 0.9, 8);
        let (mut btrain, _) = corpus(5000, 0.0, 11);
        let (mut bvalid, _) = corpus(500, 0.0, 12);
        let vocab = Vocabulary::build(&train, 1);
        for c in [&mut train, &mut valid, &mut btrain, &mut bvalid] {
            vocab.encode_corpus(c);
        }
        let (bias, _) = train_bias_model(&btrain, &bvalid, &vocab, 2, &TrainConfig::bias_defaults()).unwrap();
        Fixture { vocab, labels, train, valid, bias }
    })
}

#[test]
fn bias_model_learns_planted_cues() {
    let (mut train, _) = corpus(5000, 1.0, 7);
    let (mut valid, _) = corpus(500, 1.0, 8);
    let vocab = Vocabulary::build(&train, 1);
    vocab.encode_corpus(&mut train);
    vocab.encode_corpus(&mut valid);
    let config = TrainConfig { epochs: 20, ..TrainConfig::bias_defaults() };
    let (_, report) = train_bias_model(&train, &valid, &vocab, 2, &config).unwrap();
    assert!(report.best_valid_accuracy >= 0.95, "{}", report.best_valid_accuracy);
    let first = report.epochs.first().unwrap().loss;
    let last = report.epochs.last().unwrap().loss;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn strong_sparsity_hits_target_selection() {
    let f = fixture();
    let config = TrainConfig { lambda_s: 10.0, sigma: 0.2, ..TrainConfig::default() };
    let (_, report) = train_bias_model(&f.train, &f.valid, &f.vocab, 2, &config).unwrap();
    let selection = report.epochs[report.best_epoch].valid_mean_selection;
    assert!((selection - 0.2).abs() < 0.1, "mean selection {selection}");
}

#[test]
fn dc_keeps_gendered_tokens_out_of_task_rationales() {
    let f = fixture();
    let policy = mask_policy("threshold:0.5").unwrap();
    let before = encode_checkpoint(&f.bias).unwrap();
    let mut results = Vec::new();
    for lambda_dc in [5.0, 0.0] {
        let config = TrainConfig { lambda_dc, ..TrainConfig::default() };
        let (task, report) =
            train_task_model(&f.train, &f.valid, &f.vocab, f.labels.num_task_classes(), &f.bias, &config).unwrap();
        let masks = rationale_masks(&task, &f.valid, policy.as_ref());
        let (mut inside, mut total) = (0usize, 0usize);
        for (ex, mask) in f.valid.iter().zip(&masks) {
            for &i in ex.gendered_token_indices.as_deref().unwrap() {
                total += 1;
                inside += usize::from(mask[i]);
            }
        }
        results.push((inside as f64 / total as f64, report.best_valid_accuracy));
    }
    let ((frac_dc, acc_dc), (frac_plain, acc_plain)) = (results[0], results[1]);
    println!("gendered fraction: dc {frac_dc:.3} plain {frac_plain:.3}; accuracy dc {acc_dc:.3} plain {acc_plain:.3}");
    assert!(frac_dc < 0.5 * frac_plain);
    assert!(acc_plain - acc_dc <= 0.05);
    // The bias model is frozen during task training.
    assert_eq!(before, encode_checkpoint(&f.bias).unwrap());
}

#[test]
fn training_is_bit_reproducible() {
    let f = fixture();
    let train = &f.train[..400];
    let valid = &f.valid[..100];
    let config = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let run = || {
        let (task, report) =
            train_task_model(train, valid, &f.vocab, f.labels.num_task_classes(), &f.bias, &config).unwrap();
        (encode_checkpoint(&task).unwrap(), serde_json::to_string(&report.epochs).unwrap())
    };
    assert_eq!(run(), run());
}
