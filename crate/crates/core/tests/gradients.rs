//! Finite-difference oracle for the full training objectives.

use debias_core::model::{gradient, BatchItem, Dims, Loss, ModelBundle};
use debias_core::rationale::Objective;
use debias_core::training::{DcTerm, RationaleLoss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(with_bias_energy: bool) -> Vec<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut items = Vec::new();
    for (k, ids) in [vec![2, 5, 7, 3, 9], vec![4, 4, 8]].into_iter().enumerate() {
        let n = ids.len();
        let bias_energy = with_bias_energy.then(|| (0..n).map(|i| if i % 2 == 0 { 1.2 } else { 0.1 }).collect());
        items.push(BatchItem {
            uniforms: (0..n).map(|_| rng.gen_range(0.2..0.8)).collect(),
            ids: ids.clone(),
            label: k,
            bias_energy: bias_energy.clone(),
            full_text: false,
        });
        items.push(BatchItem {
            uniforms: vec![0.5; n],
            ids,
            label: k,
            bias_energy,
            full_text: true,
        });
    }
    items
}

/// Largest relative error between analytic and central-difference gradients.
fn check(objective: Objective, loss: &dyn Loss, items: &[BatchItem]) -> (f64, usize) {
    let dims = Dims { vocab_size: 10, embed: 4, hidden: 4, classes: 3 };
    let mut model = ModelBundle::init(objective, dims, "fd", 5).unwrap();
    let (_, analytic) = gradient(&model, loss, items).unwrap();
    let delta = 1e-4;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for k in 0..model.params().len() {
        let orig = model.params()[k];
        model.params_mut()[k] = orig + delta;
        let up = gradient(&model, loss, items).unwrap().0.total;
        model.params_mut()[k] = orig - delta;
        let down = gradient(&model, loss, items).unwrap().0.total;
        model.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * delta);
        let a = analytic.values[k];
        worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
        nonzero += usize::from(a != 0.0);
    }
    (worst, nonzero)
}

#[test]
fn bias_objective_matches_finite_differences() {
    let loss = RationaleLoss { lambda_s: 10.0, sigma: 0.2, dc: None, lambda_full: 1.0 };
    let (worst, nonzero) = check(Objective::Bias, &loss, &batch(false));
    assert!(worst < 1e-3, "worst relative error {worst}");
    assert!(nonzero > 100);
}

#[test]
fn task_objective_with_dc_matches_finite_differences() {
    let loss = RationaleLoss {
        lambda_s: 10.0,
        sigma: 0.3,
        dc: Some(DcTerm { lambda: 5.0, tau: 0.3 }),
        lambda_full: 1.0,
    };
    let items = batch(true);
    let (worst, nonzero) = check(Objective::Task, &loss, &items);
    assert!(worst < 1e-3, "worst relative error {worst}");
    assert!(nonzero > 100);
}
