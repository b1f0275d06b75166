use catflow::checks::random_dataset;
use catflow::numerics::{Tape, Tensor};
use catflow::objectives::{catflow_loss, catflow_loss_tape, vfm_kl_gap, LossTargets, PosteriorMarginals};
use catflow::paths::{interpolate, posterior_oracle, CategoricalSpace, FiniteDataset, StatePoint};
use catflow::rng::{from_seed, standard_normal};
use proptest::prelude::*;
use rand::Rng;

fn dataset_strategy() -> impl Strategy<Value = (FiniteDataset, u64)> {
    any::<u64>().prop_map(|seed| (random_dataset(&mut from_seed(seed), 3, 4, 12).unwrap(), seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_ignores_weight_scale((ds, seed) in dataset_strategy(), scale in 0.01f64..100.0, t in 0.0f64..0.99) {
        let mut rng = from_seed(seed ^ 1);
        let x = standard_normal(&mut rng, ds.space().total_dim());
        let sp = StatePoint::new(t, x).unwrap();
        let scaled = FiniteDataset::new(
            ds.space().clone(),
            ds.labels().to_vec(),
            ds.weights().iter().map(|w| w * scale).collect(),
        ).unwrap();
        let a = posterior_oracle(&ds, &sp).unwrap();
        let b = posterior_oracle(&scaled, &sp).unwrap();
        for (p, q) in a.probs.iter().zip(&b.probs) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_blocks_are_distributions((ds, seed) in dataset_strategy(), t in 0.0f64..0.999) {
        let mut rng = from_seed(seed ^ 2);
        let x = standard_normal(&mut rng, ds.space().total_dim());
        let post = posterior_oracle(&ds, &StatePoint::new(t, x).unwrap()).unwrap();
        prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for d in 0..ds.space().n_vars() {
            let s: f64 = post.marginals[ds.space().block(d)].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_at_time_zero_is_the_prior((ds, seed) in dataset_strategy()) {
        let mut rng = from_seed(seed ^ 3);
        let x = standard_normal(&mut rng, ds.space().total_dim());
        let post = posterior_oracle(&ds, &StatePoint::new(1e-8, x).unwrap()).unwrap();
        for (p, w) in post.probs.iter().zip(ds.weights()) {
            prop_assert!((p - w).abs() < 1e-6);
        }
    }

    #[test]
    fn catflow_loss_is_nonnegative(logits in prop::collection::vec(-5.0f64..5.0, 7), target in prop::collection::vec(0usize..7, 2)) {
        let space = CategoricalSpace::new(vec![3, 4]).unwrap();
        let labels = [target[0] % 3, target[1] % 4];
        let mut mu = Vec::new();
        for d in 0..2 {
            let block = &logits[space.block(d)];
            let z: f64 = block.iter().map(|l| l.exp()).sum();
            mu.extend(block.iter().map(|l| l.exp() / z));
        }
        let mu = PosteriorMarginals::new(space.clone(), mu).unwrap();
        let loss = catflow_loss(&mu, &space.one_hot(&labels).unwrap()).unwrap();
        prop_assert!(loss.value >= 0.0);
        let exact = PosteriorMarginals::new(space.clone(), space.one_hot(&labels).unwrap()).unwrap();
        prop_assert_eq!(catflow_loss(&exact, &space.one_hot(&labels).unwrap()).unwrap().value, 0.0);
    }
}

#[test]
fn four_point_posterior_by_direct_summation() {
    let space = CategoricalSpace::new(vec![2, 2]).unwrap();
    let labels = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
    let ds = FiniteDataset::uniform(space, labels).unwrap();
    let t = 0.5;
    let x = interpolate(t, &[0.0; 4], &ds.points()[0]).unwrap();
    let post = posterior_oracle(&ds, &StatePoint::new(t, x.clone()).unwrap()).unwrap();
    // Unnormalized Gaussian densities; the shared normalizer cancels.
    let dens: Vec<f64> = ds
        .points()
        .iter()
        .map(|p| {
            let sq: f64 = x.iter().zip(p).map(|(a, b)| (a - t * b).powi(2)).sum();
            (-sq / (2.0 * (1.0 - t) * (1.0 - t))).exp()
        })
        .collect();
    let z: f64 = dens.iter().sum();
    for (p, d) in post.probs.iter().zip(&dens) {
        assert!((p - d / z).abs() < 1e-14);
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_target() {
    let mut rng = from_seed(5);
    let segments = vec![3, 2, 4];
    let space = CategoricalSpace::new(segments.clone()).unwrap();
    for _ in 0..20 {
        let z: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = segments.iter().map(|&k| rng.random_range(0..k)).collect();
        let target = space.one_hot(&labels).unwrap();
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 9], z.clone()).unwrap());
        let targets = LossTargets {
            x1: Tensor::new(vec![1, 9], target.clone()).unwrap(),
            weights: Tensor::full(&[1, 9], 1.0),
            segments: segments.clone(),
        };
        let (loss, _) = catflow_loss_tape(&tape, logits, &targets).unwrap();
        tape.backward(loss).unwrap();
        let grad = logits.grad().unwrap();
        for d in 0..3 {
            let r = space.block(d);
            let norm: f64 = z[r.clone()].iter().map(|v| v.exp()).sum();
            for i in r {
                let expected = z[i].exp() / norm - target[i];
                assert!((grad.data()[i] - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kl_gap_ignores_dataset_order() {
    let mut rng = from_seed(8);
    let ds = random_dataset(&mut rng, 3, 3, 10).unwrap();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.reverse();
    let shuffled = FiniteDataset::new(
        ds.space().clone(),
        order.iter().map(|&i| ds.labels()[i].clone()).collect(),
        order.iter().map(|&i| ds.weights()[i]).collect(),
    )
    .unwrap();
    let uniform = |_: f64, _: &[f64]| Ok(PosteriorMarginals::uniform(ds.space().clone()));
    let a = vfm_kl_gap(&ds, uniform, 200, &mut from_seed(1)).unwrap();
    let b = vfm_kl_gap(&shuffled, uniform, 200, &mut from_seed(1)).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn kl_gap_of_uniform_guess_on_one_point() {
    let space = CategoricalSpace::new(vec![2, 3]).unwrap();
    let ds = FiniteDataset::uniform(space.clone(), vec![vec![1, 2]]).unwrap();
    let uniform = |_: f64, _: &[f64]| Ok(PosteriorMarginals::uniform(space.clone()));
    let gap = vfm_kl_gap(&ds, uniform, 20, &mut from_seed(2)).unwrap();
    assert!((gap - (2.0f64.ln() + 3.0f64.ln())).abs() < 1e-12);
}
