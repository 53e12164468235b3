use trip_core::clustering::CapacityConfig;
use trip_core::model::{
    adamw_step, gradients, image_feature, kl_divergence, loss, predict, zero_shot_reference, AdamWConfig,
    AdamWState, FrozenTextHead, DEFAULT_TAU,
};
use trip_core::router::{route, ExpertSet, RoutedPrompt};
use trip_core::tensor::{init_keys, KeyStrategy, Mat, Rng};

/// Loss at fixed mixture weights, recomputed from scratch.
fn total_loss(experts: &ExpertSet, pi: &[f64], head: &FrozenTextHead, tokens: &Mat, label: usize, beta: f64, tau: f64) -> f64 {
    let f = image_feature(tokens).unwrap();
    let p = predict(&experts.blend(pi), head, &f, tau).unwrap();
    let reference = zero_shot_reference(head, &f, tau).unwrap();
    loss(&p, &reference, label, beta).unwrap().total
}

fn routed_instance(seed: u64) -> (FrozenTextHead, ExpertSet, Mat, usize, RoutedPrompt) {
    let mut rng = Rng::new(seed);
    let head = FrozenTextHead::with_random_anchors(3, 2, 8, seed).unwrap();
    let experts = ExpertSet::random(2, 2, 8, 0.5, &mut rng);
    let keys = init_keys(2, 8, KeyStrategy::Orthogonal, &mut rng).unwrap();
    let tokens = Mat::from_vec(7, 8, rng.normal_vec(56)).unwrap();
    let label = rng.below(3);
    let routed = route(&tokens, &experts, &keys, &CapacityConfig::new(2, 2.0), &mut rng).unwrap();
    (head, experts, tokens, label, routed)
}

#[test]
fn expert_gradients_match_central_differences() {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (head, experts, tokens, label, routed) = routed_instance(seed);
        let pi = routed.weights.as_slice().to_vec();
        let beta = [0.0, 0.8, 3.0][seed as usize % 3];
        let out = gradients(&tokens, label, &experts, &routed, &head, beta, DEFAULT_TAU).unwrap();
        for m in 0..experts.len() {
            for k in 0..experts.prompt_len() * experts.dim() {
                let mut plus = experts.clone();
                plus.get_mut(m).as_mut_slice()[k] += h;
                let mut minus = experts.clone();
                minus.get_mut(m).as_mut_slice()[k] -= h;
                let fd = (total_loss(&plus, &pi, &head, &tokens, label, beta, DEFAULT_TAU)
                    - total_loss(&minus, &pi, &head, &tokens, label, beta, DEFAULT_TAU))
                    / (2.0 * h);
                let an = out.grads.grads[m].as_slice()[k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn fifty_steps_reduce_cross_entropy() {
    let (head, mut experts, tokens, label, routed) = routed_instance(99);
    let pi = routed.weights.as_slice().to_vec();
    let mut state = AdamWState::new(&experts);
    let cfg = AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut ce = Vec::new();
    for _ in 0..=50 {
        let r = RoutedPrompt {
            prompt: experts.blend(&pi),
            ..routed.clone()
        };
        let out = gradients(&tokens, label, &experts, &r, &head, 0.0, DEFAULT_TAU).unwrap();
        ce.push(out.loss.ce);
        adamw_step(&mut experts, &out.grads, &mut state, &cfg).unwrap();
    }
    assert!(ce[50] < ce[0], "{} -> {}", ce[0], ce[50]);
    for w in ce.windows(11) {
        assert!(w[10] <= w[0] + 1e-12, "{w:?}");
    }
}

#[test]
fn stronger_debiasing_stays_closer_to_zero_shot() {
    let mut rng = Rng::new(5);
    let head = FrozenTextHead::with_random_anchors(4, 2, 8, 5).unwrap();
    let keys = init_keys(2, 8, KeyStrategy::Orthogonal, &mut rng).unwrap();
    let init = ExpertSet::random(2, 2, 8, 0.1, &mut rng);
    let batch: Vec<(Mat, usize)> = (0..8)
        .map(|i| (Mat::from_vec(6, 8, rng.normal_vec(48)).unwrap(), i % 4))
        .collect();
    let cap = CapacityConfig::new(2, 1.0);
    let routes: Vec<RoutedPrompt> = batch
        .iter()
        .enumerate()
        .map(|(i, (t, _))| route(t, &init, &keys, &cap, &mut Rng::new(i as u64)).unwrap())
        .collect();
    let cfg = AdamWConfig {
        lr: 5e-3,
        ..AdamWConfig::default()
    };

    let mut last = f64::INFINITY;
    for beta in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
        let mut experts = init.clone();
        let mut state = AdamWState::new(&experts);
        for _ in 0..100 {
            let mut grads = trip_core::model::ExpertGradients::zeros_like(&experts);
            for ((tokens, label), r) in batch.iter().zip(&routes) {
                let r = RoutedPrompt {
                    prompt: experts.blend(r.weights.as_slice()),
                    ..r.clone()
                };
                let out = gradients(tokens, *label, &experts, &r, &head, beta, DEFAULT_TAU).unwrap();
                grads.add_scaled(1.0 / batch.len() as f64, &out.grads);
            }
            adamw_step(&mut experts, &grads, &mut state, &cfg).unwrap();
        }
        let kl: f64 = batch
            .iter()
            .zip(&routes)
            .map(|((tokens, _), r)| {
                let f = image_feature(tokens).unwrap();
                let p = predict(&experts.blend(r.weights.as_slice()), &head, &f, DEFAULT_TAU).unwrap();
                kl_divergence(&zero_shot_reference(&head, &f, DEFAULT_TAU).unwrap(), &p).0
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert!(kl <= last + 1e-9, "beta {beta}: kl {kl} > {last}");
        last = kl;
    }
}

#[test]
fn probabilities_are_normalized_and_positive() {
    let mut rng = Rng::new(12);
    for seed in 0..50 {
        let head = FrozenTextHead::with_random_anchors(5, 3, 6, seed).unwrap();
        let prompt = Mat::from_vec(3, 6, rng.normal_vec(18).iter().map(|v| v * 3.0).collect()).unwrap();
        let f = rng.normal_vec(6);
        let p = predict(&prompt, &head, &f, DEFAULT_TAU).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }
}
