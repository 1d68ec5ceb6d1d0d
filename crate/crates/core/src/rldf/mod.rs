//! Hierarchical domain filter. A high-level policy decides whether a
//! transferred sequence is revised at all; a low-level policy then walks the
//! sequence and keeps or removes each item. Both are trained with REINFORCE.

mod episode;
mod policy;

pub use episode::{
    accumulate_policy_gradients, delayed_reward, high_state, immediate_reward, low_state,
    policy_gradients, reserved_indices, sample_episode, EpisodeTrace, FilterInput, FilterMode,
    HighState, LowState,
};
pub use policy::{soft_update, FilterParams, PolicyNet};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcr::tests::{random_instance, tiny_shape};
    use crate::bcr::{predict, transferred_representations, ModelParams};
    use crate::data::{Domain, SeqItem};
    use crate::numerics::{cosine_similarity, finite_difference_check, sigmoid, Matrix};
    use crate::rng::stream;
    use rand::Rng;

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(tiny_shape(), &mut stream(seed, &[])).unwrap()
    }

    fn filter(seed: u64) -> FilterParams {
        FilterParams::init(4, 8, &mut stream(seed, &[7]))
    }

    fn random_state<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn policy_prob_examples() {
        let zero = PolicyNet::zeros(6, 8);
        let s = vec![0.3; 6];
        assert_eq!(zero.policy_prob(&s, true).unwrap(), 0.5);
        assert_eq!(zero.policy_prob(&s, false).unwrap(), 0.5);
        let hand = PolicyNet {
            w2: Matrix::from_vec(1, 2, vec![1.0, 0.5]).unwrap(),
            b: Matrix::filled(1, 1, 0.5),
            w1: Matrix::filled(1, 1, 1.0),
        };
        // W2 S + b = 1 + 0.5 + 0.5 = 2
        let p = hand.policy_prob(&[1.0, 1.0], true).unwrap();
        assert!((p - sigmoid(2.0)).abs() < 1e-15);
        assert!((p - 0.8808).abs() < 1e-4);
        assert!(hand.act_prob(&[1.0]).is_err());
    }

    #[test]
    fn policy_probs_are_complementary() {
        let f = filter(1);
        let mut rng = stream(1, &[]);
        for p in f.high.iter().chain(&f.low) {
            for _ in 0..100 {
                let s = random_state(&mut rng, p.state_dim());
                let sum = p.policy_prob(&s, true).unwrap() + p.policy_prob(&s, false).unwrap();
                assert!((sum - 1.0).abs() <= f64::EPSILON);
            }
        }
    }

    #[test]
    fn log_policy_gradient_matches_finite_differences() {
        let mut rng = stream(2, &[]);
        for seed in 0..10 {
            let f = filter(seed);
            for net in f.high.iter().chain(&f.low) {
                let s = random_state(&mut rng, net.state_dim());
                for action in [true, false] {
                    let mut g = PolicyNet::zeros(net.state_dim(), 8);
                    let lp = net.accumulate_log_grad(&s, action, 1.0, &mut g).unwrap();
                    assert!((lp - net.policy_prob(&s, action).unwrap().ln()).abs() < 1e-12);
                    let analytic = [g.w2.clone(), g.b.clone(), g.w1.clone()];
                    for (idx, a) in analytic.iter().enumerate() {
                        let base = [&net.w2, &net.b, &net.w1][idx].clone();
                        let err = finite_difference_check(
                            |m| {
                                let mut p = net.clone();
                                *[&mut p.w2, &mut p.b, &mut p.w1][idx] = m.clone();
                                p.policy_prob(&s, action).unwrap().ln()
                            },
                            &base,
                            a,
                            1e-6,
                        )
                        .unwrap();
                        assert!(err < 1e-4, "tensor {idx}: {err}");
                    }
                }
            }
        }
    }

    #[test]
    fn high_state_examples() {
        let t = [0.6, 0.8];
        let s = high_state(&[&t], &t, 0.3).unwrap();
        assert!((s.mean_cosine - 1.0).abs() < 1e-9);
        assert!((s.mean_hadamard[0] - 0.36).abs() < 1e-15 && (s.mean_hadamard[1] - 0.64).abs() < 1e-15);
        assert_eq!(s.rec_prob, 0.3);
        let s = high_state(&[&[1.0, 2.0], &[-1.0, -2.0]], &[0.5, 0.1], 0.5).unwrap();
        assert!(s.mean_cosine.abs() < 1e-12);
        assert!(s.mean_hadamard.iter().all(|x| x.abs() < 1e-15));
        assert_eq!(s.to_vec().len(), 4);
        assert!(high_state(&[], &t, 0.5).is_err());
    }

    #[test]
    fn high_state_matches_definition() {
        let mut rng = stream(3, &[]);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_state(&mut rng, 4)).collect();
        let t = random_state(&mut rng, 4);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = high_state(&refs, &t, 0.42).unwrap();
        let cos: f64 = rows.iter().map(|r| cosine_similarity(r, &t).unwrap()).sum::<f64>() / 3.0;
        assert!((s.mean_cosine - cos).abs() < 1e-12);
        for k in 0..4 {
            let h = (rows[0][k] * t[k] + rows[1][k] * t[k] + rows[2][k] * t[k]) / 3.0;
            assert!((s.mean_hadamard[k] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn low_state_examples() {
        let t = [0.6, 0.8];
        let s = low_state(&[&t], &[], 0, &t).unwrap();
        assert!((s.item_cosine - 1.0).abs() < 1e-9);
        assert!((s.mean_reserved_cosine - 1.0).abs() < 1e-9);
        assert_eq!(s.abs_diff, vec![0.0, 0.0]);
        let s = low_state(&[&[0.8, -0.6], &t], &[], 0, &t).unwrap();
        assert!(s.item_cosine.abs() < 1e-12);
        assert!(low_state(&[&t], &[], 1, &t).is_err());
    }

    #[test]
    fn low_state_mid_episode_matches_definition() {
        let mut rng = stream(4, &[]);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_state(&mut rng, 4)).collect();
        let t = random_state(&mut rng, 4);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        // item 0 dropped, deciding item 1: reserved = {1, 2}
        let s = low_state(&refs, &[false], 1, &t).unwrap();
        let c1 = cosine_similarity(&rows[1], &t).unwrap();
        let c2 = cosine_similarity(&rows[2], &t).unwrap();
        assert!((s.item_cosine - c1).abs() < 1e-12);
        assert!((s.mean_reserved_cosine - (c1 + c2) / 2.0).abs() < 1e-12);
        for k in 0..4 {
            assert!((s.abs_diff[k] - (rows[1][k] - t[k]).abs()).abs() < 1e-15);
            let m = ((rows[1][k] - t[k]).abs() + (rows[2][k] - t[k]).abs()) / 2.0;
            assert!((s.mean_abs_diff[k] - m).abs() < 1e-12);
        }
        assert_eq!(reserved_indices(&[true, false], 2, 4), vec![0, 2, 3]);
    }

    #[test]
    fn immediate_reward_examples() {
        assert!(immediate_reward(&[0.4, 0.4, 0.4], &[], 0, true).unwrap().abs() < 1e-15);
        let r = immediate_reward(&[0.9, 0.1], &[], 0, true).unwrap();
        assert!((r - 0.4).abs() < 1e-12);
        assert!((immediate_reward(&[0.9, 0.1], &[], 0, false).unwrap() + 0.4).abs() < 1e-12);
        assert_eq!(immediate_reward(&[0.7], &[], 0, true).unwrap(), 0.0);
        assert_eq!(immediate_reward(&[0.7], &[], 0, false).unwrap(), -0.7);
        // first item removed earlier: the singleton left is {1}
        assert_eq!(immediate_reward(&[0.2, 0.5], &[false], 1, false).unwrap(), -0.5);
    }

    fn forced_high(value: f64) -> PolicyNet {
        // ReLU hidden stays at 1, so the logit is value
        PolicyNet {
            w2: Matrix::zeros(1, 6),
            b: Matrix::filled(1, 1, 1.0),
            w1: Matrix::filled(1, 1, value),
        }
    }

    #[test]
    fn high_action_zero_passes_sequence_through() {
        let p = model(5);
        let mut f = filter(5);
        f.high = [forced_high(-1e4), forced_high(-1e4)];
        let mut rng = stream(5, &[1]);
        for i in 0..200 {
            let domain = Domain::BOTH[i % 2];
            let inst = random_instance(&mut rng, domain, &p.shape, i);
            let tr = sample_episode(&mut rng, &f, &p, &FilterInput::training(&inst), FilterMode::Full, false).unwrap();
            let Some(tr) = tr else {
                assert!(inst.transferred.is_empty());
                continue;
            };
            assert!(!tr.high_action);
            assert!(tr.low_actions.is_empty() && tr.low_states.is_empty() && tr.rewards.is_empty());
            assert_eq!(tr.high_reward, 0.0);
            assert_eq!(tr.final_reward, 0.0);
            assert_eq!(tr.revised(&inst.transferred), inst.transferred);
        }
    }

    #[test]
    fn greedy_with_confident_policies_keeps_everything() {
        let p = model(6);
        let mut f = filter(6);
        // logit ln 9 -> probability 0.9
        let l = 9f64.ln();
        f.high = [forced_high(l), forced_high(l)];
        f.low = [
            PolicyNet { w2: Matrix::zeros(1, 10), b: Matrix::filled(1, 1, 1.0), w1: Matrix::filled(1, 1, l) },
            PolicyNet { w2: Matrix::zeros(1, 10), b: Matrix::filled(1, 1, 1.0), w1: Matrix::filled(1, 1, l) },
        ];
        let mut rng = stream(6, &[]);
        let mut inst = random_instance(&mut rng, Domain::A, &p.shape, 0);
        while inst.transferred.is_empty() {
            inst = random_instance(&mut rng, Domain::A, &p.shape, 0);
        }
        let tr = sample_episode(&mut rng, &f, &p, &FilterInput::training(&inst), FilterMode::Full, true)
            .unwrap()
            .unwrap();
        assert!(tr.high_action);
        assert!(tr.low_actions.iter().all(|&a| a));
        assert!(tr.drop_probs.iter().all(|&d| (d - 0.1).abs() < 1e-12));
        assert_eq!(tr.kept_mask, vec![true; inst.transferred.len()]);
        assert_eq!(tr.final_reward, 0.0);
    }

    fn instance_with_transfer(seed: u64, n: usize) -> (ModelParams, crate::data::TrainingInstance) {
        let p = model(seed);
        let mut rng = stream(seed, &[2]);
        let mut inst = random_instance(&mut rng, Domain::B, &p.shape, 0);
        inst.transferred = (0..n)
            .map(|j| SeqItem { item: rng.gen_range(1..=6), pos: j as u32, event: j })
            .collect();
        (p, inst)
    }

    #[test]
    fn episodes_are_reproducible() {
        let (p, inst) = instance_with_transfer(7, 5);
        let f = filter(7);
        let run = || {
            sample_episode(&mut stream(9, &[1]), &f, &p, &FilterInput::training(&inst), FilterMode::Full, false).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampled_low_states_match_definition() {
        let (p, inst) = instance_with_transfer(8, 5);
        let f = filter(8);
        let t = p.emb(Domain::B).row(inst.target as usize);
        let reps = transferred_representations(&p, Domain::B, &inst.transferred, inst.target).unwrap();
        let rows: Vec<&[f64]> = reps.iter().map(|r| r.as_slice()).collect();
        let cos: Vec<f64> = rows.iter().map(|r| cosine_similarity(r, t).unwrap()).collect();
        for seed in 0..20 {
            let tr = sample_episode(&mut stream(seed, &[]), &f, &p, &FilterInput::training(&inst), FilterMode::LowOnly, false)
                .unwrap()
                .unwrap();
            assert_eq!(tr.low_actions.len(), 5);
            for m in 0..5 {
                let want = low_state(&rows, &tr.kept_mask[..m], m, t).unwrap().to_vec();
                for (a, b) in tr.low_states[m].iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
                let mut r = immediate_reward(&cos, &tr.kept_mask[..m], m, tr.low_actions[m]).unwrap();
                if m == 4 {
                    r += tr.final_reward;
                }
                assert!((tr.rewards[m] - r).abs() < 1e-12);
            }
            let want = delayed_reward(&p, &FilterInput::training(&inst), &tr.kept_mask, predict(&p, Domain::B, &inst.history, &inst.transferred, inst.target).unwrap()).unwrap();
            assert_eq!(tr.final_reward, want);
        }
    }

    #[test]
    fn delayed_reward_examples() {
        let (p, inst) = instance_with_transfer(9, 4);
        let input = FilterInput::training(&inst);
        let p0 = predict(&p, Domain::B, &inst.history, &inst.transferred, inst.target).unwrap();
        assert_eq!(delayed_reward(&p, &input, &[true; 4], p0).unwrap(), 0.0);
        assert_eq!(delayed_reward(&p, &input, &[false; 4], p0).unwrap(), 0.0);
        // some single removal raises the target's probability
        let mut best = f64::NEG_INFINITY;
        for m in 0..4 {
            let mut mask = [true; 4];
            mask[m] = false;
            let revised: Vec<SeqItem> = inst.transferred.iter().enumerate().filter(|(j, _)| *j != m).map(|(_, s)| *s).collect();
            let pn = predict(&p, Domain::B, &inst.history, &revised, inst.target).unwrap();
            let r = delayed_reward(&p, &input, &mask, p0).unwrap();
            assert!((r - (pn.ln() - p0.ln())).abs() < 1e-12);
            best = best.max(r);
        }
        assert!(best > 0.0);
    }

    #[test]
    fn combined_reward_attribution() {
        let (p, mut inst) = instance_with_transfer(10, 3);
        inst.history.truncate(2);
        let f = filter(10);
        let tr = sample_episode(&mut stream(3, &[]), &f, &p, &FilterInput::training(&inst), FilterMode::LowOnly, false)
            .unwrap()
            .unwrap();
        let t = p.emb(Domain::B).row(inst.target as usize);
        let reps = transferred_representations(&p, Domain::B, &inst.transferred, inst.target).unwrap();
        let cos: Vec<f64> = reps.iter().map(|r| cosine_similarity(r, t).unwrap()).collect();
        let ri: Vec<f64> = (0..3).map(|m| immediate_reward(&cos, &tr.kept_mask[..m], m, tr.low_actions[m]).unwrap()).collect();
        assert!((tr.rewards[0] - ri[0]).abs() < 1e-12);
        assert!((tr.rewards[1] - ri[1]).abs() < 1e-12);
        assert!((tr.rewards[2] - ri[2] - tr.final_reward).abs() < 1e-12);
        // high-only: whole sequence removed, reward is the log-probability change
        let mut f2 = f.clone();
        f2.high = [forced_high(1e4), forced_high(1e4)];
        let tr = sample_episode(&mut stream(3, &[]), &f2, &p, &FilterInput::training(&inst), FilterMode::HighOnly, false)
            .unwrap()
            .unwrap();
        let p0 = predict(&p, Domain::B, &inst.history, &inst.transferred, inst.target).unwrap();
        let pn = predict(&p, Domain::B, &inst.history, &[], inst.target).unwrap();
        assert!(tr.low_actions.is_empty());
        assert_eq!(tr.kept_mask, vec![false; 3]);
        assert!((tr.high_reward - (pn.ln() - p0.ln())).abs() < 1e-12);
    }

    #[test]
    fn ablation_modes() {
        let (p, inst) = instance_with_transfer(11, 5);
        let f = filter(11);
        let input = FilterInput::training(&inst);
        let run = |mode| sample_episode(&mut stream(1, &[]), &f, &p, &input, mode, false).unwrap().unwrap();
        let keep_all = run(FilterMode::Greedy { mu1: 0.0, mu2: -1.0 });
        assert!(keep_all.high_action && keep_all.dropped() == 0);
        let drop_all = run(FilterMode::Greedy { mu1: 0.0, mu2: 1.0 + 1e-9 });
        assert_eq!(drop_all.dropped(), 5);
        let never = run(FilterMode::Greedy { mu1: f64::NEG_INFINITY, mu2: 1.0 });
        assert!(!never.high_action);
        assert_eq!(run(FilterMode::LowOnly).low_actions.len(), 5);
        assert!(!run(FilterMode::Off).high_action);
        assert_eq!(FilterMode::parse("high_only", 0.0, 0.0), Some(FilterMode::HighOnly));
        assert_eq!(FilterMode::parse("bogus", 0.0, 0.0), None);
    }

    #[test]
    fn policy_gradient_edge_cases() {
        let f = filter(12);
        assert!(policy_gradients(&f, &[]).is_err());
        let (p, inst) = instance_with_transfer(12, 4);
        let tr = sample_episode(&mut stream(2, &[]), &f, &p, &FilterInput::training(&inst), FilterMode::LowOnly, false)
            .unwrap()
            .unwrap();
        let mut zero = tr.clone();
        zero.rewards.iter_mut().for_each(|r| *r = 0.0);
        zero.high_reward = 0.0;
        let g = policy_gradients(&f, &[zero]).unwrap();
        assert!(g.tensors().iter().all(|t| t.as_slice().iter().all(|&x| x == 0.0)));
        let mut neg = tr.clone();
        neg.rewards.iter_mut().for_each(|r| *r = -*r);
        let g = policy_gradients(&f, &[tr, neg]).unwrap();
        assert!(g.tensors().iter().all(|t| t.as_slice().iter().all(|&x| x.abs() < 1e-15)));
    }

    #[test]
    fn reinforce_is_unbiased_on_one_item_episode() {
        let (p, inst) = instance_with_transfer(13, 1);
        let f = filter(13);
        let input = FilterInput::training(&inst);
        let draws = 100_000;
        let mut rng = stream(13, &[]);
        let mut samples: Vec<Vec<f64>> = Vec::with_capacity(draws);
        let mut state = None;
        for _ in 0..draws {
            let tr = sample_episode(&mut rng, &f, &p, &input, FilterMode::LowOnly, false).unwrap().unwrap();
            state.get_or_insert_with(|| tr.low_states[0].clone());
            let g = policy_gradients(&f, &[tr]).unwrap();
            samples.push(g.low[1].tensors_flat());
        }
        // enumerate both outcomes
        let s = state.unwrap();
        let cos = s[0];
        let mut exact = f.zeros_like();
        for (keep, reward) in [(true, 0.0), (false, -cos)] {
            let prob = f.low[1].policy_prob(&s, keep).unwrap();
            f.low[1].accumulate_log_grad(&s, keep, prob * reward, &mut exact.low[1]).unwrap();
        }
        let exact = exact.low[1].tensors_flat();
        let mut dirs = vec![exact.clone()];
        let mut drng = stream(14, &[]);
        dirs.extend((0..4).map(|_| random_state(&mut drng, exact.len())));
        for dir in dirs {
            let proj: Vec<f64> = samples.iter().map(|g| crate::numerics::dot(g, &dir)).collect();
            let mean = proj.iter().sum::<f64>() / draws as f64;
            let var = proj.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            let want = crate::numerics::dot(&exact, &dir);
            assert!((mean - want).abs() <= 3.0 * se, "{mean} vs {want} (se {se})");
        }
    }

    #[test]
    fn bandit_toy_learns_to_keep() {
        let mut net = PolicyNet::init(6, 8, &mut stream(15, &[]));
        let s = vec![0.5, -0.2, 0.8, 0.1, -0.4, 0.3];
        let mut rng = stream(15, &[1]);
        for _ in 0..500 {
            let mut g = PolicyNet::zeros(6, 8);
            for _ in 0..3 {
                let keep = rng.gen::<f64>() < net.act_prob(&s).unwrap();
                let reward = if keep { 1.0 } else { -1.0 };
                net.accumulate_log_grad(&s, keep, reward / 3.0, &mut g).unwrap();
            }
            net.w2.axpy(0.05, &g.w2).unwrap();
            net.b.axpy(0.05, &g.b).unwrap();
            net.w1.axpy(0.05, &g.w1).unwrap();
        }
        let p = net.act_prob(&s).unwrap();
        assert!(p > 0.9, "{p}");
    }

    #[test]
    fn soft_update_examples() {
        let old = filter(16);
        let cand = filter(17);
        assert_eq!(soft_update(&old, &cand, 0.0).unwrap(), old);
        assert_eq!(soft_update(&old, &cand, 1.0).unwrap(), cand);
        let mut ones = old.clone();
        ones.tensors_mut().into_iter().for_each(|t| t.fill(1.0));
        let mut threes = old.clone();
        threes.tensors_mut().into_iter().for_each(|t| t.fill(3.0));
        let mixed = soft_update(&ones, &threes, 0.0005).unwrap();
        assert!(mixed.tensors().iter().all(|t| t.as_slice().iter().all(|&x| (x - 1.001).abs() < 1e-15)));
        let again = soft_update(&mixed, &threes, 0.0).unwrap();
        assert_eq!(again, mixed);
        let bad = FilterParams::init(3, 8, &mut stream(1, &[]));
        assert!(soft_update(&old, &bad, 0.5).is_err());
        assert!(soft_update(&old, &cand, 1.5).is_err());
    }

    impl PolicyNet {
        fn tensors_flat(&self) -> Vec<f64> {
            [&self.w2, &self.b, &self.w1].iter().flat_map(|t| t.as_slice().to_vec()).collect()
        }
    }
}
