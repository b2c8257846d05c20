use holderpo::objectives::*;
use holderpo::sim::PolicyParams;
use holderpo::*;
use ndarray::{array, Array2};

fn ord(p: f64) -> HolderOrder {
    HolderOrder::new(p).unwrap()
}

fn clip() -> ClipConfig {
    ClipConfig::new(0.2).unwrap()
}

/// Rollout over positions `0..n` with token 0 everywhere and the given per-token ratios.
fn rollout(ratios: &[f64]) -> RolloutRecord {
    let n = ratios.len();
    let old = vec![-3.0; n];
    let new = ratios.iter().map(|r| r.ln() - 3.0).collect();
    RolloutRecord::new(vec![0; n], old, new, 0.0, vec![true; n]).unwrap()
}

fn group(seqs: &[&[f64]], adv: &[f64]) -> GroupBatch {
    GroupBatch::with_advantages(seqs.iter().map(|r| rollout(r)).collect(), adv.to_vec()).unwrap()
}

#[test]
fn advantages() {
    assert_eq!(advantage_estimates(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
    assert_eq!(advantage_estimates(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    let a = advantage_estimates(&[1.0, 0.0, 0.0, 0.0]).unwrap();
    let expect = [
        3f64.sqrt(),
        -1.0 / 3f64.sqrt(),
        -1.0 / 3f64.sqrt(),
        -1.0 / 3f64.sqrt(),
    ];
    for (x, y) in a.iter().zip(expect) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(advantage_estimates(&[1.0]).is_err());
}

#[test]
fn surrogates() {
    let flat = group(&[&[1.0, 1.0], &[1.0]], &[0.7, -0.7]);
    assert_eq!(surrogate_unclipped(&flat, ord(2.0)).unwrap(), 0.0);

    let two = group(&[&[1.5], &[0.5]], &[1.0, -1.0]);
    assert!((surrogate_unclipped(&two, ord(1.0)).unwrap() - 0.5).abs() < 1e-14);

    let up = group(&[&[1.5]], &[1.0]);
    assert!((surrogate_seq_clip(&up, ord(1.0), clip()).unwrap() - 1.2).abs() < 1e-14);
    let down = group(&[&[0.5]], &[-1.0]);
    assert!((surrogate_seq_clip(&down, ord(1.0), clip()).unwrap() + 0.8).abs() < 1e-14);

    let inside = group(&[&[1.1, 0.9, 1.05], &[0.95, 1.15]], &[1.3, -0.4]);
    for p in [-2.0, 0.0, 1.0, 3.0] {
        let u = surrogate_unclipped(&inside, ord(p)).unwrap();
        assert!((surrogate_seq_clip(&inside, ord(p), clip()).unwrap() - u).abs() < 1e-14);
        assert!((surrogate_token_clip(&inside, ord(p), clip()).unwrap() - u).abs() < 1e-14);
    }

    let tok = group(&[&[0.5, 2.0]], &[1.0]);
    assert!((surrogate_token_clip(&tok, ord(1.0), clip()).unwrap() - 0.85).abs() < 1e-14);
}

#[test]
fn losses() {
    let seq = |r: f64| LogRatioSequence::unmasked(vec![r.ln()]).unwrap();
    assert!((loss_holder_po(&seq(1.5), 1.0, ord(1.0), clip()) + 1.2).abs() < 1e-14);
    assert!((loss_holder_po(&seq(0.5), -1.0, ord(1.0), clip()) - 0.8).abs() < 1e-14);
    for a in [-2.0, 0.3, 1.7] {
        assert_eq!(loss_holder_po(&seq(1.0), a, ord(-1.0), clip()), -a);
    }
}

#[test]
fn grad_rho_cases() {
    let r = RatioSequence::new(&[1.3, 0.7, 2.0]).unwrap();
    let zero = Array2::<f64>::zeros((3, 4));
    assert!(grad_rho(&r, zero.view(), ord(1.5))
        .unwrap()
        .iter()
        .all(|&g| g == 0.0));
    assert!(grad_rho(&r, Array2::<f64>::zeros((2, 4)).view(), ord(1.0)).is_err());

    let single = RatioSequence::new(&[1.7]).unwrap();
    let g = array![[0.5, -2.0, 1.0]];
    for p in [-3.0, 0.0, 2.0] {
        let out = grad_rho(&single, g.view(), ord(p)).unwrap();
        for (a, b) in out.iter().zip(g.row(0)) {
            assert!((a - 1.7 * b).abs() < 1e-14);
        }
    }
}

/// Minibatch over a 2x3 tabular policy, every token id valid.
fn tabular(ratio_sets: &[&[f64]], adv: &[f64]) -> (PolicyParams, Vec<GroupBatch>) {
    let policy = PolicyParams::from_logits(array![[0.2, -0.1, 0.4], [0.0, 0.3, -0.5]]).unwrap();
    let rollouts = ratio_sets
        .iter()
        .enumerate()
        .map(|(i, ratios)| {
            let tokens: Vec<usize> = (0..ratios.len()).map(|t| (i + t) % 3).collect();
            let new: Vec<f64> = tokens
                .iter()
                .enumerate()
                .map(|(pos, &v)| policy.log_prob(pos, v))
                .collect();
            let old = new.iter().zip(*ratios).map(|(n, r)| n - r.ln()).collect();
            RolloutRecord::new(tokens, old, new, 0.0, vec![true; ratios.len()]).unwrap()
        })
        .collect();
    (
        policy,
        vec![GroupBatch::with_advantages(rollouts, adv.to_vec()).unwrap()],
    )
}

#[test]
fn estimators() {
    let (policy, mb) = tabular(&[&[1.1, 0.95], &[1.0, 1.05]], &[0.0, 0.0]);
    let g = grad_estimator_unclipped(&mb, &policy, ord(1.0)).unwrap();
    assert!(g.vector.iter().all(|&x| x == 0.0));
    assert!(grad_estimator_unclipped(&[], &policy, ord(1.0)).is_err());

    // in-band ratios: all three regimes coincide
    let (policy, mb) = tabular(&[&[1.1, 0.95], &[1.0, 1.05]], &[0.8, -1.1]);
    for p in [-2.0, 0.5, 2.0] {
        let u = grad_estimator_unclipped(&mb, &policy, ord(p)).unwrap();
        let s = grad_estimator_seq_clip(&mb, &policy, ord(p), clip()).unwrap();
        let t = grad_estimator_token_clip(&mb, &policy, ord(p), clip()).unwrap();
        for ((a, b), c) in u.vector.iter().zip(&s.vector).zip(&t.vector) {
            assert!((a - b).abs() < 1e-14 && (a - c).abs() < 1e-14);
        }
        assert_eq!(s.clip_fraction, 0.0);
    }

    // ρ = 1.3 with Â = 1 is pinned by the sequence clip
    let (policy, mb) = tabular(&[&[1.3]], &[1.0]);
    let s = grad_estimator_seq_clip(&mb, &policy, ord(1.0), clip()).unwrap();
    assert!(s.vector.iter().all(|&x| x == 0.0));
    assert_eq!(s.clip_fraction, 1.0);

    // B = G = 1: Â · ∇ρ with tabular score rows
    let (policy, mb) = tabular(&[&[1.2, 0.9]], &[0.6]);
    let ratios = RatioSequence::new(&[1.2, 0.9]).unwrap();
    let mut scores = Array2::zeros((2, 6));
    for pos in 0..2 {
        let tok = mb[0].rollouts[0].token_ids[pos];
        for (v, pi) in policy.probabilities(pos).iter().enumerate() {
            scores[[pos, pos * 3 + v]] = f64::from(u8::from(v == tok)) - pi;
        }
    }
    let expect = grad_rho(&ratios, scores.view(), ord(2.0)).unwrap() * 0.6;
    let got = grad_estimator_unclipped(&mb, &policy, ord(2.0)).unwrap();
    for (a, b) in got.vector.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn token_clip_drops_the_clipped_token() {
    // Â > 0, r = [1.5, 1.0]: the first token is clipped to 1.2 and loses its gradient
    let (policy, mb) = tabular(&[&[1.5, 1.0]], &[1.0]);
    let g = grad_estimator_token_clip(&mb, &policy, ord(1.0), clip()).unwrap();
    assert_eq!(g.clip_fraction, 0.5);
    // H = (1.2 + 1.0)/2 at p = 1, so only token 1 contributes W_1 · H · g_1 = (1.0/2.2) · 1.1 · g_1
    let tok = mb[0].rollouts[0].token_ids[1];
    let pi = policy.probabilities(1);
    for v in 0..3 {
        let score = f64::from(u8::from(v == tok)) - pi[v];
        assert!((g.vector[3 + v] - 0.5 * score).abs() < 1e-14);
        assert_eq!(g.vector[v], 0.0);
    }
}

#[test]
fn variance_terms() {
    let ones = group(&[&[1.0, 1.0], &[1.0]], &[1.5, -0.5]);
    for p in [-2.0, 0.0, 4.0] {
        assert!((variance_bound_term(&[ones.clone()], ord(p)).unwrap() - 1.25).abs() < 1e-14);
    }
    let five = group(&[&[5.0]], &[1.0]);
    assert!((variance_bound_term(&[five], ord(1.0)).unwrap() - 25.0).abs() < 1e-12);
    assert!(variance_bound_term(&[], ord(1.0)).is_err());

    let r = RatioSequence::new(&[2.0, 8.0]).unwrap();
    assert!((second_moment_orthogonal(1.0, 1.0, &r, ord(1.0)).unwrap() - 17.0).abs() < 1e-12);
    let c = RatioSequence::new(&[1.4; 5]).unwrap();
    for p in [-3.0, 0.0, 2.0] {
        let v = second_moment_orthogonal(0.5, 2.0, &c, ord(p)).unwrap();
        assert!((v - 0.25 * 4.0 * 1.96 / 5.0).abs() < 1e-12);
    }
}
