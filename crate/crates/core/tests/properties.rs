use std::sync::Arc;

use argue_core::attribute::{cluster_attributes, select_per_cluster};
use argue_core::encoder::{ImageEncoder, TextEncoder};
use argue_core::loss::{
    attribute_averaged_distribution, negative_distribution, negative_loss, regularization_loss,
    zero_shot_distribution,
};
use argue_core::numerics::{
    entropy, gradient_check, random_unit, seeded_rng, softmax_with_temperature, Matrix, Tape, Var,
};
use argue_core::train::harmonic_mean;
use proptest::prelude::*;
use rand::Rng;

fn finite_logits(max: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-max..max, 1..40)
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, 2..20).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn unit_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| random_unit(&mut rng, d)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_sums_to_one(logits in finite_logits(1e6)) {
        let p = softmax_with_temperature(&logits, 1.0).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariant(logits in finite_logits(50.0), c in -1e3f64..1e3) {
        let p = softmax_with_temperature(&logits, 1.0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let q = softmax_with_temperature(&shifted, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_bounded_by_log_n(p in distribution()) {
        let n = p.len() as f64;
        let h = entropy(&p).unwrap();
        prop_assert!(h <= n.ln() + 1e-12);
        let spread = p.iter().cloned().fold(0.0, f64::max) - p.iter().cloned().fold(1.0, f64::min);
        if spread > 1e-3 {
            prop_assert!(h < n.ln() - 1e-9);
        }
    }

    #[test]
    fn negative_loss_at_least_log_c(p in distribution()) {
        let c = p.len() as f64;
        let l = negative_loss(&p).unwrap();
        prop_assert!(l >= c.ln() - 1e-12);
        let uniform = vec![1.0 / c; p.len()];
        prop_assert!((negative_loss(&uniform).unwrap() - c.ln()).abs() < 1e-9);
    }

    #[test]
    fn harmonic_mean_between_min_and_mean(a in 1e-3f64..100.0, b in 1e-3f64..100.0) {
        let h = harmonic_mean(a, b).unwrap();
        prop_assert!(h >= a.min(b) - 1e-12);
        prop_assert!(h <= (a + b) / 2.0 + 1e-12);
    }

    #[test]
    fn distributions_sum_to_one(seed in 0u64..1000, c in 2usize..8, j in 1usize..4, tau in 0.01f64..1.0) {
        let f = &unit_vectors(1, 16, seed)[0];
        let ws = unit_vectors(c * j, 16, seed + 1);
        let per_class: Vec<Vec<Vec<f64>>> = ws.chunks(j).map(|ch| ch.to_vec()).collect();
        for p in [
            zero_shot_distribution(f, &ws[..c], tau).unwrap(),
            attribute_averaged_distribution(f, &per_class, tau).unwrap(),
            negative_distribution(f, &ws[..c], tau).unwrap(),
        ] {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn class_permutation_equivariance(seed in 0u64..1000, c in 2usize..7, tau in 0.01f64..1.0) {
        let f = &unit_vectors(1, 12, seed)[0];
        let ws = unit_vectors(c * 2, 12, seed + 7);
        let per_class: Vec<Vec<Vec<f64>>> = ws.chunks(2).map(|ch| ch.to_vec()).collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.rotate_left(seed as usize % c);
        let permuted: Vec<Vec<Vec<f64>>> = order.iter().map(|&i| per_class[i].clone()).collect();
        let p = attribute_averaged_distribution(f, &per_class, tau).unwrap();
        let q = attribute_averaged_distribution(f, &permuted, tau).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((q[k] - p[i]).abs() < 1e-12);
        }
        prop_assert!((negative_loss(&p).unwrap() - negative_loss(&q).unwrap()).abs() < 1e-12);

        let textual = unit_vectors(c * 2, 12, seed + 9);
        let group = |v: &[Vec<f64>]| -> Vec<Vec<Vec<f64>>> { v.chunks(2).map(|ch| ch.to_vec()).collect() };
        let (sg, tg) = (group(&ws), group(&textual));
        let reorder = |g: &[Vec<Vec<f64>>]| -> Vec<Vec<Vec<f64>>> { order.iter().map(|&i| g[i].clone()).collect() };
        let a = regularization_loss(&sg, &tg, tau).unwrap();
        let b = regularization_loss(&reorder(&sg), &reorder(&tg), tau).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn encoders_emit_unit_vectors(seed in 0u64..500, len in 1usize..8) {
        let text = TextEncoder::random(seed, 10, 12, 8, 8);
        let mut rng = seeded_rng(seed + 3);
        let toks: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..10).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = toks.iter().map(|t| t.as_slice()).collect();
        let e = text.encode_text(&refs).unwrap();
        prop_assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        let again = TextEncoder::random(seed, 10, 12, 8, 8).encode_text(&refs).unwrap();
        prop_assert_eq!(e, again);

        let image = ImageEncoder::random(seed, 6, 8);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = image.encode_image(&x).unwrap();
        prop_assert!((f.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_selection_per_cluster(seed in 0u64..300, j in 1usize..15, n in 1usize..6) {
        let points = unit_vectors(j, 6, seed);
        let clustering = cluster_attributes(&points, n, seed).unwrap();
        prop_assert_eq!(clustering.k, n.min(j));
        let mut rng = seeded_rng(seed + 11);
        let scores: Vec<f64> = (0..j).map(|_| rng.random()).collect();
        let picked = select_per_cluster(&clustering, &scores);
        prop_assert_eq!(picked.len(), clustering.k);
        for (k, &i) in picked.iter().enumerate() {
            prop_assert_eq!(clustering.assignment[i], k);
        }
        for w in clustering.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn selection_ignores_pool_order(seed in 0u64..300, j in 2usize..12, n in 1usize..4) {
        let points = unit_vectors(j, 6, seed);
        let clustering = cluster_attributes(&points, n, seed).unwrap();
        let mut rng = seeded_rng(seed + 5);
        let scores: Vec<f64> = (0..j).map(|_| rng.random()).collect();
        let picked = select_per_cluster(&clustering, &scores);

        // Same clustering and scores in reversed pool order.
        let mut reversed = clustering.clone();
        reversed.assignment.reverse();
        let rev_scores: Vec<f64> = scores.iter().rev().cloned().collect();
        let rev_picked: Vec<usize> = select_per_cluster(&reversed, &rev_scores)
            .iter()
            .map(|i| j - 1 - i)
            .collect();
        prop_assert_eq!(picked, rev_picked);
    }
}

fn check_op(name: &str, seed: u64, build: impl Fn(&mut Tape, Var) -> Var, dim: usize) {
    let mut rng = seeded_rng(seed);
    let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let report = gradient_check(build, &x, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "{name} seed {seed}: max_rel_err {}",
        report.max_rel_err
    );
}

/// Each op is wrapped in a random linear read-out so that vector outputs
/// become scalars with generic weights.
#[test]
fn every_op_passes_gradient_check() {
    for seed in 0..20u64 {
        let mut rng = seeded_rng(seed + 40);
        let dim = rng.random_range(2..=16usize);
        let out_dim = rng.random_range(2..=12usize);
        let m = Arc::new(
            Matrix::from_rows(
                &(0..out_dim)
                    .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect::<Vec<Vec<f64>>>(),
            )
            .unwrap(),
        );
        let bias: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        let probe = move |t: &mut Tape, v: Var, n: usize, s: u64| {
            let mut r = seeded_rng(s + 1000);
            let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let w = t.leaf(w);
            t.dot(v, w)
        };
        let idx: Vec<usize> = (0..dim).rev().step_by(2).collect();
        let k = idx.len();
        check_op(
            "tanh",
            seed,
            |t, x| {
                let y = t.tanh(x);
                probe(t, y, dim, seed)
            },
            dim,
        );
        check_op(
            "linear",
            seed,
            |t, x| {
                let y = t.scale(x, 2.5);
                let z = t.add(y, x);
                let w = t.sub(z, x);
                probe(t, w, dim, seed)
            },
            dim,
        );
        check_op(
            "matvec",
            seed,
            |t, x| {
                let y = t.matvec(&m, x, Some(&bias));
                probe(t, y, out_dim, seed)
            },
            dim,
        );
        check_op(
            "normalize",
            seed,
            |t, x| {
                let y = t.normalize(x);
                probe(t, y, dim, seed)
            },
            dim,
        );
        check_op(
            "dot",
            seed,
            |t, x| {
                let y = t.tanh(x);
                t.dot(x, y)
            },
            dim,
        );
        check_op(
            "concat",
            seed,
            |t, x| {
                let y = t.tanh(x);
                let c = t.concat(&[x, y]);
                probe(t, c, 2 * dim, seed)
            },
            dim,
        );
        check_op(
            "gather",
            seed,
            |t, x| {
                let g = t.gather(x, &idx);
                probe(t, g, k, seed)
            },
            dim,
        );
        check_op(
            "index",
            seed,
            |t, x| {
                let a = t.index(x, 0);
                let b = t.index(x, dim - 1);
                t.add(a, b)
            },
            dim,
        );
        check_op(
            "logsumexp",
            seed,
            |t, x| {
                let y = t.scale(x, 3.0);
                t.logsumexp(y)
            },
            dim,
        );
        check_op(
            "logsumexp_across",
            seed,
            |t, x| {
                let y = t.tanh(x);
                let z = t.scale(x, 3.0);
                let l = t.logsumexp_across(&[x, y, z]);
                probe(t, l, dim, seed)
            },
            dim,
        );
        check_op(
            "log_softmax",
            seed,
            |t, x| {
                let y = t.log_softmax(x);
                probe(t, y, dim, seed)
            },
            dim,
        );
        check_op(
            "sum",
            seed,
            |t, x| {
                let y = t.tanh(x);
                let s = t.sum(&[x, y, x]);
                t.reduce_sum(s)
            },
            dim,
        );
        check_op(
            "mean_entries",
            seed,
            |t, x| {
                let y = t.tanh(x);
                t.mean_entries(y)
            },
            dim,
        );
    }
}

#[test]
fn backward_leaves_values_untouched() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![0.3, -1.2, 2.0]);
    let y = tape.tanh(x);
    let n = tape.normalize(y);
    let l = tape.logsumexp(n);
    let before: Vec<Vec<f64>> = [x, y, n, l]
        .iter()
        .map(|v| tape.value(*v).to_vec())
        .collect();
    let _ = tape.backward(l);
    let _ = tape.backward(l);
    let after: Vec<Vec<f64>> = [x, y, n, l]
        .iter()
        .map(|v| tape.value(*v).to_vec())
        .collect();
    assert_eq!(before, after);
}
