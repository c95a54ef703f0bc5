use afa_core::heads::{episode_accuracy, head_probabilities, EpisodeFeatures, HeadKind};
use afa_tensor::{Rng, Tape, Tensor};

const HEADS: [HeadKind; 3] = [
    HeadKind::Matching,
    HeadKind::Proto,
    HeadKind::Tpn {
        alpha: 0.99,
        sigma: None,
    },
];

struct Task {
    support: Tensor,
    labels: Vec<usize>,
    query: Tensor,
    ways: usize,
}

fn task(rng: &mut Rng, ways: usize, shots: usize, queries: usize, dim: usize) -> Task {
    let centres: Vec<Vec<f64>> = (0..ways).map(|_| rng.normals(dim, 0.0, 2.0)).collect();
    let mut draw = |c: usize| -> Vec<f64> { centres[c].iter().map(|m| m + rng.normal(0.0, 0.5)).collect() };
    let labels: Vec<usize> = (0..ways).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    let support: Vec<f64> = labels.iter().flat_map(|&c| draw(c)).collect();
    let query: Vec<f64> = (0..ways * queries).flat_map(|i| draw(i / queries)).collect();
    Task {
        support: Tensor::matrix(ways * shots, dim, support).unwrap(),
        labels,
        query: Tensor::matrix(ways * queries, dim, query).unwrap(),
        ways,
    }
}

fn probs(head: HeadKind, t: &Task) -> Tensor {
    let mut tape = Tape::new();
    let support = tape.constant(t.support.clone());
    let query = tape.constant(t.query.clone());
    let p = head_probabilities(
        &mut tape,
        head,
        &EpisodeFeatures {
            support,
            support_labels: &t.labels,
            query,
            ways: t.ways,
        },
    )
    .unwrap();
    tape.value(p).clone()
}

#[test]
fn rows_are_distributions() {
    let mut rng = Rng::new(4);
    for head in HEADS {
        for _ in 0..20 {
            let t = task(&mut rng, 5, 2, 3, 6);
            let p = probs(head, &t);
            assert_eq!(p.shape(), &[15, 5]);
            for row in p.data().chunks(5) {
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "{head}");
            }
        }
    }
}

#[test]
fn relabelling_classes_permutes_columns() {
    let mut rng = Rng::new(6);
    let perm = [2usize, 0, 3, 1];
    for head in HEADS {
        let t = task(&mut rng, 4, 3, 2, 5);
        let p = probs(head, &t);
        let relabelled = Task {
            labels: t.labels.iter().map(|&c| perm[c]).collect(),
            ..t
        };
        let q = probs(head, &relabelled);
        for r in 0..p.shape()[0] {
            for (c, &to) in perm.iter().enumerate() {
                let a = p.data()[r * 4 + c];
                let b = q.data()[r * 4 + to];
                assert!((a - b).abs() <= 1e-9, "{head}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn matching_head_ignores_feature_scale() {
    let mut rng = Rng::new(10);
    let t = task(&mut rng, 3, 2, 2, 4);
    let p = probs(HeadKind::Matching, &t);
    let scaled = Task {
        support: t.support.map(|v| 7.5 * v),
        query: t.query.map(|v| 7.5 * v),
        ..t
    };
    assert!(p.max_abs_diff(&probs(HeadKind::Matching, &scaled)) <= 1e-12);
}

#[test]
fn separated_clusters_are_classified() {
    let mut rng = Rng::new(12);
    for head in HEADS {
        let t = task(&mut rng, 5, 5, 4, 16);
        let labels: Vec<usize> = (0..20).map(|i| i / 4).collect();
        assert!(episode_accuracy(&probs(head, &t), &labels) >= 0.9, "{head}");
    }
}

#[test]
fn weak_propagation_approaches_uniform() {
    let mut rng = Rng::new(14);
    let t = task(&mut rng, 3, 1, 2, 4);
    let p = probs(
        HeadKind::Tpn {
            alpha: 1e-9,
            sigma: None,
        },
        &t,
    );
    for v in p.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }
}
