use std::collections::HashSet;
use std::fs;

use afa_core::episodes::{
    default_classes, gen_synthetic, ingest_csv, render, sample_batch, sample_episode, split_base_novel, CsvSchema,
    Dataset, DomainSpec, GeneratorSpec,
};
use afa_core::CoreError;
use afa_tensor::Rng;

fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        samples_per_cell: 24,
        ..GeneratorSpec::default_benchmark(11)
    }
}

#[test]
fn identity_domain_reproduces_the_raw_render() {
    let spec = small_spec();
    let class = &default_classes()[3];
    let raw = render(class, 16, 16, spec.seed, 5);
    assert_eq!(DomainSpec::identity(0, "source").apply(&raw, 16, 16, 3, 5), raw);
}

#[test]
fn generation_is_deterministic() {
    let a = gen_synthetic(&small_spec()).unwrap();
    let b = gen_synthetic(&small_spec()).unwrap();
    assert_eq!(a, b);
    let other = gen_synthetic(&GeneratorSpec {
        seed: 12,
        ..small_spec()
    })
    .unwrap();
    assert_ne!(a.sample(0, 0, 0), other.sample(0, 0, 0));
}

fn channel_means(img: &[f64]) -> [f64; 3] {
    let s = img.len() / 3;
    [0, 1, 2].map(|c| img[c * s..(c + 1) * s].iter().sum::<f64>() / s as f64)
}

#[test]
fn channel_swap_permutes_channel_means() {
    let class = &default_classes()[0];
    let raw = render(class, 16, 16, 1, 0);
    let swap = DomainSpec {
        mixing: [0., 1., 0., 0., 0., 1., 1., 0., 0.],
        ..DomainSpec::identity(1, "swap")
    };
    let out = swap.apply(&raw, 16, 16, 0, 0);
    let (m_raw, m_out) = (channel_means(&raw), channel_means(&out));
    // output channel c reads input channel c+1
    for c in 0..3 {
        assert!((m_out[c] - m_raw[(c + 1) % 3]).abs() < 1e-12);
    }
}

#[test]
fn noise_grows_the_distance_from_the_clean_image() {
    let class = &default_classes()[1];
    let raw = render(class, 16, 16, 1, 2);
    let dist = |noise: f64| {
        let d = DomainSpec {
            noise_std: noise,
            seed: 4,
            ..DomainSpec::identity(1, "noisy")
        };
        let out = d.apply(&raw, 16, 16, 1, 2);
        out.iter().zip(&raw).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let ds: Vec<f64> = [0.0, 0.1, 0.3, 0.9].iter().map(|&n| dist(n)).collect();
    assert_eq!(ds[0], 0.0);
    assert!(ds.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn base_and_novel_partition_the_classes() {
    let (base, novel) = split_base_novel(10, 6).unwrap();
    assert_eq!(novel, vec![6, 7, 8, 9]);
    let all: HashSet<usize> = base.iter().chain(&novel).copied().collect();
    assert_eq!(all.len(), 10);
    assert!(base.iter().all(|b| !novel.contains(b)));
    assert_eq!(split_base_novel(10, 6).unwrap(), (base, novel));
}

#[test]
fn episodes_follow_the_protocol() {
    let ds = gen_synthetic(&small_spec()).unwrap();
    let mut rng = Rng::new(2);
    for shots in [1, 5] {
        for domain in 0..3 {
            let ep = sample_episode(&ds, &ds.manifest.novel, domain, 5, shots, 16, &mut rng).unwrap();
            assert_eq!(ep.support.shape(), &[5 * shots, 3, 16, 16]);
            assert_eq!(ep.query.shape(), &[80, 3, 16, 16]);
            assert_eq!(ep.support_labels.len(), 5 * shots);
            assert_eq!(ep.query_labels.len(), 80);
            assert_eq!(ep.domain, domain);
            let s: HashSet<_> = ep.support_ids.iter().collect();
            let q: HashSet<_> = ep.query_ids.iter().collect();
            assert_eq!(s.len(), 5 * shots);
            assert_eq!(q.len(), 80);
            assert!(s.is_disjoint(&q));
            assert!(ep.classes.iter().all(|c| ds.manifest.novel.contains(c)));
            // every row is a sample of the episode's own domain
            for (row, &(class, idx)) in ep.support_ids.iter().enumerate() {
                let len = ds.manifest.sample_len();
                assert_eq!(&ep.support.data()[row * len..(row + 1) * len], ds.sample(domain, class, idx));
            }
        }
    }
}

#[test]
fn too_few_classes_or_samples_are_rejected() {
    let ds = gen_synthetic(&small_spec()).unwrap();
    let mut rng = Rng::new(3);
    assert!(sample_episode(&ds, &ds.manifest.novel, 0, 6, 1, 16, &mut rng).is_err());
    assert!(sample_episode(&ds, &ds.manifest.novel, 0, 5, 10, 16, &mut rng).is_err());
    let (x, labels) = sample_batch(&ds, &ds.manifest.base, 0, 64, &mut rng).unwrap();
    assert_eq!(x.shape()[0], 64);
    assert!(labels.iter().all(|&l| l < ds.manifest.base.len()));
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = gen_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn csv_rows_become_vector_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let mut text = String::from("a,b,c,d,label,domain\n");
    for i in 0..100 {
        text += &format!("{i},{},{},{},class{},dom{}\n", i * 2, i % 7, 0.5, i % 5, i % 2);
    }
    fs::write(&path, text).unwrap();
    let ds = ingest_csv(&path, &CsvSchema::default()).unwrap();
    assert_eq!(ds.manifest.image_shape, [4, 1, 1]);
    assert_eq!(ds.manifest.total_samples(), 100);
    assert_eq!(ds.manifest.classes.len(), 5);
    assert_eq!(ds.manifest.domains.len(), 2);
    assert_eq!(ds.sample(0, 0, 0), &[0.0, 0.0, 0.0, 0.5]);

    fs::write(&path, "a,b,c,d,label,domain\n").unwrap();
    assert!(matches!(ingest_csv(&path, &CsvSchema::default()), Err(CoreError::Csv { .. })));

    fs::write(&path, "a,b,c,d,label,domain\n1,2,x,4,k,d\n").unwrap();
    match ingest_csv(&path, &CsvSchema::default()) {
        Err(CoreError::Csv { row, .. }) => assert_eq!(row, 1),
        other => panic!("expected a row error, got {other:?}"),
    }
}
