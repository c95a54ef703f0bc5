use afa_tensor::io::{decode, encode};
use afa_tensor::{load_tensor_file, save_tensor_file, Tape, Tensor, BN_EPS};
use proptest::prelude::*;

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 0..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-100.0f64..100.0, n)
            .prop_map(move |data| Tensor::new(&shape, data).unwrap())
    })
}

proptest! {
    #[test]
    fn gram_is_symmetric_psd(
        c in 1usize..6, s in 1usize..6,
        seed in prop::collection::vec(-3.0f64..3.0, 36),
        probe in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let data: Vec<f64> = seed.iter().cycle().take(c * s).copied().collect();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(&[c, s, 1], data).unwrap());
        let g = tape.gram_matrix(m).unwrap();
        let gv = tape.value(g).data();
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(gv[i * c + j].to_bits(), gv[j * c + i].to_bits());
            }
        }
        let x = &probe[..c];
        let quad: f64 = (0..c)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| x[i] * gv[i * c + j] * x[j])
            .sum();
        prop_assert!(quad >= -1e-9);
    }

    #[test]
    fn softmax_cross_entropy_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, logits).unwrap());
        let l = tape.softmax_cross_entropy(x, &labels).unwrap();
        prop_assert!(tape.value(l).item().unwrap() >= 0.0);
    }

    #[test]
    fn uniform_logits_are_ln_n(n in 1usize..10, v in -5.0f64..5.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, n], v).unwrap());
        let l = tape.softmax_cross_entropy(x, &[n - 1]).unwrap();
        prop_assert!((tape.value(l).item().unwrap() - (n as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn batch_norm_train_moments(
        data in prop::collection::vec(-10.0f64..10.0, 24),
    ) {
        // 3 samples × 2 channels × 2 × 2
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2, 2, 2], data).unwrap());
        let (y, stats) = tape.batch_norm(x, x).unwrap();
        prop_assume!(stats.var.iter().all(|&v| v > 0.1));
        let yv = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| yv[(n * 2 + ch) * 4..(n * 2 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() <= 1e-6);
            let target = stats.var[ch] / (stats.var[ch] + BN_EPS);
            prop_assert!((var - target).abs() <= 1e-4);
            prop_assert!((var - 1.0 / (1.0 + BN_EPS)).abs() <= 1e-4);
        }
    }

    #[test]
    fn afat_round_trip_is_f32_exact(t in tensor_strategy(4)) {
        let back = decode(&encode(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

#[test]
fn file_round_trip_of_image_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = afa_tensor::Rng::new(3);
    let img = Tensor::new(&[3, 16, 16], rng.normals(768, 0.0, 1.0)).unwrap();
    let path = dir.path().join("img.afat");
    save_tensor_file(&path, &img).unwrap();
    let back = load_tensor_file(&path).unwrap();
    assert!(back.max_abs_diff(&img) <= 1e-6);

    let batch = Tensor::new(&[2, 3, 4, 5], rng.normals(120, 0.0, 1.0)).unwrap();
    let path = dir.path().join("batch.afat");
    save_tensor_file(&path, &batch).unwrap();
    assert_eq!(load_tensor_file(&path).unwrap().shape(), &[2, 3, 4, 5]);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_tensor_file(&path).is_err());
}

#[test]
fn seeded_programs_are_bitwise_repeatable() {
    let run = || {
        let mut rng = afa_tensor::Rng::new(11);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 2, 4, 4], rng.normals(64, 0.0, 1.0)).unwrap());
        let w = tape.param(Tensor::new(&[3, 2, 3, 3], rng.normals(54, 0.0, 0.3)).unwrap());
        let y = tape.conv2d(x, w).unwrap();
        let (y, _) = tape.batch_norm(y, y).unwrap();
        let y = tape.relu(y).unwrap();
        let g = tape.gram_matrix(y).unwrap();
        let l = tape.mean(g).unwrap();
        let grads = tape.backward(l).unwrap();
        (tape.value(l).item().unwrap(), grads.wrt(w).clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
