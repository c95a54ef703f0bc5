use afa_core::adversary::{route_gradients, EpisodeLosses, GroupVars};
use afa_core::encoder::{
    afa_apply, encode, forward_dual, init_afa, AfaLayer, Encoder, EncoderConfig, ForwardOptions, Perturbation,
};
use afa_core::heads::{episode_loss, head_probabilities, EpisodeFeatures, HeadKind};
use afa_core::Parameters;
use afa_tensor::{NormMode, Rng, Tape, Tensor};

fn small() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        height: 8,
        width: 8,
        channels: vec![4, 6],
        pool: true,
    }
}

fn batch(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::new(&[n, 3, 8, 8], rng.normals(n * 192, 0.0, 1.0)).unwrap()
}

fn channel_moments(t: &Tensor, c: usize) -> (f64, f64) {
    let [n, ch, h, w] = *t.shape() else { panic!("rank 4") };
    let s = h * w;
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| t.data()[(i * ch + c) * s..(i * ch + c + 1) * s].to_vec())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var.sqrt())
}

#[test]
fn affine_perturbation_maps_channel_moments() {
    let mut rng = Rng::new(3);
    for _ in 0..60 {
        let (n, c, h, w) = (2, 3, 4, 5);
        let m = Tensor::new(&[n, c, h, w], rng.normals(n * c * h * w, 0.4, 1.7)).unwrap();
        let gamma = Tensor::vector(rng.normals(c, 1.0, 1.0)).unwrap();
        let beta = Tensor::vector(rng.normals(c, 0.0, 1.0)).unwrap();
        let mut tape = Tape::new();
        let (mv, gv, bv) = (tape.constant(m.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let out = afa_apply(&mut tape, mv, gv, bv).unwrap();
        for ch in 0..c {
            let (mu, sd) = channel_moments(&m, ch);
            let (mu_a, sd_a) = channel_moments(tape.value(out), ch);
            let g = gamma.data()[ch];
            assert!((mu_a - (g * mu + beta.data()[ch])).abs() <= 1e-9);
            assert!((sd_a - g.abs() * sd).abs() <= 1e-9);
        }
    }
}

#[test]
fn identity_perturbation_leaves_both_streams_equal() {
    let mut rng = Rng::new(5);
    let enc = Encoder::init(&small(), &mut rng).unwrap();
    let afa = Perturbation::identity(&small().channels).unwrap();
    for shared in [false, true] {
        let mut tape = Tape::new();
        let ev = enc.bind(&mut tape);
        let av = afa.bind(&mut tape);
        let x = tape.constant(batch(&mut rng, 4));
        let opts = ForwardOptions {
            mode: NormMode::Train,
            shared_bn_stats: shared,
        };
        let out = forward_dual(&mut tape, &enc, &ev, Some((&afa, &av)), x, opts).unwrap();
        let f_a = out.features.augmented.unwrap();
        assert_eq!(tape.value(f_a), tape.value(out.features.original));
        for site in &out.features.sites {
            assert_eq!(tape.value(site.augmented), tape.value(site.original));
        }
    }
}

#[test]
fn streams_share_encoder_weights() {
    let mut rng = Rng::new(8);
    let enc = Encoder::init(&small(), &mut rng).unwrap();
    let afa = Perturbation::Affine(init_afa(&small().channels, &mut rng).unwrap());
    let mut tape = Tape::new();
    let ev = enc.bind(&mut tape);
    let av = afa.bind(&mut tape);
    let x = tape.constant(batch(&mut rng, 4));
    let out = forward_dual(&mut tape, &enc, &ev, Some((&afa, &av)), x, ForwardOptions::train()).unwrap();
    let f_a = out.features.augmented.unwrap();
    assert_ne!(tape.value(f_a), tape.value(out.features.original));
    // F_a alone reaches every encoder tensor: one set of weights feeds both streams.
    let s = tape.sum(f_a).unwrap();
    let g = tape.backward(s).unwrap();
    for v in &ev {
        assert!(g.wrt(*v).data().iter().any(|x| *x != 0.0));
    }
    assert_eq!(ev.len(), 3 * small().channels.len());
}

#[test]
fn classification_loss_never_moves_perturbation_parameters() {
    let mut rng = Rng::new(13);
    let enc = Encoder::init(&small(), &mut rng).unwrap();
    let afa = Perturbation::Affine(init_afa(&small().channels, &mut rng).unwrap());
    let mut tape = Tape::new();
    let ev = enc.bind(&mut tape);
    let av = afa.bind(&mut tape);
    let x = tape.constant(batch(&mut rng, 6));
    let out = forward_dual(&mut tape, &enc, &ev, Some((&afa, &av)), x, ForwardOptions::train()).unwrap();
    let f_a = out.features.augmented.unwrap();
    let support = tape.slice_rows(f_a, 0, 2).unwrap();
    let query = tape.slice_rows(f_a, 2, 4).unwrap();
    let p = head_probabilities(
        &mut tape,
        HeadKind::Matching,
        &EpisodeFeatures {
            support,
            support_labels: &[0, 1],
            query,
            ways: 2,
        },
    )
    .unwrap();
    let l_c = episode_loss(&mut tape, p, &[0, 0, 1, 1]).unwrap();
    // the raw gradient exists ...
    let raw = tape.backward(l_c).unwrap();
    assert!(av.iter().any(|v| raw.wrt(*v).data().iter().any(|x| *x != 0.0)));
    // ... but routing never hands it to θ_a
    let routed = route_gradients(
        &tape,
        EpisodeLosses {
            l_c: Some(l_c),
            l_adv: None,
        },
        GroupVars {
            encoder: &ev,
            afa: &av,
            discriminator: &[],
            classifier: &[],
        },
        0.7,
        false,
    )
    .unwrap();
    assert!(!routed.afa_active);
    assert!(routed.afa.iter().all(|t| t.data().iter().all(|x| *x == 0.0)));
    assert!(routed.encoder.iter().any(|t| t.data().iter().any(|x| *x != 0.0)));
}

#[test]
fn evaluation_embedding_ignores_perturbation_values() {
    let mut rng = Rng::new(21);
    let enc = Encoder::init(&small(), &mut rng).unwrap();
    let x = batch(&mut rng, 5);
    let embed = |p: &Perturbation| {
        let mut tape = Tape::new();
        let ev = enc.bind(&mut tape);
        let av = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = forward_dual(&mut tape, &enc, &ev, Some((p, &av)), xv, ForwardOptions::eval()).unwrap();
        assert!(out.features.augmented.is_none());
        tape.value(out.features.original).clone()
    };
    let a = embed(&Perturbation::identity(&small().channels).unwrap());
    let b = embed(&Perturbation::Affine(init_afa(&small().channels, &mut rng).unwrap()));
    assert_eq!(a, b);
    let mut tape = Tape::new();
    let ev = enc.bind(&mut tape);
    let xv = tape.constant(x);
    let (plain, _) = encode(&mut tape, &enc, &ev, xv, NormMode::Eval).unwrap();
    assert_eq!(tape.value(plain), &a);
}

#[test]
fn perturbation_checkpoint_names_are_stable() {
    let afa = Perturbation::Affine(vec![AfaLayer::identity(2).unwrap(), AfaLayer::identity(3).unwrap()]);
    let names: Vec<String> = afa.named().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["afa.site0.gamma", "afa.site0.beta", "afa.site1.gamma", "afa.site1.beta"]
    );
    assert_eq!(afa.census(), 10);
}
