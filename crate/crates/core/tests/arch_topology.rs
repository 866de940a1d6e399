use std::path::PathBuf;

use angioseg_core::arch::Layer;
use angioseg_core::train::Checkpoint;
use angioseg_core::{ArchConfig, ArchKind, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unet3p(n: usize) -> Network {
    Network::build(&ArchConfig::new(ArchKind::Unet3p, n, 64), 7).unwrap()
}

fn batch(b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 1, 64, 64], |_| rng.random_range(0.0..1.0))
}

#[test]
fn encoder_halves_size_and_doubles_width() {
    for n in [4, 5] {
        let net = unet3p(n);
        for i in 1..=n {
            let en = net.feature(&format!("en{i}")).unwrap();
            assert_eq!(en.size, 64 >> (i - 1), "N={n} en{i}");
            assert_eq!(en.channels, 8 << (i - 1));
        }
    }
    assert_eq!(unet3p(5).feature("en5").unwrap().size, 4);
}

#[test]
fn every_decoder_concat_takes_n_branches_of_c_channels() {
    for n in [4, 5] {
        let net = unet3p(n);
        let c = net.config().path_channels();
        for i in 1..n {
            let cat = net.node_named(&format!("de{i}.cat")).unwrap();
            let Layer::Concat { inputs } = &cat.layer else {
                panic!("de{i}.cat is not a concat");
            };
            assert_eq!(inputs.len(), n, "N={n} de{i}");
            for &k in inputs {
                assert_eq!(net.plan()[k].channels, c);
                assert_eq!(net.plan()[k].size, 64 >> (i - 1));
            }
            assert_eq!(cat.channels, n * c);
            assert_eq!(net.feature(&format!("de{i}")).unwrap().channels, n * c);
        }
    }
}

#[test]
fn decoder_branch_strides_follow_the_scale_gap() {
    let net = unet3p(5);
    let pool = |name: &str| match net.node_named(name).map(|p| &p.layer) {
        Some(Layer::MaxPool { window, .. }) => *window,
        other => panic!("{name}: {other:?}"),
    };
    let up = |name: &str| match net.node_named(name).map(|p| &p.layer) {
        Some(Layer::Upsample { factor, .. }) => *factor,
        other => panic!("{name}: {other:?}"),
    };
    assert_eq!(pool("de3.from_en1.pool"), 4);
    assert_eq!(pool("de3.from_en2.pool"), 2);
    assert_eq!(up("de3.from_de4.up"), 2);
    assert_eq!(up("de3.from_de5.up"), 4);
    assert_eq!(up("de1.from_de5.up"), 16);
}

#[test]
fn side_heads_follow_the_upsampling_schedule() {
    let net = unet3p(5);
    let heads = net.side_heads();
    let pre: Vec<usize> = heads.iter().map(|h| net.plan()[h.pre_upsample].size).collect();
    let factors: Vec<usize> = heads.iter().map(|h| h.factor).collect();
    assert_eq!(pre, vec![32, 16, 8, 4]);
    assert_eq!(factors, vec![2, 4, 8, 16]);
    assert!(heads.iter().all(|h| net.plan()[h.output].size == 64));

    let out = net.forward(&batch(1, 1)).unwrap();
    assert_eq!(out.side_outputs.len(), 4);
    for m in out.side_outputs.iter().chain([&out.final_map]) {
        assert_eq!(m.shape(), &[1, 1, 64, 64]);
        assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn every_kind_outputs_input_resolution() {
    for kind in [ArchKind::Unet, ArchKind::Unetpp, ArchKind::Unet3p] {
        for n in [4, 5] {
            let mut cfg = ArchConfig::new(kind, n, 64);
            cfg.deep_supervision = false;
            let out = Network::build(&cfg, 3).unwrap().forward(&batch(2, 2)).unwrap();
            assert_eq!(out.final_map.shape(), &[2, 1, 64, 64]);
            assert!(out.side_outputs.is_empty());
        }
    }
}

#[test]
fn zero_input_gives_finite_output() {
    let out = unet3p(4).forward(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    assert!(out.final_map.all_finite());
    assert!(out.side_outputs.iter().all(Tensor::all_finite));
}

#[test]
fn eval_forward_is_batch_independent_and_repeatable() {
    let net = unet3p(4);
    let x = batch(2, 3);
    let both = net.forward(&x).unwrap();
    let again = net.forward(&x).unwrap();
    assert_eq!(both, again);
    for b in 0..2 {
        let one = net.forward(&x.batch_slice(b, b + 1).unwrap()).unwrap();
        let part = both.final_map.batch_slice(b, b + 1).unwrap();
        for (p, q) in part.data().iter().zip(one.final_map.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn unet_and_unetpp_forward_agree_at_two_scales() {
    let a = Network::build(&ArchConfig::new(ArchKind::Unet, 2, 32), 11).unwrap();
    let b = Network::build(&ArchConfig::new(ArchKind::Unetpp, 2, 32), 11).unwrap();
    let names = |n: &Network| -> Vec<(String, Vec<usize>)> {
        n.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    assert_eq!(names(&a).len(), names(&b).len());
    let x = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 37) % 101) as f32 / 100.0);
    let (ya, yb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
    assert_eq!(ya.final_map, yb.final_map);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/unet3p_n4_64.vnck")
}

/// Set `ANGIOSEG_BLESS_GOLDEN=1` to rewrite the frozen file.
#[test]
fn unet3p_matches_golden_forward() {
    let net = unet3p(4);
    let x = batch(1, 2024);
    let out = net.forward(&x).unwrap();
    let mut tensors = vec![("final".to_string(), out.final_map.clone())];
    for (i, s) in out.side_outputs.iter().enumerate() {
        tensors.push((format!("side{}", i + 2), s.clone()));
    }
    if std::env::var_os("ANGIOSEG_BLESS_GOLDEN").is_some() {
        Checkpoint { version: 1, tensors }.save(&golden_path()).unwrap();
        return;
    }
    let golden = Checkpoint::load(&golden_path()).unwrap();
    assert_eq!(golden.tensors.len(), tensors.len());
    for (name, t) in &tensors {
        let g = golden.get(name).unwrap();
        assert_eq!(g.shape(), t.shape());
        let worst = g
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-5, "{name}: {worst}");
    }
}
