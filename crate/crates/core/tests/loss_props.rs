use angioseg_core::loss::{self, DiceMode};
use angioseg_core::{ArchConfig, ArchKind, GradTape, LossConfig, Mode, Network, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn maps(seed: u64, n: usize, len: usize) -> (Vec<Tensor>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds = (0..n)
        .map(|_| Tensor::from_fn(&[1, 1, 1, len], |_| rng.random_range(0.01..0.99f32)))
        .collect();
    let y = Tensor::from_fn(&[1, 1, 1, len], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    (preds, y)
}

fn complement(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 - v)
}

fn small_net(n: usize) -> Network {
    let mut c = ArchConfig::new(ArchKind::Unet3p, n, 16);
    c.base_channels = 2;
    Network::build(&c, 5).unwrap()
}

#[test]
fn bce_is_complementation_symmetric_but_dice_is_not() {
    let (p, y) = maps(1, 1, 64);
    let a = loss::bce(&p[0], &y, 1e-7).unwrap();
    let b = loss::bce(&complement(&p[0]), &complement(&y), 1e-7).unwrap();
    assert!((a - b).abs() < 1e-6);
    let d = loss::soft_dice(&p[0], &y).unwrap();
    let dc = loss::soft_dice(&complement(&p[0]), &complement(&y)).unwrap();
    assert!((d - dc).abs() > 1e-3, "{d} vs {dc}");
}

#[test]
fn l2_of_three_four_is_twenty_five() {
    let mut tape = GradTape::<f64>::new();
    let w = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), true);
    let l = tape.sum_squares(&[w], 1.0).unwrap();
    assert_eq!(tape.value(l).item(), Some(25.0));
}

#[test]
fn l2_penalty_matches_direct_summation() {
    let net = small_net(3);
    let mut direct = 0.0f64;
    for p in net.params() {
        if p.name.ends_with(".weight") && !p.name.contains(".bn.") {
            direct += p.value.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        }
    }
    let got = loss::l2_penalty(&net, 1e-4);
    assert!((got - 1e-4 * direct).abs() < 1e-5 * got.max(1.0));
    assert_eq!(loss::l2_penalty(&net, 0.0), 0.0);
}

#[test]
fn single_branch_total_is_the_branch_loss() {
    let net = small_net(3);
    let (p, y) = maps(2, 1, 32);
    let cfg = LossConfig::default();
    let h = loss::hybrid_loss(&p[0], &[], &y, &net, &cfg).unwrap();
    assert_eq!(h.total, loss::branch_loss(&p[0], &y, Some(&net), &cfg).unwrap());
    assert_eq!(h.per_branch.len(), 1);
}

#[test]
fn identical_branches_average_to_one_branch() {
    let net = small_net(3);
    let (p, y) = maps(3, 1, 32);
    let cfg = LossConfig {
        l2_coefficient: 0.0,
        ..LossConfig::default()
    };
    let sides = vec![p[0].clone(); 4];
    let h = loss::hybrid_loss(&p[0], &sides, &y, &net, &cfg).unwrap();
    let one = loss::branch_loss(&p[0], &y, None, &cfg).unwrap();
    assert!((h.total - one).abs() < 1e-6);
}

#[test]
fn five_scale_total_is_mean_over_five_branches() {
    let net = small_net(5);
    let (p, y) = maps(4, 5, 32);
    let h = loss::hybrid_loss(&p[0], &p[1..], &y, &net, &LossConfig::default()).unwrap();
    assert_eq!(h.per_branch.len(), 5);
    let mean = h.per_branch.iter().sum::<f64>() / 5.0;
    assert!((h.total - mean).abs() < 1e-12);
    assert!((h.total - h.recombined()).abs() < 1e-6);
}

#[test]
fn tape_breakdown_matches_plain_evaluation() {
    let mut cfg = ArchConfig::new(ArchKind::Unet3p, 3, 16);
    cfg.base_channels = 2;
    let net = Network::build(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0f32));
    let y = Tensor::from_fn(&[2, 1, 16, 16], |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 });
    let lc = LossConfig::default();
    let mut tape = GradTape::new();
    let xv = tape.leaf(x, false);
    let out = net.forward_on_tape(&mut tape, xv, Mode::Train, true).unwrap();
    let (total, parts) = loss::hybrid_loss_on_tape(&mut tape, &out, &y, &net, &lc).unwrap();
    let sides: Vec<Tensor> = out.side_maps.iter().map(|&v| tape.value(v).clone()).collect();
    let plain = loss::hybrid_loss(tape.value(out.final_map), &sides, &y, &net, &lc).unwrap();
    let taped = tape.value(total).item().unwrap() as f64;
    assert!((taped - plain.total).abs() < 1e-4 * plain.total, "{taped} vs {}", plain.total);
    assert!((parts.recombined() - parts.total).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moving_toward_target_never_raises_bce(seed in any::<u64>(), step in 0.0f32..1.0) {
        let (p, y) = maps(seed, 1, 24);
        let closer = Tensor::from_fn(&[1, 1, 1, 24], |i| {
            let (pv, yv) = (p[0].data()[i], y.data()[i]);
            pv + step * (yv - pv)
        });
        prop_assert!(loss::bce(&closer, &y, 1e-7).unwrap() <= loss::bce(&p[0], &y, 1e-7).unwrap() + 1e-12);
    }

    #[test]
    fn side_order_does_not_matter(seed in any::<u64>(), rot in 1usize..4) {
        let net = small_net(4);
        let (p, y) = maps(seed, 4, 16);
        let cfg = LossConfig::default();
        let a = loss::hybrid_loss(&p[0], &p[1..], &y, &net, &cfg).unwrap();
        let mut sides = p[1..].to_vec();
        sides.rotate_left(rot % 3);
        let b = loss::hybrid_loss(&p[0], &sides, &y, &net, &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn total_is_nonnegative(seed in any::<u64>(), linear in any::<bool>(), lambda in 0.0f64..1e-2) {
        let net = small_net(3);
        let (p, y) = maps(seed, 3, 16);
        let cfg = LossConfig {
            l2_coefficient: lambda,
            dice_mode: if linear { DiceMode::Linear } else { DiceMode::Log },
            ..LossConfig::default()
        };
        let h = loss::hybrid_loss(&p[0], &p[1..], &y, &net, &cfg).unwrap();
        prop_assert!(h.total >= 0.0);
        prop_assert!((h.total - h.recombined()).abs() < 1e-6);
    }
}
