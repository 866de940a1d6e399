use angioseg_core::loss;
use angioseg_core::metrics::{asd, confusion, hausdorff, image_metrics, surface};
use angioseg_core::{BinaryMask, Spacing, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn random_mask(rng: &mut ChaCha8Rng, spacing: Spacing) -> BinaryMask {
    let density = rng.random_range(0.02..0.6);
    let mut data: Vec<u8> = (0..SIDE * SIDE).map(|_| rng.random_bool(density) as u8).collect();
    if data.iter().all(|&v| v == 0) {
        data[3 * SIDE + 5] = 1;
    }
    BinaryMask::new(SIDE, SIDE, data, spacing).unwrap()
}

fn oracle_surface(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let on = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if on(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !on(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn dist(a: (usize, usize), b: (usize, usize), s: Spacing) -> f64 {
    let dr = (a.0 as f64 - b.0 as f64) * s.row_mm;
    let dc = (a.1 as f64 - b.1 as f64) * s.col_mm;
    (dr * dr + dc * dc).sqrt()
}

fn min_dist(a: (usize, usize), set: &[(usize, usize)], s: Spacing) -> f64 {
    set.iter().map(|&b| dist(a, b, s)).fold(f64::INFINITY, f64::min)
}

fn oracle_hd(a: &[(usize, usize)], b: &[(usize, usize)], s: Spacing) -> f64 {
    let d = |x: &[(usize, usize)], y: &[(usize, usize)]| x.iter().map(|&p| min_dist(p, y, s)).fold(0.0, f64::max);
    d(a, b).max(d(b, a))
}

fn oracle_asd(a: &[(usize, usize)], b: &[(usize, usize)], s: Spacing) -> f64 {
    let sum = |x: &[(usize, usize)], y: &[(usize, usize)]| x.iter().map(|&p| min_dist(p, y, s)).sum::<f64>();
    (sum(a, b) + sum(b, a)) / (a.len() + b.len()) as f64
}

fn counts(p: &BinaryMask, g: &BinaryMask) -> [usize; 4] {
    let mut k = [0; 4];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let i = (p.get(r, c) as usize) * 2 + g.get(r, c) as usize;
            k[i] += 1;
        }
    }
    // [tn, fn, fp, tp]
    k
}

#[test]
fn two_hundred_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let s = Spacing {
            row_mm: rng.random_range(0.2..0.4),
            col_mm: rng.random_range(0.2..0.4),
        };
        let (p, g) = (random_mask(&mut rng, s), random_mask(&mut rng, s));
        let [tn, fn_, fp, tp] = counts(&p, &g);
        let c = confusion(&p, &g).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
        assert_eq!(c.dsc(), 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        assert_eq!(c.sensitivity(), tp as f64 / (tp + fn_) as f64);
        assert_eq!(c.specificity(), tn as f64 / (tn + fp) as f64);

        let (sp, sg) = (oracle_surface(&p), oracle_surface(&g));
        assert_eq!(surface(&p), sp);
        let hd = hausdorff(&p, &g).unwrap();
        let want = oracle_hd(&p.foreground(), &g.foreground(), s);
        assert!((hd - want).abs() < 1e-9, "pair {i}: {hd} vs {want}");
        let a = asd(&p, &g).unwrap();
        assert!((a - oracle_asd(&sp, &sg, s)).abs() < 1e-9);
        assert_eq!(hd, hausdorff(&g, &p).unwrap());
        assert_eq!(a, asd(&g, &p).unwrap());
        assert!(a <= hd, "pair {i}: asd {a} > hd {hd}");
    }
}

#[test]
fn identical_masks_have_zero_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random_mask(&mut rng, Spacing::default());
    let r = image_metrics("x", &m, &m).unwrap();
    assert_eq!((r.dsc, r.sn, r.sp), (1.0, 1.0, 1.0));
    assert_eq!((r.hd_mm, r.asd_mm), (Some(0.0), Some(0.0)));
}

/// `asd <= hd` is not a theorem: a perforated mask has surface pixels deep
/// inside the other mask, far from its surface but next to its foreground.
#[test]
fn perforated_mask_breaks_asd_below_hd() {
    let s = Spacing::isotropic(1.0);
    let full = BinaryMask::from_fn(SIDE, SIDE, s, |_, _| true);
    let holes = BinaryMask::from_fn(SIDE, SIDE, s, |r, c| {
        !((3..SIDE - 3).contains(&r) && (3..SIDE - 3).contains(&c) && (r + c) % 2 == 0)
    });
    assert_eq!(hausdorff(&full, &holes).unwrap(), 1.0);
    assert!(asd(&full, &holes).unwrap() > 1.0);
}

fn as_tensor(m: &BinaryMask) -> Tensor<f64> {
    Tensor::new(&[m.data().len()], m.data().iter().map(|&v| v as f64).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_dsc_equals_soft_dice(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (random_mask(&mut rng, Spacing::default()), random_mask(&mut rng, Spacing::default()));
        let soft = loss::soft_dice(&as_tensor(&p), &as_tensor(&g)).unwrap();
        prop_assert_eq!(confusion(&p, &g).unwrap().dsc(), soft);
    }

    #[test]
    fn spacing_scales_distances_only(seed in any::<u64>(), k in -3i32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Spacing { row_mm: 0.3, col_mm: 0.25 };
        let (p, g) = (random_mask(&mut rng, s), random_mask(&mut rng, s));
        let t = 2f64.powi(k);
        let (p2, g2) = (p.clone().with_spacing(s.scaled(t)), g.clone().with_spacing(s.scaled(t)));
        prop_assert_eq!(hausdorff(&p2, &g2).unwrap(), t * hausdorff(&p, &g).unwrap());
        prop_assert_eq!(asd(&p2, &g2).unwrap(), t * asd(&p, &g).unwrap());
        let u = 1.37;
        let (p3, g3) = (p.clone().with_spacing(s.scaled(u)), g.clone().with_spacing(s.scaled(u)));
        let hd = hausdorff(&p, &g).unwrap();
        prop_assert!((hausdorff(&p3, &g3).unwrap() - u * hd).abs() <= 1e-12 * hd.max(1.0));
        prop_assert_eq!(confusion(&p3, &g3).unwrap(), confusion(&p, &g).unwrap());
    }

    #[test]
    fn distances_are_symmetric_and_zero_only_on_equal_sets(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (random_mask(&mut rng, Spacing::default()), random_mask(&mut rng, Spacing::default()));
        let hd = hausdorff(&p, &g).unwrap();
        prop_assert_eq!(hd, hausdorff(&g, &p).unwrap());
        prop_assert_eq!(hd == 0.0, p == g);
        prop_assert!(asd(&p, &g).unwrap() <= hd);
    }
}
