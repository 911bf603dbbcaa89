mod common;

use common::losses::{self, terms};
use common::{one_hot, rng, scalar, simplex};
use hetseg::nn::{device, Tensor};
use hetseg::objectives::{
    dice_seg_loss, entropy_loss, recon_l1, semantic_cycle_loss, translation_total, DiceOptions,
    EntropyReduction, LossWeights,
};
use proptest::prelude::*;

#[test]
fn gan_examples() {
    losses::gan_examples();
}

#[test]
fn l1_examples() {
    losses::l1_examples();
}

#[test]
fn dice_examples() {
    losses::dice_examples();
}

#[test]
fn entropy_examples() {
    losses::entropy_examples();
}

#[test]
fn composite_examples() {
    losses::composite_examples();
}

fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let (b, k, h, w) = x.dims4().unwrap();
    let idx = Tensor::from_vec(
        perm.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        perm.len(),
        &device(),
    )
    .unwrap();
    x.reshape((b, k, h * w))
        .unwrap()
        .index_select(&idx, 2)
        .unwrap()
        .reshape((b, k, h, w))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranges_and_shared_dice(seed in any::<u64>(), k in 2usize..4, side in 1usize..6) {
        let mut r = rng(seed);
        let shape = [2, k, side, side];
        let p = simplex(&mut r, shape);
        let y = one_hot(&mut r, shape);
        let a = semantic_cycle_loss(&p, &y).unwrap();
        let b = dice_seg_loss(&p, &y, DiceOptions::default()).unwrap();
        let (a, b) = (scalar(&a), scalar(&b));
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!((-1.0..=0.0).contains(&a));
        let e = scalar(&entropy_loss(&p, EntropyReduction::Mean).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        let q = simplex(&mut r, shape);
        prop_assert!(scalar(&recon_l1(&p, &q).unwrap()) >= 0.0);
    }

    #[test]
    fn translation_total_is_linear_in_each_weight(
        vals in prop::array::uniform11(-3.0f64..3.0),
        which in 0usize..6,
        w1 in 0.0f64..5.0,
        w2 in 0.0f64..5.0,
    ) {
        let tt = terms(vals);
        let set = |v: f64| {
            let mut w = LossWeights::default();
            *[&mut w.gan, &mut w.image, &mut w.content, &mut w.style, &mut w.cycle, &mut w.semantic][which] = v;
            scalar(&translation_total(&tt, &w).unwrap())
        };
        let (f0, f1, f2, f12) = (set(0.0), set(w1), set(w2), set(w1 + w2));
        prop_assert!((f12 - f1 - f2 + f0).abs() < 1e-9);
    }

    #[test]
    fn dice_and_entropy_ignore_pixel_order(seed in any::<u64>(), side in 2usize..6) {
        let mut r = rng(seed);
        let shape = [1, 2, side, side];
        let p = simplex(&mut r, shape);
        let y = one_hot(&mut r, shape);
        let mut perm: Vec<usize> = (0..side * side).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let (pp, yp) = (permute(&p, &perm), permute(&y, &perm));
        let d0 = scalar(&semantic_cycle_loss(&p, &y).unwrap());
        let d1 = scalar(&semantic_cycle_loss(&pp, &yp).unwrap());
        prop_assert!((d0 - d1).abs() < 1e-12);
        for red in [EntropyReduction::Mean, EntropyReduction::Sum] {
            let e0 = scalar(&entropy_loss(&p, red).unwrap());
            let e1 = scalar(&entropy_loss(&pp, red).unwrap());
            prop_assert!((e0 - e1).abs() < 1e-12);
        }
    }
}
