//! Worked loss values.

use super::{rng, scalar, uniform};
use hetseg::nn::{device, Tensor, Var};
use hetseg::objectives::{
    dice_seg_loss, entropy_loss, gan_loss_d, gan_loss_g, gan_objective, recon_l1,
    segmentation_total, semantic_cycle_loss, translation_total, DiceOptions, EntropyReduction,
    GeneratorLoss, LossWeights, TranslationTerms,
};

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &device()).unwrap()
}

fn full(v: f64, shape: &[usize]) -> Tensor {
    Tensor::full(v, shape, &device()).unwrap()
}

fn dice_both(p: &Tensor, y: &Tensor) -> [f64; 2] {
    [
        scalar(&semantic_cycle_loss(p, y).unwrap()),
        scalar(&dice_seg_loss(p, y, DiceOptions::default()).unwrap()),
    ]
}

pub fn terms(v: [f64; 11]) -> TranslationTerms {
    let s = |x: f64| full(x, &[]);
    TranslationTerms {
        gan_source: s(v[0]),
        gan_target: s(v[1]),
        recon_source: s(v[2]),
        recon_target: s(v[3]),
        content_source: s(v[4]),
        content_target: s(v[5]),
        style_source: s(v[6]),
        style_target: s(v[7]),
        cycle_source: s(v[8]),
        cycle_target: s(v[9]),
        semantic: s(v[10]),
    }
}

pub fn gan_examples() {
    let half = full(0.5, &[1, 1, 4, 4]);
    let v = scalar(&gan_objective(&half, &half).unwrap());
    assert!((v - (-2.0 * 2f64.ln())).abs() < 1e-6);
    assert!((scalar(&gan_loss_d(&half, &half).unwrap()) - 2.0 * 2f64.ln()).abs() < 1e-6);
    let g = scalar(&gan_loss_g(&half, GeneratorLoss::Saturating).unwrap());
    assert!((g - 0.5f64.ln()).abs() < 1e-6);

    let eps = 1e-9;
    let v =
        scalar(&gan_objective(&full(1.0 - eps, &[2, 1, 2, 2]), &full(eps, &[2, 1, 2, 2])).unwrap());
    assert!(v < 0.0 && v > -1e-6);

    assert!(gan_objective(&full(1.0, &[1]), &half).is_err());
    assert!(gan_loss_g(&full(0.0, &[1]), GeneratorLoss::Saturating).is_err());
}

pub fn l1_examples() {
    let a = t(&[0.1, -2.0, 3.5, 0.0], &[2, 2]);
    assert_eq!(scalar(&recon_l1(&a, &a).unwrap()), 0.0);
    let b = (&a + 0.5).unwrap();
    assert!((scalar(&recon_l1(&a, &b).unwrap()) - 0.5).abs() < 1e-6);

    let mut r = rng(3);
    let a = uniform(&mut r, &[3, 4, 5], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4, 5], -2.0, 2.0);
    let (va, vb) = (
        a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        b.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
    );
    let mut sum = 0.0;
    for i in 0..va.len() {
        sum += (va[i] - vb[i]).abs();
    }
    assert!((scalar(&recon_l1(&a, &b).unwrap()) - sum / va.len() as f64).abs() < 1e-6);
    assert!(recon_l1(&a, &full(0.0, &[3, 4])).is_err());
}

pub fn dice_examples() {
    // class-major [2, 2, 2]: lesion at pixels 0 and 1
    let y = t(&[0., 0., 1., 1., 1., 1., 0., 0.], &[2, 2, 2]);
    for v in dice_both(&y, &y) {
        assert!((v + 1.0).abs() < 1e-4);
    }
    let empty = t(&[1., 1., 1., 1., 0., 0., 0., 0.], &[2, 2, 2]);
    for v in dice_both(&empty, &y) {
        assert!(v.abs() < 1e-4);
    }
    let one = t(&[0., 1., 1., 1., 1., 0., 0., 0.], &[2, 2, 2]);
    for v in dice_both(&one, &y) {
        assert!((v + 2.0 / 3.0).abs() < 1e-4);
    }
    for v in dice_both(&empty, &empty) {
        assert!((v + 1.0).abs() < 1e-4);
    }
}

pub fn entropy_examples() {
    let uniform2 = full(0.5, &[2, 3, 4]);
    let v = scalar(&entropy_loss(&uniform2, EntropyReduction::Sum).unwrap());
    assert!((v - 12.0).abs() < 1e-6);
    let hot = t(&[1., 0., 0., 1., 0., 1., 1., 0.], &[2, 2, 2]);
    assert!(scalar(&entropy_loss(&hot, EntropyReduction::Mean).unwrap()).abs() < 1e-6);
    let p = t(&[0.75, 0.25], &[2, 1, 1]);
    let expected = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
    assert!((expected - 0.8113).abs() < 1e-4);
    let v = scalar(&entropy_loss(&p, EntropyReduction::Mean).unwrap());
    assert!((v - expected).abs() < 1e-6);
}

pub fn composite_examples() {
    let unit = terms([1.0; 11]);
    assert_eq!(
        scalar(&translation_total(&unit, &LossWeights::zero()).unwrap()),
        0.0
    );
    let w = LossWeights::default();
    let paired = 2.0 * (w.gan + w.image + w.content + w.style + w.cycle);
    let v = scalar(&translation_total(&unit, &w).unwrap());
    assert!((v - (paired + w.semantic)).abs() < 1e-6);
    assert!((v - 56.0).abs() < 1e-6);
    let neg = LossWeights {
        style: -1.0,
        ..LossWeights::default()
    };
    assert!(translation_total(&unit, &neg).is_err());

    let grad_wrt_semantic = |w: LossWeights| {
        let sem = Var::new(1.0f64, &device()).unwrap();
        let mut tt = terms([1.0; 11]);
        tt.semantic = sem.as_tensor().clone();
        let g = translation_total(&tt, &w).unwrap().backward().unwrap();
        scalar(g.get(sem.as_tensor()).unwrap())
    };
    let w = LossWeights::default();
    let doubled = LossWeights {
        semantic: 2.0 * w.semantic,
        ..w
    };
    assert!((grad_wrt_semantic(doubled) - 2.0 * grad_wrt_semantic(w)).abs() < 1e-9);

    for (seg, ent, want) in [(-1.0, 0.0, -1.0), (0.0, 1.0, 1.0), (-0.5, 0.3, -0.2)] {
        let v = scalar(&segmentation_total(&full(seg, &[]), Some(&full(ent, &[]))).unwrap());
        assert!((v - want).abs() < 1e-12);
    }
    assert_eq!(
        scalar(&segmentation_total(&full(-0.4, &[]), None).unwrap()),
        -0.4
    );
}
