//! Pseudo-label and average-precision oracles over random instances.

use super::{ap_oracle, pseudo_oracle, rng};
use hetseg::evaluation::average_precision;
use hetseg::pseudo::pseudo_label;
use hetseg::Tensor3;
use rand::Rng;

const THRESHOLDS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// Random `[K, H, W]` distributions; with `levels` the mass is split in
/// multiples of `1 / levels` so ties and threshold hits occur.
pub fn soft_prediction(
    r: &mut impl Rng,
    k: usize,
    h: usize,
    w: usize,
    levels: Option<u32>,
) -> Tensor3 {
    let hw = h * w;
    let mut data = vec![0f32; k * hw];
    for px in 0..hw {
        let raw: Vec<f64> = match levels {
            Some(n) => {
                let mut counts = vec![0u32; k];
                for _ in 0..n {
                    counts[r.random_range(0..k)] += 1;
                }
                counts.iter().map(|&c| f64::from(c)).collect()
            }
            None => (0..k).map(|_| r.random_range(-4.0..4.0f64).exp()).collect(),
        };
        let total: f64 = raw.iter().sum();
        for c in 0..k {
            data[c * hw + px] = (raw[c] / total) as f32;
        }
    }
    Tensor3::from_vec([k, h, w], data).unwrap()
}

pub fn pseudo_labels_match_per_pixel_oracle() {
    let mut r = rng(31);
    for instance in 0..100 {
        let k = 2 + instance % 3;
        let levels = [None, Some(10), Some(20)][instance % 3];
        let p = soft_prediction(&mut r, k, 100, 100 + instance % 7, levels);
        let mut last = f64::INFINITY;
        for t in THRESHOLDS {
            let got = pseudo_label(&p, t).unwrap();
            let (mask, coverage) = pseudo_oracle(p.data(), k, t);
            assert_eq!(
                got.mask.data(),
                &mask[..],
                "instance {instance} threshold {t}"
            );
            assert_eq!(got.coverage, coverage);
            assert!(coverage <= last);
            last = coverage;
        }
    }
}

pub fn ap_matches_rank_walk() {
    let mut r = rng(41);
    for instance in 0..1000 {
        let n = r.random_range(1..=100);
        let scores: Vec<f32> = match instance % 4 {
            0 => vec![0.5; n],
            1 => (0..n).map(|_| r.random_range(0..5) as f32 / 4.0).collect(),
            _ => (0..n).map(|_| r.random::<f32>()).collect(),
        };
        let truth: Vec<bool> = match instance % 5 {
            0 => vec![true; n],
            _ => (0..n).map(|_| r.random_bool(0.3)).collect(),
        };
        let got = average_precision(&scores, &truth).unwrap();
        match (got, ap_oracle(&scores, &truth)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "instance {instance}"),
            (a, b) => assert_eq!(a, b, "instance {instance}"),
        }
    }
    assert_eq!(average_precision(&[0.3; 4], &[true; 4]).unwrap(), Some(1.0));
    assert_eq!(
        average_precision(&[0.3; 4], &[true, false, false, false]).unwrap(),
        Some(0.25)
    );
}
