//! Finite-difference checks of every loss and network family.

use super::{
    input_grad_error, one_hot, param_grad, param_grad_error, rng, scalar, simplex, uniform,
    GRAD_TOL,
};
use hetseg::nn::{DType, Tensor, Var};
use hetseg::objectives::{
    dice_seg_loss, entropy_loss, gan_loss_d, gan_loss_d_logits, gan_loss_g, gan_loss_g_logits,
    lsgan_loss_d, recon_l1, semantic_cycle_loss, DiceOptions, EntropyReduction, GeneratorLoss,
};
use hetseg::segmentation::{Segmenter, SegmenterConfig};
use hetseg::translation::Domain;
use hetseg::{DomainSpec, NetConfig, TranslationModel};
use rand::seq::IndexedRandom;
use rand::Rng;

const TRIALS: u64 = 20;
const PROBES: usize = 4;

fn check(name: &str, f: impl Fn(u64) -> f64) {
    for trial in 0..TRIALS {
        let err = f(trial);
        assert!(
            err < GRAD_TOL,
            "{name}: trial {trial} relative error {err:e}"
        );
    }
}

pub fn adversarial_losses() {
    check("gan_loss_d", |s| {
        let mut r = rng(s);
        let real = uniform(&mut r, &[2, 1, 3, 3], 0.05, 0.95);
        let fake = uniform(&mut r, &[2, 1, 3, 3], 0.05, 0.95);
        let a = input_grad_error(&mut r, &real, PROBES, |x| gan_loss_d(x, &fake).unwrap());
        let b = input_grad_error(&mut r, &fake, PROBES, |x| gan_loss_d(&real, x).unwrap());
        a.max(b)
    });
    for form in [GeneratorLoss::Saturating, GeneratorLoss::NonSaturating] {
        check("gan_loss_g", |s| {
            let mut r = rng(100 + s);
            let fake = uniform(&mut r, &[2, 1, 3, 3], 0.05, 0.95);
            let a = input_grad_error(&mut r, &fake, PROBES, |x| gan_loss_g(x, form).unwrap());
            let logits = uniform(&mut r, &[2, 1, 3, 3], -4.0, 4.0);
            let b = input_grad_error(&mut r, &logits, PROBES, |x| {
                gan_loss_g_logits(x, form).unwrap()
            });
            a.max(b)
        });
    }
    check("logit and least-squares forms", |s| {
        let mut r = rng(200 + s);
        let real = uniform(&mut r, &[2, 1, 3, 3], -4.0, 4.0);
        let fake = uniform(&mut r, &[2, 1, 3, 3], -4.0, 4.0);
        let a = input_grad_error(&mut r, &real, PROBES, |x| {
            gan_loss_d_logits(x, &fake).unwrap()
        });
        let b = input_grad_error(&mut r, &fake, PROBES, |x| lsgan_loss_d(&real, x).unwrap());
        a.max(b)
    });
}

pub fn reconstruction_loss() {
    check("recon_l1", |s| {
        let mut r = rng(300 + s);
        let a = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        let b = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        input_grad_error(&mut r, &a, PROBES, |x| recon_l1(x, &b).unwrap())
    });
}

pub fn dice_losses() {
    check("semantic_cycle_loss", |s| {
        let mut r = rng(400 + s);
        let p = simplex(&mut r, [2, 2, 4, 4]);
        let y = one_hot(&mut r, [2, 2, 4, 4]);
        input_grad_error(&mut r, &p, PROBES, |x| semantic_cycle_loss(x, &y).unwrap())
    });
    check("dice_seg_loss on pseudo-masks", |s| {
        let mut r = rng(500 + s);
        let p = simplex(&mut r, [2, 2, 4, 4]);
        let keep = uniform(&mut r, &[2, 1, 4, 4], 0.0, 1.0).ge(0.3).unwrap();
        let y = one_hot(&mut r, [2, 2, 4, 4])
            .broadcast_mul(&keep.to_dtype(DType::F64).unwrap())
            .unwrap();
        let opts = DiceOptions {
            ignore_unlabeled: s % 2 == 1,
            ..DiceOptions::default()
        };
        input_grad_error(&mut r, &p, PROBES, |x| dice_seg_loss(x, &y, opts).unwrap())
    });
}

pub fn entropy_losses() {
    for red in [EntropyReduction::Mean, EntropyReduction::Sum] {
        check("entropy_loss", |s| {
            let mut r = rng(600 + s);
            let p = simplex(&mut r, [2, 3, 4, 4]);
            input_grad_error(&mut r, &p, PROBES, |x| entropy_loss(x, red).unwrap())
        });
    }
}

fn specs() -> (DomainSpec, DomainSpec) {
    (
        DomainSpec::new("source", 3, 16, 16),
        DomainSpec::new("target", 4, 16, 16),
    )
}

/// A random parameter under `prefix` that `f` depends on. Biases feeding an
/// instance norm have an exactly zero gradient; those are checked to stay
/// flat under perturbation and are not drawn.
fn pick_param<'a>(
    r: &mut impl Rng,
    store: &'a hetseg::nn::ParamStore,
    prefix: &str,
    f: impl Fn() -> Tensor,
) -> &'a Var {
    let mut live = Vec::new();
    for name in store.names().filter(|n| n.starts_with(prefix)) {
        let var = store.get(name).unwrap();
        let grad = param_grad(var, &f);
        if grad.iter().any(|g| g.abs() > 1e-12) {
            live.push(var);
            continue;
        }
        let original = var.as_tensor().copy().unwrap();
        let shifted = (&original + 0.1).unwrap();
        let before = scalar(&f());
        var.set(&shifted).unwrap();
        let after = scalar(&f());
        var.set(&original).unwrap();
        assert!(
            (after - before).abs() < 1e-9,
            "{name} has zero gradient but moves the output"
        );
    }
    live.choose(r).copied().expect("no parameters under prefix")
}

fn projected(out: &Tensor, probe: &Tensor) -> Tensor {
    (out * probe).unwrap().sum_all().unwrap()
}

pub fn translation_networks() {
    let (src, tgt) = specs();
    let model = TranslationModel::new(&src, &tgt, NetConfig::desk(), 7, DType::F64).unwrap();
    let cfg = NetConfig::desk();
    let gen = model.generator_params();
    let disc = model.discriminator_params();

    check("content encoder", |s| {
        let mut r = rng(700 + s);
        let d = if s % 2 == 0 {
            Domain::Source
        } else {
            Domain::Target
        };
        let ch = model.spec(d).channels;
        let x = uniform(&mut r, &[2, ch, 16, 16], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, cfg.content_channels, 4, 4], -1.0, 1.0);
        let prefix = if d == Domain::Source {
            "content_source"
        } else {
            "content_target"
        };
        let f = || projected(&model.encode_content(&x, d).unwrap(), &probe);
        let var = pick_param(&mut r, gen, prefix, f);
        param_grad_error(&mut r, var, PROBES, f)
    });
    check("style encoder", |s| {
        let mut r = rng(800 + s);
        let x = uniform(&mut r, &[2, 4, 16, 16], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, cfg.style_dim], -1.0, 1.0);
        let f = || projected(&model.encode_style(&x, Domain::Target).unwrap(), &probe);
        let var = pick_param(&mut r, gen, "style_target", f);
        param_grad_error(&mut r, var, PROBES, f)
    });
    check("decoder", |s| {
        let mut r = rng(900 + s);
        let c = uniform(&mut r, &[2, cfg.content_channels, 4, 4], -1.0, 1.0);
        let st = uniform(&mut r, &[2, cfg.style_dim], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, 3, 16, 16], -1.0, 1.0);
        let f = || projected(&model.decode(&c, &st, Domain::Source).unwrap(), &probe);
        let var = pick_param(&mut r, gen, "decoder_source", f);
        param_grad_error(&mut r, var, PROBES, f)
    });
    check("discriminator", |s| {
        let mut r = rng(1000 + s);
        let x = uniform(&mut r, &[2, 4, 16, 16], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, 1, 2, 2], -1.0, 1.0);
        let f = || {
            projected(
                &model.discriminate_logits(&x, Domain::Target).unwrap(),
                &probe,
            )
        };
        let var = pick_param(&mut r, disc, "disc_target", f);
        param_grad_error(&mut r, var, PROBES, f)
    });
}

pub fn segmenter_network() {
    let seg = Segmenter::new(SegmenterConfig::desk(3), 11, DType::F64).unwrap();
    check("segmenter", |s| {
        let mut r = rng(1100 + s);
        let x = uniform(&mut r, &[2, 3, 16, 16], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, 2, 16, 16], -1.0, 1.0);
        let f = || projected(&seg.predict_soft(&x).unwrap(), &probe);
        let var = pick_param(&mut r, seg.params(), "", f);
        param_grad_error(&mut r, var, PROBES, f)
    });
}

pub fn input_gradients_flow_through_translation() {
    let (src, tgt) = specs();
    let model = TranslationModel::new(&src, &tgt, NetConfig::desk(), 3, DType::F64).unwrap();
    let seg = Segmenter::new(SegmenterConfig::desk(3), 5, DType::F64).unwrap();
    let mut r = rng(1200);
    let style = uniform(&mut r, &[1, NetConfig::desk().style_dim], -1.0, 1.0);
    let x = uniform(&mut r, &[1, 3, 16, 16], -1.0, 1.0);
    let y = one_hot(&mut r, [1, 2, 16, 16]);
    let err = input_grad_error(&mut r, &x, PROBES, |x| {
        let rec = model.cycle(x, &style).unwrap();
        semantic_cycle_loss(&seg.predict_soft(&rec).unwrap(), &y).unwrap()
    });
    assert!(err < GRAD_TOL, "relative error {err:e}");
}
