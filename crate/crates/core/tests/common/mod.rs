#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toast_core::backbone::{BackboneConfig, BackboneParams};
use toast_core::params::{Binder, Parameters};
use toast_core::tensor::{finite_diff_check, GradCheckReport};
use toast_core::topdown::{FeedbackVariant, TopDownParams, VariantKind};
use toast_core::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d=8, two layers, 2×2 patch grid plus cls: N=5, 3 classes.
pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        image_side: 4,
        patch_side: 2,
        channels: 1,
        dim: 8,
        layers: 2,
        heads: 2,
        n_classes: 3,
        use_cls_token: true,
        mlp_ratio: 4,
    }
}

pub fn backbone(cfg: &BackboneConfig, seed: u64) -> BackboneParams<f64> {
    BackboneParams::init(cfg, &mut rng(seed)).unwrap()
}

/// Top-down module with every injection transform randomized, so that the
/// feedback actually reaches the second pass.
pub fn active_topdown(cfg: &BackboneConfig, kind: VariantKind, seed: u64) -> TopDownParams<f64> {
    let mut r = rng(seed);
    let variant = FeedbackVariant::new(kind, cfg.layers).unwrap();
    let mut td = TopDownParams::init(cfg, variant, &mut r).unwrap();
    let std = (1.0 / cfg.dim as f64).sqrt();
    for l in &mut td.feedback.layers {
        l.g.weight = Tensor::randn(&[cfg.dim, cfg.dim], std, &mut r);
        l.f.bias = Some(Tensor::randn(&[cfg.dim], 0.1, &mut r));
    }
    let eye = td.select.proj.clone();
    td.select.proj = eye
        .add(&Tensor::randn(&[cfg.dim, cfg.dim], 0.1, &mut r))
        .unwrap();
    td
}

pub fn image(cfg: &BackboneConfig, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::randn(&[cfg.channels, cfg.image_side, cfg.image_side], 1.0, &mut r)
}

pub fn named<P: Parameters<f64>>(p: &P, prefix: &str) -> Vec<(String, Tensor<f64>)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |n, t| out.push((n, t.clone())));
    out
}

/// Finite-difference check of `f` over the named tensors; the closure gets a
/// binder preset with leaves for exactly those names.
pub fn named_grad_check<F>(params: &[(String, Tensor<f64>)], f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Binder<'t, f64>) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check(
        |tape: &Tape<f64>, vars: &[Var<'_, f64>]| {
            let mut b = Binder::with_preset(tape, names.iter().cloned().zip(vars.iter().copied()));
            f(&mut b)
        },
        &tensors,
        1e-5,
    )
}
