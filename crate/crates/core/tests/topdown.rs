mod common;

use common::{active_topdown, backbone, image, named, named_grad_check, rng, tiny_config};
use proptest::prelude::*;
use toast_core::backbone::{patchify, BackboneConfig};
use toast_core::params::{Binder, Linear, LowRankDelta, Parameters};
use toast_core::topdown::{
    feature_select, feedback_pass, lite_wrap, toast_forward, variational_loss, FeedbackVariant,
    TopDownParams, VariantKind, VARIATIONAL_WEIGHT,
};
use toast_core::{Tape, Tensor};

const KINDS: [VariantKind; 3] = [VariantKind::Full, VariantKind::Early, VariantKind::Late];

fn select(z: &Tensor<f64>, xi: &Tensor<f64>, proj: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::new();
    let (zt, s) = feature_select(tape.constant(z), tape.constant(xi), tape.constant(proj)).unwrap();
    (zt.value(), s.value())
}

#[test]
fn self_similar_token_passes_unchanged() {
    let mut r = rng(0);
    let z = Tensor::randn(&[4, 6], 1.0, &mut r);
    let xi = Tensor::new(vec![6], z.data()[..6].to_vec()).unwrap();
    let (zt, s) = select(&z, &xi, &Tensor::eye(6));
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    for j in 0..6 {
        assert!((zt.data()[j] - z.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn orthogonal_task_embedding_selects_nothing() {
    let mut r = rng(1);
    let mut z = Tensor::randn(&[5, 4], 1.0, &mut r);
    for row in z.data_mut().chunks_mut(4) {
        row[2] = 0.0;
        row[3] = 0.0;
    }
    let xi = Tensor::from_f64(&[4], &[0.0, 0.0, 0.7, -0.2]).unwrap();
    let (zt, s) = select(&z, &xi, &Tensor::randn(&[4, 4], 1.0, &mut r));
    assert!(s.data().iter().all(|&v| v == 0.0));
    assert!(zt.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_token_has_zero_similarity() {
    let mut r = rng(2);
    let z = Tensor::zeros(&[2, 3]);
    let (_, s) = select(&z, &Tensor::randn(&[3], 1.0, &mut r), &Tensor::eye(3));
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_selection_commutes_with_token_permutation() {
    let mut r = rng(3);
    let z = Tensor::randn(&[5, 4], 1.0, &mut r);
    let xi = Tensor::randn(&[4], 1.0, &mut r);
    let proj = Tensor::randn(&[4, 4], 1.0, &mut r);
    let perm = [3, 0, 4, 1, 2];
    let mut zp = Tensor::zeros(&[5, 4]);
    for (i, &p) in perm.iter().enumerate() {
        zp.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(&z.data()[p * 4..(p + 1) * 4]);
    }
    let (zt, s) = select(&z, &xi, &proj);
    let (ztp, sp) = select(&zp, &xi, &proj);
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(sp.data()[i], s.data()[p]);
        assert_eq!(
            ztp.data()[i * 4..(i + 1) * 4],
            zt.data()[p * 4..(p + 1) * 4]
        );
    }
}

#[test]
fn zero_injection_gives_zero_top_down() {
    let cfg = tiny_config();
    let mut r = rng(4);
    let td = TopDownParams::<f64>::init(&cfg, FeedbackVariant::full(2), &mut r).unwrap();
    let tape = Tape::new();
    let vars = td.bind(&mut Binder::new(&tape), "topdown.").unwrap();
    let z = tape.constant(&Tensor::randn(&[4, 8], 1.0, &mut r));
    let out = feedback_pass(z, &vars, 2).unwrap();
    assert_eq!(out.len(), 2);
    for x in out {
        assert!(x.unwrap().value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identity_chain_copies_selected_tokens() {
    let cfg = tiny_config();
    let mut r = rng(5);
    let mut td = TopDownParams::<f64>::init(&cfg, FeedbackVariant::full(2), &mut r).unwrap();
    for l in &mut td.feedback.layers {
        l.f = Linear::identity(8, true);
        l.g = Linear::identity(8, false);
    }
    let tape = Tape::new();
    let vars = td.bind(&mut Binder::new(&tape), "").unwrap();
    let zt = Tensor::randn(&[4, 8], 1.0, &mut r);
    let out = feedback_pass(tape.constant(&zt), &vars, 2).unwrap();
    assert!(out[1].unwrap().value().bits_eq(&zt));
    assert!(out[0].unwrap().value().bits_eq(&zt));
}

#[test]
fn late_variant_only_feeds_upper_layers() {
    let mut cfg = tiny_config();
    cfg.layers = 4;
    let td = active_topdown(&cfg, VariantKind::Late, 6);
    let tape = Tape::new();
    let vars = td.bind(&mut Binder::new(&tape), "").unwrap();
    let z = tape.constant(&Tensor::randn(&[4, 8], 1.0, &mut rng(7)));
    let out = feedback_pass(z, &vars, 4).unwrap();
    let mid = 2;
    assert!(out[..mid].iter().all(Option::is_none));
    let nonzero = out
        .iter()
        .flatten()
        .filter(|v| v.value().data().iter().any(|&x| x != 0.0))
        .count();
    assert_eq!(nonzero, cfg.layers - mid);
}

#[test]
fn feedback_span_must_fit_backbone() {
    let mut cfg = tiny_config();
    cfg.layers = 4;
    let td = active_topdown(&cfg, VariantKind::Late, 8);
    let tape = Tape::new();
    let vars = td.bind(&mut Binder::new(&tape), "").unwrap();
    let z = tape.constant(&Tensor::zeros(&[4, 8]));
    assert!(feedback_pass(z, &vars, 3).is_err());
}

fn run(
    cfg: &BackboneConfig,
    bb_seed: u64,
    td: &TopDownParams<f64>,
    img_seed: u64,
) -> (Tensor<f64>, Option<Tensor<f64>>, Vec<Tensor<f64>>, usize) {
    let p = backbone(cfg, bb_seed);
    let tape = Tape::new();
    let mut b = Binder::new(&tape);
    let bb = p.bind(&mut b).unwrap();
    let vars = td.bind(&mut b, "topdown.").unwrap();
    let x = bb
        .embed(tape.constant(&patchify(&image(cfg, img_seed), cfg).unwrap()))
        .unwrap();
    let (logits, trace) = toast_forward(x, &bb, &vars).unwrap();
    let maps = (0..cfg.layers)
        .map(|l| trace.pass2_attention(l).unwrap().clone())
        .collect();
    (
        logits.value(),
        trace.pass1_logits.map(|v| v.value()),
        maps,
        trace.blocks_executed(),
    )
}

#[test]
fn zero_injection_reproduces_bottom_up_logits() {
    let mut cfg = tiny_config();
    cfg.layers = 4;
    for kind in KINDS {
        let variant = FeedbackVariant::new(kind, 4).unwrap();
        let td = TopDownParams::init(&cfg, variant, &mut rng(9)).unwrap();
        let (logits, pass1, _, _) = run(&cfg, 10, &td, 11);
        let bottom_up = match pass1 {
            Some(l) => l,
            None => {
                let p = backbone(&cfg, 10);
                let tape = Tape::new();
                let bb = p.bind(&mut Binder::new(&tape)).unwrap();
                let x = bb
                    .embed(tape.constant(&patchify(&image(&cfg, 11), &cfg).unwrap()))
                    .unwrap();
                bb.forward_feedforward(x, None).unwrap().0.value()
            }
        };
        assert!(logits.bits_eq(&bottom_up), "{kind:?}");
    }
}

#[test]
fn late_variant_sharing_matches_recomputation() {
    let mut cfg = tiny_config();
    cfg.layers = 4;
    let td = active_topdown(&cfg, VariantKind::Late, 12);
    let p = backbone(&cfg, 13);
    let tape = Tape::new();
    let mut b = Binder::new(&tape);
    let bb = p.bind(&mut b).unwrap();
    let vars = td.bind(&mut b, "").unwrap();
    let x = bb
        .embed(tape.constant(&patchify(&image(&cfg, 14), &cfg).unwrap()))
        .unwrap();
    let (logits, trace) = toast_forward(x, &bb, &vars).unwrap();
    assert_eq!(trace.pass2.start, 2);

    // Rerun the second pass from the bottom with the same top-down inputs.
    let injected: Vec<_> = trace
        .top_down
        .iter()
        .map(|t| {
            t.map(|v| {
                let zero = tape.constant(&Tensor::zeros(&[8]));
                zero.concat_rows(v).unwrap()
            })
        })
        .collect();
    let full = bb.run_layers(x, 0..4, Some(&injected)).unwrap();
    for l in 0..2 {
        assert!(full.inputs[l]
            .value()
            .bits_eq(&trace.pass1.inputs[l].value()));
        assert!(full.attention[l].bits_eq(&trace.pass1.attention[l]));
    }
    // Layer `mid` gets unchanged bottom-up input plus feedback: its map is
    // still the first-pass map.
    assert!(full.inputs[2]
        .value()
        .bits_eq(&trace.pass1.inputs[2].value()));
    assert!(full.attention[2].bits_eq(&trace.pass1.attention[2]));
    let recomputed = bb.classify(bb.normalize(full.output).unwrap()).unwrap();
    assert!(recomputed.value().bits_eq(&logits.value()));
    assert!(
        logits
            .value()
            .max_abs_diff(&trace.pass1_logits.unwrap().value())
            > 1e-6
    );
}

#[test]
fn blocks_executed_per_variant() {
    let mut cfg = tiny_config();
    cfg.layers = 4;
    for (kind, blocks) in [
        (VariantKind::Full, 8),
        (VariantKind::Early, 6),
        (VariantKind::Late, 6),
    ] {
        let td = active_topdown(&cfg, kind, 15);
        let (_, _, maps, executed) = run(&cfg, 16, &td, 17);
        assert_eq!(executed, blocks, "{kind:?}");
        assert_eq!(maps.len(), 4);
    }
}

#[test]
fn similarity_map_covers_patches_in_unit_interval() {
    let cfg = tiny_config();
    let td = active_topdown(&cfg, VariantKind::Full, 18);
    let p = backbone(&cfg, 19);
    let tape = Tape::new();
    let mut b = Binder::new(&tape);
    let bb = p.bind(&mut b).unwrap();
    let vars = td.bind(&mut b, "").unwrap();
    let x = bb
        .embed(tape.constant(&patchify(&image(&cfg, 20), &cfg).unwrap()))
        .unwrap();
    let (_, trace) = toast_forward(x, &bb, &vars).unwrap();
    let s = trace.similarity.value();
    assert_eq!(s.shape(), &[4]);
    assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(trace.selected.shape(), vec![4, 8]);
}

#[test]
fn variational_loss_vanishes_for_inverted_identity_layers() {
    let cfg = tiny_config();
    let mut p = backbone(&cfg, 21);
    for b in &mut p.blocks {
        b.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    }
    let mut td = active_topdown(&cfg, VariantKind::Full, 22);
    for l in &mut td.feedback.layers {
        l.f = Linear::identity(8, true);
    }
    let tape = Tape::new();
    let mut b = Binder::new(&tape);
    let bb = p.bind(&mut b).unwrap();
    let vars = td.bind(&mut b, "").unwrap();
    let x = bb
        .embed(tape.constant(&patchify(&image(&cfg, 23), &cfg).unwrap()))
        .unwrap();
    let (_, trace) = toast_forward(x, &bb, &vars).unwrap();
    assert_eq!(variational_loss(&trace, &vars, &cfg).unwrap().item(), 0.0);
}

#[test]
fn variational_loss_hand_computed() {
    let cfg = BackboneConfig {
        image_side: 2,
        patch_side: 2,
        channels: 1,
        dim: 2,
        layers: 1,
        heads: 1,
        n_classes: 2,
        use_cls_token: false,
        mlp_ratio: 4,
    };
    let mut p = backbone(&cfg, 24);
    for b in &mut p.blocks {
        b.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    }
    p.patch_embed = Linear::zeros(4, 2, true);
    p.pos_embed = Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap();
    let mut td = TopDownParams::init(&cfg, FeedbackVariant::full(1), &mut rng(25)).unwrap();
    td.feedback.layers[0].f = Linear {
        weight: Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 3.0]).unwrap(),
        bias: Some(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap()),
    };
    let tape = Tape::new();
    let mut b = Binder::new(&tape);
    let bb = p.bind(&mut b).unwrap();
    let vars = td.bind(&mut b, "").unwrap();
    let x = bb.embed(tape.constant(&Tensor::zeros(&[1, 4]))).unwrap();
    let (_, trace) = toast_forward(x, &bb, &vars).unwrap();
    // in = out = [1, -2]; F(out) = [3, -6]; errors [2, -4]; mean of squares 10.
    assert_eq!(variational_loss(&trace, &vars, &cfg).unwrap().item(), 10.0);
}

#[test]
fn fresh_lite_wrap_changes_nothing() {
    let mut cfg = tiny_config();
    cfg.layers = 4;
    for kind in KINDS {
        let td = active_topdown(&cfg, kind, 26);
        let mut lite = td.clone();
        lite.feedback = lite_wrap(lite.feedback, 4, &mut rng(27)).unwrap();
        assert!(lite.feedback.is_lite());
        let (a, ..) = run(&cfg, 28, &td, 29);
        let (b, ..) = run(&cfg, 28, &lite, 29);
        assert!(a.bits_eq(&b), "{kind:?}");
    }
}

#[test]
fn lite_trains_only_low_rank_factors() {
    let cfg = tiny_config();
    let td = active_topdown(&cfg, VariantKind::Full, 30);
    let r = 3;
    let fb = lite_wrap(td.feedback, r, &mut rng(31)).unwrap();
    for l in &fb.layers {
        for delta in [l.f_lora.as_ref().unwrap(), l.g_lora.as_ref().unwrap()] {
            assert_eq!(delta.num_params(), r * 8 + 8 * r);
            assert!(delta.up.requires_grad() && delta.down.requires_grad());
        }
        assert!(!l.f.weight.requires_grad() && !l.g.weight.requires_grad());
    }
    let td = active_topdown(&cfg, VariantKind::Full, 32);
    assert!(lite_wrap(td.feedback.clone(), 0, &mut rng(33)).is_err());
    assert!(lite_wrap(td.feedback, 9, &mut rng(33)).is_err());
}

/// Solves `a x = b` for square `a` by Gaussian elimination with partial
/// pivoting; columns of `b` are solved independently.
fn solve(a: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
            .unwrap();
        for k in 0..n {
            a.swap(c * n + k, p * n + k);
        }
        for k in 0..m {
            b.swap(c * m + k, p * m + k);
        }
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            for k in 0..m {
                b[r * m + k] -= f * b[c * m + k];
            }
        }
    }
    let mut x = vec![0.0; n * m];
    for r in (0..n).rev() {
        for k in 0..m {
            let s: f64 = (r + 1..n).map(|j| a[r * n + j] * x[j * m + k]).sum();
            x[r * m + k] = (b[r * m + k] - s) / a[r * n + r];
        }
    }
    x
}

#[test]
fn full_rank_delta_fits_any_target() {
    let d = 4;
    let mut r = rng(34);
    let mut delta = LowRankDelta::<f64>::init(d, d, d, &mut r).unwrap();
    delta.up.set_requires_grad(true);
    let target = Tensor::randn(&[d, d], 1.0, &mut r);
    // With `down` fixed, `up · down = M` is linear in `up`; the exact
    // least-squares answer is `up = M down⁻¹`, i.e. downᵀ upᵀ = Mᵀ.
    let transpose = |t: &Tensor<f64>| {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[j * d + i] = t.data()[i * d + j];
            }
        }
        out
    };
    let up_t = solve(&transpose(&delta.down), &transpose(&target), d, d);
    let oracle = Tensor::new(
        vec![d, d],
        transpose(&Tensor::new(vec![d, d], up_t).unwrap()),
    )
    .unwrap();

    // Gradient descent on `up` alone from its zero initialization.
    let lr = 1.0 / delta.down.data().iter().map(|v| v * v).sum::<f64>();
    for _ in 0..20_000 {
        let tape = Tape::new();
        let mut b = Binder::new(&tape);
        let zero = tape.constant(&Tensor::zeros(&[d, d]));
        let w = delta.apply(&mut b, "", zero).unwrap();
        let loss = w.mse(tape.constant(&target)).unwrap();
        loss.backward().unwrap();
        let up_var = b.bound().iter().find(|(n, _)| n == "up").unwrap().1;
        let g = tape.grad(up_var).unwrap();
        for (u, gv) in delta.up.data_mut().iter_mut().zip(g.data()) {
            *u -= lr * (d * d) as f64 * gv;
        }
    }
    assert!(delta.delta().unwrap().max_abs_diff(&target) < 1e-8);
    assert!(delta.up.max_abs_diff(&oracle) < 1e-6);
    assert_eq!(delta.rank(), d);
}

#[test]
fn toast_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let p = backbone(&cfg, 35);
    let patches = patchify(&image(&cfg, 36), &cfg).unwrap();
    for kind in [VariantKind::Full, VariantKind::Late] {
        let td = active_topdown(&cfg, kind, 37);
        let mut params = named(&td, "topdown.");
        params.extend(named(&p.head, "head."));
        let report = named_grad_check(&params, |b| {
            let bb = p.bind(b)?;
            let vars = td.bind(b, "topdown.")?;
            let x = bb.embed(b.tape().constant(&patches))?;
            let (logits, trace) = toast_forward(x, &bb, &vars)?;
            let var = variational_loss(&trace, &vars, &cfg)?;
            logits.cross_entropy(2)?.add(var.scale(VARIATIONAL_WEIGHT)?)
        })
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "{kind:?} worst {}: {}",
            params[report.worst.0].0,
            report.max_relative_error
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn similarity_stays_in_unit_interval(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let z = Tensor::randn(&[6, 5], scale, &mut r);
        let (_, s) = select(&z, &Tensor::randn(&[5], 1.0, &mut r), &Tensor::eye(5));
        prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn selection_ignores_task_embedding_scale(seed in any::<u64>(), c in 0.01f64..100.0, k in -8i32..8) {
        let mut r = rng(seed);
        let z = Tensor::randn(&[6, 5], 1.0, &mut r);
        let xi = Tensor::randn(&[5], 1.0, &mut r);
        let proj = Tensor::randn(&[5, 5], 1.0, &mut r);
        let (base, _) = select(&z, &xi, &proj);
        let scaled = |f: f64| Tensor::new(vec![5], xi.data().iter().map(|v| v * f).collect()).unwrap();
        // Power-of-two scaling is exact in floating point.
        let (pow2, _) = select(&z, &scaled(2f64.powi(k)), &proj);
        prop_assert!(pow2.bits_eq(&base));
        let (any, _) = select(&z, &scaled(c), &proj);
        prop_assert!(any.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn variational_loss_is_nonnegative(seed in any::<u64>()) {
        let cfg = tiny_config();
        let p = backbone(&cfg, seed);
        let td = active_topdown(&cfg, VariantKind::Full, seed ^ 3);
        let tape = Tape::new();
        let mut b = Binder::new(&tape);
        let bb = p.bind(&mut b).unwrap();
        let vars = td.bind(&mut b, "").unwrap();
        let x = bb.embed(tape.constant(&patchify(&image(&cfg, seed ^ 4), &cfg).unwrap())).unwrap();
        let (_, trace) = toast_forward(x, &bb, &vars).unwrap();
        prop_assert!(variational_loss(&trace, &vars, &cfg).unwrap().item() >= 0.0);
    }
}
