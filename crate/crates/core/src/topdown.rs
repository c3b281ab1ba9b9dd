//! Top-down attention module: feature selection, a linear feedback path, and
//! the two-pass inference that injects feedback into every attention layer.
//!
//! Inference runs in four steps:
//! 1. a bottom-up pass with no top-down input;
//! 2. patch tokens of that pass (after the final layernorm) are weighted by
//!    `clamp01(cos(z_i, ξ))` and mapped through `P`;
//! 3. the selected tokens descend the feedback chain, `X_td(ℓ) = G_ℓ u_ℓ`,
//!    `u_{ℓ-1} = F_ℓ u_ℓ`;
//! 4. a second pass with `X_td` added to each value input produces logits.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneVars, PassTrace};
use crate::error::{Error, Result};
use crate::params::{Binder, Linear, LinearVars, LowRankDelta, Parameters, NORM_EPS};
use crate::tensor::{Scalar, Tensor, Var};

/// Weight of the variational loss relative to the task loss.
pub const VARIATIONAL_WEIGHT: f64 = 0.03;

/// Default rank of the low-rank factors in the Lite variant.
pub const LITE_RANK: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    /// Feedback from the last layer down to the first.
    #[default]
    Full,
    /// Feedback from the middle layer down to the first.
    Early,
    /// Feedback from the last layer down to the middle layer.
    Late,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::Early => "early",
            VariantKind::Late => "late",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(VariantKind::Full),
            "early" => Ok(VariantKind::Early),
            "late" => Ok(VariantKind::Late),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Which layers the feedback path covers. Layers are 0-indexed; `mid` is
/// the number of layers below the split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedbackVariant {
    pub kind: VariantKind,
    pub mid: usize,
}

impl FeedbackVariant {
    /// `mid = floor(layers / 2)`.
    pub fn new(kind: VariantKind, layers: usize) -> Result<Self> {
        let v = FeedbackVariant {
            kind,
            mid: layers / 2,
        };
        v.span(layers)?;
        Ok(v)
    }

    pub fn full(layers: usize) -> Self {
        FeedbackVariant {
            kind: VariantKind::Full,
            mid: layers / 2,
        }
    }

    /// Absolute layer indices that receive top-down input.
    pub fn span(&self, layers: usize) -> Result<Range<usize>> {
        if self.kind != VariantKind::Full && !(1..layers).contains(&self.mid) {
            return Err(Error::Config(format!(
                "{} variant needs 1 <= mid < layers, got mid {} with {layers} layers",
                self.kind.name(),
                self.mid
            )));
        }
        Ok(match self.kind {
            VariantKind::Full => 0..layers,
            VariantKind::Early => 0..self.mid,
            VariantKind::Late => self.mid..layers,
        })
    }

    /// Layers executed by the bottom-up pass.
    pub fn pass1_layers(&self, layers: usize) -> usize {
        match self.kind {
            VariantKind::Early => self.mid,
            _ => layers,
        }
    }

    /// First layer the second pass has to recompute.
    pub fn pass2_start(&self) -> usize {
        match self.kind {
            VariantKind::Late => self.mid,
            _ => 0,
        }
    }

    /// Transformer blocks executed per image, both passes included.
    pub fn blocks_executed(&self, layers: usize) -> usize {
        self.pass1_layers(layers) + layers - self.pass2_start()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelectParams<T> {
    /// Task embedding ξ, `[d]`.
    pub xi: Tensor<T>,
    /// Channel-selection transform, `[d × d]`, applied as `row · P`.
    pub proj: Tensor<T>,
}

/// Feedback and injection transforms for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackLayer<T> {
    /// Descends one layer: `u_{ℓ-1} = F_ℓ(u_ℓ)`. Has a bias.
    pub f: Linear<T>,
    /// Produces the layer's top-down input. No bias, so zero weights mean
    /// exactly zero signal.
    pub g: Linear<T>,
    pub f_lora: Option<LowRankDelta<T>>,
    pub g_lora: Option<LowRankDelta<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackParams<T> {
    pub variant: FeedbackVariant,
    /// `layers[i]` serves absolute layer `span.start + i`.
    pub span: Range<usize>,
    pub layers: Vec<FeedbackLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopDownParams<T> {
    pub select: FeatureSelectParams<T>,
    pub feedback: FeedbackParams<T>,
}

impl<T: Scalar> FeatureSelectParams<T> {
    /// ξ ~ N(0, 1/d), P = I.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        FeatureSelectParams {
            xi: Tensor::randn(&[d], (1.0 / d as f64).sqrt(), rng),
            proj: Tensor::eye(d),
        }
    }
}

impl<T: Scalar> FeedbackParams<T> {
    /// F ~ N(0, 1/d) with zero bias, G = 0.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        layers: usize,
        variant: FeedbackVariant,
        rng: &mut R,
    ) -> Result<Self> {
        let span = variant.span(layers)?;
        let std = (1.0 / d as f64).sqrt();
        let layers = span
            .clone()
            .map(|_| FeedbackLayer {
                f: Linear::init(d, d, std, true, rng),
                g: Linear::zeros(d, d, false),
                f_lora: None,
                g_lora: None,
            })
            .collect();
        Ok(FeedbackParams {
            variant,
            span,
            layers,
        })
    }

    pub fn is_lite(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.f_lora.is_some() || l.g_lora.is_some())
    }

    pub fn layer(&self, absolute: usize) -> Option<&FeedbackLayer<T>> {
        absolute
            .checked_sub(self.span.start)
            .and_then(|i| self.layers.get(i))
    }
}

impl<T: Scalar> TopDownParams<T> {
    pub fn init<R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        variant: FeedbackVariant,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TopDownParams {
            select: FeatureSelectParams::init(cfg.dim, rng),
            feedback: FeedbackParams::init(cfg.dim, cfg.layers, variant, rng)?,
        })
    }

    /// Binds under `prefix` (normally `"topdown."`), merging low-rank deltas.
    pub fn bind<'t>(&self, b: &mut Binder<'t, T>, prefix: &str) -> Result<TopDownVars<'t, T>> {
        let fb = &self.feedback;
        let xi = b.leaf(format!("{prefix}feature_select.xi"), &self.select.xi);
        let proj = b.leaf(format!("{prefix}feature_select.proj"), &self.select.proj);
        let mut layers = Vec::with_capacity(fb.layers.len());
        for (i, l) in fb.layers.iter().enumerate() {
            let p = format!("{prefix}feedback.{}.", fb.span.start + i);
            let mut f = l.f.bind(b, &format!("{p}f."));
            let mut g = l.g.bind(b, &format!("{p}g."));
            if let Some(delta) = &l.f_lora {
                f.weight = delta.apply(b, &format!("{p}f.lora."), f.weight)?;
            }
            if let Some(delta) = &l.g_lora {
                g.weight = delta.apply(b, &format!("{p}g.lora."), g.weight)?;
            }
            layers.push(FeedbackLayerVars { f, g });
        }
        Ok(TopDownVars {
            xi,
            proj,
            variant: fb.variant,
            span: fb.span.clone(),
            layers,
        })
    }
}

impl<T: Scalar> Parameters<T> for TopDownParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}feature_select.xi"), &self.select.xi);
        f(format!("{prefix}feature_select.proj"), &self.select.proj);
        let start = self.feedback.span.start;
        for (i, l) in self.feedback.layers.iter().enumerate() {
            let p = format!("{prefix}feedback.{}.", start + i);
            l.f.visit(&format!("{p}f."), f);
            l.g.visit(&format!("{p}g."), f);
            if let Some(d) = &l.f_lora {
                d.visit(&format!("{p}f.lora."), f);
            }
            if let Some(d) = &l.g_lora {
                d.visit(&format!("{p}g.lora."), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}feature_select.xi"), &mut self.select.xi);
        f(
            format!("{prefix}feature_select.proj"),
            &mut self.select.proj,
        );
        let start = self.feedback.span.start;
        for (i, l) in self.feedback.layers.iter_mut().enumerate() {
            let p = format!("{prefix}feedback.{}.", start + i);
            l.f.visit_mut(&format!("{p}f."), f);
            l.g.visit_mut(&format!("{p}g."), f);
            if let Some(d) = &mut l.f_lora {
                d.visit_mut(&format!("{p}f.lora."), f);
            }
            if let Some(d) = &mut l.g_lora {
                d.visit_mut(&format!("{p}g.lora."), f);
            }
        }
    }
}

/// Attaches rank-`rank` deltas to every feedback and injection transform and
/// freezes the base matrices. The up factors start at zero, so the wrapped
/// module computes exactly what the unwrapped one did.
pub fn lite_wrap<T: Scalar, R: Rng + ?Sized>(
    mut fb: FeedbackParams<T>,
    rank: usize,
    rng: &mut R,
) -> Result<FeedbackParams<T>> {
    for l in &mut fb.layers {
        let d = l.f.d_in();
        l.f.set_requires_grad(false);
        l.g.set_requires_grad(false);
        let mut f_delta = LowRankDelta::init(d, d, rank, rng)?;
        let mut g_delta = LowRankDelta::init(d, d, rank, rng)?;
        f_delta.set_requires_grad(true);
        g_delta.set_requires_grad(true);
        l.f_lora = Some(f_delta);
        l.g_lora = Some(g_delta);
    }
    Ok(fb)
}

#[derive(Clone, Copy, Debug)]
pub struct FeedbackLayerVars<'t, T> {
    pub f: LinearVars<'t, T>,
    pub g: LinearVars<'t, T>,
}

/// Top-down parameters bound to a tape, low-rank deltas already merged.
#[derive(Clone, Debug)]
pub struct TopDownVars<'t, T> {
    pub xi: Var<'t, T>,
    pub proj: Var<'t, T>,
    pub variant: FeedbackVariant,
    pub span: Range<usize>,
    pub layers: Vec<FeedbackLayerVars<'t, T>>,
}

/// `s_i = clamp01(cos(z_i, ξ))`, `z̃_i = (s_i z_i) · P`.
///
/// Returns `(z̃ [n × d], s [n])`.
pub fn feature_select<'t, T: Scalar>(
    z: Var<'t, T>,
    xi: Var<'t, T>,
    proj: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = z.cosine_sim(xi, T::of(NORM_EPS))?.relu_clamp01()?;
    let selected = z.scale_rows(s)?.matmul(proj)?;
    Ok((selected, s))
}

/// Per-layer top-down inputs for an `n_layers` backbone. Entries outside the
/// feedback span are `None`.
pub fn feedback_pass<'t, T: Scalar>(
    selected: Var<'t, T>,
    td: &TopDownVars<'t, T>,
    n_layers: usize,
) -> Result<Vec<Option<Var<'t, T>>>> {
    if td.span.end > n_layers || td.span.len() != td.layers.len() {
        return Err(Error::Config(format!(
            "feedback span {:?} with {} layers does not fit a {n_layers}-layer backbone",
            td.span,
            td.layers.len()
        )));
    }
    let mut out = vec![None; n_layers];
    let mut u = selected;
    for (i, l) in td.layers.iter().enumerate().rev() {
        out[td.span.start + i] = Some(l.g.apply(u)?);
        if i > 0 {
            u = l.f.apply(u)?;
        }
    }
    Ok(out)
}

/// Everything recorded by one two-pass inference.
#[derive(Clone, Debug)]
pub struct InferenceTrace<'t, T> {
    /// Bottom-up pass. Covers layers `0..mid` for the early variant.
    pub pass1: PassTrace<'t, T>,
    /// Bottom-up logits; absent when the first pass stops early.
    pub pass1_logits: Option<Var<'t, T>>,
    /// Patch similarity map, `[num_patches]`, entries in `[0, 1]`.
    pub similarity: Var<'t, T>,
    /// Selected patch tokens z̃.
    pub selected: Var<'t, T>,
    /// Top-down input per layer, patch rows only.
    pub top_down: Vec<Option<Var<'t, T>>>,
    /// Second pass. Starts at `mid` for the late variant, which reuses
    /// first-pass activations below it.
    pub pass2: PassTrace<'t, T>,
    pub span: Range<usize>,
}

impl<'t, T: Scalar> InferenceTrace<'t, T> {
    /// First-pass output of absolute layer `layer`.
    pub fn pass1_output(&self, layer: usize) -> Option<Var<'t, T>> {
        let i = layer.checked_sub(self.pass1.start)?;
        if i + 1 < self.pass1.inputs.len() {
            Some(self.pass1.inputs[i + 1])
        } else if i + 1 == self.pass1.inputs.len() {
            Some(self.pass1.output)
        } else {
            None
        }
    }

    /// Second-pass attention map of absolute layer `layer`, falling back to
    /// the shared first-pass map for layers the second pass did not rerun.
    pub fn pass2_attention(&self, layer: usize) -> Option<&Tensor<T>> {
        if layer >= self.pass2.start {
            self.pass2.attention.get(layer - self.pass2.start)
        } else {
            self.pass1.attention.get(layer)
        }
    }

    /// Transformer blocks executed across both passes.
    pub fn blocks_executed(&self) -> usize {
        self.pass1.inputs.len() + self.pass2.inputs.len()
    }
}

/// Prepends a zero row for the cls token when the backbone has one.
fn with_cls_row<'t, T: Scalar>(x: Var<'t, T>, cfg: &BackboneConfig) -> Result<Var<'t, T>> {
    if !cfg.use_cls_token {
        return Ok(x);
    }
    let zero = x.tape().constant(&Tensor::zeros(&[cfg.dim]));
    zero.concat_rows(x)
}

fn patch_rows<'t, T: Scalar>(x: Var<'t, T>, cfg: &BackboneConfig) -> Result<Var<'t, T>> {
    if cfg.use_cls_token {
        x.slice_rows(1, cfg.num_tokens())
    } else {
        Ok(x)
    }
}

/// Two-pass inference over embedded tokens `[N × d]`.
pub fn toast_forward<'t, T: Scalar>(
    tokens: Var<'t, T>,
    backbone: &BackboneVars<'t, T>,
    td: &TopDownVars<'t, T>,
) -> Result<(Var<'t, T>, InferenceTrace<'t, T>)> {
    let cfg = &backbone.config;
    let n_layers = backbone.layers();
    let variant = td.variant;
    let span = variant.span(n_layers)?;
    if span != td.span {
        return Err(Error::Config(format!(
            "feedback span {:?} does not match variant span {span:?}",
            td.span
        )));
    }

    let pass1 = backbone.run_layers(tokens, 0..variant.pass1_layers(n_layers), None)?;
    let normed = backbone.normalize(pass1.output)?;
    let pass1_logits = if pass1.end() == n_layers {
        Some(backbone.classify(normed)?)
    } else {
        None
    };

    let (selected, similarity) = feature_select(patch_rows(normed, cfg)?, td.xi, td.proj)?;
    let top_down = feedback_pass(selected, td, n_layers)?;
    let injected = top_down
        .iter()
        .map(|t| t.map(|v| with_cls_row(v, cfg)).transpose())
        .collect::<Result<Vec<_>>>()?;

    let start = variant.pass2_start();
    let x = if start == 0 {
        tokens
    } else {
        pass1.inputs[start]
    };
    let pass2 = backbone.run_layers(x, start..n_layers, Some(&injected))?;
    let logits = backbone.classify(backbone.normalize(pass2.output)?)?;
    Ok((
        logits,
        InferenceTrace {
            pass1,
            pass1_logits,
            similarity,
            selected,
            top_down,
            pass2,
            span,
        },
    ))
}

/// Mean over span layers of the patch-token MSE between `F_ℓ(out_ℓ)` and
/// `in_ℓ`, using first-pass activations. Unweighted.
pub fn variational_loss<'t, T: Scalar>(
    trace: &InferenceTrace<'t, T>,
    td: &TopDownVars<'t, T>,
    cfg: &BackboneConfig,
) -> Result<Var<'t, T>> {
    let tape = trace.pass1.output.tape();
    if td.layers.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(T::zero())));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (i, l) in td.layers.iter().enumerate() {
        let layer = td.span.start + i;
        let missing = || Error::Config(format!("no first-pass activations for layer {layer}"));
        let input = trace
            .pass1
            .inputs
            .get(layer.wrapping_sub(trace.pass1.start))
            .copied()
            .ok_or_else(missing)?;
        let output = trace.pass1_output(layer).ok_or_else(missing)?;
        let recon = l.f.apply(patch_rows(output, cfg)?)?;
        let term = recon.mse(patch_rows(input, cfg)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total
        .expect("span is non-empty")
        .scale(T::of(1.0 / td.layers.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_spans() {
        let l = 4;
        let full = FeedbackVariant::new(VariantKind::Full, l).unwrap();
        let early = FeedbackVariant::new(VariantKind::Early, l).unwrap();
        let late = FeedbackVariant::new(VariantKind::Late, l).unwrap();
        assert_eq!(full.span(l).unwrap(), 0..4);
        assert_eq!(early.span(l).unwrap(), 0..2);
        assert_eq!(late.span(l).unwrap(), 2..4);
        assert_eq!(full.blocks_executed(l), 8);
        assert_eq!(early.blocks_executed(l), 6);
        assert_eq!(late.blocks_executed(l), 6);
        assert!(FeedbackVariant::new(VariantKind::Late, 1).is_err());
        assert!(FeedbackVariant::new(VariantKind::Full, 1).is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for k in [VariantKind::Full, VariantKind::Early, VariantKind::Late] {
            assert_eq!(k.name().parse::<VariantKind>().unwrap(), k);
        }
        assert!("middle".parse::<VariantKind>().is_err());
    }
}
