//! Transfer pipeline: backbone pre-training, top-down pre-tuning, and tuning
//! under a per-method trainable-parameter mask, plus parameter and FLOP
//! accounting.
//!
//! Training is single-threaded and fully determined by the seed: batches are
//! drawn from a ChaCha8 permutation and per-sample gradients are summed in
//! sample order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    patchify, BackboneConfig, BackboneParams, BackboneVars, PassTrace, QueryValueLora,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{Binder, LowRankDelta, Parameters};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::topdown::{
    lite_wrap, toast_forward, variational_loss, FeedbackVariant, InferenceTrace, TopDownParams,
    TopDownVars, VariantKind, LITE_RANK, VARIATIONAL_WEIGHT,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Head only.
    Linear,
    /// Every backbone tensor.
    FullFinetune,
    /// Low-rank deltas on the query and value projections.
    LoraBackbone,
    /// Learned tokens appended at every layer.
    PromptTokens,
    /// Feature selection and feedback path.
    #[default]
    Toast,
    /// Feature selection and low-rank deltas on the feedback path.
    ToastLite,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Linear,
        MethodKind::FullFinetune,
        MethodKind::LoraBackbone,
        MethodKind::PromptTokens,
        MethodKind::Toast,
        MethodKind::ToastLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Linear => "linear",
            MethodKind::FullFinetune => "full_finetune",
            MethodKind::LoraBackbone => "lora_backbone",
            MethodKind::PromptTokens => "prompt_tokens",
            MethodKind::Toast => "toast",
            MethodKind::ToastLite => "toast_lite",
        }
    }

    pub fn uses_topdown(self) -> bool {
        matches!(self, MethodKind::Toast | MethodKind::ToastLite)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub variant: VariantKind,
    /// Rank of the query/value deltas for `lora_backbone`.
    pub lora_rank: usize,
    /// Prompt tokens per layer for `prompt_tokens`.
    pub prompt_count: usize,
    /// Rank of the feedback-path deltas for `toast_lite`.
    pub lite_rank: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: MethodKind::Toast,
            variant: VariantKind::Full,
            lora_rank: 4,
            prompt_count: 90,
            lite_rank: LITE_RANK,
        }
    }
}

impl MethodConfig {
    pub fn of(kind: MethodKind) -> Self {
        MethodConfig {
            kind,
            ..MethodConfig::default()
        }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        let rank_ok = |r: usize| (1..=cfg.dim).contains(&r);
        match self.kind {
            MethodKind::LoraBackbone if !rank_ok(self.lora_rank) => Err(Error::Config(format!(
                "lora_rank {} outside 1..={}",
                self.lora_rank, cfg.dim
            ))),
            MethodKind::ToastLite if !rank_ok(self.lite_rank) => Err(Error::Config(format!(
                "lite_rank {} outside 1..={}",
                self.lite_rank, cfg.dim
            ))),
            MethodKind::PromptTokens if self.prompt_count == 0 => {
                Err(Error::Config("prompt_count must be positive".into()))
            }
            k if k.uses_topdown() => FeedbackVariant::new(self.variant, cfg.layers).map(|_| ()),
            _ => Ok(()),
        }
    }
}

/// Parameter groups, keyed off tensor names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Backbone,
    Head,
    FeatureSelect,
    Feedback,
    Lite,
    Lora,
    Prompts,
}

impl Group {
    pub fn of(name: &str) -> Group {
        if name.starts_with("head.") {
            Group::Head
        } else if name.starts_with("topdown.feature_select.") {
            Group::FeatureSelect
        } else if name.starts_with("topdown.") {
            if name.contains(".lora.") {
                Group::Lite
            } else {
                Group::Feedback
            }
        } else if name.starts_with("lora.") {
            Group::Lora
        } else if name.starts_with("prompts.") {
            Group::Prompts
        } else {
            Group::Backbone
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    groups: BTreeSet<Group>,
}

impl TrainableSet {
    pub fn new(groups: impl IntoIterator<Item = Group>) -> Self {
        TrainableSet {
            groups: groups.into_iter().collect(),
        }
    }

    pub fn for_method(kind: MethodKind) -> Self {
        use Group::*;
        TrainableSet::new(match kind {
            MethodKind::Linear => vec![Head],
            MethodKind::FullFinetune => vec![Backbone, Head],
            MethodKind::LoraBackbone => vec![Lora, Head],
            MethodKind::PromptTokens => vec![Prompts, Head],
            MethodKind::Toast => vec![FeatureSelect, Feedback, Head],
            MethodKind::ToastLite => vec![FeatureSelect, Lite, Head],
        })
    }

    /// Pre-tuning updates the top-down module only; the head is kept.
    pub fn pretune(lite: bool) -> Self {
        let fb = if lite { Group::Lite } else { Group::Feedback };
        TrainableSet::new([Group::FeatureSelect, fb])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains(&Group::of(name))
    }

    pub fn groups(&self) -> impl Iterator<Item = Group> + '_ {
        self.groups.iter().copied()
    }
}

/// A backbone plus whatever the transfer method adds to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneParams<T>,
    pub method: MethodConfig,
    pub topdown: Option<TopDownParams<T>>,
    pub lora: Option<Vec<QueryValueLora<T>>>,
    pub prompts: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Model<T> {
    /// Adds freshly initialized method parameters to `backbone`.
    pub fn new<R: Rng + ?Sized>(
        backbone: BackboneParams<T>,
        method: MethodConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = backbone.config.clone();
        method.validate(&cfg)?;
        let topdown = if method.kind.uses_topdown() {
            let variant = FeedbackVariant::new(method.variant, cfg.layers)?;
            Some(TopDownParams::init(&cfg, variant, rng)?)
        } else {
            None
        };
        Self::assemble(backbone, method, topdown, rng)
    }

    /// Uses an existing (typically pre-tuned) top-down module. For
    /// `toast_lite` its feedback path is wrapped with low-rank deltas.
    pub fn with_topdown<R: Rng + ?Sized>(
        backbone: BackboneParams<T>,
        method: MethodConfig,
        topdown: TopDownParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        method.validate(&backbone.config)?;
        if !method.kind.uses_topdown() {
            return Err(Error::Config(format!(
                "{} has no top-down module",
                method.kind
            )));
        }
        let expected = FeedbackVariant::new(method.variant, backbone.config.layers)?;
        if topdown.feedback.variant != expected || topdown.select.xi.len() != backbone.config.dim {
            return Err(Error::Config(
                "top-down module does not match the method or backbone".into(),
            ));
        }
        Self::assemble(backbone, method, Some(topdown), rng)
    }

    fn assemble<R: Rng + ?Sized>(
        backbone: BackboneParams<T>,
        method: MethodConfig,
        mut topdown: Option<TopDownParams<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = &backbone.config;
        let d = cfg.dim;
        if method.kind == MethodKind::ToastLite {
            if let Some(td) = &mut topdown {
                if !td.feedback.is_lite() {
                    td.feedback = lite_wrap(td.feedback.clone(), method.lite_rank, rng)?;
                }
            }
        }
        let lora = if method.kind == MethodKind::LoraBackbone {
            let mut v = Vec::with_capacity(cfg.layers);
            for _ in 0..cfg.layers {
                v.push(QueryValueLora {
                    query: LowRankDelta::init(d, d, method.lora_rank, rng)?,
                    value: LowRankDelta::init(d, d, method.lora_rank, rng)?,
                });
            }
            Some(v)
        } else {
            None
        };
        let prompts = (method.kind == MethodKind::PromptTokens).then(|| {
            (0..cfg.layers)
                .map(|_| Tensor::randn(&[method.prompt_count, d], 0.1, rng))
                .collect()
        });
        Ok(Model {
            backbone,
            method,
            topdown,
            lora,
            prompts,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Sets `requires_grad` on every tensor according to `set`.
    pub fn set_trainable(&mut self, set: &TrainableSet) {
        self.visit_mut("", &mut |name, t| t.set_requires_grad(set.contains(&name)));
    }

    /// Names of the tensors in `set`, in visit order.
    pub fn trainable_names(&self, set: &TrainableSet) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| {
            if set.contains(&n) {
                names.push(n)
            }
        });
        names
    }

    /// Binds the model and runs it on `[num_patches × patch_dim]` rows.
    pub fn forward<'t>(
        &self,
        b: &mut Binder<'t, T>,
        patches: &Tensor<T>,
    ) -> Result<ModelOutput<'t, T>> {
        let bb = self
            .backbone
            .bind_adapted(b, self.lora.as_deref(), self.prompts.as_deref())?;
        let tokens = bb.embed(b.tape().constant(patches))?;
        match &self.topdown {
            Some(td) => {
                let vars = td.bind(b, "topdown.")?;
                let (logits, trace) = toast_forward(tokens, &bb, &vars)?;
                Ok(ModelOutput {
                    logits,
                    backbone: bb,
                    topdown: Some((vars, trace)),
                    bottom_up: None,
                })
            }
            None => {
                let (logits, trace) = bb.forward_feedforward(tokens, None)?;
                Ok(ModelOutput {
                    logits,
                    backbone: bb,
                    topdown: None,
                    bottom_up: Some(trace),
                })
            }
        }
    }

    pub fn logits(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&mut Binder::new(&tape), patches)?;
        Ok(out.logits.value())
    }

    pub fn predict(&self, patches: &Tensor<T>) -> Result<usize> {
        Ok(argmax(self.logits(patches)?.data()))
    }

    /// Head-averaged last-layer attention of the bottom-up pass and, for
    /// top-down models, the similarity map and the second-pass attention.
    pub fn inspect(&self, image: &Tensor<f32>) -> Result<AttentionSnapshot> {
        let cfg = self.config();
        let patches = patchify(&image.cast::<T>(), cfg)?;
        let tape = Tape::new();
        let mut b = Binder::new(&tape);
        let out = self.forward(&mut b, &patches)?;
        let last = cfg.layers.checked_sub(1);
        let snapshot = match &out.topdown {
            Some((_, trace)) => {
                let pass1 = match (last, trace.pass1.end() == cfg.layers) {
                    (Some(l), true) => Some(cls_attention(&trace.pass1.attention[l], cfg)),
                    (Some(_), false) => {
                        let tokens = out.backbone.embed(tape.constant(&patches))?;
                        let (_, full) = out.backbone.forward_feedforward(tokens, None)?;
                        full.attention.last().map(|m| cls_attention(m, cfg))
                    }
                    (None, _) => None,
                };
                AttentionSnapshot {
                    pass1,
                    similarity: Some(trace.similarity.value().to_f64_vec()),
                    pass2: last
                        .and_then(|l| trace.pass2_attention(l))
                        .map(|m| cls_attention(m, cfg)),
                    logits: out.logits.value().to_f64_vec(),
                }
            }
            None => {
                let trace = out.bottom_up.as_ref().expect("bottom-up trace");
                AttentionSnapshot {
                    pass1: trace.attention.last().map(|m| cls_attention(m, cfg)),
                    similarity: None,
                    pass2: None,
                    logits: out.logits.value().to_f64_vec(),
                }
            }
        };
        Ok(snapshot)
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.backbone.visit(prefix, f);
        if let Some(td) = &self.topdown {
            td.visit(&format!("{prefix}topdown."), f);
        }
        if let Some(lora) = &self.lora {
            for (i, l) in lora.iter().enumerate() {
                l.visit(&format!("{prefix}lora.{i}."), f);
            }
        }
        if let Some(prompts) = &self.prompts {
            for (i, p) in prompts.iter().enumerate() {
                f(format!("{prefix}prompts.{i}"), p);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.backbone.visit_mut(prefix, f);
        if let Some(td) = &mut self.topdown {
            td.visit_mut(&format!("{prefix}topdown."), f);
        }
        if let Some(lora) = &mut self.lora {
            for (i, l) in lora.iter_mut().enumerate() {
                l.visit_mut(&format!("{prefix}lora.{i}."), f);
            }
        }
        if let Some(prompts) = &mut self.prompts {
            for (i, p) in prompts.iter_mut().enumerate() {
                f(format!("{prefix}prompts.{i}"), p);
            }
        }
    }
}

/// One forward pass on a tape.
pub struct ModelOutput<'t, T> {
    pub logits: Var<'t, T>,
    pub backbone: BackboneVars<'t, T>,
    pub topdown: Option<(TopDownVars<'t, T>, InferenceTrace<'t, T>)>,
    pub bottom_up: Option<PassTrace<'t, T>>,
}

impl<'t, T: Scalar> ModelOutput<'t, T> {
    /// Cross-entropy plus `lambda` times the variational loss when a
    /// top-down module is present.
    pub fn loss(&self, label: usize, lambda: f64) -> Result<Var<'t, T>> {
        let ce = self.logits.cross_entropy(label)?;
        match &self.topdown {
            Some((vars, trace)) if lambda != 0.0 => {
                let var = variational_loss(trace, vars, &self.backbone.config)?;
                ce.add(var.scale(T::of(lambda))?)
            }
            _ => Ok(ce),
        }
    }
}

/// Per-patch maps (row-major over the grid) for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub pass1: Option<Vec<f64>>,
    pub similarity: Option<Vec<f64>>,
    pub pass2: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Head-averaged attention from the cls query to each patch, or the mean over
/// all queries when there is no cls token. Prompt columns are dropped.
pub fn cls_attention<T: Scalar>(map: &Tensor<T>, cfg: &BackboneConfig) -> Vec<f64> {
    let (heads, n) = (map.shape()[0], map.shape()[1]);
    let off = cfg.patch_offset();
    let patches = cfg.num_patches();
    let queries: Vec<usize> = if cfg.use_cls_token {
        vec![0]
    } else {
        (0..cfg.num_tokens()).collect()
    };
    let scale = 1.0 / (heads * queries.len()) as f64;
    let mut out = vec![0.0; patches];
    for h in 0..heads {
        for &q in &queries {
            let row = &map.data()[(h * n + q) * n..(h * n + q + 1) * n];
            for (o, v) in out.iter_mut().zip(&row[off..off + patches]) {
                *o += v.as_f64() * scale;
            }
        }
    }
    out
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdaptiveMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_variational: f64,
    pub optimizer: OptimizerKind,
    /// Momentum for SGD; first-moment decay for adaptive moments.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
            lambda_variational: VARIATIONAL_WEIGHT,
            optimizer: OptimizerKind::AdaptiveMoments,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_neg = |v: f64| v.is_finite() && v >= 0.0;
        if !non_neg(self.learning_rate) {
            return Err(Error::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !non_neg(self.weight_decay) || !non_neg(self.lambda_variational) {
            return Err(Error::Config(
                "weight_decay and lambda_variational must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First-order optimizer over a fixed list of tensors. Weight decay is
/// decoupled from the gradient for both kinds.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.momentum,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Vec<f64>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "optimizer",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        self.begin(grads);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g)?;
        }
        Ok(())
    }

    /// Advances the step counter; call once before the per-tensor updates.
    pub fn begin(&mut self, grads: &[Vec<f64>]) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
    }

    /// Updates tensor `i` of the list given to [`Optimizer::begin`].
    pub fn update<T: Scalar>(&mut self, i: usize, p: &mut Tensor<T>, g: &[f64]) -> Result<()> {
        if self.first.get(i).is_none_or(|m| m.len() != g.len()) || p.len() != g.len() {
            return Err(Error::dim(
                "optimizer",
                format!("param {i}: {} values, {} grads", p.len(), g.len()),
            ));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (m, v) = (&mut self.first[i], &mut self.second[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let w = x.as_f64();
            let dir = match self.kind {
                OptimizerKind::SgdMomentum => {
                    m[j] = b1 * m[j] + g[j];
                    m[j]
                }
                OptimizerKind::AdaptiveMoments => {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps)
                }
            };
            *x = T::of(w - self.lr * (dir + self.weight_decay * w));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch, variational term included.
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }
}

/// Patchified samples ready for the model.
pub struct Prepared<T> {
    pub patches: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T> Prepared<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn prepare<T: Scalar>(ds: &Dataset, cfg: &BackboneConfig) -> Result<Prepared<T>> {
    if ds.is_empty() {
        return Ok(Prepared {
            patches: Vec::new(),
            labels: Vec::new(),
        });
    }
    if ds.channels != cfg.channels || ds.side != cfg.image_side {
        return Err(Error::Config(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            ds.channels, ds.side, ds.side, cfg.channels, cfg.image_side, cfg.image_side
        )));
    }
    if ds.n_classes > cfg.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            ds.n_classes, cfg.n_classes
        )));
    }
    let patches = ds
        .images
        .iter()
        .map(|im| patchify(&im.pixels.cast::<T>(), cfg))
        .collect::<Result<_>>()?;
    Ok(Prepared {
        patches,
        labels: ds.images.iter().map(|im| im.label).collect(),
    })
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Prepared<T>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (p, &y) in data.patches.iter().zip(&data.labels) {
        correct += usize::from(model.predict(p)? == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<f64> {
    accuracy(model, &prepare(ds, model.config())?)
}

/// Minibatch training of the tensors in `set`; everything else is left
/// untouched.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    set: &TrainableSet,
    train: &Prepared<T>,
    val: Option<&Prepared<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.set_trainable(set);
    let names = model.trainable_names(set);
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut sizes = vec![0; names.len()];
    model.visit("", &mut |n, t| {
        if let Some(&i) = index.get(n.as_str()) {
            sizes[i] = t.len();
        }
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let tape = Tape::new();
                let mut b = Binder::new(&tape);
                let out = model
                    .forward(&mut b, &train.patches[i])
                    .map_err(|e| diverged(e, epoch, step))?;
                let label = train.labels[i];
                correct += usize::from(argmax(out.logits.value().data()) == label);
                let loss = out
                    .loss(label, cfg.lambda_variational)
                    .map_err(|e| diverged(e, epoch, step))?;
                let value = loss.item().as_f64();
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, step, value });
                }
                loss_sum += value;
                loss.backward().map_err(|e| diverged(e, epoch, step))?;
                for (name, var) in b.bound() {
                    if let (Some(&k), Some(g)) = (index.get(name.as_str()), tape.grad(*var)) {
                        for (acc, v) in grads[k].iter_mut().zip(g.data()) {
                            *acc += v.as_f64();
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            opt.begin(&grads);
            let mut status = Ok(());
            model.visit_mut("", &mut |n, t| {
                if let Some(&k) = index.get(n.as_str()) {
                    if status.is_ok() {
                        status = opt.update(k, t, &grads[k]);
                    }
                }
            });
            status?;
            step += 1;
        }
        let n = train.len().max(1) as f64;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(model, v)?),
            _ => None,
        };
        report.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy,
        });
    }
    Ok(report)
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence {
            epoch,
            step,
            value: f64::NAN,
        },
        other => other,
    }
}

/// Supervised training of a freshly initialized backbone (seeded by
/// `train.seed`) on a generic labeled set.
pub fn pretrain_backbone(
    cfg: &BackboneConfig,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<(BackboneParams<f32>, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let backbone = BackboneParams::init(cfg, &mut rng)?;
    let mut model = Model::new(
        backbone,
        MethodConfig::of(MethodKind::FullFinetune),
        &mut rng,
    )?;
    let prepared = prepare(data, cfg)?;
    let report = train_model(
        &mut model,
        &TrainableSet::for_method(MethodKind::FullFinetune),
        &prepared,
        None,
        train,
    )?;
    Ok((model.backbone, report))
}

/// Trains a top-down module against a frozen backbone and head on a generic
/// set whose labels the head already covers.
pub fn pretune(
    backbone: &BackboneParams<f32>,
    topdown: TopDownParams<f32>,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<(TopDownParams<f32>, TrainReport)> {
    let lite = topdown.feedback.is_lite();
    let method = MethodConfig {
        kind: if lite {
            MethodKind::ToastLite
        } else {
            MethodKind::Toast
        },
        variant: topdown.feedback.variant.kind,
        ..MethodConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Model::with_topdown(backbone.clone(), method, topdown, &mut rng)?;
    let prepared = prepare(data, &backbone.config)?;
    let report = train_model(
        &mut model,
        &TrainableSet::pretune(lite),
        &prepared,
        None,
        train,
    )?;
    Ok((model.topdown.expect("top-down module"), report))
}

/// Trains the model's method-specific trainable set on a downstream task.
pub fn tune(
    model: &mut Model<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let set = TrainableSet::for_method(model.method.kind);
    let tr = prepare(train, model.config())?;
    let va = val.map(|v| prepare(v, model.config())).transpose()?;
    train_model(model, &set, &tr, va.as_ref(), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    /// `trainable / total`, where the total includes the method's additions.
    pub fraction: f64,
}

/// Names and element counts of every tensor a model for `method` would hold,
/// computed from shapes alone.
pub fn param_inventory(
    cfg: &BackboneConfig,
    method: &MethodConfig,
) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    method.validate(cfg)?;
    let (d, h) = (cfg.dim, cfg.mlp_dim());
    let mut v: Vec<(String, usize)> = Vec::new();
    let linear = |v: &mut Vec<(String, usize)>, p: &str, i: usize, o: usize, bias: bool| {
        v.push((format!("{p}weight"), i * o));
        if bias {
            v.push((format!("{p}bias"), o));
        }
    };
    linear(&mut v, "patch_embed.", cfg.patch_dim(), d, true);
    v.push(("pos_embed".into(), cfg.num_tokens() * d));
    if cfg.use_cls_token {
        v.push(("cls_token".into(), d));
    }
    for l in 0..cfg.layers {
        let p = format!("blocks.{l}.");
        v.push((format!("{p}norm1.gain"), d));
        v.push((format!("{p}norm1.bias"), d));
        for w in ["wq", "wk", "wv", "wo"] {
            linear(&mut v, &format!("{p}attn.{w}."), d, d, true);
        }
        v.push((format!("{p}norm2.gain"), d));
        v.push((format!("{p}norm2.bias"), d));
        linear(&mut v, &format!("{p}mlp.fc1."), d, h, true);
        linear(&mut v, &format!("{p}mlp.fc2."), h, d, true);
    }
    v.push(("final_norm.gain".into(), d));
    v.push(("final_norm.bias".into(), d));
    linear(&mut v, "head.", d, cfg.n_classes, true);
    match method.kind {
        MethodKind::Toast | MethodKind::ToastLite => {
            v.push(("topdown.feature_select.xi".into(), d));
            v.push(("topdown.feature_select.proj".into(), d * d));
            let span = FeedbackVariant::new(method.variant, cfg.layers)?.span(cfg.layers)?;
            for l in span {
                let p = format!("topdown.feedback.{l}.");
                linear(&mut v, &format!("{p}f."), d, d, true);
                linear(&mut v, &format!("{p}g."), d, d, false);
                if method.kind == MethodKind::ToastLite {
                    let r = method.lite_rank;
                    for m in ["f", "g"] {
                        v.push((format!("{p}{m}.lora.down"), r * d));
                        v.push((format!("{p}{m}.lora.up"), d * r));
                    }
                }
            }
        }
        MethodKind::LoraBackbone => {
            let r = method.lora_rank;
            for l in 0..cfg.layers {
                for m in ["wq", "wv"] {
                    v.push((format!("lora.{l}.{m}.down"), r * d));
                    v.push((format!("lora.{l}.{m}.up"), d * r));
                }
            }
        }
        MethodKind::PromptTokens => {
            for l in 0..cfg.layers {
                v.push((format!("prompts.{l}"), method.prompt_count * d));
            }
        }
        MethodKind::Linear | MethodKind::FullFinetune => {}
    }
    Ok(v)
}

pub fn param_count(cfg: &BackboneConfig, method: &MethodConfig) -> Result<ParamCount> {
    let set = TrainableSet::for_method(method.kind);
    let inv = param_inventory(cfg, method)?;
    let total: usize = inv.iter().map(|(_, n)| n).sum();
    let trainable: usize = inv
        .iter()
        .filter(|(name, _)| set.contains(name))
        .map(|(_, n)| n)
        .sum();
    Ok(ParamCount {
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    /// Transformer-block FLOPs executed per image over those of one plain
    /// feedforward pass.
    pub relative: f64,
    /// Feature selection and feedback path, on the same scale.
    pub feedback_overhead: f64,
    pub blocks_executed: usize,
    /// Matmul FLOPs of one plain feedforward pass through all blocks.
    pub baseline_flops: u64,
}

/// Multiply-add FLOPs (2 per MAC) of one block over `n` tokens.
fn block_flops(cfg: &BackboneConfig, n: usize) -> u64 {
    let (n, d, h) = (n as u64, cfg.dim as u64, cfg.mlp_dim() as u64);
    2 * (4 * n * d * d + 2 * n * n * d + 2 * n * d * h)
}

/// Analytic matmul cost relative to a single feedforward pass. Patch
/// embedding and head are identical across methods and left out.
pub fn flops_estimate(cfg: &BackboneConfig, method: &MethodConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    method.validate(cfg)?;
    let layers = cfg.layers;
    let n = cfg.num_tokens();
    let baseline = block_flops(cfg, n) * layers as u64;
    let ratio = |x: u64| {
        if baseline == 0 {
            1.0
        } else {
            x as f64 / baseline as f64
        }
    };
    let report = match method.kind {
        MethodKind::Toast | MethodKind::ToastLite => {
            let variant = FeedbackVariant::new(method.variant, layers)?;
            let blocks = variant.blocks_executed(layers);
            let (p, d) = (cfg.num_patches() as u64, cfg.dim as u64);
            let span = variant.span(layers)?.len() as u64;
            // Cosine similarity and P, then F and G per fed-back layer.
            let feedback = 2 * p * d + 2 * p * d * d + span * 2 * (2 * p * d * d);
            FlopsReport {
                relative: ratio(block_flops(cfg, n) * blocks as u64),
                feedback_overhead: ratio(feedback),
                blocks_executed: blocks,
                baseline_flops: baseline,
            }
        }
        MethodKind::PromptTokens => FlopsReport {
            relative: ratio(block_flops(cfg, n + method.prompt_count) * layers as u64),
            feedback_overhead: 0.0,
            blocks_executed: layers,
            baseline_flops: baseline,
        },
        _ => FlopsReport {
            relative: 1.0,
            feedback_overhead: 0.0,
            blocks_executed: layers,
            baseline_flops: baseline,
        },
    };
    Ok(report)
}
