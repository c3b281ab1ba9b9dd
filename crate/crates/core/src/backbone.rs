//! Feedforward vision transformer whose attention layers accept an optional
//! top-down input on the value path.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`. A top-down
//! signal `X_td` for a layer enters as `V = W_V (LN(x) + X_td)`; queries and
//! keys only ever see `LN(x)`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    Binder, LayerNormParams, LayerNormVars, Linear, LinearVars, LowRankDelta, Parameters,
};
use crate::tensor::{multi_head_attention, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    /// Token width `d`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub use_cls_token: bool,
    /// Hidden width of the MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_side: 32,
            patch_side: 4,
            channels: 1,
            dim: 32,
            layers: 2,
            heads: 4,
            n_classes: 10,
            use_cls_token: true,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    /// ViT-B/16 at 224 pixels, used for parameter and FLOP accounting.
    pub fn vit_base(n_classes: usize) -> Self {
        BackboneConfig {
            image_side: 224,
            patch_side: 16,
            channels: 3,
            dim: 768,
            layers: 12,
            heads: 12,
            n_classes,
            use_cls_token: true,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("n_classes", self.n_classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{name} must be positive")));
            }
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count `N`, including the cls token when enabled.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    /// Row index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub config: BackboneConfig,
    pub patch_embed: Linear<T>,
    pub pos_embed: Tensor<T>,
    pub cls_token: Option<Tensor<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: LayerNormParams<T>,
    /// Classification head. Named `head.*`; every transfer method trains it.
    pub head: Linear<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_dim();
        let s = (1.0 / d as f64).sqrt();
        BlockParams {
            norm1: LayerNormParams::new(d),
            attn: AttentionParams {
                wq: Linear::init(d, d, s, true, rng),
                wk: Linear::init(d, d, s, true, rng),
                wv: Linear::init(d, d, s, true, rng),
                wo: Linear::init(d, d, s, true, rng),
            },
            norm2: LayerNormParams::new(d),
            fc1: Linear::init(d, h, s, true, rng),
            fc2: Linear::init(h, d, (1.0 / h as f64).sqrt(), true, rng),
        }
    }
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_embed = Linear::init(
            cfg.patch_dim(),
            d,
            (1.0 / cfg.patch_dim() as f64).sqrt(),
            true,
            rng,
        );
        let pos_embed = Tensor::randn(&[cfg.num_tokens(), d], 0.1, rng);
        let cls_token = cfg.use_cls_token.then(|| Tensor::randn(&[d], 0.1, rng));
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams::init(cfg, rng))
            .collect();
        let head = Linear::init(d, cfg.n_classes, (1.0 / d as f64).sqrt(), true, rng);
        Ok(BackboneParams {
            config: cfg.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_norm: LayerNormParams::new(d),
            head,
        })
    }

    /// Replaces the head with a freshly initialized one for `n_classes`.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, n_classes: usize, rng: &mut R) {
        let d = self.config.dim;
        self.head = Linear::init(d, n_classes, (1.0 / d as f64).sqrt(), true, rng);
        self.config.n_classes = n_classes;
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t, T>) -> Result<BackboneVars<'t, T>> {
        self.bind_adapted(b, None, None)
    }

    /// Binds the parameters, merging optional per-layer low-rank deltas into
    /// `W_Q`/`W_V` (named `lora.{layer}.*`) and attaching optional per-layer
    /// prompt tokens (named `prompts.{layer}`).
    pub fn bind_adapted<'t>(
        &self,
        b: &mut Binder<'t, T>,
        lora: Option<&[QueryValueLora<T>]>,
        prompts: Option<&[Tensor<T>]>,
    ) -> Result<BackboneVars<'t, T>> {
        let layers = self.blocks.len();
        if lora.is_some_and(|l| l.len() != layers) || prompts.is_some_and(|p| p.len() != layers) {
            return Err(Error::Config(
                "adapter count differs from layer count".into(),
            ));
        }
        let patch_embed = self.patch_embed.bind(b, "patch_embed.");
        let pos_embed = b.leaf("pos_embed".into(), &self.pos_embed);
        let cls_token = self
            .cls_token
            .as_ref()
            .map(|c| b.leaf("cls_token".into(), c));
        let mut blocks = Vec::with_capacity(layers);
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}.");
            let norm1 = blk.norm1.bind(b, &format!("{p}norm1."));
            let mut wq = blk.attn.wq.bind(b, &format!("{p}attn.wq."));
            let wk = blk.attn.wk.bind(b, &format!("{p}attn.wk."));
            let mut wv = blk.attn.wv.bind(b, &format!("{p}attn.wv."));
            let wo = blk.attn.wo.bind(b, &format!("{p}attn.wo."));
            if let Some(l) = lora {
                wq.weight = l[i].query.apply(b, &format!("lora.{i}.wq."), wq.weight)?;
                wv.weight = l[i].value.apply(b, &format!("lora.{i}.wv."), wv.weight)?;
            }
            blocks.push(BlockVars {
                norm1,
                attn: AttentionVars { wq, wk, wv, wo },
                norm2: blk.norm2.bind(b, &format!("{p}norm2.")),
                fc1: blk.fc1.bind(b, &format!("{p}mlp.fc1.")),
                fc2: blk.fc2.bind(b, &format!("{p}mlp.fc2.")),
                prompt: prompts.map(|t| b.leaf(format!("prompts.{i}"), &t[i])),
            });
        }
        Ok(BackboneVars {
            config: self.config.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_norm: self.final_norm.bind(b, "final_norm."),
            head: self.head.bind(b, "head."),
        })
    }
}

impl<T: Scalar> Parameters<T> for BlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.norm1.visit(&format!("{prefix}norm1."), f);
        self.attn.wq.visit(&format!("{prefix}attn.wq."), f);
        self.attn.wk.visit(&format!("{prefix}attn.wk."), f);
        self.attn.wv.visit(&format!("{prefix}attn.wv."), f);
        self.attn.wo.visit(&format!("{prefix}attn.wo."), f);
        self.norm2.visit(&format!("{prefix}norm2."), f);
        self.fc1.visit(&format!("{prefix}mlp.fc1."), f);
        self.fc2.visit(&format!("{prefix}mlp.fc2."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_mut(&format!("{prefix}norm1."), f);
        self.attn.wq.visit_mut(&format!("{prefix}attn.wq."), f);
        self.attn.wk.visit_mut(&format!("{prefix}attn.wk."), f);
        self.attn.wv.visit_mut(&format!("{prefix}attn.wv."), f);
        self.attn.wo.visit_mut(&format!("{prefix}attn.wo."), f);
        self.norm2.visit_mut(&format!("{prefix}norm2."), f);
        self.fc1.visit_mut(&format!("{prefix}mlp.fc1."), f);
        self.fc2.visit_mut(&format!("{prefix}mlp.fc2."), f);
    }
}

impl<T: Scalar> Parameters<T> for BackboneParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.patch_embed.visit(&format!("{prefix}patch_embed."), f);
        f(format!("{prefix}pos_embed"), &self.pos_embed);
        if let Some(c) = &self.cls_token {
            f(format!("{prefix}cls_token"), c);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks.{i}."), f);
        }
        self.final_norm.visit(&format!("{prefix}final_norm."), f);
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.patch_embed
            .visit_mut(&format!("{prefix}patch_embed."), f);
        f(format!("{prefix}pos_embed"), &mut self.pos_embed);
        if let Some(c) = &mut self.cls_token {
            f(format!("{prefix}cls_token"), c);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}."), f);
        }
        self.final_norm
            .visit_mut(&format!("{prefix}final_norm."), f);
        self.head.visit_mut(&format!("{prefix}head."), f);
    }
}

/// Low-rank deltas on one layer's query and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryValueLora<T> {
    pub query: LowRankDelta<T>,
    pub value: LowRankDelta<T>,
}

impl<T: Scalar> Parameters<T> for QueryValueLora<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.query.visit(&format!("{prefix}wq."), f);
        self.value.visit(&format!("{prefix}wv."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.query.visit_mut(&format!("{prefix}wq."), f);
        self.value.visit_mut(&format!("{prefix}wv."), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t, T> {
    pub wq: LinearVars<'t, T>,
    pub wk: LinearVars<'t, T>,
    pub wv: LinearVars<'t, T>,
    pub wo: LinearVars<'t, T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars<'t, T> {
    pub norm1: LayerNormVars<'t, T>,
    pub attn: AttentionVars<'t, T>,
    pub norm2: LayerNormVars<'t, T>,
    pub fc1: LinearVars<'t, T>,
    pub fc2: LinearVars<'t, T>,
    pub prompt: Option<Var<'t, T>>,
}

/// Backbone parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct BackboneVars<'t, T> {
    pub config: BackboneConfig,
    pub patch_embed: LinearVars<'t, T>,
    pub pos_embed: Var<'t, T>,
    pub cls_token: Option<Var<'t, T>>,
    pub blocks: Vec<BlockVars<'t, T>>,
    pub final_norm: LayerNormVars<'t, T>,
    pub head: LinearVars<'t, T>,
}

/// Per-pass record of block inputs and attention maps.
#[derive(Clone, Debug)]
pub struct PassTrace<'t, T> {
    /// Index of the first executed layer.
    pub start: usize,
    /// `inputs[i]` is the input of layer `start + i`.
    pub inputs: Vec<Var<'t, T>>,
    /// Output of the last executed layer, before the final layernorm.
    pub output: Var<'t, T>,
    /// `[heads × N × N]` attention probabilities per executed layer.
    pub attention: Vec<Tensor<T>>,
}

impl<T> PassTrace<'_, T> {
    pub fn end(&self) -> usize {
        self.start + self.inputs.len()
    }
}

/// Splits a `[channels × side × side]` image into `[num_patches × patch_dim]`
/// rows. Patches are row-major over the grid; within a patch the layout is
/// channel, then row, then column.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let (c, s, p) = (cfg.channels, cfg.image_side, cfg.patch_side);
    if image.shape() != [c, s, s] {
        return Err(Error::dim(
            "patch_embed",
            format!("image shape {:?}, expected {:?}", image.shape(), [c, s, s]),
        ));
    }
    let g = cfg.grid();
    let px = image.data();
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * s + gy * p + y) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, cfg.patch_dim()], out)
}

/// Scaled dot-product multi-head self-attention with an optional top-down
/// input on the value path: `Q, K, V = W_Q x, W_K x, W_V (x + x_td)`.
///
/// `x` is the (already normalized) bottom-up input. Returns the projected
/// output and the `[heads × N × N]` attention map.
pub fn self_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &AttentionVars<'t, T>,
    x_td: Option<Var<'t, T>>,
    heads: usize,
) -> Result<(Var<'t, T>, Tensor<T>)> {
    let q = params.wq.apply(x)?;
    let k = params.wk.apply(x)?;
    let v_in = match x_td {
        Some(td) => {
            if td.shape() != x.shape() {
                return Err(Error::dim(
                    "self_attention",
                    format!("top-down {:?} vs input {:?}", td.shape(), x.shape()),
                ));
            }
            x.add(td)?
        }
        None => x,
    };
    let v = params.wv.apply(v_in)?;
    let (mixed, map) = multi_head_attention(q, k, v, heads)?;
    Ok((params.wo.apply(mixed)?, map))
}

impl<'t, T: Scalar> BackboneVars<'t, T> {
    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// `[N × d]` tokens from `[num_patches × patch_dim]` patch rows: linear
    /// projection, cls token prepended when enabled, positional embedding added.
    pub fn embed(&self, patches: Var<'t, T>) -> Result<Var<'t, T>> {
        let tokens = self.patch_embed.apply(patches)?;
        let tokens = match self.cls_token {
            Some(cls) => cls.concat_rows(tokens)?,
            None => tokens,
        };
        tokens.add(self.pos_embed)
    }

    /// One pre-norm block. Prompt tokens, when bound, are appended for the
    /// duration of the block and dropped from its output.
    pub fn block(
        &self,
        layer: usize,
        x: Var<'t, T>,
        x_td: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        let b = &self.blocks[layer];
        let n = x.shape()[0];
        let (x, x_td) = match b.prompt {
            Some(p) => {
                if x_td.is_some() {
                    return Err(Error::Config(
                        "prompt tokens cannot be combined with top-down input".into(),
                    ));
                }
                (x.concat_rows(p)?, None)
            }
            None => (x, x_td),
        };
        let h = b.norm1.apply(x)?;
        let (a, map) = self_attention(h, &b.attn, x_td, self.config.heads)?;
        let x = x.add(a)?;
        let h = b.norm2.apply(x)?;
        let m = b.fc2.apply(b.fc1.apply(h)?.gelu()?)?;
        let mut out = x.add(m)?;
        if b.prompt.is_some() {
            out = out.slice_rows(0, n)?;
        }
        Ok((out, map))
    }

    /// Runs layers in `range`, feeding `top_down[layer]` (indexed by absolute
    /// layer) into each attention layer when present.
    pub fn run_layers(
        &self,
        x: Var<'t, T>,
        range: Range<usize>,
        top_down: Option<&[Option<Var<'t, T>>]>,
    ) -> Result<PassTrace<'t, T>> {
        if range.end > self.layers() || range.start > range.end {
            return Err(Error::Config(format!(
                "layer range {range:?} outside 0..{}",
                self.layers()
            )));
        }
        if let Some(td) = top_down {
            if td.len() != self.layers() {
                return Err(Error::dim(
                    "forward_feedforward",
                    format!("{} top-down entries for {} layers", td.len(), self.layers()),
                ));
            }
        }
        let start = range.start;
        let mut inputs = Vec::with_capacity(range.len());
        let mut attention = Vec::with_capacity(range.len());
        let mut x = x;
        for layer in range {
            inputs.push(x);
            let td = top_down.and_then(|t| t[layer]);
            let (out, map) = self.block(layer, x, td)?;
            attention.push(map);
            x = out;
        }
        Ok(PassTrace {
            start,
            inputs,
            output: x,
            attention,
        })
    }

    /// Final layernorm over all tokens.
    pub fn normalize(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.final_norm.apply(x)
    }

    /// Class logits from normalized tokens: cls row when enabled, else the
    /// token mean.
    pub fn classify(&self, normed: Var<'t, T>) -> Result<Var<'t, T>> {
        let pooled = if self.config.use_cls_token {
            normed.row(0)?
        } else {
            normed.mean_rows()?
        };
        self.head.apply(pooled)
    }

    /// Full feedforward pass over embedded tokens.
    pub fn forward_feedforward(
        &self,
        tokens: Var<'t, T>,
        top_down: Option<&[Option<Var<'t, T>>]>,
    ) -> Result<(Var<'t, T>, PassTrace<'t, T>)> {
        let trace = self.run_layers(tokens, 0..self.layers(), top_down)?;
        let logits = self.classify(self.normalize(trace.output)?)?;
        Ok((logits, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize, cls: bool) -> BackboneConfig {
        BackboneConfig {
            image_side: 4,
            patch_side: 2,
            channels: 1,
            dim: 8,
            layers,
            heads: 2,
            n_classes: 3,
            use_cls_token: cls,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(1, true);
        c.patch_side = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(1, true);
        c.heads = 3;
        assert!(c.validate().is_err());
        assert_eq!(tiny(1, true).num_tokens(), 5);
        assert_eq!(tiny(1, false).num_tokens(), 4);
    }

    #[test]
    fn embed_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = tiny(1, false);
        cfg.dim = 4;
        cfg.heads = 1;
        let img = Tensor::<f64>::randn(&[1, 4, 4], 1.0, &mut rng);
        for cls in [false, true] {
            cfg.use_cls_token = cls;
            let p = BackboneParams::<f64>::init(&cfg, &mut rng).unwrap();
            let tape = Tape::new();
            let bb = p.bind(&mut Binder::new(&tape)).unwrap();
            let patches = tape.constant(&patchify(&img, &cfg).unwrap());
            let tokens = bb.embed(patches).unwrap();
            assert_eq!(tokens.shape(), vec![4 + usize::from(cls), 4]);
        }
    }

    #[test]
    fn patchify_layout() {
        let cfg = tiny(1, false);
        let img =
            Tensor::<f64>::from_f64(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>())
                .unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
        let bad = Tensor::<f64>::zeros(&[1, 4, 5]);
        assert!(patchify(&bad, &cfg).is_err());
    }

    #[test]
    fn wrong_top_down_length_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny(2, true);
        let p = BackboneParams::<f64>::init(&cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let bb = p.bind(&mut Binder::new(&tape)).unwrap();
        let x = tape.constant(&Tensor::randn(&[5, 8], 1.0, &mut rng));
        let td = vec![None];
        assert!(bb.forward_feedforward(x, Some(&td)).is_err());
    }
}
