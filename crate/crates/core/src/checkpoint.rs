//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TOAS"  u16 version
//! config  u32 image_side, patch_side, channels, dim, layers, heads,
//!         n_classes, mlp_ratio; u8 use_cls_token
//! u32 tensor count, then per tensor:
//!         u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 ndim,
//!         u32 dims[ndim], f32 payload
//! u32 metadata length, UTF-8 `key=value` lines
//! u64 checksum: first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::binio::{put_f32s, put_u16, put_u32, read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::topdown::{FeedbackVariant, TopDownParams};
use crate::training::{Group, MethodConfig, MethodKind, Model};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TOAS";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

/// First 8 bytes of SHA-256, read as a little-endian integer.
pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Checkpoint {
    /// Captures every tensor of `model` and records its method.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |n, t| {
            let mut t = t.clone();
            t.set_requires_grad(false);
            tensors.push((n, t));
        });
        let m = &model.method;
        let metadata = [
            ("method", m.kind.name().to_string()),
            ("variant", m.variant.name().to_string()),
            ("lora_rank", m.lora_rank.to_string()),
            ("prompt_count", m.prompt_count.to_string()),
            ("lite_rank", m.lite_rank.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Checkpoint {
            config: model.config().clone(),
            tensors,
            metadata,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Method recorded in the metadata.
    pub fn method(&self) -> Result<MethodConfig> {
        let get = |k: &str| {
            self.metadata
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint metadata `{k}` is not a number")))
        };
        Ok(MethodConfig {
            kind: get("method")?.parse()?,
            variant: get("variant")?.parse()?,
            lora_rank: num("lora_rank")?,
            prompt_count: num("prompt_count")?,
            lite_rank: num("lite_rank")?,
        })
    }

    /// Rebuilds the model recorded in the checkpoint.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let method = self.method()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = BackboneParams::init(&self.config, &mut rng)?;
        let mut model = Model::new(backbone, method, &mut rng)?;
        self.fill(&mut model, |_| true)?;
        Ok(model)
    }

    /// Backbone and head tensors only, whatever method produced them.
    pub fn backbone(&self) -> Result<BackboneParams<f32>> {
        let mut params = BackboneParams::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(&mut params, |_| true)?;
        Ok(params)
    }

    /// The top-down module of a toast or toast_lite checkpoint.
    pub fn topdown(&self) -> Result<TopDownParams<f32>> {
        let method = self.method()?;
        let mut model = self.to_model()?;
        match model.topdown.take() {
            Some(mut td) => {
                if method.kind == MethodKind::ToastLite {
                    // Fold the low-rank factors away so the module can be
                    // wrapped afresh.
                    for l in &mut td.feedback.layers {
                        if let Some(d) = l.f_lora.take() {
                            l.f.weight = l.f.weight.add(&d.delta()?)?;
                        }
                        if let Some(d) = l.g_lora.take() {
                            l.g.weight = l.g.weight.add(&d.delta()?)?;
                        }
                    }
                }
                let expected = FeedbackVariant::new(method.variant, self.config.layers)?;
                debug_assert_eq!(td.feedback.variant, expected);
                Ok(td)
            }
            None => Err(Error::Config(format!(
                "checkpoint holds a `{}` model without a top-down module",
                method.kind
            ))),
        }
    }

    /// Copies every stored tensor that `keep` accepts into `target`, which
    /// must contain each of them with the same shape.
    fn fill<P: Parameters<f32>>(&self, target: &mut P, keep: impl Fn(&str) -> bool) -> Result<()> {
        let mut wanted = HashSet::new();
        target.visit("", &mut |n, _| {
            wanted.insert(n);
        });
        let mut status = Ok(());
        target.visit_mut("", &mut |n, t| {
            if status.is_err() || !keep(&n) {
                return;
            }
            match self.tensor(&n) {
                Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
                Some(src) => {
                    status = Err(Error::Config(format!(
                        "tensor `{n}` has shape {:?} in the checkpoint, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => status = Err(Error::Config(format!("checkpoint lacks tensor `{n}`"))),
            }
        });
        status
    }

    /// Hash of the tensors in `group` (name, shape and payload bytes).
    pub fn group_digest(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| Group::of(n) == group) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u16(&mut out, CHECKPOINT_VERSION);
        for v in [
            c.image_side,
            c.patch_side,
            c.channels,
            c.dim,
            c.layers,
            c.heads,
            c.n_classes,
            c.mlp_ratio,
        ] {
            put_u32(&mut out, v)?;
        }
        out.push(u8::from(c.use_cls_token));
        put_u32(&mut out, self.tensors.len())?;
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate tensor name `{name}`")));
            }
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("tensor name `{name}` too long")))?;
            put_u16(&mut out, len);
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| Error::Config(format!("`{name}` has too many dims")))?;
            out.push(ndim);
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            put_f32s(&mut out, t.data());
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!(
                    "metadata entry `{k}` cannot be encoded"
                )));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "bad magic, expected TOAS"));
        }
        let version = r.u16("version")?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if version == 0 {
            return Err(r.error_at(4, "version 0 is not a valid checkpoint version"));
        }
        if bytes.len() < 8 + r.offset() {
            return Err(r.error("file too short for a checksum"));
        }
        let body = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body..].try_into().unwrap());
        let computed = checksum(&bytes[..body]);
        if stored != computed {
            return Err(Error::Corrupt { stored, computed });
        }
        let mut r = Reader::new(&bytes[..body]);
        r.take(6, "header")?;

        let mut f = [0usize; 8];
        for (v, what) in f.iter_mut().zip([
            "image_side",
            "patch_side",
            "channels",
            "dim",
            "layers",
            "heads",
            "n_classes",
            "mlp_ratio",
        ]) {
            *v = r.usize32(what)?;
        }
        let at = r.offset();
        let use_cls_token = match r.u8("use_cls_token")? {
            0 => false,
            1 => true,
            other => {
                return Err(r.error_at(at, format!("use_cls_token flag {other} is not 0 or 1")))
            }
        };
        let config = BackboneConfig {
            image_side: f[0],
            patch_side: f[1],
            channels: f[2],
            dim: f[3],
            layers: f[4],
            heads: f[5],
            n_classes: f[6],
            use_cls_token,
            mlp_ratio: f[7],
        };
        config
            .validate()
            .map_err(|e| r.error_at(6, e.to_string()))?;

        let count = r.usize32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.offset();
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error_at(at, "tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(r.error_at(at, format!("duplicate tensor `{name}`")));
            }
            let dt_at = r.offset();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(r.error_at(dt_at, format!("unsupported dtype code {dtype}")));
            }
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.usize32("dim")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error("tensor size overflows"))?;
            let data = r.f32s(n, "tensor payload")?;
            let t = Tensor::new(shape, data).map_err(|e| r.error_at(at, e.to_string()))?;
            tensors.push((name, t));
        }
        let len = r.usize32("metadata length")?;
        let at = r.offset();
        let text = std::str::from_utf8(r.take(len, "metadata")?)
            .map_err(|_| r.error_at(at, "metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error_at(at, format!("metadata line `{line}` lacks `=`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            config,
            tensors,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
