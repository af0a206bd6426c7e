//! `CKPT` checkpoint container.
//!
//! ```text
//! magic "CKPT" | version u32
//! config_len u32 | config block (UTF-8 key=value lines)
//! prov_len u32   | provenance block (UTF-8 key=value lines)
//! count u32
//! count x { name_len u16 | name | ndim u8 | dims u32 x ndim | offset u64 | numel u64 }
//! blobs: f32 LE, offsets in elements from the start of this section
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::params::expected_shapes;
use super::{init_params, ModelConfig, ModelParams, StackConfig};
use crate::clipdata::container::{decode_kv, dim_u32, encode_kv, kv_field, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
    LinearProbe,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::LinearProbe => "linear_probe",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "linear_probe" => Ok(Stage::LinearProbe),
            other => Err(Error::config("stage", format!("unknown stage {other:?}"))),
        }
    }
}

/// How a checkpoint was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub stage: Stage,
    /// Pretraining data configuration label, or `none`.
    pub dataset: String,
    pub mask_ratio: f64,
    pub steps: u64,
    pub seed: u64,
}

impl Provenance {
    pub fn init(seed: u64) -> Self {
        Self {
            stage: Stage::Init,
            dataset: "none".into(),
            mask_ratio: 0.0,
            steps: 0,
            seed,
        }
    }

    fn block(&self) -> String {
        encode_kv(&[
            ("stage", self.stage.to_string()),
            ("dataset", self.dataset.clone()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    fn parse(map: &BTreeMap<String, String>) -> Result<Self> {
        let stage: String = kv_field("provenance", map, "stage")?;
        Ok(Self {
            stage: stage
                .parse()
                .map_err(|_| Error::format("provenance.stage", format!("unknown stage {stage:?}")))?,
            dataset: kv_field("provenance", map, "dataset")?,
            mask_ratio: kv_field("provenance", map, "mask_ratio")?,
            steps: kv_field("provenance", map, "steps")?,
            seed: kv_field("provenance", map, "seed")?,
        })
    }
}

/// Model parameters plus provenance. Values are stored as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub provenance: Provenance,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn config_block(c: &ModelConfig) -> String {
    encode_kv(&[
        ("frame_shape", join(&c.frame_shape)),
        ("tubelet", join(&c.tubelet)),
        ("encoder", join(&[c.encoder.dim, c.encoder.depth, c.encoder.heads])),
        ("decoder", join(&[c.decoder.dim, c.decoder.depth, c.decoder.heads])),
        ("mlp_ratio", c.mlp_ratio.to_string()),
        ("ln_eps", c.ln_eps.to_string()),
    ])
}

fn list<const N: usize>(map: &BTreeMap<String, String>, key: &str) -> Result<[usize; N]> {
    let raw: String = kv_field("config", map, key)?;
    let parts: Vec<usize> = raw
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(format!("config.{key}"), format!("cannot parse {raw:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::format(format!("config.{key}"), format!("expected {N} values")))
}

fn parse_config(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let stack = |key: &str| -> Result<StackConfig> {
        let [dim, depth, heads] = list::<3>(map, key)?;
        Ok(StackConfig { dim, depth, heads })
    };
    let c = ModelConfig {
        frame_shape: list(map, "frame_shape")?,
        tubelet: list(map, "tubelet")?,
        encoder: stack("encoder")?,
        decoder: stack("decoder")?,
        mlp_ratio: kv_field("config", map, "mlp_ratio")?,
        ln_eps: kv_field("config", map, "ln_eps")?,
    };
    c.validate().map_err(|e| Error::format("config", e.to_string()))?;
    Ok(c)
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, provenance: Provenance) -> Self {
        Self { params, provenance }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = config_block(self.config());
        let prov = self.provenance.block();
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for block in [&config, &prov] {
            out.extend_from_slice(&dim_u32("block_len", block.len())?.to_le_bytes());
            out.extend_from_slice(block.as_bytes());
        }
        out.extend_from_slice(&dim_u32("count", self.params.len())?.to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::format("index.name", format!("{name} is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&dim_u32("index.dims", d)?.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            offset += t.numel() as u64;
        }
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r.take("magic", 4)?;
        if magic != CKPT_MAGIC {
            return Err(Error::format("magic", format!("expected {CKPT_MAGIC:?}, found {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let n = r.u32("config_len")? as usize;
        let config = parse_config(&decode_kv("config", r.take("config", n)?)?)?;
        let n = r.u32("provenance_len")? as usize;
        let provenance = Provenance::parse(&decode_kv("provenance", r.take("provenance", n)?)?)?;

        let expected: HashMap<String, Vec<usize>> = expected_shapes(&config)?.into_iter().collect();
        let count = r.u32("count")? as usize;
        let mut entries = Vec::with_capacity(count.min(expected.len()));
        for _ in 0..count {
            let len = r.u16("index.name_len")? as usize;
            let name = std::str::from_utf8(r.take("index.name", len)?)
                .map_err(|_| Error::format("index.name", "not UTF-8"))?
                .to_string();
            let ndim = r.u8("index.ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("index.dims")? as usize);
            }
            let offset = r.u64("index.offset")?;
            let numel = r.u64("index.numel")?;
            let field = format!("index.{name}");
            match expected.get(&name) {
                None => return Err(Error::format(field, "unknown parameter")),
                Some(s) if *s != shape => {
                    return Err(Error::format(field, format!("shape {shape:?}, expected {s:?}")))
                }
                _ => {}
            }
            if numel != shape.iter().product::<usize>() as u64 {
                return Err(Error::format(field, format!("numel {numel} disagrees with {shape:?}")));
            }
            entries.push((name, shape, offset, numel));
        }
        let blobs = r.take("blobs", r.remaining())?;
        let total: u64 = entries.iter().map(|e| e.3).sum();
        if blobs.len() as u64 != total * 4 {
            let needed = (total * 4) as usize;
            if (blobs.len()) < needed {
                return Err(Error::Truncated {
                    field: "blobs".into(),
                    needed,
                    available: blobs.len(),
                });
            }
            return Err(Error::format("blobs", format!("{} trailing bytes", blobs.len() - needed)));
        }
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset, numel) in entries {
            let end = offset.checked_add(numel).filter(|&e| e <= total).ok_or_else(|| {
                Error::format(format!("index.{name}"), format!("offset {offset} out of range"))
            })?;
            let bytes = &blobs[offset as usize * 4..end as usize * 4];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("blobs.{name}"), "non-finite value"));
            }
            tensors.push(Tensor::new(shape, data)?.with_requires_grad(true));
            names.push(name);
        }
        let params = ModelParams::from_parts(config, names, tensors)
            .map_err(|e| Error::format("index", e.to_string()))?;
        Ok(Self { params, provenance })
    }

    /// Fine-tuning parameters for `model`: encoder and token projection copied
    /// from this checkpoint, decoder dropped, CLS embedding freshly drawn
    /// from `seed`, classifier zeroed. `self` is left untouched.
    pub fn transfer(&self, model: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
        let mismatches = self.config().encoder_mismatches(model);
        if !mismatches.is_empty() {
            return Err(Error::Compatibility { fields: mismatches });
        }
        let mut fresh: ModelParams<f32> = init_params(model, seed)?;
        fresh.remove_prefix("decoder.");
        for (name, t) in self.params.iter() {
            if name.starts_with("patch_embed.") || name.starts_with("encoder.") {
                fresh.set(name, t)?;
            }
        }
        Ok(fresh)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
