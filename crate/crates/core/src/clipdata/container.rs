//! `CLPB` clip container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CLPB"
//! 4       4     version (u32 LE, currently 1)
//! 8       16    channels, frames, height, width (u32 LE each)
//! 24      4     metadata length in bytes (u32 LE)
//! 28      n     metadata, UTF-8 `key=value` lines
//! 28+n    4*N   pixels, f32 LE, [C, T, H, W] row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ClipBundle, ClipGeometry, ClipMeta};
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"CLPB";
pub const CLIP_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, field: &str, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                field: field.to_string(),
                needed: n,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(field, 1)?[0])
    }

    pub(crate) fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(field, 2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn encode_kv(pairs: &[(&str, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect::<String>()
}

pub(crate) fn decode_kv(field: &str, bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::format(field, format!("not UTF-8: {e}")))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(field, format!("line {line:?} is not key=value")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(format!("{field}.{k}"), "duplicate key"));
        }
    }
    Ok(out)
}

pub(crate) fn kv_field<T: std::str::FromStr>(
    block: &str,
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    let field = format!("{block}.{key}");
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format(&field, "missing"))?;
    raw.parse()
        .map_err(|_| Error::format(&field, format!("cannot parse {raw:?}")))
}

pub(crate) fn dim_u32(field: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(field, format!("{v} exceeds u32")))
}

impl ClipBundle {
    fn meta_block(&self) -> String {
        encode_kv(&[
            ("id", self.meta.id.clone()),
            ("species", self.meta.species.to_string()),
            ("condition", self.meta.condition.to_string()),
            ("seed", self.meta.seed.to_string()),
            ("fps", self.meta.fps.to_string()),
        ])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = self.meta_block();
        let g = self.geometry();
        let mut out = Vec::with_capacity(28 + meta.len() + 4 * g.numel());
        out.extend_from_slice(CLIP_MAGIC);
        out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        for (name, d) in ["channels", "frames", "height", "width"].iter().zip(g.dims()) {
            out.extend_from_slice(&dim_u32(name, d)?.to_le_bytes());
        }
        out.extend_from_slice(&dim_u32("meta_len", meta.len())?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for v in self.frames() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r.take("magic", 4)?;
        if magic != CLIP_MAGIC {
            return Err(Error::format(
                "magic",
                format!("expected {CLIP_MAGIC:?}, found {magic:?}"),
            ));
        }
        let version = r.u32("version")?;
        if version != CLIP_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let mut dims = [0usize; 4];
        for (name, d) in ["channels", "frames", "height", "width"]
            .iter()
            .zip(dims.iter_mut())
        {
            *d = r.u32(name)? as usize;
            if *d == 0 {
                return Err(Error::format(*name, "dimension is zero"));
            }
        }
        let geometry = ClipGeometry {
            channels: dims[0],
            frames: dims[1],
            height: dims[2],
            width: dims[3],
        };
        let meta_len = r.u32("meta_len")? as usize;
        let map = decode_kv("meta", r.take("meta", meta_len)?)?;
        let meta = ClipMeta {
            id: kv_field("meta", &map, "id")?,
            species: kv_field("meta", &map, "species")?,
            condition: kv_field("meta", &map, "condition")?,
            seed: kv_field("meta", &map, "seed")?,
            fps: kv_field("meta", &map, "fps")?,
        };
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("payload", "dimensions overflow"))?;
        let payload = r.take("payload", count)?;
        if r.remaining() != 0 {
            return Err(Error::format(
                "payload",
                format!(
                    "dimensions {:?} imply {count} payload bytes but {} trail the header",
                    geometry.dims(),
                    count + r.remaining()
                ),
            ));
        }
        let frames: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = frames.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(
                "payload",
                format!("pixel {i} = {} outside [0, 1]", frames[i]),
            ));
        }
        ClipBundle::new(meta, geometry, frames)
            .map_err(|e| Error::format("meta", e.to_string()))
    }

    /// Byte offset of the pixel payload within the encoded container.
    pub fn payload_offset(&self) -> usize {
        28 + self.meta_block().len()
    }
}

pub fn save_clip(clip: &ClipBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, clip.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<ClipBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ClipBundle::from_bytes(&bytes)
}
