//! Checkpoint bytes: `"AACL"`, u32 version, u32-length-prefixed config text,
//! u32 record count, then per record a u32-prefixed UTF-8 name, u32 rank,
//! u32 extents and the little-endian f64 payload. All integers little-endian.

use alloc::string::String;
use alloc::vec::Vec;

use super::config::ModelConfig;
use super::net::AacLiteNet;
use crate::error::{bail, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AACL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode_checkpoint(net: &AacLiteNet) -> Vec<u8> {
    let store = net.store();
    let config = net.config().to_text();
    let payload: usize = store.entries().iter().map(|e| e.value.numel() * 8).sum();
    let mut out = Vec::with_capacity(payload + config.len() + 64 * store.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, store.len());
    for e in store.entries() {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.value.rank());
        for &d in e.value.shape() {
            put_u32(&mut out, d);
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(
                Format,
                "truncated checkpoint while reading {} at byte {}",
                what,
                self.pos
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| crate::Error::Format(alloc::format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AacLiteNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(crate::Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = ModelConfig::from_text(&r.string("config")?)?;
    let template = AacLiteNet::build(&config)?;
    let count = r.u32("record count")? as usize;
    if count != template.store().len() {
        bail!(
            Config,
            "checkpoint has {} parameters, config implies {}",
            count,
            template.store().len()
        );
    }
    let mut store = ParamStore::new();
    for e in template.store().entries() {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        if name != e.name || shape != e.value.shape() {
            bail!(
                Config,
                "record {} {:?} disagrees with config ({} {:?})",
                name,
                shape,
                e.name,
                e.value.shape()
            );
        }
        let n = e.value.numel();
        let raw = r.take(n * 8, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(&name, Tensor::from_vec(&shape, data)?, e.trainable);
    }
    if r.pos != bytes.len() {
        bail!(
            Format,
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        );
    }
    AacLiteNet::from_store(&config, store)
}
