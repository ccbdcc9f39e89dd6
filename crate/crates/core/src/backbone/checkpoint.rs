//! Backbone checkpoint file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PPVT"
//! 4       4     format version (u32 LE, currently 1)
//! 8       32    image_height, image_width, channels, patch_size,
//!               embed_dim, heads, depth, mlp_hidden (u32 LE each)
//! 40      4     flags (u32 LE; bit 0 = frozen)
//! 44      8·n   parameters as f64 LE, in `BackboneParams::visit` order
//! 44+8n   8     checksum (u64 LE) = BackboneParams::checksum()
//! ```

use std::fs;
use std::path::Path;

use super::{BackboneConfig, BackboneParams};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PPVT";
pub const VERSION: u32 = 1;
const FLAG_FROZEN: u32 = 1;

pub fn encode(params: &BackboneParams) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let c = &params.config;
    for v in [
        c.image_height,
        c.image_width,
        c.channels,
        c.patch_size,
        c.embed_dim,
        c.heads,
        c.depth,
        c.mlp_hidden(),
    ] {
        w.count(v);
    }
    w.u32(if params.is_frozen() { FLAG_FROZEN } else { 0 });
    params.visit(|s| w.f64s(s));
    w.u64(params.checksum());
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<BackboneParams> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(0, format!("bad backbone magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported backbone format version {version}")));
    }
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = r.count("config")?;
    }
    let [image_height, image_width, channels, patch_size, embed_dim, heads, depth, mlp_hidden] =
        fields;
    if embed_dim == 0 {
        return Err(Error::parse(24, "embed_dim is zero"));
    }
    let config = BackboneConfig {
        image_height,
        image_width,
        channels,
        patch_size,
        embed_dim,
        heads,
        depth,
        mlp_ratio: mlp_hidden as f64 / embed_dim as f64,
    };
    config
        .validate()
        .map_err(|e| Error::parse(8, format!("invalid config in header: {e}")))?;
    if config.mlp_hidden() != mlp_hidden {
        return Err(Error::parse(36, "mlp_hidden does not round-trip"));
    }
    let flags = r.u32("flags")?;
    let mut params = BackboneParams::zeros(config)?;
    let mut failed = None;
    params.visit_mut(|s| {
        if failed.is_none() {
            if let Err(e) = r.f64s_into(s, "parameters") {
                failed = Some(e);
            }
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    let at = r.offset() as u64;
    let stored = r.u64("checksum")?;
    if r.remaining() != 0 {
        return Err(Error::parse(r.offset() as u64, "trailing bytes after checksum"));
    }
    params.set_frozen(flags & FLAG_FROZEN != 0);
    let actual = params.checksum();
    if stored != actual {
        return Err(Error::parse(
            at,
            format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"),
        ));
    }
    Ok(params)
}

pub fn save(params: &BackboneParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<BackboneParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneParams {
        let cfg = BackboneConfig {
            embed_dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2.0,
            ..Default::default()
        };
        let mut p = BackboneParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        p.freeze();
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = tiny();
        let q = decode(&encode(&p)).unwrap();
        assert_eq!(p, q);
        assert!(q.is_frozen());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tiny());
        assert_eq!(&bytes[0..4], b"PPVT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // embed_dim is the fifth config field
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 8);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode(&tiny());
        bytes[100] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let bytes = encode(&tiny());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Parse { .. })
        ));
    }
}
