//! Parameter checkpoints.
//!
//! ```text
//! magic        8 bytes  "SMFIELD\0"
//! version      u32 LE
//! field count  u32 LE
//! per field:   name length u32 LE, name (UTF-8), value length u32 LE, value
//! parameters   param_count × f32 LE
//! ```
//!
//! Integer fields are u64 LE, `growth` is an f64 LE.

use std::io::{Read, Write};
use std::path::Path;

use super::{EncodingConfig, FieldLayout, FieldParams, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMFIELD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const INT_FIELDS: [&str; 6] = [
    "levels",
    "base_resolution",
    "features_per_level",
    "hidden_width",
    "out_channels",
    "param_count",
];

pub fn write_checkpoint<T: Real>(
    params: &FieldParams<T>,
    mut w: impl Write,
) -> std::io::Result<()> {
    let lay = params.layout();
    let ints = [
        lay.encoding.levels,
        lay.encoding.base_resolution,
        lay.encoding.features_per_level,
        lay.hidden_width,
        lay.out_channels,
        lay.param_count(),
    ];
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(INT_FIELDS.len() as u32 + 1).to_le_bytes())?;
    for (name, value) in INT_FIELDS.iter().zip(ints) {
        write_field(&mut w, name, &(value as u64).to_le_bytes())?;
    }
    write_field(&mut w, "growth", &lay.encoding.growth.to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for v in params.values() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn write_field(w: &mut impl Write, name: &str, value: &[u8]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(value.len() as u32).to_le_bytes())?;
    w.write_all(value)
}

pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<FieldParams<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let mut ints = [None::<u64>; 6];
    let mut growth = None;
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| bad("field name is not UTF-8"))?
            .to_string();
        let len = cur.u32()? as usize;
        let value = cur.take(len)?;
        if name == "growth" {
            let arr: [u8; 8] = value
                .try_into()
                .map_err(|_| bad("growth must be 8 bytes"))?;
            growth = Some(f64::from_le_bytes(arr));
        } else if let Some(i) = INT_FIELDS.iter().position(|f| *f == name) {
            let arr: [u8; 8] = value
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("{name} must be 8 bytes")))?;
            ints[i] = Some(u64::from_le_bytes(arr));
        }
        // unknown fields are skipped for forward compatibility
    }
    let get = |i: usize| {
        ints[i]
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("missing field {}", INT_FIELDS[i])))
    };
    let encoding = EncodingConfig {
        levels: get(0)?,
        base_resolution: get(1)?,
        growth: growth.ok_or_else(|| bad("missing field growth"))?,
        features_per_level: get(2)?,
    };
    let layout = FieldLayout::new(encoding, get(3)?, get(4)?)
        .map_err(|e| Error::Checkpoint(format!("invalid layout: {e}")))?;
    let count = get(5)?;
    if count != layout.param_count() {
        return Err(Error::Checkpoint(format!(
            "layout mismatch: descriptor implies {} parameters, header says {count}",
            layout.param_count()
        )));
    }
    let payload = cur.take(count * 4)?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| T::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    FieldParams::from_values(layout, values)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl<T: Real> FieldParams<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(self, &mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(seed: u64, hidden: usize, channels: usize) -> FieldParams<f32> {
        let enc = EncodingConfig {
            levels: 2,
            base_resolution: 3,
            growth: 1.5,
            features_per_level: 2,
        };
        FieldParams::init(FieldLayout::new(enc, hidden, channels).unwrap(), seed)
    }

    proptest! {
        #[test]
        fn f32_parameters_round_trip_exactly(seed in any::<u64>(), hidden in 1usize..6, channels in 1usize..4) {
            let p = params(seed, hidden, channels);
            let mut buf = Vec::new();
            write_checkpoint(&p, &mut buf).unwrap();
            let back: FieldParams<f32> = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back, p);
        }
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let p = params(1, 4, 3);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32>(&bad[..]).is_err());
        assert!(read_checkpoint::<f32>(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint::<f32>(&extra[..]).is_err());
    }

    #[test]
    fn inconsistent_param_count_is_a_layout_mismatch() {
        let p = params(1, 4, 3);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        // param_count is the sixth field; patch its value
        let needle = b"param_count";
        let at = buf.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len() + 4;
        buf[at] ^= 1;
        let err = read_checkpoint::<f32>(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("layout mismatch"), "{err}");
    }
}
