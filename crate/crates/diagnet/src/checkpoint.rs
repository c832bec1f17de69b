//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DGNT"  u16 version  u32 matrix_count
//! matrix_count × { u32 name_len, name, u32 rows, u32 cols, rows·cols × f64 }
//! u32 config_len, config as key=value text
//! u64 epoch
//! u64 rng_state
//! ```

use std::path::Path;

use diagnet_core::trainer::{Checkpoint, TrainConfig};
use diagnet_core::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"DGNT";
pub const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let named = ck.named_matrices();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, named.len());
    for (name, m) in &named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows());
        put_u32(&mut out, m.cols());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let config = ck.config.to_kv();
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(ck.epoch as u64).to_le_bytes());
    out.extend_from_slice(&ck.rng_state.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!(
                "truncated checkpoint: need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> std::result::Result<String, String> {
        let len = self.u32(what)?;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format!("{what} is not valid UTF-8"))
    }
}

fn parse(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!(
            "bad magic {magic:02x?}: not a checkpoint file or unsupported version"
        ));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format!(
            "unsupported checkpoint version {version}, this build reads version {VERSION}"
        ));
    }
    let count = r.u32("matrix count")?;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = r.text("matrix name")?;
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format!("matrix {name} is too large"))?;
        let raw = r.take(len, &format!("matrix {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((
            name,
            Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?,
        ));
    }
    let config_text = r.text("config")?;
    let config = TrainConfig::from_kv(&config_text).map_err(|e| e.to_string())?;
    let epoch = r.u64("epoch")? as usize;
    let rng_state = r.u64("rng state")?;
    if r.pos != buf.len() {
        return Err(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        ));
    }
    Checkpoint::from_parts(config, named, epoch, rng_state).map_err(|e| e.to_string())
}

pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Checkpoint> {
    parse(buf).map_err(|msg| CliError::format(origin, msg))
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ck)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diagnet_core::trainer::Optimizer;

    fn sample(optimizer: Optimizer) -> Checkpoint {
        let cfg = TrainConfig {
            optimizer,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut ck = Checkpoint::init(&cfg).unwrap();
        ck.epoch = 7;
        ck.rng_state = 0xdead_beef_0123_4567;
        ck
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            let ck = sample(opt);
            let back = from_bytes(&to_bytes(&ck), Path::new("mem")).unwrap();
            for (a, b) in ck.params().iter().zip(back.params()) {
                assert_eq!(bits(a), bits(b));
            }
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn corrupted_magic_is_a_version_error() {
        let mut buf = to_bytes(&sample(Optimizer::Sgd));
        buf[0] = b'X';
        let err = from_bytes(&buf, Path::new("f")).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut buf = to_bytes(&sample(Optimizer::Sgd));
        buf[4] = 9;
        let err = from_bytes(&buf, Path::new("f")).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version 9"), "{err}");
    }

    #[test]
    fn every_truncation_is_rejected() {
        let buf = to_bytes(&sample(Optimizer::Sgd));
        for cut in (0..buf.len()).step_by(97).chain([buf.len() - 1]) {
            let err = from_bytes(&buf[..cut], Path::new("f"))
                .unwrap_err()
                .to_string();
            assert!(
                err.contains("truncated") || err.contains("config"),
                "{cut}: {err}"
            );
        }
        let mut long = buf.clone();
        long.push(0);
        assert!(from_bytes(&long, Path::new("f")).is_err());
    }
}
