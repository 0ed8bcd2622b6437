use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::{Error, Real, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VRWK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes the configuration and every parameter as little-endian `f32`.
pub fn write_checkpoint<T: Real>(mut out: impl Write, model: &Model<T>) -> Result<()> {
    let config = serde_json::to_vec(&model.config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, e) in model.store.entries() {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.iter() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption(format!("file ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn read_checkpoint<T: Real>(mut input: impl Read) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len, "config")?)
        .map_err(|e| Error::Format(format!("config: {e}")))?;
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(n, "tensor name")?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = c.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Corruption("tensor size overflow".into()))?,
            "tensor payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| {
                T::of(f64::from(f32::from_le_bytes(
                    b.try_into().expect("4 bytes"),
                )))
            })
            .collect();
        tensors.push((name, shape, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Model::from_tensors(config, tensors)
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), model)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let back: Model<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.store.entries().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .value
                .iter()
                .zip(b.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint::<f32>(bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            read_checkpoint::<f32>(bad.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_checkpoint::<f32>(&buf[..buf.len() - 3]),
            Err(Error::Corruption(_))
        ));
        // A config that disagrees with the tensor table.
        let mut other = model.clone();
        other.config.d_ffn = 48;
        let mut bad = Vec::new();
        write_checkpoint(
            &mut bad,
            &Model::<f32> {
                config: other.config,
                ..model.clone()
            },
        )
        .unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(bad.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
