//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"TTACKPT\0"
//! version  u32 (= 1)
//! count    u32
//! count x  { name_len u32, name utf8, group u8, rank u32, dims u64 x rank, data f64 x numel }
//! has_bank u8
//! [bank]   { dim u64, scoring u8, classes u64, classes x { id u64, count u64, mean f64 x dim } }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::params::{ModelCheckpoint, ParamEntry, ParamGroup};
use crate::error::{Error, Result};
use crate::proto::{ClassPrototype, PrototypeBank, Scoring};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TTACKPT\0";
const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        format_err("unexpected end of file")
    } else {
        Error::Io(e)
    }
}

pub fn write_checkpoint_to<W: Write>(
    mut w: W,
    checkpoint: &ModelCheckpoint,
    bank: Option<&PrototypeBank>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(checkpoint.entries().len() as u32)?;
    for e in checkpoint.entries() {
        w.write_u32::<LE>(e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        w.write_u8(e.group.code())?;
        w.write_u32::<LE>(e.value.rank() as u32)?;
        for &d in e.value.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        for &v in e.value.data() {
            w.write_f64::<LE>(v)?;
        }
    }
    match bank {
        None => w.write_u8(0)?,
        Some(bank) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(bank.dim() as u64)?;
            w.write_u8(match bank.scoring() {
                Scoring::Dot => 0,
                Scoring::Cosine => 1,
            })?;
            w.write_u64::<LE>(bank.len() as u64)?;
            for (id, p) in bank.iter() {
                w.write_u64::<LE>(id as u64)?;
                w.write_u64::<LE>(p.count as u64)?;
                for &v in &p.mean {
                    w.write_f64::<LE>(v)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint_from<R: Read>(mut r: R) -> Result<(ModelCheckpoint, Option<PrototypeBank>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(read_err)?;
    if &magic != MAGIC {
        return Err(format_err("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LE>().map_err(read_err)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LE>().map_err(read_err)? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.read_u32::<LE>().map_err(read_err)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(read_err)?;
        let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not utf-8"))?;
        let code = r.read_u8().map_err(read_err)?;
        let group = ParamGroup::from_code(code)
            .ok_or_else(|| format_err(format!("unknown group code {code}")))?;
        let rank = r.read_u32::<LE>().map_err(read_err)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(read_err))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LE>(&mut data).map_err(read_err)?;
        let value = Tensor::new(shape, data)?;
        entries.push(ParamEntry { name, group, value });
    }
    let bank = match r.read_u8().map_err(read_err)? {
        0 => None,
        1 => {
            let dim = r.read_u64::<LE>().map_err(read_err)? as usize;
            let scoring = match r.read_u8().map_err(read_err)? {
                0 => Scoring::Dot,
                1 => Scoring::Cosine,
                c => return Err(format_err(format!("unknown scoring code {c}"))),
            };
            let n = r.read_u64::<LE>().map_err(read_err)? as usize;
            let mut classes = BTreeMap::new();
            for _ in 0..n {
                let id = r.read_u64::<LE>().map_err(read_err)? as usize;
                let count = r.read_u64::<LE>().map_err(read_err)? as usize;
                let mut mean = vec![0.0; dim];
                r.read_f64_into::<LE>(&mut mean).map_err(read_err)?;
                classes.insert(id, ClassPrototype { mean, count });
            }
            let mut bank = PrototypeBank::with_scoring(dim, scoring);
            bank.extend(classes)?;
            Some(bank)
        }
        f => return Err(format_err(format!("bad bank flag {f}"))),
    };
    Ok((ModelCheckpoint::from_entries(entries), bank))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    checkpoint: &ModelCheckpoint,
    bank: Option<&PrototypeBank>,
) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint_to(BufWriter::new(file), checkpoint, bank)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelCheckpoint, Option<PrototypeBank>)> {
    let file = File::open(path)?;
    read_checkpoint_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_bank() -> PrototypeBank {
        let mut bank = PrototypeBank::new(3);
        let mut m = BTreeMap::new();
        m.insert(2, ClassPrototype { mean: vec![0.1, -0.0, 1e-300], count: 5 });
        m.insert(9, ClassPrototype { mean: vec![f64::MIN_POSITIVE, 3.5, -7.25], count: 1 });
        bank.extend(m).unwrap();
        bank
    }

    #[test]
    fn round_trip_is_exact() {
        let enc = Encoder::new(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ckpt = enc.params().snapshot();
        let bank = sample_bank();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &ckpt, Some(&bank)).unwrap();
        let (back, back_bank) = read_checkpoint_from(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let back_bank = back_bank.unwrap();
        for ((a, pa), (b, pb)) in bank.iter().zip(back_bank.iter()) {
            assert_eq!(a, b);
            assert_eq!(pa.count, pb.count);
            assert!(pa.mean.iter().zip(&pb.mean).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &ckpt, None).unwrap();
        let (_, none) = read_checkpoint_from(buf.as_slice()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e_star.ckpt");
        let enc = Encoder::new(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ckpt = enc.params().snapshot();
        save_checkpoint(&path, &ckpt, None).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(matches!(read_checkpoint_from(&b"NOTACKPT"[..]), Err(Error::Format(_))));
        let enc = Encoder::new(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &enc.params().snapshot(), None).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(read_checkpoint_from(buf.as_slice()), Err(Error::Format(_))));
    }
}
