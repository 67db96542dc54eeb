//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CGT1"
//! record* until end of file:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rank      u32
//!   extents   rank x u64
//!   payload   product(extents) x f64
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::Parameter;

pub const MAGIC: &[u8; 4] = b"CGT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::Checkpoint("missing CGT1 magic".into()));
    }
    let mut cur = Cursor { buf, pos: 4 };
    let mut records = Vec::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
        let payload = cur.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(Record { name, shape, values });
    }
    Ok(records)
}

pub fn records_of(params: &[Parameter]) -> Vec<Record> {
    params
        .iter()
        .map(|p| Record {
            name: p.name().to_string(),
            shape: p.shape(),
            values: p.to_vec(),
        })
        .collect()
}

pub fn save(path: &Path, params: &[Parameter]) -> Result<()> {
    let bytes = encode(&records_of(params));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Loads values into `params` by name. Every parameter must be present with
/// a matching shape; extra records are an error too.
pub fn load_into(records: &[Record], params: &[Parameter]) -> Result<()> {
    let mut by_name: HashMap<&str, &Record> = HashMap::new();
    for r in records {
        if by_name.insert(r.name.as_str(), r).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{}`", r.name)));
        }
    }
    for p in params {
        let r = by_name
            .remove(p.name())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name())))?;
        if r.shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}`: checkpoint shape {:?}, model shape {:?}",
                p.name(),
                r.shape,
                p.shape()
            )));
        }
        p.set_values(r.values.clone())?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, ParamBuilder};
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let bytes = encode(&[Record {
            name: "ab".into(),
            shape: vec![2],
            values: vec![1.0, -0.5],
        }]);
        let mut expect = b"CGT1".to_vec();
        expect.extend_from_slice(&[2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"CGT0").is_err());
        let mut bytes = encode(&[Record {
            name: "w".into(),
            shape: vec![3],
            values: vec![1.0, 2.0, 3.0],
        }]);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let pb = ParamBuilder::new(0);
        let a = pb.param("a", &[2], Init::Zeros).unwrap();
        let recs = vec![Record {
            name: "a".into(),
            shape: vec![2],
            values: vec![5.0, 6.0],
        }];
        load_into(&recs, std::slice::from_ref(&a)).unwrap();
        assert_eq!(a.to_vec(), vec![5.0, 6.0]);
        let wrong = vec![Record {
            name: "a".into(),
            shape: vec![1, 2],
            values: vec![5.0, 6.0],
        }];
        assert!(load_into(&wrong, std::slice::from_ref(&a)).is_err());
        assert!(load_into(&[], &[a]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            recs in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(0usize..4, 0..3)).prop_flat_map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    (Just(name), Just(shape), prop::collection::vec(-1e6f64..1e6, n))
                }),
                0..4,
            )
        ) {
            let recs: Vec<Record> = recs
                .into_iter()
                .map(|(name, shape, values)| Record { name, shape, values })
                .collect();
            prop_assert_eq!(decode(&encode(&recs)).unwrap(), recs);
        }
    }
}
