//! Little-endian byte encoding shared by the corpus, parameter and
//! checkpoint files. Every container ends in a CRC32 of the bytes before it.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const PARAMS_MAGIC: &[u8; 8] = b"AURPARAM";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    /// Length-prefixed (u32) UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    /// Checks the trailing CRC32 and returns a reader over the payload.
    pub fn checked(buf: &'a [u8], what: &'static str) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Truncated(what));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self::new(body, what))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(self.what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(self.what));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Truncated(self.what))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid UTF-8 string", self.what)))
    }

    /// Reads a magic tag and a version, rejecting mismatches.
    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Format(format!("{}: bad magic", self.what)));
        }
        let found = self.u32()?;
        if found != version {
            return Err(Error::Version {
                found,
                expected: version,
            });
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )))
        }
    }
}

/// Appends a parameter block: count, then (name, ndim, dims, f64 data) per
/// parameter in store order.
pub fn write_params(w: &mut Writer, store: &ParamStore) {
    w.u64(store.len() as u64);
    for (_, p) in store.iter() {
        w.str(&p.name);
        let shape = p.tensor.shape();
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u64(d as u64);
        }
        w.f64s(p.tensor.data());
    }
}

pub fn read_params(r: &mut Reader<'_>) -> Result<ParamStore> {
    let count = r.usize()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
        let data = r.f64s(len)?;
        store
            .add(&name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(store)
}

/// Standalone parameter file: magic, version, parameter block, CRC32.
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(PARAMS_MAGIC);
    w.u32(PARAMS_VERSION);
    write_params(&mut w, store);
    w.finish()
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::checked(bytes, "parameter file")?;
    r.header(PARAMS_MAGIC, PARAMS_VERSION)?;
    let store = read_params(&mut r)?;
    r.expect_end()?;
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode_params(store))?;
    Ok(())
}

pub fn load_params(path: &std::path::Path) -> Result<ParamStore> {
    decode_params(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_rows(&[vec![1.0, -0.0], vec![f64::MIN_POSITIVE, 3.5e300]]).unwrap())
            .unwrap();
        s.add("b", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        s.add("c", Tensor::scalar(-7.25)).unwrap();
        s
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let s = sample_store();
        let back = decode_params(&encode_params(&s)).unwrap();
        assert!(back.names().eq(s.names()));
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn corrupt_inputs_are_distinguished() {
        let bytes = encode_params(&sample_store());
        assert!(matches!(decode_params(&bytes[..3]), Err(Error::Truncated(_))));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(decode_params(&flipped), Err(Error::Checksum { .. })));

        let mut w = Writer::new();
        w.bytes(b"NOTMAGIC");
        w.u32(PARAMS_VERSION);
        assert!(matches!(decode_params(&w.finish()), Err(Error::Format(_))));

        let mut w = Writer::new();
        w.bytes(PARAMS_MAGIC);
        w.u32(99);
        assert!(matches!(
            decode_params(&w.finish()),
            Err(Error::Version { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn truncated_payload_with_valid_crc() {
        let mut w = Writer::new();
        w.bytes(PARAMS_MAGIC);
        w.u32(PARAMS_VERSION);
        w.u64(1);
        w.str("x");
        w.u32(1);
        w.u64(4);
        w.f64s(&[1.0, 2.0]);
        assert!(matches!(decode_params(&w.finish()), Err(Error::Truncated(_))));
    }
}
