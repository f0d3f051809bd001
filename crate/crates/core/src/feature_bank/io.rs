//! Little-endian bank file codec.

use std::path::Path;

use super::CoarseFeatureBank;
use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 8] = b"CCADBNK1";
pub const BANK_VERSION: u32 = 1;

pub fn encode_bank(bank: &CoarseFeatureBank) -> Result<Vec<u8>> {
    if bank.vectors.len() != bank.xi * bank.d || bank.source_ids.len() != bank.xi {
        return Err(Error::Shape("bank vectors/ids disagree with xi and d".into()));
    }
    let fp = bank.extractor_fingerprint.as_bytes();
    let fp_len =
        u16::try_from(fp.len()).map_err(|_| Error::param("extractor_fingerprint", "longer than 65535 bytes"))?;
    let xi = u32::try_from(bank.xi).map_err(|_| Error::param("xi", "exceeds u32"))?;
    let d = u32::try_from(bank.d).map_err(|_| Error::param("d", "exceeds u32"))?;

    let mut out = Vec::with_capacity(34 + fp.len() + bank.vectors.len() * 4 + bank.xi * 8);
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&xi.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&bank.source_rows.to_le_bytes());
    out.extend_from_slice(&fp_len.to_le_bytes());
    out.extend_from_slice(fp);
    for v in &bank.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in &bank.source_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Malformed(format!("{what}: size overflow")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|e| Error::Malformed(format!("{what}: {e}")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_bank(bytes: &[u8]) -> Result<CoarseFeatureBank> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8.min(bytes.len()), "magic")?;
    if magic != BANK_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(BANK_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != BANK_VERSION {
        return Err(Error::VersionMismatch {
            expected: BANK_VERSION,
            found: version,
        });
    }
    let xi = r.u32("xi")? as usize;
    let d = r.u32("d")? as usize;
    let source_rows = r.u64("source row count")?;
    let fp_len = r.u16("fingerprint length")? as usize;
    let extractor_fingerprint = r.utf8(fp_len, "fingerprint")?;
    let n = xi
        .checked_mul(d)
        .ok_or_else(|| Error::Malformed("xi*d overflows".into()))?;
    let vectors = r.f32s(n, "bank vectors")?;
    let mut source_ids = Vec::with_capacity(xi);
    for _ in 0..xi {
        source_ids.push(r.u64("source ids")?);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(CoarseFeatureBank {
        vectors,
        xi,
        d,
        source_ids,
        source_rows,
        extractor_fingerprint,
    })
}

pub fn save_bank(bank: &CoarseFeatureBank, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_bank(bank)?)?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<CoarseFeatureBank> {
    decode_bank(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> CoarseFeatureBank {
        CoarseFeatureBank {
            vectors: vec![1.5, -2.0, 0.25, f32::MIN_POSITIVE, 3.0, -0.0],
            xi: 3,
            d: 2,
            source_ids: vec![7, 0, u64::MAX],
            source_rows: 12,
            extractor_fingerprint: "seeded-conv/ü".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = bank();
        let back = decode_bank(&encode_bank(&b).unwrap()).unwrap();
        assert_eq!(back, b);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.vectors), bits(&b.vectors));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bank");
        save_bank(&bank(), &p).unwrap();
        assert_eq!(load_bank(&p).unwrap(), bank());
    }

    #[test]
    fn distinct_decode_errors() {
        let good = encode_bank(&bank()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] ^= 1;
        assert!(matches!(decode_bank(&bad_magic), Err(Error::BadMagic { .. })));
        let mut bad_version = good.clone();
        bad_version[8] = 2;
        assert!(matches!(
            decode_bank(&bad_version),
            Err(Error::VersionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(decode_bank(&good[..good.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(decode_bank(&good[..4]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn empty_bank_round_trips() {
        let b = CoarseFeatureBank::empty(5, "x");
        assert_eq!(decode_bank(&encode_bank(&b).unwrap()).unwrap(), b);
    }
}
