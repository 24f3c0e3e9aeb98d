//! Little-endian helpers shared by the binary file formats.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncated {
    pub offset: usize,
    pub wanted: usize,
}

impl fmt::Display for Truncated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unexpected end of data at byte {} (needed {} more)", self.offset, self.wanted)
    }
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
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
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32s(&mut self, vs: &[u32]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.u32(v);
        }
    }

    pub fn u8s(&mut self, vs: &[u8]) {
        self.u64(vs.len() as u64);
        self.bytes(vs);
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f32(v);
        }
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

pub type ReadResult<T> = std::result::Result<T, Truncated>;

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> ReadResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(Truncated { offset: self.pos, wanted: n - self.remaining() });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> ReadResult<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> ReadResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> ReadResult<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> ReadResult<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> ReadResult<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> ReadResult<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn len_prefix(&mut self, elem: usize) -> ReadResult<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.remaining() {
            return Err(Truncated { offset: self.pos, wanted: n.saturating_mul(elem) - self.remaining() });
        }
        Ok(n)
    }

    pub fn u32s(&mut self) -> ReadResult<Vec<u32>> {
        let n = self.len_prefix(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn u8s(&mut self) -> ReadResult<Vec<u8>> {
        let n = self.len_prefix(1)?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn f32s(&mut self) -> ReadResult<Vec<f32>> {
        let n = self.len_prefix(4)?;
        (0..n).map(|_| self.f32()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut w = Writer::new();
        w.u32(7);
        w.u64(u64::MAX);
        w.f32(-1.5);
        w.u32s(&[1, 2, 3]);
        w.u8s(b"hi");
        let mut r = Reader::new(&w.buf);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u64().unwrap(), u64::MAX);
        assert_eq!(r.f32().unwrap(), -1.5);
        assert_eq!(r.u32s().unwrap(), vec![1, 2, 3]);
        assert_eq!(r.u8s().unwrap(), b"hi".to_vec());
        assert!(r.is_at_end());
        assert!(r.u8().is_err());
    }

    #[test]
    fn huge_length_prefix_is_rejected() {
        let mut w = Writer::new();
        w.u64(1 << 40);
        assert!(Reader::new(&w.buf).u32s().is_err());
    }
}
