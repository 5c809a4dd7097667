//! Container: magic `SLIC`, version, config id, λ index, true height and
//! width (u16), then the hyper-latent and latent payloads, each prefixed by
//! a u32 length. All integers big-endian.

use crate::error::BitstreamError;

pub const MAGIC: &[u8; 4] = b"SLIC";
pub const VERSION: u8 = 1;
/// Fixed bytes outside the two payloads.
pub const OVERHEAD: usize = 4 + 1 + 1 + 1 + 2 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub config_id: u8,
    pub lambda_index: u8,
    pub height: u16,
    pub width: u16,
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl Bitstream {
    pub fn new(config_id: u8, lambda_index: u8, height: usize, width: usize, z: Vec<u8>, y: Vec<u8>) -> Result<Self, BitstreamError> {
        if height == 0 || width == 0 || height > u16::MAX as usize || width > u16::MAX as usize {
            return Err(BitstreamError::ImageTooLarge(height, width));
        }
        Ok(Self {
            config_id,
            lambda_index,
            height: height as u16,
            width: width as u16,
            z,
            y,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(OVERHEAD + self.z.len() + self.y.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.config_id);
        out.push(self.lambda_index);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&(self.z.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&(self.y.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.y);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, BitstreamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(BitstreamError::UnsupportedVersion(version));
        }
        let config_id = r.take(1, "config id")?[0];
        let lambda_index = r.take(1, "lambda index")?[0];
        let height = u16::from_be_bytes(r.take(2, "height")?.try_into().unwrap());
        let width = u16::from_be_bytes(r.take(2, "width")?.try_into().unwrap());
        let zl = u32::from_be_bytes(r.take(4, "z length")?.try_into().unwrap()) as usize;
        let z = r.take(zl, "z payload")?.to_vec();
        let yl = u32::from_be_bytes(r.take(4, "y length")?.try_into().unwrap()) as usize;
        let y = r.take(yl, "y payload")?.to_vec();
        if r.pos != bytes.len() {
            return Err(BitstreamError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            config_id,
            lambda_index,
            height,
            width,
            z,
            y,
        })
    }

    pub fn len(&self) -> usize {
        OVERHEAD + self.z.len() + self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bpp(&self) -> f64 {
        8.0 * self.len() as f64 / (self.height as f64 * self.width as f64)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], BitstreamError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(BitstreamError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream::new(0xA5, 3, 300, 17, vec![1, 2, 3], vec![9; 10]).unwrap()
    }

    #[test]
    fn layout_is_big_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"SLIC");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0xA5);
        assert_eq!(b[6], 3);
        assert_eq!(&b[7..11], &[0x01, 0x2C, 0x00, 0x11]);
        assert_eq!(&b[11..15], &[0, 0, 0, 3]);
        assert_eq!(b.len(), OVERHEAD + 13);
        assert_eq!(Bitstream::parse(&b).unwrap(), sample());
    }

    #[test]
    fn malformed_streams() {
        let b = sample().to_bytes();
        for cut in 0..b.len() {
            assert!(matches!(Bitstream::parse(&b[..cut]), Err(BitstreamError::Truncated(_)) | Err(BitstreamError::BadMagic)));
        }
        let mut v = b.clone();
        v[4] = 2;
        assert_eq!(Bitstream::parse(&v), Err(BitstreamError::UnsupportedVersion(2)));
        let mut v = b.clone();
        v[0] = b'X';
        assert_eq!(Bitstream::parse(&v), Err(BitstreamError::BadMagic));
        let mut v = b;
        v.push(0);
        assert_eq!(Bitstream::parse(&v), Err(BitstreamError::TrailingBytes(1)));
        assert!(Bitstream::new(0, 0, 70_000, 1, vec![], vec![]).is_err());
    }
}
