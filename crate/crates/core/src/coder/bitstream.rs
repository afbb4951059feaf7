//! Container for one compressed image: a fixed-width little-endian
//! header plus length-prefixed payload segments. Truncation and
//! trailing garbage are caught by the recorded lengths; payload
//! corruption within a correct length is out of scope.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ETFB";
pub const VERSION: u8 = 1;

/// Entropy decoding schedule for the main latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    /// One segment, positions decoded in raster order.
    Serial,
    /// Two segments: checkerboard anchors, then the rest.
    Parallel,
}

impl CodecMode {
    fn to_byte(self) -> u8 {
        match self {
            CodecMode::Serial => 0,
            CodecMode::Parallel => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CodecMode::Serial),
            1 => Ok(CodecMode::Parallel),
            _ => Err(Error::Bitstream(format!("unknown mode byte {b}"))),
        }
    }

    /// Hyper segment plus one (serial) or two (parallel) latent segments.
    pub fn segment_count(self) -> usize {
        match self {
            CodecMode::Serial => 2,
            CodecMode::Parallel => 3,
        }
    }
}

/// Parsed compressed-image container. `segments[0]` holds the
/// hyper-latents; the remainder holds the main latents per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub mode: CodecMode,
    /// First 8 bytes of the checkpoint digest; decoding requires a match.
    pub model_hash: u64,
    /// Rate-distortion weight the model was trained at, for display.
    pub lambda: f32,
    /// Source image extent before padding.
    pub height: u32,
    pub width: u32,
    /// Symbol bounds of the main latents, then the hyper-latents.
    pub y_range: (i32, i32),
    pub z_range: (i32, i32),
    pub segments: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        assert_eq!(
            self.segments.len(),
            self.mode.segment_count(),
            "segment count does not match mode"
        );
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.mode.to_byte());
        out.extend_from_slice(&[0u8; 2]);
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        for v in [self.y_range.0, self.y_range.1, self.z_range.0, self.z_range.1] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for seg in &self.segments {
            out.extend_from_slice(&(seg.len() as u32).to_le_bytes());
        }
        for seg in &self.segments {
            out.extend_from_slice(seg);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.take_u8()?;
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let mode = CodecMode::from_byte(r.take_u8()?)?;
        r.take(2)?;
        let model_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let lambda = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let height = r.take_u32()?;
        let width = r.take_u32()?;
        if height == 0 || width == 0 {
            return Err(Error::Bitstream("zero image extent".into()));
        }
        let y_min = r.take_i32()?;
        let y_max = r.take_i32()?;
        let z_min = r.take_i32()?;
        let z_max = r.take_i32()?;
        if y_min > y_max || z_min > z_max {
            return Err(Error::Bitstream("inverted symbol range".into()));
        }
        let lens: Vec<usize> = (0..mode.segment_count())
            .map(|_| r.take_u32().map(|l| l as usize))
            .collect::<Result<_>>()?;
        let mut segments = Vec::with_capacity(lens.len());
        for len in lens {
            segments.push(r.take(len)?.to_vec());
        }
        if r.pos != data.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after payload",
                data.len() - r.pos
            )));
        }
        Ok(Bitstream {
            mode,
            model_hash,
            lambda,
            height,
            width,
            y_range: (y_min, y_max),
            z_range: (z_min, z_max),
            segments,
        })
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Bitstream(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn take_i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mode: CodecMode) -> Bitstream {
        let segments = match mode {
            CodecMode::Serial => vec![vec![1, 2, 3], vec![4, 5, 6, 7]],
            CodecMode::Parallel => vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]],
        };
        Bitstream {
            mode,
            model_hash: 0xDEAD_BEEF_0123_4567,
            lambda: 0.02,
            height: 37,
            width: 41,
            y_range: (-12, 14),
            z_range: (-3, 3),
            segments,
        }
    }

    #[test]
    fn roundtrip_both_modes() {
        for mode in [CodecMode::Serial, CodecMode::Parallel] {
            let bs = sample(mode);
            let bytes = bs.to_bytes();
            assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
        }
    }

    #[test]
    fn truncation_is_an_error_at_every_length() {
        let bytes = sample(CodecMode::Parallel).to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                Bitstream::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut} parsed"
            );
        }
    }

    #[test]
    fn trailing_garbage_is_an_error() {
        let mut bytes = sample(CodecMode::Serial).to_bytes();
        bytes.push(0);
        let err = Bitstream::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut bytes = sample(CodecMode::Serial).to_bytes();
        bytes[0] = b'X';
        assert!(Bitstream::from_bytes(&bytes).is_err());
        let mut bytes = sample(CodecMode::Serial).to_bytes();
        bytes[4] = 9;
        assert!(Bitstream::from_bytes(&bytes).is_err());
    }

    #[test]
    fn empty_segments_allowed() {
        let mut bs = sample(CodecMode::Serial);
        bs.segments = vec![vec![], vec![]];
        let bytes = bs.to_bytes();
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
    }
}
