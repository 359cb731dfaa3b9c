use crate::codec::ConfigName;
use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"PCCC";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

/// Fixed 16-byte stream header. The coding tables are not part of the
/// stream; a stream can only be decoded with the checkpoint that wrote it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub config: ConfigName,
    /// Latent length `N`.
    pub latent: u16,
    /// Number of points of the coded cloud.
    pub points: u32,
    pub payload_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn new(config: ConfigName, latent: usize, points: usize, payload: Vec<u8>) -> Result<Self> {
        let too_big = |what: &str| Error::format(format!("{what} does not fit the stream header"));
        Ok(Bitstream {
            header: Header {
                version: STREAM_VERSION,
                config,
                latent: u16::try_from(latent).map_err(|_| too_big("latent size"))?,
                points: u32::try_from(points).map_err(|_| too_big("point count"))?,
                payload_len: u32::try_from(payload.len()).map_err(|_| too_big("payload length"))?,
            },
            payload,
        })
    }

    /// Rate of the coded latent: payload bits, header excluded.
    pub fn payload_bits(&self) -> usize {
        self.payload.len() * 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.push(h.version);
        out.push(h.config.id());
        out.extend_from_slice(&h.latent.to_le_bytes());
        out.extend_from_slice(&h.points.to_le_bytes());
        out.extend_from_slice(&h.payload_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(bytes.len()));
        }
        if &bytes[0..4] != STREAM_MAGIC {
            return Err(Error::format("not a point cloud stream (bad magic)"));
        }
        let version = bytes[4];
        if version != STREAM_VERSION {
            return Err(Error::format(format!(
                "stream version {version} is not supported (expected {STREAM_VERSION})"
            )));
        }
        let config = ConfigName::from_id(bytes[5])?;
        let latent = u16::from_le_bytes([bytes[6], bytes[7]]);
        let points = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let payload_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < payload_len as usize {
            return Err(Error::Truncated(bytes.len()));
        }
        if payload.len() > payload_len as usize {
            return Err(Error::format(format!(
                "{} trailing bytes after the payload",
                payload.len() - payload_len as usize
            )));
        }
        Ok(Bitstream {
            header: Header {
                version,
                config,
                latent,
                points,
                payload_len,
            },
            payload: payload.to_vec(),
        })
    }
}
