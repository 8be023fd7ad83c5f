//! Raw float map files: `b"PMAP"`, then `width`, `height`, `channels` as
//! little-endian `u32`, then `f32` LE values. Multi-channel maps are stored
//! interleaved (`(y·width + x)·channels + c`).

use crate::maps::ScalarMap;
use std::io;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PMAP";

#[derive(Debug, thiserror::Error)]
pub enum FloatMapError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a float map: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatMapFile {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl FloatMapFile {
    pub fn from_map(map: &ScalarMap<f32>) -> Self {
        Self {
            width: map.width() as u32,
            height: map.height() as u32,
            channels: 1,
            data: map.values().to_vec(),
        }
    }

    /// First channel as a map.
    pub fn to_map(&self) -> ScalarMap<f32> {
        let c = self.channels as usize;
        ScalarMap::new(
            self.width as usize,
            self.height as usize,
            self.data.iter().step_by(c.max(1)).copied().collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FloatMapError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(FloatMapError::Format("missing PMAP magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (width, height, channels) = (word(0), word(1), word(2));
        let n = width as usize * height as usize * channels as usize;
        if bytes.len() - 16 != 4 * n {
            return Err(FloatMapError::Format(format!(
                "payload is {} bytes, header implies {}",
                bytes.len() - 16,
                4 * n
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), FloatMapError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| FloatMapError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, FloatMapError> {
        let bytes = std::fs::read(path).map_err(|source| FloatMapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
