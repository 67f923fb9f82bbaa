//! Binary checkpoint files: magic, key=value text header, raw payloads.
//!
//! ```text
//! DCNCKPT1
//! version=1
//! precision=32
//! step=1200
//! tensor=detect.backbone.conv1.weight 7,7,3,16 0
//! ...
//! <blank line>
//! little-endian payloads in header order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DCNCKPT1";
pub const VERSION: u32 = 1;

/// Metadata lines plus named tensors, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, CheckpointError> {
        let raw = self
            .get(key)
            .ok_or_else(|| CheckpointError::CorruptHeader(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::CorruptHeader(format!("bad value {raw:?} for {key}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut t = t.clone();
        t.take_grad();
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("version={VERSION}\nprecision={}\n", T::BITS);
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        let width = T::BITS as usize / 8;
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor={name} {} {offset}\n", shape.join(",")));
            offset += t.len() * width;
        }
        header.push('\n');
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| CheckpointError::CorruptHeader("header is not terminated by a blank line".into()))?;
        let header = std::str::from_utf8(&rest[..end])
            .map_err(|_| CheckpointError::CorruptHeader("header is not UTF-8".into()))?;
        let payload = &rest[end + 2..];

        let mut version = None;
        let mut precision = None;
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::CorruptHeader(format!("line {line:?} is not key=value")))?;
            match k {
                "version" => version = Some(parse_num::<u32>(k, v)?),
                "precision" => precision = Some(parse_num::<u32>(k, v)?),
                "tensor" => entries.push(parse_entry(v)?),
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let version = version.ok_or_else(|| CheckpointError::CorruptHeader("missing version".into()))?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let precision = precision.ok_or_else(|| CheckpointError::CorruptHeader("missing precision".into()))?;
        if precision != T::BITS {
            return Err(CheckpointError::Precision {
                found: precision,
                expected: T::BITS,
            });
        }

        let width = T::BITS as usize / 8;
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0;
        for (name, shape, offset) in entries {
            if offset != expected_offset {
                return Err(CheckpointError::CorruptHeader(format!(
                    "tensor {name} at offset {offset}, expected {expected_offset}"
                )));
            }
            let len: usize = shape.iter().product();
            let needed = offset + len * width;
            if payload.len() < needed {
                return Err(CheckpointError::Truncated {
                    needed,
                    found: payload.len(),
                });
            }
            let data = payload[offset..needed].chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::CorruptHeader(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
            expected_offset = needed;
        }
        if payload.len() != expected_offset {
            return Err(CheckpointError::CorruptHeader(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V, CheckpointError> {
    v.parse()
        .map_err(|_| CheckpointError::CorruptHeader(format!("bad {key} value {v:?}")))
}

fn parse_entry(v: &str) -> Result<(String, Vec<usize>, usize), CheckpointError> {
    let bad = || CheckpointError::CorruptHeader(format!("bad tensor entry {v:?}"));
    let mut parts = v.split(' ');
    let (Some(name), Some(shape), Some(offset), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    let shape = shape
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    let offset = offset.parse().map_err(|_| bad())?;
    Ok((name.to_string(), shape, offset))
}

/// Reads only the precision line of a checkpoint file.
pub fn peek_precision(path: &Path) -> Result<u32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let text = String::from_utf8_lossy(&bytes[MAGIC.len()..bytes.len().min(4096)]);
    text.lines()
        .take_while(|l| !l.is_empty())
        .find_map(|l| l.strip_prefix("precision="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::CorruptHeader("missing precision".into()).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut c = Checkpoint::default();
        c.set("step", 12);
        c.set("model", "dcn");
        c.push("a", &Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        c.push("b", &Tensor::new(&[1], vec![7.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("step"), Some("12"));
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::<f32>::from_bytes(&bad), Err(CheckpointError::BadMagic));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let text = String::from_utf8_lossy(&bytes).replace("version=1", "version=9");
        assert_eq!(
            Checkpoint::<f32>::from_bytes(text.as_bytes()),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        );
        let header_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..header_end]),
            Err(CheckpointError::CorruptHeader(_))
        ));
        let garbled = String::from_utf8_lossy(&bytes).replace("tensor=b 1 24", "tensor=b one 24");
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(garbled.as_bytes()),
            Err(CheckpointError::CorruptHeader(_))
        ));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(CheckpointError::Precision { found: 32, expected: 64 })
        ));
    }
}
