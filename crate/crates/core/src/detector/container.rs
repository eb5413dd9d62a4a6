//! The MSDM model container: versioned binary with a JSON header block and
//! named little-endian f32 weight tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::arch::ArchConfig;
use crate::detector::model::DetectorModel;
use crate::grad::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MSDM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    feature_frozen: bool,
}

pub fn model_to_bytes(model: &DetectorModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch().clone(),
        feature_frozen: model.feature_frozen(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors: Vec<(&str, &Tensor)> = model.weights().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated container: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad magic, expected \"MSDM\"".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    header.arch.validate()?;
    let n_tensors = r.u32()? as usize;
    let mut weights = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("tensor name is not UTF-8".to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after container payload",
            bytes.len() - r.at
        )));
    }
    let model = DetectorModel {
        arch: header.arch,
        weights,
        feature_frozen: header.feature_frozen,
    };
    verify_weight_set(&model)?;
    Ok(model)
}

/// The loaded tensor set must exactly match what the architecture implies.
fn verify_weight_set(model: &DetectorModel) -> Result<()> {
    let rebuilt = crate::detector::build_detector(model.arch(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = rebuilt
        .weights()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let got: Vec<(String, Vec<usize>)> = model
        .weights()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    if expected != got {
        return Err(Error::format(
            "container weights do not match the declared architecture".to_string(),
        ));
    }
    Ok(())
}

pub fn save_model(model: &DetectorModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_detector, ArchConfig};

    #[test]
    fn round_trip_preserves_forward_outputs_bitwise() {
        let model = build_detector(&ArchConfig::compact(), 7).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.weight_hash(), model.weight_hash());
        let input = Tensor::from_fn(vec![128, 128, 3], |i| ((i % 31) as f32) / 31.0);
        assert_eq!(
            back.forward(&input).unwrap(),
            model.forward(&input).unwrap()
        );
    }

    #[test]
    fn truncated_container_is_rejected() {
        let model = build_detector(&ArchConfig::compact(), 8).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let err = model_from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let model = build_detector(&ArchConfig::compact(), 9).unwrap();
        let mut bytes = model_to_bytes(&model).unwrap();
        bytes[5] = 9;
        assert!(model_from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
        bytes[0] = b'X';
        assert!(model_from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn wide_variant_round_trips_with_doubled_params() {
        let mut arch = ArchConfig::compact();
        arch.width_multiplier = std::f64::consts::SQRT_2;
        let model = build_detector(&arch, 10).unwrap();
        let back = model_from_bytes(&model_to_bytes(&model).unwrap()).unwrap();
        let base = ArchConfig::compact().param_count().unwrap() as f64;
        let ratio = back.param_count() as f64 / base;
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }
}
