//! The MSC1 cube container.
//!
//! Layout: magic `MSC1`, then H, W, B as little-endian u32, then H·W·B
//! little-endian f32 values, row-major with bands fastest. Round trips are
//! bit-exact.

use std::path::Path;

use crate::cubes::DataCube;
use crate::spectra::NUM_BANDS;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MSC1";
const HEADER_LEN: usize = 16;

pub fn cube_to_bytes(cube: &DataCube) -> Vec<u8> {
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * b * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    for v in cube.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn cube_from_bytes(bytes: &[u8]) -> Result<DataCube> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"MSC1\"",
            &bytes[0..4]
        )));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, b) = (word(4), word(8), word(12));
    if b != NUM_BANDS {
        return Err(Error::format(format!(
            "cube has {b} bands, expected {NUM_BANDS}"
        )));
    }
    let expected = HEADER_LEN + h * w * b * 4;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "truncated payload: {} bytes, expected {expected} for {h}x{w}x{b}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(h * w * b);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format(format!("cube value {v} outside [0,1]")));
        }
        values.push(v);
    }
    DataCube::from_values(h, w, values)
}

pub fn write_cube(cube: &DataCube, path: &Path) -> Result<()> {
    std::fs::write(path, cube_to_bytes(cube))?;
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<DataCube> {
    cube_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};
    use rand::Rng;

    fn random_cube(seed: u64, h: usize, w: usize) -> DataCube {
        let mut r = rng::stream(seed, Domain::Scene, 0);
        let values = (0..h * w * NUM_BANDS).map(|_| r.random_range(0.0..=1.0)).collect();
        DataCube::from_values(h, w, values).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cube = random_cube(1, 5, 7);
        let bytes = cube_to_bytes(&cube);
        let back = cube_from_bytes(&bytes).unwrap();
        assert_eq!(back.data(), cube.data());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let cube = random_cube(2, 2, 2);
        let mut bytes = cube_to_bytes(&cube);
        bytes[0..4].copy_from_slice(b"XXXX");
        let err = cube_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncation_is_rejected() {
        let cube = random_cube(3, 4, 4);
        let bytes = cube_to_bytes(&cube);
        let err = cube_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        let cube = random_cube(4, 2, 2);
        let mut bytes = cube_to_bytes(&cube);
        let bad = 2.5f32.to_le_bytes();
        bytes[16..20].copy_from_slice(&bad);
        let err = cube_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("outside [0,1]"));
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        // 16-byte header + H*W*B little-endian f32 payload.
        let cube = DataCube::from_values(4, 4, vec![0.0; 4 * 4 * NUM_BANDS]).unwrap();
        let bytes = cube_to_bytes(&cube);
        assert_eq!(bytes.len(), 16 + 4 * 4 * NUM_BANDS * 4);
    }

    #[test]
    fn file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.msc1");
        let cube = random_cube(5, 6, 3);
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back.data(), cube.data());
    }
}
