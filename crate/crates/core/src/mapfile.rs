//! Binary surfel map files.
//!
//! Layout, little-endian: 8-byte magic `SURFMAP\0`, `u32` version, `u64`
//! surfel count, then per surfel 13 `f32` values (center xyz, rotation
//! quaternion wxyz, scales uv, opacity, color rgb), and finally the CRC-32 of
//! all preceding bytes as `u32`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2};

use crate::error::{Error, Result};
use crate::geom::{Surfel, SurfelMap, Vec3};

pub const MAGIC: [u8; 8] = *b"SURFMAP\0";
pub const VERSION: u32 = 1;
const FLOATS: usize = 13;
const HEADER: usize = 8 + 4 + 8;

fn record(s: &Surfel) -> [f32; FLOATS] {
    let q = s.rotation.quaternion();
    [
        s.center.x, s.center.y, s.center.z, q.w, q.i, q.j, q.k, s.scale.x, s.scale.y, s.opacity, s.color.x,
        s.color.y, s.color.z,
    ]
    .map(|v| v as f32)
}

fn surfel(v: &[f32]) -> Surfel {
    let v: Vec<f64> = v.iter().map(|x| *x as f64).collect();
    let mut s = Surfel {
        center: Vec3::new(v[0], v[1], v[2]),
        rotation: UnitQuaternion::from_quaternion(Quaternion::new(v[3], v[4], v[5], v[6])),
        scale: Vector2::new(v[7], v[8]),
        opacity: v[9],
        color: Vec3::new(v[10], v[11], v[12]),
    };
    s.clamp();
    s
}

pub fn encode(map: &SurfelMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + map.len() * FLOATS * 4 + 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for s in &map.surfels {
        for v in record(s) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode(bytes: &[u8]) -> Result<SurfelMap> {
    if bytes.len() < HEADER + 4 {
        return Err(Error::MapFile(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::MapFile("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::MapFile(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &body[HEADER..];
    if Some(payload.len()) != count.checked_mul(FLOATS * 4) {
        return Err(Error::MapFile(format!("{count} surfels need {} payload bytes, found {}", count * FLOATS * 4, payload.len())));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(Error::MapFile("non-finite value".into()));
    }
    Ok(SurfelMap::from_surfels(floats.chunks_exact(FLOATS).map(surfel).collect()))
}

pub fn write(mut out: impl Write, map: &SurfelMap) -> Result<()> {
    out.write_all(&encode(map))?;
    Ok(())
}

pub fn read(mut input: impl Read) -> Result<SurfelMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: &Path, map: &SurfelMap) -> Result<()> {
    std::fs::write(path, encode(map))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SurfelMap> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::frame_from_normal;

    fn sample() -> SurfelMap {
        let mut map = SurfelMap::new();
        for i in 0..5 {
            let f = i as f64;
            map.push(Surfel {
                center: Vec3::new(0.1 * f, -0.2, 2.0 + f),
                rotation: frame_from_normal(&Vec3::new(0.1 * f, 0.3, -1.0)),
                scale: Vector2::new(0.01 + 0.001 * f, 0.02),
                opacity: 0.2 + 0.1 * f,
                color: Vec3::new(0.1, 0.5, 0.05 * f),
            });
        }
        map
    }

    #[test]
    fn round_trip_to_single_precision() {
        let map = sample();
        let back = decode(&encode(&map)).unwrap();
        assert_eq!(back.len(), map.len());
        for (a, b) in map.surfels.iter().zip(&back.surfels) {
            assert!((a.center - b.center).norm() < 1e-6);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-6);
            assert!((a.scale - b.scale).norm() < 1e-8);
            assert!((a.opacity - b.opacity).abs() < 1e-7);
            assert!((a.color - b.color).norm() < 1e-7);
        }
        assert_eq!(encode(&back), encode(&map));
    }

    #[test]
    fn layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], b"SURFMAP\0");
        assert_eq!(bytes.len(), 20 + 5 * 13 * 4 + 4);
        assert_eq!(decode(&encode(&SurfelMap::new())).unwrap().len(), 0);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample());
        bytes[40] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(Error::Checksum { .. })));
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(Error::Checksum { .. })));
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::MapFile(_))));
        assert!(matches!(decode(&[1, 2, 3]), Err(Error::MapFile(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.bin");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap().len(), 5);
        assert!(load(&dir.path().join("missing.bin")).is_err());
    }
}
