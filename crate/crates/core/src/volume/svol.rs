//! `.svol` container: 8-byte magic, little-endian u32 header length, UTF-8
//! JSON header, then little-endian f32 voxels in x-fastest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{units, Dims, MaskVolume, Volume3D, VoxelSize};
use crate::error::{Error, Result};

pub const SVOL_MAGIC: &[u8; 8] = b"SVOL0001";
pub const KIND_SCALAR: &str = "scalar";
pub const KIND_MASK: &str = "mask";

const PREAMBLE: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvolHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub units: String,
    pub kind: String,
}

pub fn encode_svol(header: &SvolHeader, payload: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|source| Error::Json {
        context: "svol header".into(),
        source,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * payload.len());
    out.extend_from_slice(SVOL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_header(bytes: &[u8]) -> Result<(SvolHeader, usize)> {
    if bytes.len() < SVOL_MAGIC.len() || &bytes[..8] != SVOL_MAGIC {
        return Err(Error::format(0, "bad magic, expected SVOL0001"));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(8, "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = PREAMBLE + hlen;
    if bytes.len() < end {
        return Err(Error::format(
            PREAMBLE as u64,
            format!("truncated header: need {hlen} bytes"),
        ));
    }
    let header: SvolHeader = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| Error::format(PREAMBLE as u64, format!("malformed header json: {e}")))?;
    if header.dims.contains(&0) {
        return Err(Error::format(
            PREAMBLE as u64,
            "header dims must be positive",
        ));
    }
    if header
        .voxel_size_mm
        .iter()
        .any(|v| !v.is_finite() || *v <= 0.0)
    {
        return Err(Error::format(
            PREAMBLE as u64,
            "header voxel size must be positive",
        ));
    }
    if header.kind != KIND_SCALAR && header.kind != KIND_MASK {
        return Err(Error::format(
            PREAMBLE as u64,
            format!("unknown kind {:?}", header.kind),
        ));
    }
    Ok((header, end))
}

pub fn decode_svol(bytes: &[u8]) -> Result<(SvolHeader, Vec<f32>)> {
    let (header, start) = decode_header(bytes)?;
    let n: usize = header.dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            start as u64,
            format!(
                "payload size mismatch: header dims {:?} need {} values, found {} bytes",
                header.dims,
                n,
                payload.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                (start + 4 * i) as u64,
                "non-finite voxel value",
            ));
        }
        values.push(v);
    }
    Ok((header, values))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_svol(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let header = SvolHeader {
        dims: vol.dims().as_array(),
        voxel_size_mm: vol.voxel_size(),
        units: vol.units().to_owned(),
        kind: KIND_SCALAR.to_owned(),
    };
    let payload: Vec<f32> = vol.data().iter().map(|&v| v as f32).collect();
    write_bytes(path.as_ref(), &encode_svol(&header, &payload)?)
}

pub fn write_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    let header = SvolHeader {
        dims: mask.dims().as_array(),
        voxel_size_mm: mask.voxel_size(),
        units: units::DIMENSIONLESS.to_owned(),
        kind: KIND_MASK.to_owned(),
    };
    let payload: Vec<f32> = mask
        .data()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    write_bytes(path.as_ref(), &encode_svol(&header, &payload)?)
}

pub fn read_svol_header(path: impl AsRef<Path>) -> Result<SvolHeader> {
    let bytes = read_bytes(path.as_ref())?;
    decode_header(&bytes).map(|(h, _)| h)
}

/// Reads any `.svol` file as a scalar volume (masks come back as 0/1).
pub fn read_svol(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let (header, values) = decode_svol(&read_bytes(path)?)?;
    let vs: VoxelSize = header.voxel_size_mm;
    Volume3D::from_data(
        Dims::from(header.dims),
        vs,
        values.into_iter().map(f64::from).collect(),
    )
    .map(|v| v.with_units(header.units))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    let (header, values) = decode_svol(&read_bytes(path)?)?;
    if header.kind != KIND_MASK {
        return Err(Error::format(
            PREAMBLE as u64,
            format!("expected kind \"mask\", found {:?}", header.kind),
        ));
    }
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        match v {
            x if x == 0.0 => data.push(false),
            x if x == 1.0 => data.push(true),
            other => {
                return Err(Error::format(
                    PREAMBLE as u64,
                    format!("mask value {other} is not 0 or 1"),
                ))
            }
        }
    }
    MaskVolume::from_data(Dims::from(header.dims), header.voxel_size_mm, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(dims: [usize; 3]) -> SvolHeader {
        SvolHeader {
            dims,
            voxel_size_mm: [0.9, 0.9, 1.0],
            units: "ppm".into(),
            kind: KIND_SCALAR.into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svol");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = Dims::cube(16);
        let data: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(-1.0f32..1.0) as f64)
            .collect();
        let vol = Volume3D::from_data(dims, [0.9, 0.9, 1.0], data)
            .unwrap()
            .with_units(units::PER_SECOND);
        write_svol(&vol, &path).unwrap();
        let back = read_svol(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        assert_eq!(back.voxel_size(), vol.voxel_size());
        assert_eq!(back.units(), units::PER_SECOND);
        for (a, b) in back.data().iter().zip(vol.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(read_svol_header(&path).unwrap().kind, KIND_SCALAR);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svol");
        let data: Vec<bool> = (0..27).map(|i| i % 3 == 0).collect();
        let mask = MaskVolume::from_data([3, 3, 3], [1.0; 3], data).unwrap();
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
        assert_eq!(read_svol_header(&path).unwrap().kind, KIND_MASK);

        let vpath = dir.path().join("v.svol");
        write_svol(&Volume3D::new([3, 3, 3], [1.0; 3], 1.0).unwrap(), &vpath).unwrap();
        assert!(matches!(read_mask(&vpath), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_svol(&header([2, 2, 2]), &[0.0; 8]).unwrap();
        bytes[0] = b'X';
        match decode_svol(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_payload_is_format_error() {
        let bytes = encode_svol(&header([4, 4, 4]), &[0.0; 63]).unwrap();
        match decode_svol(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("payload size mismatch"));
                let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
                assert_eq!(offset, 12 + hlen);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_format_error() {
        let bytes = encode_svol(&header([2, 2, 2]), &[0.0; 8]).unwrap();
        assert!(matches!(
            decode_svol(&bytes[..10]),
            Err(Error::Format { offset: 8, .. })
        ));
        assert!(matches!(
            decode_svol(&bytes[..20]),
            Err(Error::Format { offset: 12, .. })
        ));
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = encode_svol(&header([1, 2, 3]), &[1.5, 0.0, 0.0, 0.0, 0.0, -2.0]).unwrap();
        assert_eq!(&bytes[..8], b"SVOL0001");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(
            json,
            r#"{"dims":[1,2,3],"voxel_size_mm":[0.9,0.9,1.0],"units":"ppm","kind":"scalar"}"#
        );
        assert_eq!(&bytes[12 + hlen..16 + hlen], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + hlen + 24);
    }
}
