//! Bit-exact tensor serialization (the RDT1 container) and dataset
//! manifests.
//!
//! RDT1 layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "RDT1"
//! ndim    u32
//! dims    ndim x u32
//! dtype   u32      1 = 32-bit IEEE-754, 2 = 64-bit IEEE-754
//! payload product(dims) * width bytes, row-major little-endian
//! ```
//!
//! Depth maps are stored as rank-4 tensors with one channel; non-positive
//! values are the invalid-pixel sentinel and come back masked out.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::DepthMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

const MAGIC: [u8; 4] = *b"RDT1";

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn save_tensor<T: Scalar>(t: &Tensor4<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, 4, path)?;
    let (n, c, h, wd) = t.shape();
    for dim in [n, c, h, wd] {
        let dim = u32::try_from(dim).map_err(|_| Error::format(path, format!("dimension {dim} exceeds u32")))?;
        write_u32(&mut w, dim, path)?;
    }
    write_u32(&mut w, T::DTYPE_CODE, path)?;
    match T::DTYPE_CODE {
        1 => {
            for &v in t.data() {
                w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        _ => {
            for &v in t.data() {
                w.write_all(&v.to_f64_lossy().to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Depth maps serialize as (n, 1, h, w) rank-4 tensors in 64-bit precision;
/// masked pixels are written as 0 (the non-positive invalid sentinel).
pub fn save_depth(d: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let (n, h, w) = d.shape();
    let data: Vec<f64> = d
        .data()
        .iter()
        .zip(d.mask())
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect();
    let t = Tensor4::from_vec((n, 1, h, w), data)?;
    save_tensor(&t, path)
}

struct RawTensor {
    dims: Vec<u32>,
    dtype: u32,
    values: Vec<f64>,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format(path, format!("truncated {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

fn load_raw(path: &Path) -> Result<RawTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected \"RDT1\"")));
    }
    let ndim = read_u32(&mut r, path, "ndim")?;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(path, format!("unreasonable ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut volume: u64 = 1;
    for i in 0..ndim {
        let d = read_u32(&mut r, path, "dims")?;
        if d == 0 {
            return Err(Error::format(path, format!("dimension {i} is zero")));
        }
        volume = volume
            .checked_mul(d as u64)
            .filter(|&v| v <= u32::MAX as u64)
            .ok_or_else(|| Error::format(path, "dims product overflows 32 bits"))?;
        dims.push(d);
    }
    let dtype = read_u32(&mut r, path, "dtype")?;
    let width = match dtype {
        1 => 4usize,
        2 => 8usize,
        other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
    };

    let expected = volume as usize * width;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }

    let values = match dtype {
        1 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Ok(RawTensor { dims, dtype, values })
}

/// Loads a rank-4 tensor, converting the stored dtype to `T`. A round trip
/// through [`save_tensor`] with matching `T` is bit-exact.
pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    if raw.dims.len() != 4 {
        return Err(Error::format(path, format!("expected rank 4, got rank {}", raw.dims.len())));
    }
    let shape = (
        raw.dims[0] as usize,
        raw.dims[1] as usize,
        raw.dims[2] as usize,
        raw.dims[3] as usize,
    );
    let data = raw.values.into_iter().map(T::from_f64).collect();
    Tensor4::from_vec(shape, data)
}

/// Dtype code stored in a tensor file, without loading the payload.
pub fn tensor_dtype(path: impl AsRef<Path>) -> Result<u32> {
    Ok(load_raw(path.as_ref())?.dtype)
}

/// Loads a depth map from a rank-4, single-channel tensor file. Non-positive
/// values are masked invalid.
pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let t: Tensor4<f64> = load_tensor(path)?;
    let (n, c, h, w) = t.shape();
    if c != 1 {
        return Err(Error::format(path, format!("depth maps have 1 channel, got {c}")));
    }
    DepthMap::from_values((n, h, w), t.into_vec())
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One manifest record: an image tensor path, its depth map path and the
/// split it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub split: Split,
}

/// Parses a comma-separated manifest. Relative paths resolve against the
/// manifest's directory; every referenced file must exist and carry a valid
/// RDT1 header, and image paths must be unique.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_number = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_number,
                msg: format!("expected 3 comma-separated fields, got {}", fields.len()),
            });
        }
        let split = Split::parse(fields[2]).ok_or_else(|| Error::Parse {
            line: line_number,
            msg: format!("unknown split tag {:?} (expected train or test)", fields[2]),
        })?;
        let image = base.join(fields[0]);
        let depth = base.join(fields[1]);
        if !seen.insert(image.clone()) {
            return Err(Error::Parse {
                line: line_number,
                msg: format!("duplicate image path {}", image.display()),
            });
        }
        for p in [&image, &depth] {
            if !p.is_file() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                ));
            }
            // header check: magic, dims and dtype must parse
            load_raw(p)?;
        }
        entries.push(ManifestEntry { image, depth, split });
    }
    Ok(entries)
}

/// Writes a manifest with paths relative to its own directory.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, String, Split)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (image, depth, split) in entries {
        out.push_str(&format!("{image},{depth},{}\n", split.name()));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Hex-encoded SHA-256, used for config and dataset digests.
pub fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("rdt-io-{}-{:?}", std::process::id(), std::thread::current().id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_f64_is_bit_exact() {
        let dir = tmpdir();
        let path = dir.join("t64.rdt");
        let t = Tensor4::from_vec((2, 3, 2, 2), (0..24).map(|i| (i as f64).sin() * 1e-3).collect()).unwrap();
        save_tensor(&t, &path).unwrap();
        let back: Tensor4<f64> = load_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn round_trip_f32_is_bit_exact() {
        let dir = tmpdir();
        let path = dir.join("t32.rdt");
        let t = Tensor4::<f32>::from_vec((1, 2, 2, 2), (0..8).map(|i| (i as f32).cos()).collect()).unwrap();
        save_tensor(&t, &path).unwrap();
        let back: Tensor4<f32> = load_tensor(&path).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn known_payload_encoding() {
        let dir = tmpdir();
        let path = dir.join("enc.rdt");
        let t = Tensor4::<f32>::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensor(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = 4 + 4 + 4 * 4 + 4;
        assert_eq!(&bytes[..4], b"RDT1");
        assert_eq!(
            &bytes[header_len..],
            &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40, 0x00, 0x00, 0x80, 0x40]
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmpdir();
        let path = dir.join("bad.rdt");
        std::fs::write(&path, b"NOPE\x04\x00\x00\x00").unwrap();
        assert!(matches!(load_tensor::<f64>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_rejected_with_counts() {
        let dir = tmpdir();
        let path = dir.join("trunc.rdt");
        let t = Tensor4::<f32>::filled((1, 1, 2, 2), 1.0).unwrap();
        save_tensor(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        match load_tensor::<f32>(&path) {
            Err(Error::Format { msg, .. }) => {
                assert!(msg.contains("15") && msg.contains("16"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn overflowing_dims_rejected_before_allocation() {
        let dir = tmpdir();
        let path = dir.join("huge.rdt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RDT1");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for d in [0xFFFF_FFFFu32, 0xFFFF_FFFF, 2, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&1u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_tensor::<f32>(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("overflow"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn depth_round_trip_preserves_mask() {
        let dir = tmpdir();
        let path = dir.join("depth.rdt");
        let d = DepthMap::from_values((1, 2, 2), vec![1.5, -1.0, 2.5, 0.0]).unwrap();
        save_depth(&d, &path).unwrap();
        let back = load_depth(&path).unwrap();
        assert_eq!(back.mask(), &[true, false, true, false]);
        assert_eq!(back.data()[0], 1.5);
        assert_eq!(back.data()[2], 2.5);
    }

    #[test]
    fn manifest_empty_and_ordering() {
        let dir = tmpdir();
        let m = dir.join("empty.manifest");
        std::fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());

        for i in 0..3 {
            let t = Tensor4::<f32>::filled((1, 3, 2, 2), i as f32).unwrap();
            save_tensor(&t, dir.join(format!("img{i}.rdt"))).unwrap();
            let d = DepthMap::from_values((1, 2, 2), vec![1.0; 4]).unwrap();
            save_depth(&d, dir.join(format!("dep{i}.rdt"))).unwrap();
        }
        let m = dir.join("three.manifest");
        std::fs::write(&m, "img0.rdt,dep0.rdt,train\nimg1.rdt,dep1.rdt,train\nimg2.rdt,dep2.rdt,test\n").unwrap();
        let entries = load_manifest(&m).unwrap();
        assert_eq!(entries.len(), 3);
        assert!(entries[0].image.ends_with("img0.rdt"));
        assert!(entries[2].image.ends_with("img2.rdt"));
        assert_eq!(entries[2].split, Split::Test);
    }

    #[test]
    fn manifest_arity_error_names_line() {
        let dir = tmpdir();
        let t = Tensor4::<f32>::filled((1, 3, 2, 2), 0.0).unwrap();
        save_tensor(&t, dir.join("a.rdt")).unwrap();
        let d = DepthMap::from_values((1, 2, 2), vec![1.0; 4]).unwrap();
        save_depth(&d, dir.join("b.rdt")).unwrap();
        let m = dir.join("arity.manifest");
        std::fs::write(&m, "a.rdt,b.rdt,train\nonly-two,fields\n").unwrap();
        match load_manifest(&m) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_dangling_path_names_file() {
        let dir = tmpdir();
        let m = dir.join("dangling.manifest");
        std::fs::write(&m, "missing.rdt,alsomissing.rdt,train\n").unwrap();
        match load_manifest(&m) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("missing.rdt")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_duplicate_image_rejected() {
        let dir = tmpdir();
        let t = Tensor4::<f32>::filled((1, 3, 2, 2), 0.0).unwrap();
        save_tensor(&t, dir.join("dup.rdt")).unwrap();
        let d = DepthMap::from_values((1, 2, 2), vec![1.0; 4]).unwrap();
        save_depth(&d, dir.join("dupd.rdt")).unwrap();
        let m = dir.join("dup.manifest");
        std::fs::write(&m, "dup.rdt,dupd.rdt,train\ndup.rdt,dupd.rdt,test\n").unwrap();
        match load_manifest(&m) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
