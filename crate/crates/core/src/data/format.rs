//! The "TANO" binary blob format and the dataset directory layout.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TANO"
//! 4       4     u32 version (1 = f32 payload, 2 = f64 payload)
//! 8       4     u32 count
//! 12      12    u32 C, H, W
//! 24      ...   count·C·H·W little-endian floats
//! ```
//!
//! Datasets use version 1. Checkpoint parameters use version 2 so that a
//! save/load cycle is lossless for 64-bit training state.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest};
use crate::error::{Result, TanoError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TANO";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlobHeader {
    pub version: u32,
    pub count: u32,
    pub c: u32,
    pub h: u32,
    pub w: u32,
}

impl BlobHeader {
    fn elements(&self) -> usize {
        self.count as usize * self.c as usize * self.h as usize * self.w as usize
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        for v in [self.version, self.count, self.c, self.h, self.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<BlobHeader> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TanoError::format(path, 0, "bad magic, expected \"TANO\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TanoError::format(
            path,
            bytes.len() as u64,
            "truncated header",
        ));
    }
    let header = BlobHeader {
        version: u32_at(bytes, 4),
        count: u32_at(bytes, 8),
        c: u32_at(bytes, 12),
        h: u32_at(bytes, 16),
        w: u32_at(bytes, 20),
    };
    if header.version != VERSION_F32 && header.version != VERSION_F64 {
        return Err(TanoError::format(
            path,
            4,
            format!("unsupported version {}", header.version),
        ));
    }
    let width = if header.version == VERSION_F32 { 4 } else { 8 };
    let expected = HEADER_LEN + header.elements() * width;
    if bytes.len() < expected {
        return Err(TanoError::format(
            path,
            bytes.len() as u64,
            format!(
                "truncated payload: {} bytes, header promises {expected}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(TanoError::format(
            path,
            expected as u64,
            "trailing bytes after payload",
        ));
    }
    Ok(header)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TanoError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| TanoError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TanoError::io(path, e))
}

/// Writes `count` images of `c×h×w` as a version-1 blob.
pub fn write_image_blob(path: &Path, count: usize, chw: [usize; 3], data: &[f32]) -> Result<()> {
    if data.len() != count * chw.iter().product::<usize>() {
        return Err(TanoError::dim(
            "image blob payload does not match its header",
        ));
    }
    let header = BlobHeader {
        version: VERSION_F32,
        count: count as u32,
        c: chw[0] as u32,
        h: chw[1] as u32,
        w: chw[2] as u32,
    };
    let mut bytes = header.encode();
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_image_blob(path: &Path) -> Result<(BlobHeader, Vec<f32>)> {
    let bytes = read_file(path)?;
    let header = parse_header(path, &bytes)?;
    if header.version != VERSION_F32 {
        return Err(TanoError::format(path, 4, "image blobs must be version 1"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((header, data))
}

/// Folds an arbitrary shape (rank ≤ 4) into `count, C, H, W`.
fn shape_to_header(shape: &[usize]) -> Result<[u32; 4]> {
    if shape.len() > 4 {
        return Err(TanoError::dim(format!(
            "cannot store rank-{} tensor",
            shape.len()
        )));
    }
    let mut dims = [1u32; 4];
    for (i, &d) in shape.iter().enumerate() {
        dims[i] = u32::try_from(d).map_err(|_| TanoError::dim("dimension exceeds u32"))?;
    }
    Ok(dims)
}

/// Encodes a tensor as a version-2 (f64) blob. The exact shape must be kept
/// elsewhere (the checkpoint manifest) for ranks other than 4.
pub fn tensor_blob_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let [count, c, h, w] = shape_to_header(t.shape())?;
    let mut bytes = BlobHeader {
        version: VERSION_F64,
        count,
        c,
        h,
        w,
    }
    .encode();
    bytes.reserve(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn write_tensor_blob(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &tensor_blob_bytes(t)?)
}

pub fn read_tensor_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    decode_tensor_blob(path, &read_file(path)?, shape)
}

/// Parses blob `bytes` read from `path` (used only for error reporting).
pub fn decode_tensor_blob(path: &Path, bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let header = parse_header(path, bytes)?;
    if header.version != VERSION_F64 {
        return Err(TanoError::format(
            path,
            4,
            "parameter blobs must be version 2",
        ));
    }
    let expect = shape_to_header(shape)?;
    if [header.count, header.c, header.h, header.w] != expect {
        return Err(TanoError::format(
            path,
            8,
            format!("blob dims do not match manifest shape {shape:?}"),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn blob_path(dir: &Path, domain: usize, class: usize) -> PathBuf {
    dir.join("blobs").join(format!("d{domain}_c{class}.tano"))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TanoError::Json {
        path: path.into(),
        source: e,
    })?;
    write_file(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| TanoError::Json {
        path: path.into(),
        source: e,
    })
}

/// `manifest.json` plus `blobs/d{r}_c{c}.tano`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    write_json(&dir.join("manifest.json"), &dataset.manifest)?;
    let m = &dataset.manifest;
    for d in 0..m.num_domains() {
        for c in 0..m.classes.len() {
            write_image_blob(
                &blob_path(dir, d, c),
                m.counts[d][c],
                [m.channels, m.image_size, m.image_size],
                dataset.blob(d, c),
            )?;
        }
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    manifest.validate()?;
    let mut blobs = Vec::with_capacity(manifest.num_domains() * manifest.classes.len());
    for d in 0..manifest.num_domains() {
        for c in 0..manifest.classes.len() {
            let path = blob_path(dir, d, c);
            let (h, data) = read_image_blob(&path)?;
            let expected = [
                manifest.counts[d][c] as u32,
                manifest.channels as u32,
                manifest.image_size as u32,
                manifest.image_size as u32,
            ];
            if [h.count, h.c, h.h, h.w] != expected {
                return Err(TanoError::format(
                    &path,
                    8,
                    "blob header disagrees with manifest",
                ));
            }
            blobs.push(data);
        }
    }
    Dataset::from_parts(manifest, blobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_24_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tano");
        let data = vec![0.5f32; 100 * 3 * 16 * 16];
        write_image_blob(&p, 100, [3, 16, 16], &data).unwrap();
        let len = fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len - data.len() * 4, 24);
        assert_eq!(HEADER_LEN, 4 + 4 + 4 + 12);
        let (h, back) = read_image_blob(&p).unwrap();
        assert_eq!((h.count, h.c, h.h, h.w), (100, 3, 16, 16));
        assert_eq!(back, data);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tano");
        write_image_blob(&p, 2, [1, 2, 2], &[0.0; 8]).unwrap();
        let bytes = fs::read(&p).unwrap();

        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match read_image_blob(&p) {
            Err(TanoError::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(
            read_image_blob(&p),
            Err(TanoError::Format { offset: 0, .. })
        ));
        let mut ver = bytes.clone();
        ver[4] = 9;
        fs::write(&p, &ver).unwrap();
        assert!(matches!(
            read_image_blob(&p),
            Err(TanoError::Format { offset: 4, .. })
        ));
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(read_image_blob(&p).unwrap_err().exit_code() == 4);
    }

    #[test]
    fn tensor_blob_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tano");
        let t = Tensor::new(
            [3, 2],
            vec![0.1, -1e-300, 3.5, f64::MIN_POSITIVE, 7.0, 1.0 / 3.0],
        )
        .unwrap();
        write_tensor_blob(&p, &t).unwrap();
        assert_eq!(read_tensor_blob(&p, &[3, 2]).unwrap(), t);
        assert!(read_tensor_blob(&p, &[2, 3]).is_err());
    }
}
