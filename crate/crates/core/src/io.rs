//! Image files, raw float dumps and their text sidecars.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, PnmHeader, PnmSubtype, SampleEncoding};
use image::ColorType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(e: image::ImageError) -> Error {
    Error::Format(e.to_string())
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} too large")))
}

/// Writes a `[3,h,w]` image with values in `[0,1]` as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3("write_ppm")?;
    if c != 3 {
        return Err(Error::shape("write_ppm", img.shape(), &[3, h, w]));
    }
    let mut buf = vec![0u8; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = img.data()[(ch * h + i) * w + j].clamp(0.0, 1.0);
                buf[(i * w + j) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .encode(&buf[..], to_u32(w)?, to_u32(h)?, ColorType::Rgb8)
        .map_err(image_err)
}

/// Reads a PPM file into a `[3,h,w]` tensor in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(image_err)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for (j, i, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out.data_mut()[(ch * h + i as usize) * w + j as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes a `[1,h,w]` map as 16-bit binary PGM (P5, maxval 65535) through
/// `v = round((x − lo)/(hi − lo)·65535)`, with `lo`/`hi` the map's extremes.
/// Returns `(lo, hi)`.
pub fn write_pgm16(path: &Path, map: &Tensor) -> Result<(f64, f64)> {
    let (c, h, w) = map.dims3("write_pgm16")?;
    if c != 1 {
        return Err(Error::shape("write_pgm16", map.shape(), &[1, h, w]));
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: Vec<u16> = map
        .data()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let file = BufWriter::new(File::create(path)?);
    let header = PnmHeader::from(GraymapHeader {
        encoding: SampleEncoding::Binary,
        height: to_u32(h)?,
        width: to_u32(w)?,
        maxwhite: 65535,
    });
    PnmEncoder::new(file)
        .with_header(header)
        .encode(&buf[..], to_u32(w)?, to_u32(h)?, ColorType::L16)
        .map_err(image_err)?;
    Ok((lo, hi))
}

/// Text sidecar describing a raw dump or a visualization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub units: String,
    pub command: String,
    /// Affine map of a visualization, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, meta: &Sidecar) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(sidecar_path(path))?;
    toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

/// Little-endian f32, row-major, plus `<path>.meta`.
pub fn write_raw_f32(path: &Path, t: &Tensor, units: &str, command: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * t.len());
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    write_sidecar(
        path,
        &Sidecar {
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
            units: units.into(),
            command: command.into(),
            mapping: None,
            lo: None,
            hi: None,
        },
    )
}

pub fn read_raw_f32(path: &Path) -> Result<Tensor> {
    let meta = read_sidecar(path)?;
    if meta.dtype != "f32le" {
        return Err(Error::Format(format!("{}: unsupported dtype {}", path.display(), meta.dtype)));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: truncated f32 data", path.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(meta.shape, data)
}

/// Writes a 16-bit visualization of a `[1,h,w]` map with its sidecar.
pub fn write_visualization(path: &Path, map: &Tensor, units: &str, command: &str) -> Result<()> {
    let (lo, hi) = write_pgm16(path, map)?;
    write_sidecar(
        path,
        &Sidecar {
            shape: map.shape().to_vec(),
            dtype: "u16 pgm".into(),
            units: units.into(),
            command: command.into(),
            mapping: Some("value = round((x - lo) / (hi - lo) * 65535)".into()),
            lo: Some(lo),
            hi: Some(hi),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let t = Rng::new(1).tensor(&[1, 3, 4], 0.0, 10.0);
        write_raw_f32(&p, &t, "depth units", "test").unwrap();
        let back = read_raw_f32(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.max_abs_diff(&t) < 1e-5);
        assert_eq!(read_sidecar(&p).unwrap().units, "depth units");
    }

    #[test]
    fn ppm_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let t = Rng::new(2).tensor(&[3, 5, 7], 0.0, 1.0);
        write_ppm(&p, &t).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[..2], b"P6");
        let back = read_ppm(&p).unwrap();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn pgm_header_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let t = Tensor::new(vec![1, 1, 3], vec![2.0, 4.0, 3.0]).unwrap();
        write_visualization(&p, &t, "depth units", "test").unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert!(String::from_utf8_lossy(&bytes).contains("65535"));
        // big-endian samples: 0, 65535, 32768
        assert_eq!(&bytes[bytes.len() - 6..], &[0x00, 0x00, 0xff, 0xff, 0x80, 0x00]);
        let meta = read_sidecar(&p).unwrap();
        assert_eq!((meta.lo, meta.hi), (Some(2.0), Some(4.0)));
    }
}
