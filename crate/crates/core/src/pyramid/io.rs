//! Directory format: `manifest.json` plus `level_<t>.ppm` (binary P6, maxval 255).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PyramidImage, Raster, RGB};
use crate::error::{Error, Result};
use crate::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidManifest {
    pub levels: usize,
    pub base_width: usize,
    pub base_height: usize,
    pub channels: usize,
    pub format: String,
}

fn level_file(t: usize) -> String {
    format!("level_{t}.ppm")
}

/// Writes `img` into `dir` (created if missing). Values are stored as
/// `round(v * 255)`.
pub fn write_pyramid<T: Scalar>(img: &PyramidImage<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = img.meta();
    let manifest = PyramidManifest {
        levels: meta.levels,
        base_width: meta.base_width,
        base_height: meta.base_height,
        channels: meta.channels,
        format: "ppm".into(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    for (t, r) in img.levels().iter().enumerate() {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(level_file(t)))?);
        write!(f, "P6\n{} {}\n255\n", r.width(), r.height())?;
        f.write_all(&r.to_u8())?;
        f.flush()?;
    }
    Ok(())
}

/// Reads a pyramid written by [`write_pyramid`]; every level is checked
/// against the manifest and the level-doubling rule.
pub fn read_pyramid<T: Scalar>(dir: &Path) -> Result<PyramidImage<T>> {
    let raw = fs::read(dir.join(MANIFEST_FILE))?;
    let m: PyramidManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format != "ppm" {
        return Err(Error::Format(format!("unsupported format `{}`", m.format)));
    }
    if m.channels != RGB {
        return Err(Error::Format(format!("expected 3 channels, manifest says {}", m.channels)));
    }
    if m.levels < 3 {
        return Err(Error::Format(format!("manifest declares {} levels", m.levels)));
    }
    let mut levels = Vec::with_capacity(m.levels);
    for t in 0..m.levels {
        let (w, h, bytes) = read_ppm(&dir.join(level_file(t)))?;
        let (ew, eh) = (m.base_width << t, m.base_height << t);
        if (w, h) != (ew, eh) {
            return Err(Error::Format(format!(
                "level {t} is {w}x{h}, manifest implies {ew}x{eh}"
            )));
        }
        levels.push(Raster::from_u8(w, h, RGB, &bytes)?);
    }
    PyramidImage::new(levels)
}

fn ppm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            return Err(Error::Format("truncated PPM header".into()));
        }
        let c = b[0];
        if c == b'#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if ppm_token(&mut r)? != "P6" {
        return Err(Error::Format(format!("{}: not a binary PPM", path.display())));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{}: bad header field `{s}`", path.display())))
    };
    let w = num(ppm_token(&mut r)?)?;
    let h = num(ppm_token(&mut r)?)?;
    let maxval = num(ppm_token(&mut r)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: maxval {maxval} unsupported", path.display())));
    }
    let mut bytes = vec![0u8; w * h * RGB];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("{}: truncated pixel data", path.display())))?;
    Ok((w, h, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized_pyramid() -> PyramidImage<f32> {
        let mut levels = Vec::new();
        for t in 0..3 {
            let s = 3usize << t;
            let bytes: Vec<u8> = (0..s * s * 3).map(|i| ((i * 37 + t) % 256) as u8).collect();
            levels.push(Raster::from_u8(s, s, 3, &bytes).unwrap());
        }
        PyramidImage::new(levels).unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantized_pyramid();
        write_pyramid(&img, dir.path()).unwrap();
        let back: PyramidImage<f32> = read_pyramid(dir.path()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn manifest_violating_doubling_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pyramid(&quantized_pyramid(), dir.path()).unwrap();
        let bad = PyramidManifest {
            levels: 3,
            base_width: 4,
            base_height: 3,
            channels: 3,
            format: "ppm".into(),
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(read_pyramid::<f32>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_level_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pyramid(&quantized_pyramid(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("level_2.ppm")).unwrap();
        assert!(matches!(read_pyramid::<f32>(dir.path()), Err(Error::Io(_))));
    }
}
