//! Disparity and image file I/O: Middlebury-style PFM for float fields,
//! binary PPM/PGM for visualization export and image input.

use crate::tensor::TensorValue;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum ImgError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ImgError>;

fn io_err(path: &Path, source: std::io::Error) -> ImgError {
    ImgError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, detail: impl Into<String>) -> ImgError {
    ImgError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Reads one whitespace-delimited header token, skipping '#' comments.
fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut b = [0u8; 1];
        let n = r.read(&mut b).map_err(|e| io_err(path, e))?;
        if n == 0 {
            if tok.is_empty() {
                return Err(fmt_err(path, "unexpected end of file in header"));
            }
            return Ok(tok);
        }
        let c = b[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

/// Writes a grayscale float field as PFM: "Pf" header, negative scale
/// (little-endian payload), rows bottom to top. Accepts (H,W) or (1,H,W).
pub fn write_pfm(path: &Path, t: &TensorValue) -> Result<()> {
    let (h, w) = match t.shape.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [1, 1, h, w] => (*h, *w),
        sh => return Err(fmt_err(path, format!("expected a grayscale field, got shape {sh:?}"))),
    };
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(f);
    write!(out, "Pf\n{w} {h}\n-1.0\n").map_err(|e| io_err(path, e))?;
    for i in (0..h).rev() {
        for j in 0..w {
            let v = t.data[i * w + j] as f32;
            out.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads a grayscale PFM into a (1, H, W) tensor.
pub fn read_pfm(path: &Path) -> Result<TensorValue> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_token(&mut r, path)?;
    if magic == "PF" {
        return Err(fmt_err(path, "color PFM (\"PF\") not supported for disparity; expected \"Pf\""));
    }
    if magic != "Pf" {
        return Err(fmt_err(path, format!("bad magic {magic:?}, expected \"Pf\"")));
    }
    let w: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| fmt_err(path, "malformed width"))?;
    let h: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| fmt_err(path, "malformed height"))?;
    let scale: f64 = read_token(&mut r, path)?
        .parse()
        .map_err(|_| fmt_err(path, "malformed scale"))?;
    if scale == 0.0 {
        return Err(fmt_err(path, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;
    let mut payload = vec![0u8; h * w * 4];
    r.read_exact(&mut payload)
        .map_err(|_| fmt_err(path, format!("truncated payload, expected {} bytes", h * w * 4)))?;
    let mut data = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let off = (i * w + j) * 4;
            let bytes: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            // PFM stores rows bottom to top.
            data[(h - 1 - i) * w + j] = v as f64;
        }
    }
    Ok(TensorValue::new(vec![1, h, w], data))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a color image as binary P6. Accepts (3,H,W) with values in [0,1].
pub fn write_ppm(path: &Path, image: &TensorValue) -> Result<()> {
    let (h, w) = match image.shape.as_slice() {
        [3, h, w] => (*h, *w),
        [1, 3, h, w] => (*h, *w),
        sh => return Err(fmt_err(path, format!("expected (3,H,W), got shape {sh:?}"))),
    };
    let plane = h * w;
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(f);
    write!(out, "P6\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
    for i in 0..plane {
        let px = [
            quantize(image.data[i]),
            quantize(image.data[plane + i]),
            quantize(image.data[2 * plane + i]),
        ];
        out.write_all(&px).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Writes a grayscale image as binary P5. Accepts (H,W) or (1,H,W) in [0,1].
pub fn write_pgm(path: &Path, gray: &TensorValue) -> Result<()> {
    let (h, w) = match gray.shape.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [1, 1, h, w] => (*h, *w),
        sh => return Err(fmt_err(path, format!("expected a grayscale field, got shape {sh:?}"))),
    };
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(f);
    write!(out, "P5\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = gray.data[..h * w].iter().map(|&v| quantize(v)).collect();
    out.write_all(&bytes).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads a binary P6/P5 image into (3,H,W) or (1,H,W) with values in [0,1].
pub fn read_pnm(path: &Path) -> Result<TensorValue> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(fmt_err(path, format!("bad magic {magic:?}, expected P5 or P6"))),
    };
    let w: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| fmt_err(path, "malformed width"))?;
    let h: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| fmt_err(path, "malformed height"))?;
    let maxval: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| fmt_err(path, "malformed max value"))?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported max value {maxval}, expected 255")));
    }
    let mut payload = vec![0u8; h * w * channels];
    r.read_exact(&mut payload)
        .map_err(|_| fmt_err(path, "truncated pixel data"))?;
    // Interleaved bytes -> planar floats.
    let plane = h * w;
    let mut data = vec![0.0f64; channels * plane];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = payload[i * channels + c] as f64 / 255.0;
        }
    }
    Ok(TensorValue::new(vec![channels, h, w], data))
}

/// Loads a stereo input image: PFM or PPM/PGM by file extension.
pub fn read_image(path: &Path) -> Result<TensorValue> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        _ => read_pnm(path),
    }
}

/// Simple blue-to-red color map of a scalar field for visualization.
pub fn colormap(field: &TensorValue) -> TensorValue {
    let n = field.numel();
    let (lo, hi) = field
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo).max(1e-12);
    let (h, w) = match field.shape.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [1, 1, h, w] => (*h, *w),
        _ => (1, n),
    };
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let t = (field.data[i] - lo) / span;
        // Piecewise-linear jet-style ramp.
        data[i] = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
        data[h * w + i] = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
        data[2 * h * w + i] = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    }
    TensorValue::new(vec![3, h, w], data)
}
