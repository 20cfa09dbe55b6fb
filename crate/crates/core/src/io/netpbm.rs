//! Binary PPM (P6, maxval 255) and PGM (P5, 8- or 16-bit) files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Validation(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// 255 or 65535.
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if maxval != 255 && maxval != 65535 {
            return Err(Error::Validation(format!("maxval {maxval} is neither 255 nor 65535")));
        }
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "{width}x{height} gray image needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::Validation(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval,
            data,
        })
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u16,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("expected magic {}", String::from_utf8_lossy(magic)),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments run to the next token.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                offset: pos,
                msg: format!("expected {} as a decimal number", ["width", "height", "maxval"][i]),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: "number out of range".into(),
            })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Parse {
                offset: pos,
                msg: "expected a single whitespace byte before the payload".into(),
            })
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: 3,
            msg: format!("empty image {width}x{height}"),
        });
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Parse {
            offset: pos - 1,
            msg: format!("unsupported maxval {maxval}, expected 255 or 65535"),
        });
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u16,
        data_start: pos,
    })
}

fn check_payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start + len;
    match bytes.len() {
        n if n < end => Err(Error::Truncated {
            expected: end,
            actual: n,
        }),
        n if n > end => Err(Error::Parse {
            offset: end,
            msg: format!("{} trailing bytes after the payload", n - end),
        }),
        _ => Ok(&bytes[start..end]),
    }
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    if h.maxval != 255 {
        return Err(Error::Parse {
            offset: h.data_start - 1,
            msg: "PPM maxval must be 255".into(),
        });
    }
    let payload = check_payload(bytes, h.data_start, 3 * h.width * h.height)?;
    RgbImage::new(h.width, h.height, payload.to_vec())
}

pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// 16-bit samples are big-endian, as netpbm specifies.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5")?;
    let n = h.width * h.height;
    let data = if h.maxval == 255 {
        check_payload(bytes, h.data_start, n)?.iter().map(|&b| b as u16).collect()
    } else {
        check_payload(bytes, h.data_start, 2 * n)?
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    GrayImage::new(h.width, h.height, h.maxval, data)
}

pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval == 255 {
        out.extend(img.data.iter().map(|&v| v as u8));
    } else {
        out.extend(img.data.iter().flat_map(|v| v.to_be_bytes()));
    }
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn read_ppm_file(path: &Path) -> Result<RgbImage> {
    in_file(path, read_ppm(&read_file(path)?))
}

pub fn write_ppm_file(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &write_ppm(img))
}

pub fn read_pgm_file(path: &Path) -> Result<GrayImage> {
    in_file(path, read_pgm(&read_file(path)?))
}

pub fn write_pgm_file(path: &Path, img: &GrayImage) -> Result<()> {
    write_file(path, &write_pgm(img))
}

/// `[1,3,H,W]` with values in `[0,1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let plane = img.width * img.height;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![1, 3, img.height, img.width], data).expect("sized from image")
}

/// Inverse of [`image_to_tensor`] for `[3,H,W]` or `[1,3,H,W]`; values are
/// clamped to `[0,1]` and rounded.
pub fn image_from_tensor(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = match *t.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        ref s => return Err(Error::invalid("image", format!("expected [3,H,W], got {s:?}"))),
    };
    let plane = h * w;
    let d = t.data();
    let data = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    RgbImage::new(w, h, data)
}

/// Millimetres to metres; 0 stays 0 (no reading).
pub fn depth_from_gray(img: &GrayImage) -> Vec<f32> {
    img.data.iter().map(|&mm| mm as f32 / 1000.0).collect()
}

/// Metres to 16-bit millimetres, rounded and saturated.
pub fn depth_to_gray(width: usize, height: usize, depth: &[f32]) -> Result<GrayImage> {
    let data = depth
        .iter()
        .map(|&m| if m.is_finite() && m > 0.0 { (m * 1000.0).round().min(65535.0) as u16 } else { 0 })
        .collect();
    GrayImage::new(width, height, 65535, data)
}

pub fn mask_to_gray(width: usize, height: usize, mask: &[u8]) -> Result<GrayImage> {
    GrayImage::new(width, height, 255, mask.iter().map(|&v| v as u16).collect())
}

pub fn mask_from_gray(img: &GrayImage) -> Result<Vec<u8>> {
    img.data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::Validation(format!("class id {v} does not fit a mask"))))
        .collect()
}
